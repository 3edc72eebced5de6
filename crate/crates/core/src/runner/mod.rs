//! Experiment orchestration: the update-vs-retrain benchmark, ablation sweeps
//! and active-learning runs, with CSV and JSON output.

pub mod config;
pub mod container;

use std::path::Path;
use std::time::Instant;

use crate::active::{run_al, AlConfig, LearningCurveRecord};
use crate::data::{
    align_width, gen_box_frame_ood, gen_clusters, gen_two_moons, holdout_split, load_csv, split_protocol, Dataset,
    Standardizer,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{accuracy, auroc, nll, MetricRecord, Phase};
use crate::model::{sub_seed, Model, ModelConfig};

pub use config::{AblationSpec, AlArm, DatasetSpec, ExperimentConfig, Protocol};
pub use container::{load_model, save_model, SavedModel};

pub const RESULTS_HEADER: [&str; 12] = [
    "dataset",
    "model",
    "seed",
    "n_train",
    "phase",
    "acc",
    "nll",
    "auroc_entropy",
    "auroc_variance",
    "time_update_s",
    "time_retrain_s",
    "time_predict_s",
];

pub const AL_HEADER: [&str; 7] = ["dataset", "strategy", "mode", "seed", "cycle", "n_labeled", "acc"];

/// Seed of the fixed test and OOD draws for synthetic data.
const FIXED_SEED: u64 = 0;

/// Data loaded once per run.
#[derive(Clone, Debug)]
pub enum Source {
    Moons {
        noise: f64,
        moons_test: Dataset,
        cluster_test: Dataset,
        ood: Dataset,
        al_pool: usize,
    },
    Table {
        data: Dataset,
        test_size: usize,
        ood: Option<Dataset>,
    },
}

impl Source {
    pub fn load(spec: &DatasetSpec) -> Result<Source> {
        match spec {
            DatasetSpec::TwoMoons {
                noise,
                test_size,
                cluster_test,
                ood_size,
                al_pool,
            } => {
                let moons = gen_two_moons(*test_size, *noise, sub_seed(FIXED_SEED, "moons-test"))?;
                let clusters = gen_clusters(*cluster_test, sub_seed(FIXED_SEED, "clusters-test"));
                let ood = gen_box_frame_ood(&moons.x, *ood_size, sub_seed(FIXED_SEED, "moons-ood"))?;
                Ok(Source::Moons {
                    noise: *noise,
                    moons_test: moons,
                    cluster_test: clusters,
                    ood,
                    al_pool: *al_pool,
                })
            }
            DatasetSpec::Csv {
                path,
                name,
                k,
                test_size,
                ood_path,
            } => {
                let mut data = load_csv(path, *k)?;
                data.name = name.clone().unwrap_or_else(|| {
                    path.file_stem()
                        .map(|s| s.to_string_lossy().to_uppercase().replace('_', "-"))
                        .unwrap_or_else(|| "CSV".into())
                });
                let ood = match ood_path {
                    Some(p) => {
                        let o = load_csv(p, None)?;
                        let x = align_width(&o.x, data.n_features());
                        Some(Dataset::new(o.name, x, o.y, o.k)?)
                    }
                    None => None,
                };
                Ok(Source::Table {
                    data,
                    test_size: *test_size,
                    ood,
                })
            }
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Source::Moons { moons_test, .. } => &moons_test.name,
            Source::Table { data, .. } => &data.name,
        }
    }
}

/// Standardized data of one benchmark cell.
#[derive(Clone, Debug)]
pub struct CellData {
    pub train: Dataset,
    pub new: Dataset,
    pub test: Dataset,
    pub ood: Option<Dataset>,
    pub scaler: Standardizer,
}

pub fn cell_data(source: &Source, n_train: usize, n_new: usize, seed: u64) -> Result<CellData> {
    let (train, new, test, ood) = match source {
        Source::Moons {
            noise,
            moons_test,
            cluster_test,
            ood,
            ..
        } => {
            if n_new % 4 != 0 {
                return Err(Error::Config("two-moons new data comes in four equal clusters".into()));
            }
            let train = gen_two_moons(n_train, *noise, sub_seed(seed, "moons-train"))?;
            let new = gen_clusters(n_new / 4, sub_seed(seed, "clusters"));
            let test = moons_test.concat(cluster_test)?.with_name(moons_test.name.clone());
            (train, new, test, Some(ood.clone()))
        }
        Source::Table { data, test_size, ood } => {
            let split = split_protocol(data, n_train, n_new, *test_size, seed)?;
            (split.train, split.new, split.test, ood.clone())
        }
    };
    let scaler = Standardizer::fit(&train.x);
    Ok(CellData {
        train: scaler.transform_dataset(&train)?,
        new: scaler.transform_dataset(&new)?,
        test: scaler.transform_dataset(&test)?,
        ood: ood.map(|o| scaler.transform_dataset(&o)).transpose()?,
        scaler,
    })
}

/// Outcome of one (n_train, seed) cell.
#[derive(Clone, Debug)]
pub struct Cell {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub n_train: usize,
    pub phases: Vec<Phase>,
    pub outcome: std::result::Result<Vec<MetricRecord>, String>,
    /// Effective sample size after the MC update, for reweighted models.
    pub ess_after_update: Option<f64>,
}

fn evaluate(model: &Model, data: &CellData, exec: Exec) -> Result<(f64, f64, f64, f64, f64)> {
    let start = Instant::now();
    let (probs, ent, var) = model.predict_with_scores(&data.test.x, exec)?;
    let predict_time = start.elapsed().as_secs_f64();
    let acc = accuracy(&probs, &data.test.y)?;
    let loss = nll(&probs, &data.test.y)?;
    let (auc_e, auc_v) = match &data.ood {
        Some(ood) => {
            let (_, ood_ent, ood_var) = model.predict_with_scores(&ood.x, exec)?;
            (auroc(&ent, &ood_ent)?, auroc(&var, &ood_var)?)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok((acc, loss, auc_e, auc_v, predict_time))
}

fn run_cell(
    model_cfg: &ModelConfig,
    source: &Source,
    protocol: &Protocol,
    n_train: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<MetricRecord>, Option<f64>)> {
    let data = cell_data(source, n_train, protocol.n_new, seed)?;
    let record = |phase: Phase, m: (f64, f64, f64, f64, f64), upd: Option<f64>, retr: Option<f64>| MetricRecord {
        dataset: source.name().to_string(),
        model: model_cfg.kind.as_str().to_string(),
        seed,
        n_train,
        phase,
        acc: m.0,
        nll: m.1,
        auroc_entropy: m.2,
        auroc_variance: m.3,
        time_update_s: upd,
        time_retrain_s: retr,
        time_predict_s: Some(m.4),
    };
    let mut rows = Vec::new();
    let mut ess = None;
    if protocol.phases.is_empty() {
        return Ok((rows, ess));
    }
    let baseline = Model::train(model_cfg, &data.train, sub_seed(seed, "baseline"), exec)?;
    if protocol.phases.contains(&Phase::Baseline) {
        rows.push(record(Phase::Baseline, evaluate(&baseline, &data, exec)?, None, None));
    }
    if protocol.phases.contains(&Phase::Update) {
        let start = Instant::now();
        let updated = baseline.update(&data.new, exec)?;
        let t = start.elapsed().as_secs_f64();
        ess = updated.ess();
        rows.push(record(Phase::Update, evaluate(&updated, &data, exec)?, Some(t), None));
    }
    if protocol.phases.contains(&Phase::Retrain) {
        let union = data.train.concat(&data.new)?;
        let start = Instant::now();
        let retrained = Model::train(model_cfg, &union, sub_seed(seed, "retrain"), exec)?;
        let t = start.elapsed().as_secs_f64();
        rows.push(record(Phase::Retrain, evaluate(&retrained, &data, exec)?, None, Some(t)));
    }
    Ok((rows, ess))
}

/// Baseline / update / retrain comparison over the protocol grid. Failed cells
/// are kept with their error message; rows come out in grid order
/// (n_train, then seed, then phase).
pub fn run_update_benchmark(cfg: &ExperimentConfig, source: &Source, exec: Exec) -> Result<Vec<Cell>> {
    cfg.validate()?;
    run_benchmark_with(&cfg.model, &cfg.protocol, source, exec)
}

fn run_benchmark_with(model_cfg: &ModelConfig, protocol: &Protocol, source: &Source, exec: Exec) -> Result<Vec<Cell>> {
    let grid: Vec<(usize, u64)> = protocol
        .n_train
        .iter()
        .flat_map(|&n| protocol.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let cells = exec.map(grid.len(), |i| {
        let (n_train, seed) = grid[i];
        let result = run_cell(model_cfg, source, protocol, n_train, seed, exec);
        Cell {
            dataset: source.name().to_string(),
            model: model_cfg.kind.as_str().to_string(),
            seed,
            n_train,
            phases: protocol.phases.clone(),
            ess_after_update: result.as_ref().ok().and_then(|r| r.1),
            outcome: result.map(|r| r.0).map_err(|e| e.to_string()),
        }
    });
    Ok(cells)
}

/// One benchmark per value of the swept hyperparameter.
pub fn run_ablation(cfg: &ExperimentConfig, source: &Source, exec: Exec) -> Result<Vec<(String, Vec<Cell>)>> {
    cfg.validate()?;
    let spec = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("ablate needs an 'ablation' section".into()))?;
    let mut blocks = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let model_cfg = cfg.model_with(&spec.parameter, value)?;
        blocks.push((value.to_string(), run_benchmark_with(&model_cfg, &cfg.protocol, source, exec)?));
    }
    Ok(blocks)
}

/// Pool and test set for active learning, standardized on the pool.
pub fn al_data(source: &Source) -> Result<(Dataset, Dataset)> {
    let (pool, test) = match source {
        Source::Moons {
            noise,
            moons_test,
            al_pool,
            ..
        } => {
            let name = if al_pool % 1000 == 0 {
                format!("TWO-MOONS-{}K", al_pool / 1000)
            } else {
                format!("TWO-MOONS-{al_pool}")
            };
            let pool = gen_two_moons(*al_pool, *noise, sub_seed(FIXED_SEED, "al-pool"))?.with_name(name.clone());
            (pool, moons_test.clone().with_name(name))
        }
        Source::Table { data, test_size, .. } => {
            let (pool, test) = holdout_split(data, *test_size)?;
            (pool, test)
        }
    };
    let scaler = Standardizer::fit(&pool.x);
    Ok((scaler.transform_dataset(&pool)?, scaler.transform_dataset(&test)?))
}

/// Learning curves for every configured strategy/mode arm.
pub fn run_al_experiment(cfg: &ExperimentConfig, source: &Source, exec: Exec) -> Result<Vec<LearningCurveRecord>> {
    let (pool, test) = al_data(source)?;
    let mut out = Vec::new();
    for arm in cfg.arms() {
        let al = AlConfig {
            strategy: arm.strategy,
            mode: arm.mode,
            ..cfg.al.clone()
        };
        out.extend(run_al(&al, &cfg.model, &pool, &test, exec)?);
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn cell_rows(cell: &Cell) -> Vec<Vec<String>> {
    let key = |phase: Phase| {
        vec![
            cell.dataset.clone(),
            cell.model.clone(),
            cell.seed.to_string(),
            cell.n_train.to_string(),
            phase.as_str().to_string(),
        ]
    };
    match &cell.outcome {
        Ok(records) => records
            .iter()
            .map(|r| {
                let mut row = key(r.phase);
                row.extend([
                    fmt(r.acc),
                    fmt(r.nll),
                    fmt(r.auroc_entropy),
                    fmt(r.auroc_variance),
                    fmt_opt(r.time_update_s),
                    fmt_opt(r.time_retrain_s),
                    fmt_opt(r.time_predict_s),
                ]);
                row
            })
            .collect(),
        Err(msg) => cell
            .phases
            .iter()
            .map(|&p| {
                let mut row = key(p);
                row.push(format!("ERROR: {msg}"));
                row.extend(std::iter::repeat_n(String::new(), 6));
                row
            })
            .collect(),
    }
}

pub fn write_results(path: impl AsRef<Path>, cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for cell in cells {
        for row in cell_rows(cell) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation(path: impl AsRef<Path>, parameter: &str, blocks: &[(String, Vec<Cell>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["parameter", "value"];
    header.extend(RESULTS_HEADER);
    w.write_record(&header)?;
    for (value, cells) in blocks {
        for cell in cells {
            for row in cell_rows(cell) {
                let mut full = vec![parameter.to_string(), value.clone()];
                full.extend(row);
                w.write_record(&full)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_learning_curves(path: impl AsRef<Path>, records: &[LearningCurveRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AL_HEADER)?;
    for r in records {
        w.write_record([
            r.dataset.clone(),
            r.strategy.as_str().to_string(),
            r.mode.as_str().to_string(),
            r.seed.to_string(),
            r.cycle.to_string(),
            r.n_labeled.to_string(),
            fmt(r.acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the effective configuration next to the results.
pub fn write_resolved_config(dir: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(dir.as_ref().join("resolved_config.json"), text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::OptimizerConfig;
    use crate::exec::with_threads;
    use crate::model::{BackboneKind, ModelKind};

    fn small(kind: ModelKind) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                kind,
                backbone: if kind == ModelKind::Ensemble {
                    BackboneKind::Mlp
                } else {
                    BackboneKind::Identity
                },
                ensemble_members: 2,
                rff_features: 32,
                kernel_scale: 1.0,
                mc_members: 50,
                optimizer: OptimizerConfig {
                    epochs: 2,
                    ..OptimizerConfig::default()
                },
                ..ModelConfig::default()
            },
            protocol: Protocol {
                n_train: vec![16, 32],
                seeds: vec![0, 1, 2],
                ..Protocol::default()
            },
            dataset: DatasetSpec::TwoMoons {
                noise: 0.1,
                test_size: 40,
                cluster_test: 5,
                ood_size: 30,
                al_pool: 1000,
            },
            ..ExperimentConfig::default()
        }
    }

    fn strip_times(path: &Path) -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(path).unwrap();
        r.records()
            .map(|row| row.unwrap().iter().take(9).map(String::from).collect())
            .collect()
    }

    #[test]
    fn grid_rows_in_order_with_fixed_header() {
        let cfg = small(ModelKind::SngpLa);
        let source = Source::load(&cfg.dataset).unwrap();
        let cells = run_update_benchmark(&cfg, &source, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results(&path, &cells).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER.join(","));
        let rows = strip_times(&path);
        assert_eq!(rows.len(), 2 * 3 * 3);
        assert_eq!(rows[0][2..5], ["0", "16", "baseline"]);
        assert_eq!(rows[1][4], "update");
        assert_eq!(rows[5][2..5], ["1", "16", "retrain"]);
        assert_eq!(rows[17][2..5], ["2", "32", "retrain"]);
    }

    #[test]
    fn baseline_rows_do_not_depend_on_later_phases() {
        let full = small(ModelKind::SngpLa);
        let mut only = full.clone();
        only.protocol.phases = vec![Phase::Baseline];
        let source = Source::load(&full.dataset).unwrap();
        let a = run_update_benchmark(&full, &source, Exec::Parallel).unwrap();
        let b = run_update_benchmark(&only, &source, Exec::Parallel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (&x.outcome.as_ref().unwrap()[0], &y.outcome.as_ref().unwrap()[0]);
            assert_eq!((x.acc, x.nll, x.auroc_entropy, x.auroc_variance), (y.acc, y.nll, y.auroc_entropy, y.auroc_variance));
        }
    }

    #[test]
    fn failed_cells_are_marked_and_the_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("tiny.csv");
        let mut text = String::from("f0,f1,label\n");
        for i in 0..80 {
            text.push_str(&format!("{},{},{}\n", i as f64 * 0.1, (i % 7) as f64, i % 2));
        }
        std::fs::write(&csv_path, text).unwrap();
        let mut cfg = small(ModelKind::SngpLa);
        cfg.dataset = DatasetSpec::Csv {
            path: csv_path,
            name: None,
            k: None,
            test_size: 20,
            ood_path: None,
        };
        // 16 + 32 fits the 60-sample pool, 32 + 32 does not.
        let source = Source::load(&cfg.dataset).unwrap();
        let cells = run_update_benchmark(&cfg, &source, Exec::Sequential).unwrap();
        assert!(cells[..3].iter().all(|c| c.outcome.is_ok()), "{:?}", cells[0].outcome);
        assert!(cells[3..].iter().all(|c| c.outcome.is_err()));
        let out = dir.path().join("results.csv");
        write_results(&out, &cells).unwrap();
        let rows = strip_times(&out);
        assert_eq!(rows.len(), 18);
        assert!(rows[9][5].starts_with("ERROR"));
        assert_eq!(rows[0][0], "TINY");
        assert_eq!(rows[0][7], "NaN");
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = small(ModelKind::Ensemble);
        let source = Source::load(&cfg.dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = |threads: usize, name: &str| {
            let cells = with_threads(threads, || run_update_benchmark(&cfg, &source, Exec::Parallel).unwrap());
            let p = dir.path().join(name);
            write_results(&p, &cells).unwrap();
            strip_times(&p)
        };
        assert_eq!(run(1, "a.csv"), run(4, "b.csv"));
    }

    #[test]
    fn ablation_blocks_follow_values() {
        let mut cfg = small(ModelKind::SngpLa);
        cfg.protocol.n_train = vec![16];
        cfg.protocol.seeds = vec![0];
        cfg.ablation = Some(AblationSpec {
            parameter: "update_steps".into(),
            values: vec![1.into(), 2.into(), 5.into()],
        });
        let source = Source::load(&cfg.dataset).unwrap();
        let blocks = run_ablation(&cfg, &source, Exec::Parallel).unwrap();
        assert_eq!(blocks.iter().map(|b| b.0.as_str()).collect::<Vec<_>>(), ["1", "2", "5"]);
        cfg.ablation.as_mut().unwrap().values.clear();
        assert!(matches!(run_ablation(&cfg, &source, Exec::Parallel), Err(Error::Config(_))));
    }
}
