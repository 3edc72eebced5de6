use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bupd::data::{gen_two_moons, load_csv, save_csv, Dataset};
use bupd::exec::{with_thread_cap, Exec};
use bupd::metrics::{accuracy, auroc, nll};
use bupd::model::{sub_seed, Model};
use bupd::runner::{
    cell_data, load_model, run_ablation, run_al_experiment, run_update_benchmark, save_model, write_ablation,
    write_learning_curves, write_resolved_config, write_results, ExperimentConfig, SavedModel, Source,
};
use bupd::{Error, Result};

#[derive(Parser)]
#[command(name = "bupd", version, about = "Bayesian updates for last-layer Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Runs a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a two-moons dataset as CSV.
    GenMoons {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the configured model on the first protocol cell and saves it.
    Train(RunArgs),
    /// Applies a Bayesian update with new labelled data to a saved model.
    Update {
        #[arg(long)]
        model: PathBuf,
        /// New samples (raw features, CSV).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a saved model on a labelled CSV, optionally against an OOD CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Writes the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline / update / retrain benchmark over the protocol grid.
    BenchUpdates(RunArgs),
    /// One benchmark per value of a model hyperparameter.
    Ablate(RunArgs),
    /// Active-learning learning curves.
    Al(RunArgs),
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    write_resolved_config(&args.out, &cfg)?;
    Ok(cfg)
}

fn standardized(saved: &SavedModel, ds: &Dataset) -> Result<Dataset> {
    match &saved.standardizer {
        Some(s) => s.transform_dataset(ds),
        None => Ok(ds.clone()),
    }
}

fn run(command: Command) -> Result<()> {
    let exec = Exec::Parallel;
    match command {
        Command::GenMoons { n, noise, seed, out } => save_csv(&gen_two_moons(n, noise, seed)?, out),
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let source = Source::load(&cfg.dataset)?;
            let seed = cfg.protocol.seeds[0];
            let data = cell_data(&source, cfg.protocol.n_train[0], cfg.protocol.n_new, seed)?;
            let model = Model::train(&cfg.model, &data.train, sub_seed(seed, "baseline"), exec)?;
            let saved = SavedModel {
                model,
                config: cfg.model.clone(),
                standardizer: Some(data.scaler),
                seed,
                dataset: source.name().to_string(),
            };
            save_model(args.out.join("model.bupd"), &saved)
        }
        Command::Update { model, data, out } => {
            let mut saved = load_model(&model)?;
            let new = standardized(&saved, &load_csv(&data, Some(saved.model.classes()))?)?;
            saved.model = saved.model.update(&new, exec)?;
            save_model(out, &saved)
        }
        Command::Eval { model, data, ood, out } => {
            let saved = load_model(&model)?;
            let test = standardized(&saved, &load_csv(&data, Some(saved.model.classes()))?)?;
            let (probs, ent, var) = saved.model.predict_with_scores(&test.x, exec)?;
            let mut report = serde_json::json!({
                "n": test.len(),
                "acc": accuracy(&probs, &test.y)?,
                "nll": nll(&probs, &test.y)?,
            });
            if let Some(path) = ood {
                let raw = load_csv(path, None)?;
                let x = bupd::data::align_width(&raw.x, test.n_features());
                let o = standardized(&saved, &Dataset::new(raw.name, x, raw.y, raw.k)?)?;
                let (_, ood_ent, ood_var) = saved.model.predict_with_scores(&o.x, exec)?;
                report["auroc_entropy"] = auroc(&ent, &ood_ent)?.into();
                report["auroc_variance"] = auroc(&var, &ood_var)?.into();
            }
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::BenchUpdates(args) => {
            let cfg = load_config(&args)?;
            let source = Source::load(&cfg.dataset)?;
            let cells = run_update_benchmark(&cfg, &source, exec)?;
            report_failures(&cells);
            write_results(args.out.join("results.csv"), &cells)
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            let source = Source::load(&cfg.dataset)?;
            let blocks = run_ablation(&cfg, &source, exec)?;
            let parameter = cfg.ablation.as_ref().map(|a| a.parameter.clone()).unwrap_or_default();
            for (_, cells) in &blocks {
                report_failures(cells);
            }
            write_ablation(args.out.join("ablation.csv"), &parameter, &blocks)
        }
        Command::Al(args) => {
            let cfg = load_config(&args)?;
            let source = Source::load(&cfg.dataset)?;
            let records = run_al_experiment(&cfg, &source, exec)?;
            write_learning_curves(args.out.join("learning_curves.csv"), &records)
        }
    }
}

fn report_failures(cells: &[bupd::runner::Cell]) {
    for c in cells {
        if let Err(msg) = &c.outcome {
            eprintln!("cell n_train={} seed={} failed: {msg}", c.n_train, c.seed);
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match with_thread_cap(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("see `bupd --help` for usage");
            }
            ExitCode::from(2)
        }
    }
}
