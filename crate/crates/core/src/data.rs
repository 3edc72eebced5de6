//! Datasets: synthetic two-moons, CSV ingestion, standardization, the
//! train/new/test split protocol and in-/out-of-distribution pairing.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_stream, Matrix};

/// Features, integer labels in `0..k`, and a name used for pairing and reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub k: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, y: Vec<usize>, k: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("Dataset::new", x.rows(), y.len()));
        }
        if y.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if k == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("Dataset::new"));
        }
        Ok(Dataset {
            x,
            y,
            k,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            k: self.k,
            name: self.name.clone(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.k != other.k {
            return Err(Error::invalid("cannot concatenate datasets with different class counts"));
        }
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Dataset {
            x: self.x.vstack(&other.x)?,
            y,
            k: self.k,
            name: self.name.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Two interleaving half circles.
///
/// Class 0 lies on the upper unit half circle around the origin, class 1 on
/// the lower half circle around `(1, 0.5)`. Angles are drawn uniformly and
/// isotropic Gaussian noise is added; the sample order is shuffled.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid(format!("two-moons needs an even n >= 2, got {n}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be nonnegative"));
    }
    let mut rng = derive_stream(seed, "two-moons");
    let half = n / 2;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let t = PI * rng.uniform();
        let (px, py, label) = if i < half {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        rows.push((px + noise_std * rng.normal(), py + noise_std * rng.normal(), label));
    }
    rng.shuffle(&mut rows);
    let x = Matrix::from_fn(n, 2, |r, c| if c == 0 { rows[r].0 } else { rows[r].1 });
    let y = rows.iter().map(|r| r.2).collect();
    Dataset::new("TWO-MOONS", x, y, 2)
}

/// Centers of the four new-data clusters, with their class.
pub const UPDATE_CLUSTER_CENTERS: [((f64, f64), usize); 4] = [
    ((-1.5, 1.5), 0),
    ((2.5, 1.5), 0),
    ((-1.5, -1.0), 1),
    ((2.5, -1.0), 1),
];
pub const UPDATE_CLUSTER_POINTS: usize = 8;
pub const UPDATE_CLUSTER_STD: f64 = 0.1;

/// Four Gaussian blobs (two per class) outside the moons' support.
pub fn gen_update_clusters(seed: u64) -> Dataset {
    gen_clusters(UPDATE_CLUSTER_POINTS, seed)
}

/// Same layout as [`gen_update_clusters`] with `per_cluster` points per blob.
pub fn gen_clusters(per_cluster: usize, seed: u64) -> Dataset {
    let mut rng = derive_stream(seed, "update-clusters");
    let n = 4 * per_cluster;
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for (c, &((cx, cy), label)) in UPDATE_CLUSTER_CENTERS.iter().enumerate() {
        for j in 0..per_cluster {
            let r = c * per_cluster + j;
            x.set(r, 0, cx + UPDATE_CLUSTER_STD * rng.normal());
            x.set(r, 1, cy + UPDATE_CLUSTER_STD * rng.normal());
            y.push(label);
        }
    }
    Dataset {
        x,
        y,
        k: 2,
        name: "TWO-MOONS-CLUSTERS".into(),
    }
}

/// Uniform samples on the perimeter of the bounding box of `reference`,
/// scaled by 3 about its center. Labels are all 0 (unused).
pub fn gen_box_frame_ood(reference: &Matrix, n: usize, seed: u64) -> Result<Dataset> {
    if reference.cols() != 2 {
        return Err(Error::shape("gen_box_frame_ood", 2, reference.cols()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for r in 0..reference.rows() {
        for c in 0..2 {
            lo[c] = lo[c].min(reference.get(r, c));
            hi[c] = hi[c].max(reference.get(r, c));
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = [1.5 * (hi[0] - lo[0]), 1.5 * (hi[1] - lo[1])];
    let (w, h) = (2.0 * half[0], 2.0 * half[1]);
    let perimeter = 2.0 * (w + h);
    let mut rng = derive_stream(seed, "two-moons-ood");
    let mut x = Matrix::zeros(n, 2);
    for r in 0..n {
        let s = rng.uniform() * perimeter;
        let (px, py) = if s < w {
            (s, 0.0)
        } else if s < w + h {
            (w, s - w)
        } else if s < 2.0 * w + h {
            (2.0 * w + h - s, h)
        } else {
            (0.0, perimeter - s)
        };
        x.set(r, 0, center[0] - half[0] + px);
        x.set(r, 1, center[1] - half[1] + py);
    }
    Dataset::new("TWO-MOONS-OOD", x, vec![0; n], 2)
}

/// Loads `f0,...,f{F-1},label` CSV. `k` defaults to `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>, k_override: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be f0,...,f{F-1},label".into(),
        });
    }
    for (i, h) in header.iter().take(width - 1).enumerate() {
        if h.trim() != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{i}, found {h:?}"),
            });
        }
    }
    let n_features = width - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for field in record.iter().take(n_features) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid feature value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite feature value {field:?}"),
                });
            }
            values.push(v);
        }
        let raw = record.get(n_features).unwrap_or_default().trim();
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label {raw:?} is not a nonnegative integer"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let k = match k_override {
        Some(k) => k,
        None => labels.iter().max().copied().unwrap_or(0) + 1,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_uppercase().replace('_', "-"))
        .unwrap_or_else(|| "CSV".into());
    Dataset::new(name, Matrix::from_vec(labels.len(), n_features, values)?, labels, k)
}

/// Writes a dataset in the format read by [`load_csv`].
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.n_features()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(r).iter().map(|v| format!("{v}")).collect();
        rec.push(ds.y[r].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features with a smaller spread are only centered, never scaled.
pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(x: &Matrix) -> Standardizer {
        let (n, f) = x.shape();
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; f];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("Standardizer::transform", self.mean.len(), x.cols()));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            (x.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    pub fn transform_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform(&ds.x)?,
            ..ds.clone()
        })
    }
}

/// Splits `ds` into a fixed holdout of `test_size` samples and the remaining pool.
///
/// The holdout depends only on the dataset name and size, never on the
/// experiment seed.
pub fn holdout_split(ds: &Dataset, test_size: usize) -> Result<(Dataset, Dataset)> {
    if test_size >= ds.len() {
        return Err(Error::InsufficientPool {
            need: test_size + 1,
            have: ds.len(),
        });
    }
    let mut rng = derive_stream(0, &format!("holdout/{}", ds.name));
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    let (test, pool) = idx.split_at(test_size);
    let mut pool = pool.to_vec();
    pool.sort_unstable();
    let mut test = test.to_vec();
    test.sort_unstable();
    Ok((ds.subset(&pool), ds.subset(&test)))
}

/// Result of [`split_protocol`].
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub new: Dataset,
    pub test: Dataset,
}

const COVERAGE_ATTEMPTS: usize = 1000;

/// Draws disjoint `train` and `new` sets uniformly without replacement from the
/// pool left after the fixed holdout.
///
/// When `n_train >= k`, draws are repeated (deterministically) until every
/// class appears in `train`, so fitted heads see each class at least once.
pub fn split_protocol(
    ds: &Dataset,
    n_train: usize,
    n_new: usize,
    test_size: usize,
    seed: u64,
) -> Result<Split> {
    let (pool, test) = holdout_split(ds, test_size)?;
    let need = n_train + n_new;
    if need > pool.len() {
        return Err(Error::InsufficientPool {
            need,
            have: pool.len(),
        });
    }
    let mut rng = derive_stream(seed, &format!("split/{}/{n_train}/{n_new}", ds.name));
    let mut draw = rng.sample_indices(pool.len(), need);
    if n_train >= ds.k {
        for _ in 0..COVERAGE_ATTEMPTS {
            let mut seen = vec![false; ds.k];
            draw[..n_train].iter().for_each(|&i| seen[pool.y[i]] = true);
            if seen.iter().all(|&s| s) {
                break;
            }
            draw = rng.sample_indices(pool.len(), need);
        }
    }
    let (tr, nw) = draw.split_at(n_train);
    Ok(Split {
        train: pool.subset(tr),
        new: pool.subset(nw),
        test,
    })
}

/// Name of the out-of-distribution partner of a dataset.
pub fn ood_pair(name: &str) -> Result<&'static str> {
    match name.to_uppercase().as_str() {
        "LETTER" => Ok("PDIGITS"),
        "PDIGITS" => Ok("LETTER"),
        "TWO-MOONS" => Ok("TWO-MOONS-OOD"),
        "DIGITS" => Ok("BREAST-CANCER"),
        "BREAST-CANCER" => Ok("DIGITS"),
        _ => Err(Error::UnknownDataset(name.to_owned())),
    }
}

/// Zero-pads or truncates columns so `x` has exactly `width` features.
pub fn align_width(x: &Matrix, width: usize) -> Matrix {
    Matrix::from_fn(x.rows(), width, |r, c| if c < x.cols() { x.get(r, c) } else { 0.0 })
}
