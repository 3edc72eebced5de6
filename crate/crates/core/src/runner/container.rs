//! Binary model container.
//!
//! ```text
//! "BUPD" | version u32 | manifest length u64 | manifest JSON
//! | array count u32 | { name length u32 | name | element count u64 | f64 × count }*
//! ```
//!
//! All integers and floats are little-endian. Array shapes live in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::laplace::{LaplacePosterior, Mode};
use crate::mc::{McEnsemble, MemberSource};
use crate::model::{Extractor, Model, ModelConfig, ModelKind};
use crate::numerics::Matrix;
use crate::rff::RffMap;

pub const MAGIC: &[u8; 4] = b"BUPD";
pub const VERSION: u32 = 1;

/// Raw container contents: a JSON manifest and named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&c.manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(c.arrays.len() as u32).to_le_bytes());
    for (name, values) in &c.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Truncated(format!("{what} length {v} is out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionSkew {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u64("manifest length")?;
    let manifest = serde_json::from_slice(r.take(len, "manifest")?)?;
    let count = r.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("array name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
            .map_err(|_| Error::Truncated("array name is not UTF-8".into()))?;
        let n = r.u64("array length")?;
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &format!("array '{name}'"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { manifest, arrays })
}

/// A model with the preprocessing needed to apply it to raw features.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: Model,
    pub config: ModelConfig,
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    arch: ArchConfig,
    head_prior_precision: Option<f64>,
    kernel_scale: Option<f64>,
    sn_vectors: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ExtractorMeta {
    Mlp(BackboneMeta),
    Identity { kernel_scale: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum ModelMeta {
    Ensemble { members: Vec<BackboneMeta> },
    Dropout { net: BackboneMeta, members: usize, mask_seed: u64 },
    SngpMc { extractor: ExtractorMeta, samples: usize, mode: Mode, classes: usize },
    SngpLa { extractor: ExtractorMeta, prior_precision: f64, mode: Mode, classes: usize, steps: usize },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    dataset: String,
    seed: u64,
    config: ModelConfig,
    model: ModelMeta,
    standardized: bool,
    shapes: BTreeMap<String, (usize, usize)>,
}

#[derive(Default)]
struct Bag {
    arrays: Vec<(String, Vec<f64>)>,
    shapes: BTreeMap<String, (usize, usize)>,
}

impl Bag {
    fn put(&mut self, name: String, m: &Matrix) {
        self.shapes.insert(name.clone(), m.shape());
        self.arrays.push((name, m.as_slice().to_vec()));
    }

    fn put_vec(&mut self, name: String, v: &[f64]) {
        self.put(name, &Matrix::from_vec(1, v.len(), v.to_vec()).expect("row"));
    }
}

struct Lookup {
    arrays: BTreeMap<String, Vec<f64>>,
    shapes: BTreeMap<String, (usize, usize)>,
}

impl Lookup {
    fn get(&mut self, name: &str) -> Result<Matrix> {
        let values = self
            .arrays
            .remove(name)
            .ok_or_else(|| Error::Truncated(format!("missing array '{name}'")))?;
        let &(rows, cols) = self
            .shapes
            .get(name)
            .ok_or_else(|| Error::Truncated(format!("no shape for array '{name}'")))?;
        Matrix::from_vec(rows, cols, values)
    }

    fn get_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.into_vec())
    }
}

fn put_rff(bag: &mut Bag, prefix: &str, rff: &RffMap) {
    bag.put(format!("{prefix}rff.w"), rff.weights());
    bag.put_vec(format!("{prefix}rff.b"), rff.phases());
}

fn get_rff(l: &mut Lookup, prefix: &str, kernel_scale: f64) -> Result<RffMap> {
    RffMap::from_parts(l.get(&format!("{prefix}rff.w"))?, l.get_vec(&format!("{prefix}rff.b"))?, kernel_scale)
}

fn put_backbone(bag: &mut Bag, prefix: &str, net: &Backbone) -> BackboneMeta {
    for (name, p) in net.param_names().iter().zip(net.params()) {
        bag.put(format!("{prefix}{name}"), p);
    }
    for (i, u) in net.sn_state().iter().enumerate() {
        bag.put_vec(format!("{prefix}sn.{i}"), u);
    }
    if let Some(rff) = net.rff() {
        put_rff(bag, prefix, rff);
    }
    BackboneMeta {
        arch: net.arch().clone(),
        head_prior_precision: net.head_prior_precision(),
        kernel_scale: net.rff().map(RffMap::kernel_scale),
        sn_vectors: net.sn_state().len(),
    }
}

fn get_backbone(l: &mut Lookup, prefix: &str, meta: &BackboneMeta) -> Result<Backbone> {
    let template = Backbone::init(meta.arch.clone(), 0)?;
    let params = template
        .param_names()
        .iter()
        .map(|name| l.get(&format!("{prefix}{name}")))
        .collect::<Result<Vec<_>>>()?;
    let sn = (0..meta.sn_vectors)
        .map(|i| l.get_vec(&format!("{prefix}sn.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let rff = match meta.kernel_scale {
        Some(ell) => Some(get_rff(l, prefix, ell)?),
        None => None,
    };
    Backbone::from_parts(meta.arch.clone(), params, sn, rff, meta.head_prior_precision)
}

fn put_extractor(bag: &mut Bag, e: &Extractor) -> ExtractorMeta {
    match e {
        Extractor::Mlp(net) => ExtractorMeta::Mlp(put_backbone(bag, "extractor.", net)),
        Extractor::Identity(rff) => {
            put_rff(bag, "extractor.", rff);
            ExtractorMeta::Identity {
                kernel_scale: rff.kernel_scale(),
            }
        }
    }
}

fn get_extractor(l: &mut Lookup, meta: &ExtractorMeta) -> Result<Extractor> {
    Ok(match meta {
        ExtractorMeta::Mlp(m) => Extractor::Mlp(get_backbone(l, "extractor.", m)?),
        ExtractorMeta::Identity { kernel_scale } => Extractor::Identity(get_rff(l, "extractor.", *kernel_scale)?),
    })
}

pub fn to_container(saved: &SavedModel) -> Result<Container> {
    let mut bag = Bag::default();
    let meta = match &saved.model {
        Model::Mc { ensemble, .. } => {
            bag.put_vec("log_weights".into(), &ensemble.log_weights);
            match &ensemble.source {
                MemberSource::Ensemble(nets) => ModelMeta::Ensemble {
                    members: nets
                        .iter()
                        .enumerate()
                        .map(|(j, n)| put_backbone(&mut bag, &format!("member{j}."), n))
                        .collect(),
                },
                MemberSource::Dropout { net, members, seed } => ModelMeta::Dropout {
                    net: put_backbone(&mut bag, "net.", net),
                    members: *members,
                    mask_seed: *seed,
                },
                MemberSource::Sampled { .. } => return Err(Error::invalid("sampled members need an extractor")),
            }
        }
        Model::SngpMc { extractor, ensemble } => {
            bag.put_vec("log_weights".into(), &ensemble.log_weights);
            let MemberSource::Sampled { weights, mode, classes } = &ensemble.source else {
                return Err(Error::invalid("SNGP-MC members must be sampled weights"));
            };
            for (j, w) in weights.iter().enumerate() {
                bag.put(format!("sample{j}"), w);
            }
            ModelMeta::SngpMc {
                extractor: put_extractor(&mut bag, extractor),
                samples: weights.len(),
                mode: *mode,
                classes: *classes,
            }
        }
        Model::SngpLa {
            extractor,
            posterior,
            steps,
        } => {
            bag.put("la.mean".into(), &posterior.mean);
            bag.put("la.cov".into(), &posterior.cov);
            ModelMeta::SngpLa {
                extractor: put_extractor(&mut bag, extractor),
                prior_precision: posterior.prior_precision,
                mode: posterior.mode,
                classes: posterior.classes,
                steps: *steps,
            }
        }
    };
    if let Some(s) = &saved.standardizer {
        bag.put_vec("standardizer.mean".into(), &s.mean);
        bag.put_vec("standardizer.std".into(), &s.std);
    }
    let manifest = Manifest {
        kind: saved.model.kind(),
        dataset: saved.dataset.clone(),
        seed: saved.seed,
        config: saved.config.clone(),
        model: meta,
        standardized: saved.standardizer.is_some(),
        shapes: bag.shapes,
    };
    Ok(Container {
        manifest: serde_json::to_value(&manifest)?,
        arrays: bag.arrays,
    })
}

pub fn from_container(c: Container) -> Result<SavedModel> {
    let manifest: Manifest = serde_json::from_value(c.manifest)?;
    let mut l = Lookup {
        arrays: c.arrays.into_iter().collect(),
        shapes: manifest.shapes,
    };
    let model = match &manifest.model {
        ModelMeta::Ensemble { members } => {
            let nets = members
                .iter()
                .enumerate()
                .map(|(j, m)| get_backbone(&mut l, &format!("member{j}."), m))
                .collect::<Result<Vec<_>>>()?;
            Model::Mc {
                kind: ModelKind::Ensemble,
                ensemble: with_weights(MemberSource::Ensemble(nets), l.get_vec("log_weights")?)?,
            }
        }
        ModelMeta::Dropout { net, members, mask_seed } => {
            let source = MemberSource::Dropout {
                net: get_backbone(&mut l, "net.", net)?,
                members: *members,
                seed: *mask_seed,
            };
            Model::Mc {
                kind: ModelKind::Dropout,
                ensemble: with_weights(source, l.get_vec("log_weights")?)?,
            }
        }
        ModelMeta::SngpMc {
            extractor,
            samples,
            mode,
            classes,
        } => {
            let weights = (0..*samples)
                .map(|j| l.get(&format!("sample{j}")))
                .collect::<Result<Vec<_>>>()?;
            let source = MemberSource::Sampled {
                weights,
                mode: *mode,
                classes: *classes,
            };
            Model::SngpMc {
                extractor: get_extractor(&mut l, extractor)?,
                ensemble: with_weights(source, l.get_vec("log_weights")?)?,
            }
        }
        ModelMeta::SngpLa {
            extractor,
            prior_precision,
            mode,
            classes,
            steps,
        } => Model::SngpLa {
            extractor: get_extractor(&mut l, extractor)?,
            posterior: LaplacePosterior {
                mean: l.get("la.mean")?,
                cov: l.get("la.cov")?,
                prior_precision: *prior_precision,
                mode: *mode,
                classes: *classes,
            },
            steps: *steps,
        },
    };
    let standardizer = if manifest.standardized {
        Some(Standardizer {
            mean: l.get_vec("standardizer.mean")?,
            std: l.get_vec("standardizer.std")?,
        })
    } else {
        None
    };
    Ok(SavedModel {
        model,
        config: manifest.config,
        standardizer,
        seed: manifest.seed,
        dataset: manifest.dataset,
    })
}

fn with_weights(source: MemberSource, log_weights: Vec<f64>) -> Result<McEnsemble> {
    if log_weights.len() != source.len() {
        return Err(Error::shape("model container", source.len(), log_weights.len()));
    }
    Ok(McEnsemble { source, log_weights })
}

pub fn save_model(path: impl AsRef<Path>, saved: &SavedModel) -> Result<()> {
    std::fs::write(path, encode(&to_container(saved)?)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    from_container(decode(&std::fs::read(path)?)?)
}
