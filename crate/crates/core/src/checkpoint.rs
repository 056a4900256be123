//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SSPT`, `u32` version, 32-byte dataset
//! manifest digest, `u32` tensor count, then per tensor `u32` name length,
//! name, `u32` rank, `u32` dims, `f32` data. After the parameters comes an
//! optional optimizer block (`u32` flag, `u64` step, moment tensors framed
//! the same way) and a key/value metadata block holding the model
//! configuration, head specs and the metric log.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndgrad::{AdamConfig, AdamState, ParamId, Tensor};

use crate::binio::{Reader, Writer};
use crate::model::{Activation, Head, HeadSpec, ModelConfig, NormPlacement, ParamEntry, Pooling, SsptParams};
use crate::{Result, SsptError};

const MAGIC: &[u8; 4] = b"SSPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: SsptParams<f32>,
    pub manifest_digest: [u8; 32],
    pub optimizer: Option<AdamState<f32>>,
    pub metadata: BTreeMap<String, String>,
}

fn write_tensor(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    w.str(name);
    w.len(t.rank());
    for &d in t.shape() {
        w.len(d);
    }
    w.f32s(t.data());
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name = r.str()?;
    let rank = r.len()?;
    if rank > 8 {
        return Err(r.fail(format!("tensor `{name}` has rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.ok_or_else(|| r.fail(format!("tensor `{name}` is too large")))?;
    let data = r.f32s(numel)?;
    Ok((name, Tensor::new(shape, data)?))
}

fn model_metadata(cfg: &ModelConfig, heads: &[HeadSpec]) -> Vec<(String, String)> {
    let heads = heads
        .iter()
        .map(|h| format!("{}:{}", h.head, h.out_dim))
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("model.n_features".into(), cfg.n_features.to_string()),
        ("model.window".into(), cfg.window.to_string()),
        ("model.d_model".into(), cfg.d_model.to_string()),
        ("model.n_heads".into(), cfg.n_heads.to_string()),
        ("model.ffn_hidden".into(), cfg.ffn_hidden.to_string()),
        (
            "model.activation".into(),
            match cfg.activation {
                Activation::Relu => "relu",
                Activation::Gelu => "gelu",
            }
            .into(),
        ),
        (
            "model.norm".into(),
            match cfg.norm {
                NormPlacement::Pre => "pre",
                NormPlacement::Post => "post",
            }
            .into(),
        ),
        (
            "model.pooling".into(),
            match cfg.pooling {
                Pooling::Mean => "mean",
                Pooling::Last => "last",
            }
            .into(),
        ),
        ("model.final_norm".into(), cfg.final_norm.to_string()),
        ("model.dropout".into(), cfg.dropout.to_string()),
        ("model.ln_eps".into(), cfg.ln_eps.to_string()),
        ("model.heads".into(), heads),
    ]
}

fn parse_model(meta: &BTreeMap<String, String>) -> Result<(ModelConfig, Vec<HeadSpec>)> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| SsptError::Checkpoint(format!("metadata key `{k}` missing")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| SsptError::Checkpoint(format!("metadata `{k}` is not a count")))
    };
    let float = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| SsptError::Checkpoint(format!("metadata `{k}` is not a number")))
    };
    let mut cfg = ModelConfig::new(num("model.n_features")?, num("model.window")?);
    cfg.d_model = num("model.d_model")?;
    cfg.n_heads = num("model.n_heads")?;
    cfg.ffn_hidden = num("model.ffn_hidden")?;
    cfg.activation = match get("model.activation")?.as_str() {
        "relu" => Activation::Relu,
        "gelu" => Activation::Gelu,
        other => return Err(SsptError::Checkpoint(format!("unknown activation `{other}`"))),
    };
    cfg.norm = match get("model.norm")?.as_str() {
        "pre" => NormPlacement::Pre,
        "post" => NormPlacement::Post,
        other => return Err(SsptError::Checkpoint(format!("unknown norm placement `{other}`"))),
    };
    cfg.pooling = match get("model.pooling")?.as_str() {
        "mean" => Pooling::Mean,
        "last" => Pooling::Last,
        other => return Err(SsptError::Checkpoint(format!("unknown pooling `{other}`"))),
    };
    cfg.final_norm = match get("model.final_norm")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(SsptError::Checkpoint(format!("bad final_norm flag `{other}`"))),
    };
    cfg.dropout = float("model.dropout")?;
    cfg.ln_eps = float("model.ln_eps")?;
    let mut heads = Vec::new();
    for spec in get("model.heads")?.split(',').filter(|s| !s.is_empty()) {
        let (name, dim) = spec
            .split_once(':')
            .ok_or_else(|| SsptError::Checkpoint(format!("bad head spec `{spec}`")))?;
        let dim = dim
            .parse()
            .map_err(|_| SsptError::Checkpoint(format!("bad head spec `{spec}`")))?;
        heads.push(HeadSpec::new(Head::parse(name)?, dim));
    }
    Ok((cfg, heads))
}

impl Checkpoint {
    pub fn new(params: SsptParams<f32>, manifest_digest: [u8; 32]) -> Self {
        Checkpoint {
            params,
            manifest_digest,
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.manifest_digest);
        let entries = self.params.entries();
        w.len(entries.len());
        for e in entries {
            write_tensor(&mut w, &e.name, &e.tensor);
        }
        match &self.optimizer {
            None => w.u32(0),
            Some(state) => {
                w.u32(1);
                w.u64(state.step);
                w.len(state.moments.len());
                for (id, (m, v)) in &state.moments {
                    let name = &entries[id.0].name;
                    write_tensor(&mut w, &format!("adam.m.{name}"), m);
                    write_tensor(&mut w, &format!("adam.v.{name}"), v);
                }
            }
        }
        let mut meta: BTreeMap<String, String> = self.metadata.clone();
        meta.extend(model_metadata(self.params.config(), self.params.heads()));
        if let Some(state) = &self.optimizer {
            let c = state.config;
            for (k, v) in [("lr", c.lr), ("beta1", c.beta1), ("beta2", c.beta2), ("eps", c.eps)] {
                meta.insert(format!("adam.{k}"), v.to_string());
            }
        }
        w.len(meta.len());
        for (k, v) in &meta {
            w.str(k);
            w.str(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, SsptError::Checkpoint);
        if r.bytes(4)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported format version {version}")));
        }
        let digest: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        let has_optimizer = r.u32()?;
        let mut moments = Vec::new();
        let mut step = 0;
        if has_optimizer == 1 {
            step = r.u64()?;
            let n = r.len()?;
            for _ in 0..n {
                moments.push((read_tensor(&mut r)?, read_tensor(&mut r)?));
            }
        } else if has_optimizer != 0 {
            return Err(r.fail("bad optimizer flag"));
        }
        let n_meta = r.len()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.str()?;
            let v = r.str()?;
            metadata.insert(k, v);
        }
        if !r.at_end() {
            return Err(r.fail("trailing bytes"));
        }

        let (cfg, heads) = parse_model(&metadata)?;
        let entries: Vec<ParamEntry<f32>> = tensors
            .into_iter()
            .map(|(name, tensor)| ParamEntry {
                name,
                group: crate::model::Group::Embedding,
                tensor,
            })
            .collect();
        let params = SsptParams::from_parts(cfg, heads, entries)?;

        let optimizer = if has_optimizer == 1 {
            let meta_f = |k: &str| -> Result<f64> {
                metadata
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| SsptError::Checkpoint(format!("metadata `{k}` missing")))
            };
            let config = AdamConfig {
                lr: meta_f("adam.lr")?,
                beta1: meta_f("adam.beta1")?,
                beta2: meta_f("adam.beta2")?,
                eps: meta_f("adam.eps")?,
            };
            let mut map = BTreeMap::new();
            for ((mname, m), (vname, v)) in moments {
                let name = mname
                    .strip_prefix("adam.m.")
                    .ok_or_else(|| SsptError::Checkpoint(format!("unexpected tensor `{mname}`")))?;
                if vname != format!("adam.v.{name}") {
                    return Err(SsptError::Checkpoint(format!("moment `{vname}` does not pair with `{mname}`")));
                }
                let id: ParamId = params
                    .id_of(name)
                    .ok_or_else(|| SsptError::Checkpoint(format!("moments for unknown tensor `{name}`")))?;
                let shape = params.entries()[id.0].tensor.shape();
                if m.shape() != shape || v.shape() != shape {
                    return Err(SsptError::Checkpoint(format!("moment shapes for `{name}` differ from the tensor")));
                }
                map.insert(id, (m, v));
            }
            Some(AdamState {
                config,
                step,
                moments: map,
            })
        } else {
            None
        };
        for key in metadata.keys().cloned().collect::<Vec<_>>() {
            if key.starts_with("model.") || key.starts_with("adam.") {
                metadata.remove(&key);
            }
        }
        Ok(Checkpoint {
            params,
            manifest_digest: digest,
            optimizer,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SsptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SsptError::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| SsptError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
