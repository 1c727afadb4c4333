//! Single-file checkpoints in the safetensors container.
//!
//! Tensors (all little-endian F64):
//! - `param.<name>`: learnable parameters, e.g. `param.agg0.spatial.q.w`
//! - `adam_m.<name>`, `adam_v.<name>`: AdamW moments with the parameter's shape
//!
//! Metadata holds one key, `ovseg`, whose value is a JSON object:
//! - `format`: `ovseg-checkpoint-v1`
//! - `config`: the run config
//! - `step`: completed optimizer steps
//! - `adam_t`: AdamW bias-correction counter
//! - `rng`: `{"seed": u64, "next_step": u64}`; every random stream is a pure
//!   function of these, so nothing else needs saving.
//!
//! A single key keeps the header byte-stable across processes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameters;
use crate::train::AdamW;

pub const FORMAT: &str = "ovseg-checkpoint-v1";
const META_KEY: &str = "ovseg";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: RunConfig,
    step: u64,
    adam_t: u64,
    rng: RngState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: RngState,
}

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ck(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut offset = 0;
        self.model.visit("", &mut |name, shape, data| {
            let n = data.len();
            entries.push((format!("param.{name}"), shape.to_vec(), to_bytes(data)));
            entries.push((
                format!("adam_m.{name}"),
                shape.to_vec(),
                to_bytes(&self.optimizer.m[offset..offset + n]),
            ));
            entries.push((
                format!("adam_v.{name}"),
                shape.to_vec(),
                to_bytes(&self.optimizer.v[offset..offset + n]),
            ));
            offset += n;
        });
        if offset != self.optimizer.m.len() || offset != self.optimizer.v.len() {
            return Err(ck("optimizer state does not match the parameters"));
        }
        let views = entries
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(ck)
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            step: self.step,
            adam_t: self.optimizer.t,
            rng: self.rng,
        };
        let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::tensor::serialize(views, &Some(metadata)).map_err(ck)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| ck("missing metadata"))?;
        let raw = meta
            .get(META_KEY)
            .ok_or_else(|| ck(format!("missing metadata key {META_KEY:?}")))?;
        let Header {
            format,
            config,
            step,
            adam_t,
            rng,
        } = serde_json::from_str(raw)?;
        if format != FORMAT {
            return Err(ck(format!("unsupported format {format:?}")));
        }

        let tensors = SafeTensors::deserialize(bytes).map_err(ck)?;
        let mut model = Model::init_seeded(config.model, 0)?;
        let mut shapes = Vec::new();
        model.visit("", &mut |name, shape, _| shapes.push((name.to_string(), shape.to_vec())));
        let expected: usize = shapes.len() * 3;
        if tensors.len() != expected {
            return Err(ck(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        let read = |key: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = tensors.tensor(key).map_err(|e| ck(format!("{key}: {e}")))?;
            if t.dtype() != Dtype::F64 || t.shape() != shape {
                return Err(ck(format!("{key}: expected F64 {shape:?}, found {:?} {:?}", t.dtype(), t.shape())));
            }
            Ok(t.data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape) in &shapes {
            params.extend(read(&format!("param.{name}"), shape)?);
            m.extend(read(&format!("adam_m.{name}"), shape)?);
            v.extend(read(&format!("adam_v.{name}"), shape)?);
        }
        let mut offset = 0;
        model.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&params[offset..offset + d.len()]);
            offset += d.len();
        });
        Ok(Self {
            config,
            model,
            optimizer: AdamW { m, v, t: adam_t },
            step,
            rng,
        })
    }

    /// Write via a temporary sibling and rename, so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("safetensors.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| ck(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.embed_dim = 8;
        config.model.aggregator.feature_dim = 6;
        config.model.aggregator.window = 3;
        config.model.decoder_stages = 1;
        config.model.image_spm_out_init_std = 0.01;
        let model = Model::init_seeded(config.model, 5).unwrap();
        let n = model.num_params();
        Checkpoint {
            config,
            model,
            optimizer: AdamW {
                m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                v: (0..n).map(|i| (i as f64).sqrt()).collect(),
                t: 17,
            },
            step: 17,
            rng: RngState { seed: 9, next_step: 17 },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.safetensors");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
