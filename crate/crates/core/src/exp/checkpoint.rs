//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic "BOWCKPT\0" | u32 version
//! [32] model-config hash | [32] data hash | u64 seed | u64 iteration
//! u32 num_classes | u32 grid_size | u32 len + model config JSON
//! u32 param count, then per parameter:
//!   u32 len + name | f64 lr_mult | u32 rank + u64 dims | f64 values
//! per parameter: u8 has_momentum (+ f64 buffer of the same length)
//! ```

use std::path::Path;

use super::config::sha256;
use super::ExpError;
use crate::autodiff::Sgd;
use crate::bownet::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BOWCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub lr_mult: f64,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub data_hash: [u8; 32],
    pub seed: u64,
    pub iteration: u64,
    pub num_classes: usize,
    pub grid_size: usize,
    pub model_config: ModelConfig,
    pub params: Vec<ParamBlock>,
    pub momentum: Vec<Option<Vec<f64>>>,
}

fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("model config serializes")
}

pub fn model_config_hash(cfg: &ModelConfig, num_classes: usize, grid_size: usize) -> [u8; 32] {
    sha256(format!("{}|{num_classes}|{grid_size}", config_json(cfg)).as_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExpError> {
        if self.buf.len() - self.pos < n {
            return Err(ExpError::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ExpError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ExpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ExpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ExpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ExpError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ExpError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn string(&mut self) -> Result<String, ExpError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ExpError::Format("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, opt: &Sgd, data_hash: [u8; 32], seed: u64, iteration: u64) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| ParamBlock {
                name: p.name.clone(),
                lr_mult: p.lr_mult,
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
            })
            .collect::<Vec<_>>();
        let mut momentum = opt.buffers().to_vec();
        momentum.resize(params.len(), None);
        Self {
            config_hash: model_config_hash(&model.config, model.num_classes, model.grid_size),
            data_hash,
            seed,
            iteration,
            num_classes: model.num_classes,
            grid_size: model.grid_size,
            model_config: model.config.clone(),
            params,
            momentum,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model, ExpError> {
        let mut model = Model::new(self.model_config.clone(), self.num_classes, self.grid_size, 0)?;
        if model.params.len() != self.params.len() {
            return Err(ExpError::Format("parameter count does not match the model".into()));
        }
        for block in &self.params {
            let id = model
                .params
                .find(&block.name)
                .ok_or_else(|| ExpError::Format(format!("unknown parameter {}", block.name)))?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != block.shape.as_slice() {
                return Err(ExpError::Format(format!("shape mismatch for {}", block.name)));
            }
            p.tensor.values_mut().copy_from_slice(&block.values);
            p.lr_mult = block.lr_mult;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.data_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid_size as u32).to_le_bytes());
        put_str(&mut out, &config_json(&self.model_config));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&p.lr_mult.to_le_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &p.values);
        }
        for m in &self.momentum {
            match m {
                Some(buf) => {
                    out.push(1);
                    put_f64s(&mut out, buf);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExpError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ExpError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ExpError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let data_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let num_classes = r.u32()? as usize;
        let grid_size = r.u32()? as usize;
        let model_config: ModelConfig = serde_json::from_str(&r.string()?)
            .map_err(|e| ExpError::Format(format!("model config: {e}")))?;
        if model_config_hash(&model_config, num_classes, grid_size) != config_hash {
            return Err(ExpError::HashMismatch {
                what: "model config",
                expected: super::hex(&config_hash),
                found: super::hex(&model_config_hash(&model_config, num_classes, grid_size)),
            });
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let lr_mult = r.f64()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let values = r.f64s(shape.iter().product())?;
            params.push(ParamBlock { name, lr_mult, shape, values });
        }
        let mut momentum = Vec::with_capacity(n);
        for p in &params {
            momentum.push(match r.u8()? {
                0 => None,
                1 => Some(r.f64s(p.values.len())?),
                _ => return Err(ExpError::Format("bad momentum flag".into())),
            });
        }
        if r.pos != bytes.len() {
            return Err(ExpError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_hash,
            data_hash,
            seed,
            iteration,
            num_classes,
            grid_size,
            model_config,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ExpError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ExpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let bytes = std::fs::read(path).map_err(|e| ExpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::SgdConfig;

    #[test]
    fn byte_round_trip_and_model_rebuild() {
        let cfg = ModelConfig { widths: vec![4, 4, 8, 8], vocab_size: 5, ..ModelConfig::default() };
        let model = Model::new(cfg, 3, 4, 9).unwrap();
        let mut opt = Sgd::new(SgdConfig::default());
        opt.set_buffers(vec![Some(vec![0.5; model.params.get(crate::autodiff::ParamId(0)).tensor.len()])]);
        let ck = Checkpoint::from_model(&model, &opt, [7; 32], 9, 12);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_model().unwrap().params, model.params);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let model = Model::new(ModelConfig { widths: vec![4, 4, 8, 8], vocab_size: 5, ..ModelConfig::default() }, 3, 4, 1).unwrap();
        let bytes = Checkpoint::from_model(&model, &Sgd::new(SgdConfig::default()), [0; 32], 1, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
