//! `TABSCKPT` checkpoint files.
//!
//! ```text
//! "TABSCKPT"  u32 version
//! u32 len, model config as `key = value` text
//! u32 epoch, f64 best validation loss
//! u32 count, then per tensor: u32 name len, name, u32 rank, u32 extents[rank], f32 data
//! u64 adam step, f64 lr, wd, beta1, beta2, eps
//! u32 count + first moments, u32 count + second moments (same tensor encoding)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::config::ModelConfig;
use super::net::Model;
use super::params::ParamSet;
use crate::error::{Result, TabsError};
use crate::fsio::{self, put_f32s, put_f64, put_u32, put_u64, Reader};
use crate::tensor::{AdamHyper, AdamState, Tensor};

pub const MAGIC: &[u8; 8] = b"TABSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub epoch: u32,
    pub best_validation_loss: f64,
}

impl Checkpoint {
    /// Fresh checkpoint of an untrained model.
    pub fn initial(config: &ModelConfig, hyper: AdamHyper) -> Result<Self> {
        let model = Model::<f32>::new(config)?;
        let params = model.into_params();
        let adam = AdamState::new(hyper, params.tensors());
        Ok(Checkpoint {
            config: config.clone(),
            params,
            adam,
            epoch: 0,
            best_validation_loss: f64::INFINITY,
        })
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(&self.config, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * 3 * self.params.numel());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_kv_string();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.epoch);
        put_f64(&mut out, self.best_validation_loss);
        let names = self.params.names();
        put_entries(&mut out, names, self.params.tensors());
        let h = &self.adam.hyper;
        put_u64(&mut out, self.adam.step_count);
        for v in [h.learning_rate, h.weight_decay, h.beta1, h.beta2, h.eps] {
            put_f64(&mut out, v);
        }
        put_entries(&mut out, names, &self.adam.m);
        put_entries(&mut out, names, &self.adam.v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TabsError::format(8, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let cfg_at = r.offset();
        let text = r.string(len, "config")?;
        let config = ModelConfig::from_kv_str(&text)
            .map_err(|e| TabsError::format(cfg_at, format!("bad model config: {e}")))?;
        let epoch = r.u32("epoch")?;
        let best_validation_loss = r.f64("best validation loss")?;

        let params_at = r.offset();
        let (names, tensors) = read_entries(&mut r, "parameter")?;
        let params = ParamSet::from_parts(names.clone(), tensors)
            .map_err(|e| TabsError::format(params_at, e.to_string()))?;
        let expected = super::net::parameter_specs(&config)
            .map_err(|e| TabsError::format(cfg_at, e.to_string()))?;
        let layout_ok = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|(s, (n, t))| s.name == n && s.shape == t.shape());
        if !layout_ok {
            return Err(TabsError::format(
                params_at,
                "parameter manifest does not match the model config",
            ));
        }

        let step_count = r.u64("adam step")?;
        let hyper = AdamHyper {
            learning_rate: r.f64("learning rate")?,
            weight_decay: r.f64("weight decay")?,
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            eps: r.f64("eps")?,
        };
        let m_at = r.offset();
        let (m_names, m) = read_entries(&mut r, "first moment")?;
        let v_at = r.offset();
        let (v_names, v) = read_entries(&mut r, "second moment")?;
        for (at, got, moments) in [(m_at, &m_names, &m), (v_at, &v_names, &v)] {
            let matches = *got == names
                && moments
                    .iter()
                    .zip(params.tensors())
                    .all(|(a, b)| a.shape() == b.shape());
            if !matches {
                return Err(TabsError::format(at, "optimizer state does not match parameters"));
            }
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState {
                hyper,
                step_count,
                m,
                v,
            },
            epoch,
            best_validation_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read_file(path)?)
    }
}

fn put_entries(out: &mut Vec<u8>, names: &[String], tensors: &[Tensor<f32>]) {
    put_u32(out, tensors.len() as u32);
    for (name, t) in names.iter().zip(tensors) {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank() as u32);
        for &e in t.shape() {
            put_u32(out, e as u32);
        }
        put_f32s(out, t.data());
    }
}

fn read_entries(r: &mut Reader, what: &str) -> Result<(Vec<String>, Vec<Tensor<f32>>)> {
    let count = r.u32(&format!("{what} count"))? as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32(&format!("{what} name length"))? as usize;
        let name = r.string(len, &format!("{what} name"))?;
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        if rank > 8 {
            return r.fail(format!("implausible rank {rank} for `{name}`"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("extent of `{name}`"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| TabsError::format(r.offset(), format!("`{name}` is too large")))?;
        let data = r.f32s(n, &format!("data of `{name}`"))?;
        let at = r.offset();
        tensors.push(Tensor::new(shape, data).map_err(|e| TabsError::format(at, e.to_string()))?);
        names.push(name);
    }
    Ok((names, tensors))
}
