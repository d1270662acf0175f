//! The SGC1 checkpoint format.
//!
//! ```text
//! "SGC1" | 32-byte SHA-256 of the model descriptor | u32 LE record count
//! record: u16 LE name length | UTF-8 name | SGT1 tensor
//! ```
//!
//! Record names: `param/<name>`, `bn_mean/<name>`, `bn_var/<name>`,
//! `bn_count/<name>`, `rms/<name>` (optimizer accumulators, optional),
//! `meta/arch` (`[arch, scale, long skips, dropout]`), `meta/epoch`,
//! `meta/step`, `meta/metric`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Arch, ArchConfig, LongSkips, ModelGraph};
use crate::optim::RmsProp;
use crate::tensor::io::{decode, write_atomic};
use crate::tensor::{AnyTensor, DType, Element, Tensor};

pub const SGC1_MAGIC: &[u8; 4] = b"SGC1";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub step: u64,
    /// Validation Dice at the time of saving (NaN when not measured).
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub records: Vec<(String, AnyTensor)>,
}

/// SHA-256 of the model's structural descriptor.
pub fn config_hash<T: Element>(model: &ModelGraph<T>) -> [u8; 32] {
    Sha256::digest(model.descriptor().as_bytes()).into()
}

fn to_any<T: Element>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        DType::F32 => AnyTensor::F32(t.cast()),
        DType::F64 => AnyTensor::F64(t.cast()),
    }
}

fn meta(v: f64) -> AnyTensor {
    AnyTensor::F64(Tensor::scalar(v))
}

fn arch_code(a: Arch) -> f64 {
    match a {
        Arch::Fcn => 0.0,
        Arch::FcResnet => 1.0,
        Arch::Pipeline => 2.0,
    }
}

fn skips_code(s: LongSkips) -> f64 {
    match s {
        LongSkips::None => 0.0,
        LongSkips::Standard => 1.0,
        LongSkips::All => 2.0,
    }
}

impl Checkpoint {
    pub fn capture<T: Element>(
        model: &ModelGraph<T>,
        optimizer: Option<&RmsProp<T>>,
        m: CheckpointMeta,
    ) -> Self {
        let c = &model.config;
        let arch = Tensor::new(
            vec![4],
            vec![
                arch_code(model.arch),
                c.scale,
                skips_code(c.long_skips),
                c.dropout,
            ],
        )
        .expect("shape");
        let mut records = vec![
            ("meta/arch".to_string(), AnyTensor::F64(arch)),
            ("meta/epoch".to_string(), meta(m.epoch as f64)),
            ("meta/step".to_string(), meta(m.step as f64)),
            ("meta/metric".to_string(), meta(m.metric)),
        ];
        for p in model.params.iter() {
            records.push((format!("param/{}", p.name), to_any(&p.value)));
        }
        for s in model.params.bn_states() {
            records.push((format!("bn_mean/{}", s.name), to_any(&s.running_mean)));
            records.push((format!("bn_var/{}", s.name), to_any(&s.running_var)));
            records.push((format!("bn_count/{}", s.name), meta(s.updates as f64)));
        }
        if let Some(opt) = optimizer {
            for (p, a) in model.params.iter().zip(&opt.accumulators) {
                records.push((format!("rms/{}", p.name), to_any(a)));
            }
        }
        Self {
            config_hash: config_hash(model),
            records,
        }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(AnyTensor::F64(t)) if t.numel() == 1 => Ok(t.data()[0]),
            _ => Err(Error::CheckpointMismatch(format!(
                "missing or malformed record `{name}`"
            ))),
        }
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            epoch: self.scalar("meta/epoch")? as u64,
            step: self.scalar("meta/step")? as u64,
            metric: self.scalar("meta/metric")?,
        })
    }

    /// Architecture recorded in the checkpoint.
    pub fn arch(&self) -> Result<(Arch, ArchConfig)> {
        let bad = || Error::CheckpointMismatch("missing or malformed record `meta/arch`".into());
        let v = match self.get("meta/arch") {
            Some(AnyTensor::F64(t)) if t.numel() == 4 => t.data().to_vec(),
            _ => return Err(bad()),
        };
        let arch = match v[0] as u8 {
            0 => Arch::Fcn,
            1 => Arch::FcResnet,
            2 => Arch::Pipeline,
            _ => return Err(bad()),
        };
        let long_skips = match v[2] as u8 {
            0 => LongSkips::None,
            1 => LongSkips::Standard,
            2 => LongSkips::All,
            _ => return Err(bad()),
        };
        Ok((
            arch,
            ArchConfig {
                scale: v[1],
                long_skips,
                dropout: v[3],
                ..ArchConfig::default()
            },
        ))
    }

    fn tensor<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing record `{name}`")))?;
        if t.dtype() != T::DTYPE || t.shape() != shape {
            return Err(Error::CheckpointMismatch(format!(
                "record `{name}` is {:?} {:?}, expected {:?} {:?}",
                t.dtype(),
                t.shape(),
                T::DTYPE,
                shape
            )));
        }
        Ok(t.clone().into_tensor())
    }

    /// Loads parameters and batch-norm statistics into `model` (and the
    /// accumulators into `optimizer`, if given). Nothing is modified unless
    /// every record matches.
    pub fn restore<T: Element>(
        &self,
        model: &mut ModelGraph<T>,
        optimizer: Option<&mut RmsProp<T>>,
    ) -> Result<()> {
        if self.config_hash != config_hash(model) {
            return Err(Error::CheckpointMismatch(
                "architecture hash differs".into(),
            ));
        }
        let params: Vec<Tensor<T>> = model
            .params
            .iter()
            .map(|p| self.tensor(&format!("param/{}", p.name), p.value.shape()))
            .collect::<Result<_>>()?;
        let mut bns = Vec::new();
        for s in model.params.bn_states() {
            bns.push((
                self.tensor::<T>(&format!("bn_mean/{}", s.name), s.running_mean.shape())?,
                self.tensor::<T>(&format!("bn_var/{}", s.name), s.running_var.shape())?,
                self.scalar(&format!("bn_count/{}", s.name))? as u64,
            ));
        }
        let rms = match &optimizer {
            Some(_) => Some(
                model
                    .params
                    .iter()
                    .map(|p| self.tensor(&format!("rms/{}", p.name), p.value.shape()))
                    .collect::<Result<Vec<Tensor<T>>>>()?,
            ),
            None => None,
        };
        let step = self.meta()?.step;
        for (p, v) in model.params.iter_mut().zip(params) {
            p.value = v;
        }
        for (s, (m, v, n)) in model.params.bn_states_mut().zip(bns) {
            s.running_mean = m;
            s.running_var = v;
            s.updates = n;
        }
        if let (Some(opt), Some(rms)) = (optimizer, rms) {
            opt.accumulators = rms;
            opt.step = step;
        }
        Ok(())
    }

    /// Rebuilds the recorded architecture and restores it.
    pub fn to_model<T: Element>(&self) -> Result<ModelGraph<T>> {
        let (arch, cfg) = self.arch()?;
        let mut model = ModelGraph::build(arch, cfg, 0)?;
        self.restore(&mut model, None)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SGC1_MAGIC);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |r: &str| Error::Format {
            format: "SGC1",
            reason: r.to_string(),
        };
        if bytes.len() < 40 || &bytes[..4] != SGC1_MAGIC {
            return Err(err("bad magic or truncated header"));
        }
        let config_hash: [u8; 32] = bytes[4..36].try_into().expect("32 bytes");
        let count = u32::from_le_bytes(bytes[36..40].try_into().expect("4 bytes")) as usize;
        let mut pos = 40;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len_bytes = bytes
                .get(pos..pos + 2)
                .ok_or_else(|| err("truncated record name"))?;
            let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            pos += 2;
            let name = bytes
                .get(pos..pos + len)
                .ok_or_else(|| err("truncated record name"))?;
            let name =
                String::from_utf8(name.to_vec()).map_err(|_| err("record name is not UTF-8"))?;
            pos += len;
            let (t, used) = decode(&bytes[pos..])?;
            pos += used;
            records.push((name, t));
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
