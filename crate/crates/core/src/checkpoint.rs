//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DVPV1"
//! u32 header length, header JSON (config text, loop counters, RNG states)
//! u32 tensor count
//! per tensor: u32 name length, name, u8 dtype, u8 rank, u64 extents..., raw data
//! ```
//!
//! Tensor names: `param.<name>`, `ema.<name>`, `opt.m.<name>`,
//! `opt.v.<name>` (f64) and `dct.S` (f64, `[c, d, d]`).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dct::NormMatrix;
use crate::error::{DvpError, Result};
use crate::model::LadderVae;
use crate::rng::{Rng, RngState};
use crate::tensor::{DType, Real, Tensor};
use crate::train::{AdamaxState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"DVPV1";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: String,
    norm_digest: String,
    epoch: usize,
    step: usize,
    best_val: Option<f64>,
    opt_t: u64,
    order_rng: RngState,
    binarize_rng: RngState,
    noise_rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub state: TrainState,
    /// Live values in store order.
    pub params: Vec<(String, Tensor<T>)>,
    /// EMA shadows, aligned with `params`.
    pub ema: Vec<Tensor<T>>,
    pub norm: NormMatrix,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DvpError::Format {
                offset: self.pos,
                detail: format!("truncated, need {n} more bytes"),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_tensor<U: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<U>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(U::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct RawTensor<'a> {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: &'a [u8],
    offset: usize,
}

impl RawTensor<'_> {
    fn decode<U: Real>(&self) -> Result<Tensor<U>> {
        if self.dtype != U::DTYPE {
            return Err(DvpError::Format {
                offset: self.offset,
                detail: format!("{} stored as {:?}, expected {:?}", self.name, self.dtype, U::DTYPE),
            });
        }
        let data = self.data.chunks_exact(self.dtype.size()).map(U::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of a model and its loop state.
    pub fn capture(model: &LadderVae<T>, train: &TrainConfig, state: &TrainState) -> Self {
        let store = model.store();
        Self {
            config: RunConfig {
                model: model.config().clone(),
                train: train.clone(),
            },
            state: state.clone(),
            params: store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
            ema: store
                .iter()
                .map(|(_, p)| p.ema.clone().unwrap_or_else(|| p.tensor.clone()))
                .collect(),
            norm: model.norm().clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let header = Header {
            dtype: dtype_name(T::DTYPE).into(),
            config: self.config.render(),
            norm_digest: self.norm.digest.clone(),
            epoch: s.epoch,
            step: s.step,
            best_val: s.best_val.is_finite().then_some(s.best_val),
            opt_t: s.opt.t,
            order_rng: s.order_rng,
            binarize_rng: s.binarize_rng,
            noise_rng: s.noise_rng,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let count = 4 * self.params.len() + 1;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_tensor(&mut out, &format!("param.{name}"), t);
        }
        for ((name, _), t) in self.params.iter().zip(&self.ema) {
            put_tensor(&mut out, &format!("ema.{name}"), t);
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let m = Tensor::new(t.shape().to_vec(), s.opt.m[i].clone())?;
            put_tensor(&mut out, &format!("opt.m.{name}"), &m);
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let v = Tensor::new(t.shape().to_vec(), s.opt.v[i].clone())?;
            put_tensor(&mut out, &format!("opt.v.{name}"), &v);
        }
        put_tensor(&mut out, "dct.S", &self.norm.s);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(DvpError::Format {
                offset: 0,
                detail: "not a DVPV1 checkpoint".into(),
            });
        }
        let hlen = r.u32()? as usize;
        let hpos = r.pos;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| DvpError::Format {
            offset: hpos,
            detail: format!("header: {e}"),
        })?;
        if header.dtype != dtype_name(T::DTYPE) {
            return Err(DvpError::Format {
                offset: hpos,
                detail: format!("checkpoint holds {} weights, expected {}", header.dtype, dtype_name(T::DTYPE)),
            });
        }
        let config = RunConfig::parse(&header.config)?;

        let count = r.u32()? as usize;
        let mut raw = Vec::with_capacity(count);
        let mut names = HashSet::new();
        for _ in 0..count {
            let offset = r.pos;
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| DvpError::Format {
                offset,
                detail: "tensor name is not UTF-8".into(),
            })?;
            if !names.insert(name.clone()) {
                return Err(DvpError::Format {
                    offset,
                    detail: format!("tensor {name} appears twice"),
                });
            }
            let dpos = r.pos;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| DvpError::Format {
                offset: dpos,
                detail: "unknown dtype".into(),
            })?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.take(n * dtype.size())?;
            raw.push(RawTensor {
                name,
                dtype,
                shape,
                data,
                offset,
            });
        }
        if r.pos != bytes.len() {
            return Err(DvpError::Format {
                offset: r.pos,
                detail: "trailing bytes".into(),
            });
        }

        let find = |name: &str| {
            raw.iter().find(|t| t.name == name).ok_or_else(|| DvpError::Format {
                offset: bytes.len(),
                detail: format!("missing tensor {name}"),
            })
        };
        let mut params = Vec::new();
        let mut ema = Vec::new();
        let mut opt = AdamaxState {
            m: Vec::new(),
            v: Vec::new(),
            t: header.opt_t,
        };
        for t in raw.iter().filter(|t| t.name.starts_with("param.")) {
            let name = &t.name["param.".len()..];
            params.push((name.to_string(), t.decode::<T>()?));
            ema.push(find(&format!("ema.{name}"))?.decode::<T>()?);
            opt.m.push(find(&format!("opt.m.{name}"))?.decode::<f64>()?.into_data());
            opt.v.push(find(&format!("opt.v.{name}"))?.decode::<f64>()?.into_data());
        }
        if raw.len() != 4 * params.len() + 1 {
            return Err(DvpError::Format {
                offset: bytes.len(),
                detail: "tensor table has unexpected entries".into(),
            });
        }
        let norm = NormMatrix::new(find("dct.S")?.decode::<f64>()?, header.norm_digest)?;
        Ok(Self {
            config,
            state: TrainState {
                epoch: header.epoch,
                step: header.step,
                best_val: header.best_val.unwrap_or(f64::INFINITY),
                order_rng: header.order_rng,
                binarize_rng: header.binarize_rng,
                noise_rng: header.noise_rng,
                opt,
            },
            params,
            ema,
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the model; every stored parameter must match one model
    /// parameter by name and shape, and vice versa.
    pub fn to_model(&self) -> Result<LadderVae<T>> {
        let mut model = LadderVae::new(self.config.model.clone(), self.norm.clone(), &mut Rng::new(0))?;
        if model.store().len() != self.params.len() {
            return Err(DvpError::Format {
                offset: 0,
                detail: format!(
                    "checkpoint has {} parameters, model expects {}",
                    self.params.len(),
                    model.store().len()
                ),
            });
        }
        for ((name, t), e) in self.params.iter().zip(&self.ema) {
            model.store_mut().set(name, t.clone())?;
            let id = model.store().id(name).expect("set succeeded");
            if e.shape() != t.shape() {
                return Err(DvpError::dim("checkpoint ema", name.clone()));
            }
            model.store_mut().get_mut(id).ema = Some(e.clone());
        }
        Ok(model)
    }
}
