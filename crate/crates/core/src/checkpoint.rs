//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic `LOOKBACK`, `u32` format version, `u64` manifest
//! length, the UTF-8 JSON manifest, then the raw little-endian arrays. The
//! manifest carries run metadata and one `{name, shape, dtype, offset,
//! nbytes}` entry per array, with offsets relative to the start of the data
//! section.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LookBackNet, ModelConfig};
use crate::optim::Adam;
use crate::rng::RngState;
use crate::scalar::{DType, Precision, Scalar};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LOOKBACK";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
            ArrayData::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => f32::extend_le_bytes(v, out),
            ArrayData::F64(v) => f64::extend_le_bytes(v, out),
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(f32::from_le_chunk).collect()),
            DType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(f64::from_le_chunk).collect()),
            DType::U8 => ArrayData::U8(bytes.to_vec()),
            DType::U64 => ArrayData::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    fn from_scalar<S: Scalar>(name: String, a: &ArrayD<S>) -> Self {
        let values: Vec<S> = a.iter().copied().collect();
        let mut bytes = Vec::with_capacity(values.len() * S::DTYPE.size());
        S::extend_le_bytes(&values, &mut bytes);
        Self {
            name,
            shape: a.shape().to_vec(),
            data: ArrayData::read(S::DTYPE, &bytes),
        }
    }

    fn to_scalar<S: Scalar>(&self) -> Result<ArrayD<S>> {
        if self.data.dtype() != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "array `{}` is {:?}, expected {:?}",
                self.name,
                self.data.dtype(),
                S::DTYPE
            )));
        }
        let mut bytes = Vec::new();
        self.data.write(&mut bytes);
        let values: Vec<S> = bytes.chunks_exact(S::DTYPE.size()).map(S::from_le_chunk).collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), values)
            .map_err(|e| Error::Checkpoint(format!("array `{}`: {e}", self.name)))
    }
}

/// Run metadata stored in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Episodes completed.
    pub episode: u64,
    pub adam_step: u64,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    arrays: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const RNG_SEED: &str = "rng/seed";
const RNG_POS: &str = "rng/stream_and_word_pos";

impl Checkpoint {
    pub fn from_parts<S: Scalar>(
        meta: CheckpointMeta,
        model: &LookBackNet<S>,
        optimizer: Option<&Adam<S>>,
        sampler: Option<&RngState>,
    ) -> Self {
        let mut arrays = Vec::new();
        let params = model.named_params();
        for (name, p) in &params {
            arrays.push(NamedArray::from_scalar(format!("{PARAM}{name}"), &p.value));
        }
        for (name, b) in model.named_buffers() {
            arrays.push(NamedArray::from_scalar(format!("{BUFFER}{name}"), b));
        }
        if let Some(adam) = optimizer {
            for ((name, _), m) in params.iter().zip(&adam.first_moment) {
                arrays.push(NamedArray::from_scalar(format!("{ADAM_M}{name}"), m));
            }
            for ((name, _), v) in params.iter().zip(&adam.second_moment) {
                arrays.push(NamedArray::from_scalar(format!("{ADAM_V}{name}"), v));
            }
        }
        if let Some(rng) = sampler {
            arrays.push(NamedArray {
                name: RNG_SEED.into(),
                shape: vec![32],
                data: ArrayData::U8(rng.seed.to_vec()),
            });
            arrays.push(NamedArray {
                name: RNG_POS.into(),
                shape: vec![3],
                data: ArrayData::U64(vec![rng.stream, rng.word_pos as u64, (rng.word_pos >> 64) as u64]),
            });
        }
        Self { meta, arrays }
    }

    fn find(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuilds the network. The element type must match the stored precision.
    pub fn model<S: Scalar>(&self) -> Result<LookBackNet<S>> {
        if self.meta.precision != S::PRECISION {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision is {:?}, requested {:?}",
                self.meta.precision,
                S::PRECISION
            )));
        }
        let mut model = LookBackNet::<S>::new(self.meta.model.clone(), 0)?;
        for (name, p) in model.named_params_mut() {
            let arr = self
                .find(&format!("{PARAM}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let v = arr.to_scalar::<S>()?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has wrong shape")));
            }
            p.value = v;
        }
        for (name, b) in model.named_buffers_mut() {
            let arr = self
                .find(&format!("{BUFFER}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}`")))?;
            let v = arr.to_scalar::<S>()?;
            if v.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("buffer `{name}` has wrong shape")));
            }
            *b = v;
        }
        Ok(model)
    }

    pub fn optimizer<S: Scalar>(&self, model: &LookBackNet<S>) -> Result<Option<Adam<S>>> {
        let params = model.named_params();
        let Some(first) = params.first() else {
            return Ok(None);
        };
        if self.find(&format!("{ADAM_M}{}", first.0)).is_none() {
            return Ok(None);
        }
        let mut adam = Adam::new(params.iter().map(|(_, p)| *p));
        adam.step = self.meta.adam_step;
        for (i, (name, _)) in params.iter().enumerate() {
            let get = |prefix: &str| -> Result<ArrayD<S>> {
                self.find(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?
                    .to_scalar::<S>()
            };
            adam.first_moment[i] = get(ADAM_M)?;
            adam.second_moment[i] = get(ADAM_V)?;
        }
        Ok(Some(adam))
    }

    pub fn sampler_state(&self) -> Result<Option<RngState>> {
        match (self.find(RNG_SEED), self.find(RNG_POS)) {
            (Some(NamedArray { data: ArrayData::U8(seed), .. }), Some(NamedArray { data: ArrayData::U64(pos), .. }))
                if seed.len() == 32 && pos.len() == 3 =>
            {
                Ok(Some(RngState {
                    seed: seed.as_slice().try_into().expect("32 bytes"),
                    stream: pos[0],
                    word_pos: (pos[1] as u128) | ((pos[2] as u128) << 64),
                }))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Checkpoint("malformed rng state".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let offset = data.len() as u64;
            a.data.write(&mut data);
            entries.push(ManifestEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: a.data.dtype(),
                offset,
                nbytes: data.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(20 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let data = &body[mlen..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if end > data.len() || start > end {
                return Err(Error::Checkpoint(format!("array `{}` out of bounds", e.name)));
            }
            let arr = ArrayData::read(e.dtype, &data[start..end]);
            if arr.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("array `{}` size does not match shape", e.name)));
            }
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: arr,
            });
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn any_model(&self) -> Result<AnyModel> {
        Ok(match self.meta.precision {
            Precision::Single => AnyModel::Single(self.model()?),
            Precision::Double => AnyModel::Double(self.model()?),
        })
    }
}

/// A network in either precision, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Single(LookBackNet<f32>),
    Double(LookBackNet<f64>),
}

/// Runs `$body` with `$m` bound to the concrete network.
#[macro_export]
macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            $crate::checkpoint::AnyModel::Single($m) => $body,
            $crate::checkpoint::AnyModel::Double($m) => $body,
        }
    };
}
