//! The `FGN1` model file format.
//!
//! All integers little-endian:
//!
//! ```text
//! "FGN1"                      magic
//! u8                          kind (1 generator, 2 discriminator)
//! u32 L                       layer count
//! u32 × (L + 1)               layer dims d0..dL
//! u8  × L                     activation codes
//! u32 T                       tensor count
//! T × { u8 ndim, u32 × ndim dims, f32 × prod(dims) data }
//! u8  × T                     trainable flags (0 or 1)
//! u32                         CRC32 (IEEE) of every byte after the magic
//! ```

use thiserror::Error;

use crate::diffcore::{Activation, Mlp, MlpSpec, ParamTensor, Tensor};
use crate::gan::{DiscriminatorModel, GeneratorModel};

pub const MAGIC: &[u8; 4] = b"FGN1";
pub const KIND_GENERATOR: u8 = 1;
pub const KIND_DISCRIMINATOR: u8 = 2;

// Keeps a corrupted length field from requesting absurd allocations.
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated model file")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown activation code {0}")]
    UnknownActivation(u8),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Either network role, as stored in a model file.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Generator(GeneratorModel),
    Discriminator(DiscriminatorModel),
}

impl Model {
    pub fn kind(&self) -> u8 {
        match self {
            Model::Generator(_) => KIND_GENERATOR,
            Model::Discriminator(_) => KIND_DISCRIMINATOR,
        }
    }

    pub fn net(&self) -> &Mlp {
        match self {
            Model::Generator(g) => g.net(),
            Model::Discriminator(d) => d.net(),
        }
    }

    pub fn into_generator(self) -> Result<GeneratorModel, FormatError> {
        match self {
            Model::Generator(g) => Ok(g),
            Model::Discriminator(_) => Err(FormatError::Invalid("expected a generator".into())),
        }
    }
}

impl From<GeneratorModel> for Model {
    fn from(g: GeneratorModel) -> Self {
        Model::Generator(g)
    }
}

impl From<DiscriminatorModel> for Model {
    fn from(d: DiscriminatorModel) -> Self {
        Model::Discriminator(d)
    }
}

pub fn serialize_model(model: &Model) -> Vec<u8> {
    let net = model.net();
    let spec = net.spec();
    let mut out = Vec::with_capacity(64 + 4 * net.params().iter().map(|p| p.value.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.push(model.kind());
    out.extend_from_slice(&(spec.layer_count() as u32).to_le_bytes());
    for &d in spec.layer_dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(spec.activations().iter().map(|a| a.code()));
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(net.params().iter().map(|p| p.trainable as u8));
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn serialize_generator(g: &GeneratorModel) -> Vec<u8> {
    serialize_model(&Model::Generator(g.clone()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize, FormatError> {
        let n = self.u32()? as usize;
        // Each counted item needs at least one byte; more than remain means truncation.
        if n > self.buf.len() - self.pos.min(self.buf.len()) {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }
}

struct RawModel<'a> {
    kind: u8,
    dims: Vec<u32>,
    codes: &'a [u8],
    tensors: Vec<(Vec<usize>, &'a [u8])>,
    flags: &'a [u8],
}

fn read_structure(bytes: &[u8]) -> Result<RawModel<'_>, FormatError> {
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let kind = r.u8()?;
    let layers = r.count()?;
    let dims = (0..=layers).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let codes = r.take(layers)?;
    let count = r.count()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let elems = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or(FormatError::Truncated)?;
        let data = r.take(elems * 4)?;
        tensors.push((shape, data));
    }
    let flags = r.take(count)?;
    let rest = bytes.len() - r.pos;
    if rest < 4 {
        return Err(FormatError::Truncated);
    }
    if rest > 4 {
        return Err(FormatError::TrailingBytes(rest - 4));
    }
    Ok(RawModel {
        kind,
        dims,
        codes,
        tensors,
        flags,
    })
}

pub fn deserialize_model(bytes: &[u8]) -> Result<Model, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let raw = read_structure(bytes)?;

    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let activations = raw
        .codes
        .iter()
        .map(|&c| Activation::from_code(c).ok_or(FormatError::UnknownActivation(c)))
        .collect::<Result<Vec<_>, _>>()?;
    if raw.kind != KIND_GENERATOR && raw.kind != KIND_DISCRIMINATOR {
        return Err(FormatError::UnknownKind(raw.kind));
    }
    let dims = raw.dims.iter().map(|&d| d as usize).collect();
    let spec = MlpSpec::new(dims, activations).map_err(|e| FormatError::Invalid(e.to_string()))?;

    let mut params = Vec::with_capacity(raw.tensors.len());
    for ((shape, data), &flag) in raw.tensors.into_iter().zip(raw.flags) {
        let trainable = match flag {
            0 => false,
            1 => true,
            f => return Err(FormatError::Invalid(format!("trainable flag {f}"))),
        };
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
        params.push(ParamTensor::new(value, trainable));
    }
    let net = Mlp::from_parts(spec, params).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(match raw.kind {
        KIND_GENERATOR => Model::Generator(GeneratorModel::new(net)),
        _ => Model::Discriminator(
            DiscriminatorModel::new(net).map_err(|e| FormatError::Invalid(e.to_string()))?,
        ),
    })
}

pub fn deserialize_generator(bytes: &[u8]) -> Result<GeneratorModel, FormatError> {
    deserialize_model(bytes)?.into_generator()
}
