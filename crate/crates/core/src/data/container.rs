//! Bit-exact tensor container: `"CBRS"`, version byte, dtype byte, rank
//! (u32), extents (u32 each), little-endian row-major payload, CRC32 of the
//! payload.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, FormatErrorKind, Result};
use crate::instances::InstanceMap;

pub const MAGIC: &[u8; 4] = b"CBRS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    U8 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::I32),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl ContainerData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ContainerData::F32(_) => Dtype::F32,
            ContainerData::I32(_) => Dtype::I32,
            ContainerData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ContainerData::F32(v) => v.len(),
            ContainerData::I32(v) => v.len(),
            ContainerData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub data: ContainerData,
}

impl Container {
    pub fn new(shape: Vec<usize>, data: ContainerData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "container extents {shape:?} hold {n} values, payload has {}",
                data.len()
            )));
        }
        Ok(Container { shape, data })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Container {
            shape: t.shape().to_vec(),
            data: ContainerData::F32(t.data().to_vec()),
        }
    }

    pub fn into_tensor(self, context: &str) -> Result<Tensor<f32>> {
        match self.data {
            ContainerData::F32(v) => Tensor::new(self.shape, v),
            other => Err(dtype_mismatch(context, Dtype::F32, other.dtype())),
        }
    }

    /// Label plane as a `[H,W]` i32 container.
    pub fn from_instance_map(m: &InstanceMap) -> Self {
        Container {
            shape: vec![m.height(), m.width()],
            data: ContainerData::I32(m.ids().iter().map(|&v| v as i32).collect()),
        }
    }

    pub fn into_instance_map(self, context: &str) -> Result<InstanceMap> {
        let [h, w] = match self.shape[..] {
            [h, w] => [h, w],
            _ => {
                return Err(Error::format(
                    FormatErrorKind::Malformed,
                    context,
                    format!("label plane must be rank 2, got {:?}", self.shape),
                ))
            }
        };
        match self.data {
            ContainerData::I32(v) => {
                if v.iter().any(|&x| x < 0) {
                    return Err(Error::invalid(format!("{context}: negative instance id")));
                }
                InstanceMap::new(h, w, v.into_iter().map(|x| x as u32).collect())
                    .map_err(|e| Error::invalid(format!("{context}: {e}")))
            }
            other => Err(dtype_mismatch(context, Dtype::I32, other.dtype())),
        }
    }

    /// Image stored as u8 `[3,H,W]`, quantised from [0,1].
    pub fn image_u8(t: &Tensor<f32>) -> Self {
        Container {
            shape: t.shape().to_vec(),
            data: ContainerData::U8(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()),
        }
    }

    /// u8 payload scaled to [0,1]; f32 payload passed through.
    pub fn into_image(self, context: &str) -> Result<Tensor<f32>> {
        match self.data {
            ContainerData::U8(v) => Tensor::new(self.shape, v.into_iter().map(|b| b as f32 / 255.0).collect()),
            ContainerData::F32(v) => Tensor::new(self.shape, v),
            other => Err(dtype_mismatch(context, Dtype::U8, other.dtype())),
        }
    }
}

fn dtype_mismatch(context: &str, want: Dtype, got: Dtype) -> Error {
    Error::format(
        FormatErrorKind::DtypeMismatch,
        context,
        format!("expected {want:?} payload, found {got:?}"),
    )
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    if let ContainerData::F32(v) = &c.data {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("refusing to store non-finite value at index {i}")));
        }
    }
    let mut payload = Vec::with_capacity(c.data.len() * c.data.dtype().size());
    match &c.data {
        ContainerData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        ContainerData::I32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        ContainerData::U8(v) => payload.extend_from_slice(v),
    }
    let mut out = Vec::with_capacity(10 + 4 * c.shape.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(c.data.dtype() as u8);
    out.extend_from_slice(&(c.shape.len() as u32).to_le_bytes());
    for &d in &c.shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                FormatErrorKind::Truncated,
                self.context,
                format!("{what}: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes one container from the front of `bytes`; returns it and the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8], context: &str) -> Result<(Container, usize)> {
    let mut r = Reader { bytes, pos: 0, context };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(FormatErrorKind::BadMagic, context, "missing CBRS magic"));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::format(
            FormatErrorKind::UnsupportedVersion,
            context,
            format!("version {version}, this build reads {VERSION}"),
        ));
    }
    let code = r.take(1, "dtype")?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| Error::format(FormatErrorKind::UnknownDtype, context, format!("dtype code {code}")))?;
    let rank = r.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::format(FormatErrorKind::Malformed, context, format!("rank {rank} is implausible")));
    }
    let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::format(FormatErrorKind::Malformed, context, "payload size overflows"))?;
    let payload = r.take(n, "payload")?;
    let crc = r.u32("crc")?;
    if crc != crc32fast::hash(payload) {
        return Err(Error::format(FormatErrorKind::CrcMismatch, context, "payload checksum does not match"));
    }
    let data = match dtype {
        Dtype::F32 => ContainerData::F32(payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        Dtype::I32 => ContainerData::I32(payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect()),
        Dtype::U8 => ContainerData::U8(payload.to_vec()),
    };
    Ok((Container { shape, data }, r.pos))
}

pub fn decode(bytes: &[u8], context: &str) -> Result<Container> {
    let (c, used) = decode_prefix(bytes, context)?;
    if used != bytes.len() {
        return Err(Error::format(
            FormatErrorKind::Malformed,
            context,
            format!("{} trailing bytes after container", bytes.len() - used),
        ));
    }
    Ok(c)
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(c)?).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
