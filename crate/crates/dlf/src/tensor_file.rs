//! Generic tensor container: `"DLFT"`, `u16` version, `u8` rank, `u32`
//! dims, `u8` dtype (0 = u8, 1 = f64), little-endian payload.

use std::path::Path;

use dlf_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DLFT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(u8::try_from(t.rank()).map_err(|_| Error::format("tensor", "rank above 255"))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("tensor", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.tag());
    match dtype {
        DType::U8 => {
            for (i, &v) in t.data().iter().enumerate() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::format("tensor", format!("value {v} at {i} is not a u8")));
                }
                out.push(v as u8);
            }
        }
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let err = |offset: usize, detail: String| Error::format("tensor", format!("byte {offset}: {detail}"));
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(err(0, "missing DLFT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| err(pos, "truncated dimensions".into()))?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let dtype = match bytes.get(pos) {
        Some(0) => DType::U8,
        Some(1) => DType::F64,
        Some(t) => return Err(err(pos, format!("unknown dtype tag {t}"))),
        None => return Err(err(pos, "missing dtype tag".into())),
    };
    pos += 1;
    let n: usize = shape.iter().product();
    let expected = pos + n * dtype.width();
    if bytes.len() != expected {
        return Err(err(pos, format!("expected {expected} bytes in total, found {}", bytes.len())));
    }
    let data = match dtype {
        DType::U8 => bytes[pos..].iter().map(|&b| b as f64).collect(),
        DType::F64 => bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| err(7, e.to_string()))?;
    Ok((t, dtype))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(t, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { section, detail } => Error::format(section, format!("{}: {detail}", path.display())),
        other => other,
    })
}
