//! SALV volume container (integers little-endian):
//!
//! ```text
//! "SALV" | u32 version = 1 | u8 flags (bit0 intensity, bit1 mask)
//! u32 Z | u32 H | u32 W
//! [f32 intensity x Z*H*W]   if bit0
//! [u8 mask x Z*H*W]         if bit1
//! u32 CRC32 (IEEE) of the payload bytes
//! ```

use std::path::Path;

use crate::error::{Result, SalientError};
use crate::morph::Mask3;
use crate::params::Reader;

pub const SALV_MAGIC: &[u8; 4] = b"SALV";
pub const SALV_VERSION: u32 = 1;
pub const FLAG_INTENSITY: u8 = 1;
pub const FLAG_MASK: u8 = 2;
const HEADER: usize = 4 + 4 + 1 + 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SalvVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub intensity: Option<Vec<f32>>,
    pub mask: Option<Mask3>,
}

impl SalvVolume {
    pub fn flags(&self) -> u8 {
        (if self.intensity.is_some() { FLAG_INTENSITY } else { 0 }) | (if self.mask.is_some() { FLAG_MASK } else { 0 })
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }
}

pub fn volume_bytes(v: &SalvVolume) -> Result<Vec<u8>> {
    let n = v.voxels();
    if v.flags() == 0 {
        return Err(SalientError::invalid("volume carries neither intensity nor mask"));
    }
    for d in [v.depth, v.height, v.width] {
        if d == 0 || d > u32::MAX as usize {
            return Err(SalientError::dim("volume dimensions must be positive and fit in u32"));
        }
    }
    let mut out = Vec::with_capacity(HEADER + 5 * n + 4);
    out.extend_from_slice(SALV_MAGIC);
    out.extend_from_slice(&SALV_VERSION.to_le_bytes());
    out.push(v.flags());
    for d in [v.depth, v.height, v.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    if let Some(data) = &v.intensity {
        if data.len() != n {
            return Err(SalientError::dim(format!("intensity holds {} values, expected {}", data.len(), n)));
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(m) = &v.mask {
        if (m.d, m.h, m.w) != (v.depth, v.height, v.width) {
            return Err(SalientError::dim("mask dimensions differ from the volume header"));
        }
        out.extend_from_slice(&m.data);
    }
    let crc = crc32fast::hash(&out[HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn read_volume_bytes(bytes: &[u8]) -> Result<SalvVolume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != SALV_MAGIC {
        return Err(SalientError::format("magic", "expected SALV"));
    }
    let version = r.u32("version")?;
    if version != SALV_VERSION {
        return Err(SalientError::format("version", format!("unsupported version {}", version)));
    }
    let flags = r.u8("flags")?;
    if flags & !(FLAG_INTENSITY | FLAG_MASK) != 0 || flags == 0 {
        return Err(SalientError::format("flags", format!("invalid flag byte {:#04x}", flags)));
    }
    let (depth, height, width) = (r.u32("z")? as usize, r.u32("h")? as usize, r.u32("w")? as usize);
    let n = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| SalientError::format("dims", "dimension product overflows"))?;
    if n == 0 {
        return Err(SalientError::format("dims", "zero-sized volume"));
    }
    let payload = if flags & FLAG_INTENSITY != 0 { 4 * n } else { 0 } + if flags & FLAG_MASK != 0 { n } else { 0 };
    if bytes.len() != HEADER + payload + 4 {
        return Err(SalientError::format(
            "length",
            format!("{} bytes, header implies {}", bytes.len(), HEADER + payload + 4),
        ));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(&bytes[HEADER..HEADER + payload]) != stored {
        return Err(SalientError::format("crc32", "payload checksum mismatch"));
    }
    let intensity = if flags & FLAG_INTENSITY != 0 {
        let raw = r.take(4 * n, "intensity")?;
        Some(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    } else {
        None
    };
    let mask = if flags & FLAG_MASK != 0 {
        let raw = r.take(n, "mask")?;
        if raw.iter().any(|&v| v > 1) {
            return Err(SalientError::format("mask", "mask bytes must be 0 or 1"));
        }
        Some(Mask3 { d: depth, h: height, w: width, data: raw.to_vec() })
    } else {
        None
    };
    Ok(SalvVolume { depth, height, width, intensity, mask })
}

pub fn write_volume(path: &Path, v: &SalvVolume) -> Result<()> {
    std::fs::write(path, volume_bytes(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<SalvVolume> {
    read_volume_bytes(&std::fs::read(path)?)
}
