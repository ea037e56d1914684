//! Binary descriptor-map sidecar.
//!
//! Layout (little-endian): magic `DMAP`, then u32 version, entry count,
//! descriptor dimension and flags (bit 0: entries carry a 3D point, bit 1:
//! entries carry a foreground mask). Each entry is pixel `u, v` as f64, the
//! optional point as three f64, the optional mask as one byte, then the
//! descriptor as f32 values.

use std::path::Path;

use layoutpnp::geom::{PixelPoint, Vec3};
use layoutpnp::matching::{DescriptorEntry, DescriptorMap};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"DMAP";
const VERSION: u32 = 1;
const HAS_POINT: u32 = 1;
const HAS_MASK: u32 = 2;

pub fn encode(map: &DescriptorMap) -> Result<Vec<u8>> {
    let entries = map.entries();
    let has_point = entries.iter().any(|e| e.point.is_some());
    let has_mask = entries.iter().any(|e| e.foreground.is_some());
    if has_point && entries.iter().any(|e| e.point.is_none()) {
        return Err(CliError::Input("descriptor map mixes entries with and without 3D points".into()));
    }
    let flags = if has_point { HAS_POINT } else { 0 } | if has_mask { HAS_MASK } else { 0 };
    let count = u32::try_from(entries.len()).map_err(|_| CliError::Input("descriptor map too large".into()))?;
    let dim = u32::try_from(map.dim()).map_err(|_| CliError::Input("descriptor dimension too large".into()))?;
    let mut out = Vec::with_capacity(20 + entries.len() * (16 + 4 * map.dim()));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, count, dim, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in entries {
        out.extend_from_slice(&e.pixel.u.to_le_bytes());
        out.extend_from_slice(&e.pixel.v.to_le_bytes());
        if let Some(p) = e.point {
            for c in p.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        if has_mask {
            out.push(u8::from(e.is_foreground()));
        }
        for d in &e.descriptor {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        chunk.try_into().ok()
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
    fn f32(&mut self) -> Option<f32> {
        self.take().map(f32::from_le_bytes)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DescriptorMap> {
    let truncated = || CliError::schema(path, "truncated descriptor map");
    let mut r = Reader { bytes, pos: 0 };
    if r.take::<4>().as_ref() != Some(MAGIC) {
        return Err(CliError::schema(path, "not a descriptor map (bad magic)"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(CliError::schema(path, format!("unsupported descriptor map version {version}")));
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    let dim = r.u32().ok_or_else(truncated)? as usize;
    let flags = r.u32().ok_or_else(truncated)?;
    if flags & !(HAS_POINT | HAS_MASK) != 0 {
        return Err(CliError::schema(path, format!("unknown descriptor map flags {flags:#x}")));
    }
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let u = r.f64().ok_or_else(truncated)?;
        let v = r.f64().ok_or_else(truncated)?;
        let point = if flags & HAS_POINT != 0 {
            let x = r.f64().ok_or_else(truncated)?;
            let y = r.f64().ok_or_else(truncated)?;
            let z = r.f64().ok_or_else(truncated)?;
            Some(Vec3::new(x, y, z))
        } else {
            None
        };
        let foreground = if flags & HAS_MASK != 0 {
            Some(r.take::<1>().ok_or_else(truncated)?[0] != 0)
        } else {
            None
        };
        let descriptor = (0..dim).map(|_| r.f32()).collect::<Option<Vec<f32>>>().ok_or_else(truncated)?;
        entries.push(DescriptorEntry {
            pixel: PixelPoint::new(u, v),
            point,
            descriptor,
            foreground,
        });
    }
    if r.pos != bytes.len() {
        return Err(CliError::schema(path, "trailing bytes after descriptor map"));
    }
    DescriptorMap::new(entries).map_err(|e| CliError::schema(path, e.to_string()))
}

pub fn read(path: &Path) -> Result<DescriptorMap> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

pub fn write(path: &Path, map: &DescriptorMap) -> Result<()> {
    std::fs::write(path, encode(map)?).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
