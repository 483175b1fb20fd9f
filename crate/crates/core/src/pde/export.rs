//! Surface export.
//!
//! CSV: header `t,x,Y,Z`, one row per node, times outer.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size       field
//! 0       4          magic "CBSF"
//! 4       2          format version (1)
//! 6       1          regime (0 pre-default, 1 post-default, 2 premium)
//! 7       1          reserved, 0
//! 8       4          n_times  (u32)
//! 12      4          n_states (u32)
//! 16      8*nt       times
//! ..      8*nx       states
//! ..      8*nt*nx    Y, row-major (time outer)
//! ..      8*nt*nx    Z, row-major
//! ..      4          CRC-32 (IEEE) of every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::surface::{Regime, SolutionSurface};
use crate::error::{Error, Result};

pub const SURFACE_MAGIC: [u8; 4] = *b"CBSF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

pub fn write_surface_csv(surface: &SolutionSurface, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["t", "x", "Y", "Z"]).map_err(|e| Error::Io(e.to_string()))?;
    for (j, t) in surface.times.iter().enumerate() {
        for (i, x) in surface.states.iter().enumerate() {
            w.write_record([
                t.to_string(),
                x.to_string(),
                surface.y[(j, i)].to_string(),
                surface.z[(j, i)].to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn surface_to_binary(surface: &SolutionSurface) -> Vec<u8> {
    let (nt, nx) = (surface.times.len(), surface.states.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (nt + nx + 2 * nt * nx) + 4);
    buf.extend_from_slice(&SURFACE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(surface.regime.code());
    buf.push(0);
    buf.extend_from_slice(&(nt as u32).to_le_bytes());
    buf.extend_from_slice(&(nx as u32).to_le_bytes());
    let floats = surface.times.iter().chain(&surface.states).chain(surface.y.iter()).chain(surface.z.iter());
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_surface_binary(surface: &SolutionSurface, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&surface_to_binary(surface))?;
    Ok(())
}

/// Parses a binary surface; the slice must hold exactly one surface.
pub fn surface_from_binary(bytes: &[u8]) -> Result<SolutionSurface> {
    let (s, used) = surface_from_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after surface", bytes.len() - used)));
    }
    Ok(s)
}

/// Parses one surface from the start of `bytes`, returning it and the
/// number of bytes consumed.
pub(crate) fn surface_from_prefix(bytes: &[u8]) -> Result<(SolutionSurface, usize)> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad("file too short for a surface header"));
    }
    if bytes[0..4] != SURFACE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let regime = Regime::from_code(bytes[6]).ok_or_else(|| bad("unknown regime code"))?;
    let nt = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let nx = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n_floats = nt
        .checked_mul(nx)
        .and_then(|m| m.checked_mul(2))
        .and_then(|m| m.checked_add(nt + nx))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let body_end = HEADER_LEN + 8 * n_floats;
    let total = body_end + 4;
    if bytes.len() < total {
        return Err(bad("truncated surface"));
    }
    let stored = u32::from_le_bytes(bytes[body_end..total].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut floats = bytes[HEADER_LEN..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let times: Vec<f64> = floats.by_ref().take(nt).collect();
    let states: Vec<f64> = floats.by_ref().take(nx).collect();
    let y: Vec<f64> = floats.by_ref().take(nt * nx).collect();
    let z: Vec<f64> = floats.collect();
    let y = Array2::from_shape_vec((nt, nx), y).map_err(|e| Error::Format(e.to_string()))?;
    let z = Array2::from_shape_vec((nt, nx), z).map_err(|e| Error::Format(e.to_string()))?;
    Ok((SolutionSurface::new(times, states, y, z, regime)?, total))
}

pub fn read_surface_binary(path: &Path) -> Result<SolutionSurface> {
    surface_from_binary(&std::fs::read(path)?)
}
