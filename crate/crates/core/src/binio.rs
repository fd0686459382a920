//! Little-endian helpers for the versioned binary containers (SDFG, VFLD,
//! ADAM, EDIF, EPRS).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::Lattice;

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(
    r: &mut R,
    kind: &'static str,
    magic: &[u8; 4],
    version: u32,
) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|e| Error::format(kind, format!("truncated header: {e}")))?;
    if &got != magic {
        return Err(Error::format(
            kind,
            format!("bad magic {:?}", String::from_utf8_lossy(&got)),
        ));
    }
    let v = read_u32(r, kind)?;
    if v != version {
        return Err(Error::format(kind, format!("unsupported version {v}")));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, kind: &'static str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|e| Error::format(kind, format!("truncated: {e}")))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, kind: &'static str) -> Result<u64> {
    r.read_u64::<LittleEndian>()
        .map_err(|e| Error::format(kind, format!("truncated: {e}")))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, kind: &'static str) -> Result<f32> {
    r.read_f32::<LittleEndian>()
        .map_err(|e| Error::format(kind, format!("truncated: {e}")))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, kind: &'static str) -> Result<f64> {
    r.read_f64::<LittleEndian>()
        .map_err(|e| Error::format(kind, format!("truncated: {e}")))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, kind: &'static str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| Error::format(kind, format!("truncated payload: {e}")))?;
    Ok(out)
}

/// Shared layout count guard so a corrupt header cannot request absurd allocations.
pub(crate) fn checked_count(n: u64, kind: &'static str) -> Result<usize> {
    const LIMIT: u64 = 1 << 31;
    if n > LIMIT {
        return Err(Error::format(kind, format!("element count {n} too large")));
    }
    Ok(n as usize)
}

pub(crate) const SDFG_MAGIC: &[u8; 4] = b"SDFG";
pub(crate) const SDFG_VERSION: u32 = 1;

/// Writes one SDFG block: header, dims, origin, voxel size, x-fastest values.
pub(crate) fn write_sdfg<W: Write>(w: &mut W, lattice: &Lattice, values: &[f32]) -> Result<()> {
    debug_assert_eq!(values.len(), lattice.len());
    write_header(w, SDFG_MAGIC, SDFG_VERSION)?;
    for d in lattice.dims() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for o in lattice.origin() {
        w.write_f32::<LittleEndian>(o as f32)?;
    }
    w.write_f32::<LittleEndian>(lattice.voxel_size() as f32)?;
    write_f32s(w, values)
}

pub(crate) fn read_sdfg<R: Read>(r: &mut R) -> Result<(Lattice, Vec<f32>)> {
    const KIND: &str = "SDFG";
    read_header(r, KIND, SDFG_MAGIC, SDFG_VERSION)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u32(r, KIND)? as usize;
    }
    let mut origin = [0f64; 3];
    for o in &mut origin {
        *o = read_f32(r, KIND)? as f64;
    }
    let voxel = read_f32(r, KIND)? as f64;
    let lattice =
        Lattice::new(dims, origin, voxel).map_err(|e| Error::format(KIND, e.to_string()))?;
    let n = checked_count(lattice.len() as u64, KIND)?;
    let values = read_f32s(r, n, KIND)?;
    Ok((lattice, values))
}
