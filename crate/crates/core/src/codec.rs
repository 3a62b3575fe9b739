//! Little-endian binary helpers shared by the on-disk formats.
//!
//! Every file starts with an 8-byte magic and a `u32` version. Arrays are
//! written as a `u64` length followed by that many little-endian `f64`s.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

/// Reads and checks the magic, returning the version.
pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], max_version: u32) -> Result<u32> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version == 0 || version > max_version {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(version)
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_u32::<LittleEndian>(v)?)
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(r.read_u32::<LittleEndian>()?)
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_u64::<LittleEndian>(v)?)
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(r.read_u64::<LittleEndian>()?)
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_f64::<LittleEndian>(v)?)
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(r.read_f64::<LittleEndian>()?)
}

pub fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Reads a length-prefixed array; `expected` guards against corrupt lengths.
pub fn read_f64s<R: Read>(r: &mut R, expected: Option<usize>) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if let Some(e) = expected {
        if n != e {
            return Err(Error::Format(format!("array length {n}, expected {e}")));
        }
    }
    if n > (1 << 32) {
        return Err(Error::Format(format!("array length {n} is implausible")));
    }
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}
