//! Flat binary serialization for named tensors.
//!
//! Layout: magic bytes `DLPL`, a little-endian `u32` version, then a run of
//! records until end of file. Each record is
//! `(name-length: u32, name: utf8 bytes, rank: u32, extents: u64 each,
//! values: f64 little-endian)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLPL";
pub const VERSION: u32 = 1;

pub fn write_bundle(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in records {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: file too short for magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}, expected {VERSION}",
            path.display()
        )));
    }

    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break, // clean end of file
            4 => {}
            n => {
                r.read_exact(&mut len_buf[n..]).map_err(|_| {
                    Error::Format(format!("{}: truncated record header", path.display()))
                })?;
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Format(format!(
                "{}: implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format(format!("{}: truncated record name", path.display())))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: record name is not utf8", path.display())))?;

        let rank = read_u32(&mut r, path, "rank")? as usize;
        if rank > 16 {
            return Err(Error::Format(format!(
                "{}: implausible rank {rank} for record {name:?}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!("{}: truncated extents for {name:?}", path.display()))
            })?;
            let e = u64::from_le_bytes(buf);
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        if numel > 1 << 30 {
            return Err(Error::Format(format!(
                "{}: implausible element count {numel} for record {name:?}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!("{}: truncated values for {name:?}", path.display()))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("{}: record {name:?}: {e}", path.display())))?;
        records.push((name, tensor));
    }
    Ok(records)
}

/// Look a single record up by name.
pub fn find_record<'a>(records: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{}: truncated {what}", path.display())))?;
    Ok(u32::from_le_bytes(buf))
}
