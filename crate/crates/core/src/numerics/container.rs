//! MEMT tensor container.
//!
//! One record is `b"MEMT"`, a little-endian `u16` version, a `u8` rank, `rank`
//! little-endian `u32` extents, then the `f32` little-endian payload. Files may
//! hold several records back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::tensor::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEMT";
pub const VERSION: u16 = 1;

pub fn write_record<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Byte length of the record [`write_record`] emits for `t`.
pub fn record_len(t: &Tensor) -> usize {
    4 + 2 + 1 + 4 * t.rank() + 4 * t.numel()
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> std::result::Result<Option<Tensor>, String> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.to_string()),
    }
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(|e| e.to_string())?;
    let ver = u16::from_le_bytes(ver);
    if ver != VERSION {
        return Err(format!("unsupported version {ver}"));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|e| e.to_string())?;
    let rank = rank[0] as usize;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        r.read_exact(&mut e).map_err(|e| e.to_string())?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| format!("truncated payload: {e}"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map(Some).map_err(|e| e.to_string())
}

pub fn save_tensors(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_record(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    loop {
        match read_record(&mut r) {
            Ok(Some(t)) => out.push(t),
            Ok(None) => return Ok(out),
            Err(reason) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason,
                })
            }
        }
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    save_tensors(path, &[t])
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut all = load_tensors(path)?;
    if all.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected one tensor record, found {}", all.len()),
        });
    }
    Ok(all.remove(0))
}
