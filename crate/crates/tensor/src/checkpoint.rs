//! Flat binary container for named tensors.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DANT" | version | count
//! count x ( name_len | name (UTF-8) | rank | dims[rank] | values (f64 LE) )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DANT";
pub const VERSION: u32 = 1;

pub fn write_entries<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(entries.len(), "entry count")?.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&u32_of(bytes.len(), "name length")?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{what} {v} exceeds u32")))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                TensorError::Checkpoint(format!(
                    "truncated at byte {} while reading {what} ({n} bytes expected)",
                    self.offset
                ))
            } else {
                TensorError::Io(e)
            }
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_entries<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { inner: r, offset: 0 };
    let magic = c.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?} at byte 0")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.offset;
        let name = String::from_utf8(c.bytes(name_len, "name")?)
            .map_err(|_| TensorError::Checkpoint(format!("name at byte {at} is not UTF-8")))?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.bytes(numel * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| TensorError::Checkpoint(format!("entry `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let f = File::create(path)?;
    write_entries(BufWriter::new(f), entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path)?;
    read_entries(BufReader::new(f))
}
