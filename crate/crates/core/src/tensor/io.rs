//! Binary tensor format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"KDTN"
//! 4       4         version, u32 LE (currently 1)
//! 8       4         rank r, u32 LE
//! 12      8*r       extents, u64 LE each
//! 12+8r   8*numel   values, f64 LE, row-major
//! ```
//! Gradients and the `requires_grad` flag are not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KDTN";
pub const VERSION: u32 = 1;

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut long = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut long)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(long)).map_err(|_| Error::Format("extent overflows usize".into()))?,
        );
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut long)?;
        data.push(f64::from_le_bytes(long));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_from(BufReader::new(File::open(path)?))
}
