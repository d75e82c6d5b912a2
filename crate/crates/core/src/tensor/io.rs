//! VTF1 tensor container.
//!
//! Layout: magic `VTF1`, `u32` rank, `rank` × `u32` extents, then the
//! row-major `f64` payload. All integers and floats are little-endian.
//! Several records may be concatenated in one file.

use std::io::{self, Read, Write};

use super::{Result, Tensor, TensorError};

pub const VTF_MAGIC: &[u8; 4] = b"VTF1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(VTF_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
fn read_record<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 4 || &magic != VTF_MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &magic[..got])));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format("extent product overflows".into()))?;
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map(Some)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    read_record(r)?.ok_or_else(|| TensorError::Format("empty stream".into()))
}

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<()> {
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Reads records until the end of the stream.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_record(r)? {
        out.push(t);
    }
    Ok(out)
}
