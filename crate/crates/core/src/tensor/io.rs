//! HMST binary tensor records.
//!
//! Layout: `b"HMST"`, version `0x01`, dtype `0x01` (f32 little-endian),
//! `u8` rank, `rank × u32` LE extents, then the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor, MAX_DIMS};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 4] = b"HMST";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32, t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads one record, reporting byte offsets relative to where reading began.
pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, 0, "header")?;
    if &head[..4] != MAGIC {
        bail!(Data, "bad tensor magic {:?} at offset 0", &head[..4]);
    }
    if head[4] != VERSION {
        bail!(Data, "unsupported tensor version {} at offset 4", head[4]);
    }
    if head[5] != DTYPE_F32 {
        bail!(Data, "unsupported tensor dtype {} at offset 5", head[5]);
    }
    let rank = head[6] as usize;
    if rank == 0 || rank > MAX_DIMS {
        bail!(Data, "tensor rank {rank} at offset 6 outside 1..={MAX_DIMS}");
    }
    let mut dims = vec![0u8; rank * 4];
    read_exact(r, &mut dims, 7, "extents")?;
    let shape: Vec<usize> = dims
        .chunks(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data(format!("tensor extents {shape:?} overflow")))?;
    let mut payload = vec![0u8; len * 4];
    read_exact(r, &mut payload, 7 + rank * 4, "payload")?;
    let data = payload
        .chunks(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Data(format!("invalid tensor record: {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data(format!(
            "truncated tensor {what}: needed {} bytes at offset {offset}",
            buf.len()
        )),
        _ => Error::Io(e),
    })
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"HMST\x01\x01\x02".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let t = Tensor::<f32>::scalar(3.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor::<f32>(&mut bad.as_slice()), Err(Error::Data(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_tensor::<f32>(&mut bad.as_slice()), Err(Error::Data(_))));
        let truncated = &buf[..buf.len() - 1];
        let err = read_tensor::<f32>(&mut &truncated[..]).unwrap_err();
        assert!(err.to_string().contains("offset 11"), "{err}");
    }
}
