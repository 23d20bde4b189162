//! FVT1 raw tensor files: `b"FVT1"`, u32 rank, rank × u32 dims, then the
//! row-major payload as little-endian f32. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVT1";

pub fn write_fvt1<W: Write>(mut w: W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_fvt1<R: Read>(mut r: R) -> std::result::Result<Tensor<f32>, String> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| e.to_string())?;
    if &word != MAGIC {
        return Err(format!("bad magic {word:?}"));
    }
    let mut read_u32 = |r: &mut R| -> std::result::Result<u32, String> {
        r.read_exact(&mut word).map_err(|e| e.to_string())?;
        Ok(u32::from_le_bytes(word))
    };
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("unsupported rank {rank}"));
    }
    let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|e| format!("truncated payload: {e}"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| e.to_string())?;
    if !rest.is_empty() {
        return Err(format!("{} trailing bytes", rest.len()));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn save_fvt1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fvt1(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_fvt1(path: &Path) -> Result<Tensor<f32>> {
    let r = BufReader::new(File::open(path)?);
    read_fvt1(r).map_err(|reason| Error::TensorFile { path: path.to_owned(), reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_fvt1(&mut buf, &t).unwrap();
        let mut expect = b"FVT1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_fvt1(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_fvt1(&mut buf, &t).unwrap();
        assert!(read_fvt1(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_fvt1(&buf[..]).is_err());
    }
}
