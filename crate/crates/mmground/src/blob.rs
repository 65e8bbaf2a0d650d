//! Raw tensor blob format shared by dataset scenes and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4   magic "MMGT"
//! bytes 4..6   format version, u16 (currently 1)
//! byte  6      dtype code, u8 (1 = f32, 2 = f64)
//! byte  7      rank, u8
//! next 8*rank  dims, u64 each
//! rest         payload, row-major little-endian scalars
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MMGT";
pub const VERSION: u16 = 1;

pub fn write_tensor<F: Scalar, W: Write>(mut w: W, tensor: &ArrayD<F>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[F::DTYPE_CODE, tensor.ndim() as u8])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    // Standard layout is guaranteed for arrays we construct; fall back to a
    // copy for views with exotic strides.
    if let Some(slice) = tensor.as_slice() {
        for &v in slice {
            write_scalar(&mut w, v)?;
        }
    } else {
        for &v in tensor.iter() {
            write_scalar(&mut w, v)?;
        }
    }
    Ok(())
}

pub fn read_tensor<F: Scalar, R: Read>(mut r: R) -> Result<ArrayD<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Blob("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Blob(format!("bad magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let (dtype, rank) = (hdr[0], hdr[1] as usize);
    if dtype != F::DTYPE_CODE {
        return Err(Error::Blob(format!(
            "dtype code {dtype} does not match requested scalar ({})",
            F::DTYPE_CODE
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_scalar(&mut r)?);
    }
    // Reject trailing garbage so truncation/corruption cannot round-trip.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Blob("trailing bytes after payload".into()));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::Blob(format!("shape/payload mismatch: {e}")))
}

pub fn save_tensor<F: Scalar>(path: &Path, tensor: &ArrayD<F>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, tensor)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor<F: Scalar>(path: &Path) -> Result<ArrayD<F>> {
    let bytes = std::fs::read(path)?;
    read_tensor(std::io::Cursor::new(bytes))
}

fn write_scalar<F: Scalar, W: Write>(w: &mut W, v: F) -> Result<()> {
    match F::DTYPE_CODE {
        1 => w.write_all(&(v.to_f32().unwrap()).to_le_bytes())?,
        2 => w.write_all(&(v.to_f64().unwrap()).to_le_bytes())?,
        _ => unreachable!(),
    }
    Ok(())
}

fn read_scalar<F: Scalar, R: Read>(r: &mut R) -> Result<F> {
    match F::DTYPE_CODE {
        1 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Blob("truncated payload".into()))?;
            Ok(F::from_f32(f32::from_le_bytes(b)).unwrap())
        }
        2 => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Blob("truncated payload".into()))?;
            Ok(F::from_f64(f64::from_le_bytes(b)).unwrap())
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_f32_rank3() {
        let t = ArrayD::<f32>::from_shape_vec(
            IxDyn(&[2, 3, 4]),
            (0..24).map(|i| i as f32 * 0.5).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: ArrayD<f32> = read_tensor(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn round_trip_f64_scalarish() {
        let t = ArrayD::<f64>::from_shape_vec(IxDyn(&[1]), vec![std::f64::consts::PI]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: ArrayD<f64> = read_tensor(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = ArrayD::<f32>::zeros(IxDyn(&[4, 4]));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensor::<f32, _>(std::io::Cursor::new(buf)).unwrap_err();
        assert!(format!("{err}").contains("truncated"));
    }

    #[test]
    fn wrong_dtype_is_an_error() {
        let t = ArrayD::<f32>::zeros(IxDyn(&[2]));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor::<f64, _>(std::io::Cursor::new(buf)).is_err());
    }
}
