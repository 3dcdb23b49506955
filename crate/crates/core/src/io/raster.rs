//! Raw little-endian rasters: `.f32` image/map blobs and `.u8` label blobs,
//! row-major with no header. Shapes travel in the sidecar manifests.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Mask;
use ndarray::Array2;
use std::fs;
use std::path::Path;

pub fn write_f32<T: Scalar>(path: &Path, arr: &Array2<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(arr.len() * 4);
    for v in arr.iter() {
        bytes.extend_from_slice(&(v.to_real() as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32<T: Scalar>(path: &Path, height: usize, width: usize) -> Result<Array2<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() != height * width * 4 {
        return Err(Error::precondition(format!(
            "{} holds {} bytes, expected {} for {height}x{width} f32",
            path.display(),
            bytes.len(),
            height * width * 4
        )));
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::from_real(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Array2::from_shape_vec((height, width), values)
        .map_err(|e| Error::precondition(format!("raster shape: {e}")))
}

pub fn write_u8(path: &Path, arr: &Mask) -> Result<()> {
    let bytes: Vec<u8> = arr.iter().copied().collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_u8(path: &Path, height: usize, width: usize) -> Result<Mask> {
    let bytes = fs::read(path)?;
    if bytes.len() != height * width {
        return Err(Error::precondition(format!(
            "{} holds {} bytes, expected {} for {height}x{width} u8",
            path.display(),
            bytes.len(),
            height * width
        )));
    }
    Array2::from_shape_vec((height, width), bytes)
        .map_err(|e| Error::precondition(format!("raster shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_rasters_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        let arr = Array2::from_shape_fn((5, 7), |(y, x)| (y as f32 * 0.31 + x as f32 * 0.07).sin());
        write_f32(&path, &arr).unwrap();
        let back: Array2<f32> = read_f32(&path, 5, 7).unwrap();
        for (a, b) in arr.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(read_f32::<f32>(&path, 5, 8).is_err());
    }

    #[test]
    fn u8_rasters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.u8");
        let arr = Array2::from_shape_fn((3, 4), |(y, x)| ((y * 4 + x) % 5) as u8);
        write_u8(&path, &arr).unwrap();
        assert_eq!(read_u8(&path, 3, 4).unwrap(), arr);
        assert!(read_u8(&path, 4, 4).is_err());
    }
}
