//! IDX file format (big-endian magic, dimension sizes, unsigned bytes),
//! the container MNIST and KMNIST ship in.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| parse_err(path, *offset, format!("truncated u32: {e}")))?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file as a [N, 1, H, W] tensor with pixels in [0, 1].
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut r, path, &mut offset)?;
    if magic != MAGIC_IMAGES {
        return Err(parse_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {MAGIC_IMAGES:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path, &mut offset)? as usize;
    let h = read_u32_be(&mut r, path, &mut offset)? as usize;
    let w = read_u32_be(&mut r, path, &mut offset)? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes).map_err(|e| {
        parse_err(
            path,
            offset,
            format!("truncated pixel payload ({} expected): {e}", n * h * w),
        )
    })?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(parse_err(
            path,
            offset + (n * h * w) as u64,
            "trailing bytes after pixel payload",
        ));
    }
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Load an IDX label file as a vector of class indices.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut r, path, &mut offset)?;
    if magic != MAGIC_LABELS {
        return Err(parse_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {MAGIC_LABELS:#010x}"),
        ));
    }
    let n = read_u32_be(&mut r, path, &mut offset)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|e| parse_err(path, offset, format!("truncated label payload: {e}")))?;
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Write a [N, 1, H, W] tensor whose values are exact multiples of 1/255
/// as an IDX image file. Round-trips through [`load_idx_images`] bit-exactly.
pub fn write_idx_images(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("write_idx_images", &[0, 1, 0, 0], s));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC_IMAGES.to_be_bytes())?;
    for d in [s[0], s[2], s[3]] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    for (i, &v) in images.data().iter().enumerate() {
        let scaled = v * 255.0;
        let byte = scaled.round();
        if (scaled - byte).abs() > 1e-9 || !(0.0..=255.0).contains(&byte) {
            return Err(Error::contract(format!(
                "pixel {i} value {v} is not an exact byte/255"
            )));
        }
        w.write_all(&[byte as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Write labels as an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC_LABELS.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    for (i, &l) in labels.iter().enumerate() {
        if l > 255 {
            return Err(Error::contract(format!("label {i} value {l} exceeds a byte")));
        }
        w.write_all(&[l as u8])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("hyperinv-idx-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn crafted_fixture_loads_exact_values() {
        let path = tmp("two_2x2.idx");
        let bytes: [u8; 8] = [0, 51, 102, 255, 10, 20, 30, 40];
        let mut file = Vec::new();
        file.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        for d in [2u32, 2, 2] {
            file.extend_from_slice(&d.to_be_bytes());
        }
        file.extend_from_slice(&bytes);
        std::fs::write(&path, &file).unwrap();

        let t = load_idx_images(&path).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        for (v, b) in t.data().iter().zip(bytes.iter()) {
            assert_eq!(*v, *b as f64 / 255.0);
        }
    }

    #[test]
    fn label_fixture_round_trips() {
        let path = tmp("labels.idx");
        let labels: Vec<usize> = (0..10).collect();
        write_idx_labels(&path, &labels).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), labels);
    }

    #[test]
    fn image_magic_on_label_path_is_parse_error() {
        let path = tmp("mismatched.idx");
        let labels: Vec<usize> = vec![1, 2, 3];
        write_idx_labels(&path, &labels).unwrap();
        let err = load_idx_images(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_payload_names_offset() {
        let path = tmp("truncated.idx");
        let mut file = Vec::new();
        file.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        for d in [2u32, 2, 2] {
            file.extend_from_slice(&d.to_be_bytes());
        }
        file.extend_from_slice(&[1, 2, 3]); // 8 expected
        std::fs::write(&path, &file).unwrap();
        let err = load_idx_images(&path).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let path = tmp("roundtrip.idx");
        let bytes: Vec<u8> = (0..=255).cycle().take(3 * 4 * 4).collect();
        let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        let t = Tensor::new(vec![3, 1, 4, 4], data).unwrap();
        write_idx_images(&path, &t).unwrap();
        let back = load_idx_images(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}
