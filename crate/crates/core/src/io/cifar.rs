//! CIFAR-10 binary records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes,
//! each plane row-major 32×32.

use std::fs;
use std::path::Path;

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Decodes records from raw bytes into HWC images in `[-1, 1]` plus labels.
pub fn decode_cifar10(bytes: &[u8]) -> Result<(ImageBatch, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(Error::Dataset("empty CIFAR-10 file".into()));
    }
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Dataset(format!(
            "truncated CIFAR-10 record: length {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PLANE * 3);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0]);
        let px = &rec[1..];
        for p in 0..PLANE {
            for c in 0..3 {
                // f64 then one rounding, so each value is the nearest f32
                data.push((px[c * PLANE + p] as f64 / 127.5 - 1.0) as f32);
            }
        }
    }
    Ok((ImageBatch::new(Tensor::from_vec(data, &[n, SIDE, SIDE, 3])?)?, labels))
}

pub fn read_cifar10_binary(path: &Path) -> Result<(ImageBatch, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    decode_cifar10(&bytes).map_err(|e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// A single `.bin` file, or every `data_batch_*.bin` in a directory (sorted by name).
pub fn read_cifar10_dir(path: &Path) -> Result<ImageBatch> {
    if path.is_file() {
        return Ok(read_cifar10_binary(path)?.0);
    }
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no data_batch_*.bin files in {}", path.display())));
    }
    let parts = files.iter().map(|f| Ok(read_cifar10_binary(f)?.0)).collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_fixture() {
        let mut bytes = vec![0u8; 2 * RECORD];
        // record 0: label 3, pixel (0,0) = (255, 0, 127), pixel (1,2) red = 51
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[1 + PLANE] = 0;
        bytes[1 + 2 * PLANE] = 127;
        bytes[1 + 32 + 2] = 51;
        // record 1: label 9, last pixel blue = 200
        bytes[RECORD] = 9;
        bytes[RECORD + 1 + 2 * PLANE + PLANE - 1] = 200;
        let (batch, labels) = decode_cifar10(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(batch.len(), 2);
        let real = |b: u8| (b as f64 / 127.5 - 1.0) as f32;
        let img0 = batch.image(0);
        assert_eq!(&img0[..3], &[1.0, -1.0, real(127)]);
        assert_eq!(img0[(32 + 2) * 3], real(51));
        assert_eq!(img0[3], -1.0);
        let img1 = batch.image(1);
        assert_eq!(img1[(PLANE - 1) * 3 + 2], real(200));
    }

    #[test]
    fn record_count_and_truncation() {
        assert_eq!(decode_cifar10(&vec![0; RECORD]).unwrap().0.len(), 1);
        assert!(matches!(decode_cifar10(&vec![0; RECORD - 1]), Err(Error::Dataset(m)) if m.contains("truncated")));
        assert!(decode_cifar10(&[]).is_err());
    }
}
