//! Binary P6 PPM export and import.

use std::fs;
use std::path::Path;

use super::{write_atomic, ImageBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GUTTER: usize = 2;

/// `round((v + 1)·127.5)` (half away from zero), clamped to `[0, 255]`.
pub fn pixel_byte(v: f32) -> u8 {
    let x = ((v as f64 + 1.0) * 127.5).round();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

/// Canvas `(width, height)` for `count` tiles of `side` pixels in `cols` columns.
pub fn grid_canvas(count: usize, side: usize, cols: usize) -> (usize, usize) {
    let cols = cols.min(count).max(1);
    let rows = count.div_ceil(cols);
    (cols * side + (cols - 1) * GUTTER, rows * side + rows.saturating_sub(1) * GUTTER)
}

/// Tiles images row-major with black gutters and encodes them as P6.
pub fn ppm_grid_bytes(images: &ImageBatch, cols: usize) -> Result<Vec<u8>> {
    if cols == 0 {
        return Err(Error::invalid("write_ppm_grid", "cols must be at least 1"));
    }
    let side = images.resolution();
    let (w, h) = grid_canvas(images.len(), side, cols);
    let cols = cols.min(images.len()).max(1);
    let mut canvas = vec![0u8; w * h * 3];
    for i in 0..images.len() {
        let (gr, gc) = (i / cols, i % cols);
        let (y0, x0) = (gr * (side + GUTTER), gc * (side + GUTTER));
        let img = images.image(i);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    canvas[((y0 + y) * w + x0 + x) * 3 + c] = pixel_byte(img[(y * side + x) * 3 + c]);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&canvas);
    Ok(out)
}

pub fn write_ppm_grid(images: &ImageBatch, cols: usize, path: &Path) -> Result<()> {
    write_atomic(path, &ppm_grid_bytes(images, cols)?)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Dataset("bad PPM header".into()))
}

/// Decodes a P6 image with maxval 255 to `[H, W, 3]` values in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::Dataset("not a binary P6 PPM".into()));
    }
    let mut num = || -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Dataset("bad PPM header number".into()))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::Dataset(format!("unsupported PPM maxval {max}")));
    }
    pos += 1;
    let need = w * h * 3;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| Error::Dataset("truncated PPM payload".into()))?;
    let data = payload.iter().map(|&b| (b as f64 / 127.5 - 1.0) as f32).collect();
    Tensor::from_vec(data, &[h, w, 3])
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Every `*.ppm` in a directory (sorted by name); all must be square and equally sized.
pub fn read_ppm_dir(path: &Path) -> Result<ImageBatch> {
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .ppm images in {}", path.display())));
    }
    let images = files.iter().map(|f| read_ppm(f)).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape().to_vec();
    if shape[0] != shape[1] || images.iter().any(|i| i.shape() != shape.as_slice()) {
        return Err(Error::Dataset("directory images must be square and share one size".into()));
    }
    let stacked: Vec<Tensor<f32>> = images.iter().map(|i| i.reshape(&[1, shape[0], shape[1], 3])).collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = stacked.iter().collect();
    ImageBatch::new(Tensor::concat(&refs, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: Vec<f32>, b: usize, side: usize) -> ImageBatch {
        ImageBatch::new(Tensor::from_vec(values, &[b, side, side, 3]).unwrap()).unwrap()
    }

    #[test]
    fn endpoint_mapping() {
        assert_eq!(pixel_byte(1.0), 255);
        assert_eq!(pixel_byte(-1.0), 0);
        assert_eq!(pixel_byte(0.0), 128);
        assert_eq!(pixel_byte(2.0), 255);
    }

    #[test]
    fn single_image_layout() {
        let bytes = ppm_grid_bytes(&batch(vec![1.0; 12], 1, 2), 1).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn tiling_with_gutters() {
        let bytes = ppm_grid_bytes(&batch(vec![1.0; 4 * 64 * 3], 4, 8), 2).unwrap();
        assert!(bytes.starts_with(b"P6\n18 18\n255\n"));
        let px = &bytes[b"P6\n18 18\n255\n".len()..];
        // gutter column 8 is black, tile pixel at column 10 is white
        assert_eq!(px[8 * 3], 0);
        assert_eq!(px[10 * 3], 255);
        assert_eq!(grid_canvas(25, 32, 5), (5 * 32 + 8, 5 * 32 + 8));
    }

    #[test]
    fn decode_round_trip() {
        let values: Vec<f32> = (0..48).map(|i| (i as f64 / 127.5 - 1.0) as f32).collect();
        let bytes = ppm_grid_bytes(&batch(values.clone(), 1, 4), 1).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap().data(), values.as_slice());
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    }
}
