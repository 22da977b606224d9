//! External formats: datasets, image export, checkpoints and run configuration.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod ppm;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{CheckpointTensor, CHECKPOINT_VERSION};
pub use cifar::{read_cifar10_binary, read_cifar10_dir};
pub use config::{parse_run_config, DataSource, RunConfig};
pub use ppm::{ppm_grid_bytes, read_ppm, read_ppm_dir, write_ppm_grid};
pub use synth::{synth_dataset, SynthKind};

const RANGE_SLACK: f32 = 1e-6;

/// Images `[B, H, W, 3]` with values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    images: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>) -> Result<Self> {
        match images.shape() {
            [_, h, w, 3] if h == w => {}
            s => return Err(Error::Dataset(format!("image batch must be [B, H, H, 3], got {s:?}"))),
        }
        if let Some(v) = images.data().iter().find(|v| v.is_nan() || v.abs() > 1.0 + RANGE_SLACK) {
            return Err(Error::Dataset(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(ImageBatch { images: images.detach() })
    }

    /// Clamps into `[-1, 1]` instead of rejecting.
    pub fn clamped(images: &Tensor<f32>) -> Result<Self> {
        let data = images.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Self::new(Tensor::from_vec(data, images.shape())?)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.resolution() * self.resolution() * 3;
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let per = self.resolution() * self.resolution() * 3;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("image index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        let r = self.resolution();
        Tensor::from_vec(data, &[indices.len(), r, r, 3])
    }

    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let refs: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.images).collect();
        Self::new(Tensor::concat(&refs, 0)?)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`, so a
/// failure never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("not a file path: {}", path.display()))))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
