//! Procedural stand-in datasets: gradient-filled rectangles and ellipses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SynthKind {
    Rectangles,
    Ellipses,
    /// Each image picks one of the two shapes.
    #[default]
    Mixed,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rectangles" | "rect" => Some(SynthKind::Rectangles),
            "ellipses" | "ellipse" => Some(SynthKind::Ellipses),
            "mixed" => Some(SynthKind::Mixed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Rectangles => "rectangles",
            SynthKind::Ellipses => "ellipses",
            SynthKind::Mixed => "mixed",
        }
    }
}

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// `n` images of `resolution²` pixels: a vertical-gradient background and one
/// horizontally gradient-filled shape. Deterministic per seed.
pub fn synth_dataset(kind: SynthKind, n: usize, resolution: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 || resolution == 0 {
        return Err(Error::Dataset("synthetic dataset needs n >= 1 and resolution >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = resolution as f32;
    let mut data = Vec::with_capacity(n * resolution * resolution * 3);
    for _ in 0..n {
        let (bg0, bg1, fg0, fg1) = (color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng));
        let ellipse = match kind {
            SynthKind::Rectangles => false,
            SynthKind::Ellipses => true,
            SynthKind::Mixed => rng.random_bool(0.5),
        };
        let cy = rng.random_range(0.25..0.75) * r;
        let cx = rng.random_range(0.25..0.75) * r;
        let hy = rng.random_range(0.12..0.3) * r;
        let hx = rng.random_range(0.12..0.3) * r;
        for y in 0..resolution {
            let bg = lerp(bg0, bg1, y as f32 / (r - 1.0).max(1.0));
            for x in 0..resolution {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let (dy, dx) = ((py - cy) / hy, (px - cx) / hx);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                let c = if inside { lerp(fg0, fg1, ((dx + 1.0) * 0.5).clamp(0.0, 1.0)) } else { bg };
                data.extend(c.iter().map(|v| v.clamp(-1.0, 1.0)));
            }
        }
    }
    ImageBatch::new(Tensor::from_vec(data, &[n, resolution, resolution, 3])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(SynthKind::Mixed, 8, 16, 5).unwrap();
        let b = synth_dataset(SynthKind::Mixed, 8, 16, 5).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert!(a.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = synth_dataset(SynthKind::Mixed, 8, 16, 6).unwrap();
        assert_ne!(a.tensor().data(), c.tensor().data());
    }
}
