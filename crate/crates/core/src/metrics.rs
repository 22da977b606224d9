//! Proxy Fréchet distance on seeded random projections, and an analytic
//! multiply-accumulate counter.
//!
//! The projection features are not Inception features. Distances computed
//! here only track progress within this crate and are not comparable with
//! published FID numbers.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::io::ImageBatch;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
const SYMMETRY_TOL: f64 = 1e-9;
const EIGEN_CLAMP: f64 = 1e-10;

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMoments {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureMoments {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::invalid("FeatureMoments", format!("covariance has {} entries for d = {d}", covariance.len())));
        }
        if count < 2 {
            return Err(Error::invalid("FeatureMoments", "need at least 2 samples"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[i * d + j], covariance[j * d + i]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid("FeatureMoments", format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(FeatureMoments { mean, covariance, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Moments of `n` row-major feature vectors of length `d`.
    pub fn from_features(features: &[f64], n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("extract_moments", format!("need at least 2 samples, got {n}")));
        }
        if features.len() != n * d {
            return Err(Error::invalid("extract_moments", "feature buffer does not match n × d"));
        }
        let mut mean = vec![0.0; d];
        for row in features.chunks_exact(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> =
            features.chunks_exact(d).flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m)).collect();
        let c = DMatrix::from_row_slice(n, d, &centered);
        let cov = (c.transpose() * &c) / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        let covariance = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
        Self::new(mean, covariance, n)
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Eigen-decomposition with eigenvalues below `1e-10·max` (and negatives) zeroed.
fn clamped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(m);
    let max = e.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    for v in e.eigenvalues.iter_mut() {
        if *v < EIGEN_CLAMP * max || *v < 0.0 {
            *v = 0.0;
        }
    }
    e
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = clamped_eigen(m);
    let s = e.eigenvalues.map(f64::sqrt);
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`, clamped at zero.
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("frechet_distance", format!("dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clamped_eigen(inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Fixed Gaussian map from flattened pixels to `d` features, entries
/// `N(0, 1/in_dim)`.
#[derive(Clone, Debug)]
pub struct Projector {
    weights: Tensor<f64>,
}

impl Projector {
    pub fn new(seed: u64, in_dim: usize, d: usize) -> Result<Self> {
        if in_dim == 0 || d == 0 {
            return Err(Error::invalid("Projector", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * d).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        Ok(Projector { weights: Tensor::from_vec(w.collect(), &[in_dim, d])? })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[n, in_dim]` rows to `[n, d]` features.
    pub fn project(&self, rows: &[f64], n: usize) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(rows.to_vec(), &[n, self.in_dim()])?;
        Ok(x.matmul(&self.weights)?.to_vec())
    }

    pub fn moments(&self, images: &ImageBatch) -> Result<FeatureMoments> {
        let n = images.len();
        if n < 2 {
            return Err(Error::invalid("extract_moments", format!("need at least 2 images, got {n}")));
        }
        let per = images.resolution() * images.resolution() * 3;
        if per != self.in_dim() {
            return Err(Error::invalid("extract_moments", format!("{per} pixels per image, projector expects {}", self.in_dim())));
        }
        let rows: Vec<f64> = images.tensor().data().iter().map(|&v| v as f64).collect();
        FeatureMoments::from_features(&self.project(&rows, n)?, n, self.dim())
    }
}

/// Flattens every image, projects it with the seeded Gaussian map and
/// returns the feature moments.
pub fn extract_moments(images: &ImageBatch, projector_seed: u64, d: usize) -> Result<FeatureMoments> {
    let per = images.resolution() * images.resolution() * 3;
    Projector::new(projector_seed, per, d)?.moments(images)
}

/// MAC totals by kind of computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub attention_projections: u64,
    pub attention_scores: u64,
    pub mlp: u64,
    pub embedding_head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.attention_projections + self.attention_scores + self.mlp + self.embedding_head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacKind {
    AttentionProjections,
    AttentionScores,
    Mlp,
    EmbeddingHead,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub label: String,
    pub kind: MacKind,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub model: String,
    pub layers: Vec<LayerMacs>,
}

impl FlopsReport {
    fn push(&mut self, label: String, kind: MacKind, macs: u64) {
        self.layers.push(LayerMacs { label, kind, macs });
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn breakdown(&self) -> MacBreakdown {
        let mut b = MacBreakdown::default();
        for l in &self.layers {
            *match l.kind {
                MacKind::AttentionProjections => &mut b.attention_projections,
                MacKind::AttentionScores => &mut b.attention_scores,
                MacKind::Mlp => &mut b.mlp,
                MacKind::EmbeddingHead => &mut b.embedding_head,
            } += l.macs;
        }
        b
    }

    /// Sum over layers whose label starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> u64 {
        self.layers.iter().filter(|l| l.label.starts_with(prefix)).map(|l| l.macs).sum()
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let width = self.layers.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{}\n{:<width$}  {:>16}\n", self.model, "layer", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<width$}  {:>16}", l.label, l.macs);
        }
        let b = self.breakdown();
        for (name, v) in [
            ("attention_projections", b.attention_projections),
            ("attention_scores", b.attention_scores),
            ("mlp", b.mlp),
            ("embedding_head", b.embedding_head),
            ("total", self.total()),
        ] {
            let _ = writeln!(s, "{name:<width$}  {v:>16}");
        }
        let _ = writeln!(s, "{:<width$}  {:>16.3}", "GMACs", self.total() as f64 / 1e9);
        s
    }

    /// One `key=value` line per layer and per breakdown entry.
    pub fn key_values(&self) -> String {
        let mut s = format!("model={}\n", self.model);
        for l in &self.layers {
            let _ = writeln!(s, "{}={}", l.label, l.macs);
        }
        let b = self.breakdown();
        let _ = writeln!(s, "attention_projections={}", b.attention_projections);
        let _ = writeln!(s, "attention_scores={}", b.attention_scores);
        let _ = writeln!(s, "mlp={}", b.mlp);
        let _ = writeln!(s, "embedding_head={}", b.embedding_head);
        let _ = writeln!(s, "total={}", self.total());
        s
    }
}

/// One encoder block at `n` tokens of width `c`: projections `4nc²`,
/// scores and weighted sum `2n²c`, MLP `2nc·rc`.
pub fn block_macs(n: usize, c: usize, mlp_ratio: usize) -> (u64, u64, u64) {
    let (n, c, r) = (n as u64, c as u64, mlp_ratio as u64);
    (4 * n * c * c, 2 * n * n * c, 2 * n * c * r * c)
}

fn push_block(report: &mut FlopsReport, prefix: &str, n: usize, c: usize, r: usize) {
    let (proj, scores, mlp) = block_macs(n, c, r);
    report.push(format!("{prefix}.attn_proj"), MacKind::AttentionProjections, proj);
    report.push(format!("{prefix}.attn_scores"), MacKind::AttentionScores, scores);
    report.push(format!("{prefix}.mlp"), MacKind::Mlp, mlp);
}

/// Anything `count_macs` can cost out.
pub trait MacCount {
    fn mac_report(&self) -> FlopsReport;
}

impl MacCount for GeneratorConfig {
    /// Noise MLP, every stage at its own `(N, C)` with global attention, and
    /// the RGB head. The super-resolution embedding is a training-only path
    /// and is left out.
    fn mac_report(&self) -> FlopsReport {
        let mut r = FlopsReport { model: "generator".into(), layers: Vec::new() };
        let (_, n0, c0) = self.stage_shape(0);
        r.push("input".into(), MacKind::EmbeddingHead, (self.latent_dim * n0 * c0) as u64);
        for (s, &depth) in self.depths.iter().enumerate() {
            let (_, n, c) = self.stage_shape(s);
            for b in 0..depth {
                push_block(&mut r, &format!("stage{s}.block{b}"), n, c, self.mlp_ratio);
            }
        }
        let res = self.target_resolution();
        r.push("head".into(), MacKind::EmbeddingHead, (res * res * self.output_dim() * 3) as u64);
        r
    }
}

impl MacCount for DiscriminatorConfig {
    fn mac_report(&self) -> FlopsReport {
        let mut r = FlopsReport { model: "discriminator".into(), layers: Vec::new() };
        let patches = self.patch_grid * self.patch_grid;
        let c = self.embed_dim;
        r.push("patch_embed".into(), MacKind::EmbeddingHead, (patches * self.patch_dim() * c) as u64);
        for b in 0..self.depth {
            push_block(&mut r, &format!("block{b}"), self.seq_len(), c, self.mlp_ratio);
        }
        r.push("head".into(), MacKind::EmbeddingHead, c as u64);
        r
    }
}

pub fn count_macs<C: MacCount>(config: &C) -> FlopsReport {
    config.mac_report()
}
