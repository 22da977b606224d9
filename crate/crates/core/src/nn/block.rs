use rand::Rng;

use super::attention::{multi_head_self_attention, AttentionMask, AttentionRoute};
use super::{join, LayerNorm, Linear, Module};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Parameters of one pre-LN transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> EncoderBlockParams<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        if mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(EncoderBlockParams {
            ln1: LayerNorm::new(dim)?,
            wq: Linear::new(rng, dim, dim)?,
            wk: Linear::new(rng, dim, dim)?,
            wv: Linear::new(rng, dim, dim)?,
            wo: Linear::new(rng, dim, dim)?,
            ln2: LayerNorm::new(dim)?,
            fc1: Linear::new(rng, dim, dim * mlp_ratio)?,
            fc2: Linear::new(rng, dim * mlp_ratio, dim)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.input_dim()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.fc1.output_dim()
    }

    /// Trainable scalars in one block of width `dim` with MLP ratio `r`.
    pub fn count(dim: usize, r: usize) -> usize {
        let ln = 2 * dim;
        let proj = dim * dim + dim;
        let mlp = dim * r * dim + r * dim + r * dim * dim + dim;
        2 * ln + 4 * proj + mlp
    }
}

impl<T: Scalar> Module<T> for EncoderBlockParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `y = x + MHSA(LN(x))`, then `y + MLP(LN(y))` with GELU inside the MLP.
///
/// `x` is `[N, C]` or `[B, N, C]`; the output has the same shape.
pub fn encoder_block<T: Scalar>(
    x: &Tensor<T>,
    params: &EncoderBlockParams<T>,
    mask: Option<&AttentionMask>,
    route: AttentionRoute,
) -> Result<Tensor<T>> {
    let attn = multi_head_self_attention(&params.ln1.forward(x)?, params, mask, route)?;
    let y = x.add(&attn)?;
    let c = params.dim();
    let rows = y.numel() / c;
    let h = params.ln2.forward(&y)?.reshape(&[rows, c])?;
    let mlp = params.fc2.forward(&params.fc1.forward(&h)?.gelu())?;
    y.add(&mlp.reshape(y.shape())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::Window;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = EncoderBlockParams::<f32>::new(&mut rng, 16, 4, 4).unwrap();
        p.wo.weight = Tensor::zeros(&[16, 16]);
        p.fc2.weight = Tensor::zeros(&[64, 16]);
        let x = trunc_input(&mut rng, &[9, 16]);
        let y = encoder_block(&x, &p, None, AttentionRoute::Composed).unwrap();
        assert_eq!(x.data(), y.data());
    }

    fn trunc_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        crate::nn::trunc_normal(rng, shape, 1.0).unwrap().detach()
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderBlockParams::<f32>::new(&mut rng, 384, 4, 4).unwrap();
        let x = trunc_input(&mut rng, &[64, 384]);
        let y = encoder_block(&x, &p, None, AttentionRoute::Composed).unwrap();
        assert_eq!(y.shape(), &[64, 384]);
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderBlockParams::<f32>::new(&mut rng, 24, 4, 4).unwrap();
        assert_eq!(p.parameter_count(), EncoderBlockParams::<f32>::count(24, 4));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = EncoderBlockParams::<f64>::new(&mut rng, 8, 2, 4).unwrap();
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                *t = t.mul_scalar(15.0).detach();
            }
        });
        let x: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let w: Vec<f64> = (0..32).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
        let w = Tensor::from_vec(w, &[4, 8]).unwrap();
        let mask = AttentionMask::new(Window::Bounded(1), 2).unwrap();
        for m in [None, Some(&mask)] {
            let r = gradcheck::check(&x, &[4, 8], 1e-5, 1e-3, 1e-8, |t| {
                Ok(encoder_block(t, &p, m, AttentionRoute::Composed)?.mul(&w)?.sum())
            })
            .unwrap();
            assert!(r <= 1.0, "{r}");
        }
    }
}
