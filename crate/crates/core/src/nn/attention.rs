use std::fmt;
use std::rc::Rc;

use super::block::EncoderBlockParams;
use crate::error::{Error, Result};
use crate::tensor::{NeighborTable, Scalar, Tensor};

/// Attention window size in tokens; `Unbounded` means fully global attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Window {
    Bounded(usize),
    Unbounded,
}

impl Window {
    /// True when this window admits every pair on a `side × side` grid.
    pub fn covers(self, side: usize) -> bool {
        match self {
            Window::Unbounded => true,
            Window::Bounded(w) => w >= side,
        }
    }

    pub fn as_option(self) -> Option<usize> {
        match self {
            Window::Bounded(w) => Some(w),
            Window::Unbounded => None,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Bounded(w) => write!(f, "{w}"),
            Window::Unbounded => f.write_str("full"),
        }
    }
}

/// Local attention mask on a square token grid.
///
/// `allowed(i, j)` holds when the Chebyshev distance between the grid
/// positions of tokens `i` and `j` is below the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub window: Window,
    pub side: usize,
}

impl AttentionMask {
    pub fn new(window: Window, side: usize) -> Result<Self> {
        if side == 0 || window == Window::Bounded(0) {
            return Err(Error::InvalidConfig(format!(
                "attention mask needs positive side and window, got side {side}, window {window}"
            )));
        }
        Ok(AttentionMask { window, side })
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn is_global(&self) -> bool {
        self.window.covers(self.side)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self.window {
            Window::Unbounded => true,
            Window::Bounded(w) => {
                let (ri, ci) = (i / self.side, i % self.side);
                let (rj, cj) = (j / self.side, j % self.side);
                ri.abs_diff(rj).max(ci.abs_diff(cj)) < w
            }
        }
    }

    pub fn neighbor_table(&self) -> NeighborTable {
        NeighborTable::grid(self.side, self.window.as_option())
    }

    /// Additive logit bias: 0 where allowed, `-inf` where masked.
    pub fn bias<T: Scalar>(&self) -> Tensor<T> {
        let n = self.tokens();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if self.allowed(i, j) { T::zero() } else { T::neg_infinity() });
            }
        }
        Tensor::from_vec(data, &[n, n]).expect("n*n entries")
    }
}

/// How attention probabilities are computed.
///
/// `Composed` builds scores, softmax and the weighted sum from differentiable
/// primitives and supports gradients of any order. `Fused` runs a single
/// kernel over the allowed neighbors only; it is much cheaper on large masked
/// grids but supports first-order gradients only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionRoute {
    #[default]
    Composed,
    Fused,
}

/// `[B·N, C] -> [B·heads, N, C/heads]`
fn split_heads<T: Scalar>(x: &Tensor<T>, b: usize, n: usize, heads: usize) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let dh = c / heads;
    if heads == 1 {
        return x.reshape(&[b, n, c]);
    }
    x.reshape(&[b, n, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, dh])
}

/// `[B·heads, N, dh] -> [B·N, C]`
fn merge_heads<T: Scalar>(x: &Tensor<T>, b: usize, n: usize, heads: usize) -> Result<Tensor<T>> {
    let dh = x.shape()[2];
    if heads == 1 {
        return x.reshape(&[b * n, dh]);
    }
    x.reshape(&[b, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * n, heads * dh])
}

/// Multi-head self-attention over `[B, N, C]` (or `[N, C]`) tokens.
///
/// Per head: `softmax(Q·Kᵀ/√(C/heads) + bias)·V`, heads concatenated and
/// passed through the output projection. A mask whose window covers the whole
/// grid is the same as no mask.
pub fn multi_head_self_attention<T: Scalar>(
    x: &Tensor<T>,
    params: &EncoderBlockParams<T>,
    mask: Option<&AttentionMask>,
    route: AttentionRoute,
) -> Result<Tensor<T>> {
    let (b, n, c) = match x.shape() {
        [n, c] => (1, *n, *c),
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::invalid("multi_head_self_attention", format!("input shape {s:?}"))),
    };
    let heads = params.heads;
    if c != params.dim() {
        return Err(Error::shape("multi_head_self_attention", x.shape(), params.wq.weight.shape()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidConfig(format!("embedding dim {c} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.tokens() != n {
            return Err(Error::invalid(
                "multi_head_self_attention",
                format!("mask grid {}×{} does not match {n} tokens", m.side, m.side),
            ));
        }
    }
    let mask = mask.filter(|m| !m.is_global());

    let flat = x.reshape(&[b * n, c])?;
    let (q, k, v) = (params.wq.forward(&flat)?, params.wk.forward(&flat)?, params.wv.forward(&flat)?);
    let attended = match route {
        AttentionRoute::Fused => {
            let table = match mask {
                Some(m) => m.neighbor_table(),
                None => NeighborTable::full(n),
            };
            let [q, k, v] = [q, k, v].map(|t| split_heads(&t, b, n, heads));
            merge_heads(&Tensor::local_attention(&q?, &k?, &v?, Rc::new(table))?, b, n, heads)?
        }
        AttentionRoute::Composed => {
            let q = split_heads(&q, b, n, heads)?;
            let k = split_heads(&k, b, n, heads)?;
            let v = split_heads(&v, b, n, heads)?;
            let scale = 1.0 / ((c / heads) as f64).sqrt();
            let mut scores = q.matmul_nt(&k)?.mul_scalar(scale);
            if let Some(m) = mask {
                let bias = m.bias::<T>().reshape(&[1, n, n])?.broadcast_to(&[b * heads, n, n])?;
                scores = scores.add(&bias)?;
            }
            merge_heads(&scores.softmax()?.matmul(&v)?, b, n, heads)?
        }
    };
    params.wo.forward(&attended)?.reshape(x.shape())
}

/// Attention probabilities of the composed route, `[B·heads, N, N]`. Used for
/// inspecting the convex-combination property.
pub fn attention_weights<T: Scalar>(
    x: &Tensor<T>,
    params: &EncoderBlockParams<T>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<T>> {
    let (b, n, c) = match x.shape() {
        [n, c] => (1, *n, *c),
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::invalid("attention_weights", format!("input shape {s:?}"))),
    };
    let heads = params.heads;
    let flat = x.reshape(&[b * n, c])?;
    let q = split_heads(&params.wq.forward(&flat)?, b, n, heads)?;
    let k = split_heads(&params.wk.forward(&flat)?, b, n, heads)?;
    let mut scores = q.matmul_nt(&k)?.mul_scalar(1.0 / ((c / heads) as f64).sqrt());
    if let Some(m) = mask.filter(|m| !m.is_global()) {
        scores = scores.add(&m.bias::<T>().reshape(&[1, n, n])?.broadcast_to(&[b * heads, n, n])?)?;
    }
    scores.softmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, heads: usize, seed: u64) -> EncoderBlockParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderBlockParams::new(&mut rng, c, heads, 4).unwrap();
        // larger weights so attention is far from uniform
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                *t = t.mul_scalar(20.0).detach().with_requires_grad(true);
            }
        });
        p
    }

    fn tokens(b: usize, n: usize, c: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, &[b, n, c]).unwrap()
    }

    /// `W_out·(W_v·x + b_v) + b_out` for a single token.
    fn single_token_oracle(x: &[f64], p: &EncoderBlockParams<f64>) -> Vec<f64> {
        let c = x.len();
        let affine = |w: &Tensor<f64>, b: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|o| b.data()[o] + (0..c).map(|i| v[i] * w.data()[i * c + o]).sum::<f64>())
                .collect()
        };
        let val = affine(&p.wv.weight, &p.wv.bias, x);
        affine(&p.wo.weight, &p.wo.bias, &val)
    }

    #[test]
    fn single_token_ignores_query_and_key() {
        let p = block(8, 4, 1);
        let x = tokens(1, 1, 8, 2);
        for route in [AttentionRoute::Composed, AttentionRoute::Fused] {
            let y = multi_head_self_attention(&x, &p, None, route).unwrap();
            let want = single_token_oracle(x.data(), &p);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_window_matches_unmasked_bitwise() {
        let p = block(8, 4, 3);
        let x = tokens(2, 16, 8, 4);
        let mask = AttentionMask::new(Window::Bounded(4), 4).unwrap();
        for route in [AttentionRoute::Composed, AttentionRoute::Fused] {
            let a = multi_head_self_attention(&x, &p, None, route).unwrap();
            let b = multi_head_self_attention(&x, &p, Some(&mask), route).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn unit_window_reduces_to_per_token_formula() {
        let p = block(8, 2, 5);
        let x = tokens(1, 9, 8, 6);
        let mask = AttentionMask::new(Window::Bounded(1), 3).unwrap();
        for route in [AttentionRoute::Composed, AttentionRoute::Fused] {
            let y = multi_head_self_attention(&x, &p, Some(&mask), route).unwrap();
            for t in 0..9 {
                let want = single_token_oracle(&x.data()[t * 8..(t + 1) * 8], &p);
                for (a, b) in y.data()[t * 8..(t + 1) * 8].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn routes_agree_under_masks() {
        let p = block(8, 4, 7);
        let x = tokens(2, 36, 8, 8);
        for w in [1, 2, 3, 5, 6] {
            let mask = AttentionMask::new(Window::Bounded(w), 6).unwrap();
            let a = multi_head_self_attention(&x, &p, Some(&mask), AttentionRoute::Composed).unwrap();
            let b = multi_head_self_attention(&x, &p, Some(&mask), AttentionRoute::Fused).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12, "window {w}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn attention_rows_are_convex() {
        let p = block(8, 4, 9);
        let x = tokens(1, 16, 8, 10);
        let mask = AttentionMask::new(Window::Bounded(2), 4).unwrap();
        let w = attention_weights(&x, &p, Some(&mask)).unwrap();
        for row in w.data().chunks(16) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_divisibility_and_mask_size_are_checked() {
        let p = block(8, 4, 11);
        let x = tokens(1, 4, 8, 12);
        let mask = AttentionMask::new(Window::Bounded(2), 3).unwrap();
        assert!(multi_head_self_attention(&x, &p, Some(&mask), AttentionRoute::Composed).is_err());
        let mut bad = p.clone();
        bad.heads = 3;
        assert!(multi_head_self_attention(&x, &bad, None, AttentionRoute::Composed).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let p = block(8, 4, 13);
        let x = tokens(1, 5, 8, 14);
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(&x.data()[i * 8..(i + 1) * 8]);
        }
        let px = Tensor::from_vec(px, &[1, 5, 8]).unwrap();
        let y = multi_head_self_attention(&x, &p, None, AttentionRoute::Composed).unwrap();
        let py = multi_head_self_attention(&px, &p, None, AttentionRoute::Composed).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((py.data()[k * 8 + c] - y.data()[i * 8 + c]).abs() < 1e-12);
            }
        }
    }
}
