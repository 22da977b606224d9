use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Token sequence `[B, N, C]` with a square `side × side` grid interpretation.
#[derive(Clone, Debug)]
pub struct TokenGrid<T: Scalar> {
    pub tokens: Tensor<T>,
    pub side: usize,
    pub stage: usize,
}

impl<T: Scalar> TokenGrid<T> {
    /// Wraps `[B, N, C]` (or `[N, C]`, promoted to `B = 1`) tokens.
    pub fn new(tokens: Tensor<T>, stage: usize) -> Result<Self> {
        let tokens = match tokens.shape() {
            [n, c] => tokens.reshape(&[1, *n, *c])?,
            [_, _, _] => tokens,
            s => return Err(Error::invalid("TokenGrid", format!("expected [B, N, C], got {s:?}"))),
        };
        let n = tokens.shape()[1];
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::invalid("TokenGrid", format!("{n} tokens do not form a square grid")));
        }
        if tokens.shape()[2] == 0 {
            return Err(Error::invalid("TokenGrid", "embedding dim must be positive"));
        }
        Ok(TokenGrid { tokens, side, stage })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Source offsets for one pixel-shuffled `[side², C]` grid: output position
/// `(y, x, c)` reads input `(y/2, x/2, 4c + 2·(y%2) + x%2)`.
pub fn pixelshuffle_index(side: usize, dim: usize) -> Result<Vec<usize>> {
    if !dim.is_multiple_of(4) || dim == 0 {
        return Err(Error::invalid("pixelshuffle", format!("channel count {dim} not divisible by 4")));
    }
    let out_side = 2 * side;
    let out_dim = dim / 4;
    let mut index = Vec::with_capacity(out_side * out_side * out_dim);
    for y in 0..out_side {
        for x in 0..out_side {
            let src = ((y / 2) * side + x / 2) * dim;
            let sub = 2 * (y % 2) + x % 2;
            for c in 0..out_dim {
                index.push(src + 4 * c + sub);
            }
        }
    }
    Ok(index)
}

/// `(side², C) -> ((2·side)², C/4)` per batch element.
pub fn pixelshuffle_upsample<T: Scalar>(grid: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    let (b, n, c) = (grid.batch(), grid.len(), grid.dim());
    let one = pixelshuffle_index(grid.side, c)?;
    let per = n * c;
    let mut index = Vec::with_capacity(b * per);
    for i in 0..b {
        index.extend(one.iter().map(|&j| j + i * per));
    }
    let tokens = grid.tokens.gather(Rc::new(index), &[b, 4 * n, c / 4])?;
    Ok(TokenGrid { tokens, side: 2 * grid.side, stage: grid.stage + 1 })
}

/// Adds a learnable `[N, C]` table to every element of a `[N, C]` or `[B, N, C]` input.
pub fn positional_embedding_add<T: Scalar>(x: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape() {
        s if s == table.shape() => x.add(table),
        [b, n, c] if table.shape() == [*n, *c] => {
            x.add(&table.reshape(&[1, *n, *c])?.broadcast_to(&[*b, *n, *c])?)
        }
        _ => Err(Error::shape("positional_embedding_add", x.shape(), table.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unshuffle(out: &[f64], side: usize, dim: usize) -> Vec<f64> {
        let mut back = vec![f64::NAN; out.len()];
        for (o, &src) in pixelshuffle_index(side, dim).unwrap().iter().enumerate() {
            back[src] = out[o];
        }
        back
    }

    #[test]
    fn unit_grid_spreads_channels() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let g = pixelshuffle_upsample(&TokenGrid::new(t, 0).unwrap()).unwrap();
        assert_eq!(g.side, 2);
        assert_eq!(g.tokens.shape(), &[1, 4, 1]);
        assert_eq!(g.tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn xl_stage_transition() {
        let t = Tensor::<f32>::zeros(&[64, 1024]);
        let g = pixelshuffle_upsample(&TokenGrid::new(t, 0).unwrap()).unwrap();
        assert_eq!(g.tokens.shape(), &[1, 256, 256]);
        assert_eq!(g.side, 16);
    }

    #[test]
    fn inverse_recovers_input() {
        let data: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = Tensor::from_vec(data.clone(), &[16, 8]).unwrap();
        let g = pixelshuffle_upsample(&TokenGrid::new(t, 0).unwrap()).unwrap();
        assert_eq!(unshuffle(g.tokens.data(), 4, 8), data);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(pixelshuffle_index(2, 6).is_err());
        assert!(TokenGrid::new(Tensor::<f32>::zeros(&[5, 4]), 0).is_err());
    }

    #[test]
    fn positional_table() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let zero = Tensor::<f64>::param(vec![0.0; 4], &[2, 2]).unwrap();
        assert_eq!(positional_embedding_add(&x, &zero).unwrap().data(), x.data());
        let b = Tensor::<f64>::from_vec(vec![1.0; 12], &[3, 2, 2]).unwrap();
        positional_embedding_add(&b, &zero).unwrap().sum().backward(false).unwrap();
        assert_eq!(zero.grad().unwrap().data(), &[3.0; 4]);
        let mismatch = Tensor::<f64>::zeros(&[3, 2]);
        assert!(positional_embedding_add(&x, &mismatch).is_err());
    }
}
