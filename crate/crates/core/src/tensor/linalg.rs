use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Logical `(rows, cols)` and strides of a stored matrix, optionally transposed.
fn view(rows: usize, cols: usize, trans: bool) -> (usize, usize, usize, usize) {
    if trans {
        (cols, rows, 1, cols)
    } else {
        (rows, cols, cols, 1)
    }
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product. Rank-2 `[M,K]·[K,N]`, or batched rank-3 `[B,M,K]·[B,K,N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ` on the last two axes.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(other, false, true)
    }

    /// `selfᵀ · other` on the last two axes.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(other, true, false)
    }

    pub(crate) fn matmul_ex(&self, other: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || Error::shape("matmul", sa, sb);
        let (batch, ar, ac, br, bc) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(err()),
        };
        let (m, k, rsa, csa) = view(ar, ac, ta);
        let (k2, n, rsb, csb) = view(br, bc, tb);
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (a, b) = (self.data(), other.data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a[i * ar * ac..(i + 1) * ar * ac],
                rsa,
                csa,
                &b[i * br * bc..(i + 1) * br * bc],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::from_op(out, shape, "matmul", &[self, other], move |g, _, inp| {
            let (a, b) = (&inp[0], &inp[1]);
            // C = A'·B' with A' = op(A), B' = op(B); dA' = dC·B'ᵀ and dB' = A'ᵀ·dC.
            let ga = if a.requires_grad() {
                Some(if ta {
                    b.matmul_ex(g, tb, true)?
                } else {
                    g.matmul_ex(b, false, !tb)?
                })
            } else {
                None
            };
            let gb = if b.requires_grad() {
                Some(if tb {
                    g.matmul_ex(a, true, ta)?
                } else {
                    a.matmul_ex(g, !ta, false)?
                })
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `x·W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }
}
