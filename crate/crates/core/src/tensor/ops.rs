use std::rc::Rc;

use super::{numel_of, Scalar, Tensor, GATHER_ZERO};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if numel_of(b) == 1 {
        Ok(Broadcast::RhsScalar)
    } else if numel_of(a) == 1 {
        Ok(Broadcast::LhsScalar)
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums `g` down to `shape` when the forward pass broadcast a single-element operand.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        g.sum().reshape(shape)
    }
}

fn unary_data<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let kind = broadcast_kind(op, self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        Ok(match kind {
            Broadcast::Same => (
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
                self.shape().to_vec(),
            ),
            Broadcast::RhsScalar => {
                let y = b[0];
                (a.iter().map(|&x| f(x, y)).collect(), self.shape().to_vec())
            }
            Broadcast::LhsScalar => {
                let x = a[0];
                (b.iter().map(|&y| f(x, y)).collect(), other.shape().to_vec())
            }
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary(other, "add", |x, y| x + y)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(data, shape, "add", &[self, other], move |g, _, _| {
            Ok(vec![Some(reduce_to(g, &sa)?), Some(reduce_to(g, &sb)?)])
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary(other, "sub", |x, y| x - y)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(data, shape, "sub", &[self, other], move |g, _, _| {
            Ok(vec![Some(reduce_to(g, &sa)?), Some(reduce_to(&g.neg(), &sb)?)])
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(data, shape, "mul", &[self, other], |g, _, inp| {
            let (a, b) = (&inp[0], &inp[1]);
            let ga = if a.requires_grad() {
                Some(reduce_to(&g.mul(b)?, a.shape())?)
            } else {
                None
            };
            let gb = if b.requires_grad() {
                Some(reduce_to(&g.mul(a)?, b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary(other, "div", |x, y| x / y)?;
        Ok(Tensor::from_op(data, shape, "div", &[self, other], |g, _, inp| {
            let (a, b) = (&inp[0], &inp[1]);
            let ga = if a.requires_grad() {
                Some(reduce_to(&g.div(b)?, a.shape())?)
            } else {
                None
            };
            let gb = if b.requires_grad() {
                let t = g.mul(a)?.div(&b.square())?.neg();
                Some(reduce_to(&t, b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| -v), self.shape().to_vec(), "neg", &[self], |g, _, _| {
            Ok(vec![Some(g.neg())])
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        Tensor::from_op(
            unary_data(self, |v| v + c),
            self.shape().to_vec(),
            "add_scalar",
            &[self],
            |g, _, _| Ok(vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let cs = T::lit(c);
        Tensor::from_op(
            unary_data(self, |v| v * cs),
            self.shape().to_vec(),
            "mul_scalar",
            &[self],
            move |g, _, _| Ok(vec![Some(g.mul_scalar(c))]),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| v * v), self.shape().to_vec(), "square", &[self], |g, _, inp| {
            Ok(vec![Some(g.mul(&inp[0])?.mul_scalar(2.0))])
        })
    }

    /// Square root; its derivative at 0 is taken as 0 instead of `+inf`.
    pub fn sqrt(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| v.sqrt()), self.shape().to_vec(), "sqrt", &[self], |g, out, _| {
            Ok(vec![Some(g.mul(&out.recip_or_zero())?.mul_scalar(0.5))])
        })
    }

    /// `1/x`, with 0 where `x == 0`.
    pub fn recip_or_zero(&self) -> Tensor<T> {
        let zero = T::zero();
        Tensor::from_op(
            unary_data(self, |v| if v == zero { zero } else { T::one() / v }),
            self.shape().to_vec(),
            "recip_or_zero",
            &[self],
            |g, out, _| Ok(vec![Some(g.mul(&out.square())?.neg())]),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| v.exp()), self.shape().to_vec(), "exp", &[self], |g, out, _| {
            Ok(vec![Some(g.mul(out)?)])
        })
    }

    pub fn ln(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| v.ln()), self.shape().to_vec(), "ln", &[self], |g, _, inp| {
            Ok(vec![Some(g.div(&inp[0])?)])
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        Tensor::from_op(unary_data(self, |v| v.tanh()), self.shape().to_vec(), "tanh", &[self], |g, out, _| {
            let d = out.square().neg().add_scalar(1.0);
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let zero = T::zero();
        Tensor::from_op(
            unary_data(self, |v| if v > zero { v } else { zero }),
            self.shape().to_vec(),
            "relu",
            &[self],
            move |g, _, inp| {
                let step = unary_data(&inp[0], |v| if v > zero { T::one() } else { zero });
                let step = Tensor::raw(step, inp[0].shape().to_vec());
                Ok(vec![Some(g.mul(&step)?)])
            },
        )
    }

    /// Standard normal CDF, `Φ(x) = (1 + erf(x/√2)) / 2`.
    pub fn normal_cdf(&self) -> Tensor<T> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        Tensor::from_op(
            unary_data(self, |v| half * (T::one() + (v * inv_sqrt2).erf())),
            self.shape().to_vec(),
            "normal_cdf",
            &[self],
            |g, _, inp| Ok(vec![Some(g.mul(&inp[0].normal_pdf())?)]),
        )
    }

    /// Standard normal density `φ(x)`.
    pub fn normal_pdf(&self) -> Tensor<T> {
        let norm = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = T::lit(0.5);
        Tensor::from_op(
            unary_data(self, |v| norm * (-(v * v) * half).exp()),
            self.shape().to_vec(),
            "normal_pdf",
            &[self],
            |g, out, inp| Ok(vec![Some(g.mul(&inp[0].mul(out)?)?.neg())]),
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        self.mul(&self.normal_cdf()).expect("same shape")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(vec![total], Vec::new(), "sum", &[self], move |g, _, _| {
            Ok(vec![Some(Tensor::ones(&shape).mul(g)?)])
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    fn resolve_axis(&self, op: &'static str, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let a = if axis < 0 { rank + axis } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {:?}", self.shape())));
        }
        Ok(a as usize)
    }

    /// Sum over one axis (negative counts from the end).
    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor<T>> {
        let ax = self.resolve_axis("sum_axis", axis)?;
        let shape = self.shape();
        let outer: usize = shape[..ax].iter().product();
        let n = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        if inner == 1 {
            for (d, row) in out.iter_mut().zip(src.chunks_exact(n.max(1))) {
                *d = row.iter().fold(T::zero(), |a, &v| a + v);
            }
        } else {
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        let mut keep_shape = shape.to_vec();
        keep_shape[ax] = 1;
        let out_shape = if keepdim {
            keep_shape.clone()
        } else {
            let mut s = shape.to_vec();
            s.remove(ax);
            s
        };
        let in_shape = shape.to_vec();
        Ok(Tensor::from_op(out, out_shape, "sum_axis", &[self], move |g, _, _| {
            Ok(vec![Some(g.reshape(&keep_shape)?.broadcast_to(&in_shape)?)])
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor<T>> {
        let ax = self.resolve_axis("mean_axis", axis)?;
        let n = self.shape()[ax];
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n as f64))
    }

    /// Repeats extent-1 axes to reach `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let src_shape = self.shape().to_vec();
        if src_shape == shape {
            return Ok(self.clone());
        }
        if src_shape.len() != shape.len()
            || src_shape.iter().zip(shape).any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::shape("broadcast_to", &src_shape, shape));
        }
        let src_strides = Tensor::<T>::strides(&src_shape);
        let eff: Vec<usize> = src_shape
            .iter()
            .zip(&src_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let src = self.data();
        let mut out = Vec::with_capacity(numel_of(shape));
        // Axes after the last expanded one are copied as contiguous blocks,
        // and the last expanded axis repeats each block.
        let split = (0..shape.len()).rev().find(|&d| src_shape[d] != shape[d]).map_or(0, |d| d + 1);
        let block = numel_of(&shape[split..]);
        let reps = shape[split - 1];
        let outer = &shape[..split - 1];
        let mut idx = vec![0usize; outer.len()];
        let mut offset = 0usize;
        for _ in 0..numel_of(outer) {
            let chunk = &src[offset..offset + block];
            if block == 1 {
                out.resize(out.len() + reps, chunk[0]);
            } else {
                for _ in 0..reps {
                    out.extend_from_slice(chunk);
                }
            }
            for d in (0..outer.len()).rev() {
                idx[d] += 1;
                offset += eff[d];
                if idx[d] < outer[d] {
                    break;
                }
                offset -= eff[d] * outer[d];
                idx[d] = 0;
            }
        }
        let expanded: Vec<usize> = (0..shape.len())
            .filter(|&d| src_shape[d] == 1 && shape[d] != 1)
            .collect();
        Ok(Tensor::from_op(out, shape.to_vec(), "broadcast_to", &[self], move |g, _, _| {
            let mut acc = g.clone();
            for &d in &expanded {
                acc = acc.sum_axis(d as isize, true)?;
            }
            Ok(vec![Some(acc)])
        }))
    }

    /// Reinterprets the data under a new shape with the same element count (no copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op_shared(self.shared_data(), shape.to_vec(), "reshape", &[self], move |g, _, _| {
            Ok(vec![Some(g.reshape(&in_shape)?)])
        }))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    ///
    /// Every layout operation (permute, slicing, pixel shuffle, patch extraction,
    /// translation with zero fill) is expressed through this pair with
    /// [`Tensor::scatter_add`], so they are all differentiable to any order.
    pub fn gather(&self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(out_shape) != index.len() {
            return Err(Error::invalid(
                "gather",
                format!("index length {} does not match {out_shape:?}", index.len()),
            ));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(T::zero());
            } else {
                out.push(*src.get(i).ok_or_else(|| {
                    Error::invalid("gather", format!("index {i} out of bounds for {}", src.len()))
                })?);
            }
        }
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, out_shape.to_vec(), "gather", &[self], move |g, _, _| {
            Ok(vec![Some(g.scatter_add(Rc::clone(&index), &in_shape)?)])
        }))
    }

    /// Adjoint of [`Tensor::gather`]: `out[index[i]] += self[i]`.
    pub fn scatter_add(&self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        if self.numel() != index.len() {
            return Err(Error::invalid(
                "scatter_add",
                format!("index length {} does not match input {:?}", index.len(), self.shape()),
            ));
        }
        let n = numel_of(out_shape);
        let mut out = vec![T::zero(); n];
        for (&i, &v) in index.iter().zip(self.data()) {
            if i != GATHER_ZERO {
                if i >= n {
                    return Err(Error::invalid("scatter_add", format!("index {i} out of bounds for {n}")));
                }
                out[i] += v;
            }
        }
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, out_shape.to_vec(), "scatter_add", &[self], move |g, _, _| {
            Ok(vec![Some(g.gather(Rc::clone(&index), &in_shape)?)])
        }))
    }

    /// Reorders axes; `axes[k]` names the source axis that becomes axis `k`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = Tensor::<T>::strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            index.push(offset);
            for d in (0..rank).rev() {
                idx[d] += 1;
                offset += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice_axis",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for k in start..start + len {
                let base = (o * n + k) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(Rc::new(index), &out_shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = vec![T::zero(); outer * total_axis * inner];
        let mut positions: Vec<Rc<Vec<usize>>> = Vec::with_capacity(parts.len());
        let mut shapes = Vec::with_capacity(parts.len());
        let mut axis_off = 0;
        for p in parts {
            let n = p.shape()[axis];
            let mut pos = Vec::with_capacity(p.numel());
            for o in 0..outer {
                for k in 0..n {
                    let dst = (o * total_axis + axis_off + k) * inner;
                    pos.extend(dst..dst + inner);
                }
            }
            for (&d, &v) in pos.iter().zip(p.data()) {
                out[d] = v;
            }
            positions.push(Rc::new(pos));
            shapes.push(p.shape().to_vec());
            axis_off += n;
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        Ok(Tensor::from_op(out, out_shape, "concat", parts, move |g, _, inp| {
            positions
                .iter()
                .zip(&shapes)
                .zip(inp)
                .map(|((pos, shape), i)| {
                    if i.requires_grad() {
                        g.gather(Rc::clone(pos), shape).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect()
        }))
    }

    /// Softmax over the last axis, stabilized by subtracting each slice's max.
    ///
    /// `-inf` entries act as a mask and map to exactly zero; a slice where every
    /// entry is `-inf` is rejected.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let src = self.data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::DegenerateMask);
            }
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(out, shape.clone(), "softmax", &[self], move |g, y, _| {
            let gy = g.mul(y)?;
            let s = gy.sum_axis(-1, true)?.broadcast_to(&shape)?;
            Ok(vec![Some(gy.sub(&y.mul(&s)?)?)])
        }))
    }

    /// Layer normalization over the last axis followed by the affine `γ·x̂ + β`.
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layernorm", "rank-0 input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layernorm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / c;
        let x = self.reshape(&[rows, c])?;
        let mean = x.mean_axis(-1, true)?.broadcast_to(&[rows, c])?;
        let centered = x.sub(&mean)?;
        let var = centered.square().mean_axis(-1, true)?;
        let std = var.add_scalar(eps).sqrt().broadcast_to(&[rows, c])?;
        let normed = centered.div(&std)?;
        let g = gamma.reshape(&[1, c])?.broadcast_to(&[rows, c])?;
        let b = beta.reshape(&[1, c])?.broadcast_to(&[rows, c])?;
        normed.mul(&g)?.add(&b)?.reshape(self.shape())
    }

    /// Broadcasts a `[C]` bias over the rows of a `[rows, C]` tensor and adds it.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let c = bias.numel();
        if self.rank() != 2 || self.shape()[1] != c || bias.rank() != 1 {
            return Err(Error::shape("add_row_bias", self.shape(), bias.shape()));
        }
        let rows = self.shape()[0];
        self.add(&bias.reshape(&[1, c])?.broadcast_to(&[rows, c])?)
    }
}
