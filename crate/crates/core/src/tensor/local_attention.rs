use std::rc::Rc;

use super::{is_grad_enabled, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-query list of keys a query may attend to, in ascending key order.
///
/// For a square token grid the allowed set of query `i` is every key whose
/// Chebyshev distance on the grid is strictly below the window. Keys are
/// also kept as runs of consecutive indices so the kernel can stream over
/// contiguous memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    tokens: usize,
    offsets: Vec<usize>,
    keys: Vec<u32>,
    run_offsets: Vec<usize>,
    /// `(first key, length)`
    runs: Vec<(usize, usize)>,
}

impl NeighborTable {
    fn from_rows(tokens: usize, offsets: Vec<usize>, keys: Vec<u32>) -> Self {
        let mut run_offsets = vec![0];
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for i in 0..tokens {
            let row_start = runs.len();
            for &k in &keys[offsets[i]..offsets[i + 1]] {
                let k = k as usize;
                let extend = runs.len() > row_start && runs.last().is_some_and(|&(s, l)| s + l == k);
                match runs.last_mut() {
                    Some((_, l)) if extend => *l += 1,
                    _ => runs.push((k, 1)),
                }
            }
            run_offsets.push(runs.len());
        }
        NeighborTable { tokens, offsets, keys, run_offsets, runs }
    }

    /// Every query sees every key.
    pub fn full(tokens: usize) -> Self {
        let keys: Vec<u32> = (0..tokens).flat_map(|_| 0..tokens as u32).collect();
        let offsets = (0..=tokens).map(|i| i * tokens).collect();
        Self::from_rows(tokens, offsets, keys)
    }

    /// Square `side × side` grid with an optional window; `None` allows all pairs.
    pub fn grid(side: usize, window: Option<usize>) -> Self {
        let tokens = side * side;
        let Some(w) = window.filter(|&w| w < side) else {
            return Self::full(tokens);
        };
        let mut offsets = Vec::with_capacity(tokens + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for i in 0..tokens {
            let (r, c) = (i / side, i % side);
            let r0 = r.saturating_sub(w - 1);
            let r1 = (r + w - 1).min(side - 1);
            let c0 = c.saturating_sub(w - 1);
            let c1 = (c + w - 1).min(side - 1);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    keys.push((rr * side + cc) as u32);
                }
            }
            offsets.push(keys.len());
        }
        Self::from_rows(tokens, offsets, keys)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Total number of allowed (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.keys.len()
    }

    pub fn keys_of(&self, query: usize) -> &[u32] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    fn runs_of(&self, query: usize) -> &[(usize, usize)] {
        &self.runs[self.run_offsets[query]..self.run_offsets[query + 1]]
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.keys_of(query).binary_search(&(key as u32)).is_ok()
    }
}

const LANES: usize = 8;

/// Reductions with independent accumulators so the loops vectorize.
#[inline(always)]
fn lane_fold<T: Scalar>(x: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = f(*a, v);
        }
    }
    let mut r = tail.iter().fold(init, |a, &v| f(a, v));
    for a in acc {
        r = f(r, a);
    }
    r
}

#[inline(always)]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let n = a.len().min(b.len());
    let split = n - n % LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for ((s, &x), &y) in acc.iter_mut().zip(ca).zip(cb) {
            *s += x * y;
        }
    }
    let mut r = T::zero();
    for (&x, &y) in a[split..n].iter().zip(&b[split..n]) {
        r += x * y;
    }
    for s in acc {
        r += s;
    }
    r
}

/// Calls `$f::<D>` for common head widths so the inner loops unroll, and
/// `$generic` otherwise.
macro_rules! by_width {
    ($d:expr, $f:ident, $generic:expr, ($($arg:expr),*)) => {
        match $d {
            2 => $f::<T, 2>($($arg),*),
            4 => $f::<T, 4>($($arg),*),
            8 => $f::<T, 8>($($arg),*),
            16 => $f::<T, 16>($($arg),*),
            32 => $f::<T, 32>($($arg),*),
            64 => $f::<T, 64>($($arg),*),
            _ => $generic,
        }
    };
}

/// `out[p] = a · b[p·d..(p+1)·d]`
#[inline(always)]
fn dots<T: Scalar>(a: &[T], b: &[T], d: usize, out: &mut [T]) {
    if d == 1 {
        let a0 = a[0];
        for (o, &x) in out.iter_mut().zip(b) {
            *o = a0 * x;
        }
        return;
    }
    by_width!(d, dots_n, {
        for (o, row) in out.iter_mut().zip(b.chunks_exact(d)) {
            let mut acc = T::zero();
            for (&u, &v) in a.iter().zip(row) {
                acc += u * v;
            }
            *o = acc;
        }
    }, (a, b, out))
}

#[inline(always)]
fn dots_n<T: Scalar, const D: usize>(a: &[T], b: &[T], out: &mut [T]) {
    let a: &[T; D] = a[..D].try_into().expect("head width");
    for (o, row) in out.iter_mut().zip(b.chunks_exact(D)) {
        let mut acc = T::zero();
        for k in 0..D {
            acc += a[k] * row[k];
        }
        *o = acc;
    }
}

/// `y += Σ_p w[p] · x[p·d..(p+1)·d]`
#[inline(always)]
fn weighted_sum<T: Scalar>(y: &mut [T], w: &[T], x: &[T], d: usize) {
    if d == 1 {
        y[0] += lane_dot(w, x);
        return;
    }
    by_width!(d, weighted_sum_n, {
        for (&a, row) in w.iter().zip(x.chunks_exact(d)) {
            for (o, &v) in y.iter_mut().zip(row) {
                *o += a * v;
            }
        }
    }, (y, w, x))
}

#[inline(always)]
fn weighted_sum_n<T: Scalar, const D: usize>(y: &mut [T], w: &[T], x: &[T]) {
    let mut acc: [T; D] = y[..D].try_into().expect("head width");
    for (&a, row) in w.iter().zip(x.chunks_exact(D)) {
        for k in 0..D {
            acc[k] += a * row[k];
        }
    }
    y[..D].copy_from_slice(&acc);
}

/// `x[p·d..(p+1)·d] += w[p] · a`
#[inline(always)]
fn outer_add<T: Scalar>(x: &mut [T], w: &[T], a: &[T], d: usize) {
    if d == 1 {
        let a0 = a[0];
        for (o, &b) in x.iter_mut().zip(w) {
            *o += b * a0;
        }
        return;
    }
    by_width!(d, outer_add_n, {
        for (row, &b) in x.chunks_exact_mut(d).zip(w) {
            for (o, &v) in row.iter_mut().zip(a) {
                *o += b * v;
            }
        }
    }, (x, w, a))
}

#[inline(always)]
fn outer_add_n<T: Scalar, const D: usize>(x: &mut [T], w: &[T], a: &[T]) {
    let a: &[T; D] = a[..D].try_into().expect("head width");
    for (row, &b) in x.chunks_exact_mut(D).zip(w) {
        for k in 0..D {
            row[k] += b * a[k];
        }
    }
}

/// One group's forward pass: writes `out_g` and the per-query log-normalizer.
#[allow(clippy::too_many_arguments)]
fn forward_group<T: Scalar>(
    table: &NeighborTable,
    d: usize,
    scale: T,
    qg: &[T],
    kg: &[T],
    vg: &[T],
    out_g: &mut [T],
    lse_g: &mut [T],
    row: &mut [T],
) {
    for i in 0..table.tokens {
        let qi = &qg[i * d..(i + 1) * d];
        let row = &mut row[..table.keys_of(i).len()];
        let mut p = 0;
        for &(s, len) in table.runs_of(i) {
            dots(qi, &kg[s * d..(s + len) * d], d, &mut row[p..p + len]);
            p += len;
        }
        let max = lane_fold(row, T::neg_infinity(), T::max) * scale;
        for x in row.iter_mut() {
            *x = (*x * scale - max).softmax_exp();
        }
        let total = lane_fold(row, T::zero(), |a, x| a + x);
        lse_g[i] = max + total.ln();
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
        let oi = &mut out_g[i * d..(i + 1) * d];
        let mut p = 0;
        for &(s, len) in table.runs_of(i) {
            weighted_sum(oi, &row[p..p + len], &vg[s * d..(s + len) * d], d);
            p += len;
        }
    }
}

/// One group's backward pass, recomputing probabilities from `lse_g`.
///
/// Uses `Σ_j p_ij (g_i·v_j) = g_i·o_i`, so each run of keys is finished in a
/// single visit.
#[allow(clippy::too_many_arguments)]
fn backward_group<T: Scalar>(
    table: &NeighborTable,
    d: usize,
    scale: T,
    (qg, kg, vg, og): (&[T], &[T], &[T], &[T]),
    gog: &[T],
    lse_g: &[T],
    (dqg, dkg, dvg): (&mut [T], &mut [T], &mut [T]),
    row: &mut [T],
    dp: &mut [T],
) {
    for i in 0..table.tokens {
        let gi = &gog[i * d..(i + 1) * d];
        let qi = &qg[i * d..(i + 1) * d];
        let norm = lse_g[i];
        let rowdot = lane_dot(gi, &og[i * d..(i + 1) * d]);
        let dqi = &mut dqg[i * d..(i + 1) * d];
        for &(s, len) in table.runs_of(i) {
            let (row, dp) = (&mut row[..len], &mut dp[..len]);
            let (keys, values) = (&kg[s * d..(s + len) * d], &vg[s * d..(s + len) * d]);
            dots(qi, keys, d, row);
            dots(gi, values, d, dp);
            for x in row.iter_mut() {
                *x = (*x * scale - norm).softmax_exp();
            }
            outer_add(&mut dvg[s * d..(s + len) * d], row, gi, d);
            // dp becomes the logit gradient
            for (x, &a) in dp.iter_mut().zip(row.iter()) {
                *x = a * (*x - rowdot) * scale;
            }
            weighted_sum(dqi, dp, keys, d);
            outer_add(&mut dkg[s * d..(s + len) * d], dp, qi, d);
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Fused scaled-dot-product attention restricted to a neighbor table.
    ///
    /// `q`, `k`, `v` are `[G, N, d]` (G = batch × heads). Each query attends
    /// over its allowed keys with logits scaled by `1/√d`. Cost scales with
    /// the window area instead of `N²` and no `N×N` buffer is kept. Its
    /// backward pass is first-order only.
    pub fn local_attention(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        table: Rc<NeighborTable>,
    ) -> Result<Tensor<T>> {
        let shape = q.shape().to_vec();
        if shape.len() != 3 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(Error::shape("local_attention", q.shape(), k.shape()));
        }
        let (groups, n, d) = (shape[0], shape[1], shape[2]);
        if table.tokens() != n {
            return Err(Error::invalid(
                "local_attention",
                format!("neighbor table covers {} tokens, sequence has {n}", table.tokens()),
            ));
        }
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut lse = vec![T::zero(); groups * n];
        let mut out = vec![T::zero(); groups * n * d];
        let widest = (0..n).map(|i| table.keys_of(i).len()).max().unwrap_or(0);
        let mut row = vec![T::zero(); widest];
        let nd = n * d;
        for (g, (out_g, lse_g)) in out.chunks_exact_mut(nd).zip(lse.chunks_exact_mut(n)).enumerate() {
            let r = g * nd..(g + 1) * nd;
            forward_group(&table, d, scale, &qd[r.clone()], &kd[r.clone()], &vd[r], out_g, lse_g, &mut row);
        }
        Ok(Tensor::from_op(out, shape.clone(), "local_attention", &[q, k, v], move |go, y, inp| {
            if is_grad_enabled() {
                return Err(Error::HigherOrderUnsupported("local_attention"));
            }
            let (qd, kd, vd) = (inp[0].data(), inp[1].data(), inp[2].data());
            let (god, yd) = (go.data(), y.data());
            let mut dq = vec![T::zero(); groups * nd];
            let mut dk = vec![T::zero(); groups * nd];
            let mut dv = vec![T::zero(); groups * nd];
            let mut row = vec![T::zero(); widest];
            let mut dp = vec![T::zero(); widest];
            for g in 0..groups {
                let r = g * nd..(g + 1) * nd;
                backward_group(
                    &table,
                    d,
                    scale,
                    (&qd[r.clone()], &kd[r.clone()], &vd[r.clone()], &yd[r.clone()]),
                    &god[r.clone()],
                    &lse[g * n..(g + 1) * n],
                    (&mut dq[r.clone()], &mut dk[r.clone()], &mut dv[r]),
                    &mut row,
                    &mut dp,
                );
            }
            Ok(vec![
                Some(Tensor::raw(dq, shape.clone())),
                Some(Tensor::raw(dk, shape.clone())),
                Some(Tensor::raw(dv, shape.clone())),
            ])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_covering_grid_equals_full_table() {
        assert_eq!(NeighborTable::grid(4, Some(4)), NeighborTable::full(16));
        assert_eq!(NeighborTable::grid(4, Some(9)), NeighborTable::full(16));
        assert_eq!(NeighborTable::grid(4, None), NeighborTable::full(16));
    }

    #[test]
    fn chebyshev_membership() {
        let t = NeighborTable::grid(5, Some(2));
        // query at (2,2): keys with |dr|,|dc| <= 1
        let q = 2 * 5 + 2;
        assert_eq!(t.keys_of(q).len(), 9);
        assert!(t.allowed(q, 5 + 1));
        assert!(!t.allowed(q, 0));
        // corner keeps only its 2×2 neighborhood
        assert_eq!(t.keys_of(0), &[0, 1, 5, 6]);
        let unit = NeighborTable::grid(3, Some(1));
        for i in 0..9 {
            assert_eq!(unit.keys_of(i), &[i as u32]);
        }
    }

    #[test]
    fn enlarging_window_never_drops_pairs() {
        for side in [3usize, 6, 8] {
            for w in 1..side + 2 {
                let small = NeighborTable::grid(side, Some(w));
                let big = NeighborTable::grid(side, Some(w + 1));
                for i in 0..side * side {
                    for &j in small.keys_of(i) {
                        assert!(big.allowed(i, j as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn backward_refuses_create_graph() {
        let q = Tensor::<f64>::param(vec![0.1, 0.2, 0.3, 0.4], &[1, 4, 1]).unwrap();
        let table = Rc::new(NeighborTable::grid(2, None));
        let y = Tensor::local_attention(&q, &q, &q, table).unwrap().sum();
        assert!(matches!(
            crate::tensor::input_gradient(&y, &q),
            Err(Error::HigherOrderUnsupported(_))
        ));
    }
}
