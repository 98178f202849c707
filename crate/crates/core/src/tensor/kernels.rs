//! Value-level compute kernels shared by the tape ops and plain tensor code.

use super::{broadcast_shape, split_axis, strides_of, Tensor};
use crate::error::{Error, Result};

/// Strides of `shape` aligned to an output of rank `rank`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides_of(shape);
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let last = rank - 1;
    let inner = out[last];
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, ia + j * sa[last], ib + j * sb[last]);
        }
        o += inner;
        // odometer over the leading axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    // common case: trailing-suffix broadcast of the smaller operand
    if out == a.shape && a.shape.ends_with(&b.shape) {
        let m = b.data.len();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if out == b.shape && b.shape.ends_with(&a.shape) {
        let m = a.data.len();
        let data = b.data.iter().enumerate().map(|(i, &y)| f(a.data[i % m], y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = aligned_strides(&a.shape, &out);
    let sb = aligned_strides(&b.shape, &out);
    let n = out.iter().product();
    let mut data = vec![0.0; n];
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(a.data[i], b.data[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` (of a broadcast output shape) back down to `target`.
pub fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    if g.shape.ends_with(target) {
        for (i, &x) in g.data.iter().enumerate() {
            out[i % n] += x;
        }
        return Tensor::from_parts(target.to_vec(), out);
    }
    let st = aligned_strides(target, &g.shape);
    let zeros = vec![0; g.shape.len()];
    for_each_broadcast(&g.shape, &st, &zeros, |o, i, _| out[i] += g.data[o]);
    Tensor::from_parts(target.to_vec(), out)
}

/// `c (+)= op(a) * op(b)` for row-major matrices, where `a` is stored as
/// `[m,k]` (or `[k,m]` when `ta`) and `b` as `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the batch axes of a matmul line up.
#[derive(Clone, Debug, PartialEq)]
pub enum MatmulLayout {
    /// `b` is a plain matrix shared across all of `a`'s batches.
    SharedRhs { rows: usize },
    /// `a` is a plain matrix shared across all of `b`'s batches.
    SharedLhs { batches: usize },
    /// Both carry identical batch extents.
    Batched { batches: usize },
}

pub fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(MatmulLayout, usize, usize, usize, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let (layout, batch) = if bb.iter().product::<usize>() == 1 && bb.len() <= ab.len() {
        (
            MatmulLayout::SharedRhs {
                rows: ab.iter().product::<usize>() * m,
            },
            ab.to_vec(),
        )
    } else if ab.iter().product::<usize>() == 1 && ab.len() <= bb.len() {
        (
            MatmulLayout::SharedLhs {
                batches: bb.iter().product(),
            },
            bb.to_vec(),
        )
    } else if ab == bb {
        (
            MatmulLayout::Batched {
                batches: ab.iter().product(),
            },
            ab.to_vec(),
        )
    } else {
        return Err(err());
    };
    let mut out = batch;
    out.push(m);
    out.push(n);
    Ok((layout, m, k, n, out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (layout, m, k, n, out_shape) = matmul_plan(&a.shape, &b.shape)?;
    let mut c = vec![0.0; out_shape.iter().product()];
    match layout {
        MatmulLayout::SharedRhs { rows } => gemm(rows, k, n, &a.data, false, &b.data, false, &mut c, false),
        MatmulLayout::SharedLhs { batches } => {
            for i in 0..batches {
                gemm(m, k, n, &a.data, false, &b.data[i * k * n..], false, &mut c[i * m * n..], false);
            }
        }
        MatmulLayout::Batched { batches } => {
            for i in 0..batches {
                gemm(
                    m,
                    k,
                    n,
                    &a.data[i * m * k..],
                    false,
                    &b.data[i * k * n..],
                    false,
                    &mut c[i * m * n..],
                    false,
                );
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, c))
}

/// Gradients of `c = a @ b` with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, need_a: bool, need_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let (layout, m, k, n, _) = matmul_plan(&a.shape, &b.shape).expect("validated in forward");
    let mut ga = need_a.then(|| vec![0.0; a.numel()]);
    let mut gb = need_b.then(|| vec![0.0; b.numel()]);
    match layout {
        MatmulLayout::SharedRhs { rows } => {
            if let Some(ga) = ga.as_mut() {
                gemm(rows, n, k, &g.data, false, &b.data, true, ga, false);
            }
            if let Some(gb) = gb.as_mut() {
                gemm(k, rows, n, &a.data, true, &g.data, false, gb, false);
            }
        }
        MatmulLayout::SharedLhs { batches } => {
            for i in 0..batches {
                let gi = &g.data[i * m * n..];
                if let Some(ga) = ga.as_mut() {
                    gemm(m, n, k, gi, false, &b.data[i * k * n..], true, ga, true);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, m, n, &a.data, true, gi, false, &mut gb[i * k * n..], false);
                }
            }
        }
        MatmulLayout::Batched { batches } => {
            for i in 0..batches {
                let gi = &g.data[i * m * n..];
                if let Some(ga) = ga.as_mut() {
                    gemm(m, n, k, gi, false, &b.data[i * k * n..], true, &mut ga[i * m * k..], false);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, m, n, &a.data[i * m * k..], true, gi, false, &mut gb[i * k * n..], false);
                }
            }
        }
    }
    (
        ga.map(|d| Tensor::from_parts(a.shape.clone(), d)),
        gb.map(|d| Tensor::from_parts(b.shape.clone(), d)),
    )
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidShape {
            op: "permute",
            detail: format!("bad permutation {:?} for rank {}", perm, rank),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let in_strides = x.strides();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![0.0; x.numel()];
    let zeros = vec![0; rank];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| data[o] = x.data[i]);
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            detail: format!("axis {} out of range for {:?}", axis, shape),
        });
    }
    Ok(())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(&x.shape, axis, "softmax")?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| x.data[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x.data[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&y.shape, axis);
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| y.data[base + j * inner] * g.data[base + j * inner]).sum();
            for j in 0..len {
                let p = base + j * inner;
                out[p] = y.data[p] * (g.data[p] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape.clone(), out)
}

pub fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data[(o * len + j) * inner..(o * len + j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::from_parts(reduced_shape(&x.shape, axis, keepdim), out)
}

/// Spreads a reduced gradient back along `axis` (inverse of [`sum_axis`]).
pub fn expand_axis(g: &[f64], shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            let dst = &mut out[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                *d = s * scale;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn max_axis(x: &Tensor, axis: usize, keepdim: bool) -> (Tensor, Vec<usize>) {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                let v = x.data[(o * len + j) * inner + i];
                if v > out[o * inner + i] {
                    out[o * inner + i] = v;
                    arg[o * inner + i] = j;
                }
            }
        }
    }
    (Tensor::from_parts(reduced_shape(&x.shape, axis, keepdim), out), arg)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    check_axis(&first.shape, axis, "concat")?;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(&x.shape, axis, "slice")?;
    if len == 0 || start + len > x.shape[axis] {
        return Err(Error::InvalidShape {
            op: "slice",
            detail: format!("range {}..{} out of extent {}", start, start + len, x.shape[axis]),
        });
    }
    let (outer, full, inner) = split_axis(&x.shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Delays `x` along `axis` by `by` steps, filling the front with zeros.
pub fn shift(x: &Tensor, axis: usize, by: usize, reverse: bool) -> Tensor {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    if by < len {
        for o in 0..outer {
            let base = o * len * inner;
            let span = (len - by) * inner;
            if reverse {
                out[base..base + span].copy_from_slice(&x.data[base + by * inner..base + by * inner + span]);
            } else {
                out[base + by * inner..base + by * inner + span].copy_from_slice(&x.data[base..base + span]);
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a.data[i * k + l] * b.data[l * n + j];
                }
            }
        }
        Tensor::from_parts(vec![m, n], c)
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        // a @ b^T
        let mut c = vec![0.0; 20];
        gemm(4, 3, 5, &a.data, false, &b.data, true, &mut c, false);
        let bt = permute(&b, &[1, 0]).unwrap();
        let want = naive_matmul(&a, &bt);
        for (x, y) in c.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matmul_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 4, 5], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..2 {
            let ai = slice(&a, 0, i, 1).unwrap().reshape(&[3, 4]).unwrap();
            let bi = slice(&b, 0, i, 1).unwrap().reshape(&[4, 5]).unwrap();
            let ci = slice(&c, 0, i, 1).unwrap().reshape(&[3, 5]).unwrap();
            assert!(ci.max_abs_diff(&naive_matmul(&ai, &bi)) < 1e-12);
        }
        let lhs = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let c = matmul(&lhs, &b).unwrap();
        assert_eq!(c.shape, vec![2, 3, 5]);
        let b1 = slice(&b, 0, 1, 1).unwrap().reshape(&[4, 5]).unwrap();
        let c1 = slice(&c, 0, 1, 1).unwrap().reshape(&[3, 5]).unwrap();
        assert!(c1.max_abs_diff(&naive_matmul(&lhs, &b1)) < 1e-12);
    }

    #[test]
    fn reduce_to_shape_middle_axis() {
        let g = Tensor::ones(&[2, 3, 4]);
        let r = reduce_to_shape(&g, &[2, 1, 4]);
        assert_eq!(r.shape, vec![2, 1, 4]);
        assert!(r.data.iter().all(|&x| x == 3.0));
        let r = reduce_to_shape(&g, &[4]);
        assert!(r.data.iter().all(|&x| x == 6.0));
    }

    #[test]
    fn shift_and_unshift() {
        let x = Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift(&x, 1, 1, false).data, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift(&x, 1, 2, true).data, vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn general_broadcast_matches_index_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform(&[2, 1, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 1], 1.0, &mut rng);
        let c = broadcast_binary(&a, &b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.shape, vec![2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let want = a.at(&[i, 0, k]) + b.at(&[j, 0]);
                    assert_eq!(c.at(&[i, j, k]), want);
                }
            }
        }
    }
}
