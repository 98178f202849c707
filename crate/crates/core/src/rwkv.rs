//! RWKV sequence layers: token shift, the WKV linear-attention scan, time
//! mixing, channel mixing, the pre-norm residual block, and the cross-modal
//! feature extraction (CFE) variant of time mixing.
//!
//! Sequences are `[..., T, d]` with time on the second-to-last axis; every
//! leading index is an independent sequence.

use crate::error::{Error, Result};
use crate::nn::{init_uniform, LayerNorm, ParamStore, Session};
use crate::tensor::{Ctx, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// `λ⊙x(t) + (1−λ)⊙x(t−1)` with a zero predecessor for the first step.
pub fn token_shift<'t>(x: Var<'t>, lambda: Var<'t>) -> Result<Var<'t>> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(Error::InvalidShape {
            op: "token_shift",
            detail: format!("expected [..., T, d], got {:?}", x.shape()),
        });
    }
    let prev = x.shift(rank - 2, 1)?;
    x.mul(lambda)?.add(prev.mul(lambda.one_minus()?)?)
}

struct ScanDims {
    seqs: usize,
    t: usize,
    d: usize,
}

fn scan_dims(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<ScanDims> {
    let shape = k.shape();
    if shape.len() < 2 || v.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "wkv_scan",
            lhs: shape.to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let d = shape[shape.len() - 1];
    let t = shape[shape.len() - 2];
    if w.shape() != [d] || u.shape() != [d] {
        return Err(Error::InvalidShape {
            op: "wkv_scan",
            detail: format!("decay {:?} and bonus {:?} must be [{}]", w.shape(), u.shape(), d),
        });
    }
    Ok(ScanDims {
        seqs: k.numel() / (t * d),
        t,
        d,
    })
}

/// Streaming WKV forward over raw buffers.
///
/// The numerator and denominator histories are carried as `aa·e^pp` and
/// `bb·e^pp` so no exponent is ever evaluated unshifted.
pub fn wkv_forward(k: &[f64], v: &[f64], w: &[f64], u: &[f64], seqs: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; k.len()];
    for s in 0..seqs {
        for j in 0..d {
            let (mut aa, mut bb, mut pp) = (0.0, 0.0, f64::NEG_INFINITY);
            for ti in 0..t {
                let i = (s * t + ti) * d + j;
                let (kt, vt) = (k[i], v[i]);
                let ww = u[j] + kt;
                let p = pp.max(ww);
                let e1 = (pp - p).exp();
                let e2 = (ww - p).exp();
                out[i] = (e1 * aa + e2 * vt) / (e1 * bb + e2);
                let ww = pp - w[j];
                let p = ww.max(kt);
                let e1 = (ww - p).exp();
                let e2 = (kt - p).exp();
                aa = e1 * aa + e2 * vt;
                bb = e1 * bb + e2;
                pp = p;
            }
        }
    }
    out
}

/// Gradients of `Σ g⊙wkv` with respect to `(k, v, w, u)`.
///
/// The forward pass is replayed per channel to recover the shifted running
/// quantities; the history sums `Σ_{t>i} e^{-(t-1-i)w} g_t/D_t` are then
/// accumulated backwards in the same shifted form.
#[allow(clippy::too_many_arguments)]
pub fn wkv_backward(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    g: &[f64],
    seqs: usize,
    t: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; k.len()];
    let mut dw = vec![0.0; d];
    let mut du = vec![0.0; d];
    let mut p_out = vec![0.0; t];
    let mut s_out = vec![0.0; t];
    let mut y_out = vec![0.0; t];
    for s in 0..seqs {
        for j in 0..d {
            let idx = |ti: usize| (s * t + ti) * d + j;
            let (mut aa, mut bb, mut cc, mut dd, mut pp) = (0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY);
            for ti in 0..t {
                let i = idx(ti);
                let (kt, vt) = (k[i], v[i]);
                let ww = u[j] + kt;
                let p = pp.max(ww);
                let e1 = (pp - p).exp();
                let e2 = (ww - p).exp();
                let den = e1 * bb + e2;
                let y = (e1 * aa + e2 * vt) / den;
                let sg = g[i] / den;
                p_out[ti] = p;
                s_out[ti] = sg;
                y_out[ti] = y;
                let direct = sg * e2;
                dv[i] += direct;
                dk[i] += direct * (vt - y);
                du[j] += direct * (vt - y);
                dw[j] -= sg * e1 * (cc - y * dd);

                let ww = pp - w[j];
                let p = ww.max(kt);
                let e1 = (ww - p).exp();
                let e2 = (kt - p).exp();
                cc = e1 * (cc + aa);
                dd = e1 * (dd + bb);
                aa = e1 * aa + e2 * vt;
                bb = e1 * bb + e2;
                pp = p;
            }
            let (mut a, mut b, mut q) = (0.0, 0.0, f64::INFINITY);
            for ti in (0..t.saturating_sub(1)).rev() {
                let pn = p_out[ti + 1];
                let qn = pn.min(w[j] + q);
                let f_new = (qn - pn).exp();
                let f_old = if q.is_finite() { (qn - w[j] - q).exp() } else { 0.0 };
                a = s_out[ti + 1] * f_new + a * f_old;
                b = s_out[ti + 1] * y_out[ti + 1] * f_new + b * f_old;
                q = qn;
                let i = idx(ti);
                let e = (k[i] - q).exp();
                dv[i] += e * a;
                dk[i] += e * (v[i] * a - b);
            }
        }
    }
    (dk, dv, dw, du)
}

/// Differentiable WKV scan; `k`, `v` are `[..., T, d]`, decay `w` and bonus
/// `u` are `[d]`.
pub fn wkv_scan<'t>(k: Var<'t>, v: Var<'t>, w: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let (kt, vt, wt, ut) = (k.value(), v.value(), w.value(), u.value());
    let dims = scan_dims(&kt, &vt, &wt, &ut)?;
    let out = wkv_forward(kt.data(), vt.data(), wt.data(), ut.data(), dims.seqs, dims.t, dims.d);
    let value = Tensor::new(kt.shape().to_vec(), out)?;
    k.tape().op(
        "wkv_scan",
        &[k, v, w, u],
        value,
        Box::new(move |c: &Ctx| {
            let [k, v, w, u] = c.inputs else { unreachable!("four inputs") };
            let (dk, dv, dw, du) = wkv_backward(k.data(), v.data(), w.data(), u.data(), c.grad.data(), dims.seqs, dims.t, dims.d);
            let shape = k.shape().to_vec();
            vec![
                Some(Tensor::new(shape.clone(), dk).expect("same shape")),
                Some(Tensor::new(shape, dv).expect("same shape")),
                Some(Tensor::vector(dw)),
                Some(Tensor::vector(du)),
            ]
        }),
    )
}

/// Decay values spread log-uniformly between fast and slow forgetting,
/// stored through the inverse of the softplus reparameterization.
fn init_decay(d: usize) -> Tensor {
    let (lo, hi) = (0.02f64.ln(), 2.0f64.ln());
    Tensor::vector(
        (0..d)
            .map(|j| {
                let frac = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.5 };
                let w = (lo + frac * (hi - lo)).exp();
                w.exp_m1().ln()
            })
            .collect(),
    )
}

fn time_axis_check(op: &'static str, x: &Var<'_>, d: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() < 2 || *shape.last().unwrap() != d {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected [..., T, {}], got {:?}", d, shape),
        });
    }
    Ok(())
}

/// RWKV time mixing from `d_in` to `d_out` channels.
#[derive(Clone, Debug)]
pub struct TimeMixing {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl TimeMixing {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.mix", name), Tensor::zeros(&[d_in]))?;
        for m in ["wr", "wk", "wv"] {
            store.add(format!("{}.{}", name, m), init_uniform(&[d_in, d_out], d_in, rng))?;
        }
        store.add(format!("{}.wo", name), init_uniform(&[d_out, d_out], d_out, rng))?;
        store.add(format!("{}.decay", name), init_decay(d_out))?;
        store.add(format!("{}.bonus", name), Tensor::uniform(&[d_out], 0.5, rng))?;
        Ok(Self {
            name: name.to_owned(),
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        time_axis_check("time_mixing", &x, self.d_in)?;
        let p = |m: &str| s.p(&format!("{}.{}", self.name, m));
        let xm = token_shift(x, p("mix")?.sigmoid()?)?;
        let r = xm.matmul(p("wr")?)?;
        let k = xm.matmul(p("wk")?)?;
        let v = xm.matmul(p("wv")?)?;
        let wkv = wkv_scan(k, v, p("decay")?.softplus()?, p("bonus")?)?;
        r.sigmoid()?.mul(wkv)?.matmul(p("wo")?)
    }
}

/// RWKV channel mixing: `σ(x W_r) ⊙ (relu(x W_k)² W_v)` on the shifted input.
#[derive(Clone, Debug)]
pub struct ChannelMixing {
    pub name: String,
    pub d: usize,
    pub hidden: usize,
}

impl ChannelMixing {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(format!("{}.mix", name), Tensor::zeros(&[d]))?;
        store.add(format!("{}.wr", name), init_uniform(&[d, d], d, rng))?;
        store.add(format!("{}.wk", name), init_uniform(&[d, hidden], d, rng))?;
        store.add(format!("{}.wv", name), init_uniform(&[hidden, d], hidden, rng))?;
        Ok(Self {
            name: name.to_owned(),
            d,
            hidden,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        time_axis_check("channel_mixing", &x, self.d)?;
        let p = |m: &str| s.p(&format!("{}.{}", self.name, m));
        let xm = token_shift(x, p("mix")?.sigmoid()?)?;
        let gate = xm.matmul(p("wr")?)?.sigmoid()?;
        let kv = xm.matmul(p("wk")?)?.relu()?.square()?.matmul(p("wv")?)?;
        gate.mul(kv)
    }
}

/// Pre-norm residual block: `h = x + TM(LN(x))`, `out = h + CM(LN(h))`.
#[derive(Clone, Debug)]
pub struct RwkvBlock {
    pub ln1: LayerNorm,
    pub time: TimeMixing,
    pub ln2: LayerNorm,
    pub channel: ChannelMixing,
}

impl RwkvBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{}.ln1", name), d)?,
            time: TimeMixing::new(store, &format!("{}.time", name), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{}.ln2", name), d)?,
            channel: ChannelMixing::new(store, &format!("{}.channel", name), d, 2 * d, rng)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.add(self.time.forward(s, self.ln1.forward(s, x)?)?)?;
        h.add(self.channel.forward(s, self.ln2.forward(s, h)?)?)
    }
}

/// Cross-modal time mixing. Each modality keeps its own receptance and
/// value paths but attends with keys averaged over the other modalities.
#[derive(Clone, Debug)]
pub struct CfeBlock {
    pub name: String,
    /// Input width of each modality slice.
    pub widths: Vec<usize>,
    /// Output width per modality.
    pub d: usize,
    /// Apply every key projection to the modality's own slice instead of
    /// to the slice of the projection's modality.
    pub shared_input: bool,
}

impl CfeBlock {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], d: usize, shared_input: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::CfeNeedsModalities);
        }
        if shared_input && widths.iter().any(|&w| w != widths[0]) {
            return Err(Error::InvalidArgument("shared-input CFE needs equal modality widths".into()));
        }
        let total: usize = widths.iter().sum();
        store.add(format!("{}.mix", name), Tensor::zeros(&[total]))?;
        for (i, &di) in widths.iter().enumerate() {
            for m in ["wr", "wk", "wv"] {
                store.add(format!("{}.m{}.{}", name, i, m), init_uniform(&[di, d], di, rng))?;
            }
            store.add(format!("{}.m{}.wo", name, i), init_uniform(&[d, d], d, rng))?;
        }
        store.add(format!("{}.decay", name), init_decay(d))?;
        store.add(format!("{}.bonus", name), Tensor::uniform(&[d], 0.5, rng))?;
        Ok(Self {
            name: name.to_owned(),
            widths: widths.to_vec(),
            d,
            shared_input,
        })
    }

    pub fn modalities(&self) -> usize {
        self.widths.len()
    }

    pub fn d_out(&self) -> usize {
        self.d * self.widths.len()
    }

    /// Token-shifted per-modality slices.
    fn slices<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let total: usize = self.widths.iter().sum();
        time_axis_check("cfe_block", &x, total)?;
        let axis = x.shape().len() - 1;
        let xm = token_shift(x, s.p(&format!("{}.mix", self.name))?.sigmoid()?)?;
        let mut off = 0;
        self.widths
            .iter()
            .map(|&w| {
                let part = xm.slice(axis, off, w);
                off += w;
                part
            })
            .collect()
    }

    /// Cross keys `(1/(M−1)) Σ_{j≠i} W_k^j x^{(j)}` for every modality `i`.
    pub fn cross_keys<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let xs = self.slices(s, x)?;
        self.cross_keys_from(s, &xs)
    }

    fn cross_keys_from<'t>(&self, s: &Session<'t>, xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let m = self.modalities();
        let wk: Vec<Var<'t>> = (0..m).map(|j| s.p(&format!("{}.m{}.wk", self.name, j))).collect::<Result<_>>()?;
        let scale = 1.0 / (m - 1) as f64;
        if self.shared_input {
            return (0..m)
                .map(|i| {
                    let mut acc: Option<Var<'t>> = None;
                    for (j, w) in wk.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let term = xs[i].matmul(*w)?;
                        acc = Some(match acc {
                            Some(a) => a.add(term)?,
                            None => term,
                        });
                    }
                    acc.expect("M ≥ 2").mul_scalar(scale)
                })
                .collect();
        }
        let keys: Vec<Var<'t>> = xs.iter().zip(&wk).map(|(x, w)| x.matmul(*w)).collect::<Result<_>>()?;
        let mut total = keys[0];
        for k in &keys[1..] {
            total = total.add(*k)?;
        }
        keys.iter().map(|k| total.sub(*k)?.mul_scalar(scale)).collect()
    }

    /// `[..., T, Σd_i]` to `[..., T, M·d]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let m = self.modalities();
        let xs = self.slices(s, x)?;
        let keys = self.cross_keys_from(s, &xs)?;
        let p = |i: usize, w: &str| s.p(&format!("{}.m{}.{}", self.name, i, w));
        let mut rs = Vec::with_capacity(m);
        let mut vs = Vec::with_capacity(m);
        for (i, xi) in xs.iter().enumerate() {
            rs.push(xi.matmul(p(i, "wr")?)?);
            vs.push(xi.matmul(p(i, "wv")?)?);
        }
        // one scan over all modalities side by side, sharing decay and bonus
        let axis = x.shape().len() - 1;
        let w = s.p(&format!("{}.decay", self.name))?.softplus()?;
        let u = s.p(&format!("{}.bonus", self.name))?;
        let wkv = wkv_scan(
            Var::concat(&keys, axis)?,
            Var::concat(&vs, axis)?,
            Var::concat(&vec![w; m], 0)?,
            Var::concat(&vec![u; m], 0)?,
        )?;
        let outs: Vec<Var<'t>> = (0..m)
            .map(|i| rs[i].sigmoid()?.mul(wkv.slice(axis, i * self.d, self.d)?)?.matmul(p(i, "wo")?))
            .collect::<Result<_>>()?;
        Var::concat(&outs, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_params;
    use crate::tensor::{gradcheck, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct double-loop evaluation with every exponent shifted by the
    /// largest one at that step.
    fn wkv_oracle(k: &[f64], v: &[f64], w: f64, u: f64) -> Vec<f64> {
        let t = k.len();
        (0..t)
            .map(|ti| {
                let mut ex: Vec<(f64, f64)> = (0..ti).map(|i| (-((ti - 1 - i) as f64) * w + k[i], v[i])).collect();
                ex.push((u + k[ti], v[ti]));
                let mx = ex.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
                let num: f64 = ex.iter().map(|(e, vv)| (e - mx).exp() * vv).sum();
                let den: f64 = ex.iter().map(|(e, _)| (e - mx).exp()).sum();
                num / den
            })
            .collect()
    }

    fn column(x: &[f64], t: usize, d: usize, s: usize, j: usize) -> Vec<f64> {
        (0..t).map(|ti| x[(s * t + ti) * d + j]).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn token_shift_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap());
        let half = tape.constant(Tensor::vector(vec![0.5]));
        assert_eq!(token_shift(x, half).unwrap().value().data(), &[1.0, 3.0]);
        let one = tape.constant(Tensor::vector(vec![1.0]));
        assert_eq!(token_shift(x, one).unwrap().value().data(), &[2.0, 4.0]);
        let zero = tape.constant(Tensor::vector(vec![0.0]));
        assert_eq!(token_shift(x, zero).unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn wkv_examples() {
        let y = wkv_forward(&[0.3], &[7.0], &[0.5], &[0.1], 1, 1, 1);
        assert!((y[0] - 7.0).abs() < 1e-15);
        let y = wkv_forward(&[0.0, 0.0], &[1.0, 3.0], &[0.0], &[0.0], 1, 2, 1);
        assert!((y[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wkv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = rng.random_range(1..=16);
            let d = rng.random_range(1..=8);
            let seqs = rng.random_range(1..=2);
            let n = seqs * t * d;
            let k: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = wkv_forward(&k, &v, &w, &u, seqs, t, d);
            for s in 0..seqs {
                for j in 0..d {
                    let oracle = wkv_oracle(&column(&k, t, d, s, j), &column(&v, t, d, s, j), w[j], u[j]);
                    for (ti, o) in oracle.iter().enumerate() {
                        let got = y[(s * t + ti) * d + j];
                        assert!((got - o).abs() <= 1e-10 * o.abs().max(1.0), "{} vs {}", got, o);
                    }
                }
            }
        }
    }

    #[test]
    fn wkv_survives_huge_keys() {
        let k = [0.0, 1000.0, -1000.0, 999.0, 3.0];
        let v = [1.0, -2.0, 5.0, 0.5, 4.0];
        let y = wkv_forward(&k, &v, &[0.3], &[0.2], 1, 5, 1);
        let oracle = wkv_oracle(&k, &v, 0.3, 0.2);
        for (a, b) in y.iter().zip(&oracle) {
            assert!(a.is_finite());
            assert!((a - b).abs() < 1e-10);
        }
        let g = [1.0; 5];
        let (dk, dv, dw, du) = wkv_backward(&k, &v, &[0.3], &[0.2], &g, 1, 5, 1);
        assert!(dk.iter().chain(&dv).chain(&dw).chain(&du).all(|x| x.is_finite()));
    }

    #[test]
    fn wkv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let (s, t, d) = (2, rng.random_range(1..=7), 3);
            let k = Tensor::uniform(&[s, t, d], 2.0, &mut rng);
            let v = Tensor::uniform(&[s, t, d], 2.0, &mut rng);
            let w = Tensor::vector((0..d).map(|_| rng.random_range(0.05..1.5)).collect());
            let u = Tensor::uniform(&[d], 1.0, &mut rng);
            let gw = Tensor::uniform(&[s, t, d], 1.0, &mut rng);
            let r = gradcheck::check(
                |tape, x| wkv_scan(x[0], x[1], x[2], x[3])?.mul(tape.constant(gw.clone()))?.sum_all(),
                &[k, v, w, u],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{:?}", r);
        }
    }

    #[test]
    fn wkv_scaling_is_linear() {
        let d = 32;
        let time = |t: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let k: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = k.clone();
            let w = vec![0.5; d];
            let u = vec![0.1; d];
            (0..5)
                .map(|_| {
                    let start = std::time::Instant::now();
                    std::hint::black_box(wkv_forward(&k, &v, &w, &u, 1, t, d));
                    start.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let (a, b) = (time(20_000), time(40_000));
        assert!(b / a < 2.5, "doubling T took {:.2}x", b / a);
    }

    proptest! {
        #[test]
        fn wkv_is_convex_combination(seed in any::<u64>(), t in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k: Vec<f64> = (0..t).map(|_| rng.random_range(-20.0..20.0)).collect();
            let v: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w = rng.random_range(0.0..3.0);
            let u = rng.random_range(-3.0..3.0);
            let y = wkv_forward(&k, &v, &[w], &[u], 1, t, 1);
            for ti in 0..t {
                let lo = v[..=ti].iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v[..=ti].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(y[ti] >= lo - 1e-12 && y[ti] <= hi + 1e-12);
            }
        }
    }

    fn zero_all(store: &mut ParamStore, pat: &str) {
        for (name, t) in store.params_mut() {
            if name.ends_with(pat) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    #[test]
    fn time_mixing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let tm = TimeMixing::new(&mut store, "tm", 3, 3, &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 4, 3], 1.0, &mut rng);

        let mut zeroed = store.clone();
        for m in ["wr", "wk", "wv", "wo"] {
            zero_all(&mut zeroed, m);
        }
        let tape = Tape::new();
        let s = Session::eval(&tape, &zeroed);
        assert!(tm.forward(&s, tape.constant(x.clone())).unwrap().value().data().iter().all(|&v| v == 0.0));

        // T = 1, W_o = I, W_r = 0: output = σ(0)·v₁
        let mut st = store.clone();
        *st.get_mut("tm.wo").unwrap() = Tensor::eye(3);
        zero_all(&mut st, "wr");
        let x1 = Tensor::uniform(&[1, 1, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &st);
        let y = tm.forward(&s, tape.constant(x1.clone())).unwrap().value();
        let xm = x1.map(|v| v * 0.5); // λ = σ(0), zero predecessor
        let v1 = xm.matmul(st.get("tm.wv").unwrap()).unwrap();
        assert!(y.max_abs_diff(&v1.map(|v| 0.5 * v)) < 1e-14);
    }

    /// Step-by-step scalar evaluation of time mixing on one sequence.
    fn time_mixing_oracle(store: &ParamStore, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let g = |n: &str| store.get(&format!("tm.{}", n)).unwrap().clone();
        let (lam, wr, wk, wv, wo) = (g("mix"), g("wr"), g("wk"), g("wv"), g("wo"));
        let (decay, bonus) = (g("decay"), g("bonus"));
        let (din, dout) = (wr.shape()[0], wr.shape()[1]);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut ks = vec![];
        let mut vs = vec![];
        let mut out = vec![];
        for t in 0..x.len() {
            let xm: Vec<f64> = (0..din)
                .map(|i| {
                    let l = sig(lam.data()[i]);
                    let prev = if t == 0 { 0.0 } else { x[t - 1][i] };
                    l * x[t][i] + (1.0 - l) * prev
                })
                .collect();
            let proj = |m: &Tensor, j: usize| (0..din).map(|i| xm[i] * m.at(&[i, j])).sum::<f64>();
            let r: Vec<f64> = (0..dout).map(|j| proj(&wr, j)).collect();
            ks.push((0..dout).map(|j| proj(&wk, j)).collect::<Vec<_>>());
            vs.push((0..dout).map(|j| proj(&wv, j)).collect::<Vec<_>>());
            let gated: Vec<f64> = (0..dout)
                .map(|j| {
                    let w = (1.0 + decay.data()[j].exp()).ln();
                    let kc: Vec<f64> = ks.iter().map(|k| k[j]).collect();
                    let vc: Vec<f64> = vs.iter().map(|v| v[j]).collect();
                    sig(r[j]) * wkv_oracle(&kc, &vc, w, bonus.data()[j])[t]
                })
                .collect();
            out.push((0..dout).map(|j| (0..dout).map(|i| gated[i] * wo.at(&[i, j])).sum()).collect());
        }
        out
    }

    #[test]
    fn time_mixing_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let tm = TimeMixing::new(&mut store, "tm", 3, 4, &mut rng).unwrap();
        for (_, t) in store.params_mut() {
            *t = Tensor::uniform(t.shape(), 1.0, &mut rng);
        }
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = tm.forward(&s, tape.constant(x.clone())).unwrap().value();
        let rows: Vec<Vec<f64>> = x.data().chunks(3).map(|c| c.to_vec()).collect();
        let oracle = time_mixing_oracle(&store, &rows);
        for (t, row) in oracle.iter().enumerate() {
            for (j, o) in row.iter().enumerate() {
                assert!(rel(y.at(&[t, j]), *o) < 1e-10 || (y.at(&[t, j]) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mixing_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let cm = ChannelMixing::new(&mut store, "cm", 3, 5, &mut rng).unwrap();
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let z = cm.forward(&s, tape.constant(Tensor::zeros(&[4, 3]))).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // negative key pre-activations contribute nothing
        let mut neg = store.clone();
        *neg.get_mut("cm.wk").unwrap() = Tensor::full(&[3, 5], -1.0);
        let tape = Tape::new();
        let s = Session::eval(&tape, &neg);
        let y = cm.forward(&s, tape.constant(Tensor::ones(&[2, 3]))).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = cm.forward(&s, tape.constant(x.clone())).unwrap().value();
        let g = |n: &str| store.get(&format!("cm.{}", n)).unwrap().clone();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        for t in 0..5 {
            let xm: Vec<f64> = (0..3)
                .map(|i| 0.5 * x.at(&[t, i]) + 0.5 * if t == 0 { 0.0 } else { x.at(&[t - 1, i]) })
                .collect();
            let hidden: Vec<f64> = (0..5)
                .map(|h| (0..3).map(|i| xm[i] * g("wk").at(&[i, h])).sum::<f64>().max(0.0).powi(2))
                .collect();
            for j in 0..3 {
                let r = sig((0..3).map(|i| xm[i] * g("wr").at(&[i, j])).sum());
                let kv: f64 = (0..5).map(|h| hidden[h] * g("wv").at(&[h, j])).sum();
                assert!((y.at(&[t, j]) - r * kv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rwkv_block_identity_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let block = RwkvBlock::new(&mut store, "b", 4, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 5, 4], 1.0, &mut rng);

        let mut zeroed = store.clone();
        zero_all(&mut zeroed, "time.wo");
        zero_all(&mut zeroed, "channel.wv");
        let tape = Tape::new();
        let s = Session::eval(&tape, &zeroed);
        let y = block.forward(&s, tape.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x);

        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        assert_eq!(block.forward(&s, tape.constant(x.clone())).unwrap().shape(), vec![2, 5, 4]);

        let r = gradcheck::check(
            |tape, v| {
                let s = Session::eval(tape, &store);
                block.forward(&s, v[0])?.square()?.sum_all()
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
        let r = check_params(&store, |s| block.forward(s, s.constant(x.clone()))?.square()?.sum_all(), 1e-5, 6).unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn cfe_requires_two_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        assert!(matches!(
            CfeBlock::new(&mut store, "c", &[1], 4, false, &mut rng),
            Err(Error::CfeNeedsModalities)
        ));
    }

    #[test]
    fn cfe_two_modality_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParamStore::new();
        let cfe = CfeBlock::new(&mut store, "c", &[2, 2], 3, false, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let keys = cfe.cross_keys(&s, tape.constant(x.clone())).unwrap();
        let xm = token_shift(tape.constant(x), tape.constant(Tensor::full(&[4], 0.5))).unwrap();
        let x2 = xm.slice(1, 2, 2).unwrap();
        let expect = x2.matmul(s.p("c.m1.wk").unwrap()).unwrap().value();
        assert!(keys[0].value().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn cfe_zero_keys_give_decay_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::new();
        let cfe = CfeBlock::new(&mut store, "c", &[1, 1, 1], 2, false, &mut rng).unwrap();
        zero_all(&mut store, "wk");
        for i in 0..3 {
            *store.get_mut(&format!("c.m{}.wr", i)).unwrap() = Tensor::full(&[1, 2], 0.0);
            *store.get_mut(&format!("c.m{}.wo", i)).unwrap() = Tensor::eye(2);
        }
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let y = cfe.forward(&s, tape.constant(x.clone())).unwrap().value();
        let w: Vec<f64> = store.get("c.decay").unwrap().data().iter().map(|d| (1.0 + d.exp()).ln()).collect();
        let u = store.get("c.bonus").unwrap().data().to_vec();
        for i in 0..3 {
            let wv = store.get(&format!("c.m{}.wv", i)).unwrap().clone();
            for j in 0..2 {
                let v: Vec<f64> = (0..6)
                    .map(|t| 0.5 * (x.at(&[t, i]) + if t > 0 { x.at(&[t - 1, i]) } else { 0.0 }) * wv.at(&[0, j]))
                    .collect();
                for t in 0..6 {
                    let mut num = (u[j]).exp() * v[t];
                    let mut den = u[j].exp();
                    for p in 0..t {
                        let c = (-((t - 1 - p) as f64) * w[j]).exp();
                        num += c * v[p];
                        den += c;
                    }
                    assert!((y.at(&[t, i * 2 + j]) - 0.5 * num / den).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cfe_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let widths = [1usize, 2, 1];
        let d = 3;
        for shared in [false, true] {
            let widths: &[usize] = if shared { &[2, 2, 2] } else { &widths };
            let mut store = ParamStore::new();
            let cfe = CfeBlock::new(&mut store, "c", widths, d, shared, &mut rng).unwrap();
            for (_, t) in store.params_mut() {
                *t = Tensor::uniform(t.shape(), 1.0, &mut rng);
            }
            let total: usize = widths.iter().sum();
            let t_len = 5;
            let x = Tensor::uniform(&[t_len, total], 1.0, &mut rng);
            let tape = Tape::new();
            let s = Session::eval(&tape, &store);
            let y = cfe.forward(&s, tape.constant(x.clone())).unwrap().value();

            let g = |n: String| store.get(&n).unwrap().clone();
            let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
            let lam: Vec<f64> = g("c.mix".into()).data().iter().map(|v| sig(*v)).collect();
            let xm: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    (0..total)
                        .map(|i| lam[i] * x.at(&[t, i]) + (1.0 - lam[i]) * if t > 0 { x.at(&[t - 1, i]) } else { 0.0 })
                        .collect()
                })
                .collect();
            let offs: Vec<usize> = widths.iter().scan(0, |o, w| {
                let r = *o;
                *o += w;
                Some(r)
            }).collect();
            let proj = |t: usize, src: usize, m: &Tensor, j: usize| -> f64 {
                (0..widths[src]).map(|a| xm[t][offs[src] + a] * m.at(&[a, j])).sum()
            };
            let w: Vec<f64> = g("c.decay".into()).data().iter().map(|d| (1.0 + d.exp()).ln()).collect();
            let u = g("c.bonus".into()).data().to_vec();
            for i in 0..3 {
                let (wr, wv, wo) = (g(format!("c.m{}.wr", i)), g(format!("c.m{}.wv", i)), g(format!("c.m{}.wo", i)));
                for t in 0..t_len {
                    let mut gated = vec![0.0; d];
                    for j in 0..d {
                        let kc: Vec<f64> = (0..=t)
                            .map(|tt| {
                                let mut acc = 0.0;
                                for other in 0..3 {
                                    if other == i {
                                        continue;
                                    }
                                    let wk = g(format!("c.m{}.wk", other));
                                    acc += proj(tt, if shared { i } else { other }, &wk, j);
                                }
                                acc / 2.0
                            })
                            .collect();
                        let vc: Vec<f64> = (0..=t).map(|tt| proj(tt, i, &wv, j)).collect();
                        gated[j] = sig(proj(t, i, &wr, j)) * wkv_oracle(&kc, &vc, w[j], u[j])[t];
                    }
                    for j in 0..d {
                        let o: f64 = (0..d).map(|a| gated[a] * wo.at(&[a, j])).sum();
                        assert!((y.at(&[t, i * d + j]) - o).abs() < 1e-10, "shared={}", shared);
                    }
                }
            }
        }
    }

    #[test]
    fn cfe_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let cfe = CfeBlock::new(&mut store, "c", &[1, 1], 4, false, &mut rng).unwrap();
        // [B=1, N=2, W=8, M=2]
        let x = Tensor::uniform(&[1, 2, 8, 2], 1.0, &mut rng);
        let wt = Tensor::uniform(&[1, 2, 8, 8], 1.0, &mut rng);
        let r = gradcheck::check(
            |tape, v| {
                let s = Session::eval(tape, &store);
                cfe.forward(&s, v[0])?.mul(tape.constant(wt.clone()))?.sum_all()
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{:?}", r);
        let r = check_params(&store, |s| cfe.forward(s, s.constant(x.clone()))?.mul(s.constant(wt.clone()))?.sum_all(), 1e-5, usize::MAX).unwrap();
        assert!(r.max_rel_err < 1e-4, "{:?}", r);
    }
}
