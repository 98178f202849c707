//! Discrete Fourier transforms and amplitude/phase decomposition.
//!
//! `dft` uses an iterative radix-2 FFT for power-of-two lengths and the
//! direct O(T²) sum otherwise. [`fft`] additionally covers arbitrary lengths
//! through Bluestein's chirp-z reduction and is used for long preprocessing
//! transforms.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Residue above which a validating inverse transform refuses the result.
pub const MAX_IMAGINARY_RESIDUE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSeries {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSeries {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::InvalidArgument(format!(
                "real/imaginary length mismatch: {} vs {}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_real(x: &[f64]) -> Self {
        Self {
            re: x.to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn conj(&self) -> Self {
        Self {
            re: self.re.clone(),
            im: self.im.iter().map(|x| -x).collect(),
        }
    }
}

/// Forward transform `f(k) = Σ_t x(t) e^{-2πi tk/T}`.
pub fn dft(x: &[f64]) -> ComplexSeries {
    if x.len().is_power_of_two() {
        let mut c = ComplexSeries::from_real(x);
        fft_radix2_in_place(&mut c, false);
        c
    } else {
        dft_direct(&ComplexSeries::from_real(x), false)
    }
}

/// Direct summation; `inverse` flips the exponent sign (no 1/T scaling).
pub fn dft_direct(x: &ComplexSeries, inverse: bool) -> ComplexSeries {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = ComplexSeries::zeros(n);
    for k in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for t in 0..n {
            // reduce tk mod n first so the angle stays small
            let ang = sign * 2.0 * PI * ((t * k) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            re += x.re[t] * c - x.im[t] * s;
            im += x.re[t] * s + x.im[t] * c;
        }
        out.re[k] = re;
        out.im[k] = im;
    }
    out
}

/// Forward FFT of any length (radix-2 directly, otherwise Bluestein).
pub fn fft(x: &ComplexSeries) -> ComplexSeries {
    transform(x, false)
}

fn transform(x: &ComplexSeries, inverse: bool) -> ComplexSeries {
    let n = x.len();
    if n <= 1 {
        return x.clone();
    }
    if n.is_power_of_two() {
        let mut c = x.clone();
        fft_radix2_in_place(&mut c, inverse);
        c
    } else {
        bluestein(x, inverse)
    }
}

/// Iterative Cooley-Tukey, decimation in time. Length must be a power of two.
pub fn fft_radix2_in_place(x: &mut ComplexSeries, inverse: bool) {
    let n = x.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {}", n);
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            x.re.swap(i, j);
            x.im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let (s, c) = (sign * 2.0 * PI * k as f64 / len as f64).sin_cos();
            let mut start = 0;
            while start < n {
                let (a, b) = (start + k, start + k + half);
                let tr = x.re[b] * c - x.im[b] * s;
                let ti = x.re[b] * s + x.im[b] * c;
                x.re[b] = x.re[a] - tr;
                x.im[b] = x.im[a] - ti;
                x.re[a] += tr;
                x.im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

fn bluestein(x: &ComplexSeries, inverse: bool) -> ComplexSeries {
    let n = x.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp w_k = e^{sign·iπk²/n}; k² reduced mod 2n keeps the angle exact
    let chirp: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let k2 = (k * k) % (2 * n);
            let (s, c) = (sign * PI * k2 as f64 / n as f64).sin_cos();
            (c, s)
        })
        .collect();
    let mut a = ComplexSeries::zeros(m);
    for k in 0..n {
        let (c, s) = chirp[k];
        a.re[k] = x.re[k] * c - x.im[k] * s;
        a.im[k] = x.re[k] * s + x.im[k] * c;
    }
    let mut b = ComplexSeries::zeros(m);
    for k in 0..n {
        let (c, s) = chirp[k];
        b.re[k] = c;
        b.im[k] = -s;
        if k > 0 {
            b.re[m - k] = c;
            b.im[m - k] = -s;
        }
    }
    fft_radix2_in_place(&mut a, false);
    fft_radix2_in_place(&mut b, false);
    for i in 0..m {
        let re = a.re[i] * b.re[i] - a.im[i] * b.im[i];
        let im = a.re[i] * b.im[i] + a.im[i] * b.re[i];
        a.re[i] = re;
        a.im[i] = im;
    }
    fft_radix2_in_place(&mut a, true);
    let scale = 1.0 / m as f64;
    let mut out = ComplexSeries::zeros(n);
    for k in 0..n {
        let (c, s) = chirp[k];
        let (re, im) = (a.re[k] * scale, a.im[k] * scale);
        out.re[k] = re * c - im * s;
        out.im[k] = re * s + im * c;
    }
    out
}

/// Inverse transform `(1/T) Σ_k f(k) e^{+2πi tk/T}`, keeping the real part.
///
/// With `validate`, an imaginary residue of [`MAX_IMAGINARY_RESIDUE`] or more
/// is an error; otherwise it is silently dropped.
pub fn idft(f: &ComplexSeries, validate: bool) -> Result<Vec<f64>> {
    let n = f.len();
    if n == 0 {
        return Err(Error::InvalidArgument("idft of empty series".into()));
    }
    let full = if n.is_power_of_two() {
        transform(f, true)
    } else {
        dft_direct(f, true)
    };
    let scale = 1.0 / n as f64;
    let residue = full.im.iter().map(|x| (x * scale).abs()).fold(0.0, f64::max);
    if validate && residue >= MAX_IMAGINARY_RESIDUE {
        return Err(Error::NonRealReconstruction(residue));
    }
    Ok(full.re.iter().map(|x| x * scale).collect())
}

/// Inverse FFT for any length, real part only.
pub fn ifft_real(f: &ComplexSeries) -> Vec<f64> {
    let n = f.len() as f64;
    // ifft(f) = conj(fft(conj(f))) / n
    let g = fft(&f.conj());
    g.re.iter().map(|x| x / n).collect()
}

/// Amplitude `√(m²+n²)` and quadrant-correct phase `atan2(n, m)`.
pub fn amp_phase(f: &ComplexSeries) -> (Vec<f64>, Vec<f64>) {
    f.re
        .iter()
        .zip(&f.im)
        .map(|(&m, &n)| {
            let a = m.hypot(n);
            let p = if a == 0.0 { 0.0 } else { n.atan2(m) };
            (a, p)
        })
        .unzip()
}

pub fn recompose(amplitude: &[f64], phase: &[f64]) -> Result<ComplexSeries> {
    if amplitude.len() != phase.len() {
        return Err(Error::InvalidArgument("amplitude/phase length mismatch".into()));
    }
    if let Some(a) = amplitude.iter().find(|&&a| a < 0.0) {
        return Err(Error::Domain {
            op: "recompose",
            detail: format!("negative amplitude {}", a),
        });
    }
    let (re, im) = amplitude.iter().zip(phase).map(|(&a, &p)| (a * p.cos(), a * p.sin())).unzip();
    Ok(ComplexSeries { re, im })
}

/// `[B,N,W,M]` time windows to `[B,N,2W,M]`: per channel, the amplitude
/// spectrum followed by the phase spectrum along the time axis.
pub fn freq_matrix(x_time: &Tensor) -> Result<Tensor> {
    let &[b, n, w, m] = x_time.shape() else {
        return Err(Error::InvalidShape {
            op: "freq_matrix",
            detail: format!("expected [B,N,W,M], got {:?}", x_time.shape()),
        });
    };
    let basis = DftBasis::new(w);
    let mut out = Tensor::zeros(&[b, n, 2 * w, m]);
    let src = x_time.data();
    let dst = out.data_mut();
    let mut series = vec![0.0; w];
    for bi in 0..b {
        for ni in 0..n {
            let base_in = (bi * n + ni) * w * m;
            let base_out = (bi * n + ni) * 2 * w * m;
            for mi in 0..m {
                for t in 0..w {
                    series[t] = src[base_in + t * m + mi];
                }
                let spec = basis.forward(&series);
                let (amp, phase) = amp_phase(&spec);
                for k in 0..w {
                    dst[base_out + k * m + mi] = amp[k];
                    dst[base_out + (w + k) * m + mi] = phase[k];
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed cos/sin tables for a fixed transform length, used both for
/// batched forward transforms and as the in-graph inverse operator.
#[derive(Clone, Debug)]
pub struct DftBasis {
    n: usize,
    /// `cos(2π kt/n)` as an `[n, n]` matrix (symmetric in k, t).
    cos: Tensor,
    sin: Tensor,
}

impl DftBasis {
    pub fn new(n: usize) -> Self {
        let mut cos = vec![0.0; n * n];
        let mut sin = vec![0.0; n * n];
        for k in 0..n {
            for t in 0..n {
                let ang = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                cos[k * n + t] = ang.cos();
                sin[k * n + t] = ang.sin();
            }
        }
        Self {
            n,
            cos: Tensor::from_parts(vec![n, n], cos),
            sin: Tensor::from_parts(vec![n, n], sin),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, x: &[f64]) -> ComplexSeries {
        let n = self.n;
        let mut out = ComplexSeries::zeros(n);
        let (c, s) = (self.cos.data(), self.sin.data());
        for k in 0..n {
            let row = k * n;
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..n {
                re += x[t] * c[row + t];
                im -= x[t] * s[row + t];
            }
            out.re[k] = re;
            out.im[k] = im;
        }
        out
    }

    /// Real part of the inverse transform as a differentiable linear map.
    ///
    /// `re` and `im` carry frequency bins on their last axis; the result
    /// carries time steps there. The operator is fixed, so its gradient is
    /// its transpose.
    pub fn inverse_real<'t>(&self, re: Var<'t>, im: Var<'t>) -> Result<Var<'t>> {
        let tape = re.tape();
        let c = tape.constant(self.cos.clone());
        let s = tape.constant(self.sin.clone());
        re.matmul(c)?.sub(im.matmul(s)?)?.mul_scalar(1.0 / self.n as f64)
    }
}
