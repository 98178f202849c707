//! Raw series to model-ready samples: frequency-domain Gaussian smoothing,
//! stride-k decimation, sliding windows and z-score normalization.
//!
//! Multi-channel series are `[N, T, M]` tensors (node, time, modality);
//! windows keep that layout as `[N, W, M]` and stack into `[B, N, W, M]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{fft, ifft_real, ComplexSeries};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstantChannelPolicy {
    /// Refuse to normalize a channel with zero spread.
    #[default]
    Error,
    /// Emit zeros for it.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Gaussian cutoff in cycles/sample; `None` disables smoothing.
    pub gaussian_sigma: Option<f64>,
    pub decimation_k: usize,
    pub window: usize,
    pub stride: usize,
    pub constant_channels: ConstantChannelPolicy,
    /// Smooth the test split too (by default only training data is filtered).
    pub filter_test: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: Some(0.1),
            decimation_k: 1,
            window: 200,
            stride: 150,
            constant_channels: ConstantChannelPolicy::Error,
            filter_test: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.gaussian_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("gaussian_sigma must be > 0, got {}", s)));
            }
        }
        if self.decimation_k == 0 {
            return Err(Error::InvalidArgument("decimation_k must be ≥ 1".into()));
        }
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!("window must be ≥ 2, got {}", self.window)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Multiplies the spectrum by `exp(-f²/2σ²)` with `f` the normalized
/// frequency of each bin (negative bins mirrored), then inverts.
pub fn gaussian_lowpass(x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma must be > 0, got {}", sigma)));
    }
    let t = x.len();
    if t < 2 {
        return Err(Error::InvalidArgument("gaussian_lowpass needs at least 2 samples".into()));
    }
    let mut spec = fft(&ComplexSeries::from_real(x));
    let denom = 2.0 * sigma * sigma;
    for k in 1..t {
        let f = k.min(t - k) as f64 / t as f64;
        let g = (-f * f / denom).exp();
        spec.re[k] *= g;
        spec.im[k] *= g;
    }
    Ok(ifft_real(&spec))
}

/// Splits `[N, kW, M]` into `k` phase subsamples; subsample `i` holds time
/// indices `i, i+k, i+2k, …`.
pub fn decimate(x: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let (n, t, m) = dims3("decimate", x)?;
    if k == 0 || t % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "time extent {} is not divisible by k={}",
            t, k
        )));
    }
    let w = t / k;
    let src = x.data();
    Ok((0..k)
        .map(|phase| {
            let mut out = Tensor::zeros(&[n, w, m]);
            let dst = out.data_mut();
            for ni in 0..n {
                for j in 0..w {
                    let from = (ni * t + phase + j * k) * m;
                    let to = (ni * w + j) * m;
                    dst[to..to + m].copy_from_slice(&src[from..from + m]);
                }
            }
            out
        })
        .collect())
}

/// Inverse of [`decimate`].
pub fn interleave(subs: &[Tensor]) -> Result<Tensor> {
    let k = subs.len();
    let first = subs
        .first()
        .ok_or_else(|| Error::InvalidArgument("interleave of zero subsamples".into()))?;
    let (n, w, m) = dims3("interleave", first)?;
    if subs.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::InvalidArgument("subsamples differ in shape".into()));
    }
    let t = w * k;
    let mut out = Tensor::zeros(&[n, t, m]);
    let dst = out.data_mut();
    for (phase, s) in subs.iter().enumerate() {
        let src = s.data();
        for ni in 0..n {
            for j in 0..w {
                let to = (ni * t + phase + j * k) * m;
                let from = (ni * w + j) * m;
                dst[to..to + m].copy_from_slice(&src[from..from + m]);
            }
        }
    }
    Ok(out)
}

/// Start offsets `0, L, 2L, …` of every full window; a short tail is dropped.
pub fn window_starts(t: usize, w: usize, l: usize) -> Result<Vec<usize>> {
    if w == 0 || l == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if t < w {
        return Err(Error::InvalidArgument(format!("series length {} is shorter than window {}", t, w)));
    }
    Ok((0..=(t - w) / l).map(|i| i * l).collect())
}

/// Cuts `[N, T, M]` into `[N, W, M]` windows at [`window_starts`].
pub fn make_windows(x: &Tensor, w: usize, l: usize) -> Result<Vec<Tensor>> {
    let (n, t, m) = dims3("make_windows", x)?;
    let src = x.data();
    Ok(window_starts(t, w, l)?
        .into_iter()
        .map(|start| {
            let mut out = Tensor::zeros(&[n, w, m]);
            let dst = out.data_mut();
            for ni in 0..n {
                let from = (ni * t + start) * m;
                dst[ni * w * m..(ni + 1) * w * m].copy_from_slice(&src[from..from + w * m]);
            }
            out
        })
        .collect())
}

/// Stacks equally shaped samples along a new leading batch axis.
pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack of zero samples".into()))?;
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn zscore(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("zscore needs at least 2 samples".into()));
    }
    let (mean, std) = mean_std(x);
    if std == 0.0 {
        return Err(Error::ConstantChannel);
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// Per-(node, modality) statistics fitted on one split and reusable on another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub nodes: usize,
    pub modalities: usize,
    pub mean: Vec<f64>,
    /// Zero marks a constant channel.
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(x: &Tensor, policy: ConstantChannelPolicy) -> Result<Self> {
        let (n, t, m) = dims3("zscore", x)?;
        if t < 2 {
            return Err(Error::InvalidArgument("zscore needs at least 2 samples".into()));
        }
        let mut mean = Vec::with_capacity(n * m);
        let mut std = Vec::with_capacity(n * m);
        for (ni, channel) in channels(x).enumerate() {
            let (mu, sd) = mean_std(&channel);
            if sd == 0.0 && policy == ConstantChannelPolicy::Error {
                log::warn!("node {} modality {} is constant", ni / m, ni % m);
                return Err(Error::ConstantChannel);
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self {
            nodes: n,
            modalities: m,
            mean,
            std,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, m) = dims3("zscore", x)?;
        if (n, m) != (self.nodes, self.modalities) {
            return Err(Error::InvalidArgument(format!(
                "stats fitted on {}x{} channels, applied to {}x{}",
                self.nodes, self.modalities, n, m
            )));
        }
        let mut out = x.clone();
        let d = out.data_mut();
        for ni in 0..n {
            for ti in 0..t {
                for mi in 0..m {
                    let c = ni * m + mi;
                    let i = (ni * t + ti) * m + mi;
                    d[i] = if self.std[c] == 0.0 { 0.0 } else { (d[i] - self.mean[c]) / self.std[c] };
                }
            }
        }
        Ok(out)
    }
}

/// Applies a series transform to every `(node, modality)` channel of `[N, T, M]`.
pub fn map_channels(x: &Tensor, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Tensor> {
    let (n, t, m) = dims3("map_channels", x)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for (c, channel) in channels(x).enumerate() {
        let y = f(&channel)?;
        let (ni, mi) = (c / m, c % m);
        for (ti, v) in y.into_iter().enumerate() {
            d[(ni * t + ti) * m + mi] = v;
        }
    }
    debug_assert_eq!(out.numel(), n * t * m);
    Ok(out)
}

/// Channel series of `[N, T, M]` in `(node, modality)` order.
pub fn channels(x: &Tensor) -> impl Iterator<Item = Vec<f64>> + '_ {
    let s = x.shape();
    let (n, t, m) = (s[0], s[1], s[2]);
    let d = x.data();
    (0..n * m).map(move |c| {
        let (ni, mi) = (c / m, c % m);
        (0..t).map(|ti| d[(ni * t + ti) * m + mi]).collect()
    })
}

fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, t, m] => Ok((n, t, m)),
        ref s => Err(Error::InvalidShape {
            op,
            detail: format!("expected [N,T,M], got {:?}", s),
        }),
    }
}
