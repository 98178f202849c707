//! Reconstruction losses, the softmax-weighted objective, per-element
//! anomaly scores and thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Output;
use crate::nn::{ParamStore, Session};
use crate::spectral::DftBasis;
use crate::tensor::{Tensor, Var};

pub const LOSS_LOGITS: &str = "loss.logits";

/// Registers the three loss-weight logits (initially equal).
pub fn add_loss_weights(store: &mut ParamStore) -> Result<()> {
    store.add(LOSS_LOGITS, Tensor::zeros(&[3]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Elementwise squared errors of one forward pass, still on the tape.
///
/// `time` and `inverse` are `[B, N, W, M]`; `freq` is `[B, N, 2W, M]`.
pub struct Errors<'t> {
    pub time: Option<Var<'t>>,
    pub freq: Option<Var<'t>>,
    pub inverse: Option<Var<'t>>,
}

impl<'t> Errors<'t> {
    pub fn active(&self) -> [bool; 3] {
        [self.time.is_some(), self.freq.is_some(), self.inverse.is_some()]
    }

    pub fn losses(&self) -> Result<[Option<Var<'t>>; 3]> {
        let mean = |e: &Option<Var<'t>>| e.map(|v| v.mean_all()).transpose();
        Ok([mean(&self.time)?, mean(&self.freq)?, mean(&self.inverse)?])
    }

    pub fn triple(&self) -> Result<LossTriple> {
        let [a, b, c] = self.losses()?;
        let val = |v: Option<Var<'t>>| v.map_or(0.0, |v| v.value().item());
        Ok(LossTriple {
            l1: val(a),
            l2: val(b),
            l3: val(c),
        })
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Time signal implied by an amplitude‖phase matrix `[B, N, 2W, M]`.
///
/// Negative predicted amplitudes are recomposed as given and only the real
/// part of the inverse transform is kept.
pub fn inverse_freq<'t>(freq: Var<'t>, basis: &DftBasis, amplitude_scale: f64) -> Result<Var<'t>> {
    let sh = freq.shape();
    let w = basis.len();
    if sh.len() != 4 || sh[2] != 2 * w {
        return Err(Error::InvalidShape {
            op: "inverse_freq",
            detail: format!("expected [B,N,{},M], got {:?}", 2 * w, sh),
        });
    }
    let mut amp = freq.slice(2, 0, w)?.permute(&[0, 1, 3, 2])?;
    if amplitude_scale != 1.0 {
        amp = amp.mul_scalar(amplitude_scale)?;
    }
    let phase = freq.slice(2, w, w)?.permute(&[0, 1, 3, 2])?;
    let re = amp.mul(phase.cos()?)?;
    let im = amp.mul(phase.sin()?)?;
    basis.inverse_real(re, im)?.permute(&[0, 1, 3, 2])
}

/// Squared errors of both reconstructions against the input batch.
pub fn recon_errors<'t>(s: &Session<'t>, out: &Output<'t>, x: &Tensor, basis: &DftBasis) -> Result<Errors<'t>> {
    let xt = s.constant(x.clone());
    let time = match out.time {
        Some(rec) => {
            check_same("recon_errors", &rec.shape(), x.shape())?;
            Some(rec.sub(xt)?.square()?)
        }
        None => None,
    };
    let (freq, inverse) = match out.freq {
        Some(rec) => {
            check_same("recon_errors", &rec.shape(), out.freq_input.shape())?;
            let f = rec.sub(s.constant(out.freq_input.clone()))?.square()?;
            let inv = inverse_freq(rec, basis, out.amplitude_scale)?.sub(xt)?.square()?;
            (Some(f), Some(inv))
        }
        None => (None, None),
    };
    Ok(Errors { time, freq, inverse })
}

/// Softmax over the logits of the active losses; inactive entries get 0.
pub fn alphas(logits: &[f64], active: [bool; 3]) -> [f64; 3] {
    let max = (0..3).filter(|&i| active[i]).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 3];
    for i in 0..3 {
        if active[i] {
            out[i] = (logits[i] - max).exp();
        }
    }
    let z: f64 = out.iter().sum();
    out.map(|a| if z > 0.0 { a / z } else { 0.0 })
}

/// `Σ αᵢ ℒᵢ` with `α = softmax(logits)` over the losses that are present.
pub fn total_score<'t>(losses: &[Option<Var<'t>>; 3], logits: Var<'t>) -> Result<Var<'t>> {
    let idx: Vec<usize> = (0..3).filter(|&i| losses[i].is_some()).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no active loss".into()));
    }
    let parts: Vec<Var<'t>> = idx.iter().map(|&i| logits.slice(0, i, 1)).collect::<Result<_>>()?;
    let weights = Var::concat(&parts, 0)?.softmax(0)?;
    let stacked: Vec<Var<'t>> = idx.iter().map(|&i| losses[i].unwrap().reshape(&[1])).collect::<Result<_>>()?;
    weights.mul(Var::concat(&stacked, 0)?)?.sum_all()
}

/// Per-(sample, node, timestep, modality) score `[B, N, W, M]`.
///
/// Frequency-pair errors carry no time position; each channel's mean over
/// the 2W bins is added at every timestep of its window. The mean of the map
/// equals the weighted total loss.
pub fn score_map(errors: &Errors<'_>, alpha: [f64; 3]) -> Result<Tensor> {
    let shape = match (errors.time, errors.inverse) {
        (Some(v), _) | (None, Some(v)) => v.shape(),
        (None, None) => return Err(Error::InvalidArgument("no active loss".into())),
    };
    let (b, n, w, m) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for (e, a) in [(errors.time, alpha[0]), (errors.inverse, alpha[2])] {
        if let Some(e) = e {
            for (d, v) in dst.iter_mut().zip(e.value().data()) {
                *d += a * v;
            }
        }
    }
    if let Some(f) = errors.freq {
        let fv = f.value();
        let src = fv.data();
        for bn in 0..b * n {
            for mi in 0..m {
                let mean = (0..2 * w).map(|k| src[(bn * 2 * w + k) * m + mi]).sum::<f64>() / (2 * w) as f64;
                for t in 0..w {
                    dst[(bn * w + t) * m + mi] += alpha[1] * mean;
                }
            }
        }
    }
    Ok(out)
}

/// Per-tick scores over a whole series `[N, T, M]`; ticks no window covers
/// are marked in `covered`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace {
    pub scores: Tensor,
    pub covered: Vec<bool>,
}

/// Merges per-window maps `[N, W, M]` starting at `starts` by elementwise max.
pub fn aggregate_windows(maps: &[Tensor], starts: &[usize], t: usize) -> Result<ScoreTrace> {
    if maps.len() != starts.len() || maps.is_empty() {
        return Err(Error::InvalidArgument("need one start per window map".into()));
    }
    let sh = maps[0].shape().to_vec();
    let (n, w, m) = (sh[0], sh[1], sh[2]);
    let mut scores = Tensor::full(&[n, t, m], f64::NEG_INFINITY);
    let mut covered = vec![false; t];
    for (map, &s0) in maps.iter().zip(starts) {
        check_same("aggregate_windows", map.shape(), &sh)?;
        if s0 + w > t {
            return Err(Error::InvalidArgument(format!("window at {} overruns series of length {}", s0, t)));
        }
        covered[s0..s0 + w].iter_mut().for_each(|c| *c = true);
        let src = map.data();
        let dst = scores.data_mut();
        for ni in 0..n {
            for k in 0..w {
                for mi in 0..m {
                    let d = &mut dst[(ni * t + s0 + k) * m + mi];
                    *d = d.max(src[(ni * w + k) * m + mi]);
                }
            }
        }
    }
    for v in scores.data_mut() {
        if *v == f64::NEG_INFINITY {
            *v = 0.0;
        }
    }
    Ok(ScoreTrace { scores, covered })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ThresholdMethod {
    Percentile { p: f64 },
    MeanStd { k: f64 },
}

impl Default for ThresholdMethod {
    fn default() -> Self {
        Self::Percentile { p: 99.0 }
    }
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty input".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {} outside [0, 100]", p)));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

pub fn fit_threshold(scores: &[f64], method: ThresholdMethod) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a threshold on no scores".into()));
    }
    let tau = match method {
        ThresholdMethod::Percentile { p } => percentile(scores, p)?,
        ThresholdMethod::MeanStd { k } => {
            let (mean, std) = crate::preprocess::mean_std(scores);
            mean + k * std
        }
    };
    if !tau.is_finite() {
        return Err(Error::NonFinite("fit_threshold"));
    }
    Ok(tau)
}

/// 1 where the score strictly exceeds `tau`.
pub fn classify(scores: &[f64], tau: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > tau)).collect()
}
