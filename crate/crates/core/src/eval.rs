//! Pointwise detection metrics and the z-score baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::AnomalyKind;
use crate::error::{Error, Result};
use crate::preprocess::{ChannelStats, ConstantChannelPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Elementwise counts over the positions where `mask` is true (all if `None`).
pub fn confusion(pred: &[u8], truth: &[u8], mask: Option<&[bool]>) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match (pred[i] != 0, truth[i] != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1; each is 0 when its denominator is 0.
pub fn prf(c: &ConfusionCounts) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindRecall {
    pub labeled: u64,
    pub detected: u64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Recall per injected anomaly kind (false positives carry no kind).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_kind: BTreeMap<String, KindRecall>,
    #[serde(default)]
    pub config_digest: String,
}

pub fn metrics(c: ConfusionCounts) -> MetricsReport {
    let (precision, recall, f1) = prf(&c);
    MetricsReport {
        precision,
        recall,
        f1,
        counts: c,
        per_kind: BTreeMap::new(),
        config_digest: String::new(),
    }
}

/// Full report, with a per-kind breakdown when `kinds` is given.
pub fn evaluate(pred: &[u8], truth: &[u8], kinds: Option<&[u8]>, mask: Option<&[bool]>) -> Result<MetricsReport> {
    let mut report = metrics(confusion(pred, truth, mask)?);
    if let Some(kinds) = kinds {
        for kind in AnomalyKind::ALL {
            let (mut labeled, mut detected) = (0u64, 0u64);
            for i in 0..pred.len() {
                if kinds[i] == kind.code() && truth[i] != 0 && mask.is_none_or(|m| m[i]) {
                    labeled += 1;
                    detected += u64::from(pred[i] != 0);
                }
            }
            if labeled > 0 {
                report.per_kind.insert(
                    kind.name().to_owned(),
                    KindRecall {
                        labeled,
                        detected,
                        recall: detected as f64 / labeled as f64,
                    },
                );
            }
        }
    }
    Ok(report)
}

/// Threshold with the highest F1 when labelling `score > τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub threshold: f64,
    pub report: MetricsReport,
}

pub fn best_threshold(scores: &[f64], truth: &[u8], mask: Option<&[bool]>) -> Result<Sweep> {
    let idx: Vec<usize> = (0..scores.len()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no scores to sweep".into()));
    }
    let mut order = idx.clone();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = idx.iter().filter(|&&i| truth[i] != 0).count() as u64;
    let total = idx.len() as u64;
    let lowest = scores[*order.last().unwrap()];
    // labelling nothing
    let mut best = (0.0, scores[order[0]], 0u64, 0u64);
    let (mut tp, mut taken) = (0u64, 0u64);
    let mut j = 0;
    while j < order.len() {
        let s = scores[order[j]];
        while j < order.len() && scores[order[j]] == s {
            tp += u64::from(truth[order[j]] != 0);
            taken += 1;
            j += 1;
        }
        let tau = if j < order.len() { scores[order[j]] } else { lowest - 1.0 };
        let f1 = if positives + taken == 0 { 0.0 } else { 2.0 * tp as f64 / (positives + taken) as f64 };
        if f1 > best.0 {
            best = (f1, tau, tp, taken);
        }
    }
    let (_, tau, tp, taken) = best;
    let counts = ConfusionCounts {
        tp,
        fp: taken - tp,
        fn_: positives - tp,
        tn: total - taken - (positives - tp),
    };
    Ok(Sweep {
        threshold: tau,
        report: metrics(counts),
    })
}

/// `|z|` of every test element under the training split's channel statistics.
pub fn zscore_scores(train: &Tensor, test: &Tensor) -> Result<Vec<f64>> {
    let stats = ChannelStats::fit(train, ConstantChannelPolicy::Zero)?;
    Ok(stats.apply(test)?.data().iter().map(|v| v.abs()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let z = vec![0u8; 12];
        assert_eq!(confusion(&z, &z, None).unwrap().tn, 12);
        assert_eq!(confusion(&[1; 12], &z, None).unwrap().fp, 12);
        assert!(confusion(&[1; 3], &z, None).is_err());
        let mask = [true, false, true];
        let c = confusion(&[1, 1, 0], &[1, 0, 1], Some(&mask)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 0 });
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<u8> = (0..500).map(|_| rng.random_range(0..2)).collect();
        let truth: Vec<u8> = (0..500).map(|_| rng.random_range(0..2)).collect();
        let c = confusion(&pred, &truth, None).unwrap();
        let mut o = [0u64; 4];
        for i in 0..500 {
            o[usize::from(pred[i]) * 2 + usize::from(truth[i])] += 1;
        }
        assert_eq!((c.tn, c.fn_, c.fp, c.tp), (o[0], o[1], o[2], o[3]));
        assert_eq!(c.total(), 500);
    }

    #[test]
    fn metric_formulas() {
        let r = metrics(ConfusionCounts { tp: 9, fp: 1, fn_: 1, tn: 0 });
        assert!((r.precision - 0.9).abs() < 1e-15 && (r.recall - 0.9).abs() < 1e-15 && (r.f1 - 0.9).abs() < 1e-15);
        let r = metrics(ConfusionCounts::default());
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        // precision 9104/10000, recall 9104/9676 ≈ 0.9409
        let r = metrics(ConfusionCounts { tp: 9104, fp: 896, fn_: 572, tn: 0 });
        assert!((r.precision - 0.9104).abs() < 1e-12);
        assert!((r.recall - 0.9409).abs() < 5e-5);
        assert!((r.f1 - 0.9254).abs() < 1e-3);
    }

    #[test]
    fn per_kind_recall() {
        let p = AnomalyKind::Point.code();
        let c = AnomalyKind::Context.code();
        let r = evaluate(&[1, 0, 1, 1, 0], &[1, 1, 1, 0, 0], Some(&[p, p, c, 0, 0]), None).unwrap();
        assert_eq!(r.per_kind["point"], KindRecall { labeled: 2, detected: 1, recall: 0.5 });
        assert_eq!(r.per_kind["context"].recall, 1.0);
        assert!(!r.per_kind.contains_key("collective"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["counts"]["fn"], 1);
    }

    #[test]
    fn sweep_finds_separating_threshold() {
        let scores = [0.1, 0.9, 0.3, 0.8, 0.2];
        let truth = [0, 1, 0, 1, 0];
        let s = best_threshold(&scores, &truth, None).unwrap();
        assert_eq!(s.report.f1, 1.0);
        assert_eq!(s.threshold, 0.3);
        let pred: Vec<u8> = scores.iter().map(|&v| u8::from(v > s.threshold)).collect();
        assert_eq!(pred, truth);
    }

    #[test]
    fn zscore_baseline_flags_spikes() {
        let train = Tensor::new(vec![1, 4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let test = Tensor::new(vec![1, 3, 1], vec![0.5, 5.0, -1.0]).unwrap();
        assert_eq!(zscore_scores(&train, &test).unwrap(), vec![0.5, 5.0, 1.0]);
    }

    proptest! {
        #[test]
        fn self_comparison_has_full_recall(x in proptest::collection::vec(0u8..2, 1..60)) {
            let r = metrics(confusion(&x, &x, None).unwrap());
            if x.contains(&1) {
                prop_assert_eq!(r.recall, 1.0);
                prop_assert_eq!(r.f1, 1.0);
            }
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..200, fp in 0u64..200, fn_ in 0u64..200) {
            let r = metrics(ConfusionCounts { tp, fp, fn_, tn: 0 });
            prop_assert!(r.f1 <= 2.0 * r.precision.min(r.recall) + 1e-12);
            prop_assert!(r.f1 <= (r.precision * r.recall).sqrt() + 1e-12);
            if tp == 0 { prop_assert_eq!(r.f1, 0.0); }
        }

        #[test]
        fn sweep_beats_every_fixed_threshold(scores in proptest::collection::vec(0.0f64..1.0, 2..40), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            let best = best_threshold(&scores, &truth, None).unwrap();
            for &tau in &scores {
                let pred: Vec<u8> = scores.iter().map(|&v| u8::from(v > tau)).collect();
                let f = metrics(confusion(&pred, &truth, None).unwrap()).f1;
                prop_assert!(f <= best.report.f1 + 1e-12);
            }
            let pred: Vec<u8> = scores.iter().map(|&v| u8::from(v > best.threshold)).collect();
            prop_assert!((metrics(confusion(&pred, &truth, None).unwrap()).f1 - best.report.f1).abs() < 1e-12);
        }
    }
}
