//! Static sensor graph from joint time/frequency rank correlation and a
//! Top-K neighbour rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::channels;
use crate::spectral::{amp_phase, fft, ComplexSeries};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreqFeature {
    /// Amplitude spectrum only.
    #[default]
    Amplitude,
    /// Amplitude spectrum followed by the phase spectrum.
    AmplitudePhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub top_k: usize,
    pub freq_feature: FreqFeature,
    /// Score node pairs from time-domain correlation alone.
    pub time_only: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            freq_feature: FreqFeature::Amplitude,
            time_only: false,
        }
    }
}

/// Ranks `1..=T`; tied values share the mean of their positions.
pub fn rank(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            out[k] = r;
        }
        i = j;
    }
    out
}

/// Pearson correlation of the ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 samples".into()));
    }
    pearson(&rank(x), &rank(y))
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Frequency-domain view of `[N, T, M]` used for correlation: `[N, T, M]`
/// amplitudes or `[N, 2T, M]` amplitudes followed by phases.
pub fn freq_features(x: &Tensor, feature: FreqFeature) -> Result<Tensor> {
    let &[n, t, m] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "freq_features",
            detail: format!("expected [N,T,M], got {:?}", x.shape()),
        });
    };
    let f = match feature {
        FreqFeature::Amplitude => t,
        FreqFeature::AmplitudePhase => 2 * t,
    };
    let mut out = Tensor::zeros(&[n, f, m]);
    let d = out.data_mut();
    for (c, series) in channels(x).enumerate() {
        let (ni, mi) = (c / m, c % m);
        let (amp, phase) = amp_phase(&fft(&ComplexSeries::from_real(&series)));
        let values = amp.iter().chain(if f > t { phase.iter() } else { [].iter() });
        for (k, v) in values.enumerate() {
            d[(ni * f + k) * m + mi] = *v;
        }
    }
    Ok(out)
}

/// Joint correlation score matrix; the diagonal holds `-∞` so that a node
/// never selects itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationScores {
    pub n: usize,
    pub s: Vec<f64>,
}

impl CorrelationScores {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.s[a * self.n + b]
    }
}

/// `S[a,b] = (1/2M) Σ_m (ρ_time + ρ_freq)` over `[N, T, M]` time and
/// `[N, F, M]` frequency features. Undefined correlations count as 0.
pub fn joint_score(x_time: &Tensor, x_freq: &Tensor) -> Result<CorrelationScores> {
    let (&[n, _, m], &[nf, _, mf]) = (x_time.shape(), x_freq.shape()) else {
        return Err(Error::InvalidShape {
            op: "joint_score",
            detail: format!("expected rank-3 inputs, got {:?} and {:?}", x_time.shape(), x_freq.shape()),
        });
    };
    if (n, m) != (nf, mf) {
        return Err(Error::ShapeMismatch {
            op: "joint_score",
            lhs: x_time.shape().to_vec(),
            rhs: x_freq.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("joint_score needs at least 2 nodes".into()));
    }
    // rank once per channel, then Pearson on ranks
    let rt: Vec<Vec<f64>> = channels(x_time).map(|c| rank(&c)).collect();
    let rf: Vec<Vec<f64>> = channels(x_freq).map(|c| rank(&c)).collect();
    let rho = |r: &[Vec<f64>], a: usize, b: usize, mi: usize| pearson(&r[a * m + mi], &r[b * m + mi]).unwrap_or(0.0);
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        s[a * n + a] = f64::NEG_INFINITY;
        for b in a + 1..n {
            let total: f64 = (0..m).map(|mi| rho(&rt, a, b, mi) + rho(&rf, a, b, mi)).sum();
            let v = total / (2 * m) as f64;
            s[a * n + b] = v;
            s[b * n + a] = v;
        }
    }
    Ok(CorrelationScores { n, s })
}

/// Binary symmetric adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    pub n: usize,
    pub a: Vec<u8>,
}

impl Adjacency {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.a[i * self.n + j] != 0
    }

    pub fn degree(&self, i: usize) -> usize {
        self.a[i * self.n..(i + 1) * self.n].iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.a.iter().map(|&v| f64::from(v)).collect())
            .expect("adjacency has n*n entries")
    }
}

/// Row-wise selection of the `k` highest-scoring neighbours (lower index
/// wins ties), before symmetrization. Row-major `n × n` of 0/1.
pub fn topk_rows(s: &CorrelationScores, k: usize) -> Result<Vec<u8>> {
    let n = s.n;
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("top-k must lie in 1..={}, got {}", n - 1, k)));
    }
    let mut a = vec![0u8; n * n];
    for row in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != row).collect();
        cand.sort_by(|&x, &y| s.get(row, y).total_cmp(&s.get(row, x)).then(x.cmp(&y)));
        for &j in &cand[..k] {
            a[row * n + j] = 1;
        }
    }
    Ok(a)
}

/// [`topk_rows`] symmetrized with logical OR.
pub fn topk_adjacency(s: &CorrelationScores, k: usize) -> Result<Adjacency> {
    let n = s.n;
    let mut a = topk_rows(s, k)?;
    for i in 0..n {
        for j in 0..i {
            let e = a[i * n + j] | a[j * n + i];
            a[i * n + j] = e;
            a[j * n + i] = e;
        }
    }
    Ok(Adjacency { n, a })
}

/// `S[a,b] = (1/M) Σ_m ρ_time` over `[N, T, M]`.
pub fn time_score(x_time: &Tensor) -> Result<CorrelationScores> {
    let &[n, _, m] = x_time.shape() else {
        return Err(Error::InvalidShape {
            op: "time_score",
            detail: format!("expected [N,T,M], got {:?}", x_time.shape()),
        });
    };
    if n < 2 {
        return Err(Error::InvalidArgument("time_score needs at least 2 nodes".into()));
    }
    let rt: Vec<Vec<f64>> = channels(x_time).map(|c| rank(&c)).collect();
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        s[a * n + a] = f64::NEG_INFINITY;
        for b in a + 1..n {
            let total: f64 = (0..m).map(|mi| pearson(&rt[a * m + mi], &rt[b * m + mi]).unwrap_or(0.0)).sum();
            s[a * n + b] = total / m as f64;
            s[b * n + a] = total / m as f64;
        }
    }
    Ok(CorrelationScores { n, s })
}

/// Builds the adjacency from a training split `[N, T, M]`.
pub fn learn_graph(train: &Tensor, cfg: &GraphConfig) -> Result<(CorrelationScores, Adjacency)> {
    let scores = if cfg.time_only {
        time_score(train)?
    } else {
        joint_score(train, &freq_features(train, cfg.freq_feature)?)?
    };
    let adj = topk_adjacency(&scores, cfg.top_k)?;
    Ok((scores, adj))
}

pub fn write_adjacency_csv(path: &Path, adj: &Adjacency) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in adj.a.chunks(adj.n) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores_csv(path: &Path, s: &CorrelationScores) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in s.s.chunks(s.n) {
        w.write_record(row.iter().map(|v| if v.is_finite() { format!("{}", v) } else { "nan".to_owned() }))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a 0/1 adjacency CSV back.
pub fn read_adjacency_csv(path: &Path) -> Result<Adjacency> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut a = Vec::new();
    let mut n = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        n = rec.len();
        for field in rec.iter() {
            let v: u8 = field.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line + 1,
                detail: format!("expected 0 or 1, got `{}`", field),
            })?;
            a.push(u8::from(v != 0));
        }
    }
    if n == 0 || a.len() != n * n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: "adjacency is not square".into(),
        });
    }
    Ok(Adjacency { n, a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank(&[5.0, 5.0, 1.0]), vec![2.5, 2.5, 1.0]);
        assert_eq!(rank(&[2.0, 2.0, 2.0, 2.0]), vec![2.5; 4]);
    }

    #[test]
    fn spearman_examples() {
        let x = [0.3, -1.0, 2.0, 7.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn joint_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = Tensor::uniform(&[1, 16, 2], 1.0, &mut rng);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let x = Tensor::new(vec![2, 16, 2], both).unwrap();
        let f = freq_features(&x, FreqFeature::Amplitude).unwrap();
        let s = joint_score(&x, &f).unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(s.get(0, 0), f64::NEG_INFINITY);

        // time ρ = 1; frequency ρ = 0 or 0.6
        let t = Tensor::new(vec![2, 4, 1], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let fr = Tensor::new(vec![2, 4, 1], vec![1.0, 2.0, 3.0, 4.0, 2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        let fz = Tensor::new(vec![2, 4, 1], vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 1.0, 3.0]).unwrap();
        assert!(spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 1.0, 3.0]).unwrap().abs() < 1e-12);
        assert!((joint_score(&t, &fz).unwrap().get(0, 1) - 0.5).abs() < 1e-12);
        assert!((joint_score(&t, &fr).unwrap().get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn joint_score_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, t, m) = (4, 25, 3);
        let x = Tensor::uniform(&[n, t, m], 1.0, &mut rng);
        let f = freq_features(&x, FreqFeature::AmplitudePhase).unwrap();
        assert_eq!(f.shape(), &[n, 2 * t, m]);
        let s = joint_score(&x, &f).unwrap();
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut acc = 0.0;
                for mi in 0..m {
                    let xa: Vec<f64> = (0..t).map(|i| x.at(&[a, i, mi])).collect();
                    let xb: Vec<f64> = (0..t).map(|i| x.at(&[b, i, mi])).collect();
                    let fa: Vec<f64> = (0..2 * t).map(|i| f.at(&[a, i, mi])).collect();
                    let fb: Vec<f64> = (0..2 * t).map(|i| f.at(&[b, i, mi])).collect();
                    acc += spearman(&xa, &xb).unwrap() + spearman(&fa, &fb).unwrap();
                }
                assert!((s.get(a, b) - acc / (2 * m) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_only_score_ignores_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, t, m) = (3, 20, 2);
        let x = Tensor::uniform(&[n, t, m], 1.0, &mut rng);
        let s = time_score(&x).unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let acc: f64 = (0..m)
                .map(|mi| {
                    let xa: Vec<f64> = (0..t).map(|i| x.at(&[a, i, mi])).collect();
                    let xb: Vec<f64> = (0..t).map(|i| x.at(&[b, i, mi])).collect();
                    spearman(&xa, &xb).unwrap()
                })
                .sum();
            assert!((s.get(a, b) - acc / m as f64).abs() < 1e-12);
        }
        let cfg = GraphConfig {
            top_k: 1,
            time_only: true,
            ..GraphConfig::default()
        };
        assert_eq!(learn_graph(&x, &cfg).unwrap().0, s);
    }

    #[test]
    fn topk_examples() {
        let inf = f64::NEG_INFINITY;
        let s = CorrelationScores {
            n: 3,
            s: vec![inf, 0.9, 0.1, 0.9, inf, 0.8, 0.1, 0.8, inf],
        };
        let a = topk_adjacency(&s, 1).unwrap();
        assert_eq!(a.a, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]);
        let full = topk_adjacency(&s, 2).unwrap();
        assert_eq!(full.a, vec![0, 1, 1, 1, 0, 1, 1, 1, 0]);
        assert!(topk_adjacency(&s, 0).is_err());
        assert!(topk_adjacency(&s, 3).is_err());

        let tie = CorrelationScores {
            n: 3,
            s: vec![inf, 0.5, 0.5, 0.5, inf, 0.0, 0.5, 0.0, inf],
        };
        let a = topk_adjacency(&tie, 1).unwrap();
        assert!(a.has_edge(0, 1) && a.has_edge(0, 2));
        assert!(!a.has_edge(1, 2));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adj.csv");
        let a = Adjacency {
            n: 3,
            a: vec![0, 1, 0, 1, 0, 1, 0, 1, 0],
        };
        write_adjacency_csv(&p, &a).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0,1,0\n1,0,1\n0,1,0\n");
        assert_eq!(read_adjacency_csv(&p).unwrap(), a);
    }

    proptest! {
        #[test]
        fn rank_idempotent(x in prop::collection::vec(-5i32..5, 2..50)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let r = rank(&x);
            prop_assert_eq!(rank(&r), r.clone());
            let total: f64 = r.iter().sum();
            let n = x.len() as f64;
            prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn spearman_monotone_invariance(seed in any::<u64>(), len in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((spearman(&x, &y).unwrap() - spearman(&ex, &y).unwrap()).abs() < 1e-12);
            prop_assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
            let r = spearman(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - spearman(&y, &x).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn topk_symmetric_zero_diagonal(seed in any::<u64>(), n in 2usize..12, kfrac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + ((n - 2) as f64 * kfrac) as usize;
            let mut s = vec![0.0; n * n];
            for a in 0..n {
                s[a * n + a] = f64::NEG_INFINITY;
                for b in a + 1..n {
                    let v = rng.random_range(-1.0..1.0);
                    s[a * n + b] = v;
                    s[b * n + a] = v;
                }
            }
            let adj = topk_adjacency(&CorrelationScores { n, s }, k).unwrap();
            for a in 0..n {
                prop_assert!(!adj.has_edge(a, a));
                prop_assert!(adj.degree(a) >= k);
                for b in 0..n {
                    prop_assert_eq!(adj.has_edge(a, b), adj.has_edge(b, a));
                }
            }
        }
    }
}
