//! Sensor datasets: CSV import/export, a seeded synthetic generator and
//! anomaly injection.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::mean_std;
use crate::registry::Registry;
use crate::tensor::Tensor;

/// Consecutive missing ticks bridged by forward fill.
pub const MAX_FILL_GAP: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Point,
    Context,
    Collective,
    Correlation,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [Self::Point, Self::Context, Self::Collective, Self::Correlation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Point => "point",
            Self::Context => "context",
            Self::Collective => "collective",
            Self::Correlation => "correlation",
        }
    }

    /// Nonzero code stored in [`Dataset::kinds`].
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(usize::from(c).checked_sub(1)?).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Multi-node, multi-modal series. `values` is `[N, T, M]`; `labels` and
/// `kinds` (if present) follow the same row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub node_ids: Vec<String>,
    pub modality_names: Vec<String>,
    pub timestamps: Vec<f64>,
    pub values: Tensor,
    pub labels: Option<Vec<u8>>,
    pub kinds: Option<Vec<u8>>,
}

impl Dataset {
    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, m) = (self.nodes(), self.len(), self.modalities());
        if self.values.shape() != [n, t, m] {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!("values {:?} but {} nodes, {} ticks, {} modalities", self.values.shape(), n, t, m),
            });
        }
        if self.timestamps.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::InvalidArgument("timestamps must be strictly increasing".into()));
        }
        if !self.values.is_finite() {
            return Err(Error::NonFinite("dataset values"));
        }
        for l in [&self.labels, &self.kinds].into_iter().flatten() {
            if l.len() != n * t * m {
                return Err(Error::InvalidArgument("label length differs from values".into()));
            }
        }
        if self.labels.as_ref().is_some_and(|l| l.iter().any(|&v| v > 1)) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Ticks `[start, end)` of every channel.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Dataset> {
        let (n, t, m) = (self.nodes(), self.len(), self.modalities());
        if start >= end || end > t {
            return Err(Error::InvalidArgument(format!("bad tick range {}..{} of {}", start, end, t)));
        }
        let cut = |src: &[f64]| -> Vec<f64> { (0..n).flat_map(|ni| src[(ni * t + start) * m..(ni * t + end) * m].to_vec()).collect() };
        let cut_u8 = |src: &Vec<u8>| -> Vec<u8> { (0..n).flat_map(|ni| src[(ni * t + start) * m..(ni * t + end) * m].to_vec()).collect() };
        Ok(Dataset {
            node_ids: self.node_ids.clone(),
            modality_names: self.modality_names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: Tensor::new(vec![n, end - start, m], cut(self.values.data()))?,
            labels: self.labels.as_ref().map(cut_u8),
            kinds: self.kinds.as_ref().map(cut_u8),
        })
    }

    /// Chronological split at `fraction` of the ticks.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let cut = (self.len() as f64 * fraction).round() as usize;
        Ok((self.slice_time(0, cut)?, self.slice_time(cut, self.len())?))
    }

    pub fn labels_or_zero(&self) -> Vec<u8> {
        self.labels.clone().unwrap_or_else(|| vec![0; self.values.numel()])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `date,time,epoch,moteid,temperature,humidity,light,voltage`, 31 s ticks.
    Ibrl,
    /// Long format on a 30 s tick.
    LoraOsd,
    /// `timestamp,node_id,modality,value[,label]`; tick inferred.
    #[default]
    Long,
}

impl Schema {
    pub fn tick_seconds(self) -> Option<f64> {
        match self {
            Self::Ibrl => Some(31.0),
            Self::LoraOsd => Some(30.0),
            Self::Long => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Fail on the first malformed row instead of skipping it.
    pub strict: bool,
}

struct Record {
    tick: i64,
    node: String,
    modality: String,
    value: f64,
    label: Option<u8>,
    kind: u8,
}

const IBRL_MODALITIES: [&str; 4] = ["temperature", "humidity", "light", "voltage"];

fn bad(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("not a number: `{}`", s))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite value `{}`", s))
    }
}

pub fn load_csv(path: &Path, schema: Schema, opts: LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let expected: &[&str] = match schema {
        Schema::Ibrl => &["date", "time", "epoch", "moteid", "temperature", "humidity", "light", "voltage"],
        Schema::Long | Schema::LoraOsd => &["timestamp", "node_id", "modality", "value"],
    };
    if header.len() < expected.len() || header[..expected.len()] != *expected {
        return Err(bad(path, 1, format!("expected header {}", expected.join(","))));
    }
    let has_label = schema != Schema::Ibrl && header.get(4).is_some_and(|h| h == "label");
    let has_kind = has_label && header.get(5).is_some_and(|h| h == "kind");

    // raw (timestamp, record) pairs; ticks assigned once the tick length is known
    let mut raw: Vec<(f64, Record)> = Vec::new();
    let mut skipped = 0usize;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let parsed: std::result::Result<Vec<(f64, Record)>, String> = (|| match schema {
            Schema::Ibrl => {
                if row.len() < 8 {
                    return Err(format!("expected 8 fields, got {}", row.len()));
                }
                let epoch: i64 = row[2].parse().map_err(|_| format!("bad epoch `{}`", &row[2]))?;
                let mote = row[3].to_owned();
                if mote.is_empty() {
                    return Err("empty moteid".into());
                }
                IBRL_MODALITIES
                    .iter()
                    .enumerate()
                    .map(|(k, name)| {
                        Ok((
                            epoch as f64 * 31.0,
                            Record {
                                tick: 0,
                                node: mote.clone(),
                                modality: (*name).to_owned(),
                                value: parse_f64(&row[4 + k])?,
                                label: None,
                                kind: 0,
                            },
                        ))
                    })
                    .collect()
            }
            Schema::Long | Schema::LoraOsd => {
                if row.len() < 4 + usize::from(has_label) {
                    return Err(format!("expected {} fields, got {}", 4 + usize::from(has_label), row.len()));
                }
                let label = if has_label {
                    match &row[4] {
                        "0" => Some(0),
                        "1" => Some(1),
                        other => return Err(format!("bad label `{}`", other)),
                    }
                } else {
                    None
                };
                let kind = match row.get(5).filter(|_| has_kind) {
                    None | Some("") => 0,
                    Some(k) => AnomalyKind::from_name(k).ok_or_else(|| format!("bad kind `{}`", k))?.code(),
                };
                if row[1].is_empty() || row[2].is_empty() {
                    return Err("empty node_id or modality".into());
                }
                Ok(vec![(
                    parse_f64(&row[0])?,
                    Record {
                        tick: 0,
                        node: row[1].to_owned(),
                        modality: row[2].to_owned(),
                        value: parse_f64(&row[3])?,
                        label,
                        kind,
                    },
                )])
            }
        })();
        match parsed {
            Ok(recs) => raw.extend(recs),
            Err(detail) if opts.strict => return Err(bad(path, line, detail)),
            Err(detail) => {
                log::warn!("{}:{}: skipped row: {}", path.display(), line, detail);
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), skipped);
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }

    let (t0, tick) = match schema.tick_seconds() {
        Some(tick) if schema == Schema::Ibrl => (0.0, tick),
        Some(tick) => (raw.iter().map(|r| r.0).fold(f64::INFINITY, f64::min), tick),
        None => {
            let mut ts: Vec<f64> = raw.iter().map(|r| r.0).collect();
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            let tick = ts.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);
            (ts[0], if tick.is_finite() { tick } else { 1.0 })
        }
    };
    let mut stamps: BTreeMap<i64, f64> = BTreeMap::new();
    for (ts, r) in raw.iter_mut() {
        r.tick = ((*ts - t0) / tick).round() as i64;
        stamps.entry(r.tick).or_insert(*ts);
    }
    assemble(raw.into_iter().map(|(_, r)| r).collect(), stamps, t0, tick)
}

/// Aligns records on the tick grid, forward-filling short gaps and dropping
/// ticks that remain incomplete.
fn assemble(records: Vec<Record>, stamps: BTreeMap<i64, f64>, t0: f64, tick: f64) -> Result<Dataset> {
    let mut nodes: IndexMap<String, ()> = IndexMap::new();
    let mut mods: IndexMap<String, ()> = IndexMap::new();
    for r in &records {
        nodes.insert(r.node.clone(), ());
        mods.insert(r.modality.clone(), ());
    }
    nodes.sort_by(|a, _, b, _| natural_cmp(a, b));
    let (lo, hi) = (*stamps.keys().next().unwrap(), *stamps.keys().next_back().unwrap());
    let span = (hi - lo + 1) as usize;
    let (n, m) = (nodes.len(), mods.len());
    let has_label = records.iter().any(|r| r.label.is_some());
    let has_kind = records.iter().any(|r| r.kind != 0);
    let mut grid: Vec<Option<f64>> = vec![None; n * span * m];
    let mut lab = vec![0u8; n * span * m];
    let mut kin = vec![0u8; n * span * m];
    let mut dups = 0usize;
    for r in &records {
        let idx = (nodes.get_index_of(&r.node).unwrap() * span + (r.tick - lo) as usize) * m + mods.get_index_of(&r.modality).unwrap();
        if grid[idx].replace(r.value).is_some() {
            dups += 1;
        }
        lab[idx] = r.label.unwrap_or(0);
        kin[idx] = r.kind;
    }
    if dups > 0 {
        log::warn!("{} duplicate (node, tick, modality) rows; last value kept", dups);
    }
    // forward fill up to MAX_FILL_GAP consecutive ticks
    for c in 0..n * m {
        let (ni, mi) = (c / m, c % m);
        let (mut last, mut gap) = (None, 0usize);
        for t in 0..span {
            let idx = (ni * span + t) * m + mi;
            match grid[idx] {
                Some(v) => {
                    last = Some(v);
                    gap = 0;
                }
                None => {
                    gap += 1;
                    if gap <= MAX_FILL_GAP {
                        grid[idx] = last;
                    }
                }
            }
        }
    }
    let keep: Vec<usize> = (0..span).filter(|&t| (0..n * m).all(|c| grid[((c / m) * span + t) * m + c % m].is_some())).collect();
    let dropped = span - keep.len();
    if dropped > 0 {
        log::warn!("dropped {} ticks with gaps longer than {} ticks", dropped, MAX_FILL_GAP);
    }
    if keep.is_empty() {
        return Err(Error::EmptyDataset("no complete ticks after alignment".into()));
    }
    let mut values = Vec::with_capacity(n * keep.len() * m);
    let mut labels = Vec::with_capacity(n * keep.len() * m);
    let mut kinds = Vec::with_capacity(n * keep.len() * m);
    for ni in 0..n {
        for &t in &keep {
            for mi in 0..m {
                let idx = (ni * span + t) * m + mi;
                values.push(grid[idx].unwrap());
                labels.push(lab[idx]);
                kinds.push(kin[idx]);
            }
        }
    }
    let timestamps = keep
        .iter()
        .map(|&t| {
            let k = lo + t as i64;
            stamps.get(&k).copied().unwrap_or(t0 + k as f64 * tick)
        })
        .collect();
    let ds = Dataset {
        node_ids: nodes.into_keys().collect(),
        modality_names: mods.into_keys().collect(),
        timestamps,
        values: Tensor::new(vec![n, keep.len(), m], values)?,
        labels: has_label.then_some(labels),
        kinds: has_kind.then_some(kinds),
    };
    ds.validate()?;
    Ok(ds)
}

/// Numeric ids sort numerically, everything else lexically.
fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Writes the long format; a `label` column is added when labels exist and
/// a `kind` column (anomaly kind name, empty when normal) when kinds do.
pub fn save_long_csv(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp", "node_id", "modality", "value"];
    let kinds = ds.labels.as_ref().and(ds.kinds.as_ref());
    if ds.labels.is_some() {
        header.push("label");
    }
    if kinds.is_some() {
        header.push("kind");
    }
    w.write_record(&header)?;
    let (t, m) = (ds.len(), ds.modalities());
    for (ti, ts) in ds.timestamps.iter().enumerate() {
        for (ni, node) in ds.node_ids.iter().enumerate() {
            for (mi, name) in ds.modality_names.iter().enumerate() {
                let idx = (ni * t + ti) * m + mi;
                let mut rec = vec![ts.to_string(), node.clone(), name.clone(), ds.values.data()[idx].to_string()];
                if let Some(l) = &ds.labels {
                    rec.push(l[idx].to_string());
                }
                if let Some(k) = kinds {
                    rec.push(AnomalyKind::from_code(k[idx]).map_or("", AnomalyKind::name).to_owned());
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Nodes share low-frequency latent sinusoids: each modality mixes the
/// latents with its own weights, each node scales the mix, and Gaussian
/// noise (σ = 0.05) is added. Every latent completes a whole number of
/// cycles over `t`.
pub fn synth_generate(n: usize, m: usize, t: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || m < 2 || t < 4 {
        return Err(Error::InvalidArgument(format!("synthetic data needs N≥2, M≥2, T≥4, got {}×{}×{}", n, m, t)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = 3;
    // periods between roughly 40 and 400 ticks
    let (k_lo, k_hi) = ((t / 400).max(1), (t / 40).max(2));
    let freqs: Vec<(f64, f64)> = (0..latents).map(|_| (rng.random_range(k_lo..=k_hi) as f64, rng.random_range(0.0..2.0 * PI))).collect();
    let mix: Vec<f64> = (0..m * latents).map(|_| rng.random_range(0.3..1.0)).collect();
    let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut values = vec![0.0; n * t * m];
    for ni in 0..n {
        for ti in 0..t {
            for mi in 0..m {
                let base: f64 = (0..latents)
                    .map(|j| {
                        let (k, ph) = freqs[j];
                        mix[mi * latents + j] * (2.0 * PI * k * ti as f64 / t as f64 + ph).sin()
                    })
                    .sum();
                values[(ni * t + ti) * m + mi] = scale[ni] * base + noise.sample(&mut rng);
            }
        }
    }
    Ok(Dataset {
        node_ids: (0..n).map(|i| format!("n{}", i)).collect(),
        modality_names: (0..m).map(|i| format!("m{}", i)).collect(),
        timestamps: (0..t).map(|i| i as f64 * 30.0).collect(),
        values: Tensor::new(vec![n, t, m], values)?,
        labels: Some(vec![0; n * t * m]),
        kinds: Some(vec![0; n * t * m]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionSpec {
    pub kind: AnomalyKind,
    /// `(node, modality)` pairs; empty means every channel.
    pub targets: Vec<(usize, usize)>,
    /// Fraction of each target's ticks (within `span`) to label.
    pub rate: f64,
    /// Explicit `(start, len)` segments; overrides `rate`.
    pub segments: Vec<(usize, usize)>,
    /// Length of randomly placed segments (ignored for points).
    pub segment_len: usize,
    /// In channel standard deviations.
    pub magnitude: f64,
    pub seed: u64,
    /// Restrict random placement to ticks `[start, end)`.
    pub span: Option<(usize, usize)>,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            kind: AnomalyKind::Point,
            targets: Vec::new(),
            rate: 0.01,
            segments: Vec::new(),
            segment_len: 20,
            magnitude: 3.0,
            seed: 0,
            span: None,
        }
    }
}

impl InjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() && !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::InvalidArgument(format!("injection rate must lie in (0, 1), got {}", self.rate)));
        }
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::InvalidArgument("injection magnitude must be finite and nonnegative".into()));
        }
        if self.kind != AnomalyKind::Point && self.segment_len == 0 {
            return Err(Error::InvalidArgument("segment_len must be positive".into()));
        }
        Ok(())
    }
}

/// Channel statistics taken before any modification.
pub struct ChannelContext {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Rewrites one segment of one channel in place.
pub trait Injector {
    fn kind(&self) -> AnomalyKind;
    fn segment_len(&self, spec: &InjectionSpec) -> usize {
        spec.segment_len
    }
    fn apply(&self, segment: &mut [f64], ctx: &ChannelContext, magnitude: f64, rng: &mut ChaCha8Rng);
}

/// ±magnitude·std spike.
pub struct PointInjector;

impl Injector for PointInjector {
    fn kind(&self) -> AnomalyKind {
        AnomalyKind::Point
    }
    fn segment_len(&self, _: &InjectionSpec) -> usize {
        1
    }
    fn apply(&self, segment: &mut [f64], ctx: &ChannelContext, magnitude: f64, rng: &mut ChaCha8Rng) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for v in segment {
            *v += sign * magnitude * ctx.std;
        }
    }
}

/// Shifts the segment towards the far side of the channel mean and clips to
/// the channel's original range, so values stay globally plausible.
pub struct ContextInjector;

impl Injector for ContextInjector {
    fn kind(&self) -> AnomalyKind {
        AnomalyKind::Context
    }
    fn apply(&self, segment: &mut [f64], ctx: &ChannelContext, magnitude: f64, _rng: &mut ChaCha8Rng) {
        let local = segment.iter().sum::<f64>() / segment.len() as f64;
        let sign = if local > ctx.mean { -1.0 } else { 1.0 };
        for v in segment {
            *v = (*v + sign * magnitude * ctx.std).clamp(ctx.min, ctx.max);
        }
    }
}

/// Replaces the segment with a period-4 oscillation around its own mean.
pub struct CollectiveInjector;

impl Injector for CollectiveInjector {
    fn kind(&self) -> AnomalyKind {
        AnomalyKind::Collective
    }
    fn apply(&self, segment: &mut [f64], ctx: &ChannelContext, magnitude: f64, _rng: &mut ChaCha8Rng) {
        let local = segment.iter().sum::<f64>() / segment.len() as f64;
        let amp = (magnitude * ctx.std).min(0.5 * (ctx.max - ctx.min));
        for (i, v) in segment.iter_mut().enumerate() {
            *v = (local + amp * (PI * i as f64 / 2.0).sin()).clamp(ctx.min, ctx.max);
        }
    }
}

/// Replaces the segment with an unrelated slow sinusoid carrying the
/// segment's own mean and standard deviation.
pub struct CorrelationInjector;

impl Injector for CorrelationInjector {
    fn kind(&self) -> AnomalyKind {
        AnomalyKind::Correlation
    }
    fn apply(&self, segment: &mut [f64], _ctx: &ChannelContext, _magnitude: f64, rng: &mut ChaCha8Rng) {
        let (mean, std) = mean_std(segment);
        let len = segment.len() as f64;
        let period = rng.random_range(0.5 * len..2.0 * len).max(2.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let raw: Vec<f64> = (0..segment.len()).map(|i| (2.0 * PI * i as f64 / period + phase).sin()).collect();
        let (rm, rs) = mean_std(&raw);
        for (v, r) in segment.iter_mut().zip(raw) {
            *v = if rs > 0.0 { mean + std * (r - rm) / rs } else { mean };
        }
    }
}

pub fn injector_registry() -> Registry<Box<dyn Injector>> {
    let mut r: Registry<Box<dyn Injector>> = Registry::new("anomaly kind");
    let all: [Box<dyn Injector>; 4] = [Box::new(PointInjector), Box::new(ContextInjector), Box::new(CollectiveInjector), Box::new(CorrelationInjector)];
    for inj in all {
        r.register(inj.kind().name(), inj).expect("distinct kinds");
    }
    r
}

/// Applies `spec` and marks the touched ticks in `labels`/`kinds`.
pub fn inject(ds: &Dataset, spec: &InjectionSpec) -> Result<Dataset> {
    spec.validate()?;
    ds.validate()?;
    let registry = injector_registry();
    let injector = registry.get(spec.kind.name())?;
    let (n, t, m) = (ds.nodes(), ds.len(), ds.modalities());
    let (lo, hi) = spec.span.unwrap_or((0, t));
    if lo >= hi || hi > t {
        return Err(Error::InvalidArgument(format!("span {}..{} outside 0..{}", lo, hi, t)));
    }
    let targets: Vec<(usize, usize)> = if spec.targets.is_empty() {
        (0..n).flat_map(|ni| (0..m).map(move |mi| (ni, mi))).collect()
    } else {
        spec.targets.clone()
    };
    if let Some(&(ni, mi)) = targets.iter().find(|&&(ni, mi)| ni >= n || mi >= m) {
        return Err(Error::InvalidArgument(format!("target ({}, {}) out of range", ni, mi)));
    }
    let len = injector.segment_len(spec);
    let mut out = ds.clone();
    let mut labels = ds.labels_or_zero();
    let mut kinds = ds.kinds.clone().unwrap_or_else(|| vec![0; n * t * m]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values = out.values.data_mut();
    for (ni, mi) in targets {
        let idx = |ti: usize| (ni * t + ti) * m + mi;
        let channel: Vec<f64> = (0..t).map(|ti| ds.values.data()[idx(ti)]).collect();
        let (mean, std) = mean_std(&channel);
        let ctx = ChannelContext {
            mean,
            std,
            min: channel.iter().copied().fold(f64::INFINITY, f64::min),
            max: channel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let free = |labels: &[u8], s: usize, l: usize| (s..s + l).all(|ti| labels[idx(ti)] == 0);
        let segments: Vec<(usize, usize)> = if !spec.segments.is_empty() {
            spec.segments.clone()
        } else {
            let count = (spec.rate * (hi - lo) as f64 / len as f64).round() as usize;
            place_segments(&mut rng, lo, hi, len, count, |s| free(&labels, s, len)).ok_or(Error::OverlappingInjection { node: ni, modality: mi })?
        };
        for &(s, l) in &segments {
            if l == 0 || s + l > t {
                return Err(Error::InvalidArgument(format!("segment ({}, {}) outside 0..{}", s, l, t)));
            }
            if !free(&labels, s, l) {
                return Err(Error::OverlappingInjection { node: ni, modality: mi });
            }
            let mut seg: Vec<f64> = (s..s + l).map(|ti| values[idx(ti)]).collect();
            injector.apply(&mut seg, &ctx, spec.magnitude, &mut rng);
            for (k, v) in seg.into_iter().enumerate() {
                values[idx(s + k)] = v;
                labels[idx(s + k)] = 1;
                kinds[idx(s + k)] = spec.kind.code();
            }
        }
    }
    out.labels = Some(labels);
    out.kinds = Some(kinds);
    Ok(out)
}

/// Draws `count` disjoint segments of length `len` inside `[lo, hi)`.
fn place_segments(rng: &mut ChaCha8Rng, lo: usize, hi: usize, len: usize, count: usize, free: impl Fn(usize) -> bool) -> Option<Vec<(usize, usize)>> {
    if count == 0 {
        return Some(Vec::new());
    }
    if len > hi - lo {
        return None;
    }
    let slots = hi - lo - len + 1;
    if len == 1 {
        let open: Vec<usize> = (lo..hi).filter(|&s| free(s)).collect();
        if open.len() < count {
            return None;
        }
        let mut picks: Vec<usize> = sample(rng, open.len(), count).into_iter().map(|i| open[i]).collect();
        picks.sort_unstable();
        return Some(picks.into_iter().map(|s| (s, 1)).collect());
    }
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count * 200 {
        if chosen.len() == count {
            break;
        }
        let s = lo + rng.random_range(0..slots);
        if free(s) && chosen.iter().all(|&(c, _)| s + len <= c || c + len <= s) {
            chosen.push((s, len));
        }
    }
    (chosen.len() == count).then(|| {
        chosen.sort_unstable();
        chosen
    })
}
