//! End-to-end runs: preprocessing, graph learning, training, detection,
//! evaluation and the ablation schemes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataio::{inject, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{best_threshold, evaluate, zscore_scores, MetricsReport, Sweep};
use crate::gnn::GraphOps;
use crate::graphlearn::{learn_graph, Adjacency, CorrelationScores};
use crate::model::{describe, Ablation, Description, Model};
use crate::nn::ParamStore;
use crate::preprocess::{decimate, gaussian_lowpass, interleave, map_channels, window_starts, ChannelStats};
use crate::registry::Registry;
use crate::scoring::{add_loss_weights, aggregate_windows, classify, fit_threshold, LossTriple, ScoreTrace};
use crate::tensor::Tensor;
use crate::train::{score_windows, train_loop, write_history_csv, EpochLog};

/// Normalized, smoothed training series plus the learned graph.
pub struct Prepared {
    pub train: Tensor,
    /// The training split preprocessed the way detection inputs are; the
    /// threshold is fitted on its scores.
    pub calibration: Tensor,
    pub stats: ChannelStats,
    pub scores: CorrelationScores,
    pub adjacency: Adjacency,
}

fn smooth(x: &Tensor, sigma: Option<f64>) -> Result<Tensor> {
    match sigma {
        Some(s) => map_channels(x, |c| gaussian_lowpass(c, s)),
        None => Ok(x.clone()),
    }
}

pub fn prepare(train: &Dataset, cfg: &Config, time_only_graph: bool) -> Result<Prepared> {
    cfg.preprocess.validate()?;
    let p = &cfg.preprocess;
    let stats = ChannelStats::fit(&train.values, p.constant_channels)?;
    let tr = smooth(&stats.apply(&train.values)?, p.gaussian_sigma)?;
    let calibration = prepare_test(&train.values, &stats, cfg)?;
    let mut gcfg = cfg.graph.clone();
    gcfg.time_only |= time_only_graph;
    let (scores, adjacency) = learn_graph(&tr, &gcfg)?;
    Ok(Prepared {
        train: tr,
        calibration,
        stats,
        scores,
        adjacency,
    })
}

/// Normalizes a series with training statistics; smooths only when the
/// config filters test data.
pub fn prepare_test(x: &Tensor, stats: &ChannelStats, cfg: &Config) -> Result<Tensor> {
    let te = stats.apply(x)?;
    if cfg.preprocess.filter_test {
        smooth(&te, cfg.preprocess.gaussian_sigma)
    } else {
        Ok(te)
    }
}

/// Model samples cut from a series: each span of `k·W` ticks (stride `L`)
/// yields `k` phase-decimated windows of length `W`.
pub struct Windowed {
    pub samples: Vec<Tensor>,
    pub starts: Vec<usize>,
    pub k: usize,
    pub len: usize,
}

pub fn windowed(x: &Tensor, cfg: &Config) -> Result<Windowed> {
    let p = &cfg.preprocess;
    let (n, t, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let span = p.window * p.decimation_k;
    let starts = window_starts(t, span, p.stride)?;
    let mut samples = Vec::with_capacity(starts.len() * p.decimation_k);
    for &s in &starts {
        let mut cut = Vec::with_capacity(n * span * m);
        for ni in 0..n {
            cut.extend_from_slice(&x.data()[(ni * t + s) * m..(ni * t + s + span) * m]);
        }
        samples.extend(decimate(&Tensor::new(vec![n, span, m], cut)?, p.decimation_k)?);
    }
    Ok(Windowed {
        samples,
        starts,
        k: p.decimation_k,
        len: t,
    })
}

/// Reassembles per-sample maps into a per-tick trace.
pub fn merge(maps: Vec<Tensor>, w: &Windowed) -> Result<ScoreTrace> {
    let spans: Vec<Tensor> = maps.chunks(w.k).map(interleave).collect::<Result<_>>()?;
    aggregate_windows(&spans, &w.starts, w.len)
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub graph: GraphOps,
    pub threshold: f64,
    pub history: Vec<EpochLog>,
    pub train_losses: LossTriple,
}

/// Registers a fresh, seeded model and its loss weights.
pub fn build(cfg: &Config, ablation: &Ablation, modalities: usize) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg.model, ablation, modalities, &mut rng)?;
    add_loss_weights(&mut store)?;
    Ok((model, store))
}

fn covered_values(trace: &ScoreTrace) -> Vec<f64> {
    let (n, t, m) = (trace.scores.shape()[0], trace.scores.shape()[1], trace.scores.shape()[2]);
    let mut out = Vec::new();
    for ni in 0..n {
        for ti in (0..t).filter(|&ti| trace.covered[ti]) {
            out.extend_from_slice(&trace.scores.data()[(ni * t + ti) * m..(ni * t + ti + 1) * m]);
        }
    }
    out
}

/// Elementwise mask `[N, T, M]` of covered ticks.
pub fn element_mask(trace: &ScoreTrace) -> Vec<bool> {
    let (n, t, m) = (trace.scores.shape()[0], trace.scores.shape()[1], trace.scores.shape()[2]);
    (0..n * t * m).map(|i| trace.covered[(i / m) % t]).collect()
}

pub fn fit(prepared: &Prepared, cfg: &Config, ablation: &Ablation, checkpoint_dir: Option<&Path>) -> Result<Trained> {
    let (model, mut store) = build(cfg, ablation, prepared.train.shape()[2])?;
    let graph = GraphOps::new(&prepared.adjacency, cfg.model.ppnp_alpha)?;
    let w = windowed(&prepared.train, cfg)?;
    let history = train_loop(&model, &mut store, &graph, &w.samples, &cfg.train, checkpoint_dir)?;
    let (_, train_losses) = score_windows(&model, &store, &graph, &w.samples, cfg.eval_batch)?;
    let c = windowed(&prepared.calibration, cfg)?;
    let (maps, _) = score_windows(&model, &store, &graph, &c.samples, cfg.eval_batch)?;
    let trace = merge(maps, &c)?;
    let threshold = fit_threshold(&covered_values(&trace), cfg.threshold)?;
    Ok(Trained {
        model,
        store,
        graph,
        threshold,
        history,
        train_losses,
    })
}

/// Everything `detect` needs besides the weights, stored as `bundle.json`
/// next to `model.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub config: Config,
    pub ablation: Ablation,
    pub modalities: usize,
    pub stats: ChannelStats,
    pub adjacency: Adjacency,
    pub threshold: f64,
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const WEIGHTS_FILE: &str = "model.bin";

impl Bundle {
    pub fn new(cfg: &Config, ablation: &Ablation, prepared: &Prepared, threshold: f64) -> Self {
        Self {
            config: cfg.clone(),
            ablation: ablation.clone(),
            modalities: prepared.train.shape()[2],
            stats: prepared.stats.clone(),
            adjacency: prepared.adjacency.clone(),
            threshold,
        }
    }
}

pub fn save_model(dir: &Path, bundle: &Bundle, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(BUNDLE_FILE), serde_json::to_string_pretty(bundle)?)?;
    store.save(&dir.join(WEIGHTS_FILE))
}

pub fn load_model(dir: &Path) -> Result<(Bundle, Trained)> {
    let bundle: Bundle = serde_json::from_str(&std::fs::read_to_string(dir.join(BUNDLE_FILE))?)?;
    let (model, mut store) = build(&bundle.config, &bundle.ablation, bundle.modalities)?;
    store.load(&dir.join(WEIGHTS_FILE))?;
    let graph = GraphOps::new(&bundle.adjacency, bundle.config.model.ppnp_alpha)?;
    let trained = Trained {
        model,
        store,
        graph,
        threshold: bundle.threshold,
        history: Vec::new(),
        train_losses: LossTriple::default(),
    };
    Ok((bundle, trained))
}

pub struct Detection {
    pub trace: ScoreTrace,
    pub labels: Vec<u8>,
}

/// Scores a preprocessed series `[N, T, M]` and labels it with the fitted
/// threshold. Uncovered ticks get label 0.
pub fn detect(trained: &Trained, x: &Tensor, cfg: &Config) -> Result<Detection> {
    let w = windowed(x, cfg)?;
    let (maps, _) = score_windows(&trained.model, &trained.store, &trained.graph, &w.samples, cfg.eval_batch)?;
    let trace = merge(maps, &w)?;
    let mask = element_mask(&trace);
    let labels = classify(trace.scores.data(), trained.threshold).into_iter().zip(&mask).map(|(l, &c)| if c { l } else { 0 }).collect();
    Ok(Detection { trace, labels })
}

pub fn write_scores_csv(path: &Path, ds: &Dataset, det: &Detection) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_index", "node_id", "modality", "score", "label"])?;
    let (t, m) = (ds.len(), ds.modalities());
    for ti in (0..t).filter(|&ti| det.trace.covered[ti]) {
        for (ni, node) in ds.node_ids.iter().enumerate() {
            for (mi, name) in ds.modality_names.iter().enumerate() {
                let i = (ni * t + ti) * m + mi;
                w.write_record([ti.to_string(), node.clone(), name.clone(), det.trace.scores.data()[i].to_string(), det.labels[i].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Synthetic train/test pair; the configured injections hit the test split.
pub fn synthetic_split(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let s = &cfg.synth;
    let ds = synth_generate(s.nodes, s.modalities, s.length, cfg.seed)?;
    let (train, mut test) = ds.split(cfg.train_fraction)?;
    for spec in &cfg.injections {
        test = inject(&test, spec)?;
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: String,
    pub threshold: f64,
    pub metrics: MetricsReport,
}

/// Per-channel `|z|` with the threshold chosen on the test labels.
pub fn zscore_baseline(train: &Dataset, test: &Dataset) -> Result<BaselineReport> {
    let scores = zscore_scores(&train.values, &test.values)?;
    let Sweep { threshold, report } = best_threshold(&scores, &test.labels_or_zero(), None)?;
    Ok(BaselineReport {
        name: "zscore".into(),
        threshold,
        metrics: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub total_parameters: usize,
    pub cross_modal: bool,
    pub time_branch: bool,
    pub freq_branch: bool,
    pub time_spatial: Vec<String>,
    pub freq_spatial: Vec<String>,
    pub time_only_graph: bool,
}

impl ModelSummary {
    fn new(d: &Description, time_only_graph: bool) -> Self {
        Self {
            total_parameters: d.total_parameters,
            cross_modal: d.cross_modal,
            time_branch: d.time_branch,
            freq_branch: d.freq_branch,
            time_spatial: d.time_spatial.clone(),
            freq_spatial: d.freq_spatial.clone(),
            time_only_graph,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme_name: Option<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub metrics: MetricsReport,
    pub threshold: f64,
    pub model: ModelSummary,
    /// Which of ℒ₁, ℒ₂, ℒ₃ entered the objective.
    pub losses_active: [bool; 3],
    pub final_epoch: Option<EpochLog>,
    pub first_epoch: Option<EpochLog>,
    pub train_losses: LossTriple,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineReport>,
    pub config_digest: String,
}

/// Trains on `train`, detects on `test` and evaluates against its labels.
/// With `out`, writes the loss history, score trace and checkpoints there.
pub fn run(train: &Dataset, test: &Dataset, cfg: &Config, ablation: &Ablation, out: Option<&Path>) -> Result<(RunReport, Trained, Detection)> {
    cfg.validate()?;
    let prepared = prepare(train, cfg, ablation.time_only_graph)?;
    let ckpt = out.map(|d| d.join("checkpoints"));
    if let Some(c) = &ckpt {
        std::fs::create_dir_all(c)?;
    }
    let trained = fit(&prepared, cfg, ablation, ckpt.as_deref())?;
    let det = detect(&trained, &prepare_test(&test.values, &prepared.stats, cfg)?, cfg)?;
    let mask = element_mask(&det.trace);
    let mut metrics = evaluate(&det.labels, &test.labels_or_zero(), test.kinds.as_deref(), Some(&mask))?;
    metrics.config_digest = cfg.digest();
    let desc = describe(&trained.model, &trained.store);
    let report = RunReport {
        scheme: None,
        scheme_name: None,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        threshold: trained.threshold,
        model: ModelSummary::new(&desc, cfg.graph.time_only || ablation.time_only_graph),
        losses_active: [ablation.time_branch, ablation.freq_branch, ablation.freq_branch],
        final_epoch: trained.history.last().cloned(),
        first_epoch: trained.history.first().cloned(),
        train_losses: trained.train_losses,
        baseline: None,
        config_digest: metrics.config_digest.clone(),
        metrics,
    };
    if let Some(dir) = out {
        write_history_csv(&dir.join("loss_history.csv"), &trained.history)?;
        write_scores_csv(&dir.join("scores.csv"), test, &det)?;
    }
    Ok((report, trained, det))
}

/// One row of the ablation table.
pub trait Scheme {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn ablation(&self) -> Ablation;
}

struct TableScheme {
    id: u8,
    name: &'static str,
    apply: fn(&mut Ablation),
}

impl Scheme for TableScheme {
    fn id(&self) -> u8 {
        self.id
    }
    fn name(&self) -> &'static str {
        self.name
    }
    fn ablation(&self) -> Ablation {
        let mut a = Ablation::default();
        (self.apply)(&mut a);
        a
    }
}

fn single_gnn(a: &mut Ablation) {
    a.time_spatial = vec!["gat".into()];
    a.freq_spatial = vec!["gat".into()];
}

pub fn scheme_registry() -> Registry<Box<dyn Scheme>> {
    let table: [TableScheme; 7] = [
        TableScheme { id: 1, name: "no-cfe", apply: |a| a.cfe = false },
        TableScheme { id: 2, name: "single-gnn", apply: single_gnn },
        TableScheme { id: 3, name: "time-graph", apply: |a| a.time_only_graph = true },
        TableScheme {
            id: 4,
            name: "single-gnn-time-graph",
            apply: |a| {
                single_gnn(a);
                a.time_only_graph = true;
            },
        },
        TableScheme { id: 5, name: "time-branch", apply: |a| a.freq_branch = false },
        TableScheme { id: 6, name: "freq-branch", apply: |a| a.time_branch = false },
        TableScheme { id: 7, name: "full", apply: |_| {} },
    ];
    let mut r: Registry<Box<dyn Scheme>> = Registry::new("scheme");
    for s in table {
        let key: &'static str = ["1", "2", "3", "4", "5", "6", "7"][usize::from(s.id) - 1];
        r.register(key, Box::new(s)).expect("distinct ids");
    }
    r
}

pub fn run_scheme(id: u8, train: &Dataset, test: &Dataset, cfg: &Config, out: Option<&Path>) -> Result<RunReport> {
    let reg = scheme_registry();
    let s = reg.get(&id.to_string()).map_err(|_| Error::InvalidArgument(format!("scheme must be 1..=7, got {}", id)))?;
    let (mut report, _, _) = run(train, test, cfg, &s.ablation(), out)?;
    report.scheme = Some(s.id());
    report.scheme_name = Some(s.name().to_owned());
    Ok(report)
}
