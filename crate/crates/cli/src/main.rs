use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use temstad::config::Config;
use temstad::dataio::{inject, load_csv, save_long_csv, synth_generate, Dataset, LoadOptions, Schema};
use temstad::eval::evaluate;
use temstad::graphlearn::{write_adjacency_csv, write_scores_csv as write_graph_scores};
use temstad::model::{describe, Ablation};
use temstad::pipeline::{
    build, detect, fit, load_model, prepare, prepare_test, run_scheme, save_model, scheme_registry, write_scores_csv, zscore_baseline, Bundle,
};
use temstad::train::write_history_csv;

#[derive(Parser)]
#[command(name = "temstad", version, about = "Time/frequency reconstruction anomaly detection for sensor networks")]
struct Cli {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Layout of input CSV files.
    #[arg(long, global = true, value_enum, default_value_t = SchemaArg::Long)]
    schema: SchemaArg,
    /// Fail on malformed input rows instead of skipping them.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Long,
    Ibrl,
    LoraOsd,
}

impl From<SchemaArg> for Schema {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Long => Schema::Long,
            SchemaArg::Ibrl => Schema::Ibrl,
            SchemaArg::LoraOsd => Schema::LoraOsd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series and write train.csv / test.csv.
    Synth,
    /// Apply the configured injections; writes injected.csv.
    Inject {
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit normalization on a training file and write processed series.
    Preprocess {
        #[arg(long)]
        train: PathBuf,
        /// Extra file normalized with the training statistics.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Learn the node graph; writes adjacency.csv and graph_scores.csv.
    Graph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        time_only: bool,
    },
    /// Train a model; writes model/, checkpoints/ and loss_history.csv.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Ablation scheme (1..=7).
        #[arg(long, default_value_t = 7)]
        scheme: u8,
    },
    /// Score a file with a trained model; writes scores.csv.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare a score file against a labeled file; writes metrics.json.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run one ablation scheme end to end; writes report.json.
    Scheme {
        #[arg(long)]
        id: u8,
        /// Training file; the synthetic split is used when omitted.
        #[arg(long, requires = "test")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        test: Option<PathBuf>,
    },
    /// Print the model inventory for a scheme.
    Describe {
        #[arg(long, default_value_t = 7)]
        scheme: u8,
        #[arg(long, default_value_t = 3)]
        modalities: usize,
    },
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    schema: Schema,
    opts: LoadOptions,
}

impl Ctx {
    fn load(&self, path: &Path) -> Result<Dataset> {
        load_csv(path, self.schema, self.opts).with_context(|| format!("loading {}", path.display()))
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    /// Prints `report` and stores it under the output directory.
    fn report(&self, name: &str, report: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(report)?;
        std::fs::write(self.out_file(name)?, &text)?;
        println!("{}", text);
        Ok(())
    }
}

fn ablation(id: u8) -> Result<Ablation> {
    let reg = scheme_registry();
    match reg.get(&id.to_string()) {
        Ok(s) => Ok(s.ablation()),
        Err(_) => bail!("scheme must be 1..=7, got {}", id),
    }
}

fn with_values(ds: &Dataset, values: temstad::tensor::Tensor) -> Dataset {
    Dataset { values, ..ds.clone() }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = real_main(Cli::parse()) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn real_main(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        schema: cli.schema.into(),
        opts: LoadOptions { strict: cli.strict },
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Synth => {
            let s = &cfg.synth;
            let ds = synth_generate(s.nodes, s.modalities, s.length, cfg.seed)?;
            let (train, test) = ds.split(cfg.train_fraction)?;
            save_long_csv(&train, &ctx.out_file("train.csv")?)?;
            save_long_csv(&test, &ctx.out_file("test.csv")?)?;
            ctx.report(
                "synth.json",
                &json!({"nodes": s.nodes, "modalities": s.modalities, "train_len": train.len(), "test_len": test.len(), "seed": cfg.seed}),
            )?;
        }
        Command::Inject { input } => {
            let mut ds = ctx.load(&input)?;
            for spec in &cfg.injections {
                ds = inject(&ds, spec)?;
            }
            save_long_csv(&ds, &ctx.out_file("injected.csv")?)?;
            let labeled = ds.labels_or_zero().iter().filter(|&&l| l != 0).count();
            ctx.report("inject.json", &json!({"labeled_elements": labeled, "total_elements": ds.values.numel()}))?;
        }
        Command::Preprocess { train, input } => {
            let ds = ctx.load(&train)?;
            let prepared = prepare(&ds, cfg, false)?;
            save_long_csv(&with_values(&ds, prepared.train.clone()), &ctx.out_file("train_processed.csv")?)?;
            std::fs::write(ctx.out_file("stats.json")?, serde_json::to_string_pretty(&prepared.stats)?)?;
            if let Some(p) = input {
                let other = ctx.load(&p)?;
                let x = prepare_test(&other.values, &prepared.stats, cfg)?;
                save_long_csv(&with_values(&other, x), &ctx.out_file("processed.csv")?)?;
            }
            let constant = prepared.stats.std.iter().filter(|&&s| s == 0.0).count();
            ctx.report("preprocess.json", &json!({"channels": prepared.stats.std.len(), "constant_channels": constant}))?;
        }
        Command::Graph { input, time_only } => {
            let ds = ctx.load(&input)?;
            let prepared = prepare(&ds, cfg, time_only)?;
            let (adj, sc) = (&prepared.adjacency, &prepared.scores);
            write_adjacency_csv(&ctx.out_file("adjacency.csv")?, adj)?;
            write_graph_scores(&ctx.out_file("graph_scores.csv")?, sc)?;
            let edges = adj.a.iter().filter(|&&e| e != 0).count() / 2;
            ctx.report("graph.json", &json!({"nodes": adj.n, "edges": edges, "node_ids": ds.node_ids}))?;
        }
        Command::Train { input, scheme } => {
            let ab = ablation(scheme)?;
            let ds = ctx.load(&input)?;
            let prepared = prepare(&ds, cfg, ab.time_only_graph)?;
            let ckpt = ctx.out_file("checkpoints")?;
            std::fs::create_dir_all(&ckpt)?;
            let trained = fit(&prepared, cfg, &ab, Some(&ckpt))?;
            write_history_csv(&ctx.out_file("loss_history.csv")?, &trained.history)?;
            save_model(&ctx.out_file("model")?, &Bundle::new(cfg, &ab, &prepared, trained.threshold), &trained.store)?;
            ctx.report(
                "train.json",
                &json!({
                    "scheme": scheme,
                    "epochs": trained.history.len(),
                    "first_epoch": trained.history.first(),
                    "final_epoch": trained.history.last(),
                    "threshold": trained.threshold,
                    "train_losses": trained.train_losses,
                    "config_digest": cfg.digest(),
                }),
            )?;
        }
        Command::Detect { model, input } => {
            let (bundle, trained) = load_model(&model)?;
            let ds = ctx.load(&input)?;
            if ds.modalities() != bundle.modalities || ds.nodes() != bundle.stats.nodes {
                bail!(
                    "model expects {} nodes x {} modalities, input has {} x {}",
                    bundle.stats.nodes,
                    bundle.modalities,
                    ds.nodes(),
                    ds.modalities()
                );
            }
            let x = prepare_test(&ds.values, &bundle.stats, &bundle.config)?;
            let det = detect(&trained, &x, &bundle.config)?;
            write_scores_csv(&ctx.out_file("scores.csv")?, &ds, &det)?;
            let covered = det.trace.covered.iter().filter(|&&c| c).count();
            let flagged = det.labels.iter().filter(|&&l| l != 0).count();
            ctx.report("detect.json", &json!({"threshold": bundle.threshold, "covered_ticks": covered, "flagged_elements": flagged}))?;
        }
        Command::Eval { scores, truth } => {
            let ds = ctx.load(&truth)?;
            let Some(labels) = ds.labels.as_ref() else {
                bail!("{} has no label column", truth.display());
            };
            let (t, m) = (ds.len(), ds.modalities());
            let node_idx: HashMap<&str, usize> = ds.node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mod_idx: HashMap<&str, usize> = ds.modality_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut pred = vec![0u8; labels.len()];
            let mut mask = vec![false; labels.len()];
            let mut rdr = csv::Reader::from_path(&scores).with_context(|| format!("reading {}", scores.display()))?;
            for (line, row) in rdr.records().enumerate() {
                let row = row?;
                let at = || format!("{}:{}", scores.display(), line + 2);
                if row.len() != 5 {
                    bail!("{}: expected 5 fields", at());
                }
                let ti: usize = row[0].parse().with_context(at)?;
                let ni = *node_idx.get(&row[1]).with_context(|| format!("{}: unknown node `{}`", at(), &row[1]))?;
                let mi = *mod_idx.get(&row[2]).with_context(|| format!("{}: unknown modality `{}`", at(), &row[2]))?;
                if ti >= t {
                    bail!("{}: time_index {} beyond {} ticks", at(), ti, t);
                }
                let i = (ni * t + ti) * m + mi;
                pred[i] = row[4].parse().with_context(at)?;
                mask[i] = true;
            }
            let mut report = evaluate(&pred, labels, ds.kinds.as_deref(), Some(&mask))?;
            report.config_digest = cfg.digest();
            ctx.report("metrics.json", &serde_json::to_value(&report)?)?;
        }
        Command::Scheme { id, train, test } => {
            let (train, test) = match (train, test) {
                (Some(a), Some(b)) => (ctx.load(&a)?, ctx.load(&b)?),
                _ => temstad::pipeline::synthetic_split(cfg)?,
            };
            std::fs::create_dir_all(&ctx.out)?;
            let mut report = run_scheme(id, &train, &test, cfg, Some(&ctx.out))?;
            report.baseline = Some(zscore_baseline(&train, &test)?);
            ctx.report("report.json", &serde_json::to_value(&report)?)?;
        }
        Command::Describe { scheme, modalities } => {
            let ab = ablation(scheme)?;
            let (model, store) = build(cfg, &ab, modalities)?;
            ctx.report("describe.json", &serde_json::to_value(describe(&model, &store))?)?;
        }
    }
    Ok(())
}
