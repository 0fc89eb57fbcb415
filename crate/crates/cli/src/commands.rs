use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use linkpat_core::baseline::edgebank_eval;
use linkpat_core::checkpoint::{self, CheckpointHeader, CheckpointMeta};
use linkpat_core::graph::chronological_split_with;
use linkpat_core::metrics::mean_std;
use linkpat_core::trainer::{evaluate_split, train_with_observer};
use linkpat_core::{load_csv, DatasetSplit, EpochReport, Error, EvalReport, Link, LinkPredictor, Origin, TemporalGraph};
use serde::Serialize;

use crate::config::RunConfig;
use crate::render::write_heatmap;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const NODE_MAP_FILE: &str = "node_map.csv";
pub const CHECKPOINT_FILE: &str = "best.lpck";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Val,
    Test,
}

impl SplitChoice {
    pub fn range(self, split: &DatasetSplit) -> std::ops::Range<usize> {
        match self {
            SplitChoice::Val => split.validation.clone(),
            SplitChoice::Test => split.test.clone(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitChoice::Val => "val",
            SplitChoice::Test => "test",
        }
    }
}

fn load_dataset(path: &Path) -> Result<TemporalGraph> {
    load_csv(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub epochs_run: usize,
    pub time_scale: f64,
    pub nodes: usize,
    pub links: usize,
}

/// Trains from a config file and writes the run directory: metrics, config
/// snapshot, node map, best checkpoint and a summary. `on_epoch` sees each
/// epoch after its metrics row is written.
pub fn cmd_train(
    config_path: &Path,
    output_root: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainSummary> {
    let config = RunConfig::load(config_path)?;
    let g = load_dataset(&config.dataset)?;
    let run_dir = config.run_dir(output_root)?;
    fs::create_dir_all(&run_dir).with_context(|| format!("cannot create {}", run_dir.display()))?;
    fs::write(run_dir.join(CONFIG_FILE), config.snapshot()?)?;
    g.node_map().write_csv(&run_dir.join(NODE_MAP_FILE))?;

    let mut metrics = csv::Writer::from_path(run_dir.join(METRICS_FILE))?;
    metrics.write_record(["epoch", "train_loss", "val_auc", "epoch_seconds"])?;
    let mut write_error = None;
    let outcome = train_with_observer(&g, &config.train, |e| {
        let row = [
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_auc.to_string(),
            e.epoch_seconds.to_string(),
        ];
        if let Err(err) = metrics.write_record(&row).and_then(|_| metrics.flush().map_err(Into::into)) {
            write_error.get_or_insert(err);
        }
        on_epoch(e);
    })?;
    if let Some(err) = write_error {
        return Err(err.into());
    }

    let meta = CheckpointMeta {
        node_labels: g.node_map().labels().to_vec(),
        node_map_file: Some(NODE_MAP_FILE.into()),
        run_config: Some(config.to_json()?),
        epoch: Some(outcome.best_epoch),
    };
    checkpoint::save(&run_dir.join(CHECKPOINT_FILE), &outcome.best, &meta)?;
    let summary = TrainSummary {
        run_dir: run_dir.clone(),
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc,
        epochs_run: outcome.epochs.len(),
        time_scale: outcome.best.encoder.time_scale,
        nodes: g.node_count(),
        links: g.len(),
    };
    fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Split fractions recorded in the checkpoint, else the defaults.
fn checkpoint_split(header: &CheckpointHeader, g: &TemporalGraph) -> Result<DatasetSplit> {
    let defaults = linkpat_core::TrainConfig::default();
    let fraction = |key: &str, d: f64| {
        header
            .run_config
            .as_ref()
            .and_then(|c| c.get(key))
            .and_then(|v| v.as_f64())
            .unwrap_or(d)
    };
    Ok(chronological_split_with(
        g,
        fraction("train_fraction", defaults.train_fraction),
        fraction("val_fraction", defaults.val_fraction),
    )?)
}

fn load_compatible(checkpoint_path: &Path, g: &TemporalGraph) -> Result<(LinkPredictor, CheckpointHeader)> {
    let (model, header) = checkpoint::load(checkpoint_path)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    header.check_compatible(g)?;
    Ok((model, header))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub split: SplitChoice,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub mean_auc: f64,
    /// Sample standard deviation; absent for a single repeat.
    pub std_auc: Option<f64>,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    split: &'a str,
    seed: u64,
    epoch: usize,
    loss: Option<f64>,
    auc: f64,
    seconds: f64,
}

fn write_reports(path: &Path, split: &str, seeds: &[u64], reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for (seed, r) in seeds.iter().zip(reports) {
        w.serialize(ReportRow {
            split,
            seed: *seed,
            epoch: r.epoch,
            loss: r.loss,
            auc: r.auc,
            seconds: r.seconds,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates a checkpoint on `repeats` negative-sampling seeds starting at
/// `seed`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset: &Path,
    split: SplitChoice,
    seed: u64,
    repeats: usize,
    output: Option<&Path>,
) -> Result<EvalSummary> {
    if repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let g = load_dataset(dataset)?;
    let (model, header) = load_compatible(checkpoint_path, &g)?;
    let range = split.range(&checkpoint_split(&header, &g)?);
    let seeds: Vec<u64> = (0..repeats as u64).map(|k| seed + k).collect();
    let mut reports = Vec::with_capacity(repeats);
    for &s in &seeds {
        let mut r = evaluate_split(&g, range.clone(), &model, s)?;
        r.epoch = header.epoch.unwrap_or(0);
        reports.push(r);
    }
    let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    if let Some(path) = output {
        write_reports(path, split.name(), &seeds, &reports)?;
    }
    Ok(EvalSummary {
        split,
        seeds,
        reports,
        mean_auc,
        std_auc,
    })
}

/// A query given as a link index, or as `source,destination,timestamp`
/// with original labels.
#[derive(Clone, Debug, PartialEq)]
pub enum QuerySpec {
    Index(usize),
    Triple {
        source: String,
        destination: String,
        timestamp: f64,
    },
}

impl FromStr for QuerySpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [i] => Ok(QuerySpec::Index(i.parse().map_err(|_| anyhow!("query index {i:?} is not a number"))?)),
            [a, b, t] => Ok(QuerySpec::Triple {
                source: a.to_string(),
                destination: b.to_string(),
                timestamp: t.parse().map_err(|_| anyhow!("query timestamp {t:?} is not a number"))?,
            }),
            _ => bail!("query must be an index or `source,destination,timestamp`"),
        }
    }
}

impl QuerySpec {
    pub fn resolve(&self, g: &TemporalGraph) -> Result<Link, Error> {
        match self {
            QuerySpec::Index(i) if *i < g.len() => Ok(g.link(*i)),
            QuerySpec::Index(i) => Err(Error::QueryNotFound(format!(
                "index {i} is out of range for {} links",
                g.len()
            ))),
            QuerySpec::Triple {
                source,
                destination,
                timestamp,
            } => {
                let id = |label: &str| {
                    g.node_map()
                        .id(label)
                        .ok_or_else(|| Error::QueryNotFound(format!("node {label:?} is not in the dataset")))
                };
                Ok(Link::new(id(source)?, id(destination)?, *timestamp))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainedLink {
    pub source: String,
    pub destination: String,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainedSlot {
    pub slot: usize,
    /// `None` for PAD slots.
    pub link: Option<ExplainedLink>,
    pub origin: Option<Origin>,
    pub link_index: Option<usize>,
    pub importance: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplanationReport {
    pub query: ExplainedLink,
    pub score: f64,
    pub logits: [f64; 2],
    pub cam_total: f64,
    pub cam_trace: f64,
    /// Positive-class activation map, row by row, PAD cells included.
    pub cam: Vec<Vec<f64>>,
    /// One entry per slot; the last is the query.
    pub slots: Vec<ExplainedSlot>,
}

/// Explains one query and writes the JSON report, plus a heatmap when
/// `heatmap` is given.
pub fn cmd_explain(
    checkpoint_path: &Path,
    dataset: &Path,
    query: &QuerySpec,
    output: &Path,
    heatmap: Option<&Path>,
) -> Result<ExplanationReport> {
    let g = load_dataset(dataset)?;
    let (model, header) = load_compatible(checkpoint_path, &g)?;
    let q = query.resolve(&g)?;
    let ex = model.explain(&g, &q)?;
    let labels = header.node_map();
    let describe = |l: &Link| ExplainedLink {
        source: labels.label(l.source).unwrap_or("?").to_owned(),
        destination: labels.label(l.destination).unwrap_or("?").to_owned(),
        timestamp: l.timestamp,
    };
    let slots = ex
        .sequence
        .slots()
        .iter()
        .zip(&ex.importance)
        .enumerate()
        .map(|(i, (s, imp))| ExplainedSlot {
            slot: i,
            link: s.as_ref().map(|s| describe(&s.link)),
            origin: s.as_ref().map(|s| s.origin),
            link_index: s.as_ref().and_then(|s| s.index),
            importance: *imp,
        })
        .collect();
    let report = ExplanationReport {
        query: describe(&q),
        score: ex.score,
        logits: ex.logits,
        cam_total: ex.cam.values.sum(),
        cam_trace: ex.cam.values.diag().sum(),
        cam: ex.cam.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        slots,
    };
    fs::write(output, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("cannot write {}", output.display()))?;
    if let Some(path) = heatmap {
        write_heatmap(&ex.cam.values, ex.sequence.pad_count(), path)?;
    }
    Ok(report)
}

/// Memory baseline on one split of `dataset`.
pub fn cmd_baseline(
    dataset: &Path,
    split: SplitChoice,
    seed: u64,
    directed: bool,
    output: Option<&Path>,
) -> Result<EvalReport> {
    let g = load_dataset(dataset)?;
    let defaults = linkpat_core::TrainConfig::default();
    let parts = chronological_split_with(&g, defaults.train_fraction, defaults.val_fraction)?;
    let report = edgebank_eval(&g, split.range(&parts), seed, directed)?;
    if let Some(path) = output {
        write_reports(path, split.name(), &[seed], std::slice::from_ref(&report))?;
    }
    Ok(report)
}
