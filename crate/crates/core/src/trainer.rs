//! Training loop, split evaluation and per-epoch reports.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{chronological_split_with, sample_negative, DatasetSplit, Link, TemporalGraph};
use crate::metrics::evaluate_auc;
use crate::model::{cross_entropy, predict_score, EffNetSpec, NEGATIVE, POSITIVE};
use crate::optim::Adam;
use crate::param::Parameterized;
use crate::predictor::{LinkPredictor, ModelConfig};
use crate::sampler::SamplingConfig;

/// `"auto"` uses the mean inter-event time of the training range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeScale {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl TimeScale {
    pub const AUTO: TimeScale = TimeScale::Auto(AutoTag::Auto);

    pub fn resolve(&self, g: &TemporalGraph, train: Range<usize>) -> f64 {
        match *self {
            TimeScale::Fixed(v) => v,
            TimeScale::Auto(_) => match g.mean_inter_event_time(train) {
                Some(m) if m > 0.0 && m.is_finite() => m,
                _ => 1.0,
            },
        }
    }
}

impl Default for TimeScale {
    fn default() -> Self {
        Self::AUTO
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub patience: usize,
    pub n_nearest: usize,
    pub p_parametric: usize,
    /// Defaults to `4 * n_nearest`.
    pub m_candidates: Option<usize>,
    pub alpha: f64,
    pub embed_dim: usize,
    pub time_scale: TimeScale,
    pub channels: Vec<usize>,
    /// Keep the upper triangle of the source-versus-destination channel.
    pub mutual_full: bool,
    pub width: usize,
    pub stage1_layers: usize,
    pub stage2_layers: usize,
    pub expansion: usize,
    pub head_channels: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            patience: 3,
            n_nearest: model.sampling.n_nearest,
            p_parametric: model.sampling.p_parametric,
            m_candidates: None,
            alpha: model.alpha,
            embed_dim: model.embed_dim,
            time_scale: TimeScale::AUTO,
            channels: model.channels,
            mutual_full: false,
            width: model.trunk.width,
            stage1_layers: model.trunk.stage1_layers,
            stage2_layers: model.trunk.stage2_layers,
            expansion: model.trunk.expansion,
            head_channels: model.trunk.head_channels,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sampling: SamplingConfig::new(self.n_nearest, self.p_parametric, self.m_candidates),
            alpha: self.alpha,
            embed_dim: self.embed_dim,
            channels: self.channels.clone(),
            trunk: EffNetSpec {
                in_channels: self.channels.len(),
                width: self.width,
                stage1_layers: self.stage1_layers,
                stage2_layers: self.stage2_layers,
                expansion: self.expansion,
                head_channels: self.head_channels,
                classes: 2,
            },
            mutual_full: self.mutual_full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("expansion", self.expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if let TimeScale::Fixed(v) = self.time_scale {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("time_scale must be positive, got {v}")));
            }
        }
        if let Some(m) = self.m_candidates {
            if m < self.p_parametric {
                return Err(Error::Config(format!(
                    "m_candidates ({m}) must be at least p_parametric ({})",
                    self.p_parametric
                )));
            }
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive and leave a test range, got {a} and {b}"
            )));
        }
        self.model_config().validate()
    }

    pub fn split(&self, g: &TemporalGraph) -> Result<DatasetSplit> {
        chronological_split_with(g, self.train_fraction, self.val_fraction)
    }
}

/// One row of `metrics.csv` (training) or one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    /// Mean cross-entropy; `None` for scorers without probabilities.
    pub loss: Option<f64>,
    pub auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation AUC.
    pub best: LinkPredictor,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Weights after the last epoch that ran.
    pub last: LinkPredictor,
    pub epochs: Vec<EpochReport>,
    pub split: DatasetSplit,
}

/// One negative per positive in `range`, drawn in index order from `seed`.
pub fn split_negatives(g: &TemporalGraph, range: Range<usize>, seed: u64) -> Vec<Link> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    range.map(|i| sample_negative(g, &g.link(i), &mut rng)).collect()
}

/// Scores every positive in `range` against its seeded negative.
pub fn evaluate_split(g: &TemporalGraph, range: Range<usize>, predictor: &LinkPredictor, seed: u64) -> Result<EvalReport> {
    let start = Instant::now();
    let positives: Vec<Link> = g.links()[range.clone()].to_vec();
    let negatives = split_negatives(g, range, seed);
    let pos = predictor.logits_for(&predictor.sequences(g, &positives)?)?;
    let neg = predictor.logits_for(&predictor.sequences(g, &negatives)?)?;
    let loss = pairwise_loss(&pos, &neg);
    let pos: Vec<f64> = pos.into_iter().map(predict_score).collect();
    let neg: Vec<f64> = neg.into_iter().map(predict_score).collect();
    Ok(EvalReport {
        epoch: 0,
        loss: Some(loss),
        auc: evaluate_auc(&pos, &neg)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn pairwise_loss(pos: &[[f64; 2]], neg: &[[f64; 2]]) -> f64 {
    let rows: Vec<f64> = pos.iter().chain(neg).flat_map(|r| r.iter().copied()).collect();
    let logits = ndarray::Array2::from_shape_vec((pos.len() + neg.len(), 2), rows).expect("two columns");
    let labels: Vec<usize> = pos.iter().map(|_| POSITIVE).chain(neg.iter().map(|_| NEGATIVE)).collect();
    cross_entropy(&logits, &labels).0
}

pub fn train(g: &TemporalGraph, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(g, config, |_| {})
}

/// Trains from scratch, calling `observer` after every epoch.
pub fn train_with_observer(
    g: &TemporalGraph,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let split = config.split(g)?;
    let time_scale = config.time_scale.resolve(g, split.train.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LinkPredictor::new(g.node_count(), time_scale, config.model_config(), &mut rng)?;
    let mut adam = Adam::new(config.learning_rate);

    let mut order: Vec<usize> = split.train.clone().collect();
    let mut epochs = Vec::new();
    let mut best: Option<(LinkPredictor, usize, f64)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let mut queries: Vec<Link> = batch.iter().map(|&i| g.link(i)).collect();
            let negatives: Vec<Link> = queries.iter().map(|q| sample_negative(g, q, &mut rng)).collect();
            queries.extend(negatives);
            let labels: Vec<usize> = (0..queries.len())
                .map(|i| if i < batch.len() { POSITIVE } else { NEGATIVE })
                .collect();
            let seqs = model.sequences(g, &queries)?;
            model.zero_grad();
            let loss = model.accumulate_gradients(&seqs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_index,
                    loss,
                });
            }
            adam.step(&mut model);
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate_split(g, split.validation.clone(), &model, config.seed)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_auc: val.auc,
            epoch_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&report);
        epochs.push(report);

        if best.as_ref().is_none_or(|b| val.auc > b.2) {
            best = Some((model.clone(), epoch, val.auc));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (best, best_epoch, best_val_auc) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_auc,
        last: model,
        epochs,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_scale_parses_auto_or_number() {
        #[derive(Deserialize)]
        struct W {
            t: TimeScale,
        }
        let auto: W = serde_json::from_str(r#"{"t":"auto"}"#).unwrap();
        assert_eq!(auto.t, TimeScale::AUTO);
        let fixed: W = serde_json::from_str(r#"{"t":3.5}"#).unwrap();
        assert_eq!(fixed.t, TimeScale::Fixed(3.5));
        assert!(serde_json::from_str::<W>(r#"{"t":"fast"}"#).is_err());
    }

    #[test]
    fn auto_scale_is_mean_gap_of_train_range() {
        let g = TemporalGraph::from_links(
            (0..10).map(|i| Link::new(0, 1, (i * i) as f64)).collect(),
            2,
        )
        .unwrap();
        // gaps over indices 0..4: 1, 3, 5
        assert_eq!(TimeScale::AUTO.resolve(&g, 0..4), 3.0);
        let flat = TemporalGraph::from_links(vec![Link::new(0, 1, 5.0); 10], 2).unwrap();
        assert_eq!(TimeScale::AUTO.resolve(&flat, 0..7), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
            TrainConfig { time_scale: TimeScale::Fixed(0.0), ..Default::default() },
            TrainConfig { train_fraction: 0.9, val_fraction: 0.1, ..Default::default() },
            TrainConfig { channels: vec![0, 7], ..Default::default() },
            TrainConfig { p_parametric: 3, m_candidates: Some(2), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "lr": 0.1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.batch_size, 128);
    }

    #[test]
    fn seeded_negatives_are_reproducible() {
        let g = TemporalGraph::from_links((0..30).map(|i| Link::new(i % 7, (i + 1) % 7, i as f64)).collect(), 7)
            .unwrap();
        assert_eq!(split_negatives(&g, 5..20, 4), split_negatives(&g, 5..20, 4));
        assert_ne!(split_negatives(&g, 5..20, 4), split_negatives(&g, 5..20, 5));
        for (i, n) in (5..20).zip(split_negatives(&g, 5..20, 4)) {
            assert_eq!((n.source, n.timestamp), (g.link(i).source, g.link(i).timestamp));
        }
    }
}
