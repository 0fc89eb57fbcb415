//! Central finite-difference check of every trainable gradient on a tiny
//! model and a fixed batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{sample_negative, Link, TemporalGraph};
use crate::model::{EffNetSpec, NEGATIVE, POSITIVE};
use crate::param::Parameterized;
use crate::predictor::{LinkPredictor, ModelConfig};
use crate::sampler::{LinkSequence, SamplingConfig};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Nodes that appear in links; `extra_nodes` more never do.
    pub active_nodes: usize,
    pub extra_nodes: usize,
    pub links: usize,
    pub embed_dim: usize,
    pub sampling: SamplingConfig,
    pub trunk: EffNetSpec,
    /// Positives in the batch; each is paired with one negative.
    pub batch: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Multiplies the analytic gradient of the named tensor before
    /// comparison. Used as a negative control.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            active_nodes: 5,
            extra_nodes: 2,
            links: 24,
            embed_dim: 3,
            sampling: SamplingConfig::new(2, 1, Some(3)),
            trunk: EffNetSpec {
                in_channels: 5,
                width: 3,
                stage1_layers: 0,
                stage2_layers: 0,
                expansion: 2,
                head_channels: 4,
                classes: 2,
            },
            batch: 3,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    /// Largest analytic gradient magnitude on embedding rows of nodes absent
    /// from the batch's sequences.
    pub untouched_embedding_grad: f64,
    pub touched_rows: Vec<usize>,
}

fn nudge(model: &mut LinkPredictor, tensor: usize, entry: usize, delta: f64) {
    let mut k = 0;
    model.visit_params("", &mut |_, p| {
        if k == tensor {
            p.value[entry] += delta;
        }
        k += 1;
    });
}

pub fn gradient_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let links: Vec<Link> = (0..config.links)
        .map(|i| {
            let s = rng.gen_range(0..config.active_nodes);
            let o = rng.gen_range(0..config.active_nodes);
            Link::new(s, o, i as f64 + rng.gen_range(0.0..0.5))
        })
        .collect();
    let node_count = config.active_nodes + config.extra_nodes;
    let g = TemporalGraph::from_links(links, node_count)?;
    let model_config = ModelConfig {
        sampling: config.sampling,
        embed_dim: config.embed_dim,
        trunk: config.trunk,
        ..ModelConfig::default()
    };
    let mut model = LinkPredictor::new(node_count, 3.0, model_config, &mut rng)?;

    let mut queries: Vec<Link> = g.links()[g.len() - config.batch..].to_vec();
    for i in 0..config.batch {
        let mut negative = sample_negative(&g, &queries[i], &mut rng);
        negative.destination %= config.active_nodes;
        queries.push(negative);
    }
    let labels: Vec<usize> = (0..queries.len())
        .map(|i| if i < config.batch { POSITIVE } else { NEGATIVE })
        .collect();
    let seqs: Vec<LinkSequence> = model.sequences(&g, &queries)?;

    let mut touched: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.slots().iter().flatten().flat_map(|l| [l.link.source, l.link.destination]))
        .collect();
    touched.sort_unstable();
    touched.dedup();

    model.zero_grad();
    model.accumulate_gradients(&seqs, &labels)?;
    let mut analytic = Vec::new();
    let mut untouched = 0.0f64;
    let dim = config.embed_dim;
    model.visit_params("", &mut |name, p| {
        let mut grad = p.grad.clone();
        if let Some((target, factor)) = &config.corrupt {
            if name == target {
                grad.iter_mut().for_each(|v| *v *= factor);
            }
        }
        if name.ends_with("node_embedding") {
            for (row, chunk) in grad.chunks(dim).enumerate() {
                if touched.binary_search(&row).is_err() {
                    untouched = chunk.iter().fold(untouched, |m, v| m.max(v.abs()));
                }
            }
        }
        analytic.push((name.to_owned(), p.trainable, grad));
    });

    let h = config.step;
    let mut worst = (0.0, (String::new(), 0));
    let mut checked = 0;
    for (t, (name, trainable, grad)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (e, &a) in grad.iter().enumerate() {
            nudge(&mut model, t, e, h);
            let plus = model.train_mode_loss(&seqs, &labels)?;
            nudge(&mut model, t, e, -2.0 * h);
            let minus = model.train_mode_loss(&seqs, &labels)?;
            nudge(&mut model, t, e, h);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            if rel > worst.0 {
                worst = (rel, (name.clone(), e));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst: worst.1,
        checked,
        untouched_embedding_grad: untouched,
        touched_rows: touched,
    })
}
