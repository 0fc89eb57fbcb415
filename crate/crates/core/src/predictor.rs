//! End-to-end scorer: sampling, channel image, classifier.

use ndarray::s;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{assemble_image_with, ChannelImage, Encoder, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{Link, TemporalGraph};
use crate::model::{
    cross_entropy, link_importance, predict_score, stack_images, CamMap, EffNet, EffNetSpec,
    POSITIVE,
};
use crate::param::{join, Param, Parameterized};
use crate::sampler::{sample_sequence, LinkSequence, SamplingConfig};

/// Architecture and input hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sampling: SamplingConfig,
    pub alpha: f64,
    pub embed_dim: usize,
    /// Channel indices fed to the classifier, in order.
    pub channels: Vec<usize>,
    pub trunk: EffNetSpec,
    /// Keep the upper triangle of the source-versus-destination channel.
    #[serde(default)]
    pub mutual_full: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            alpha: 5.0,
            embed_dim: 64,
            channels: (0..NUM_CHANNELS).collect(),
            trunk: EffNetSpec::default(),
            mutual_full: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c >= NUM_CHANNELS) {
            return Err(Error::Config(format!(
                "channels must be a non-empty subset of 0..{NUM_CHANNELS}, got {:?}",
                self.channels
            )));
        }
        if self.trunk.in_channels != self.channels.len() {
            return Err(Error::Config(format!(
                "trunk expects {} input channels but {} are selected",
                self.trunk.in_channels,
                self.channels.len()
            )));
        }
        if self.trunk.width == 0 || self.trunk.head_channels == 0 || self.trunk.classes != 2 {
            return Err(Error::Config("trunk needs positive widths and 2 classes".into()));
        }
        Ok(())
    }
}

/// One classified query with its explanation.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub sequence: LinkSequence,
    pub image: ChannelImage,
    pub score: f64,
    pub logits: [f64; 2],
    pub cam: CamMap,
    /// Per slot; `None` for PAD.
    pub importance: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct LinkPredictor {
    pub encoder: Encoder,
    pub net: EffNet,
    pub config: ModelConfig,
}

const EVAL_CHUNK: usize = 256;

impl LinkPredictor {
    pub fn new<R: Rng + ?Sized>(node_count: usize, time_scale: f64, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(Error::Config(format!("time scale must be positive, got {time_scale}")));
        }
        let encoder = Encoder::new(node_count, config.embed_dim, time_scale, rng);
        let net = EffNet::new(config.trunk, rng);
        Ok(Self { encoder, net, config })
    }

    pub fn sequence(&self, g: &TemporalGraph, query: &Link) -> Result<LinkSequence> {
        sample_sequence(g, query, &self.config.sampling, &self.encoder)
    }

    pub fn image(&self, seq: &LinkSequence) -> ChannelImage {
        assemble_image_with(seq, &self.encoder, self.config.alpha, self.config.mutual_full)
    }

    pub fn sequences(&self, g: &TemporalGraph, queries: &[Link]) -> Result<Vec<LinkSequence>> {
        queries.par_iter().map(|q| self.sequence(g, q)).collect()
    }

    /// Inference-mode logits for prepared sequences.
    pub fn logits_for(&self, seqs: &[LinkSequence]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let images: Vec<ChannelImage> = chunk.par_iter().map(|s| self.image(s)).collect();
            let (input, geo) = stack_images(&images, &self.config.channels)?;
            let logits = self.net.logits(&input, geo)?;
            out.extend(logits.rows().into_iter().map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    /// Positive-class probabilities for `queries`.
    pub fn score_links(&self, g: &TemporalGraph, queries: &[Link]) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(EVAL_CHUNK) {
            let seqs = self.sequences(g, chunk)?;
            scores.extend(self.logits_for(&seqs)?.into_iter().map(predict_score));
        }
        Ok(scores)
    }

    /// Training-mode loss on fixed sequences; accumulates gradients into
    /// every trainable parameter. Selection inside the sequences is treated
    /// as constant.
    pub fn accumulate_gradients(&mut self, seqs: &[LinkSequence], labels: &[usize]) -> Result<f64> {
        let images: Vec<ChannelImage> = seqs.par_iter().map(|s| self.image(s)).collect();
        let (input, geo) = stack_images(&images, &self.config.channels)?;
        drop(images);
        let logits = self.net.forward_train(&input, geo)?;
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let dinput = self.net.backward(&dlogits);
        if let Some(row) = self.config.channels.iter().position(|&c| c == 0) {
            let (l, area) = (geo.side, geo.area());
            for (b, seq) in seqs.iter().enumerate() {
                let block = dinput.slice(s![row, b * area..(b + 1) * area]);
                let grad = block.into_shape_with_order((l, l)).expect("square block");
                self.encoder.backward(seq, grad);
            }
        }
        Ok(loss)
    }

    /// Training-mode (batch statistics) loss without a backward pass.
    pub fn train_mode_loss(&mut self, seqs: &[LinkSequence], labels: &[usize]) -> Result<f64> {
        let images: Vec<ChannelImage> = seqs.iter().map(|s| self.image(s)).collect();
        let (input, geo) = stack_images(&images, &self.config.channels)?;
        let logits = self.net.forward_train(&input, geo)?;
        self.net.clear_cache();
        Ok(cross_entropy(&logits, labels).0)
    }

    pub fn explain(&self, g: &TemporalGraph, query: &Link) -> Result<Explanation> {
        let sequence = self.sequence(g, query)?;
        let image = self.image(&sequence);
        let logits = self.net.forward_image(&image, &self.config.channels)?;
        let cam = self.net.cam(&image, &self.config.channels, POSITIVE)?;
        let importance = link_importance(&cam, sequence.pad_count());
        Ok(Explanation {
            score: predict_score(logits),
            logits,
            importance,
            cam,
            image,
            sequence,
        })
    }
}

impl Parameterized for LinkPredictor {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.net.visit_params(&join(prefix, "net"), f);
    }
}
