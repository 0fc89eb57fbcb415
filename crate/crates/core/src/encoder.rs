//! Link embeddings and the five-channel attention image.
//!
//! Channel order is fixed:
//!
//! | index | content                                    | depends on      |
//! |-------|--------------------------------------------|-----------------|
//! | 0     | dot products of link embeddings            | H, omega, phase |
//! | 1     | `exp(-alpha * |t_i - t_j|)`                | timestamps      |
//! | 2     | source equals source                       | node equality   |
//! | 3     | destination equals destination             | node equality   |
//! | 4     | source of row equals destination of column | node equality   |
//!
//! After computing the raw matrices the strict upper triangle of every
//! channel is zeroed, then every row and column belonging to a PAD slot.
//! Channel 4 is the one raw matrix that is not symmetric; its upper triangle
//! can optionally be kept (see [`assemble_image_with`]).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Link, NodeId};
use crate::param::{join, Param, Parameterized};
use crate::sampler::LinkSequence;

pub const NUM_CHANNELS: usize = 5;

/// `phi(t)_i = cos(omega_i * t + phase_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoder {
    pub omega: Param,
    pub phase: Param,
}

impl TimeEncoder {
    /// Frequencies are the reciprocals of periods drawn log-uniformly from
    /// `[1e-2, 1e2]`; phases start at zero.
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut omega = Param::zeros(&[dim]);
        for w in omega.value.iter_mut() {
            let log_period: f64 = rng.gen_range(-2.0..=2.0);
            *w = 10f64.powf(-log_period);
        }
        Self {
            omega,
            phase: Param::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn encode(&self, dt: f64) -> Array1<f64> {
        self.omega
            .value
            .iter()
            .zip(&self.phase.value)
            .map(|(w, b)| (w * dt + b).cos())
            .collect()
    }
}

/// Dense `(|V| + 1) x d` table; the extra row serves ids outside the
/// training vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddingTable {
    pub table: Param,
    node_count: usize,
}

impl NodeEmbeddingTable {
    pub fn new<R: Rng + ?Sized>(node_count: usize, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim.max(1) as f64).sqrt();
        Self {
            table: Param::normal(&[node_count + 1, dim], std, rng),
            node_count,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    pub fn row_index(&self, node: NodeId) -> usize {
        node.min(self.node_count)
    }

    pub fn row(&self, node: NodeId) -> &[f64] {
        let d = self.dim();
        let r = self.row_index(node);
        &self.table.value[r * d..(r + 1) * d]
    }
}

/// Trainable link encoder: node table, time encoding and the time unit used
/// to scale all gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub time: TimeEncoder,
    pub nodes: NodeEmbeddingTable,
    pub time_scale: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(node_count: usize, dim: usize, time_scale: f64, rng: &mut R) -> Self {
        let nodes = NodeEmbeddingTable::new(node_count, dim, rng);
        let time = TimeEncoder::new(dim, rng);
        Self {
            time,
            nodes,
            time_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.time.dim()
    }

    pub fn set_node_embedding(&mut self, node: NodeId, values: &[f64]) {
        let d = self.dim();
        let r = self.nodes.row_index(node);
        self.nodes.table.value[r * d..(r + 1) * d].copy_from_slice(values);
    }

    #[cfg(test)]
    pub(crate) fn zero_for_tests(&mut self) {
        self.nodes.table.value.fill(0.0);
        self.time.omega.value.fill(0.0);
        self.time.phase.value.fill(0.0);
    }

    fn scaled_gap(&self, t_query: f64, t: f64) -> f64 {
        (t_query - t) / self.time_scale
    }

    /// `phi(t_query - t) + H(source) + H(destination)`.
    pub fn link_embed(&self, link: &Link, t_query: f64) -> Array1<f64> {
        let mut e = self.time.encode(self.scaled_gap(t_query, link.timestamp));
        for (v, (a, b)) in e.iter_mut().zip(
            self.nodes
                .row(link.source)
                .iter()
                .zip(self.nodes.row(link.destination)),
        ) {
            *v += a + b;
        }
        e
    }

    pub fn query_embed(&self, query: &Link) -> Array1<f64> {
        self.link_embed(query, query.timestamp)
    }

    /// `l x d` embeddings; PAD rows are zero.
    pub fn embed_sequence(&self, seq: &LinkSequence) -> Array2<f64> {
        let t_q = seq.query().timestamp;
        let mut out = Array2::zeros((seq.len(), self.dim()));
        for (i, slot) in seq.slots().iter().enumerate() {
            if let Some(s) = slot {
                out.row_mut(i).assign(&self.link_embed(&s.link, t_q));
            }
        }
        out
    }

    /// Back-propagates a gradient on the assembled transductive channel into
    /// the parameter gradients. Entries that assembly zeroes carry no
    /// gradient.
    pub fn backward(&mut self, seq: &LinkSequence, grad_channel: ArrayView2<f64>) {
        let l = seq.len();
        let pad = seq.pad_count();
        let embeds = self.embed_sequence(seq);
        let mut g = Array2::<f64>::zeros((l, l));
        for i in pad..l {
            for j in pad..=i {
                g[[i, j]] = grad_channel[[i, j]];
            }
        }
        let sym = &g + &g.t();
        let d_embed = sym.dot(&embeds);

        let d = self.dim();
        let t_q = seq.query().timestamp;
        for (i, slot) in seq.slots().iter().enumerate().skip(pad) {
            let link = slot.expect("non-PAD slot").link;
            let row = d_embed.row(i);
            let dt = self.scaled_gap(t_q, link.timestamp);
            for node in [link.source, link.destination] {
                let base = self.nodes.row_index(node) * d;
                for k in 0..d {
                    self.nodes.table.grad[base + k] += row[k];
                }
            }
            for k in 0..d {
                let u = self.time.omega.value[k] * dt + self.time.phase.value[k];
                let ds = -u.sin() * row[k];
                self.time.omega.grad[k] += ds * dt;
                self.time.phase.grad[k] += ds;
            }
        }
    }
}

impl Parameterized for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "node_embedding"), &mut self.nodes.table);
        f(&join(prefix, "time_omega"), &mut self.time.omega);
        f(&join(prefix, "time_phase"), &mut self.time.phase);
    }
}

/// Pairwise dot products of embedding rows.
pub fn transductive_channel(embeds: ArrayView2<f64>) -> Array2<f64> {
    embeds.dot(&embeds.t())
}

/// `exp(-alpha * |t_i - t_j| / time_scale)`; PAD rows and columns are zero.
pub fn time_channel(seq: &LinkSequence, alpha: f64, time_scale: f64) -> Array2<f64> {
    let ts = seq.timestamps();
    let l = ts.len();
    Array2::from_shape_fn((l, l), |(i, j)| match (ts[i], ts[j]) {
        (Some(a), Some(b)) => (-alpha * (a - b).abs() / time_scale).exp(),
        _ => 0.0,
    })
}

/// 1 where both ids are present and equal, else 0.
pub fn identity_channel(rows: &[Option<NodeId>], cols: &[Option<NodeId>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| match (rows[i], cols[j]) {
        (Some(a), Some(b)) if a == b => 1.0,
        _ => 0.0,
    })
}

/// The five channel matrices before triangle and PAD zeroing.
pub fn raw_channels(seq: &LinkSequence, encoder: &Encoder, alpha: f64) -> [Array2<f64>; NUM_CHANNELS] {
    let embeds = encoder.embed_sequence(seq);
    let src = seq.sources();
    let dst = seq.destinations();
    [
        transductive_channel(embeds.view()),
        time_channel(seq, alpha, encoder.time_scale),
        identity_channel(&src, &src),
        identity_channel(&dst, &dst),
        identity_channel(&src, &dst),
    ]
}

/// `5 x l x l` input for the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelImage {
    pub data: Array3<f64>,
    pub pad_count: usize,
}

impl ChannelImage {
    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    /// Nested `[channel][row][col]` arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let nested: Vec<Vec<Vec<f64>>> = self
            .data
            .outer_iter()
            .map(|c| c.outer_iter().map(|r| r.to_vec()).collect())
            .collect();
        serde_json::json!(nested)
    }
}

/// Index of the source-versus-destination channel, the only raw channel
/// that is not symmetric.
pub const MUTUAL_CHANNEL: usize = 4;

/// Stacks the channels, zeroing PAD rows and columns and the strict upper
/// triangle of every channel.
pub fn assemble_image(seq: &LinkSequence, encoder: &Encoder, alpha: f64) -> ChannelImage {
    assemble_image_with(seq, encoder, alpha, false)
}

/// As [`assemble_image`]; with `mutual_full` the strict upper triangle of
/// [`MUTUAL_CHANNEL`] is kept, since it holds `s_i == o_j` for `i < j`,
/// which the lower triangle does not.
pub fn assemble_image_with(seq: &LinkSequence, encoder: &Encoder, alpha: f64, mutual_full: bool) -> ChannelImage {
    let l = seq.len();
    let pad = seq.pad_count();
    let mut data = Array3::zeros((NUM_CHANNELS, l, l));
    for (c, raw) in raw_channels(seq, encoder, alpha).into_iter().enumerate() {
        let mut dst = data.index_axis_mut(Axis(0), c);
        let full = mutual_full && c == MUTUAL_CHANNEL;
        for i in pad..l {
            let end = if full { l - 1 } else { i };
            dst.slice_mut(s![i, pad..=end]).assign(&raw.slice(s![i, pad..=end]));
        }
    }
    ChannelImage {
        data,
        pad_count: pad,
    }
}
