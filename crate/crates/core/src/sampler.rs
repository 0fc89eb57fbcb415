//! Builds model inputs: the `N` nearest incident links, up to `P` links
//! recalled by learned closeness from a wider window of `M`, and the query.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Link, NodeId, TemporalGraph};

/// How a slot of a [`LinkSequence`] was filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Nearest,
    Parametric,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqLink {
    pub link: Link,
    pub origin: Origin,
    /// Position in the graph's link stream; `None` for the query.
    pub index: Option<usize>,
}

/// `l = N + P + 1` slots: PAD slots first, then history in ascending time,
/// then the query.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkSequence {
    slots: Vec<Option<SeqLink>>,
}

impl LinkSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Option<SeqLink>] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> Option<&SeqLink> {
        self.slots[i].as_ref()
    }

    pub fn pad_count(&self) -> usize {
        self.slots.iter().take_while(|s| s.is_none()).count()
    }

    pub fn query(&self) -> &Link {
        &self.slots.last().and_then(Option::as_ref).expect("query slot").link
    }

    pub fn sources(&self) -> Vec<Option<NodeId>> {
        self.slots.iter().map(|s| s.map(|s| s.link.source)).collect()
    }

    pub fn destinations(&self) -> Vec<Option<NodeId>> {
        self.slots
            .iter()
            .map(|s| s.map(|s| s.link.destination))
            .collect()
    }

    pub fn timestamps(&self) -> Vec<Option<f64>> {
        self.slots.iter().map(|s| s.map(|s| s.link.timestamp)).collect()
    }

    /// Same sequence with every node id passed through `f`.
    pub fn relabel(&self, f: impl Fn(NodeId) -> NodeId) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .map(|s| {
                    s.map(|mut s| {
                        s.link.source = f(s.link.source);
                        s.link.destination = f(s.link.destination);
                        s
                    })
                })
                .collect(),
        }
    }

    /// Builds a sequence directly from slots. The last slot must be present.
    pub fn from_slots(slots: Vec<Option<SeqLink>>) -> Result<Self> {
        match slots.last() {
            Some(Some(_)) => Ok(Self { slots }),
            _ => Err(Error::Shape("sequence must end with a query link".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_nearest: usize,
    pub p_parametric: usize,
    pub m_candidates: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::new(12, 0, None)
    }
}

impl SamplingConfig {
    /// `m_candidates` defaults to `4 * n_nearest`.
    pub fn new(n_nearest: usize, p_parametric: usize, m_candidates: Option<usize>) -> Self {
        Self {
            n_nearest,
            p_parametric,
            m_candidates: m_candidates.unwrap_or(4 * n_nearest).max(p_parametric),
        }
    }

    pub fn sequence_len(&self) -> usize {
        self.n_nearest + self.p_parametric + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_candidates < self.p_parametric {
            return Err(Error::Config(format!(
                "m_candidates ({}) must be at least p_parametric ({})",
                self.m_candidates, self.p_parametric
            )));
        }
        if self.sequence_len() < 2 {
            return Err(Error::Config(
                "n_nearest + p_parametric must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The `n` most recent links incident to the query's endpoints before its
/// timestamp, as ascending link indices.
pub fn nearest_sample(g: &TemporalGraph, query: &Link, n: usize) -> Vec<usize> {
    g.history_before(&[query.source, query.destination], query.timestamp, n)
}

/// Dot product of two link embeddings.
pub fn closeness(q: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
    if q.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            found: h.len(),
        });
    }
    Ok(q.dot(&h))
}

/// Scores the `m` most recent incident links that nearest sampling (with
/// budget `n_nearest`) did not take, and keeps the `p` closest to the query.
/// Ties go to the more recent link. Output is ascending by time.
pub fn parametric_sample(
    g: &TemporalGraph,
    query: &Link,
    n_nearest: usize,
    m: usize,
    p: usize,
    encoder: &Encoder,
) -> Vec<usize> {
    if p == 0 || m == 0 {
        return Vec::new();
    }
    let window = g.history_before(
        &[query.source, query.destination],
        query.timestamp,
        n_nearest + m,
    );
    let candidates = &window[..window.len().saturating_sub(n_nearest)];
    if candidates.len() <= p {
        return candidates.to_vec();
    }
    let q = encoder.query_embed(query);
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let h = encoder.link_embed(&g.link(i), query.timestamp);
            (q.dot(&h), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut chosen: Vec<usize> = scored[..p].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Merges both samples chronologically, left-pads to `n + p` and appends the
/// query.
pub fn build_sequence(
    g: &TemporalGraph,
    nearest: &[usize],
    parametric: &[usize],
    query: &Link,
    n: usize,
    p: usize,
) -> Result<LinkSequence> {
    if nearest.len() > n || parametric.len() > p {
        return Err(Error::Shape(format!(
            "got {} nearest / {} parametric links for budgets {n} / {p}",
            nearest.len(),
            parametric.len()
        )));
    }
    if let Some(&dup) = parametric.iter().find(|i| nearest.contains(i)) {
        return Err(Error::SampleOverlap(dup));
    }
    let mut history: Vec<SeqLink> = nearest
        .iter()
        .map(|&i| (i, Origin::Nearest))
        .chain(parametric.iter().map(|&i| (i, Origin::Parametric)))
        .map(|(i, origin)| SeqLink {
            link: g.link(i),
            origin,
            index: Some(i),
        })
        .collect();
    // stream index order is timestamp order with stable ties
    history.sort_by_key(|s| s.index);

    let mut slots = vec![None; n + p - history.len()];
    slots.extend(history.into_iter().map(Some));
    slots.push(Some(SeqLink {
        link: *query,
        origin: Origin::Query,
        index: None,
    }));
    Ok(LinkSequence { slots })
}

/// Full sampling pipeline for one query.
pub fn sample_sequence(
    g: &TemporalGraph,
    query: &Link,
    cfg: &SamplingConfig,
    encoder: &Encoder,
) -> Result<LinkSequence> {
    let nearest = nearest_sample(g, query, cfg.n_nearest);
    let parametric = parametric_sample(
        g,
        query,
        cfg.n_nearest,
        cfg.m_candidates,
        cfg.p_parametric,
        encoder,
    );
    build_sequence(
        g,
        &nearest,
        &parametric,
        query,
        cfg.n_nearest,
        cfg.p_parametric,
    )
}
