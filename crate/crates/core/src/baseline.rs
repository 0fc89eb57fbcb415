//! Memory baseline: a link is predicted iff its pair has been seen before.

use std::collections::HashSet;
use std::ops::Range;
use std::time::Instant;

use crate::error::Result;
use crate::graph::{Link, NodeId, TemporalGraph};
use crate::metrics::evaluate_auc;
use crate::trainer::{split_negatives, EvalReport};

#[derive(Clone, Debug, Default)]
pub struct EdgeMemory {
    pairs: HashSet<(NodeId, NodeId)>,
    directed: bool,
}

impl EdgeMemory {
    pub fn new(directed: bool) -> Self {
        Self {
            pairs: HashSet::new(),
            directed,
        }
    }

    fn key(&self, s: NodeId, o: NodeId) -> (NodeId, NodeId) {
        if self.directed {
            (s, o)
        } else {
            (s.min(o), s.max(o))
        }
    }

    pub fn insert(&mut self, link: &Link) {
        self.pairs.insert(self.key(link.source, link.destination));
    }

    pub fn contains(&self, s: NodeId, o: NodeId) -> bool {
        self.pairs.contains(&self.key(s, o))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn edgebank_score(memory: &EdgeMemory, query: &Link) -> f64 {
    if memory.contains(query.source, query.destination) {
        1.0
    } else {
        0.0
    }
}

/// Streams the graph in time order and scores each positive in `range` and
/// its seeded negative against every strictly earlier link.
pub fn edgebank_eval(g: &TemporalGraph, range: Range<usize>, seed: u64, directed: bool) -> Result<EvalReport> {
    let negatives = split_negatives(g, range.clone(), seed);
    edgebank_eval_with(g, range, &negatives, directed)
}

/// As [`edgebank_eval`] with explicit negatives, one per link of `range`.
pub fn edgebank_eval_with(g: &TemporalGraph, range: Range<usize>, negatives: &[Link], directed: bool) -> Result<EvalReport> {
    assert_eq!(negatives.len(), range.len(), "one negative per positive");
    let start = Instant::now();
    let links = g.links();
    let mut memory = EdgeMemory::new(directed);
    let (mut pos, mut neg) = (Vec::with_capacity(range.len()), Vec::with_capacity(range.len()));

    let mut i = 0;
    while i < links.len() && i < range.end {
        // links sharing a timestamp are scored before any of them is stored
        let mut j = i;
        while j < links.len() && links[j].timestamp == links[i].timestamp {
            j += 1;
        }
        for k in i.max(range.start)..j.min(range.end) {
            pos.push(edgebank_score(&memory, &links[k]));
            neg.push(edgebank_score(&memory, &negatives[k - range.start]));
        }
        links[i..j].iter().for_each(|l| memory.insert(l));
        i = j;
    }
    Ok(EvalReport {
        epoch: 0,
        loss: None,
        auc: evaluate_auc(&pos, &neg)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// AUC of binary scores from the counts of ones among `n` positives and `n`
/// negatives.
pub fn binary_auc(pos_ones: usize, neg_ones: usize, n: usize) -> f64 {
    let (a, b, n) = (pos_ones as f64, neg_ones as f64, n as f64);
    (a * (n - b) + 0.5 * (a * b + (n - a) * (n - b))) / (n * n)
}
