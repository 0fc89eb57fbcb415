//! Temporal link store: CSV ingestion, per-node incidence indexes,
//! chronological splits and negative corruption.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense node index after load-time remapping.
pub type NodeId = usize;

/// One timestamped directed interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub source: NodeId,
    pub destination: NodeId,
    pub timestamp: f64,
}

impl Link {
    pub fn new(source: NodeId, destination: NodeId, timestamp: f64) -> Self {
        Self {
            source,
            destination,
            timestamp,
        }
    }

    pub fn touches(&self, node: NodeId) -> bool {
        self.source == node || self.destination == node
    }
}

/// Bidirectional mapping between raw dataset labels and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMap {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, NodeId>,
}

impl NodeMap {
    pub fn from_labels(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labels, index }
    }

    /// Identity map where node `i` is labelled `"i"`.
    pub fn identity(node_count: usize) -> Self {
        Self::from_labels((0..node_count).map(|i| i.to_string()).collect())
    }

    fn intern(&mut self, label: &str) -> NodeId {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<NodeId> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes the `original_label,assigned_id` sidecar file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "original_label,assigned_id").map_err(io)?;
        for (id, label) in self.labels.iter().enumerate() {
            writeln!(out, "{label},{id}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Immutable, chronologically sorted link store.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    links: Vec<Link>,
    node_map: NodeMap,
    /// Per-node link indices in ascending (chronological) order.
    incidence: Vec<Vec<usize>>,
}

impl PartialEq for TemporalGraph {
    fn eq(&self, other: &Self) -> bool {
        self.links == other.links && self.node_map == other.node_map
    }
}

impl TemporalGraph {
    /// Builds a graph over ids `0..node_count`. Links are stably sorted by
    /// timestamp, so equal timestamps keep their input order.
    pub fn from_links(mut links: Vec<Link>, node_count: usize) -> Result<Self> {
        for (i, link) in links.iter().enumerate() {
            if !link.timestamp.is_finite() {
                return Err(Error::Config(format!(
                    "link #{i} has non-finite timestamp {}",
                    link.timestamp
                )));
            }
            if link.source >= node_count || link.destination >= node_count {
                return Err(Error::Config(format!(
                    "link #{i} references a node outside 0..{node_count}"
                )));
            }
        }
        links.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Ok(Self::index(links, NodeMap::identity(node_count)))
    }

    /// Builds a graph from raw labelled rows. Ids are assigned in order of
    /// first appearance in the time-sorted stream (source before destination).
    pub fn from_labeled_rows<S: AsRef<str>>(rows: &[(S, S, f64)]) -> Result<Self> {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[a].2.total_cmp(&rows[b].2));
        let mut map = NodeMap::default();
        let mut links = Vec::with_capacity(rows.len());
        for i in order {
            let (s, o, t) = &rows[i];
            if !t.is_finite() {
                return Err(Error::Config(format!("non-finite timestamp {t}")));
            }
            let source = map.intern(s.as_ref());
            let destination = map.intern(o.as_ref());
            links.push(Link::new(source, destination, *t));
        }
        Ok(Self::index(links, map))
    }

    fn index(links: Vec<Link>, node_map: NodeMap) -> Self {
        let mut incidence = vec![Vec::new(); node_map.len()];
        for (i, link) in links.iter().enumerate() {
            incidence[link.source].push(i);
            if link.destination != link.source {
                incidence[link.destination].push(i);
            }
        }
        Self {
            links,
            node_map,
            incidence,
        }
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, index: usize) -> Link {
        self.links[index]
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_map.len()
    }

    pub fn node_map(&self) -> &NodeMap {
        &self.node_map
    }

    pub fn incidence(&self, node: NodeId) -> &[usize] {
        self.incidence.get(node).map_or(&[], Vec::as_slice)
    }

    /// Indices of the `k` most recent links strictly before `t` touching any
    /// of `nodes`, in ascending chronological order. Ids outside the
    /// vocabulary have no history.
    pub fn history_before(&self, nodes: &[NodeId], t: f64, k: usize) -> Vec<usize> {
        let mut cursors: Vec<(&[usize], usize)> = Vec::with_capacity(nodes.len());
        for (i, &node) in nodes.iter().enumerate() {
            if nodes[..i].contains(&node) {
                continue;
            }
            let list = self.incidence(node);
            let cut = list.partition_point(|&l| self.links[l].timestamp < t);
            cursors.push((list, cut));
        }

        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let newest = cursors
                .iter()
                .filter(|(_, c)| *c > 0)
                .map(|(list, c)| list[c - 1])
                .max();
            let Some(idx) = newest else { break };
            out.push(idx);
            for (list, c) in cursors.iter_mut() {
                if *c > 0 && list[*c - 1] == idx {
                    *c -= 1;
                }
            }
        }
        out.reverse();
        out
    }

    /// Mean gap between consecutive links in `range`, or `None` when the
    /// range spans no time.
    pub fn mean_inter_event_time(&self, range: Range<usize>) -> Option<f64> {
        if range.len() < 2 {
            return None;
        }
        let span = self.links[range.end - 1].timestamp - self.links[range.start].timestamp;
        let mean = span / (range.len() - 1) as f64;
        (mean > 0.0 && mean.is_finite()).then_some(mean)
    }

    /// Writes the links back out with their original labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for link in &self.links {
            writeln!(
                out,
                "{},{},{}",
                self.node_map.labels[link.source],
                self.node_map.labels[link.destination],
                link.timestamp
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Reads `source,destination,timestamp` rows. A first row whose timestamp
/// column is not numeric is treated as a header; columns past the third are
/// ignored.
pub fn load_csv(path: &Path) -> Result<TemporalGraph> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);

    let malformed = |line: u64, message: String| Error::MalformedRow {
        path: path.to_owned(),
        line,
        message,
    };

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(i as u64 + 1, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.len() < 3 {
            return Err(malformed(
                line,
                format!("expected 3 columns, found {}", record.len()),
            ));
        }
        let (s, o, t) = (&record[0], &record[1], &record[2]);
        let timestamp = match t.parse::<f64>() {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(malformed(line, format!("timestamp {t:?} is not a number"))),
        };
        if !timestamp.is_finite() {
            return Err(malformed(line, format!("timestamp {t:?} is not finite")));
        }
        if s.is_empty() || o.is_empty() {
            return Err(malformed(line, "empty node label".to_owned()));
        }
        rows.push((s.to_owned(), o.to_owned(), timestamp));
    }

    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.to_owned()));
    }
    if rows.len() < 2 {
        return Err(Error::TooFewLinks {
            found: rows.len(),
            required: 2,
        });
    }
    TemporalGraph::from_labeled_rows(&rows)
}

/// Contiguous chronological partition of the link stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

pub const MIN_SPLIT_LINKS: usize = 10;

/// 70% / 10% / 20% split; train and validation sizes are floored and the
/// remainder goes to test.
pub fn chronological_split(g: &TemporalGraph) -> Result<DatasetSplit> {
    let n = g.len();
    if n < MIN_SPLIT_LINKS {
        return Err(Error::TooFewLinks {
            found: n,
            required: MIN_SPLIT_LINKS,
        });
    }
    let train_end = n * 7 / 10;
    let val_end = train_end + n / 10;
    Ok(DatasetSplit {
        train: 0..train_end,
        validation: train_end..val_end,
        test: val_end..n,
    })
}

/// Same contract as [`chronological_split`] with custom fractions.
pub fn chronological_split_with(
    g: &TemporalGraph,
    train_fraction: f64,
    val_fraction: f64,
) -> Result<DatasetSplit> {
    if (train_fraction - 0.7).abs() < 1e-12 && (val_fraction - 0.1).abs() < 1e-12 {
        return chronological_split(g);
    }
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(train_fraction) || !valid(val_fraction) || train_fraction + val_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions {train_fraction}/{val_fraction} must be positive and sum below 1"
        )));
    }
    let n = g.len();
    if n < MIN_SPLIT_LINKS {
        return Err(Error::TooFewLinks {
            found: n,
            required: MIN_SPLIT_LINKS,
        });
    }
    let floor = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
    let train_end = floor(train_fraction);
    let val_end = train_end + floor(val_fraction);
    Ok(DatasetSplit {
        train: 0..train_end,
        validation: train_end..val_end,
        test: val_end..n,
    })
}

/// Corrupts the destination with a node drawn uniformly from the whole
/// vocabulary (the true destination is not excluded).
pub fn sample_negative<R: Rng + ?Sized>(g: &TemporalGraph, positive: &Link, rng: &mut R) -> Link {
    let n = g.node_count().max(1);
    Link::new(positive.source, rng.gen_range(0..n), positive.timestamp)
}
