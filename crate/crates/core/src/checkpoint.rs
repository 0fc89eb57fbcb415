//! Binary checkpoint container.
//!
//! Layout: magic `LPCK`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor in visit order as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeMap, TemporalGraph};
use crate::param::Parameterized;
use crate::predictor::{LinkPredictor, ModelConfig};

const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub node_count: usize,
    pub time_scale: f64,
    pub node_labels: Vec<String>,
    /// Sidecar file with the label map, relative to the checkpoint.
    pub node_map_file: Option<String>,
    /// Snapshot of the configuration that produced the weights.
    pub run_config: Option<serde_json::Value>,
    /// Epoch the weights were taken from, if trained.
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn node_map(&self) -> NodeMap {
        NodeMap::from_labels(self.node_labels.clone())
    }

    /// The dataset must assign the same internal ids to the same labels.
    pub fn check_compatible(&self, g: &TemporalGraph) -> Result<()> {
        let ours = &self.node_labels;
        let theirs = g.node_map().labels();
        if ours.len() != theirs.len() {
            return Err(Error::NodeMapMismatch(format!(
                "checkpoint has {} nodes, dataset has {}",
                ours.len(),
                theirs.len()
            )));
        }
        if let Some(i) = (0..ours.len()).find(|&i| ours[i] != theirs[i]) {
            return Err(Error::NodeMapMismatch(format!(
                "node id {i} is {:?} in the checkpoint but {:?} in the dataset",
                ours[i], theirs[i]
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a predictor besides its tensors.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub node_labels: Vec<String>,
    pub node_map_file: Option<String>,
    pub run_config: Option<serde_json::Value>,
    pub epoch: Option<usize>,
}

pub fn to_bytes(predictor: &LinkPredictor, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut model = predictor.clone();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    model.visit_params("", &mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: p.shape.clone(),
            trainable: p.trainable,
        });
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        model: predictor.config.clone(),
        node_count: predictor.encoder.nodes.node_count(),
        time_scale: predictor.encoder.time_scale,
        node_labels: meta.node_labels.clone(),
        node_map_file: meta.node_map_file.clone(),
        run_config: meta.run_config.clone(),
        epoch: meta.epoch,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(LinkPredictor, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long).map_err(|_| bad("truncated"))?;
    let header_len = u64::from_le_bytes(long) as usize;
    if r.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..header_len])?;
    r = &r[header_len..];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictor = LinkPredictor::new(header.node_count, header.time_scale, header.model.clone(), &mut rng)?;
    let mut problem = None;
    let mut index = 0;
    predictor.visit_params("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = header.tensors.get(index) else {
            problem = Some("fewer tensors than the model expects".to_owned());
            return;
        };
        index += 1;
        if entry.name != name || entry.shape != p.shape {
            problem = Some(format!(
                "tensor {:?} {:?} does not match model tensor {name:?} {:?}",
                entry.name, entry.shape, p.shape
            ));
            return;
        }
        let n = p.value.len() * 8;
        if r.len() < n {
            problem = Some(format!("truncated data for tensor {name:?}"));
            return;
        }
        for (v, chunk) in p.value.iter_mut().zip(r[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        r = &r[n..];
    });
    if let Some(m) = problem {
        return Err(Error::Checkpoint(m));
    }
    if index != header.tensors.len() || !r.is_empty() {
        return Err(bad("trailing tensors or data"));
    }
    Ok((predictor, header))
}

pub fn save(path: &Path, predictor: &LinkPredictor, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(predictor, meta)?;
    let io = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(LinkPredictor, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    from_bytes(&bytes)
}
