//! Benchmark fixtures.

use linkpat_core::{Link, LinkPredictor, ModelConfig, TemporalGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniformly random stream with one link per time unit.
pub fn random_stream(links: usize, nodes: usize, seed: u64) -> TemporalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = (0..links)
        .map(|i| Link::new(rng.gen_range(0..nodes), rng.gen_range(0..nodes), i as f64))
        .collect();
    TemporalGraph::from_links(links, nodes).expect("valid stream")
}

pub fn predictor(g: &TemporalGraph, config: ModelConfig, seed: u64) -> LinkPredictor {
    LinkPredictor::new(g.node_count(), 1.0, config, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config")
}

/// The last `n` links of the stream.
pub fn tail_queries(g: &TemporalGraph, n: usize) -> Vec<Link> {
    g.links()[g.len().saturating_sub(n)..].to_vec()
}

pub fn random_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| rng.gen::<f64>()).collect();
    (draw(), draw())
}
