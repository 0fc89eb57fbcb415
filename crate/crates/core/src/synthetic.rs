//! Seeded synthetic graphs with planted reply patterns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Link, NodeId, TemporalGraph};

/// A generated graph and, per link, the index of the earlier link it
/// replies to.
#[derive(Clone, Debug)]
pub struct Planted {
    pub graph: TemporalGraph,
    pub targets: Vec<Option<usize>>,
}

fn distinct_pair(rng: &mut ChaCha8Rng, nodes: usize) -> (NodeId, NodeId) {
    let a = rng.gen_range(0..nodes);
    let mut b = rng.gen_range(0..nodes - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Every random `(a, b, 2i)` is answered by `(b, a, 2i + 1)`.
pub fn planted_reply(pairs: usize, nodes: usize, seed: u64) -> Planted {
    delayed_reply(pairs, nodes, 0, 0, seed)
}

/// Random initiations `(a_i, b_i)` at time `2i`; from step `delay` on, each
/// step also carries the reply `(b_{i-delay}, a_{i-delay})` at `2i + 1`.
///
/// A reply is only planted when at least `min_between` other links touching
/// `a` or `b` fall between it and its target, so the target is never among
/// the reply's `min_between` nearest incident links. Otherwise the slot
/// holds an unanswered random link.
pub fn delayed_reply(steps: usize, nodes: usize, delay: usize, min_between: usize, seed: u64) -> Planted {
    assert!(nodes >= 2, "need two nodes for a pair");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut links: Vec<Link> = Vec::new();
    let mut targets = Vec::new();
    let mut initiations = Vec::with_capacity(steps);
    for i in 0..steps {
        let (a, b) = distinct_pair(&mut rng, nodes);
        initiations.push(links.len());
        links.push(Link::new(a, b, (2 * i) as f64));
        targets.push(None);
        if i >= delay {
            let target = initiations[i - delay];
            let t = links[target];
            let between = links[target + 1..]
                .iter()
                .filter(|l| l.touches(t.source) || l.touches(t.destination))
                .count();
            let time = (2 * i + 1) as f64;
            if between >= min_between {
                links.push(Link::new(t.destination, t.source, time));
                targets.push(Some(target));
            } else {
                let (c, d) = distinct_pair(&mut rng, nodes);
                links.push(Link::new(c, d, time));
                targets.push(None);
            }
        }
    }
    Planted {
        graph: TemporalGraph::from_links(links, nodes).expect("generated links are valid"),
        targets,
    }
}
