//! Seeded random graphs with planted communities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Label, LabelMode};

/// Two equal blocks; see [`planted_partition`].
pub fn two_block(n: usize, p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    planted_partition(n, 2, p_in, p_out, seed)
}

/// Stochastic block model over one node type with `classes` contiguous,
/// near-equal blocks; every node is labeled with its block.
pub fn planted_partition(n: usize, classes: usize, p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = |v: usize| v * classes / n;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|v| (v, Label::Class(block(v)))).collect();
    Graph::new(n, vec![0; n], edges, labels, LabelMode::Multiclass)
}

/// The 20-node two-community toy graph used by training smoke tests.
pub fn toy_two_community() -> Result<Graph> {
    two_block(20, 0.8, 0.05, 0)
}

/// Parameters of [`heterogeneous`].
#[derive(Clone, Debug)]
pub struct HeteroSpec {
    pub members: usize,
    pub hubs: usize,
    pub communities: usize,
    /// Hub to member of its own community.
    pub p_hub: f64,
    /// Member to member, same community.
    pub p_in: f64,
    /// Member to member, different communities.
    pub p_out: f64,
    pub seed: u64,
}

impl Default for HeteroSpec {
    fn default() -> Self {
        HeteroSpec {
            members: 60,
            hubs: 20,
            communities: 3,
            p_hub: 0.6,
            p_in: 0.1,
            p_out: 0.02,
            seed: 0,
        }
    }
}

/// Two node types: labeled members (type 0, ids first) in planted communities,
/// and unlabeled hubs (type 1) wired to members of one community each.
pub fn heterogeneous(spec: &HeteroSpec, mode: LabelMode) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.members + spec.hubs;
    let member_comm = |v: usize| v * spec.communities / spec.members;
    let hub_comm = |h: usize| h * spec.communities / spec.hubs;
    let mut edges = Vec::new();
    for u in 0..spec.members {
        for v in (u + 1)..spec.members {
            let p = if member_comm(u) == member_comm(v) {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    for h in 0..spec.hubs {
        for v in 0..spec.members {
            if member_comm(v) == hub_comm(h) && rng.random::<f64>() < spec.p_hub {
                edges.push((v, spec.members + h));
            }
        }
    }
    let mut node_type = vec![0; spec.members];
    node_type.extend(std::iter::repeat_n(1, spec.hubs));
    let labels: BTreeMap<usize, Label> = (0..spec.members)
        .map(|v| {
            let c = member_comm(v);
            let label = match mode {
                LabelMode::Multiclass => Label::Class(c),
                LabelMode::Multilabel => Label::Set([c].into()),
            };
            (v, label)
        })
        .collect();
    Graph::new(n, node_type, edges, labels, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_graph_shape() {
        let g = toy_two_community().unwrap();
        assert_eq!(g.node_count(), 20);
        assert_eq!(g.labels().len(), 20);
        let inside = g
            .edges()
            .iter()
            .filter(|(u, v)| (u < &10) == (v < &10))
            .count();
        assert!(inside > 5 * (g.edges().len() - inside));
        assert_eq!(g, toy_two_community().unwrap());
    }

    #[test]
    fn hetero_graph_shape() {
        let g = heterogeneous(&HeteroSpec::default(), LabelMode::Multiclass).unwrap();
        assert_eq!(g.node_count(), 80);
        assert_eq!(g.num_types(), 2);
        assert_eq!(g.type_nodes(1).len(), 20);
        assert_eq!(g.labeled_type().unwrap(), 0);
        assert_eq!(g.num_classes(), 3);
        for &h in g.type_nodes(1) {
            assert!(!g.adjacent(h).is_empty());
            assert!(g.adjacent(h).iter().all(|&v| g.node_type(v) == 0));
        }
    }
}
