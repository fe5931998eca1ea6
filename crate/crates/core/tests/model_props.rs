use std::collections::BTreeMap;

use gesf_core::diffnet::gradcheck::{central_difference, relative_error};
use gesf_core::diffnet::Parameters;
use gesf_core::model::{
    objective, represent_batch, represent_reference, represent_with_filter, supervised_term, train_with_basis,
    unsupervised_term, GesfModel, TrainConfig,
};
use gesf_core::spectral::eigh_truncated;
use gesf_core::{make_split, Graph, Label, LabelMode, Split};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    graph: Graph,
    cfg: TrainConfig,
}

/// Random typed graph with labels on type 0 and a small model configuration.
fn arb_instance(max_n: usize, max_k: usize, mode: LabelMode) -> impl Strategy<Value = Instance> {
    (1..=max_k, any::<u64>()).prop_flat_map(move |(k, seed)| {
        ((2 * k).max(2)..=max_n).prop_flat_map(move |n| {
            (
                proptest::collection::vec(proptest::bool::weighted(0.35), n * (n - 1) / 2),
                proptest::collection::vec(0usize..3, n),
                proptest::collection::vec(0.3f64..3.0, k),
                proptest::collection::vec(1usize..4, k),
                1usize..4,
                2usize..5,
                1..=n,
            )
                .prop_map(move |(bits, classes, lambda, dims, psi_dim, hidden, rank)| {
                    let mut edges = Vec::new();
                    let mut it = bits.into_iter();
                    for u in 0..n {
                        for v in (u + 1)..n {
                            if it.next().unwrap() {
                                edges.push((u, v));
                            }
                        }
                    }
                    let labels: BTreeMap<usize, Label> = (0..n)
                        .filter(|v| v % k == 0)
                        .map(|v| {
                            // the first two labeled nodes pin classes 0 and 1
                            let c = if v < 2 * k { v / k } else { classes[v] };
                            let label = match mode {
                                LabelMode::Multiclass => Label::Class(c),
                                LabelMode::Multilabel => Label::Set([c, (c + v) % 3].into()),
                            };
                            (v, label)
                        })
                        .collect();
                    let graph = Graph::new(n, (0..n).map(|v| v % k).collect(), edges, labels, mode).unwrap();
                    let mut cfg = TrainConfig::defaults(&graph, mode);
                    cfg.lambda = lambda;
                    cfg.lambda_w = 0.05;
                    cfg.dims = dims;
                    cfg.psi_dim = psi_dim;
                    cfg.hidden = hidden;
                    cfg.rank = rank;
                    cfg.init_scale = 0.5;
                    cfg.seed = seed;
                    Instance { graph, cfg }
                })
        })
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

/// Column `v` of `c0 I + c1 A + c2 A^2`, by walking the edge lists.
fn walk_weights(g: &Graph, c: [f64; 3], v: usize) -> Vec<f64> {
    let mut w = vec![0.0; g.node_count()];
    w[v] += c[0];
    for &u in g.adjacent(v) {
        w[u] += c[1];
        for &x in g.adjacent(u) {
            w[x] += c[2];
        }
    }
    w
}

/// The representation written as explicit per-type neighbor sums.
fn walk_representation(m: &GesfModel, g: &Graph, c: [f64; 3], v: usize) -> Vec<f64> {
    let w = walk_weights(g, c, v);
    let mut z = Vec::new();
    for k in 0..g.num_types() {
        let mut acc = vec![0.0; m.psi[k].output_dim()];
        for &u in g.type_nodes(k) {
            let y = m.psi[k].forward(&m.embedding(g, u).to_vec()).unwrap().0;
            for (a, b) in acc.iter_mut().zip(y) {
                *a += w[u] * b;
            }
        }
        z.extend(acc);
    }
    m.phi[g.node_type(v)].forward(&z).unwrap().0
}

fn all_nodes(g: &Graph) -> Vec<usize> {
    (0..g.node_count()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn fast_path_matches_definition(inst in arb_instance(12, 3, LabelMode::Multiclass)) {
        let g = &inst.graph;
        let basis = eigh_truncated(&g.adjacency(), inst.cfg.rank).unwrap();
        let m = GesfModel::init(g, &inst.cfg, "").unwrap();
        let fast = represent_batch(&m, &basis, g, &all_nodes(g)).unwrap();
        for v in 0..g.node_count() {
            let slow = represent_reference(&m, &basis, g, None, v).unwrap();
            prop_assert!(close(&fast[v], &slow, 1e-10), "node {v}");
        }
    }

    #[test]
    fn relabeling_within_a_type_commutes(inst in arb_instance(12, 3, LabelMode::Multiclass), pick in any::<u64>()) {
        let g = &inst.graph;
        let n = g.node_count();
        let m = GesfModel::init(g, &inst.cfg, "").unwrap();
        let t = (pick as usize) % g.num_types();
        // Rotate the nodes of type t by a pick-dependent offset, then reverse them.
        let nodes = g.type_nodes(t).to_vec();
        let mut target = nodes.clone();
        target.rotate_left((pick as usize / 3) % nodes.len());
        target.reverse();
        let mut map: Vec<usize> = (0..n).collect();
        for (&a, &b) in nodes.iter().zip(&target) {
            map[a] = b;
        }
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v)| (map[u], map[v])).collect();
        let labels = g.labels().iter().map(|(&v, l)| (map[v], l.clone())).collect();
        let h = Graph::new(n, g.node_types().to_vec(), edges, labels, g.mode()).unwrap();
        let mut pm = m.clone();
        for &v in &nodes {
            pm.embeddings[t].row_mut(h.local_index(map[v])).assign(&m.embedding(g, v));
        }
        let bg = eigh_truncated(&g.adjacency(), n).unwrap();
        let bh = eigh_truncated(&h.adjacency(), n).unwrap();
        let before = represent_batch(&m, &bg, g, &all_nodes(g)).unwrap();
        let after = represent_batch(&pm, &bh, &h, &all_nodes(&h)).unwrap();
        for v in 0..n {
            prop_assert!(close(&after[map[v]], &before[v], 1e-9));
        }
    }

    #[test]
    fn quadratic_filter_matches_walk_sums(inst in arb_instance(10, 3, LabelMode::Multiclass), c in proptest::array::uniform3(-1.0f64..1.0)) {
        let g = &inst.graph;
        let n = g.node_count();
        let basis = eigh_truncated(&g.adjacency(), n).unwrap();
        let m = GesfModel::init(g, &inst.cfg, "").unwrap();
        let filt: Vec<f64> = basis.eigenvalues.iter().map(|s| c[0] + c[1] * s + c[2] * s * s).collect();
        let reps = represent_with_filter(&m, &basis, g, &filt, &all_nodes(g)).unwrap();
        for v in 0..n {
            prop_assert!(close(&reps[v], &walk_representation(&m, g, c, v), 1e-8));
        }
    }

    #[test]
    fn objective_is_the_sum_of_its_terms(inst in arb_instance(12, 3, LabelMode::Multiclass), multilabel in any::<bool>()) {
        let mut inst = inst;
        if multilabel {
            let labels = inst.graph.labels().iter()
                .map(|(&v, l)| (v, match l { Label::Class(c) => Label::Set([*c].into()), s => s.clone() }))
                .collect();
            let g = &inst.graph;
            inst.graph = Graph::new(g.node_count(), g.node_types().to_vec(), g.edges().to_vec(), labels, LabelMode::Multilabel).unwrap();
            inst.cfg.mode = LabelMode::Multilabel;
        }
        let g = &inst.graph;
        let basis = eigh_truncated(&g.adjacency(), inst.cfg.rank).unwrap();
        let m = GesfModel::init(g, &inst.cfg, "").unwrap();
        let labeled: Vec<usize> = g.labels().keys().copied().collect();
        let split = Split { train_nodes: labeled, test_nodes: vec![], fraction: 0.5, seed: 0 };
        let batch = all_nodes(g);
        let (total, _) = objective(&m, &basis, g, &split, &inst.cfg, &batch).unwrap();
        let parts = unsupervised_term(&m, &basis, g, &inst.cfg, &batch).unwrap()
            + supervised_term(&m, g, &split, &inst.cfg, &batch).unwrap();
        prop_assert!((total - parts).abs() <= 1e-10 * total.abs().max(1.0), "{total} vs {parts}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_parameter_group_passes_gradient_check(inst in arb_instance(6, 2, LabelMode::Multiclass), multilabel in any::<bool>()) {
        let mut inst = inst;
        if multilabel {
            let labels = inst.graph.labels().iter()
                .map(|(&v, l)| (v, match l { Label::Class(c) => Label::Set([*c, 2].into()), s => s.clone() }))
                .collect();
            let g = &inst.graph;
            inst.graph = Graph::new(g.node_count(), g.node_types().to_vec(), g.edges().to_vec(), labels, LabelMode::Multilabel).unwrap();
            inst.cfg.mode = LabelMode::Multilabel;
        }
        let g = &inst.graph;
        let basis = eigh_truncated(&g.adjacency(), inst.cfg.rank).unwrap();
        let m = GesfModel::init(g, &inst.cfg, "").unwrap();
        let labeled: Vec<usize> = g.labels().keys().copied().collect();
        let split = Split { train_nodes: labeled[..labeled.len().div_ceil(2)].to_vec(), test_nodes: vec![], fraction: 0.5, seed: 0 };
        let batch = all_nodes(g);
        let (_, grads) = objective(&m, &basis, g, &split, &inst.cfg, &batch).unwrap();
        let numeric = central_difference(
            |p| {
                let mut probe = m.clone();
                probe.assign(p);
                objective(&probe, &basis, g, &split, &inst.cfg, &batch).unwrap().0
            },
            &m.flatten(),
            1e-5,
        );
        let mut pos = 0;
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        grads.visit(&mut |name, _, d| {
            let key = if name.starts_with("classifier") { name.to_string() } else { name.split('.').next().unwrap().to_string() };
            let e = groups.entry(key).or_default();
            e.0.extend_from_slice(d);
            e.1.extend_from_slice(&numeric[pos..pos + d.len()]);
            pos += d.len();
        });
        prop_assert_eq!(pos, numeric.len());
        for (name, (a, n)) in &groups {
            let err = relative_error(a, n);
            prop_assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let g = gesf_core::synthetic::toy_two_community().unwrap();
    let mut cfg = TrainConfig::defaults(&g, LabelMode::Multiclass);
    cfg.rank = 4;
    cfg.epochs = 20;
    cfg.dims = vec![8];
    cfg.psi_dim = 8;
    cfg.hidden = 8;
    cfg.batch_size = 7;
    let split = make_split(&g, 0.5, 3).unwrap();
    let basis = eigh_truncated(&g.adjacency(), cfg.rank).unwrap();
    let (m1, h1) = train_with_basis(&g, &basis, &split, &cfg).unwrap();
    let (m2, h2) = train_with_basis(&g, &basis, &split, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1.flatten(), m2.flatten());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m1.save(&path).unwrap();
    let back = GesfModel::load(&path).unwrap();
    assert_eq!(back.flatten(), m1.flatten());
    assert_eq!(
        represent_batch(&back, &basis, &g, &[0, 5, 19]).unwrap(),
        represent_batch(&m1, &basis, &g, &[0, 5, 19]).unwrap()
    );
}
