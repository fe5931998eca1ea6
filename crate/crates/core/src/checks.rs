//! Self-check batteries run by `gesf checks`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::gradcheck::{central_difference, relative_error};
use crate::diffnet::{logistic_label, softmax_ce, Activation, Mlp, Parameters};
use crate::error::{GesfError, Result};
use crate::graph::{Graph, Label, LabelMode, Split};
use crate::model::{
    objective, represent_batch, represent_reference, represent_with_filter, GesfModel, TrainConfig,
};
use crate::oracle::{
    appendix_example, brute_symmetrize, deepset_eval, exponent_vectors, monomial_sym, power_sums,
    power_sum_reconstruction, DeepSetModel, DeepSetShape, GroupedInput, Symmetrization,
};
use crate::spectral::{eigh_truncated, eigh_truncated_with, proximity_column, EigenSolver, SpectralOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Grad,
    Spectral,
    Model,
    All,
}

impl FromStr for Suite {
    type Err = GesfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "grad" => Ok(Suite::Grad),
            "spectral" => Ok(Suite::Spectral),
            "model" => Ok(Suite::Model),
            "all" => Ok(Suite::All),
            other => Err(GesfError::Usage(format!(
                "unknown suite '{other}' (expected oracle, grad, spectral, model or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} max_dev={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_deviation,
            self.tolerance
        )
    }
}

pub fn run(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Oracle => oracle_suite(),
        Suite::Grad => grad_suite(),
        Suite::Spectral => spectral_suite(),
        Suite::Model => model_suite(),
        Suite::All => {
            let mut out = oracle_suite()?;
            out.extend(grad_suite()?);
            out.extend(spectral_suite()?);
            out.extend(model_suite()?);
            Ok(out)
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

pub fn oracle_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut perm_dev: f64 = 0.0;
    let mut sym_dev: f64 = 0.0;
    for _ in 0..100 {
        let groups = rng.random_range(1..=3);
        let sizes: Vec<usize> = [3, 3, 2][..groups]
            .iter()
            .map(|&cap| rng.random_range(1..=cap))
            .collect();
        let elem_dim = rng.random_range(1..=3);
        let shape = DeepSetShape {
            elem_dim,
            inner_hidden: vec![rng.random_range(2..=6)],
            feature_dims: (0..groups).map(|_| rng.random_range(1..=4)).collect(),
            outer_hidden: vec![rng.random_range(2..=6)],
            activation: Activation::Tanh,
        };
        let model = DeepSetModel::init(&shape, &mut rng)?;
        let x = GroupedInput::random(&sizes, elem_dim, &mut rng)?;
        let base = deepset_eval(&model, &x)?;
        for _ in 0..5 {
            perm_dev = perm_dev.max(rel(deepset_eval(&model, &x.shuffled(&mut rng))?, base));
        }
        let sym = brute_symmetrize(|y| deepset_eval(&model, y), &x, Symmetrization::Average)?;
        sym_dev = sym_dev.max(rel(sym, base));
    }

    let mut appendix_dev: f64 = 0.0;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (expanded, factored) = appendix_example(v[0], v[1], v[2], v[3]);
        appendix_dev = appendix_dev.max(rel(expanded, factored));
    }

    let mut identity_dev: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let p = power_sums(&v, 3);
        let mut lambda = vec![0; n];
        lambda[..2].copy_from_slice(&[2, 1]);
        identity_dev = identity_dev.max(rel(monomial_sym(&lambda, &v)?, p[0] * p[1] - p[2]));
    }

    let mut recon: f64 = 0.0;
    for lambda in exponent_vectors(3, 3) {
        recon = recon.max(power_sum_reconstruction(&lambda, 5)?);
    }

    Ok(vec![
        CheckResult::new("oracle.permutation_invariance", perm_dev, 1e-9),
        CheckResult::new("oracle.brute_symmetrization", sym_dev, 1e-9),
        CheckResult::new("oracle.appendix_factorization", appendix_dev, 1e-9),
        CheckResult::new("oracle.monomial_power_sum_identity", identity_dev, 1e-9),
        CheckResult::new("oracle.power_sum_reconstruction", recon, 1e-8),
    ])
}

/// Random graph with `types` node types (`v % types`) and labels on type 0.
pub fn random_instance<R: Rng>(n: usize, types: usize, p: f64, classes: usize, rng: &mut R) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let node_type: Vec<usize> = (0..n).map(|v| v % types).collect();
    let labeled: Vec<usize> = (0..n).filter(|v| v % types == 0).collect();
    let labels: BTreeMap<usize, Label> = labeled
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, Label::Class(if i < classes { i } else { rng.random_range(0..classes) })))
        .collect();
    Graph::new(n, node_type, edges, labels, LabelMode::Multiclass)
}

fn small_config<R: Rng>(g: &Graph, rank: usize, rng: &mut R) -> TrainConfig {
    let k = g.num_types();
    let mut cfg = TrainConfig::defaults(g, LabelMode::Multiclass);
    cfg.lambda = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    cfg.lambda_w = 0.1;
    cfg.dims = (0..k).map(|_| rng.random_range(1..=3)).collect();
    cfg.psi_dim = rng.random_range(1..=3);
    cfg.hidden = rng.random_range(2..=4);
    cfg.rank = rank;
    cfg.init_scale = 0.5;
    cfg.seed = rng.random();
    cfg
}

pub fn grad_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut mlp_dev: f64 = 0.0;
    for seed in 0..20 {
        let dims = [rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=3)];
        let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let net = Mlp::init(&dims, act, seed)?;
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..dims[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&x)?;
        let (grads, dx) = net.backward(&cache, &w)?;
        let dot = |y: &[f64]| y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let numeric = central_difference(
            |p| {
                let mut probe = net.clone();
                probe.assign(p);
                dot(&probe.forward(&x).unwrap().0)
            },
            &net.flatten(),
            1e-6,
        );
        mlp_dev = mlp_dev.max(relative_error(&grads.flatten(), &numeric));
        let numeric_x = central_difference(|xp| dot(&net.forward(xp).unwrap().0), &x, 1e-6);
        mlp_dev = mlp_dev.max(relative_error(&dx, &numeric_x));
    }

    let mut loss_dev: f64 = 0.0;
    for _ in 0..20 {
        let c = rng.random_range(2..=5);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let class = rng.random_range(0..c);
        let (_, grad) = softmax_ce(&logits, class)?;
        let numeric = central_difference(|z| softmax_ce(z, class).unwrap().0, &logits, 1e-6);
        loss_dev = loss_dev.max(relative_error(&grad, &numeric));
        let s = rng.random_range(-4.0..4.0);
        let y = rng.random_bool(0.5);
        let (_, d) = logistic_label(s, y)?;
        let numeric = central_difference(|z| logistic_label(z[0], y).unwrap().0, &[s], 1e-6);
        loss_dev = loss_dev.max(relative_error(&[d], &numeric));
    }

    let mut model_dev: f64 = 0.0;
    for _ in 0..10 {
        let g = random_instance(6, 2, 0.5, 2, &mut rng)?;
        let cfg = small_config(&g, 6, &mut rng);
        let basis = eigh_truncated(&g.adjacency(), cfg.rank)?;
        let m = GesfModel::init(&g, &cfg, &basis.source_hash)?;
        let split = Split {
            train_nodes: vec![0, 2],
            test_nodes: vec![4],
            fraction: 0.5,
            seed: 0,
        };
        let batch: Vec<usize> = (0..6).collect();
        let (_, grads) = objective(&m, &basis, &g, &split, &cfg, &batch)?;
        let numeric = central_difference(
            |p| {
                let mut probe = m.clone();
                probe.assign(p);
                objective(&probe, &basis, &g, &split, &cfg, &batch).map_or(f64::NAN, |r| r.0)
            },
            &m.flatten(),
            1e-5,
        );
        model_dev = model_dev.max(group_errors(&grads, &numeric).into_values().fold(0.0, f64::max));
    }

    Ok(vec![
        CheckResult::new("grad.mlp", mlp_dev, 1e-5),
        CheckResult::new("grad.losses", loss_dev, 1e-5),
        CheckResult::new("grad.model_objective", model_dev, 1e-4),
    ])
}

/// Relative error per parameter group (`x0`, `psi1`, `rho`, `classifier.weight`, ...).
pub fn group_errors(grads: &GesfModel, numeric: &[f64]) -> BTreeMap<String, f64> {
    let mut analytic: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut pos = 0;
    grads.visit(&mut |name, _, data| {
        let group = if name.starts_with("classifier") {
            name.to_string()
        } else {
            name.split('.').next().unwrap_or(name).to_string()
        };
        let entry = analytic.entry(group).or_default();
        entry.0.extend_from_slice(data);
        entry.1.extend_from_slice(&numeric[pos..pos + data.len()]);
        pos += data.len();
    });
    analytic
        .into_iter()
        .map(|(k, (a, n))| (k, relative_error(&a, &n)))
        .collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

pub fn spectral_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut recon: f64 = 0.0;
    let mut ortho: f64 = 0.0;
    let mut bridge: f64 = 0.0;
    let mut solvers: f64 = 0.0;
    for i in 0..20 {
        let n = rng.random_range(2..=50);
        let g = random_instance(n, 1, rng.random_range(0.05..0.5), 1, &mut rng)?;
        let a = g.adjacency();
        let b = eigh_truncated(&a, n)?;
        let sigma = Array2::from_diag(&Array1::from(b.eigenvalues.clone()));
        let back = b.vectors.dot(&sigma).dot(&b.vectors.t());
        recon = recon.max((&back - &a).iter().fold(0.0, |m, x| m.max(x.abs())));
        let gram = b.vectors.t().dot(&b.vectors) - Array2::<f64>::eye(n);
        ortho = ortho.max(gram.iter().fold(0.0, |m, x| m.max(x.abs())));

        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let filt: Vec<f64> = b.eigenvalues.iter().map(|s| c[0] + c[1] * s + c[2] * s * s).collect();
        let poly = Array2::<f64>::eye(n) * c[0] + &a * c[1] + a.dot(&a) * c[2];
        for v in 0..n {
            let col = proximity_column(&b, &filt, v)?;
            bridge = bridge.max(max_rel(&col, &poly.column(v).to_vec()));
        }

        let other = if i % 2 == 0 { EigenSolver::Jacobi } else { EigenSolver::Tridiagonal };
        let alt = eigh_truncated_with(
            &a,
            n,
            SpectralOptions {
                solver: other,
                ..SpectralOptions::default()
            },
        )?;
        solvers = solvers.max(max_rel(&sorted(alt.eigenvalues), &sorted(b.eigenvalues.clone())));
    }

    let k2 = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let p3 = Array2::from_shape_vec((3, 3), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let s2 = 2f64.sqrt();
    let analytic = max_rel(&sorted(eigh_truncated(&k2, 2)?.eigenvalues), &[-1.0, 1.0])
        .max(max_rel(&sorted(eigh_truncated(&p3, 3)?.eigenvalues), &[-s2, 0.0, s2]));

    Ok(vec![
        CheckResult::new("spectral.reconstruction", recon, 1e-8),
        CheckResult::new("spectral.orthonormality", ortho, 1e-8),
        CheckResult::new("spectral.polynomial_filter_bridge", bridge, 1e-8),
        CheckResult::new("spectral.solver_agreement", solvers, 1e-8),
        CheckResult::new("spectral.analytic_k2_p3", analytic, 1e-12),
    ])
}

/// Representation with `c0 I + c1 A + c2 A^2` weights, counting walks edge by edge.
fn walk_representation(m: &GesfModel, g: &Graph, c: &[f64; 3], v: usize) -> Result<Vec<f64>> {
    let n = g.node_count();
    let mut weight = vec![0.0; n];
    weight[v] += c[0];
    for &u in g.adjacent(v) {
        weight[u] += c[1];
        for &w in g.adjacent(u) {
            weight[w] += c[2];
        }
    }
    let psi_dim = m.psi[0].output_dim();
    let mut z = Vec::new();
    for k in 0..g.num_types() {
        let mut acc = vec![0.0; psi_dim];
        for &u in g.type_nodes(k) {
            let y = m.psi[k].forward(&m.embedding(g, u).to_vec())?.0;
            for (a, b) in acc.iter_mut().zip(&y) {
                *a += weight[u] * b;
            }
        }
        z.extend(acc);
    }
    Ok(m.phi[g.node_type(v)].forward(&z)?.0)
}

/// Relabels the nodes of one type by a random permutation; returns the new
/// graph, the model with embedding rows moved along, and the node map.
pub fn permute_within_type<R: Rng>(
    g: &Graph,
    m: &GesfModel,
    k: usize,
    rng: &mut R,
) -> Result<(Graph, GesfModel, Vec<usize>)> {
    let nodes = g.type_nodes(k).to_vec();
    let mut shuffled = nodes.clone();
    shuffled.shuffle(rng);
    let mut map: Vec<usize> = (0..g.node_count()).collect();
    for (&from, &to) in nodes.iter().zip(&shuffled) {
        map[from] = to;
    }
    let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v)| (map[u], map[v])).collect();
    let labels = g.labels().iter().map(|(&v, l)| (map[v], l.clone())).collect();
    let h = Graph::new(g.node_count(), g.node_types().to_vec(), edges, labels, g.mode())?;
    let mut pm = m.clone();
    for &old in &nodes {
        let row = m.embedding(g, old).to_owned();
        pm.embeddings[k].row_mut(h.local_index(map[old])).assign(&row);
    }
    Ok((h, pm, map))
}

pub fn model_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut fast: f64 = 0.0;
    let mut perm: f64 = 0.0;
    let mut walks: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range((2 * k).max(2)..=12);
        let g = random_instance(n, k, rng.random_range(0.1..0.6), 2, &mut rng)?;
        let rank = rng.random_range(1..=n);
        let cfg = small_config(&g, rank, &mut rng);
        let basis = eigh_truncated(&g.adjacency(), rank)?;
        let m = GesfModel::init(&g, &cfg, &basis.source_hash)?;
        let nodes: Vec<usize> = (0..n).collect();
        let batch = represent_batch(&m, &basis, &g, &nodes)?;
        for v in 0..n {
            fast = fast.max(max_rel(&batch[v], &represent_reference(&m, &basis, &g, None, v)?));
        }

        let full = eigh_truncated(&g.adjacency(), n)?;
        let t = rng.random_range(0..k);
        let (h, pm, map) = permute_within_type(&g, &m, t, &mut rng)?;
        let full_h = eigh_truncated(&h.adjacency(), n)?;
        let before = represent_batch(&m, &full, &g, &nodes)?;
        let after = represent_batch(&pm, &full_h, &h, &nodes)?;
        for v in 0..n {
            perm = perm.max(max_rel(&after[map[v]], &before[v]));
        }

        let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
        let filt: Vec<f64> = full.eigenvalues.iter().map(|s| c[0] + c[1] * s + c[2] * s * s).collect();
        let spectral = represent_with_filter(&m, &full, &g, &filt, &nodes)?;
        for v in 0..n {
            walks = walks.max(max_rel(&spectral[v], &walk_representation(&m, &g, &c, v)?));
        }
    }
    Ok(vec![
        CheckResult::new("model.fast_vs_reference", fast, 1e-10),
        CheckResult::new("model.permutation_consistency", perm, 1e-9),
        CheckResult::new("model.walk_sum_bridge", walks, 1e-8),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names() {
        assert_eq!("grad".parse::<Suite>().unwrap(), Suite::Grad);
        assert!(matches!("bogus".parse::<Suite>(), Err(GesfError::Usage(_))));
    }

    #[test]
    fn every_battery_passes() {
        for r in run(Suite::All).unwrap() {
            assert!(r.passed, "{r}");
        }
    }
}
