//! The embedding model: free per-node vectors tied to a representation built
//! from per-type set functions over spectrally filtered neighborhoods.
//!
//! For node `v` of type `t` the representation is
//! `R(v) = phi_t(concat_k sum_{u in V_k} p_v[u] psi_k(x^u))` with
//! `p_v = U (rho(sigma) * U[v, :])`. The objective ties `x^v` to `R(v)` and
//! fits a classifier on the free vectors of labeled training nodes.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::diffnet::Optimizer;
use crate::diffnet::{
    logistic_label, sigmoid, softmax_ce, Activation, Dense, Mlp, MlpCache, OptimizerState,
    ParamStore, Parameters,
};
use crate::error::{GesfError, Result};
use crate::graph::{Graph, Label, LabelMode, Split};
use crate::spectral::{
    eigh_truncated_with, normalized_adjacency, proximity_column, EigenSolver, Selection,
    SpectralBasis, SpectralOptions,
};


/// Every training hyperparameter. Per-type lists are indexed by node type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: Vec<f64>,
    pub lambda_w: f64,
    pub rank: usize,
    pub dims: Vec<usize>,
    pub psi_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: LabelMode,
    pub init_scale: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub normalize_adjacency: bool,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub solver: EigenSolver,
}

/// Partial configuration; set fields override the defaults of a graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub lambda: Option<Vec<f64>>,
    pub lambda_w: Option<f64>,
    pub rank: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub psi_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<LabelMode>,
    pub init_scale: Option<f64>,
    pub optimizer: Option<Optimizer>,
    pub normalize_adjacency: Option<bool>,
    pub selection: Option<Selection>,
    pub solver: Option<EigenSolver>,
}

impl ConfigPatch {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GesfError::Config(e.to_string()))
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*};
        }
        set!(
            lambda,
            lambda_w,
            rank,
            dims,
            psi_dim,
            hidden,
            learning_rate,
            epochs,
            batch_size,
            seed,
            mode,
            init_scale,
            optimizer,
            normalize_adjacency,
            selection,
            solver
        );
    }
}

impl TrainConfig {
    pub fn defaults(g: &Graph, mode: LabelMode) -> Self {
        let k = g.num_types();
        let n = g.node_count();
        let (lambda, lambda_w) = match mode {
            LabelMode::Multiclass => (vec![1e-3; k], 1e-3),
            LabelMode::Multilabel => {
                let mut l = vec![200.0; k];
                l[0] = 0.2;
                (l, 1e-4)
            }
        };
        TrainConfig {
            lambda,
            lambda_w,
            rank: n.min(1000),
            dims: vec![64; k],
            psi_dim: 64,
            hidden: 64,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: n.min(256),
            seed: 0,
            mode,
            init_scale: 0.1,
            optimizer: Optimizer::Adam,
            normalize_adjacency: false,
            selection: Selection::Magnitude,
            solver: EigenSolver::Auto,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GesfError::Config(e.to_string()))
    }

    pub fn spectral_options(&self) -> SpectralOptions {
        SpectralOptions {
            solver: self.solver,
            selection: self.selection,
        }
    }

    /// Checks every typed constraint against `g`.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let k = g.num_types();
        let n = g.node_count();
        let fail = |msg: String| Err(GesfError::Config(msg));
        if self.lambda.len() != k || self.dims.len() != k {
            return fail(format!(
                "lambda and dims need one entry per node type ({k})"
            ));
        }
        if self.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return fail("every lambda must be positive and finite".into());
        }
        if !(self.lambda_w >= 0.0 && self.lambda_w.is_finite()) {
            return fail("lambda_w must be non-negative".into());
        }
        if self.rank == 0 || self.rank > n {
            return fail(format!("rank {} outside 1..={n}", self.rank));
        }
        if self.dims.contains(&0) || self.psi_dim == 0 || self.hidden == 0 {
            return fail("dimensions must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > n {
            return fail(format!("batch_size {} outside 1..={n}", self.batch_size));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be positive".into());
        }
        if self.mode != g.mode() {
            return fail(format!(
                "config mode {} but graph labels are {}",
                self.mode,
                g.mode()
            ));
        }
        if self.mode == LabelMode::Multiclass && g.num_classes() < 2 {
            return fail("multiclass training needs at least two classes".into());
        }
        Ok(())
    }
}

/// Adjacency (optionally normalized) truncated to `cfg.rank` eigenpairs.
pub fn compute_basis(g: &Graph, cfg: &TrainConfig) -> Result<SpectralBasis> {
    let mut a = g.adjacency();
    if cfg.normalize_adjacency {
        a = normalized_adjacency(&a);
    }
    eigh_truncated_with(&a, cfg.rank, cfg.spectral_options())
}

/// Learnable state. `embeddings[k]` stores one row per node of type `k`
/// in the order of `Graph::type_nodes(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GesfModel {
    pub embeddings: Vec<Array2<f64>>,
    pub psi: Vec<Mlp>,
    pub phi: Vec<Mlp>,
    pub rho: Mlp,
    pub classifier: Dense,
    pub labeled_type: usize,
    pub basis_hash: String,
}

impl Parameters for GesfModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, x) in self.embeddings.iter().enumerate() {
            f(
                &format!("x{k}"),
                &[x.nrows(), x.ncols()],
                x.as_slice().expect("standard layout"),
            );
        }
        let nets = self
            .psi
            .iter()
            .enumerate()
            .map(|(k, m)| (format!("psi{k}"), m))
            .chain(self.phi.iter().enumerate().map(|(k, m)| (format!("phi{k}"), m)))
            .chain(std::iter::once(("rho".to_string(), &self.rho)));
        for (prefix, net) in nets {
            net.visit(&mut |name, dims, data| f(&format!("{prefix}.{name}"), dims, data));
        }
        self.classifier
            .visit(&mut |name, dims, data| f(&name.replace("dense", "classifier"), dims, data));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (k, x) in self.embeddings.iter_mut().enumerate() {
            f(&format!("x{k}"), x.as_slice_mut().expect("standard layout"));
        }
        for (k, net) in self.psi.iter_mut().enumerate() {
            net.visit_mut(&mut |name, data| f(&format!("psi{k}.{name}"), data));
        }
        for (k, net) in self.phi.iter_mut().enumerate() {
            net.visit_mut(&mut |name, data| f(&format!("phi{k}.{name}"), data));
        }
        self.rho.visit_mut(&mut |name, data| f(&format!("rho.{name}"), data));
        self.classifier
            .visit_mut(&mut |name, data| f(&name.replace("dense", "classifier"), data));
    }
}

/// Shape information needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub type_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub psi_dims: Vec<Vec<usize>>,
    pub phi_dims: Vec<Vec<usize>>,
    pub rho_dims: Vec<usize>,
    pub rho_activation: Activation,
    pub classes: usize,
    pub labeled_type: usize,
    pub basis_hash: String,
    pub params: ParamStore,
}

impl GesfModel {
    /// Random initialization: `X_k ~ N(0, init_scale^2)`, networks Xavier-uniform.
    pub fn init(g: &Graph, cfg: &TrainConfig, basis_hash: &str) -> Result<Self> {
        cfg.validate(g)?;
        let k = g.num_types();
        let labeled_type = g.labeled_type()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_scale)
            .map_err(|e| GesfError::Config(e.to_string()))?;
        let embeddings = (0..k)
            .map(|t| {
                Array2::from_shape_simple_fn((g.type_nodes(t).len(), cfg.dims[t]), || {
                    normal.sample(&mut rng)
                })
            })
            .collect();
        let mut psi = Vec::with_capacity(k);
        for t in 0..k {
            psi.push(Mlp::init_with_rng(
                &[cfg.dims[t], cfg.hidden, cfg.psi_dim],
                Activation::Tanh,
                &mut rng,
            )?);
        }
        let mut phi = Vec::with_capacity(k);
        for t in 0..k {
            phi.push(Mlp::init_with_rng(
                &[k * cfg.psi_dim, cfg.hidden, cfg.dims[t]],
                Activation::Tanh,
                &mut rng,
            )?);
        }
        let rho = Mlp::init_with_rng(&[1, 3, 1], Activation::Tanh, &mut rng)?;
        let classifier = Dense::xavier(cfg.dims[labeled_type], g.num_classes(), &mut rng);
        Ok(GesfModel {
            embeddings,
            psi,
            phi,
            rho,
            classifier,
            labeled_type,
            basis_hash: basis_hash.to_string(),
        })
    }

    pub fn num_types(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embedding(&self, g: &Graph, v: usize) -> ArrayView1<'_, f64> {
        self.embeddings[g.node_type(v)].row(g.local_index(v))
    }

    /// A model of the same shape with every entry zero.
    pub fn zeros_like(&self) -> Self {
        GesfModel {
            embeddings: self
                .embeddings
                .iter()
                .map(|x| Array2::zeros(x.raw_dim()))
                .collect(),
            psi: self.psi.iter().map(Mlp::zeros_like).collect(),
            phi: self.phi.iter().map(Mlp::zeros_like).collect(),
            rho: self.rho.zeros_like(),
            classifier: Dense::zeros(self.classifier.input_dim(), self.classifier.output_dim()),
            labeled_type: self.labeled_type,
            basis_hash: self.basis_hash.clone(),
        }
    }

    /// Checks that the model fits `g` and `basis`.
    pub fn check(&self, g: &Graph, basis: &SpectralBasis) -> Result<()> {
        if basis.node_count() != g.node_count() {
            return Err(GesfError::Argument(format!(
                "basis covers {} nodes, graph has {}",
                basis.node_count(),
                g.node_count()
            )));
        }
        self.check_graph(g)
    }

    /// Checks that the parameter shapes fit the node types of `g`.
    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        let k = g.num_types();
        let bad = |msg: String| Err(GesfError::Argument(msg));
        if self.embeddings.len() != k || self.psi.len() != k || self.phi.len() != k {
            return bad(format!("model has {} types, graph has {k}", self.embeddings.len()));
        }
        let psi_dim = self.psi[0].output_dim();
        for t in 0..k {
            let x = &self.embeddings[t];
            if x.nrows() != g.type_nodes(t).len() {
                return bad(format!("embedding block {t} has {} rows", x.nrows()));
            }
            if self.psi[t].input_dim() != x.ncols() || self.psi[t].output_dim() != psi_dim {
                return bad(format!("psi{t} does not chain with its embeddings"));
            }
            if self.phi[t].input_dim() != k * psi_dim || self.phi[t].output_dim() != x.ncols() {
                return bad(format!("phi{t} does not chain"));
            }
        }
        if self.rho.input_dim() != 1 || self.rho.output_dim() != 1 {
            return bad("filter network must map scalars to scalars".into());
        }
        if self.labeled_type >= k
            || self.classifier.input_dim() != self.embeddings[self.labeled_type].ncols()
        {
            return bad("classifier does not match the labeled type".into());
        }
        Ok(())
    }

    /// Filter values `rho(sigma_i)` for every retained eigenvalue.
    pub fn filter(&self, basis: &SpectralBasis) -> Result<Vec<f64>> {
        let sigma = Array2::from_shape_vec((basis.rank(), 1), basis.eigenvalues.clone()).unwrap();
        Ok(self.rho.eval_batch(sigma.view())?.column(0).to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::default();
        params.insert_all("model", self);
        Checkpoint {
            type_sizes: self.embeddings.iter().map(|x| x.nrows()).collect(),
            dims: self.embeddings.iter().map(|x| x.ncols()).collect(),
            psi_dims: self.psi.iter().map(Mlp::dims).collect(),
            phi_dims: self.phi.iter().map(Mlp::dims).collect(),
            rho_dims: self.rho.dims(),
            rho_activation: self.rho.activations.first().copied().unwrap_or(Activation::Tanh),
            classes: self.classifier.output_dim(),
            labeled_type: self.labeled_type,
            basis_hash: self.basis_hash.clone(),
            params,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let k = c.type_sizes.len();
        if c.dims.len() != k || c.psi_dims.len() != k || c.phi_dims.len() != k || c.labeled_type >= k
        {
            return Err(GesfError::Validation("inconsistent checkpoint shapes".into()));
        }
        let mut m = GesfModel {
            embeddings: c
                .type_sizes
                .iter()
                .zip(&c.dims)
                .map(|(&n, &d)| Array2::zeros((n, d)))
                .collect(),
            psi: c
                .psi_dims
                .iter()
                .map(|d| Mlp::zeros(d, Activation::Tanh))
                .collect::<Result<_>>()?,
            phi: c
                .phi_dims
                .iter()
                .map(|d| Mlp::zeros(d, Activation::Tanh))
                .collect::<Result<_>>()?,
            rho: Mlp::zeros(&c.rho_dims, c.rho_activation)?,
            classifier: Dense::zeros(c.dims[c.labeled_type], c.classes),
            labeled_type: c.labeled_type,
            basis_hash: c.basis_hash.clone(),
        };
        c.params.restore("model", &mut m)?;
        if !m.all_finite() {
            return Err(GesfError::Validation("checkpoint holds non-finite values".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| GesfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GesfError::io(path, e))?;
        let c: Checkpoint =
            serde_json::from_str(&text).map_err(|e| GesfError::Validation(e.to_string()))?;
        Self::from_checkpoint(&c)
    }
}

/// Eigenvector rows split by node type, reused across steps.
pub struct Context<'a> {
    graph: &'a Graph,
    basis: &'a SpectralBasis,
    type_basis: Vec<Array2<f64>>,
}

impl<'a> Context<'a> {
    pub fn new(graph: &'a Graph, basis: &'a SpectralBasis) -> Result<Self> {
        if basis.node_count() != graph.node_count() {
            return Err(GesfError::Argument(format!(
                "basis covers {} nodes, graph has {}",
                basis.node_count(),
                graph.node_count()
            )));
        }
        let type_basis = (0..graph.num_types())
            .map(|k| basis.vectors.select(Axis(0), graph.type_nodes(k)))
            .collect();
        Ok(Context {
            graph,
            basis,
            type_basis,
        })
    }
}

struct BatchForward {
    rho_cache: MlpCache,
    psi_caches: Vec<MlpCache>,
    /// `psi_k(X_k)^T U_{V_k}`, one `psi_dim x r` block per type.
    moments: Vec<Array2<f64>>,
    /// `U[batch, :] * rho(sigma)`.
    weighted: Array2<f64>,
    /// Batch positions grouped by node type.
    groups: Vec<Vec<usize>>,
    phi_caches: Vec<Option<MlpCache>>,
    /// Representations per type, rows aligned with `groups`.
    reps: Vec<Array2<f64>>,
}

fn check_batch(g: &Graph, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(GesfError::Argument("empty node batch".into()));
    }
    if let Some(&v) = batch.iter().find(|&&v| v >= g.node_count()) {
        return Err(GesfError::Argument(format!(
            "node {v} out of range 0..{}",
            g.node_count()
        )));
    }
    Ok(())
}

fn forward(m: &GesfModel, ctx: &Context, filt_override: Option<&[f64]>, batch: &[usize]) -> Result<BatchForward> {
    let basis = ctx.basis;
    let g = ctx.graph;
    let r = basis.rank();
    let k = g.num_types();
    let sigma = Array2::from_shape_vec((r, 1), basis.eigenvalues.clone()).unwrap();
    let (rho_out, rho_cache) = m.rho.forward_batch(sigma.view())?;
    let filt: Array1<f64> = match filt_override {
        Some(f) => {
            if f.len() != r {
                return Err(GesfError::Argument(format!(
                    "filter has {} entries, basis rank is {r}",
                    f.len()
                )));
            }
            Array1::from(f.to_vec())
        }
        None => rho_out.column(0).to_owned(),
    };
    let mut psi_caches = Vec::with_capacity(k);
    let mut moments = Vec::with_capacity(k);
    for t in 0..k {
        let (out, cache) = m.psi[t].forward_batch(m.embeddings[t].view())?;
        moments.push(out.t().dot(&ctx.type_basis[t]));
        psi_caches.push(cache);
    }
    let mut weighted = basis.vectors.select(Axis(0), batch);
    weighted *= &filt;
    let sums: Vec<Array2<f64>> = moments.iter().map(|mk| weighted.dot(&mk.t())).collect();
    let psi_dim = moments[0].nrows();
    let mut groups = vec![Vec::new(); k];
    for (pos, &v) in batch.iter().enumerate() {
        groups[g.node_type(v)].push(pos);
    }
    let mut phi_caches = Vec::with_capacity(k);
    let mut reps = Vec::with_capacity(k);
    for t in 0..k {
        if groups[t].is_empty() {
            phi_caches.push(None);
            reps.push(Array2::zeros((0, m.embeddings[t].ncols())));
            continue;
        }
        let mut z = Array2::zeros((groups[t].len(), k * psi_dim));
        for (j, &pos) in groups[t].iter().enumerate() {
            for (kk, sk) in sums.iter().enumerate() {
                z.slice_mut(s![j, kk * psi_dim..(kk + 1) * psi_dim])
                    .assign(&sk.row(pos));
            }
        }
        let (rep, cache) = m.phi[t].forward_batch(z.view())?;
        phi_caches.push(Some(cache));
        reps.push(rep);
    }
    Ok(BatchForward {
        rho_cache,
        psi_caches,
        moments,
        weighted,
        groups,
        phi_caches,
        reps,
    })
}

/// Accumulates gradients of `sum_t <d_reps[t], reps[t]>` into `grads`.
fn backward(
    m: &GesfModel,
    ctx: &Context,
    fw: &BatchForward,
    batch: &[usize],
    d_reps: &[Array2<f64>],
    grads: &mut GesfModel,
) -> Result<()> {
    let k = m.num_types();
    let psi_dim = fw.moments[0].nrows();
    let mut d_sums = vec![Array2::<f64>::zeros((batch.len(), psi_dim)); k];
    for t in 0..k {
        let Some(cache) = &fw.phi_caches[t] else { continue };
        let (g_phi, dz) = m.phi[t].backward_batch(cache, d_reps[t].view())?;
        grads.phi[t] = g_phi;
        for (j, &pos) in fw.groups[t].iter().enumerate() {
            for (kk, ds) in d_sums.iter_mut().enumerate() {
                let mut row = ds.row_mut(pos);
                row += &dz.slice(s![j, kk * psi_dim..(kk + 1) * psi_dim]);
            }
        }
    }
    let mut d_weighted = Array2::<f64>::zeros(fw.weighted.raw_dim());
    for t in 0..k {
        let d_moment = d_sums[t].t().dot(&fw.weighted);
        d_weighted += &d_sums[t].dot(&fw.moments[t]);
        let d_psi_out = ctx.type_basis[t].dot(&d_moment.t());
        let (g_psi, dx) = m.psi[t].backward_batch(&fw.psi_caches[t], d_psi_out.view())?;
        grads.psi[t] = g_psi;
        grads.embeddings[t] += &dx;
    }
    let rows = ctx.basis.vectors.select(Axis(0), batch);
    let d_filt = (&d_weighted * &rows).sum_axis(Axis(0));
    let d_filt = d_filt.insert_axis(Axis(1));
    let (g_rho, _) = m.rho.backward_batch(&fw.rho_cache, d_filt.view())?;
    grads.rho = g_rho;
    Ok(())
}

/// Representations of `nodes` via the factored evaluation order.
pub fn represent_batch(
    m: &GesfModel,
    basis: &SpectralBasis,
    g: &Graph,
    nodes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    m.check(g, basis)?;
    check_batch(g, nodes)?;
    let ctx = Context::new(g, basis)?;
    represent_ctx(m, &ctx, None, nodes)
}

fn represent_ctx(
    m: &GesfModel,
    ctx: &Context,
    filt: Option<&[f64]>,
    nodes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let fw = forward(m, ctx, filt, nodes)?;
    let mut out = vec![Vec::new(); nodes.len()];
    for (t, group) in fw.groups.iter().enumerate() {
        for (j, &pos) in group.iter().enumerate() {
            out[pos] = fw.reps[t].row(j).to_vec();
        }
    }
    Ok(out)
}

/// Representation of one node.
pub fn represent(m: &GesfModel, basis: &SpectralBasis, g: &Graph, v: usize) -> Result<Vec<f64>> {
    Ok(represent_batch(m, basis, g, &[v])?.remove(0))
}

/// Representations with an explicit filter in place of `rho(sigma)`.
pub fn represent_with_filter(
    m: &GesfModel,
    basis: &SpectralBasis,
    g: &Graph,
    filt: &[f64],
    nodes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    m.check(g, basis)?;
    check_batch(g, nodes)?;
    let ctx = Context::new(g, basis)?;
    represent_ctx(m, &ctx, Some(filt), nodes)
}

/// Direct evaluation of the definition, one neighbor at a time.
pub fn represent_reference(
    m: &GesfModel,
    basis: &SpectralBasis,
    g: &Graph,
    filt: Option<&[f64]>,
    v: usize,
) -> Result<Vec<f64>> {
    m.check(g, basis)?;
    check_batch(g, &[v])?;
    let filt = match filt {
        Some(f) => f.to_vec(),
        None => {
            let mut f = Vec::with_capacity(basis.rank());
            for &sigma in &basis.eigenvalues {
                f.push(m.rho.forward(&[sigma])?.0[0]);
            }
            f
        }
    };
    let p = proximity_column(basis, &filt, v)?;
    let psi_dim = m.psi[0].output_dim();
    let mut z = Vec::with_capacity(m.num_types() * psi_dim);
    for k in 0..m.num_types() {
        let mut acc = vec![0.0; psi_dim];
        for &u in g.type_nodes(k) {
            let x = m.embedding(g, u).to_vec();
            let y = m.psi[k].forward(&x)?.0;
            for (a, b) in acc.iter_mut().zip(&y) {
                *a += p[u] * b;
            }
        }
        z.extend(acc);
    }
    Ok(m.phi[g.node_type(v)].forward(&z)?.0)
}

fn train_mask(g: &Graph, split: &Split) -> Result<Vec<bool>> {
    let mut mask = vec![false; g.node_count()];
    for &v in &split.train_nodes {
        if v >= g.node_count() || g.label(v).is_none() {
            return Err(GesfError::Argument(format!("training node {v} is not labeled")));
        }
        mask[v] = true;
    }
    Ok(mask)
}

/// Loss and upstream gradient of the classifier head on `x`.
fn head_loss(
    classifier: &Dense,
    x: ArrayView1<f64>,
    label: &Label,
    mode: LabelMode,
) -> Result<(f64, Vec<f64>)> {
    let scores = classifier.apply(x.as_slice().expect("contiguous row"));
    match (mode, label) {
        (LabelMode::Multiclass, Label::Class(c)) => softmax_ce(&scores, *c),
        (LabelMode::Multilabel, Label::Set(set)) => {
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(scores.len());
            for (i, &s) in scores.iter().enumerate() {
                let (l, d) = logistic_label(s, set.contains(&i))?;
                loss += l;
                grad.push(d);
            }
            Ok((loss, grad))
        }
        _ => Err(GesfError::Argument("label does not match the mode".into())),
    }
}

fn objective_ctx(
    m: &GesfModel,
    ctx: &Context,
    mask: &[bool],
    n_train: usize,
    cfg: &TrainConfig,
    batch: &[usize],
) -> Result<(f64, GesfModel)> {
    let g = ctx.graph;
    let fw = forward(m, ctx, None, batch)?;
    let mut grads = m.zeros_like();
    let mut loss = 0.0;
    let mut d_reps = Vec::with_capacity(m.num_types());
    for (t, group) in fw.groups.iter().enumerate() {
        let coef = 1.0 / (cfg.lambda[t] * g.type_nodes(t).len() as f64);
        let mut d_rep = Array2::zeros(fw.reps[t].raw_dim());
        for (j, &pos) in group.iter().enumerate() {
            let li = g.local_index(batch[pos]);
            let diff = &m.embeddings[t].row(li) - &fw.reps[t].row(j);
            loss += coef * diff.dot(&diff);
            d_rep.row_mut(j).assign(&(&diff * (-2.0 * coef)));
            let mut gx = grads.embeddings[t].row_mut(li);
            gx.scaled_add(2.0 * coef, &diff);
        }
        d_reps.push(d_rep);
    }
    loss += supervised_into(m, g, mask, n_train, cfg, batch, Some(&mut grads))?;
    backward(m, ctx, &fw, batch, &d_reps, &mut grads)?;
    Ok((loss, grads))
}

/// Supervised part plus the regularizer scaled by the batch's share of training nodes.
fn supervised_into(
    m: &GesfModel,
    g: &Graph,
    mask: &[bool],
    n_train: usize,
    cfg: &TrainConfig,
    batch: &[usize],
    mut grads: Option<&mut GesfModel>,
) -> Result<f64> {
    let t = m.labeled_type;
    let scale = 1.0 / n_train as f64;
    let mut loss = 0.0;
    let mut count = 0;
    for &v in batch {
        if !mask[v] {
            continue;
        }
        count += 1;
        let label = g.label(v).expect("training nodes are labeled");
        let li = g.local_index(v);
        let x = m.embeddings[t].row(li);
        let (l, d) = head_loss(&m.classifier, x, label, cfg.mode)?;
        loss += scale * l;
        if let Some(gr) = grads.as_deref_mut() {
            let d = Array1::from(d) * scale;
            let outer = d
                .view()
                .insert_axis(Axis(1))
                .dot(&x.insert_axis(Axis(0)));
            gr.classifier.weight += &outer;
            gr.classifier.bias += &d;
            let dx = m.classifier.weight.t().dot(&d);
            let mut gx = gr.embeddings[t].row_mut(li);
            gx += &dx;
        }
    }
    let frac = count as f64 / n_train as f64;
    let w = &m.classifier.weight;
    loss += cfg.lambda_w * frac * w.iter().map(|a| a * a).sum::<f64>();
    if let Some(gr) = grads {
        gr.classifier.weight.scaled_add(2.0 * cfg.lambda_w * frac, w);
    }
    Ok(loss)
}

/// Mini-batch objective and its gradient with respect to every parameter.
pub fn objective(
    m: &GesfModel,
    basis: &SpectralBasis,
    g: &Graph,
    split: &Split,
    cfg: &TrainConfig,
    batch: &[usize],
) -> Result<(f64, GesfModel)> {
    m.check(g, basis)?;
    check_batch(g, batch)?;
    let ctx = Context::new(g, basis)?;
    let mask = train_mask(g, split)?;
    objective_ctx(m, &ctx, &mask, split.train_nodes.len().max(1), cfg, batch)
}

/// Representation-consistency term alone, through the reference path.
pub fn unsupervised_term(
    m: &GesfModel,
    basis: &SpectralBasis,
    g: &Graph,
    cfg: &TrainConfig,
    batch: &[usize],
) -> Result<f64> {
    check_batch(g, batch)?;
    let mut loss = 0.0;
    for &u in batch {
        let t = g.node_type(u);
        let rep = represent_reference(m, basis, g, None, u)?;
        let x = m.embedding(g, u);
        let sq: f64 = x.iter().zip(&rep).map(|(a, b)| (a - b) * (a - b)).sum();
        loss += sq / (cfg.lambda[t] * g.type_nodes(t).len() as f64);
    }
    Ok(loss)
}

/// Classification loss on training nodes in `batch` plus the scaled regularizer.
pub fn supervised_term(
    m: &GesfModel,
    g: &Graph,
    split: &Split,
    cfg: &TrainConfig,
    batch: &[usize],
) -> Result<f64> {
    check_batch(g, batch)?;
    let mask = train_mask(g, split)?;
    Ok(supervised_into(m, g, &mask, split.train_nodes.len().max(1), cfg, batch, None)?)
}

/// Mean squared residual `|x^u - R(u)|^2` over all nodes.
pub fn representation_residual(m: &GesfModel, basis: &SpectralBasis, g: &Graph) -> Result<f64> {
    m.check(g, basis)?;
    let ctx = Context::new(g, basis)?;
    let nodes: Vec<usize> = (0..g.node_count()).collect();
    let mut total = 0.0;
    for chunk in nodes.chunks(256) {
        let reps = represent_ctx(m, &ctx, None, chunk)?;
        for (&u, rep) in chunk.iter().zip(&reps) {
            let x = m.embedding(g, u);
            total += x.iter().zip(rep).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total / g.node_count() as f64)
}

/// Computes the spectral basis and trains; see [`train_with_basis`].
pub fn train(g: &Graph, split: &Split, cfg: &TrainConfig) -> Result<(GesfModel, Vec<f64>)> {
    cfg.validate(g)?;
    let basis = compute_basis(g, cfg)?;
    train_with_basis(g, &basis, split, cfg)
}

/// Mini-batch training over shuffled node orders; returns the model and the
/// mean batch loss of every epoch.
pub fn train_with_basis(
    g: &Graph,
    basis: &SpectralBasis,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(GesfModel, Vec<f64>)> {
    cfg.validate(g)?;
    if basis.rank() != cfg.rank {
        return Err(GesfError::Config(format!(
            "basis rank {} differs from configured rank {}",
            basis.rank(),
            cfg.rank
        )));
    }
    let mut model = GesfModel::init(g, cfg, &basis.source_hash)?;
    model.check(g, basis)?;
    let ctx = Context::new(g, basis)?;
    let mask = train_mask(g, split)?;
    let n_train = split.train_nodes.len().max(1);
    let mut opt = OptimizerState::new(cfg.optimizer, model.parameter_count());
    let n = g.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = objective_ctx(&model, &ctx, &mask, n_train, cfg, batch)
                .map_err(|e| match e {
                    GesfError::Numeric(msg) => GesfError::Training { step, msg },
                    other => other,
                })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(GesfError::Training {
                    step,
                    msg: format!("non-finite loss or gradient (loss {loss})"),
                });
            }
            opt.step(&mut model, &grads, cfg.learning_rate);
            if !model.all_finite() {
                return Err(GesfError::Training {
                    step,
                    msg: "parameters became non-finite".into(),
                });
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((model, history))
}

/// A predicted class or label set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Set(BTreeSet<usize>),
}

pub fn predict(m: &GesfModel, g: &Graph, v: usize, mode: LabelMode) -> Result<Prediction> {
    if v >= g.node_count() || g.node_type(v) != m.labeled_type {
        return Err(GesfError::Argument(format!(
            "node {v} is not of the labeled type {}",
            m.labeled_type
        )));
    }
    let x = m.embedding(g, v).to_vec();
    let scores = m.classifier.apply(&x);
    Ok(match mode {
        LabelMode::Multiclass => {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            Prediction::Class(best)
        }
        LabelMode::Multilabel => Prediction::Set(
            scores
                .iter()
                .enumerate()
                .filter(|(_, &s)| sigmoid(s) >= 0.5)
                .map(|(i, _)| i)
                .collect(),
        ),
    })
}

/// Accuracy for single-class predictions.
pub fn accuracy(pairs: &[(usize, usize)]) -> f64 {
    let right = pairs.iter().filter(|(p, t)| p == t).count();
    right as f64 / pairs.len() as f64
}

/// Macro and micro F1 from per-label (TP, FP, FN) counts; 0/0 counts as 0.
pub fn f1_scores(counts: &[(usize, usize, usize)]) -> (f64, f64) {
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = if counts.is_empty() {
        0.0
    } else {
        counts.iter().map(|&(a, b, c)| f1(a, b, c)).sum::<f64>() / counts.len() as f64
    };
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    (macro_f1, f1(tp, fp, fn_))
}

/// Named metric values on the test nodes of `split`.
pub fn evaluate(
    m: &GesfModel,
    g: &Graph,
    split: &Split,
    mode: LabelMode,
) -> Result<Vec<(String, f64)>> {
    m.check_graph(g)?;
    if split.test_nodes.is_empty() {
        return Err(GesfError::Config("empty test set".into()));
    }
    match mode {
        LabelMode::Multiclass => {
            let mut pairs = Vec::with_capacity(split.test_nodes.len());
            for &v in &split.test_nodes {
                let Prediction::Class(p) = predict(m, g, v, mode)? else { unreachable!() };
                match g.label(v) {
                    Some(Label::Class(t)) => pairs.push((p, *t)),
                    _ => return Err(GesfError::Argument(format!("test node {v} lacks a class"))),
                }
            }
            Ok(vec![("accuracy".into(), accuracy(&pairs))])
        }
        LabelMode::Multilabel => {
            let labels = m.classifier.output_dim();
            let mut counts = vec![(0, 0, 0); labels];
            for &v in &split.test_nodes {
                let Prediction::Set(p) = predict(m, g, v, mode)? else { unreachable!() };
                let Some(Label::Set(truth)) = g.label(v) else {
                    return Err(GesfError::Argument(format!("test node {v} lacks a label set")));
                };
                for (i, c) in counts.iter_mut().enumerate() {
                    match (p.contains(&i), truth.contains(&i)) {
                        (true, true) => c.0 += 1,
                        (true, false) => c.1 += 1,
                        (false, true) => c.2 += 1,
                        _ => {}
                    }
                }
            }
            let (macro_f1, micro_f1) = f1_scores(&counts);
            Ok(vec![
                ("macro_f1".into(), macro_f1),
                ("micro_f1".into(), micro_f1),
            ])
        }
    }
}
