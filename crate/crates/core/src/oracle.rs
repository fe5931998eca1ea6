//! Numerical witnesses for functions of grouped, partially exchangeable inputs:
//! the pooled deep-set form, brute-force symmetrization, power sums and
//! monomial symmetric polynomials, and fitting of invariant targets.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffnet::{Activation, Mlp, Optimizer, OptimizerState, Parameters};
use crate::error::{GesfError, Result};

/// `K` groups; group `k` holds `N_k` elements of a common dimension, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedInput {
    pub groups: Vec<Array2<f64>>,
}

impl GroupedInput {
    pub fn new(groups: Vec<Array2<f64>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.nrows() == 0 || g.ncols() == 0) {
            return Err(GesfError::Argument("every group needs at least one element".into()));
        }
        if groups.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(GesfError::Argument("non-finite input value".into()));
        }
        Ok(GroupedInput { groups })
    }

    /// Scalar elements.
    pub fn from_scalars(groups: &[Vec<f64>]) -> Result<Self> {
        Self::new(
            groups
                .iter()
                .map(|g| Array2::from_shape_vec((g.len(), 1), g.clone()).unwrap())
                .collect(),
        )
    }

    /// Uniform samples in `[-1, 1]`.
    pub fn random<R: Rng>(sizes: &[usize], elem_dim: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .map(|&n| Array2::from_shape_simple_fn((n, elem_dim), || rng.random_range(-1.0..=1.0)))
                .collect(),
        )
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.nrows()).collect()
    }

    /// Scalar value of element `n` in group `k` (first coordinate).
    pub fn scalar(&self, k: usize, n: usize) -> f64 {
        self.groups[k][[n, 0]]
    }

    /// The same input with group rows reordered: new row `i` of group `k` is old row `perms[k][i]`.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Self {
        GroupedInput {
            groups: self
                .groups
                .iter()
                .zip(perms)
                .map(|(g, p)| g.select(Axis(0), p))
                .collect(),
        }
    }

    /// A uniformly random within-group reordering.
    pub fn shuffled<R: Rng>(&self, rng: &mut R) -> Self {
        let perms: Vec<Vec<usize>> = self
            .sizes()
            .iter()
            .map(|&n| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        self.permuted(&perms)
    }
}

/// `h(sum_n g_1(x_{1,n}), ..., sum_n g_K(x_{K,n}))` with scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetModel {
    pub inner: Vec<Mlp>,
    pub outer: Mlp,
}

/// Layer widths of a [`DeepSetModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetShape {
    pub elem_dim: usize,
    /// Hidden widths of every inner network.
    pub inner_hidden: Vec<usize>,
    /// Pooled feature width `m_k` per group.
    pub feature_dims: Vec<usize>,
    pub outer_hidden: Vec<usize>,
    pub activation: Activation,
}

impl DeepSetModel {
    pub fn init<R: Rng>(shape: &DeepSetShape, rng: &mut R) -> Result<Self> {
        let mut inner = Vec::with_capacity(shape.feature_dims.len());
        for &m in &shape.feature_dims {
            let mut dims = vec![shape.elem_dim];
            dims.extend(&shape.inner_hidden);
            dims.push(m);
            inner.push(Mlp::init_with_rng(&dims, shape.activation, rng)?);
        }
        let mut dims = vec![shape.feature_dims.iter().sum()];
        dims.extend(&shape.outer_hidden);
        dims.push(1);
        let outer = Mlp::init_with_rng(&dims, shape.activation, rng)?;
        Ok(DeepSetModel { inner, outer })
    }

    fn pooled_width(&self) -> usize {
        self.inner.iter().map(Mlp::output_dim).sum()
    }
}

impl Parameters for DeepSetModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, net) in self.inner.iter().enumerate() {
            net.visit(&mut |name, dims, data| f(&format!("g{k}.{name}"), dims, data));
        }
        self.outer
            .visit(&mut |name, dims, data| f(&format!("h.{name}"), dims, data));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (k, net) in self.inner.iter_mut().enumerate() {
            net.visit_mut(&mut |name, data| f(&format!("g{k}.{name}"), data));
        }
        self.outer.visit_mut(&mut |name, data| f(&format!("h.{name}"), data));
    }
}

fn check_model(m: &DeepSetModel, x: &GroupedInput) -> Result<()> {
    let fits = m.inner.len() == x.groups.len()
        && m.inner
            .iter()
            .zip(&x.groups)
            .all(|(g, xs)| g.input_dim() == xs.ncols())
        && m.outer.input_dim() == m.pooled_width()
        && m.outer.output_dim() == 1;
    if fits {
        Ok(())
    } else {
        Err(GesfError::Argument("model does not match the grouped input".into()))
    }
}

/// Pooled evaluation; each group is summed in element order.
pub fn deepset_eval(m: &DeepSetModel, x: &GroupedInput) -> Result<f64> {
    check_model(m, x)?;
    let mut pooled = Vec::with_capacity(m.pooled_width());
    for (g, xs) in m.inner.iter().zip(&x.groups) {
        let feats = g.eval_batch(xs.view())?;
        let mut acc = vec![0.0; g.output_dim()];
        for row in feats.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        pooled.extend(acc);
    }
    Ok(m.outer.forward(&pooled)?.0[0])
}

/// How [`brute_symmetrize`] combines the permuted values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symmetrization {
    /// Mean over all within-group permutations.
    Average,
    /// Plain sum, larger than the mean by `prod_k N_k!`.
    Sum,
}

/// Largest permutation count [`brute_symmetrize`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    while next_permutation(&mut p) {
        out.push(p.clone());
    }
    out
}

fn next_permutation<T: Ord>(p: &mut [T]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Combines `q` over the full product of within-group permutations of `x`.
pub fn brute_symmetrize(
    mut q: impl FnMut(&GroupedInput) -> Result<f64>,
    x: &GroupedInput,
    mode: Symmetrization,
) -> Result<f64> {
    let sizes = x.sizes();
    let count: f64 = sizes
        .iter()
        .map(|&n| (1..=n).map(|i| i as f64).product::<f64>())
        .product();
    if count > BRUTE_FORCE_LIMIT {
        return Err(GesfError::Resource(format!(
            "{count} permutations exceed the limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    let tables: Vec<Vec<Vec<usize>>> = sizes.iter().map(|&n| permutations(n)).collect();
    let mut digits = vec![0usize; sizes.len()];
    let mut total = 0.0;
    loop {
        let perms: Vec<Vec<usize>> = digits
            .iter()
            .zip(&tables)
            .map(|(&d, t)| t[d].clone())
            .collect();
        total += q(&x.permuted(&perms))?;
        let mut k = 0;
        loop {
            if k == digits.len() {
                return Ok(match mode {
                    Symmetrization::Average => total / count,
                    Symmetrization::Sum => total,
                });
            }
            digits[k] += 1;
            if digits[k] < tables[k].len() {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// `[p_1, ..., p_max_degree]` with `p_d = sum_i values[i]^d`.
pub fn power_sums(values: &[f64], max_degree: usize) -> Vec<f64> {
    (1..=max_degree)
        .map(|d| values.iter().map(|x| x.powi(d as i32)).sum())
        .collect()
}

/// Monomial symmetric polynomial: sum over the distinct rearrangements of `lambda`.
pub fn monomial_sym(lambda: &[u32], values: &[f64]) -> Result<f64> {
    if lambda.len() != values.len() {
        return Err(GesfError::Argument(format!(
            "exponent vector has {} entries for {} values",
            lambda.len(),
            values.len()
        )));
    }
    if lambda.windows(2).any(|w| w[0] < w[1]) {
        return Err(GesfError::Argument(format!(
            "exponents {lambda:?} are not non-increasing"
        )));
    }
    let mut alpha = lambda.to_vec();
    alpha.reverse();
    let mut total = 0.0;
    loop {
        total += alpha
            .iter()
            .zip(values)
            .map(|(&a, x)| x.powi(a as i32))
            .product::<f64>();
        if !next_permutation(&mut alpha) {
            return Ok(total);
        }
    }
}

/// The two-group worked example, returned as (expanded sum, factored form).
pub fn appendix_example(x11: f64, x12: f64, x21: f64, x22: f64) -> (f64, f64) {
    let expanded = x11 * x12.powi(2) * x21 * x22.powi(2)
        + x11.powi(2) * x12 * x21.powi(2) * x22
        + x11 * x12.powi(2) * x21.powi(2) * x22
        + x11.powi(2) * x12 * x21 * x22.powi(2)
        + x11.powi(2) * x12.powi(3) * x21.powi(3) * x22.powi(4)
        + x11.powi(3) * x12.powi(2) * x21.powi(4) * x22.powi(3)
        + x11.powi(2) * x12.powi(3) * x21.powi(4) * x22.powi(3)
        + x11.powi(3) * x12.powi(2) * x21.powi(3) * x22.powi(4);
    let g1 = [x11, x12];
    let g2 = [x21, x22];
    let m = |l: &[u32], v: &[f64]| monomial_sym(l, v).expect("valid exponents");
    let factored = m(&[2, 1], &g1) * m(&[2, 1], &g2) + m(&[3, 2], &g1) * m(&[4, 3], &g2);
    (expanded, factored)
}

/// Integer partitions of `total` with every part in `1..=max_part`, largest part first.
pub fn partitions(total: usize, max_part: usize) -> Vec<Vec<usize>> {
    if total == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in (1..=max_part.min(total)).rev() {
        for mut rest in partitions(total - first, first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Least squares `min |a c - b|` by Householder QR; `a` must have full column rank.
fn least_squares(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let (m, p) = a.dim();
    if m < p {
        return Err(GesfError::Argument("underdetermined system".into()));
    }
    for j in 0..p {
        let norm = (j..m).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GesfError::Numeric(format!("column {j} is rank deficient")));
        }
        let alpha = if a[[j, j]] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| a[[i, j]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..p {
                let dot: f64 = (j..m).map(|i| v[i - j] * a[[i, c]]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..m {
                    a[[i, c]] -= f * v[i - j];
                }
            }
            let dot: f64 = (j..m).map(|i| v[i - j] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                b[i] -= f * v[i - j];
            }
        }
        if a[[j, j]].abs() < 1e-12 * norm.max(1.0) {
            return Err(GesfError::Numeric(format!("column {j} is rank deficient")));
        }
    }
    let mut c = vec![0.0; p];
    for j in (0..p).rev() {
        let s: f64 = ((j + 1)..p).map(|k| a[[j, k]] * c[k]).sum();
        c[j] = (b[j] - s) / a[[j, j]];
    }
    Ok(c)
}

/// Expresses `m^lambda` in `n = lambda.len()` variables as a linear combination
/// of power-sum products `p_mu` (`mu` a partition of `|lambda|`, parts at most
/// `n`), fitted on random points. Returns the largest absolute residual on a
/// fresh set of points.
pub fn power_sum_reconstruction(lambda: &[u32], seed: u64) -> Result<f64> {
    let n = lambda.len();
    let degree = lambda.iter().sum::<u32>() as usize;
    let basis = partitions(degree, n);
    let rows = 4 * basis.len() + 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |rows: usize| -> Result<(Array2<f64>, Vec<f64>)> {
        let mut design = Array2::zeros((rows, basis.len()));
        let mut target = Vec::with_capacity(rows);
        for i in 0..rows {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let p = power_sums(&x, n.max(1));
            for (j, mu) in basis.iter().enumerate() {
                design[[i, j]] = mu.iter().map(|&part| p[part - 1]).product();
            }
            target.push(monomial_sym(lambda, &x)?);
        }
        Ok((design, target))
    };
    let (design, target) = sample(rows)?;
    let coef = least_squares(design, target)?;
    let (check, expect) = sample(rows)?;
    let fitted = check.dot(&ndarray::Array1::from(coef));
    Ok(fitted
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Every non-increasing exponent vector of length `1..=max_len` with entries `0..=max_exp`.
pub fn exponent_vectors(max_len: usize, max_exp: u32) -> Vec<Vec<u32>> {
    fn extend(prefix: &mut Vec<u32>, len: usize, cap: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for e in (0..=cap).rev() {
            prefix.push(e);
            extend(prefix, len, e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for len in 1..=max_len {
        extend(&mut Vec::new(), len, max_exp, &mut out);
    }
    out
}

/// Settings for [`fit_invariant`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub shape: DeepSetShape,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the step size from `learning_rate` towards zero.
    pub cosine_decay: bool,
    pub optimizer: Optimizer,
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

impl FitConfig {
    /// A small tanh network for `groups` groups of scalars.
    pub fn tanh(groups: usize) -> Self {
        FitConfig {
            shape: DeepSetShape {
                elem_dim: 1,
                inner_hidden: vec![32, 32],
                feature_dims: vec![16; groups],
                outer_hidden: vec![64, 64],
                activation: Activation::Tanh,
            },
            steps: 50_000,
            batch_size: 32,
            learning_rate: 1e-3,
            cosine_decay: true,
            optimizer: Optimizer::Adam,
            train_n: 50_000,
            test_n: 1024,
            seed: 0,
        }
    }

    /// Purely affine networks, enough for linear targets.
    pub fn linear(groups: usize) -> Self {
        FitConfig {
            shape: DeepSetShape {
                elem_dim: 1,
                inner_hidden: Vec::new(),
                feature_dims: vec![1; groups],
                outer_hidden: Vec::new(),
                activation: Activation::Identity,
            },
            steps: 5_000,
            cosine_decay: false,
            train_n: 4096,
            ..Self::tanh(groups)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: DeepSetModel,
    pub test_mse: f64,
    pub train_mse: f64,
    /// Variance of the target over the test inputs.
    pub target_variance: f64,
}

impl FitReport {
    /// Test MSE over target variance; the raw MSE when the target is constant.
    pub fn relative_mse(&self) -> f64 {
        if self.target_variance > 0.0 {
            self.test_mse / self.target_variance
        } else {
            self.test_mse
        }
    }
}

/// Probes `target` with random within-group reorderings; fails if any value moves by more than 1e-8.
pub fn check_invariance(
    target: &dyn Fn(&GroupedInput) -> f64,
    sizes: &[usize],
    elem_dim: usize,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = GroupedInput::random(sizes, elem_dim, &mut rng)?;
        let y = x.shuffled(&mut rng);
        worst = worst.max((target(&x) - target(&y)).abs());
    }
    if worst > 1e-8 {
        return Err(GesfError::Precondition(format!(
            "target changes by {worst:.3e} under within-group reordering"
        )));
    }
    Ok(worst)
}

/// Mean squared error of `m` on `xs` and its gradient.
fn batch_loss(m: &DeepSetModel, xs: &[&GroupedInput], ys: &[f64]) -> Result<(f64, DeepSetModel)> {
    let b = xs.len();
    let k = m.inner.len();
    let mut caches = Vec::with_capacity(k);
    let mut pooled = Array2::zeros((b, m.pooled_width()));
    let mut offset = 0;
    for g in 0..k {
        let n = xs[0].groups[g].nrows();
        let d = xs[0].groups[g].ncols();
        let mut stacked = Array2::zeros((b * n, d));
        for (s, x) in xs.iter().enumerate() {
            stacked.slice_mut(ndarray::s![s * n..(s + 1) * n, ..]).assign(&x.groups[g]);
        }
        let (feats, cache) = m.inner[g].forward_batch(stacked.view())?;
        let width = m.inner[g].output_dim();
        for s in 0..b {
            for row in 0..n {
                let mut dst = pooled.slice_mut(ndarray::s![s, offset..offset + width]);
                dst += &feats.row(s * n + row);
            }
        }
        caches.push((cache, n, offset));
        offset += width;
    }
    let (out, outer_cache) = m.outer.forward_batch(pooled.view())?;
    let mut loss = 0.0;
    let mut dout = Array2::zeros((b, 1));
    for s in 0..b {
        let r = out[[s, 0]] - ys[s];
        loss += r * r / b as f64;
        dout[[s, 0]] = 2.0 * r / b as f64;
    }
    let (g_outer, dpooled) = m.outer.backward_batch(&outer_cache, dout.view())?;
    let mut inner = Vec::with_capacity(k);
    for (g, (cache, n, off)) in caches.iter().enumerate() {
        let width = m.inner[g].output_dim();
        let mut dfeats = Array2::zeros((b * n, width));
        for s in 0..b {
            for row in 0..*n {
                dfeats
                    .row_mut(s * n + row)
                    .assign(&dpooled.slice(ndarray::s![s, *off..*off + width]));
            }
        }
        inner.push(m.inner[g].backward_batch(cache, dfeats.view())?.0);
    }
    Ok((
        loss,
        DeepSetModel {
            inner,
            outer: g_outer,
        },
    ))
}

/// Trains a deep-set model on samples of an invariant `target` and reports held-out error.
pub fn fit_invariant(
    target: &dyn Fn(&GroupedInput) -> f64,
    sizes: &[usize],
    cfg: &FitConfig,
) -> Result<FitReport> {
    if sizes.is_empty() || sizes.contains(&0) || cfg.shape.feature_dims.len() != sizes.len() {
        return Err(GesfError::Argument(
            "group sizes must be positive and match the feature widths".into(),
        ));
    }
    if cfg.train_n == 0 || cfg.test_n == 0 || cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(GesfError::Config("sample counts and steps must be positive".into()));
    }
    let elem_dim = cfg.shape.elem_dim;
    check_invariance(target, sizes, elem_dim, 100, cfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DeepSetModel::init(&cfg.shape, &mut rng)?;
    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<GroupedInput>, Vec<f64>)> {
        let xs = (0..count)
            .map(|_| GroupedInput::random(sizes, elem_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let ys = xs.iter().map(target).collect();
        Ok((xs, ys))
    };
    let (train_x, train_y) = draw(cfg.train_n, &mut rng)?;
    let (test_x, test_y) = draw(cfg.test_n, &mut rng)?;
    let mut opt = OptimizerState::new(cfg.optimizer, model.parameter_count());
    let mut order: Vec<usize> = (0..cfg.train_n).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(cfg.train_n);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xs: Vec<&GroupedInput> = idx.iter().map(|&i| &train_x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| train_y[i]).collect();
        let (loss, grads) = batch_loss(&model, &xs, &ys)?;
        if !loss.is_finite() {
            return Err(GesfError::Training {
                step,
                msg: "non-finite loss".into(),
            });
        }
        let lr = if cfg.cosine_decay {
            let phase = std::f64::consts::PI * step as f64 / cfg.steps as f64;
            cfg.learning_rate * 0.5 * (1.0 + phase.cos())
        } else {
            cfg.learning_rate
        };
        opt.step(&mut model, &grads, lr);
    }
    let mse_on = |xs: &[GroupedInput], ys: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let r = deepset_eval(&model, x)? - y;
            total += r * r;
        }
        Ok(total / xs.len() as f64)
    };
    let mse = mse_on(&test_x, &test_y)?;
    let train_mse = mse_on(&train_x, &train_y)?;
    let mean = test_y.iter().sum::<f64>() / cfg.test_n as f64;
    let var = test_y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / cfg.test_n as f64;
    Ok(FitReport {
        model,
        test_mse: mse,
        train_mse,
        target_variance: var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gradcheck::{central_difference, relative_error};
    use ndarray::{array, Array1};

    fn random_model(seed: u64, groups: usize) -> DeepSetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = DeepSetShape {
            elem_dim: 1,
            inner_hidden: vec![5],
            feature_dims: vec![3; groups],
            outer_hidden: vec![4],
            activation: Activation::Tanh,
        };
        DeepSetModel::init(&shape, &mut rng).unwrap()
    }

    #[test]
    fn linear_configuration_sums_everything() {
        let m = DeepSetModel {
            inner: vec![
                Mlp::linear(array![[1.0]], Array1::zeros(1)),
                Mlp::linear(array![[1.0]], Array1::zeros(1)),
            ],
            outer: Mlp::linear(array![[1.0, 1.0]], Array1::zeros(1)),
        };
        let x = GroupedInput::from_scalars(&[vec![1.0, 2.0, 3.0], vec![-0.5, 4.0]]).unwrap();
        assert!((deepset_eval(&m, &x).unwrap() - 9.5).abs() < 1e-15);
        let bad = GroupedInput::from_scalars(&[vec![1.0]]).unwrap();
        assert!(matches!(deepset_eval(&m, &bad), Err(GesfError::Argument(_))));
    }

    #[test]
    fn single_element_groups() {
        let m = random_model(3, 2);
        let x = GroupedInput::from_scalars(&[vec![0.3], vec![-0.8]]).unwrap();
        let mut pooled = m.inner[0].forward(&[0.3]).unwrap().0;
        pooled.extend(m.inner[1].forward(&[-0.8]).unwrap().0);
        let direct = m.outer.forward(&pooled).unwrap().0[0];
        assert_eq!(deepset_eval(&m, &x).unwrap(), direct);
    }

    #[test]
    fn deepset_is_partially_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let m = random_model(seed, 2);
            let x = GroupedInput::random(&[3, 3], 1, &mut rng).unwrap();
            let base = deepset_eval(&m, &x).unwrap();
            let y = x.shuffled(&mut rng);
            assert!((deepset_eval(&m, &y).unwrap() - base).abs() <= 1e-9 * base.abs().max(1.0));
            let sym = brute_symmetrize(|z| deepset_eval(&m, z), &x, Symmetrization::Average).unwrap();
            assert!((sym - base).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }

    #[test]
    fn symmetrize_examples() {
        let x = GroupedInput::from_scalars(&[vec![2.0, 5.0]]).unwrap();
        let avg = brute_symmetrize(|z| Ok(z.scalar(0, 0)), &x, Symmetrization::Average).unwrap();
        assert!((avg - 3.5).abs() < 1e-15);
        let sum = brute_symmetrize(|z| Ok(z.scalar(0, 0)), &x, Symmetrization::Sum).unwrap();
        assert!((sum - 7.0).abs() < 1e-15);
        let inv = |z: &GroupedInput| Ok(z.groups[0].sum() * z.groups[1].sum());
        let x = GroupedInput::from_scalars(&[vec![0.1, 0.2, 0.7], vec![1.5, -2.0]]).unwrap();
        let s = brute_symmetrize(inv, &x, Symmetrization::Average).unwrap();
        assert!((s - inv(&x).unwrap()).abs() < 1e-12);
        let big = GroupedInput::from_scalars(&[vec![0.0; 10]]).unwrap();
        assert!(matches!(
            brute_symmetrize(|_| Ok(0.0), &big, Symmetrization::Average),
            Err(GesfError::Resource(_))
        ));
    }

    #[test]
    fn power_sum_examples() {
        assert_eq!(power_sums(&[1.0, 2.0, 3.0], 3), vec![6.0, 14.0, 36.0]);
        assert_eq!(power_sums(&[3.0, 1.0, 2.0], 3), vec![6.0, 14.0, 36.0]);
        assert_eq!(power_sums(&[2.0], 3), vec![2.0, 4.0, 8.0]);
    }

    #[test]
    fn monomial_examples() {
        assert_eq!(monomial_sym(&[2, 1], &[1.0, 2.0]).unwrap(), 6.0);
        assert_eq!(monomial_sym(&[1, 1], &[1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(monomial_sym(&[0, 0], &[1.5, 2.0]).unwrap(), 1.0);
        assert!(matches!(monomial_sym(&[1, 2], &[1.0, 2.0]), Err(GesfError::Argument(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let p = power_sums(&x, 3);
            let m = monomial_sym(&[2, 1], &x).unwrap();
            assert!((m - (p[0] * p[1] - p[2])).abs() <= 1e-9 * m.abs().max(1.0));
        }
    }

    #[test]
    fn appendix_values() {
        let (e, f) = appendix_example(1.0, 2.0, 1.0, 2.0);
        assert_eq!((e, f), (324.0, 324.0));
        assert_eq!(appendix_example(0.0, 0.0, 3.0, -1.0), (0.0, 0.0));
    }

    #[test]
    fn partitions_and_reconstruction() {
        assert_eq!(partitions(4, 2), vec![vec![2, 2], vec![2, 1, 1], vec![1, 1, 1, 1]]);
        assert_eq!(partitions(0, 3), vec![Vec::<usize>::new()]);
        assert_eq!(exponent_vectors(3, 3).len(), 4 + 10 + 20);
        for lambda in [vec![2, 1], vec![3, 3, 1], vec![1, 1, 1]] {
            assert!(power_sum_reconstruction(&lambda, 1).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn least_squares_exact_system() {
        let a = array![[2.0, 1.0], [1.0, 3.0], [0.0, 1.0]];
        let c = least_squares(a.clone(), vec![5.0, 10.0, 3.0]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 3.0).abs() < 1e-12);
        assert!(least_squares(array![[1.0, 2.0], [2.0, 4.0]], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let m = random_model(9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<GroupedInput> = (0..4)
            .map(|_| GroupedInput::random(&[3, 2], 1, &mut rng).unwrap())
            .collect();
        let refs: Vec<&GroupedInput> = xs.iter().collect();
        let ys = [0.1, -0.4, 0.9, 0.0];
        let (_, grads) = batch_loss(&m, &refs, &ys).unwrap();
        let numeric = central_difference(
            |p| {
                let mut probe = m.clone();
                probe.assign(p);
                batch_loss(&probe, &refs, &ys).unwrap().0
            },
            &m.flatten(),
            1e-5,
        );
        assert!(relative_error(&grads.flatten(), &numeric) <= 1e-6);
    }

    #[test]
    fn non_invariant_target_rejected() {
        let first = |z: &GroupedInput| z.scalar(0, 0);
        let cfg = FitConfig::linear(1);
        assert!(matches!(
            fit_invariant(&first, &[3], &cfg),
            Err(GesfError::Precondition(_))
        ));
    }

    #[test]
    fn constant_target_fits() {
        let mut cfg = FitConfig::linear(1);
        cfg.steps = 3000;
        cfg.learning_rate = 1e-2;
        let r = fit_invariant(&|_| 1.0, &[2], &cfg).unwrap();
        assert!(r.test_mse <= 1e-6, "{}", r.test_mse);
    }
}
