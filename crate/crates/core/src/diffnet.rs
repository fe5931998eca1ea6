//! Small fixed-architecture networks with hand-written reverse mode.
//!
//! Layers compute `W x + b` with `W` stored `out x in`. Hidden layers apply
//! `tanh`, the last layer is linear. Batched calls take one sample per row.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-limit..=limit)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `W x + b` for a single sample.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .rows()
            .into_iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

/// Classifier head: one row of `weight` and one bias entry per class or label.
pub type ClassifierParams = Dense;

/// A multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// One tag per hidden layer (`layers.len() - 1` entries).
    pub activations: Vec<Activation>,
}

/// Values retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of every layer, one sample per row.
    inputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Input of layer `i`; for `i >= 1` these are the hidden activations.
    pub fn layer_input(&self, i: usize) -> ArrayView2<'_, f64> {
        self.inputs[i].view()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(GesfError::Argument(format!(
            "an MLP needs at least input and output dimensions, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(GesfError::Argument(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Xavier-uniform initialization, reproducible from `seed`.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(dims, activation, &mut rng)
    }

    pub fn init_with_rng<R: Rng>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            activations: vec![activation; dims.len() - 2],
        })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(dims)?;
        Ok(Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            activations: vec![activation; dims.len() - 2],
        })
    }

    /// Single-layer map `W x + b`.
    pub fn linear(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Mlp {
            layers: vec![Dense { weight, bias }],
            activations: Vec::new(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            activations: self.activations.clone(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    /// Forward pass for one sample.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let input = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        let (y, cache) = self.forward_batch(input.view())?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Forward pass for a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_dim() {
            return Err(GesfError::Argument(format!(
                "input has dimension {}, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if let Some(act) = self.activations.get(i) {
                z.mapv_inplace(|v| act.apply(v));
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Evaluation without keeping a cache.
    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x)?.0)
    }

    /// Reverse pass for one sample: gradients of `<dy, y>`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let dy = Array2::from_shape_vec((1, dy.len()), dy.to_vec()).unwrap();
        let (grads, dx) = self.backward_batch(cache, dy.view())?;
        Ok((grads, dx.into_raw_vec_and_offset().0))
    }

    /// Reverse pass for a batch; parameter gradients are summed over samples.
    pub fn backward_batch(&self, cache: &MlpCache, dy: ArrayView2<f64>) -> Result<(Mlp, Array2<f64>)> {
        let stale = cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(inp, l)| inp.ncols() != l.input_dim() || inp.nrows() != dy.nrows());
        if stale || dy.ncols() != self.output_dim() {
            return Err(GesfError::Usage(
                "backward called with a cache or upstream gradient from a different network".into(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weight = standard(dz.t().dot(input));
            let bias = dz.sum_axis(Axis(0));
            let mut dinput = dz.dot(&layer.weight);
            if i > 0 {
                let act = self.activations[i - 1];
                ndarray::Zip::from(&mut dinput)
                    .and(input)
                    .for_each(|d, &y| *d *= act.grad_from_output(y));
            }
            grads.push(Dense { weight, bias });
            dz = dinput;
        }
        grads.reverse();
        Ok((
            Mlp {
                layers: grads,
                activations: self.activations.clone(),
            },
            dz,
        ))
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Flat access to every trainable scalar, block by block in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, d| {
            d.copy_from_slice(&flat[pos..pos + d.len()]);
            pos += d.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

fn dense_visit(layer: &Dense, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    let w = &layer.weight;
    f(
        &format!("{name}.weight"),
        &[w.nrows(), w.ncols()],
        w.as_slice().expect("standard layout"),
    );
    f(
        &format!("{name}.bias"),
        &[layer.bias.len()],
        layer.bias.as_slice().expect("standard layout"),
    );
}

fn dense_visit_mut(layer: &mut Dense, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(
        &format!("{name}.weight"),
        layer.weight.as_slice_mut().expect("standard layout"),
    );
    f(
        &format!("{name}.bias"),
        layer.bias.as_slice_mut().expect("standard layout"),
    );
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        dense_visit(self, "dense", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        dense_visit_mut(self, "dense", f);
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            dense_visit(l, &format!("layer{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            dense_visit_mut(l, &format!("layer{i}"), f);
        }
    }
}

/// One named, shape-tagged block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter blocks, serialized as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    pub blocks: BTreeMap<String, ParamBlock>,
}

impl ParamStore {
    /// Adds every block of `params` under `prefix.`.
    pub fn insert_all(&mut self, prefix: &str, params: &dyn Parameters) {
        params.visit(&mut |name, dims, data| {
            self.blocks.insert(
                format!("{prefix}.{name}"),
                ParamBlock {
                    dims: dims.to_vec(),
                    data: data.to_vec(),
                },
            );
        });
    }

    /// Overwrites `params` (whose shapes must already match) from blocks under `prefix.`.
    pub fn restore(&self, prefix: &str, params: &mut dyn Parameters) -> Result<()> {
        let mut err = None;
        params.visit_mut(&mut |name, data| {
            let key = format!("{prefix}.{name}");
            match self.blocks.get(&key) {
                Some(b) if b.data.len() == data.len() => data.copy_from_slice(&b.data),
                Some(_) => err = Some(GesfError::Validation(format!("block {key} has wrong size"))),
                None => err = Some(GesfError::Validation(format!("checkpoint lacks block {key}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn dims(&self, key: &str) -> Option<&[usize]> {
        self.blocks.get(key).map(|b| b.dims.as_slice())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain stochastic gradient steps.
    Sgd,
    /// Heavy-ball momentum with coefficient 0.9.
    Momentum,
    /// Adam with the usual (0.9, 0.999, 1e-8) constants.
    #[default]
    Adam,
}

/// Per-parameter optimizer memory, laid out as [`Parameters::flatten`].
pub struct OptimizerState {
    kind: OptKind,
}

enum OptKind {
    Sgd,
    Momentum(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptimizerState {
    pub fn new(kind: Optimizer, size: usize) -> Self {
        let kind = match kind {
            Optimizer::Sgd => OptKind::Sgd,
            Optimizer::Momentum => OptKind::Momentum(vec![0.0; size]),
            Optimizer::Adam => OptKind::Adam {
                m: vec![0.0; size],
                v: vec![0.0; size],
                t: 0,
            },
        };
        OptimizerState { kind }
    }

    /// One descent step on `model` along `grads` (same block layout).
    pub fn step(&mut self, model: &mut dyn Parameters, grads: &dyn Parameters, lr: f64) {
        let g = grads.flatten();
        let mut pos = 0;
        match &mut self.kind {
            OptKind::Sgd => model.visit_mut(&mut |_, d| {
                for x in d.iter_mut() {
                    *x -= lr * g[pos];
                    pos += 1;
                }
            }),
            OptKind::Momentum(vel) => model.visit_mut(&mut |_, d| {
                for x in d.iter_mut() {
                    vel[pos] = 0.9 * vel[pos] + g[pos];
                    *x -= lr * vel[pos];
                    pos += 1;
                }
            }),
            OptKind::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - 0.9f64.powi(*t);
                let c2 = 1.0 - 0.999f64.powi(*t);
                model.visit_mut(&mut |_, d| {
                    for x in d.iter_mut() {
                        m[pos] = 0.9 * m[pos] + 0.1 * g[pos];
                        v[pos] = 0.999 * v[pos] + 0.001 * g[pos] * g[pos];
                        *x -= lr * (m[pos] / c1) / ((v[pos] / c2).sqrt() + 1e-8);
                        pos += 1;
                    }
                })
            }
        }
    }
}

/// Softmax cross-entropy with max subtraction: `(loss, softmax - onehot)`.
pub fn softmax_ce(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 || true_class >= logits.len() {
        return Err(GesfError::Argument(format!(
            "class {true_class} with {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(GesfError::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[true_class] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[true_class] -= 1.0;
    Ok((loss, grad))
}

/// `log(1 + exp(s)) - y s` and its derivative `sigmoid(s) - y`.
pub fn logistic_label(score: f64, y: bool) -> Result<(f64, f64)> {
    if !score.is_finite() {
        return Err(GesfError::Numeric("non-finite score".into()));
    }
    let y = if y { 1.0 } else { 0.0 };
    let softplus = score.max(0.0) + (-score.abs()).exp().ln_1p();
    Ok((softplus - y * score, sigmoid(score) - y))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Finite-difference helpers for verifying hand-written gradients.
pub mod gradcheck {
    /// Central differences of `f` at `x`, one coordinate at a time.
    pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + step;
                let up = f(&probe);
                probe[i] = orig - step;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_difference, relative_error};
    use super::*;
    use ndarray::array;

    #[test]
    fn init_shapes_and_determinism() {
        let m = Mlp::init(&[2, 3, 2], Activation::Tanh, 7).unwrap();
        assert_eq!(m.layers[0].weight.dim(), (3, 2));
        assert_eq!(m.layers[0].bias.len(), 3);
        assert_eq!(m.layers[1].weight.dim(), (2, 3));
        assert_eq!(m.layers[1].bias.len(), 2);
        assert_eq!(m, Mlp::init(&[2, 3, 2], Activation::Tanh, 7).unwrap());
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(m.layers[0].weight.iter().all(|w| w.abs() <= limit));
        assert!(matches!(Mlp::init(&[], Activation::Tanh, 0), Err(GesfError::Argument(_))));
        assert!(matches!(Mlp::init(&[3], Activation::Tanh, 0), Err(GesfError::Argument(_))));
    }

    #[test]
    fn forward_special_cases() {
        let z = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(z.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);
        let id = Mlp::linear(Array2::eye(3), Array1::zeros(3));
        assert_eq!(id.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![1.0, -2.0, 3.0]);
        assert!(matches!(id.forward(&[1.0]), Err(GesfError::Argument(_))));
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        for seed in 0..10 {
            let m = Mlp::init(&[3, 5, 4, 2], Activation::Tanh, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = m.forward(&x).unwrap().0;
            let mut h = x.clone();
            for (i, l) in m.layers.iter().enumerate() {
                let mut next = vec![0.0; l.output_dim()];
                for o in 0..l.output_dim() {
                    let mut acc = l.bias[o];
                    for j in 0..l.input_dim() {
                        acc += l.weight[[o, j]] * h[j];
                    }
                    next[o] = if i + 1 < m.layers.len() { acc.tanh() } else { acc };
                }
                h = next;
            }
            for (a, b) in y.iter().zip(&h) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_closed_form_single_layer() {
        let m = Mlp::linear(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], array![0.5, 0.0, -0.5]);
        let x = [0.3, -0.7];
        let dy = [1.0, -2.0, 0.5];
        let (_, cache) = m.forward(&x).unwrap();
        let (g, dx) = m.backward(&cache, &dy).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                assert!((g.layers[0].weight[[o, i]] - dy[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(g.layers[0].bias[o], dy[o]);
        }
        let expect = [1.0 - 6.0 + 2.5, 2.0 - 8.0 + 3.0];
        assert!((dx[0] - expect[0]).abs() < 1e-12 && (dx[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn backward_zero_upstream() {
        let m = Mlp::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let (_, cache) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, dx) = m.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let m = Mlp::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let other = Mlp::init(&[2, 4, 2], Activation::Tanh, 1).unwrap();
        let (_, cache) = other.forward(&[0.1, 0.2]).unwrap();
        assert!(matches!(m.backward(&cache, &[1.0, 1.0]), Err(GesfError::Usage(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let m = Mlp::init(&[3, 6, 5, 2], Activation::Tanh, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = m.forward(&x).unwrap();
            let (g, dx) = m.backward(&cache, &dy).unwrap();
            let objective = |net: &Mlp, input: &[f64]| -> f64 {
                let y = net.forward(input).unwrap().0;
                y.iter().zip(&dy).map(|(a, b)| a * b).sum()
            };
            let theta = m.flatten();
            let numeric = central_difference(
                |p| {
                    let mut probe = m.clone();
                    probe.assign(p);
                    objective(&probe, &x)
                },
                &theta,
                1e-5,
            );
            // compare block by block
            let analytic = g.flatten();
            let mut pos = 0;
            g.visit(&mut |name, _, d| {
                let err = relative_error(d, &numeric[pos..pos + d.len()]);
                assert!(err <= 1e-5, "seed {seed} block {name}: {err}");
                pos += d.len();
            });
            assert_eq!(pos, analytic.len());
            let num_dx = central_difference(|p| objective(&m, p), &x, 1e-5);
            assert!(relative_error(&dx, &num_dx) <= 1e-5);
        }
    }

    #[test]
    fn hidden_values_bounded() {
        let m = Mlp::init(&[2, 8, 1], Activation::Tanh, 3).unwrap();
        let (_, cache) = m.forward(&[1e3, -1e3]).unwrap();
        assert!(cache.inputs[1].iter().all(|h| h.abs() <= 1.0));
    }

    #[test]
    fn softmax_examples() {
        let (l, _) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, g) = softmax_ce(&[1.0, 0.0], 1).unwrap();
        assert!((l - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 1.313262).abs() < 1e-6);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        let (l, _) = softmax_ce(&[30.0, -30.0], 0).unwrap();
        assert!(l >= 0.0 && l <= 1e-12);
        assert!(matches!(softmax_ce(&[f64::NAN, 0.0], 0), Err(GesfError::Numeric(_))));
        assert!(matches!(softmax_ce(&[0.0, 0.0], 2), Err(GesfError::Argument(_))));
    }

    #[test]
    fn softmax_shift_invariance_and_gradient() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 17.25).collect();
        let (a, ga) = softmax_ce(&logits, 2).unwrap();
        let (b, gb) = softmax_ce(&shifted, 2).unwrap();
        assert!((a - b).abs() <= 1e-12);
        let num = central_difference(|z| softmax_ce(z, 2).unwrap().0, &logits, 1e-5);
        assert!(relative_error(&ga, &num) <= 1e-8);
        assert!(relative_error(&ga, &gb) <= 1e-12);
    }

    #[test]
    fn logistic_examples() {
        assert!((logistic_label(0.0, true).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        assert!((logistic_label(0.0, false).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        let (l, _) = logistic_label(10.0, true).unwrap();
        assert!((l - 4.5399e-5).abs() < 1e-8);
        let (l, _) = logistic_label(800.0, false).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        for s in [-40.0, -3.0, -0.1, 0.0, 0.7, 12.0, 700.0] {
            let d = logistic_label(s, true).unwrap().0 - logistic_label(s, false).unwrap().0;
            assert!((d + s).abs() <= 1e-12 * s.abs().max(1.0));
            let num = central_difference(|z| logistic_label(z[0], true).unwrap().0, &[s], 1e-5);
            let (_, g) = logistic_label(s, true).unwrap();
            assert!((num[0] - g).abs() < 1e-8);
        }
    }

    #[test]
    fn store_round_trip() {
        let m = Mlp::init(&[2, 3, 1], Activation::Tanh, 4).unwrap();
        let mut store = ParamStore::default();
        store.insert_all("rho", &m);
        assert_eq!(store.dims("rho.layer0.weight"), Some(&[3usize, 2][..]));
        let text = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        let mut restored = Mlp::zeros(&[2, 3, 1], Activation::Tanh).unwrap();
        back.restore("rho", &mut restored).unwrap();
        assert_eq!(restored, m);
        let mut wrong = Mlp::zeros(&[2, 4, 1], Activation::Tanh).unwrap();
        assert!(back.restore("rho", &mut wrong).is_err());
    }
}
