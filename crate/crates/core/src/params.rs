//! Named parameter collections and the optimizers that update them.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Matrix, Var};
use crate::rng::Rng;

/// Ordered map from tensor name to value. Ordering is lexicographic so
/// iteration (and therefore checkpoints and optimizer state) is stable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Matrix>);

/// Graph handles for every tensor of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Collect gradients for every bound tensor.
    pub fn grads(&self, grads: &Gradients) -> ParamSet {
        ParamSet(self.0.iter().map(|(k, &v)| (k.clone(), grads.get(v))).collect())
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    /// Panicking accessor for tensors whose presence is a construction invariant.
    pub fn tensor(&self, name: &str) -> &Matrix {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|m| m.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams(self.0.iter().map(|(k, m)| (k.clone(), g.leaf(m.clone()))).collect())
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet(self.0.iter().map(|(k, m)| (k.clone(), Matrix::zeros(m.dim()))).collect())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, a), (kb, b))| ka == kb && a.dim() == b.dim())
    }

    /// `self += factor * other`, matching tensors by name.
    pub fn axpy(&mut self, factor: f64, other: &ParamSet) {
        for (k, m) in self.0.iter_mut() {
            if let Some(o) = other.0.get(k) {
                m.scaled_add(factor, o);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.0
            .iter()
            .filter_map(|(k, a)| other.0.get(k).map(|b| (a, b)))
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Flatten all scalars in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flat_map(|m| m.iter().copied()).collect()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        if self.m.is_empty() {
            self.m = params.zeros_like();
            self.v = params.zeros_like();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("optimizer state");
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            let v = self.v.get_mut(name).expect("optimizer state");
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let (m, v) = (&self.m.tensor(name), &self.v.tensor(name));
            ndarray::Zip::from(p).and(*m).and(*v).for_each(|pv, &mv, &vv| {
                *pv -= self.lr * self.weight_decay * *pv;
                *pv -= self.lr * (mv / bc1) / ((vv / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Plain gradient descent: `params - lr * grads`.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> ParamSet {
    let mut out = params.clone();
    out.axpy(-lr, grads);
    out
}
