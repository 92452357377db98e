//! Named parameter collections, gradient buffers, and the SGD optimizer.

use crate::error::{Error, Result};
use rand::Rng;

/// One named array of trainable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Biases are excluded from weight decay.
    pub is_bias: bool,
}

/// Ordered set of named parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter initialised uniformly in `±1/sqrt(fan_in)`.
    /// Returns its index.
    pub fn push_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        is_bias: bool,
        rng: &mut impl Rng,
    ) -> usize {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(Param {
            name: name.into(),
            shape,
            data,
            is_bias,
        })
    }

    pub fn push(&mut self, p: Param) -> usize {
        debug_assert_eq!(p.shape.iter().product::<usize>(), p.data.len());
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view over every value in declaration order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.data.iter().copied())
    }

    pub fn value_mut(&mut self, flat: usize) -> &mut f64 {
        let mut i = flat;
        for p in &mut self.params {
            if i < p.data.len() {
                return &mut p.data[i];
            }
            i -= p.data.len();
        }
        panic!("flat index {flat} out of range");
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|g| g.iter().copied())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    /// Splits the buffers as `(&mut [0, at), &mut [at, len))`.
    pub fn split_at_mut(&mut self, at: usize) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        self.0.split_at_mut(at)
    }
}

/// SGD hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers for one parameter set.
///
/// Update rule: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`, with `λ = 0` on biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Self {
        Sgd {
            config,
            velocity: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.params.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            let wd = if p.is_bias { 0.0 } else { weight_decay };
            for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + (gi + wd * *w);
                *w -= lr * *vi;
            }
        }
    }
}
