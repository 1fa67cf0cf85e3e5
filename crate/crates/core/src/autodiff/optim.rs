use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    pub values: Vec<Tensor<T>>,
    decay: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), decay: Vec::new(), lookup: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.names.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(rows, cols, |_, _| lit(rng.sample(normal)));
        self.add(name, t, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols), false)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, x: T) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, x), false)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape. Trainable parameters become leaves,
    /// frozen ones constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect()
    }

    /// Pulls one gradient per parameter, zero where none flowed.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
            .collect()
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 1,
            min_lr_ratio: 0.05,
        }
    }
}

impl AdamWConfig {
    /// Linear warmup followed by cosine decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        self.update_subset(params, grads, None);
    }

    /// Like [`AdamW::update`] but leaves parameters with `active[i] == false`
    /// (and their moments) untouched.
    pub fn update_subset(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], active: Option<&[bool]>) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let c = self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (ob1, ob2) = (lit::<T>(1.0 - c.beta1), lit::<T>(1.0 - c.beta2));
        let step_size = lit::<T>(lr / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        let eps = lit::<T>(c.eps);
        for i in 0..params.len() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let decay = if params.decay[i] { lit::<T>(1.0 - lr * c.weight_decay) } else { T::one() };
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for (j, p) in params.values[i].data.iter_mut().enumerate() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                *p = *p * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
