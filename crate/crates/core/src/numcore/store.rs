use ndarray::Array2;
use rand::Rng;

use super::{Grads, Tensor2};
use crate::error::{Result, TmlpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Named trainable tensors with their pending gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Option<Tensor2>>,
    first_moment: Vec<Tensor2>,
    second_moment: Vec<Tensor2>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let dim = value.dim();
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        self.first_moment.push(Array2::zeros(dim));
        self.second_moment.push(Array2::zeros(dim));
        ParamId(self.values.len() - 1)
    }

    /// Glorot/Xavier uniform: U(−a, a) with a = sqrt(6 / (rows + cols)).
    pub fn add_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor2> {
        self.grads[id.0].as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Adds the parameter gradients from a backward pass to the pending buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (id, g) in grads.params() {
            match &mut self.grads[id.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Squared L2 norm of all parameters.
    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// One bias-corrected Adam update over every parameter with a pending
    /// gradient, then clears the gradients. Parameters without a gradient
    /// keep their moments untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let Some(g) = self.grads[i].take() else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let p = &mut self.values[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    let decay = if cfg.weight_decay > 0.0 {
                        cfg.weight_decay * *p
                    } else {
                        0.0
                    };
                    *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay);
                });
        }
    }

    /// Replaces parameter values by name, e.g. from a checkpoint. Every
    /// parameter must be present with a matching shape.
    pub fn load_values(&mut self, tensors: &[(String, Tensor2)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = tensors.iter().find(|(n, _)| n == name).ok_or_else(|| {
                TmlpError::InvalidArgument(format!("checkpoint lacks parameter {name}"))
            })?;
            if t.dim() != self.values[i].dim() {
                return Err(TmlpError::Shape {
                    op: "load_values",
                    left: self.values[i].dim(),
                    right: t.dim(),
                });
            }
            self.values[i].assign(t);
        }
        Ok(())
    }

    /// Copies parameter values (not optimizer state) from another store
    /// with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }
}
