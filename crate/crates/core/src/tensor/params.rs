use indexmap::IndexMap;

use super::{Result, Tensor, TensorError};

/// A named trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            frozen: false,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Insertion-ordered parameter table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param::new(value));
        Ok(())
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .frozen = frozen;
        Ok(())
    }

    /// Freezes exactly the parameters matching `pred` and unfreezes the rest.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.frozen = pred(name);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Clears Adam moments and step counters.
    pub fn reset_optimizer(&mut self) {
        for p in self.entries.values_mut() {
            p.m.iter_mut().for_each(|x| *x = 0.0);
            p.v.iter_mut().for_each(|x| *x = 0.0);
            p.t = 0;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay over every
/// non-frozen parameter, then zeroes all gradients. Frozen entries are not
/// touched at all (values, moments and step count stay bit-identical).
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(TensorError::Invalid(format!(
            "adam: lr ({}) and weight decay ({}) must be non-negative",
            cfg.lr, cfg.weight_decay
        )));
    }
    for p in store.entries.values_mut() {
        if p.frozen {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            continue;
        }
        p.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.t as i32);
        let decay = cfg.lr * cfg.weight_decay;
        let data = p.value.data_mut();
        for j in 0..data.len() {
            let g = p.grad[j];
            p.m[j] = cfg.beta1 * p.m[j] + (1.0 - cfg.beta1) * g;
            p.v[j] = cfg.beta2 * p.v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = p.m[j] / bc1;
            let vhat = p.v[j] / bc2;
            data[j] -= decay * data[j];
            data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            p.grad[j] = 0.0;
        }
    }
    Ok(())
}
