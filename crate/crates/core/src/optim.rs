//! Named parameter storage and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::{GradMap, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}`: gradient shape {grad:?} does not match {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

/// One parameter with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl ParamEntry {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters keyed by path (e.g. `den.enc.s2.swin0.attn.wq`), iterated in
/// lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Result<(), OptimError> {
        self.insert_entry(name, ParamEntry::new(shape, value))
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry) -> Result<(), OptimError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(OptimError::Duplicate(name));
        }
        self.params.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Materializes every parameter as a leaf tensor for one forward pass.
    /// With `track`, the leaves are named and receive gradients.
    pub fn bind(&self, track: bool) -> BoundParams {
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = if track {
                    Tensor::param(name.clone(), p.shape.clone(), p.value.clone())
                } else {
                    Tensor::new(p.shape.clone(), p.value.clone())
                };
                (name.clone(), t)
            })
            .collect();
        BoundParams { map }
    }

    /// Gradient map covering every parameter, zero where `grads` has none.
    pub fn complete_grads(&self, grads: &GradMap) -> GradMap {
        let mut out = GradMap::new();
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape.clone()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry are left untouched, including their step counters.
    pub fn adam_step(&mut self, grads: &GradMap, cfg: &AdamConfig) -> Result<(), OptimError> {
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| OptimError::UnknownParam(name.clone()))?;
            if p.shape != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    param: p.shape.clone(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        for (name, g) in grads.iter() {
            let p = self.params.get_mut(name).expect("validated above");
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            for (((x, m), v), &gi) in p
                .value
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Leaf tensors for one forward pass, looked up by parameter path.
pub struct BoundParams {
    map: HashMap<String, Tensor>,
}

impl FromIterator<(String, Tensor)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
