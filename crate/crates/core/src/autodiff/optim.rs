use std::ops::Index;

use super::graph::{Gradients, Graph, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors owned outside any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| g.param(v.clone())).collect())
    }

    /// Records every parameter as a constant (frozen weights).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| g.constant(v.clone())).collect())
    }

    /// Replaces every value, keeping names and shapes.
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(TensorError::Invalid {
                op: "load",
                msg: format!(
                    "expected {} tensors, got {}",
                    self.values.len(),
                    values.len()
                ),
            });
        }
        for (cur, new) in self.values.iter().zip(&values) {
            cur.expect_same_shape(new, "load")?;
        }
        self.values = values;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Collects the gradient of every bound parameter.
    pub fn grads<T: Element>(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.0.iter().map(|&v| grads.get(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let shapes: Vec<Vec<usize>> = store.iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        Self::new(config, shapes.iter().map(Vec::as_slice))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "state for {} tensors, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape(g, "adam_step")?;
            p.expect_same_shape(m, "adam_step")?;
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.step(&mut store.values, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::vector(vec![1.0, -2.0])];
        let mut adam = Adam::new(AdamConfig::default(), [p[0].shape()]);
        adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // bias-corrected m̂/√v̂ = g/|g| on the first step
        let mut p = vec![Tensor::<f64>::vector(vec![0.5, 0.5])];
        let mut adam = Adam::new(AdamConfig::default(), [p[0].shape()]);
        adam.step(&mut p, &[Tensor::vector(vec![3.0, -0.2])])
            .unwrap();
        let expect_pos = 0.5 - 1e-3 * 3.0 / (3.0 + 1e-8);
        let expect_neg = 0.5 + 1e-3 * 0.2 / (0.2 + 1e-8);
        assert!((p[0].data()[0] - expect_pos).abs() < 1e-12);
        assert!((p[0].data()[1] - expect_neg).abs() < 1e-12);
    }

    #[test]
    fn step_counter_and_shape_checks() {
        let mut p = vec![Tensor::<f32>::zeros(&[3])];
        let mut adam = Adam::new(AdamConfig::default(), [p[0].shape()]);
        let g = [Tensor::ones(&[3])];
        adam.step(&mut p, &g).unwrap();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(adam.step_count(), 2);
        assert!(adam.step(&mut p, &[Tensor::ones(&[2])]).is_err());
    }
}
