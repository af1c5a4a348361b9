//! Parameter layouts shared by the trainable modules.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Element, Result, Tensor};

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(±1/√fan_in)` for weight and bias.
    Uniform,
    /// `N(0, gain²·2/fan_in)` weights, zero bias.
    He {
        gain: f64,
    },
    /// `U(±√(6/(fan_in+fan_out)))` weights, zero bias.
    Xavier,
    /// Identity weights (square only), zero bias.
    Identity,
    Zeros,
}

/// A dense layer `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [fan_in, fan_out];
        let (w, b) = match init {
            Init::Uniform => {
                let k = 1.0 / (fan_in as f64).sqrt();
                let w = Tensor::uniform(&shape, -k, k, rng);
                let b = bias.then(|| Tensor::uniform(&[fan_out], -k, k, rng));
                (w, b)
            }
            Init::He { gain } => {
                let std = gain * (2.0 / fan_in as f64).sqrt();
                (
                    Tensor::randn(&shape, std, rng),
                    bias.then(|| Tensor::zeros(&[fan_out])),
                )
            }
            Init::Xavier => {
                let k = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (
                    Tensor::uniform(&shape, -k, k, rng),
                    bias.then(|| Tensor::zeros(&[fan_out])),
                )
            }
            Init::Identity => {
                assert_eq!(fan_in, fan_out, "identity init needs a square layer");
                (Tensor::eye(fan_in), bias.then(|| Tensor::zeros(&[fan_out])))
            }
            Init::Zeros => (
                Tensor::zeros(&shape),
                bias.then(|| Tensor::zeros(&[fan_out])),
            ),
        };
        let w = store.add(format!("{name}/w"), w);
        let b = b.map(|b| store.add(format!("{name}/b"), b));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

/// Layer norm with learned scale and shift over the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}/gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm_affine(x, p[self.gamma], p[self.beta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let a = Linear::new(&mut store, "a", 16, 8, true, Init::Uniform, &mut rng);
        let id = Linear::new(&mut store, "id", 4, 4, true, Init::Identity, &mut rng);
        let nb = Linear::new(&mut store, "nb", 3, 2, false, Init::Xavier, &mut rng);
        assert_eq!(store.get(a.w).shape(), &[16, 8]);
        assert!(store.get(a.w).max_abs() <= 0.25);
        assert_eq!(store.get(id.w), &Tensor::eye(4));
        assert!(nb.b.is_none());
        assert_eq!(store.find("a/b"), a.b);
    }
}
