//! Layer autoencoders mapping CAVs of any width to one shared embedding size.
//!
//! Encoder `d_l → hidden → d_embed` and decoder `d_embed → hidden → d_l` are
//! two bias-free linear maps with a ReLU between them; both outputs stay
//! linear so signed CAV components survive the round trip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Bound, Graph, ParamStore, Var};
use crate::cav::CavVector;
use crate::error::{GcavError, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{cosine, norm, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub d_embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Largest acceptable final mean reconstruction loss.
    pub threshold: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            d_embed: 64,
            hidden: 64,
            epochs: 500,
            lr: 1e-3,
            threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAutoencoder<T: Element = f32> {
    pub layer: String,
    pub d_layer: usize,
    pub d_embed: usize,
    pub store: ParamStore<T>,
    enc: [Linear; 2],
    dec: [Linear; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavEmbedding {
    pub concept_id: String,
    pub layer: String,
    pub run_index: usize,
    pub z: Vec<f32>,
}

impl<T: Element> LayerAutoencoder<T> {
    pub fn new<R: Rng + ?Sized>(layer: &str, d_layer: usize, cfg: &AeConfig, rng: &mut R) -> Self {
        Self::with_init(layer, d_layer, cfg, Init::Uniform, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        layer: &str,
        d_layer: usize,
        cfg: &AeConfig,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let enc = [
            Linear::new(&mut store, "enc/0", d_layer, cfg.hidden, false, init, rng),
            Linear::new(
                &mut store,
                "enc/1",
                cfg.hidden,
                cfg.d_embed,
                false,
                init,
                rng,
            ),
        ];
        let dec = [
            Linear::new(
                &mut store,
                "dec/0",
                cfg.d_embed,
                cfg.hidden,
                false,
                init,
                rng,
            ),
            Linear::new(&mut store, "dec/1", cfg.hidden, d_layer, false, init, rng),
        ];
        Self {
            layer: layer.to_string(),
            d_layer,
            d_embed: cfg.d_embed,
            store,
            enc,
            dec,
        }
    }

    pub fn cast<U: Element>(&self) -> LayerAutoencoder<U> {
        LayerAutoencoder {
            layer: self.layer.clone(),
            d_layer: self.d_layer,
            d_embed: self.d_embed,
            store: self.store.cast(),
            enc: self.enc,
            dec: self.dec,
        }
    }

    fn two_layer(g: &mut Graph<T>, p: &Bound, layers: &[Linear; 2], x: Var) -> Result<Var> {
        let h = layers[0].apply(g, p, x)?;
        let h = g.relu(h)?;
        Ok(layers[1].apply(g, p, h)?)
    }

    /// Encoder on rows `[n × d_l] → [n × d_embed]`.
    pub fn graph_encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Self::two_layer(g, p, &self.enc, x)
    }

    /// Decoder on rows `[n × d_embed] → [n × d_l]`.
    pub fn graph_decode(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        Self::two_layer(g, p, &self.dec, z)
    }

    fn rows(x: &Tensor<T>, width: usize, op: &'static str) -> Result<Tensor<T>> {
        match x.shape() {
            [d] if *d == width => Ok(x.reshape(&[1, width])?),
            [_, d] if *d == width => Ok(x.clone()),
            s => Err(GcavError::invalid(
                op,
                format!("shape {s:?}, expected last dim {width}"),
            )),
        }
    }

    fn eval(&self, x: &Tensor<T>, width: usize, op: &'static str, enc: bool) -> Result<Tensor<T>> {
        let rows = Self::rows(x, width, op)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(rows);
        let out = if enc {
            self.graph_encode(&mut g, &p, xv)?
        } else {
            self.graph_decode(&mut g, &p, xv)?
        };
        let out = g.value(out).clone();
        if x.rank() == 1 {
            Ok(out.reshape(&[out.len()])?)
        } else {
            Ok(out)
        }
    }

    /// Encodes `[d_l]` or `[n × d_l]`.
    pub fn encode_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, self.d_layer, "encode", true)
    }

    /// Decodes `[d_embed]` or `[n × d_embed]`; the output is not renormalised.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(z, self.d_embed, "decode", false)
    }
}

impl LayerAutoencoder<f32> {
    pub fn encode(&self, cav: &CavVector) -> Result<CavEmbedding> {
        if cav.layer != self.layer {
            return Err(GcavError::invalid(
                "encode",
                format!(
                    "CAV from layer `{}` given to the `{}` autoencoder",
                    cav.layer, self.layer
                ),
            ));
        }
        let z = self.encode_rows(&Tensor::vector(cav.vector.clone()))?;
        Ok(CavEmbedding {
            concept_id: cav.concept_id.clone(),
            layer: cav.layer.clone(),
            run_index: cav.run_index,
            z: z.into_data(),
        })
    }
}

/// `1 − cos(x̃, x)`, in `[0, 2]`.
pub fn reconstruction_loss(x: &[f32], x_rec: &[f32]) -> Result<f64> {
    if x.len() != x_rec.len() {
        return Err(GcavError::invalid(
            "reconstruction_loss",
            format!("lengths {} and {}", x.len(), x_rec.len()),
        ));
    }
    if norm(x) == 0.0 || norm(x_rec) == 0.0 {
        return Err(GcavError::invalid("reconstruction_loss", "zero-norm input"));
    }
    Ok(1.0 - cosine(x_rec, x) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    pub layer: String,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Mean round-trip cosine over the training CAVs after training.
    pub mean_cosine: f64,
}

/// Mean `1 − cos` of `decode(encode(x))` against `x` on the tape.
pub fn graph_reconstruction<T: Element>(
    ae: &LayerAutoencoder<T>,
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let z = ae.graph_encode(g, p, x)?;
    let xr = ae.graph_decode(g, p, z)?;
    let cos = g.cosine_rows(xr, x)?;
    let neg = g.scale(cos, -T::one())?;
    let loss = g.add_scalar(neg, T::one())?;
    Ok(g.mean(loss)?)
}

/// Full-batch Adam on the mean cosine reconstruction loss of `cavs` (`[n × d_l]`).
pub fn train_stage1(
    ae: &mut LayerAutoencoder,
    cavs: &Tensor,
    cfg: &AeConfig,
) -> Result<Stage1Report> {
    let (n, d) = cavs.dims2("train_stage1")?;
    if n < 2 || d != ae.d_layer {
        return Err(GcavError::invalid(
            "train_stage1",
            format!("need ≥ 2 CAVs of width {}, got [{n} × {d}]", ae.d_layer),
        ));
    }
    let mut adam = Adam::for_store(AdamConfig::with_lr(cfg.lr), &ae.store);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut g = Graph::training();
        let p = ae.store.bind(&mut g);
        let x = g.constant(cavs.clone());
        let loss = graph_reconstruction(ae, &mut g, &p, x)?;
        losses.push(g.scalar(loss)?.as_f64());
        let grads = p.grads(&g.backward(loss)?);
        adam.step_store(&mut ae.store, &grads)?;
    }
    let rec = ae.decode(&ae.encode_rows(cavs)?)?;
    let mean_cosine = (0..n)
        .map(|i| cosine(rec.row(i), cavs.row(i)) as f64)
        .sum::<f64>()
        / n as f64;
    let final_loss = 1.0 - mean_cosine;
    let report = Stage1Report {
        layer: ae.layer.clone(),
        losses,
        final_loss,
        mean_cosine,
    };
    if final_loss > cfg.threshold {
        return Err(GcavError::NonConvergence {
            layer: ae.layer.clone(),
            loss: final_loss,
            threshold: cfg.threshold,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn reconstruction_loss_extremes() {
        let x = [1.0f32, -2.0, 0.5];
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert!(reconstruction_loss(&x, &x).unwrap().abs() < 1e-6);
        assert!((reconstruction_loss(&x, &neg).unwrap() - 2.0).abs() < 1e-6);
        assert!((reconstruction_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(reconstruction_loss(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding_and_decode() {
        let cfg = AeConfig {
            d_embed: 8,
            hidden: 6,
            ..AeConfig::default()
        };
        let mut rng = SeedStreams::new(0).stream("ae");
        let ae = LayerAutoencoder::<f32>::with_init("L1", 5, &cfg, Init::Zeros, &mut rng);
        let z = ae
            .encode_rows(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]))
            .unwrap();
        assert_eq!(z.shape(), &[8]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let ae = LayerAutoencoder::<f32>::new("L1", 5, &cfg, &mut rng);
        assert!(ae
            .decode(&Tensor::zeros(&[8]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let mut rng = SeedStreams::new(0).stream("ae");
        let ae = LayerAutoencoder::<f32>::new("L1", 4, &AeConfig::default(), &mut rng);
        let cav = CavVector {
            concept_id: "c0".into(),
            kind: crate::cav::CavKind::Concept,
            layer: "L2".into(),
            run_index: 0,
            vector: vec![0.5; 4],
            train_accuracy: 1.0,
        };
        assert!(ae.encode(&cav).is_err());
    }
}
