//! Attention fusion of aligned per-layer embeddings into one global CAV.
//!
//! `fuse` adds a learned positional row per layer, runs one post-norm
//! transformer block (multi-head self-attention, then a GELU feed-forward
//! block, each with a residual connection and layer norm), mean-pools over
//! layers and applies an output linear map. Training scores the per-layer
//! decodes of the fused vector with a straight-through relaxed TCAV and
//! minimises the cross-layer variance of those scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::EmbeddingGrid;
use crate::autodiff::{Adam, AdamConfig, Bound, Graph, ParamStore, Var};
use crate::autoencoder::LayerAutoencoder;
use crate::cav::ClassGradients;
use crate::error::{GcavError, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::probe::TargetModel;
use crate::tensor::{cosine, dot, norm, normalized, Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub lambda_var: f64,
    pub lambda_cons: f64,
    /// Class examples sampled per class and step.
    pub batch_n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau0: f64,
    pub tau_max: f64,
    /// Feed unit-length logit gradients to the sigmoid surrogate.
    pub normalize_gradients: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dropout: 0.1,
            ffn_mult: 4,
            lambda_var: 3.0,
            lambda_cons: 1.0,
            batch_n: 32,
            epochs: 300,
            lr: 1e-3,
            tau0: 1.0,
            tau_max: 50.0,
            normalize_gradients: true,
        }
    }
}

/// Geometric temperature ramp `τ(t) = τ₀·(τ_max/τ₀)^{t/T}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationSchedule {
    pub tau0: f64,
    pub tau_max: f64,
    pub total_steps: usize,
}

impl RelaxationSchedule {
    pub fn new(tau0: f64, tau_max: f64, total_steps: usize) -> Result<Self> {
        if !(tau0 > 0.0 && tau_max >= tau0 && total_steps > 0) {
            return Err(GcavError::InvalidConfig(format!(
                "temperature schedule needs 0 < τ0 ≤ τmax and T > 0 (got {tau0}, {tau_max}, {total_steps})"
            )));
        }
        Ok(Self {
            tau0,
            tau_max,
            total_steps,
        })
    }

    pub fn tau(&self, step: usize) -> f64 {
        self.tau0 * (self.tau_max / self.tau0).powf(step as f64 / self.total_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModule<T: Element = f32> {
    pub store: ParamStore<T>,
    pub n_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pos: crate::autodiff::ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    out: Linear,
}

impl<T: Element> FusionModule<T> {
    pub fn new<R: Rng + ?Sized>(
        n_layers: usize,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) || n_layers == 0 {
            return Err(GcavError::InvalidConfig(format!(
                "fusion needs ≥ 1 layer and a head count dividing {dim} (got {heads})"
            )));
        }
        let mut store = ParamStore::new();
        let pos = store.add("pos", Tensor::randn(&[n_layers, dim], 0.02, rng));
        let q = Linear::new(&mut store, "attn/q", dim, dim, true, Init::Xavier, rng);
        let k = Linear::new(&mut store, "attn/k", dim, dim, true, Init::Xavier, rng);
        let v = Linear::new(&mut store, "attn/v", dim, dim, true, Init::Xavier, rng);
        let o = Linear::new(&mut store, "attn/o", dim, dim, true, Init::Uniform, rng);
        // attention output bias starts at zero
        if let Some(b) = o.b {
            *store.get_mut(b) = Tensor::zeros(&[dim]);
        }
        let ln1 = LayerNorm::new(&mut store, "ln1", dim);
        let ff1 = Linear::new(
            &mut store,
            "ffn/0",
            dim,
            ffn_mult * dim,
            true,
            Init::Uniform,
            rng,
        );
        let ff2 = Linear::new(
            &mut store,
            "ffn/1",
            ffn_mult * dim,
            dim,
            true,
            Init::Uniform,
            rng,
        );
        let ln2 = LayerNorm::new(&mut store, "ln2", dim);
        let out = Linear::new(&mut store, "out", dim, dim, true, Init::Uniform, rng);
        Ok(Self {
            store,
            n_layers,
            dim,
            heads,
            pos,
            q,
            k,
            v,
            o,
            ln1,
            ff1,
            ff2,
            ln2,
            out,
        })
    }

    pub fn cast<U: Element>(&self) -> FusionModule<U> {
        FusionModule {
            store: self.store.cast(),
            n_layers: self.n_layers,
            dim: self.dim,
            heads: self.heads,
            pos: self.pos,
            q: self.q,
            k: self.k,
            v: self.v,
            o: self.o,
            ln1: self.ln1,
            ff1: self.ff1,
            ff2: self.ff2,
            ln2: self.ln2,
            out: self.out,
        }
    }

    /// `[B × L × d] → [B × d]` on the tape; dropout follows the graph mode.
    pub fn graph_fuse<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, l, d) = match shape.as_slice() {
            &[b, l, d] if l == self.n_layers && d == self.dim => (b, l, d),
            s => {
                return Err(GcavError::invalid(
                    "fuse",
                    format!(
                        "input {s:?}, expected [batch × {} × {}]",
                        self.n_layers, self.dim
                    ),
                ))
            }
        };
        let (h, dh) = (self.heads, d / self.heads);
        let x = g.add_trailing(x, p[self.pos])?;
        let flat = g.reshape(x, &[b * l, d])?;

        let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, l, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            Ok(g.reshape(t, &[b * h, l, dh])?)
        };
        let q = self.q.apply(g, p, flat)?;
        let q = split(g, q)?;
        let k = self.k.apply(g, p, flat)?;
        let k = split(g, k)?;
        let v = self.v.apply(g, p, flat)?;
        let v = split(g, v)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.reshape(ctx, &[b, h, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * l, d])?;
        let attn_out = self.o.apply(g, p, ctx)?;
        let x1 = g.add(flat, attn_out)?;
        let x1 = self.ln1.apply(g, p, x1)?;

        let f = self.ff1.apply(g, p, x1)?;
        let f = g.gelu(f)?;
        let f = g.dropout(f, dropout, rng)?;
        let f = self.ff2.apply(g, p, f)?;
        let x2 = g.add(x1, f)?;
        let x2 = self.ln2.apply(g, p, x2)?;

        let x2 = g.reshape(x2, &[b, l, d])?;
        let pooled = g.mean_axis(x2, 1)?;
        Ok(self.out.apply(g, p, pooled)?)
    }

    /// Eval-mode fusion of `[B × L × d]`.
    pub fn fuse(&self, stack: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(stack.clone());
        // never drawn from outside training mode
        let mut idle = <crate::rng::StreamRng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.graph_fuse(&mut g, &p, x, 0.0, &mut idle)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCav {
    pub concept_id: String,
    pub run_index: usize,
    pub z: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedCav {
    pub concept_id: String,
    pub layer: String,
    pub v: Vec<f32>,
    pub v_unit: Vec<f32>,
}

/// Decodes a global CAV at every layer, in decoder order.
pub fn decode_gcav(
    gcav: &GlobalCav,
    decoders: &[LayerAutoencoder],
) -> Result<Vec<ReconstructedCav>> {
    if decoders.is_empty() {
        return Err(GcavError::MissingArtifact("layer decoders".into()));
    }
    decoders
        .iter()
        .map(|ae| {
            let v = ae.decode(&Tensor::vector(gcav.z.clone()))?.into_data();
            Ok(ReconstructedCav {
                concept_id: gcav.concept_id.clone(),
                layer: ae.layer.clone(),
                v_unit: normalized(&v),
                v,
            })
        })
        .collect()
}

/// Hard and relaxed TCAV of one batch along `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedScore {
    /// Forward value: fraction of strictly positive directional derivatives.
    pub score: f64,
    /// Mean of `σ(τ·∇h·v)`.
    pub soft: f64,
    /// Gradient of `score` with respect to `v` (sigmoid surrogate).
    pub grad_v: Vec<f32>,
}

/// Straight-through scores `[N × B]` for gradient rows `[N × d]` against unit
/// columns `vt: [d × B]`.
///
/// The hard forward reads the sign of the raw dot product. With
/// `normalize_gradients` each row's dot is divided by that row's gradient
/// norm before the sigmoid; the sign, and so the forward value, is unchanged.
pub fn graph_relaxed_scores(
    g: &mut Graph,
    grads: &Tensor,
    vt: Var,
    tau: f64,
    normalize_gradients: bool,
) -> Result<Var> {
    let gv = g.constant(grads.clone());
    let dots = g.matmul(gv, vt)?;
    let dots = if normalize_gradients {
        let cols = g.shape(dots)[1];
        let mut scale = Tensor::zeros(g.shape(dots));
        for i in 0..grads.rows() {
            let n = norm(grads.row(i));
            let s = if n > 0.0 { 1.0 / n } else { 1.0 };
            scale.row_mut(i).iter_mut().for_each(|x| *x = s);
        }
        debug_assert_eq!(scale.cols(), cols);
        g.mask(dots, &scale)?
    } else {
        dots
    };
    Ok(g.straight_through(dots, tau as f32)?)
}

/// Relaxed TCAV of class `k` at `layer` on a batch of inputs.
pub fn relaxed_tcav(
    model: &TargetModel,
    layer: &str,
    k: usize,
    x_batch: &Tensor,
    v: &[f32],
    tau: f64,
) -> Result<RelaxedScore> {
    if x_batch.rows() < 2 {
        return Err(GcavError::invalid(
            "relaxed_tcav",
            "batch needs at least 2 examples",
        ));
    }
    if tau <= 0.0 {
        return Err(GcavError::invalid(
            "relaxed_tcav",
            "temperature must be positive",
        ));
    }
    let vn = norm(v);
    if (vn - 1.0).abs() > 1e-4 {
        return Err(GcavError::invalid(
            "relaxed_tcav",
            format!("direction norm {vn} is not 1"),
        ));
    }
    let acts = model.activations(layer, x_batch)?;
    let grads = model.logit_gradient(layer, k, &acts)?;
    relaxed_from_gradients(&grads, v, tau)
}

/// [`relaxed_tcav`] on precomputed logit gradients.
pub fn relaxed_from_gradients(grads: &Tensor, v: &[f32], tau: f64) -> Result<RelaxedScore> {
    let mut g = Graph::new();
    let vt = g.param(Tensor::new(&[v.len(), 1], v.to_vec())?);
    let s = graph_relaxed_scores(&mut g, grads, vt, tau, false)?;
    // The forward indicators are 0/1, so their f64 count is exact.
    let positive: f64 = g.value(s).data().iter().map(|&b| b as f64).sum();
    let score = g.mean(s)?;
    let grad_v = g.backward(score)?.get(vt).into_data();
    let soft = (0..grads.rows())
        .map(|i| sigmoid(tau * dot(grads.row(i), v) as f64))
        .sum::<f64>()
        / grads.rows() as f64;
    Ok(RelaxedScore {
        score: positive / grads.rows() as f64,
        soft,
        grad_v,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(1/N) Σ_i Var_pop(s_1^{(i)}, …, s_L^{(i)})` for rows of per-layer scores.
pub fn variance_loss(rows: &[Vec<f64>]) -> Result<f64> {
    let first = rows
        .first()
        .ok_or_else(|| GcavError::invalid("variance_loss", "empty batch"))?;
    let l = first.len();
    if l < 2 || rows.iter().any(|r| r.len() != l) {
        return Err(GcavError::invalid(
            "variance_loss",
            "need ≥ 2 layers per row",
        ));
    }
    let per_row = rows.iter().map(|r| {
        let m = r.iter().sum::<f64>() / l as f64;
        r.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / l as f64
    });
    Ok(per_row.sum::<f64>() / rows.len() as f64)
}

/// `1 − cos(v_l, decoder_l(z̃_l))`.
pub fn fusion_consistency_loss(
    v: &ReconstructedCav,
    aligned: &[f32],
    decoder: &LayerAutoencoder,
) -> Result<f64> {
    if v.layer != decoder.layer {
        return Err(GcavError::invalid(
            "fusion_consistency_loss",
            format!(
                "reconstruction at `{}` vs decoder for `{}`",
                v.layer, decoder.layer
            ),
        ));
    }
    let target = decoder.decode(&Tensor::vector(aligned.to_vec()))?;
    Ok(1.0 - cosine(&v.v, target.data()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub tau: f64,
    pub variance: f64,
    pub consistency: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Output {
    pub gcavs: Vec<GlobalCav>,
    pub losses: Vec<StepLoss>,
}

/// Fused vectors `[C·R × d]` for the aligned grid, in (concept, run) order.
pub fn fuse_grid(fm: &FusionModule, aligned: &EmbeddingGrid) -> Result<Vec<GlobalCav>> {
    let z = fm.fuse(&aligned.stacked()?)?;
    let mut out = Vec::with_capacity(z.rows());
    for (c, concept) in aligned.concepts.iter().enumerate() {
        for r in 0..aligned.runs {
            out.push(GlobalCav {
                concept_id: concept.clone(),
                run_index: r,
                z: z.row(c * aligned.runs + r).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Trains the fusion module with stages 1–2 frozen.
///
/// Each step fuses every (concept, run), decodes per layer, and for every
/// class scores a fresh batch of `batch_n` class examples with the relaxed
/// TCAV. The loss is `λ_var·L_var + λ_cons·L_cons`, where `L_var` averages the
/// per-example cross-layer variance over classes and `L_cons` averages
/// `1 − cos(decode_l(z_GCAV), decode_l(z̃_l))` over layers.
pub fn train_stage3<R: Rng + ?Sized, D: Rng + ?Sized>(
    fm: &mut FusionModule,
    aligned: &EmbeddingGrid,
    decoders: &[LayerAutoencoder],
    grads: &ClassGradients,
    cfg: &FusionConfig,
    batch_rng: &mut R,
    dropout_rng: &mut D,
) -> Result<Stage3Output> {
    let n_layers = aligned.layers.len();
    if decoders.len() != n_layers
        || decoders
            .iter()
            .zip(&aligned.layers)
            .any(|(d, l)| &d.layer != l)
    {
        return Err(GcavError::invalid(
            "train_stage3",
            "decoders do not match the aligned layers",
        ));
    }
    if grads.layers != aligned.layers {
        return Err(GcavError::invalid(
            "train_stage3",
            "gradient layers do not match the aligned layers",
        ));
    }
    if cfg.batch_n < 2 || cfg.lambda_var < 0.0 || cfg.lambda_cons < 0.0 {
        return Err(GcavError::InvalidConfig(
            "fusion needs N ≥ 2 and λ ≥ 0".into(),
        ));
    }
    let schedule = RelaxationSchedule::new(cfg.tau0, cfg.tau_max, cfg.epochs.max(1))?;
    let stack = aligned.stacked()?;
    let targets: Vec<Tensor> = decoders
        .iter()
        .enumerate()
        .map(|(l, d)| d.decode(&aligned.layer_rows(l)?))
        .collect::<Result<_>>()?;
    let n_items = aligned.concepts.len() * aligned.runs;

    let mut adam = Adam::for_store(AdamConfig::with_lr(cfg.lr), &fm.store);
    let mut losses: Vec<StepLoss> = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        let tau = schedule.tau(step);
        let batches: Vec<Vec<usize>> = (0..grads.n_classes)
            .map(|k| {
                let n_k = grads.get(0, k).rows();
                (0..cfg.batch_n)
                    .map(|_| batch_rng.random_range(0..n_k))
                    .collect()
            })
            .collect();
        let mut g = Graph::training();
        let p = fm.store.bind(&mut g);
        let result = (|| -> Result<(Var, Var, Var)> {
            let x = g.constant(stack.clone());
            let zg = fm.graph_fuse(&mut g, &p, x, cfg.dropout, dropout_rng)?;
            let mut unit_t = Vec::with_capacity(n_layers);
            let mut cons = Vec::with_capacity(n_layers);
            for (l, dec) in decoders.iter().enumerate() {
                let dp = dec.store.bind_frozen(&mut g);
                let v = dec.graph_decode(&mut g, &dp, zg)?;
                let vu = g.normalize(v)?;
                unit_t.push(g.transpose(vu)?);
                let t = g.constant(targets[l].clone());
                let c = g.cosine_rows(v, t)?;
                let c = g.mean(c)?;
                cons.push(c);
            }
            let mut var_terms = Vec::with_capacity(grads.n_classes);
            for (k, idx) in batches.iter().enumerate() {
                let mut per_layer = Vec::with_capacity(n_layers);
                for (l, &vt) in unit_t.iter().enumerate() {
                    let gk = grads.get(l, k).select_rows(idx)?;
                    let s = graph_relaxed_scores(&mut g, &gk, vt, tau, cfg.normalize_gradients)?;
                    per_layer.push(g.reshape(s, &[cfg.batch_n, n_items, 1])?);
                }
                let s = g.concat(&per_layer, 2)?;
                let var = g.variance(s, 2)?;
                var_terms.push(g.mean(var)?);
            }
            let var_terms = reshape_scalars(&mut g, &var_terms)?;
            let lv = g.concat(&var_terms, 0)?;
            let lv = g.mean(lv)?;
            let cons = reshape_scalars(&mut g, &cons)?;
            let lc = g.concat(&cons, 0)?;
            let lc = g.mean(lc)?;
            let lc = g.scale(lc, -1.0)?;
            let lc = g.add_scalar(lc, 1.0)?;
            let a = g.scale(lv, cfg.lambda_var as f32)?;
            let b = g.scale(lc, cfg.lambda_cons as f32)?;
            Ok((g.add(a, b)?, lv, lc))
        })();
        let (loss, lv, lc) = match result {
            Err(GcavError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(GcavError::NonFiniteLoss {
                    stage: "fuse",
                    step,
                    tau: Some(tau),
                    last: losses.last().map(|l| l.total),
                })
            }
            other => other?,
        };
        losses.push(StepLoss {
            tau,
            variance: g.scalar(lv)?.as_f64(),
            consistency: g.scalar(lc)?.as_f64(),
            total: g.scalar(loss)?.as_f64(),
        });
        let grads = p.grads(&g.backward(loss)?);
        adam.step_store(&mut fm.store, &grads)?;
    }
    Ok(Stage3Output {
        gcavs: fuse_grid(fm, aligned)?,
        losses,
    })
}

fn reshape_scalars(g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
    xs.iter().map(|&x| Ok(g.reshape(x, &[1])?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn variance_loss_hand_values() {
        assert_eq!(variance_loss(&[vec![0.3, 0.3, 0.3]]).unwrap(), 0.0);
        assert_eq!(variance_loss(&[vec![0.0, 1.0]]).unwrap(), 0.25);
        assert_eq!(
            variance_loss(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            0.125
        );
        assert!(variance_loss(&[vec![1.0]]).is_err());
    }

    #[test]
    fn schedule_is_geometric_and_increasing() {
        let s = RelaxationSchedule::new(1.0, 50.0, 100).unwrap();
        assert_eq!(s.tau(0), 1.0);
        assert!((s.tau(100) - 50.0).abs() < 1e-9);
        assert!((s.tau(50) - 50f64.sqrt()).abs() < 1e-9);
        assert!((1..100).all(|t| s.tau(t) > s.tau(t - 1)));
        assert!(RelaxationSchedule::new(2.0, 1.0, 10).is_err());
    }

    #[test]
    fn fuse_shapes() {
        let mut rng = SeedStreams::new(0).stream("fuse");
        let fm = FusionModule::<f32>::new(3, 64, 4, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 64], 1.0, &mut rng);
        assert_eq!(fm.fuse(&x).unwrap().shape(), &[2, 64]);
        assert!(fm.fuse(&Tensor::zeros(&[2, 4, 64])).is_err());
        assert!(FusionModule::<f32>::new(3, 64, 5, 4, &mut rng).is_err());
    }

    #[test]
    fn soft_value_at_zero_dot_is_half() {
        let grads = Tensor::from_rows(&[vec![0.0f32, 1.0], vec![0.0, -1.0]]).unwrap();
        let r = relaxed_from_gradients(&grads, &[1.0, 0.0], 3.0).unwrap();
        assert_eq!(r.soft, 0.5);
        assert_eq!(r.score, 0.0);
    }
}
