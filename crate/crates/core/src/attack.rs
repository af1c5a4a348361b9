//! Targeted activation-shift attack on the concept probe inputs and the
//! before/after comparison of TCAV and TGCAV at the attacked layer.

use serde::{Deserialize, Serialize};

use crate::align::ProjectionHead;
use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::autoencoder::LayerAutoencoder;
use crate::cav::{run_baseline, ClassGradients, Method, ProbeBank, ScoreTable};
use crate::error::{GcavError, Result};
use crate::eval::{percent_change, tgcav_table, AttackRow};
use crate::fusion::FusionModule;
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::stages::{frozen_gcavs, gcav_stages};
use crate::probe::{ProbeSet, TargetModel, World};
use crate::tensor::{cosine, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub source: String,
    pub target: String,
    pub layer: String,
    /// Class whose scores are compared; defaults to the first class the
    /// target concept is relevant to.
    pub class: Option<usize>,
    pub epsilon: f64,
    pub gamma: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            source: "c4".into(),
            target: "c0".into(),
            layer: "L2".into(),
            class: None,
            epsilon: 0.2,
            gamma: 0.01,
            steps: 200,
            lr: 0.01,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, cfg: &PipelineConfig) -> Result<()> {
        let bad = |m: String| Err(GcavError::InvalidConfig(format!("attack: {m}")));
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad(format!("ε = {} must be ≥ 0", self.epsilon));
        }
        if self.source == self.target {
            return bad(format!("source and target are both `{}`", self.source));
        }
        let n = cfg.world.n_concepts;
        for id in [&self.source, &self.target] {
            if !(0..n).any(|i| crate::probe::concept_id(i) == *id) {
                return bad(format!("unknown concept `{id}`"));
            }
        }
        if !cfg.target.instrumented.contains(&self.layer) {
            return bad(format!("layer `{}` is not instrumented", self.layer));
        }
        if matches!(self.class, Some(k) if k >= cfg.world.n_classes) {
            return bad(format!("class {:?} out of range", self.class));
        }
        if self.gamma < 0.0 || self.lr <= 0.0 {
            return bad("need γ ≥ 0 and lr > 0".into());
        }
        Ok(())
    }

    /// The explicit class, or the first class the target concept is relevant to.
    pub fn resolve_class(&self, world: &World) -> Result<usize> {
        if let Some(k) = self.class {
            return Ok(k);
        }
        world
            .concept(&self.target)?
            .relevance
            .iter()
            .position(|&r| r)
            .ok_or_else(|| {
                GcavError::InvalidConfig(format!(
                    "concept `{}` is relevant to no class",
                    self.target
                ))
            })
    }
}

/// Mean layer activation of a probe set.
pub fn mean_activation(model: &TargetModel, layer: &str, x: &Tensor) -> Result<Vec<f32>> {
    let a = model.activations(layer, x)?;
    let n = a.rows() as f32;
    let mut mu = vec![0.0f32; a.cols()];
    for i in 0..a.rows() {
        for (m, v) in mu.iter_mut().zip(a.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(mu)
}

/// Per example, Adam on `‖f_l(x+δ) − μ‖² + γ‖δ‖²` with `δ` clamped to
/// `[−ε, ε]` after every step. Examples are independent, so optimising
/// the summed loss over the batch is the same as one run per example.
pub fn run_attack(
    model: &TargetModel,
    x: &Tensor,
    mu_target: &[f32],
    spec: &AttackConfig,
) -> Result<Tensor> {
    let (n, d) = x.dims2("run_attack")?;
    let width = model.layer_width(&spec.layer)?;
    if mu_target.len() != width {
        return Err(GcavError::invalid(
            "run_attack",
            format!(
                "target mean has {} entries, layer width is {width}",
                mu_target.len()
            ),
        ));
    }
    let eps = spec.epsilon as f32;
    let mut delta = Tensor::zeros(&[n, d]);
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let l = model.instrumented_layer(&spec.layer)?;
    let mu = Tensor::vector(mu_target.to_vec());
    let mut adam = Adam::new(AdamConfig::with_lr(spec.lr), [&[n, d][..]]);
    for step in 0..spec.steps {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let dv = g.param(delta.clone());
        let xv = g.constant(x.clone());
        let result = (|| -> Result<_> {
            let xin = g.add(xv, dv)?;
            let a = model.graph_prefix(&mut g, &p, l, xin)?;
            let m = g.constant(mu.clone());
            let neg = g.scale(m, -1.0)?;
            let diff = g.add_trailing(a, neg)?;
            let sq = g.square(diff)?;
            let fit = g.sum(sq)?;
            let dsq = g.square(dv)?;
            let reg = g.sum(dsq)?;
            let reg = g.scale(reg, spec.gamma as f32)?;
            Ok(g.add(fit, reg)?)
        })();
        let loss = match result {
            Err(GcavError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(GcavError::NonFiniteLoss {
                    stage: "attack",
                    step,
                    tau: None,
                    last: None,
                })
            }
            other => other?,
        };
        let grad = g.backward(loss)?.get(dv);
        adam.step(std::slice::from_mut(&mut delta), &[grad])?;
        for v in delta.data_mut() {
            *v = v.clamp(-eps, eps);
        }
    }
    if !delta.is_finite() {
        return Err(GcavError::NonFiniteLoss {
            stage: "attack",
            step: spec.steps,
            tau: None,
            last: None,
        });
    }
    let budget = spec.epsilon;
    Ok(x.zip_map(&delta, "run_attack", |a, b| within_budget(a, a + b, budget))?)
}

/// Steps `adv` toward `x` one ulp at a time until `|adv − x| ≤ ε` holds
/// exactly; rounding of `x + δ` can otherwise overshoot by an ulp.
fn within_budget(x: f32, mut adv: f32, eps: f64) -> f32 {
    while (adv as f64 - x as f64).abs() > eps {
        adv = if adv > x {
            adv.next_down()
        } else {
            adv.next_up()
        };
    }
    adv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    /// Mean `cos(f_l(x), μ_target)` over the source probe set.
    pub cosine_before: f64,
    pub cosine_after: f64,
    /// Fraction of examples whose cosine to `μ_target` increased.
    pub improved: f64,
    pub max_abs_delta: f64,
}

pub fn shift_stats(
    model: &TargetModel,
    layer: &str,
    x: &Tensor,
    x_adv: &Tensor,
    mu: &[f32],
) -> Result<ShiftStats> {
    let a0 = model.activations(layer, x)?;
    let a1 = model.activations(layer, x_adv)?;
    let n = a0.rows();
    let (mut before, mut after, mut up) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let c0 = cosine(a0.row(i), mu) as f64;
        let c1 = cosine(a1.row(i), mu) as f64;
        before += c0;
        after += c1;
        up += usize::from(c1 > c0);
    }
    let max_abs_delta = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    Ok(ShiftStats {
        cosine_before: before / n as f64,
        cosine_after: after / n as f64,
        improved: up as f64 / n as f64,
        max_abs_delta,
    })
}

/// Per-layer run-mean scores of one (concept, class) cell.
pub fn cell_series(table: &ScoreTable, concept: &str, class: usize) -> Result<Vec<f64>> {
    let c = table.concept_index(concept)?;
    Ok(table.layer_series(c, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub spec: AttackConfig,
    pub class: usize,
    pub layer_index: usize,
    pub shift: ShiftStats,
    pub tcav_before: Vec<f64>,
    pub tcav_after: Vec<f64>,
    pub tgcav_before: Vec<f64>,
    /// Stages 1–3 retrained on the attacked CAV corpus.
    pub tgcav_after: Vec<f64>,
    /// Stages 1–3 frozen at their pre-attack weights.
    pub tgcav_frozen_after: Vec<f64>,
    pub rows: Vec<AttackRow>,
    #[serde(skip)]
    pub perturbed: Option<ProbeSet>,
}

impl AttackOutcome {
    pub fn tcav_rise(&self) -> f64 {
        self.tcav_after[self.layer_index] - self.tcav_before[self.layer_index]
    }

    pub fn tgcav_rise(&self) -> f64 {
        self.tgcav_after[self.layer_index] - self.tgcav_before[self.layer_index]
    }

    pub fn tgcav_frozen_rise(&self) -> f64 {
        self.tgcav_frozen_after[self.layer_index] - self.tgcav_before[self.layer_index]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn attack_rows(method: &str, l: usize, before: &[f64], after: &[f64]) -> [AttackRow; 2] {
    let row = |scope: &str, b: f64, a: f64| AttackRow {
        method: method.to_string(),
        scope: scope.to_string(),
        before: b,
        after: a,
        pct_change: percent_change(b, a),
    };
    [
        row("attacked_layer", before[l], after[l]),
        row("mean", mean(before), mean(after)),
    ]
}

/// Pre-attack state the evaluation compares against.
pub struct PreAttack<'a> {
    pub world: &'a World,
    pub bank: &'a ProbeBank,
    pub grads: &'a ClassGradients,
    pub tcav: &'a ScoreTable,
    pub autoencoders: &'a [LayerAutoencoder],
    pub head: &'a ProjectionHead,
    pub fusion: &'a FusionModule,
    pub tgcav: &'a ScoreTable,
}

/// Attacks the source probe set, retrains its CAVs and rescores with TCAV,
/// with TGCAV after retraining stages 1–3, and with TGCAV through the frozen
/// pre-attack stages.
pub fn evaluate_attack(
    cfg: &PipelineConfig,
    model: &TargetModel,
    pre: &PreAttack,
    spec: &AttackConfig,
) -> Result<AttackOutcome> {
    spec.validate(cfg)?;
    let class = spec.resolve_class(pre.world)?;
    let layer_index = pre
        .grads
        .layers
        .iter()
        .position(|l| *l == spec.layer)
        .ok_or_else(|| GcavError::UnknownLayer(spec.layer.clone()))?;
    let find = |id: &str| {
        pre.bank
            .concepts
            .iter()
            .position(|s| s.concept_id.as_deref() == Some(id))
            .ok_or_else(|| GcavError::UnknownConcept(id.to_string()))
    };
    let (src, tgt) = (find(&spec.source)?, find(&spec.target)?);

    let mu = mean_activation(model, &spec.layer, &pre.bank.concepts[tgt].examples)?;
    let x = &pre.bank.concepts[src].examples;
    let x_adv = run_attack(model, x, &mu, spec)?;
    let shift = shift_stats(model, &spec.layer, x, &x_adv, &mu)?;

    let mut bank = pre.bank.clone();
    bank.concepts[src].examples = x_adv;
    let attacked = run_baseline(model, &bank, pre.grads, cfg.runs, &cfg.cav, cfg.threads())?;
    let retrained = gcav_stages(cfg, &attacked.cavs, pre.grads)?;
    let (aligned, gcavs) = frozen_gcavs(&attacked.cavs, pre.autoencoders, pre.head, pre.fusion)?;
    let frozen = tgcav_table(
        &gcavs,
        &aligned.concepts,
        aligned.runs,
        pre.autoencoders,
        pre.grads,
    )?;

    let series = |t: &ScoreTable| cell_series(t, &spec.source, class);
    let tcav_before = series(pre.tcav)?;
    let tcav_after = series(&attacked.table)?;
    let tgcav_before = series(pre.tgcav)?;
    let tgcav_after = series(&retrained.table)?;
    let tgcav_frozen_after = series(&frozen)?;

    let mut rows = Vec::with_capacity(6);
    rows.extend(attack_rows(
        &Method::Tcav.to_string(),
        layer_index,
        &tcav_before,
        &tcav_after,
    ));
    rows.extend(attack_rows(
        &Method::Tgcav.to_string(),
        layer_index,
        &tgcav_before,
        &tgcav_after,
    ));
    rows.extend(attack_rows(
        "TGCAV_frozen",
        layer_index,
        &tgcav_before,
        &tgcav_frozen_after,
    ));
    Ok(AttackOutcome {
        spec: spec.clone(),
        class,
        layer_index,
        shift,
        tcav_before,
        tcav_after,
        tgcav_before,
        tgcav_after,
        tgcav_frozen_after,
        rows,
        perturbed: Some(bank.concepts[src].clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::TargetConfig;
    use crate::rng::SeedStreams;

    fn small_model() -> TargetModel {
        let cfg = TargetConfig {
            d_in: 6,
            width: 8,
            depth: 3,
            n_classes: 2,
            instrumented: vec!["L1".into(), "L2".into()],
            init_gain: 1.0,
        };
        TargetModel::new(&cfg, &mut SeedStreams::new(3).stream("t")).unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let model = small_model();
        let x = Tensor::randn(&[5, 6], 1.0, &mut SeedStreams::new(1).stream("x"));
        let spec = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let mu = vec![1.0; 8];
        assert_eq!(run_attack(&model, &x, &mu, &spec).unwrap(), x);
    }

    #[test]
    fn budget_is_respected_and_shift_improves() {
        let model = small_model();
        let streams = SeedStreams::new(2);
        let x = Tensor::randn(&[20, 6], 1.0, &mut streams.stream("x"));
        let other = Tensor::randn(&[20, 6], 1.0, &mut streams.stream("y")).map(|v| v + 1.0);
        let mu = mean_activation(&model, "L2", &other).unwrap();
        let spec = AttackConfig {
            epsilon: 0.25,
            ..AttackConfig::default()
        };
        let adv = run_attack(&model, &x, &mu, &spec).unwrap();
        let s = shift_stats(&model, "L2", &x, &adv, &mu).unwrap();
        assert!(s.max_abs_delta <= 0.25, "{}", s.max_abs_delta);
        assert!(s.cosine_after > s.cosine_before);
    }
}
