//! Straight-through contract measured on random target models.

use gcav::cav::{tcav_from_gradients, tcav_score};
use gcav::fusion::{relaxed_tcav, FusionConfig};
use gcav::probe::{TargetConfig, TargetModel};
use gcav::rng::SeedStreams;
use gcav::tensor::{dot, normalized};
use gcav::Tensor;
use rand::Rng;

const MODELS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SteReport {
    pub instances: usize,
    /// Instances whose relaxed forward differs from the hard score.
    pub forward_mismatches: usize,
    /// Mean `|σ(τ·dot) − [dot > 0]|` over examples with `|dot| ≥ 0.1`.
    pub soft_error: f64,
    pub soft_examples: usize,
    pub tau: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn small_target() -> TargetConfig {
    TargetConfig {
        d_in: 12,
        width: 16,
        depth: 3,
        n_classes: 3,
        instrumented: vec!["L1".into(), "L2".into(), "L3".into()],
        init_gain: 1.5,
    }
}

/// Random batches, classes, layers and unit directions on ten random models,
/// scored at the final relaxation temperature.
pub fn ste_contract(instances: usize) -> SteReport {
    let cfg = small_target();
    let tau = FusionConfig::default().tau_max;
    let streams = SeedStreams::new(7);
    let mut rng = streams.stream("ste/instances");
    let models: Vec<TargetModel> = (0..MODELS)
        .map(|m| TargetModel::new(&cfg, &mut streams.indexed("ste/model", m)).unwrap())
        .collect();
    let mut report = SteReport {
        instances,
        forward_mismatches: 0,
        soft_error: 0.0,
        soft_examples: 0,
        tau,
    };
    for i in 0..instances {
        let model = &models[i % MODELS];
        let n = rng.random_range(2..=24);
        let x = Tensor::randn(&[n, cfg.d_in], 1.0, &mut rng);
        let layer = &cfg.instrumented[rng.random_range(0..cfg.instrumented.len())];
        let k = rng.random_range(0..cfg.n_classes);
        let v = normalized(Tensor::<f32>::randn(&[cfg.width], 1.0, &mut rng).data());

        let hard = tcav_score(model, layer, k, &x, &v).unwrap();
        let relaxed = relaxed_tcav(model, layer, k, &x, &v, tau).unwrap();
        let grads = model
            .logit_gradient(layer, k, &model.activations(layer, &x).unwrap())
            .unwrap();
        if relaxed.score != hard || tcav_from_gradients(&grads, &v).unwrap() != hard {
            report.forward_mismatches += 1;
        }
        for r in 0..grads.rows() {
            let d = dot(grads.row(r), &v) as f64;
            if d.abs() >= 0.1 {
                let step = if d > 0.0 { 1.0 } else { 0.0 };
                report.soft_error += (sigmoid(tau * d) - step).abs();
                report.soft_examples += 1;
            }
        }
    }
    report.soft_error /= report.soft_examples.max(1) as f64;
    report
}
