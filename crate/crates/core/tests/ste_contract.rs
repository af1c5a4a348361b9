//! The relaxed score's forward value is the hard TCAV score; its sigmoid
//! surrogate at the final temperature tracks the step away from the boundary.

#[allow(dead_code)]
mod support;

use gcav::cav::tcav_from_gradients;
use gcav::fusion::{graph_relaxed_scores, relaxed_from_gradients};
use gcav::rng::SeedStreams;
use gcav::tensor::normalized;
use gcav::{Graph, Tensor};
use rand::Rng;
use support::ste::ste_contract;

#[test]
fn forward_equals_hard_score_and_soft_tracks_it_at_final_tau() {
    let r = ste_contract(1000);
    assert_eq!(r.forward_mismatches, 0, "{r:?}");
    assert!(r.soft_examples > 0);
    assert!(r.soft_error <= 0.05, "{r:?}");
}

#[test]
fn normalised_gradients_keep_the_forward_value() {
    let mut rng = SeedStreams::new(3).stream("ste/normalised");
    for _ in 0..100 {
        let n = rng.random_range(2..=20);
        let grads = Tensor::randn(&[n, 8], 2.0, &mut rng);
        let v = normalized(Tensor::<f32>::randn(&[8], 1.0, &mut rng).data());
        let hard = tcav_from_gradients(&grads, &v).unwrap();
        for tau in [1.0, 7.0, 50.0] {
            for norm in [false, true] {
                let mut g = Graph::new();
                let vt = g.param(Tensor::new(&[8, 1], v.clone()).unwrap());
                let s = graph_relaxed_scores(&mut g, &grads, vt, tau, norm).unwrap();
                let count: f64 = g.value(s).data().iter().map(|&b| b as f64).sum();
                assert_eq!(count / n as f64, hard);
            }
            assert_eq!(relaxed_from_gradients(&grads, &v, tau).unwrap().score, hard);
        }
    }
}
