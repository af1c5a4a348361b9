//! Properties of the trained target, the stage-1 to stage-3 maps and TGCAV.

use gcav::align::ProjectionHead;
use gcav::autoencoder::LayerAutoencoder;
use gcav::cav::tcav_score;
use gcav::eval::{decoded_direction, tgcav_score};
use gcav::fusion::{
    fusion_consistency_loss, train_stage3, FusionConfig, GlobalCav, ReconstructedCav,
};
use gcav::pipeline::{stages, PipelineConfig};
use gcav::probe::{cross_entropy, TargetModel, World};
use gcav::rng::SeedStreams;
use gcav::tensor::{dot, normalized};
use gcav::{Graph, Tensor};

fn trained() -> (PipelineConfig, World, TargetModel) {
    let cfg = PipelineConfig::default();
    let (world, _) = stages::gen(&cfg).unwrap();
    let (model, _) = stages::target(&cfg, &world).unwrap();
    (cfg, world, model)
}

fn ablate(x: &Tensor, d: &[f32]) -> Tensor {
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .map(|i| {
            let p = dot(x.row(i), d);
            x.row(i).iter().zip(d).map(|(a, b)| a - p * b).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn mean_logit(model: &TargetModel, x: &Tensor, k: usize) -> f64 {
    let logits = model.forward(x).unwrap();
    (0..logits.rows())
        .map(|i| logits.row(i)[k] as f64)
        .sum::<f64>()
        / logits.rows() as f64
}

#[test]
fn slicing_at_any_layer_reproduces_the_forward_pass_bitwise() {
    let (_, world, model) = trained();
    let x = &world.dataset.inputs;
    let full = model.forward(x).unwrap();
    for l in model.instrumented() {
        let a = model.forward_to(l, x).unwrap();
        assert_eq!(model.head_from(l, &a).unwrap().data(), full.data(), "{l}");
    }
}

#[test]
fn ablating_the_planted_concept_costs_more_than_any_distractor() {
    let (_, world, model) = trained();
    for k in 0..world.dataset.n_classes {
        let x = world.dataset.class_inputs(k).unwrap();
        assert!(x.rows() >= 100);
        let base = mean_logit(&model, &x, k);
        let (mut relevant, mut others) = (Vec::new(), Vec::new());
        for c in &world.concepts {
            let delta = mean_logit(&model, &ablate(&x, &c.direction), k) - base;
            if c.relevance[k] {
                relevant.push(delta);
            } else {
                others.push(delta.abs());
            }
        }
        let worst_other = others.iter().cloned().fold(0.0, f64::max);
        for d in relevant {
            assert!(
                d < 0.0,
                "class {k}: relevant ablation moved the logit by {d}"
            );
            assert!(
                worst_other < d.abs(),
                "class {k}: distractor moved {worst_other}, planted {d}"
            );
        }
    }
}

#[test]
fn tcav_score_ignores_cav_rescaling() {
    let (_, world, model) = trained();
    let mut rng = SeedStreams::new(5).stream("test/rescale");
    for l in model.instrumented() {
        let d = model.layer_width(l).unwrap();
        for k in 0..world.dataset.n_classes {
            let x = world.dataset.class_inputs(k).unwrap();
            let raw = Tensor::<f32>::randn(&[d], 1.0, &mut rng).data().to_vec();
            let base = tcav_score(&model, l, k, &x, &normalized(&raw)).unwrap();
            for c in [1e-3f32, 0.5, 7.0, 1e3] {
                let w: Vec<f32> = raw.iter().map(|a| a * c).collect();
                assert_eq!(
                    tcav_score(&model, l, k, &x, &normalized(&w)).unwrap(),
                    base,
                    "{l} class {k} ×{c}"
                );
            }
        }
    }
}

fn random_decoders(cfg: &PipelineConfig, model: &TargetModel, seed: u64) -> Vec<LayerAutoencoder> {
    let streams = SeedStreams::new(seed);
    model
        .instrumented()
        .iter()
        .map(|l| {
            let d = model.layer_width(l).unwrap();
            LayerAutoencoder::new(
                l,
                d,
                &cfg.autoencoder,
                &mut streams.stream(&format!("test/ae/{l}")),
            )
        })
        .collect()
}

#[test]
fn tgcav_is_tcav_along_the_decoded_direction() {
    let (cfg, world, model) = trained();
    let decoders = random_decoders(&cfg, &model, 2);
    let mut rng = SeedStreams::new(2).stream("test/gcav");
    for run in 0..5 {
        let gcav = GlobalCav {
            concept_id: "c0".into(),
            run_index: run,
            z: Tensor::<f32>::randn(&[cfg.autoencoder.d_embed], 1.0, &mut rng)
                .data()
                .to_vec(),
        };
        for l in model.instrumented() {
            let v = decoded_direction(&gcav, &decoders, l).unwrap();
            for k in 0..world.dataset.n_classes {
                let x = world.dataset.class_inputs(k).unwrap();
                assert_eq!(
                    tgcav_score(&model, l, k, &x, &gcav, &decoders).unwrap(),
                    tcav_score(&model, l, k, &x, &v).unwrap()
                );
            }
        }
    }
}

#[test]
fn zero_mlp_branch_leaves_the_normalised_residual() {
    let dim = 8;
    let streams = SeedStreams::new(9);
    let mut head = ProjectionHead::<f32>::new(dim, &mut streams.stream("test/head"));
    for name in ["mlp/1/w", "mlp/1/b"] {
        let id = head.store.find(name).unwrap();
        let shape = head.store.get(id).shape().to_vec();
        *head.store.get_mut(id) = Tensor::zeros(&shape);
    }
    let w = Tensor::<f32>::randn(&[dim, dim], 0.5, &mut streams.stream("test/w"));
    let b = Tensor::<f32>::randn(&[dim], 0.5, &mut streams.stream("test/b"));
    *head.store.get_mut(head.store.find("residual/w").unwrap()) = w.clone();
    *head.store.get_mut(head.store.find("residual/b").unwrap()) = b.clone();

    let z = Tensor::<f32>::randn(&[6, dim], 1.0, &mut streams.stream("test/z"));
    let out = head.project(&z).unwrap();
    let lin = z.matmul(&w).unwrap();
    for i in 0..z.rows() {
        let r: Vec<f32> = lin
            .row(i)
            .iter()
            .zip(b.data())
            .map(|(a, c)| a + c)
            .collect();
        let expected = normalized(&r);
        for (a, e) in out.row(i).iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-5, "row {i}: {a} vs {e}");
        }
    }
}

#[test]
fn fusion_consistency_vanishes_at_the_decoded_alignment() {
    let (cfg, _, model) = trained();
    let decoders = random_decoders(&cfg, &model, 4);
    let mut rng = SeedStreams::new(4).stream("test/aligned");
    for dec in &decoders {
        let z = Tensor::<f32>::randn(&[cfg.autoencoder.d_embed], 1.0, &mut rng)
            .data()
            .to_vec();
        let v = dec
            .decode(&Tensor::vector(z.clone()))
            .unwrap()
            .data()
            .to_vec();
        let rec = ReconstructedCav {
            concept_id: "c0".into(),
            layer: dec.layer.clone(),
            v_unit: normalized(&v),
            v,
        };
        let loss = fusion_consistency_loss(&rec, &z, dec).unwrap();
        assert!(loss.abs() <= 1e-6, "{}: {loss}", dec.layer);
    }
}

/// With the consistency weight at zero, only the relaxed scores can move the
/// fusion parameters.
#[test]
fn variance_loss_gradient_reaches_the_fusion_module() {
    let mut cfg = PipelineConfig {
        runs: 3,
        ..PipelineConfig::default()
    };
    cfg.world.examples_per_class = 24;
    cfg.world.probe_size = 16;
    cfg.target_training.epochs = 40;
    cfg.cav.epochs = 40;
    cfg.autoencoder.d_embed = 16;
    cfg.autoencoder.hidden = 16;
    cfg.autoencoder.epochs = 40;
    cfg.autoencoder.threshold = 1.0;
    cfg.align.epochs = 30;
    cfg.align.collapse_threshold = 0.999;
    cfg.align.negatives_per_anchor = 4;
    cfg.workers = 1;

    let (world, bank) = stages::gen(&cfg).unwrap();
    let (model, _) = stages::target(&cfg, &world).unwrap();
    let grads = stages::gradients(&cfg, &model, &world).unwrap();
    let base = stages::cavs(&cfg, &model, &bank, &grads).unwrap();
    let (aes, _) = stages::autoencoders(&cfg, &base.cavs).unwrap();
    let (grid, random) = stages::embed(&aes, &base.cavs).unwrap();
    let (_, s2) = stages::align(&cfg, &grid, &random).unwrap();

    let fcfg = FusionConfig {
        lambda_cons: 0.0,
        dropout: 0.0,
        epochs: 1,
        batch_n: 8,
        ..cfg.fusion.clone()
    };
    let mut fm = stages::init_fusion(&cfg).unwrap();
    let before = fm.store.clone();
    let streams = SeedStreams::new(1);
    let out = train_stage3(
        &mut fm,
        &s2.aligned,
        &aes,
        &grads,
        &fcfg,
        &mut streams.stream("test/batch"),
        &mut streams.stream("test/dropout"),
    )
    .unwrap();
    assert!(out.losses[0].variance > 0.0, "{:?}", out.losses);
    let moved: Vec<&str> = before
        .iter()
        .filter(|(id, _, t)| fm.store.get(*id) != *t)
        .map(|(_, name, _)| name)
        .collect();
    for name in ["out/w", "ffn/1/w", "attn/v/w", "pos"] {
        assert!(
            moved.contains(&name),
            "{name} did not move; moved: {moved:?}"
        );
    }
}

#[test]
fn replaying_a_seed_gives_bitwise_identical_values_and_gradients() {
    let run = || {
        let (_, world, model) = trained();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let x = g.constant(world.dataset.inputs.clone());
        let logits = model.graph_forward(&mut g, &p, x).unwrap();
        let loss = cross_entropy(&mut g, logits, &world.dataset.labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect();
        (g.value(logits).clone(), gs)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert!(ga.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}
