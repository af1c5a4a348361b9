//! Gradient-check suite shared by the core tests and the acceptance run.
//! Every check runs in f64 with central differences.

use gcav::align::ProjectionHead;
use gcav::autodiff::{grad_check_params, Bound, GradCheck, Graph, ParamStore, Var};
use gcav::autoencoder::{graph_reconstruction, AeConfig, LayerAutoencoder};
use gcav::fusion::FusionModule;
use gcav::probe::{cross_entropy, TargetConfig, TargetModel};
use gcav::rng::{SeedStreams, StreamRng};
use gcav::{GcavError, Tensor, TensorError};

pub const TOL: f64 = 1e-3;
pub const H: f64 = 1e-5;
/// Larger step for the composites: the key bias of attention has an exactly
/// zero gradient, and its finite difference must sit below the 1e-8 floor.
pub const H_COMPOSITE: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub type T64 = Tensor<f64>;
type Build = fn(&mut Graph<f64>, &[Var]) -> gcav::tensor::Result<Var>;

fn lift(e: GcavError) -> TensorError {
    TensorError::Invalid {
        op: "composite",
        msg: e.to_string(),
    }
}

pub fn randn(shape: &[usize], rng: &mut StreamRng) -> T64 {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from the kinks of relu at 0.
fn off_kink(shape: &[usize], rng: &mut StreamRng) -> T64 {
    randn(shape, rng).map(|v| if v.abs() < 0.05 { 0.5 } else { v })
}

fn positive(shape: &[usize], rng: &mut StreamRng) -> T64 {
    Tensor::uniform(shape, 0.2, 3.0, rng)
}

/// Scalar loss `Σ w ⊙ out` with a fixed random weight tensor, so no
/// coordinate of the gradient is structurally zero.
pub fn weighted(g: &mut Graph<f64>, out: Var, w: &T64) -> gcav::tensor::Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    g.sum(p)
}

fn check_inputs(inputs: Vec<T64>, build: Build, rng: &mut StreamRng) -> GradCheck {
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.add(format!("x{i}"), t);
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let out = build(&mut g, b.vars()).unwrap();
    let shape = g.shape(out).to_vec();
    let w = randn(&shape, rng);
    grad_check_params(
        &store,
        |g, b: &Bound| {
            let out = build(g, b.vars())?;
            weighted(g, out, &w)
        },
        H,
    )
    .unwrap()
}

fn primitives(rng: &mut StreamRng) -> Vec<(&'static str, Vec<T64>, Build)> {
    let m = |rng: &mut StreamRng| randn(&[3, 4], rng);
    vec![
        ("add", vec![m(rng), m(rng)], |g, x| g.add(x[0], x[1])),
        ("sub", vec![m(rng), m(rng)], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![m(rng), m(rng)], |g, x| g.mul(x[0], x[1])),
        ("scale", vec![m(rng)], |g, x| g.scale(x[0], -1.7)),
        ("add_scalar", vec![m(rng)], |g, x| g.add_scalar(x[0], 0.3)),
        (
            "add_trailing",
            vec![randn(&[2, 3, 4], rng), randn(&[3, 4], rng)],
            |g, x| g.add_trailing(x[0], x[1]),
        ),
        (
            "mul_trailing",
            vec![randn(&[2, 3, 4], rng), randn(&[4], rng)],
            |g, x| g.mul_trailing(x[0], x[1]),
        ),
        (
            "matmul",
            vec![randn(&[3, 4], rng), randn(&[4, 2], rng)],
            |g, x| g.matmul(x[0], x[1]),
        ),
        (
            "bmm",
            vec![randn(&[2, 3, 4], rng), randn(&[2, 4, 5], rng)],
            |g, x| g.bmm(x[0], x[1]),
        ),
        ("permute", vec![randn(&[2, 3, 4], rng)], |g, x| {
            g.permute(x[0], &[2, 0, 1])
        }),
        ("transpose", vec![m(rng)], |g, x| g.transpose(x[0])),
        ("reshape", vec![m(rng)], |g, x| g.reshape(x[0], &[2, 6])),
        ("relu", vec![off_kink(&[3, 4], rng)], |g, x| g.relu(x[0])),
        ("gelu", vec![m(rng)], |g, x| g.gelu(x[0])),
        ("sigmoid", vec![m(rng)], |g, x| g.sigmoid(x[0])),
        ("tanh", vec![m(rng)], |g, x| g.tanh(x[0])),
        ("exp", vec![m(rng)], |g, x| g.exp(x[0])),
        ("log", vec![positive(&[3, 4], rng)], |g, x| g.log(x[0])),
        ("softplus", vec![m(rng)], |g, x| g.softplus(x[0])),
        ("square", vec![m(rng)], |g, x| g.square(x[0])),
        ("softmax", vec![randn(&[2, 3, 4], rng)], |g, x| {
            g.softmax(x[0])
        }),
        ("logsumexp", vec![m(rng)], |g, x| g.logsumexp(x[0])),
        ("layer_norm", vec![m(rng)], |g, x| g.layer_norm(x[0])),
        ("normalize", vec![m(rng)], |g, x| g.normalize(x[0])),
        ("sum", vec![m(rng)], |g, x| g.sum(x[0])),
        ("mean", vec![m(rng)], |g, x| g.mean(x[0])),
        ("sum_axis", vec![randn(&[2, 3, 4], rng)], |g, x| {
            g.sum_axis(x[0], 1)
        }),
        ("mean_axis", vec![randn(&[2, 3, 4], rng)], |g, x| {
            g.mean_axis(x[0], 0)
        }),
        ("variance", vec![randn(&[2, 3, 4], rng)], |g, x| {
            g.variance(x[0], 1)
        }),
        (
            "concat",
            vec![randn(&[2, 3], rng), randn(&[2, 1], rng)],
            |g, x| g.concat(&[x[0], x[1]], 1),
        ),
        ("select_rows", vec![randn(&[4, 3], rng)], |g, x| {
            g.select_rows(x[0], &[2, 0, 2, 3])
        }),
        ("mask", vec![m(rng)], |g, x| {
            let mut mk = Tensor::ones(&[3, 4]);
            mk.data_mut()[1] = 0.0;
            mk.data_mut()[6] = 2.5;
            g.mask(x[0], &mk)
        }),
        (
            "linear",
            vec![randn(&[3, 4], rng), randn(&[4, 2], rng), randn(&[2], rng)],
            |g, x| g.linear(x[0], x[1], Some(x[2])),
        ),
        (
            "layer_norm_affine",
            vec![m(rng), randn(&[4], rng), randn(&[4], rng)],
            |g, x| g.layer_norm_affine(x[0], x[1], x[2]),
        ),
        ("dot", vec![randn(&[5], rng), randn(&[5], rng)], |g, x| {
            g.dot(x[0], x[1])
        }),
        ("cosine_rows", vec![m(rng), m(rng)], |g, x| {
            g.cosine_rows(x[0], x[1])
        }),
        (
            "cosine_similarity",
            vec![randn(&[5], rng), randn(&[5], rng)],
            |g, x| g.cosine_similarity(x[0], x[1]),
        ),
    ]
}

/// One check per primitive at `seed`.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut rng = SeedStreams::new(seed).stream("gradcheck/primitives");
    primitives(&mut rng)
        .into_iter()
        .map(|(name, inputs, build)| (name, check_inputs(inputs, build, &mut rng)))
        .collect()
}

fn check_store<F>(store: &ParamStore<f64>, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &Bound) -> gcav::tensor::Result<Var>,
{
    grad_check_params(store, f, H_COMPOSITE).unwrap()
}

/// Autoencoder, projection head, fusion block and target head at `seed`.
pub fn composite_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream("gradcheck/composites");
    let mut out = Vec::new();

    let ae_cfg = AeConfig {
        d_embed: 4,
        hidden: 5,
        ..AeConfig::default()
    };
    let ae = LayerAutoencoder::<f64>::new("L1", 6, &ae_cfg, &mut rng);
    let x = randn(&[3, 6], &mut rng);
    out.push((
        "autoencoder",
        check_store(&ae.store, |g, p| {
            let xv = g.constant(x.clone());
            graph_reconstruction(&ae, g, p, xv).map_err(lift)
        }),
    ));

    let head = ProjectionHead::<f64>::new(6, &mut rng);
    let z = randn(&[3, 6], &mut rng);
    let w = randn(&[3, 6], &mut rng);
    out.push((
        "projection head",
        check_store(&head.store, |g, p| {
            let zv = g.constant(z.clone());
            let o = head.graph_project(g, p, zv).map_err(lift)?;
            weighted(g, o, &w)
        }),
    ));

    let fm = FusionModule::<f64>::new(3, 4, 2, 2, &mut rng).unwrap();
    let stack = randn(&[2, 3, 4], &mut rng);
    let w = randn(&[2, 4], &mut rng);
    out.push((
        "fusion block",
        check_store(&fm.store, |g, p| {
            let xv = g.constant(stack.clone());
            let mut idle = streams.stream("gradcheck/idle");
            let o = fm.graph_fuse(g, p, xv, 0.1, &mut idle).map_err(lift)?;
            weighted(g, o, &w)
        }),
    ));

    let tcfg = TargetConfig {
        d_in: 5,
        width: 6,
        depth: 3,
        n_classes: 3,
        instrumented: vec!["L1".into(), "L2".into()],
        init_gain: 1.0,
    };
    let model = TargetModel::<f64>::new(&tcfg, &mut rng).unwrap();
    let xs = randn(&[4, 5], &mut rng);
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
    out.push((
        "target head",
        check_store(&model.store, |g, p| {
            let xv = g.constant(xs.clone());
            let logits = model.graph_forward(g, p, xv).map_err(lift)?;
            cross_entropy(g, logits, &labels).map_err(lift)
        }),
    ));
    out
}
