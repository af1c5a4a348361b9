//! Synthetic ground-truth world and the instrumented target classifier.
//!
//! Concepts are orthonormal directions in input space. Class `k` inputs are a
//! sum of `α·direction` over the concepts planted as relevant to `k`, plus
//! isotropic Gaussian noise. The target is a residual ReLU MLP whose hidden
//! layers `L1..L_H` can be cut anywhere into a prefix (`forward_to`) and a
//! head (`head_from`).

use serde::{Deserialize, Serialize};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Adam, AdamConfig, Bound, Graph, ParamStore, Var};
use crate::error::{GcavError, Result};
use crate::nn::{Init, Linear};
use crate::rng::SeedStreams;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d_in: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub examples_per_class: usize,
    pub probe_size: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the pure-noise random probe inputs.
    pub random_sigma: f64,
    pub alpha_range: (f64, f64),
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            n_concepts: 6,
            n_classes: 4,
            examples_per_class: 100,
            probe_size: 50,
            noise_sigma: 0.3,
            random_sigma: 1.0,
            alpha_range: (1.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec {
    pub id: String,
    pub direction: Vec<f32>,
    /// `relevance[k]` is true when the concept is planted in class `k`.
    pub relevance: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl ClassDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == k)
            .collect()
    }

    /// Inputs of class `k`, `[n_k × d_in]`.
    pub fn class_inputs(&self, k: usize) -> Result<Tensor> {
        if k >= self.n_classes {
            return Err(GcavError::UnknownClass(k));
        }
        Ok(self.inputs.select_rows(&self.class_indices(k))?)
    }

    /// One row per example: `x0..x{d-1},label`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.inputs.cols();
        let header: Vec<String> = (0..d)
            .map(|j| format!("x{j}"))
            .chain(["label".into()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.inputs.row(i) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{label}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub concepts: Vec<ConceptSpec>,
    pub dataset: ClassDataset,
}

impl World {
    pub fn concept(&self, id: &str) -> Result<&ConceptSpec> {
        self.concepts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| GcavError::UnknownConcept(id.to_string()))
    }

    pub fn concept_ids(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.id.clone()).collect()
    }
}

pub fn concept_id(i: usize) -> String {
    format!("c{i}")
}

/// Orthonormal rows via two passes of modified Gram–Schmidt in f64.
fn orthonormal_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &rows {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

/// Builds concept directions and the labelled class dataset.
///
/// Class `k` has concept `k mod n_concepts` planted; every other concept is
/// irrelevant to it.
pub fn generate_world(config: &WorldConfig, streams: &SeedStreams) -> Result<World> {
    let c = config;
    if c.n_concepts > c.d_in {
        return Err(GcavError::InvalidConfig(format!(
            "n_concepts ({}) exceeds d_in ({})",
            c.n_concepts, c.d_in
        )));
    }
    if c.n_concepts < 2 || c.n_classes < 2 || c.examples_per_class == 0 {
        return Err(GcavError::InvalidConfig(
            "need at least 2 concepts, 2 classes and one example per class".into(),
        ));
    }
    let dirs = orthonormal_rows(
        c.n_concepts,
        c.d_in,
        &mut streams.stream("world/directions"),
    );
    let concepts: Vec<ConceptSpec> = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| ConceptSpec {
            id: concept_id(i),
            direction: d.iter().map(|&v| v as f32).collect(),
            relevance: (0..c.n_classes).map(|k| k % c.n_concepts == i).collect(),
        })
        .collect();

    let mut rng = streams.stream("world/data");
    let n = c.n_classes * c.examples_per_class;
    let mut data = Vec::with_capacity(n * c.d_in);
    let mut labels = Vec::with_capacity(n);
    for k in 0..c.n_classes {
        for _ in 0..c.examples_per_class {
            let mut x = vec![0.0f64; c.d_in];
            for (spec, dir) in concepts.iter().zip(&dirs) {
                if spec.relevance[k] {
                    let alpha = rng.random_range(c.alpha_range.0..c.alpha_range.1);
                    x.iter_mut().zip(dir).for_each(|(a, d)| *a += alpha * d);
                }
            }
            for a in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *a += c.noise_sigma * e;
            }
            data.extend(x.into_iter().map(|v| v as f32));
            labels.push(k);
        }
    }
    Ok(World {
        config: c.clone(),
        concepts,
        dataset: ClassDataset {
            inputs: Tensor::new(&[n, c.d_in], data)?,
            labels,
            n_classes: c.n_classes,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Concept,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub kind: ProbeKind,
    pub concept_id: Option<String>,
    /// Random-set number; 0 for concept sets.
    pub index: usize,
    pub examples: Tensor,
}

impl ProbeSet {
    pub fn count(&self) -> usize {
        self.examples.rows()
    }
}

pub fn concept_probe_set(world: &World, concept: &str, streams: &SeedStreams) -> Result<ProbeSet> {
    let spec = world.concept(concept)?;
    let c = &world.config;
    let mut rng = streams.stream(&format!("probe/concept/{concept}"));
    let mut data = Vec::with_capacity(c.probe_size * c.d_in);
    for _ in 0..c.probe_size {
        let alpha = rng.random_range(c.alpha_range.0..c.alpha_range.1);
        for &d in &spec.direction {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push((alpha * d as f64 + c.noise_sigma * e) as f32);
        }
    }
    Ok(ProbeSet {
        kind: ProbeKind::Concept,
        concept_id: Some(concept.to_string()),
        index: 0,
        examples: Tensor::new(&[c.probe_size, c.d_in], data)?,
    })
}

/// Random set `index`; the same set is shared by every concept.
pub fn random_probe_set(world: &World, index: usize, streams: &SeedStreams) -> ProbeSet {
    let c = &world.config;
    let mut rng = streams.indexed("probe/random", index);
    ProbeSet {
        kind: ProbeKind::Random,
        concept_id: None,
        index,
        examples: Tensor::randn(&[c.probe_size, c.d_in], c.random_sigma, &mut rng),
    }
}

pub fn make_probe_sets(
    world: &World,
    concept: &str,
    n_random_sets: usize,
    streams: &SeedStreams,
) -> Result<(ProbeSet, Vec<ProbeSet>)> {
    let pos = concept_probe_set(world, concept, streams)?;
    let randoms = (0..n_random_sets)
        .map(|i| random_probe_set(world, i, streams))
        .collect();
    Ok((pos, randoms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub d_in: usize,
    pub width: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub instrumented: Vec<String>,
    /// Multiplier on the He standard deviation of every weight matrix.
    pub init_gain: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            width: 64,
            depth: 5,
            n_classes: 4,
            instrumented: (1..=4).map(|i| format!("L{i}")).collect(),
            init_gain: 1.5,
        }
    }
}

/// Residual ReLU MLP: `a₁ = relu(W₁x + b₁)`, `a_l = a_{l-1} + relu(W_l a_{l-1} + b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<T: Element = f32> {
    pub store: ParamStore<T>,
    hidden: Vec<Linear>,
    out: Linear,
    instrumented: Vec<String>,
}

impl<T: Element> TargetModel<T> {
    pub fn new<R: Rng + ?Sized>(config: &TargetConfig, rng: &mut R) -> Result<Self> {
        if config.depth == 0 || config.width == 0 || config.n_classes < 2 {
            return Err(GcavError::InvalidConfig(
                "target needs depth ≥ 1, width ≥ 1, ≥ 2 classes".into(),
            ));
        }
        let mut store = ParamStore::new();
        let init = Init::He {
            gain: config.init_gain,
        };
        let hidden = (0..config.depth)
            .map(|i| {
                let fan_in = if i == 0 { config.d_in } else { config.width };
                Linear::new(
                    &mut store,
                    &format!("L{}", i + 1),
                    fan_in,
                    config.width,
                    true,
                    init,
                    rng,
                )
            })
            .collect();
        let out = Linear::new(
            &mut store,
            "logits",
            config.width,
            config.n_classes,
            true,
            init,
            rng,
        );
        let model = Self {
            store,
            hidden,
            out,
            instrumented: config.instrumented.clone(),
        };
        for name in &model.instrumented {
            model.hidden_index(name)?;
        }
        Ok(model)
    }

    pub fn cast<U: Element>(&self) -> TargetModel<U> {
        TargetModel {
            store: self.store.cast(),
            hidden: self.hidden.clone(),
            out: self.out,
            instrumented: self.instrumented.clone(),
        }
    }

    pub fn instrumented(&self) -> &[String] {
        &self.instrumented
    }

    pub fn n_classes(&self) -> usize {
        self.out.fan_out
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn layer_width(&self, layer: &str) -> Result<usize> {
        Ok(self.hidden[self.hidden_index(layer)?].fan_out)
    }

    fn hidden_index(&self, layer: &str) -> Result<usize> {
        layer
            .strip_prefix('L')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i >= 1 && i <= self.hidden.len())
            .map(|i| i - 1)
            .ok_or_else(|| GcavError::UnknownLayer(layer.to_string()))
    }

    /// Hidden-layer index of an instrumented layer.
    pub fn instrumented_layer(&self, layer: &str) -> Result<usize> {
        self.instrumented_index(layer)
    }

    fn instrumented_index(&self, layer: &str) -> Result<usize> {
        if !self.instrumented.iter().any(|l| l == layer) {
            return Err(GcavError::UnknownLayer(layer.to_string()));
        }
        self.hidden_index(layer)
    }

    fn block(&self, g: &mut Graph<T>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let z = self.hidden[i].apply(g, p, x)?;
        let a = g.relu(z)?;
        Ok(if i == 0 { a } else { g.add(x, a)? })
    }

    /// Hidden layers `0..=upto` on the tape.
    pub fn graph_prefix(&self, g: &mut Graph<T>, p: &Bound, upto: usize, x: Var) -> Result<Var> {
        (0..=upto).try_fold(x, |a, i| self.block(g, p, i, a))
    }

    /// Hidden layers after `from` and the logit layer on the tape.
    pub fn graph_head(&self, g: &mut Graph<T>, p: &Bound, from: usize, a: Var) -> Result<Var> {
        let a = (from + 1..self.hidden.len()).try_fold(a, |a, i| self.block(g, p, i, a))?;
        Ok(self.out.apply(g, p, a)?)
    }

    pub fn graph_forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let a = self.graph_prefix(g, p, self.hidden.len() - 1, x)?;
        Ok(self.out.apply(g, p, a)?)
    }

    fn eval(
        &self,
        x: &Tensor<T>,
        f: impl FnOnce(&mut Graph<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = f(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    /// Logits for a batch `[n × d_in]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, |g, p, x| self.graph_forward(g, p, x))
    }

    pub fn forward_to(&self, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.hidden_index(layer)?;
        self.eval(x, |g, p, x| self.graph_prefix(g, p, l, x))
    }

    pub fn head_from(&self, layer: &str, a: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.hidden_index(layer)?;
        self.eval(a, |g, p, a| self.graph_head(g, p, l, a))
    }

    /// Eval-mode activations `f_l(x)` at an instrumented layer, `[n × d_l]`.
    pub fn activations(&self, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.instrumented_index(layer)?;
        self.forward_to(layer, x)
    }

    /// `∇_a h_{l,k}(a)` for each row of `a` (`[n × d_l]` or a single `[d_l]`).
    pub fn logit_gradient(&self, layer: &str, k: usize, a: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.instrumented_index(layer)?;
        if k >= self.n_classes() {
            return Err(GcavError::UnknownClass(k));
        }
        let width = self.hidden[l].fan_out;
        let rows = match a.shape() {
            [d] if *d == width => a.reshape(&[1, width])?,
            [_, d] if *d == width => a.clone(),
            s => {
                return Err(GcavError::invalid(
                    "logit_gradient",
                    format!("activation shape {s:?} does not match layer width {width}"),
                ))
            }
        };
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let av = g.param(rows);
        let logits = self.graph_head(&mut g, &p, l, av)?;
        let mut onehot = Tensor::zeros(g.shape(logits));
        for row in onehot.data_mut().chunks_mut(self.n_classes()) {
            row[k] = T::one();
        }
        let picked = g.mask(logits, &onehot)?;
        let total = g.sum(picked)?;
        let grad = g.backward(total)?.get(av);
        Ok(grad.reshape(a.shape())?)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Mean softmax cross-entropy of `logits` against integer labels.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = g.shape(logits)[1];
    let mut onehot = Tensor::zeros(g.shape(logits));
    for (row, &y) in onehot.data_mut().chunks_mut(k).zip(labels) {
        row[y] = T::one();
    }
    let lse = g.logsumexp(logits)?;
    let picked = g.mask(logits, &onehot)?;
    let picked = g.sum_axis(picked, 1)?;
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TargetTraining {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub epoch_losses: Vec<f64>,
    pub accuracy: f64,
}

/// Mini-batch Adam on softmax cross-entropy, reshuffling each epoch.
pub fn fit_target<R: Rng + ?Sized>(
    model: &mut TargetModel,
    data: &ClassDataset,
    opts: &TargetTraining,
    rng: &mut R,
) -> Result<TargetReport> {
    if data.is_empty() {
        return Err(GcavError::invalid("train_target", "empty dataset"));
    }
    let mut adam = Adam::for_store(AdamConfig::with_lr(opts.lr), &model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        shuffle(&mut order, rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let x = data.inputs.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::training();
            let p = model.store.bind(&mut g);
            let xv = g.constant(x);
            let logits = model.graph_forward(&mut g, &p, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            total += g.scalar(loss)?.as_f64() * batch.len() as f64;
            let grads = p.grads(&g.backward(loss)?);
            adam.step_store(&mut model.store, &grads)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let accuracy = model.accuracy(&data.inputs, &data.labels)?;
    Ok(TargetReport {
        epoch_losses,
        accuracy,
    })
}

/// [`fit_target`] followed by the 0.95 training-accuracy gate.
pub fn train_target<R: Rng + ?Sized>(
    model: &mut TargetModel,
    data: &ClassDataset,
    opts: &TargetTraining,
    rng: &mut R,
) -> Result<TargetReport> {
    let report = fit_target(model, data, opts, rng)?;
    if report.accuracy < 0.95 {
        return Err(GcavError::TargetUndertrained {
            accuracy: report.accuracy,
            epochs: opts.epochs,
        });
    }
    Ok(report)
}

/// Fisher–Yates shuffle.
pub(crate) fn shuffle<X, R: Rng + ?Sized>(items: &mut [X], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> World {
        generate_world(&WorldConfig::default(), &SeedStreams::new(seed)).unwrap()
    }

    #[test]
    fn world_is_deterministic_and_orthonormal() {
        let a = small_world(5);
        assert_eq!(a, small_world(5));
        assert_ne!(a.dataset, small_world(6).dataset);
        for (i, ci) in a.concepts.iter().enumerate() {
            let n: f32 = ci.direction.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
            for cj in &a.concepts[i + 1..] {
                let d: f32 = ci
                    .direction
                    .iter()
                    .zip(&cj.direction)
                    .map(|(x, y)| x * y)
                    .sum();
                assert!(d.abs() <= 1e-6);
            }
        }
        for k in 0..a.dataset.n_classes {
            assert!(a.concepts.iter().any(|c| c.relevance[k]));
            assert!(a.concepts.iter().any(|c| !c.relevance[k]));
        }
    }

    #[test]
    fn too_many_concepts_is_rejected() {
        let cfg = WorldConfig {
            d_in: 3,
            n_concepts: 4,
            ..WorldConfig::default()
        };
        assert!(matches!(
            generate_world(&cfg, &SeedStreams::new(0)),
            Err(GcavError::InvalidConfig(_))
        ));
    }

    #[test]
    fn unknown_layer_and_class_are_errors() {
        let mut rng = SeedStreams::new(0).stream("t");
        let m = TargetModel::<f32>::new(&TargetConfig::default(), &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 32]);
        assert!(matches!(
            m.activations("L5", &x),
            Err(GcavError::UnknownLayer(_))
        ));
        assert!(matches!(
            m.activations("L9", &x),
            Err(GcavError::UnknownLayer(_))
        ));
        let a = m.activations("L2", &x).unwrap();
        assert!(matches!(
            m.logit_gradient("L2", 4, &a),
            Err(GcavError::UnknownClass(4))
        ));
    }
}
