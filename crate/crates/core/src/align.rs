//! Cross-layer alignment of CAV embeddings with a shared projection head.
//!
//! The head is `normalize(mlp(z) + residual(z))` where the MLP is two
//! `linear → layer_norm → gelu` blocks. Training pulls embeddings of the
//! same concept and run at different layers together (InfoNCE against
//! random-CAV embeddings from the anchor's layer) while a cosine consistency
//! term keeps each projection close to its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Bound, Graph, ParamStore, Var};
use crate::error::{GcavError, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::{cosine, dot, norm, Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub tau: f64,
    pub lambda_nce: f64,
    pub lambda_cons: f64,
    pub negatives_per_anchor: usize,
    pub epochs: usize,
    pub lr: f64,
    pub collapse_threshold: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda_nce: 1.0,
            lambda_cons: 3.0,
            negatives_per_anchor: 16,
            epochs: 1000,
            lr: 1e-3,
            collapse_threshold: 0.95,
        }
    }
}

/// Concept embeddings on the grid concept × run × layer, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub concepts: Vec<String>,
    pub layers: Vec<String>,
    pub runs: usize,
    /// `[C·R·L × d]`, row `(c·R + r)·L + l`.
    pub z: Tensor,
}

impl EmbeddingGrid {
    pub fn new(concepts: Vec<String>, layers: Vec<String>, runs: usize, z: Tensor) -> Result<Self> {
        let (n, _) = z.dims2("embedding_grid")?;
        if n != concepts.len() * runs * layers.len() {
            return Err(GcavError::invalid(
                "embedding_grid",
                format!(
                    "{n} rows for {} concepts × {runs} runs × {} layers",
                    concepts.len(),
                    layers.len()
                ),
            ));
        }
        Ok(Self {
            concepts,
            layers,
            runs,
            z,
        })
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn row_index(&self, c: usize, r: usize, l: usize) -> usize {
        (c * self.runs + r) * self.layers.len() + l
    }

    pub fn get(&self, c: usize, r: usize, l: usize) -> &[f32] {
        self.z.row(self.row_index(c, r, l))
    }

    /// `[C·R × L × d]` view used by the fusion stage.
    pub fn stacked(&self) -> Result<Tensor> {
        let b = self.concepts.len() * self.runs;
        Ok(self.z.reshape(&[b, self.layers.len(), self.dim()])?)
    }

    /// Rows of layer `l` for every (concept, run), `[C·R × d]`.
    pub fn layer_rows(&self, l: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.concepts.len() * self.runs)
            .map(|b| b * self.layers.len() + l)
            .collect();
        Ok(self.z.select_rows(&idx)?)
    }
}

/// Random-CAV embeddings, row `l·R + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomGrid {
    pub layers: Vec<String>,
    pub runs: usize,
    pub z: Tensor,
}

impl RandomGrid {
    pub fn new(layers: Vec<String>, runs: usize, z: Tensor) -> Result<Self> {
        let (n, _) = z.dims2("random_grid")?;
        if n != layers.len() * runs {
            return Err(GcavError::invalid(
                "random_grid",
                format!("{n} rows for {} layers × {runs} runs", layers.len()),
            ));
        }
        Ok(Self { layers, runs, z })
    }

    pub fn row_index(&self, l: usize, r: usize) -> usize {
        l * self.runs + r
    }

    pub fn get(&self, l: usize, r: usize) -> &[f32] {
        self.z.row(self.row_index(l, r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbRef {
    pub concept: usize,
    pub run: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandRef {
    pub layer: usize,
    pub index: usize,
}

/// Ordered anchor/positive pairs with per-anchor negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<EmbRef>,
    pub positives: Vec<EmbRef>,
    pub negatives: Vec<Vec<RandRef>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Every ordered pair of distinct layers of the same concept and run is a
/// positive; each anchor draws `negatives_per_anchor` random-CAV embeddings
/// (with replacement) from its own layer.
pub fn build_pairs<R: Rng + ?Sized>(
    grid: &EmbeddingGrid,
    random: &RandomGrid,
    negatives_per_anchor: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    let n_layers = grid.layers.len();
    if n_layers < 2 {
        return Err(GcavError::invalid(
            "build_pairs",
            format!("concepts are present at a single layer ({:?})", grid.layers),
        ));
    }
    if random.layers != grid.layers || random.runs == 0 {
        return Err(GcavError::invalid(
            "build_pairs",
            "need at least one random CAV at every concept layer",
        ));
    }
    if negatives_per_anchor == 0 {
        return Err(GcavError::invalid("build_pairs", "empty negative set"));
    }
    let mut batch = PairBatch {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for concept in 0..grid.concepts.len() {
        for run in 0..grid.runs {
            for la in 0..n_layers {
                for lp in (0..n_layers).filter(|&lp| lp != la) {
                    batch.anchors.push(EmbRef {
                        concept,
                        run,
                        layer: la,
                    });
                    batch.positives.push(EmbRef {
                        concept,
                        run,
                        layer: lp,
                    });
                    batch.negatives.push(
                        (0..negatives_per_anchor)
                            .map(|_| RandRef {
                                layer: la,
                                index: rng.random_range(0..random.runs),
                            })
                            .collect(),
                    );
                }
            }
        }
    }
    Ok(batch)
}

/// `−log(e^{cos(a,p)/τ} / (e^{cos(a,p)/τ} + Σ_n e^{cos(a,n)/τ}))`.
pub fn infonce_loss(a: &[f32], p: &[f32], negatives: &[&[f32]], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(GcavError::invalid("infonce_loss", "empty negative set"));
    }
    if tau <= 0.0 {
        return Err(GcavError::invalid(
            "infonce_loss",
            "temperature must be positive",
        ));
    }
    let sp = cosine(a, p) as f64 / tau;
    let logits: Vec<f64> = std::iter::once(sp)
        .chain(negatives.iter().map(|n| cosine(a, n) as f64 / tau))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - sp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T: Element = f32> {
    pub store: ParamStore<T>,
    pub dim: usize,
    lin1: Linear,
    ln1: LayerNorm,
    lin2: Linear,
    ln2: LayerNorm,
    residual: Linear,
}

impl<T: Element> ProjectionHead<T> {
    /// MLP linears use the uniform fan-in init; the residual branch starts as
    /// the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let lin1 = Linear::new(&mut store, "mlp/0", dim, dim, true, Init::Uniform, rng);
        let ln1 = LayerNorm::new(&mut store, "mlp/ln0", dim);
        let lin2 = Linear::new(&mut store, "mlp/1", dim, dim, true, Init::Uniform, rng);
        let ln2 = LayerNorm::new(&mut store, "mlp/ln1", dim);
        let residual = Linear::new(&mut store, "residual", dim, dim, true, Init::Identity, rng);
        Self {
            store,
            dim,
            lin1,
            ln1,
            lin2,
            ln2,
            residual,
        }
    }

    pub fn cast<U: Element>(&self) -> ProjectionHead<U> {
        ProjectionHead {
            store: self.store.cast(),
            dim: self.dim,
            lin1: self.lin1,
            ln1: self.ln1,
            lin2: self.lin2,
            ln2: self.ln2,
            residual: self.residual,
        }
    }

    /// Projects rows `[n × d]` to unit rows `[n × d]`.
    pub fn graph_project(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for (lin, ln) in [(&self.lin1, &self.ln1), (&self.lin2, &self.ln2)] {
            h = lin.apply(g, p, h)?;
            h = ln.apply(g, p, h)?;
            h = g.gelu(h)?;
        }
        let r = self.residual.apply(g, p, z)?;
        let s = g.add(h, r)?;
        Ok(g.normalize(s)?)
    }

    /// Eval-mode projection of `[d]` or `[n × d]`.
    pub fn project(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = match z.shape() {
            [d] if *d == self.dim => z.reshape(&[1, self.dim])?,
            [_, d] if *d == self.dim => z.clone(),
            s => {
                return Err(GcavError::invalid(
                    "project",
                    format!("shape {s:?}, expected last dim {}", self.dim),
                ))
            }
        };
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zv = g.constant(rows);
        let out = self.graph_project(&mut g, &p, zv)?;
        Ok(g.value(out).reshape(z.shape())?)
    }
}

/// `1 − cos(z, f(z))`.
pub fn align_consistency_loss(z: &[f32], head: &ProjectionHead) -> Result<f64> {
    if norm(z) == 0.0 {
        return Err(GcavError::invalid("align_consistency_loss", "zero input"));
    }
    let fz = head.project(&Tensor::vector(z.to_vec()))?;
    Ok(1.0 - cosine(z, fz.data()) as f64)
}

/// Mean positive-pair and anchor–negative cosines of projected embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignStats {
    /// Same concept and run, distinct layers, averaged over unordered pairs.
    pub positive: f64,
    /// Concept embedding vs every random embedding of the same layer.
    pub negative: f64,
}

impl AlignStats {
    pub fn margin(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn align_stats(grid: &EmbeddingGrid, random: &RandomGrid) -> AlignStats {
    let n_layers = grid.layers.len();
    let (mut pos, mut n_pos) = (0.0, 0usize);
    let (mut neg, mut n_neg) = (0.0, 0usize);
    for c in 0..grid.concepts.len() {
        for r in 0..grid.runs {
            for i in 0..n_layers {
                for j in i + 1..n_layers {
                    pos += cosine(grid.get(c, r, i), grid.get(c, r, j)) as f64;
                    n_pos += 1;
                }
                for q in 0..random.runs {
                    neg += cosine(grid.get(c, r, i), random.get(i, q)) as f64;
                    n_neg += 1;
                }
            }
        }
    }
    AlignStats {
        positive: pos / n_pos.max(1) as f64,
        negative: neg / n_neg.max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    pub before: AlignStats,
    pub after: AlignStats,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    /// Unit-norm projections of every concept embedding.
    pub aligned: EmbeddingGrid,
    pub projected_random: RandomGrid,
    pub report: Stage2Report,
}

/// Mean InfoNCE over a batch on the tape.
///
/// `proj` and `proj_rand` hold unit rows, so dot products are cosines.
pub fn graph_infonce<T: Element>(
    g: &mut Graph<T>,
    proj: Var,
    proj_rand: Var,
    rows: &PairRows,
    tau: f64,
) -> Result<Var> {
    let p = rows.anchor.len();
    let m = rows.negative.len() / p.max(1);
    let a = g.select_rows(proj, &rows.anchor)?;
    let pp = g.select_rows(proj, &rows.positive)?;
    let a_rep = g.select_rows(proj, &rows.anchor_repeated)?;
    let nn = g.select_rows(proj_rand, &rows.negative)?;
    let ap = g.mul(a, pp)?;
    let sp = g.sum_axis(ap, 1)?;
    let an = g.mul(a_rep, nn)?;
    let sn = g.sum_axis(an, 1)?;
    let sp_col = g.reshape(sp, &[p, 1])?;
    let sn = g.reshape(sn, &[p, m])?;
    let logits = g.concat(&[sp_col, sn], 1)?;
    let inv_tau = T::lit(1.0 / tau);
    let logits = g.scale(logits, inv_tau)?;
    let lse = g.logsumexp(logits)?;
    let sp = g.scale(sp, inv_tau)?;
    let per = g.sub(lse, sp)?;
    Ok(g.mean(per)?)
}

/// Row indices of a [`PairBatch`] into the flattened grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRows {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub anchor_repeated: Vec<usize>,
    pub negative: Vec<usize>,
}

impl PairRows {
    pub fn new(batch: &PairBatch, grid: &EmbeddingGrid, random: &RandomGrid) -> Self {
        let at = |e: &EmbRef| grid.row_index(e.concept, e.run, e.layer);
        let mut anchor_repeated = Vec::new();
        let mut negative = Vec::new();
        for (a, negs) in batch.anchors.iter().zip(&batch.negatives) {
            for n in negs {
                anchor_repeated.push(at(a));
                negative.push(random.row_index(n.layer, n.index));
            }
        }
        Self {
            anchor: batch.anchors.iter().map(at).collect(),
            positive: batch.positives.iter().map(at).collect(),
            anchor_repeated,
            negative,
        }
    }
}

/// Trains the head with `λ_NCE·InfoNCE + λ_cons·(1 − cos(z, f(z)))`.
///
/// Negatives are redrawn every epoch. Consistency is averaged over concept
/// embeddings only. Fails if projected random and concept embeddings end up
/// with mean cosine above the collapse threshold.
pub fn train_stage2<R: Rng + ?Sized>(
    head: &mut ProjectionHead,
    grid: &EmbeddingGrid,
    random: &RandomGrid,
    cfg: &AlignConfig,
    rng: &mut R,
) -> Result<Stage2Output> {
    if cfg.tau <= 0.0 || cfg.lambda_nce < 0.0 || cfg.lambda_cons < 0.0 {
        return Err(GcavError::InvalidConfig(
            "alignment needs τ > 0 and λ ≥ 0".into(),
        ));
    }
    let projected = |head: &ProjectionHead| -> Result<(EmbeddingGrid, RandomGrid)> {
        Ok((
            EmbeddingGrid::new(
                grid.concepts.clone(),
                grid.layers.clone(),
                grid.runs,
                head.project(&grid.z)?,
            )?,
            RandomGrid::new(random.layers.clone(), random.runs, head.project(&random.z)?)?,
        ))
    };
    let (pg, pr) = projected(head)?;
    let before = align_stats(&pg, &pr);

    let mut adam = Adam::for_store(AdamConfig::with_lr(cfg.lr), &head.store);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        let batch = build_pairs(grid, random, cfg.negatives_per_anchor, rng)?;
        let rows = PairRows::new(&batch, grid, random);
        let mut g = Graph::training();
        let p = head.store.bind(&mut g);
        let z = g.constant(grid.z.clone());
        let zr = g.constant(random.z.clone());
        let result = (|| -> Result<Var> {
            let proj = head.graph_project(&mut g, &p, z)?;
            let proj_rand = head.graph_project(&mut g, &p, zr)?;
            let nce = graph_infonce(&mut g, proj, proj_rand, &rows, cfg.tau)?;
            let cos = g.cosine_rows(z, proj)?;
            let cons = g.mean(cos)?;
            let cons = g.scale(cons, -1.0)?;
            let cons = g.add_scalar(cons, 1.0)?;
            let a = g.scale(nce, cfg.lambda_nce as f32)?;
            let b = g.scale(cons, cfg.lambda_cons as f32)?;
            Ok(g.add(a, b)?)
        })();
        let loss = match result {
            Err(GcavError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(GcavError::NonFiniteLoss {
                    stage: "align",
                    step,
                    tau: Some(cfg.tau),
                    last: losses.last().copied(),
                })
            }
            other => other?,
        };
        losses.push(g.scalar(loss)?.as_f64());
        let grads = p.grads(&g.backward(loss)?);
        adam.step_store(&mut head.store, &grads)?;
    }

    let (aligned, projected_random) = projected(head)?;
    let after = align_stats(&aligned, &projected_random);
    if after.negative > cfg.collapse_threshold {
        return Err(GcavError::Collapse {
            cosine: after.negative,
            threshold: cfg.collapse_threshold,
        });
    }
    Ok(Stage2Output {
        aligned,
        projected_random,
        report: Stage2Report {
            before,
            after,
            losses,
        },
    })
}

/// Mean cosine between rows of two equally shaped matrices.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .map(|i| cosine(a.row(i), b.row(i)) as f64)
        .sum::<f64>()
        / a.rows().max(1) as f64
}

/// Unit check used by the tests and the pipeline audit.
pub fn max_norm_deviation(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|i| (dot(t.row(i), t.row(i)).sqrt() as f64 - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn infonce_hand_values() {
        let a = [1.0f32, 0.0];
        let neg = [-1.0f32, 0.0];
        let l = infonce_loss(&a, &a, &[&neg], 1.0).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-6);
        let p = [0.0f32, 1.0];
        let n = [0.0f32, -1.0];
        // cos(a,p) = cos(a,n) = 0
        let l = infonce_loss(&a, &p, &[&n], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        assert!(infonce_loss(&a, &p, &[], 1.0).is_err());
    }

    #[test]
    fn pair_counts_and_provenance() {
        let mut rng = SeedStreams::new(1).stream("pairs");
        let layers: Vec<String> = ["L1", "L2", "L3"].iter().map(|s| s.to_string()).collect();
        let grid = EmbeddingGrid::new(vec!["c0".into()], layers.clone(), 1, Tensor::ones(&[3, 4]))
            .unwrap();
        let random = RandomGrid::new(layers, 2, Tensor::ones(&[6, 4])).unwrap();
        let b = build_pairs(&grid, &random, 3, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        for ((a, p), negs) in b.anchors.iter().zip(&b.positives).zip(&b.negatives) {
            assert_eq!(a.concept, p.concept);
            assert_ne!(a.layer, p.layer);
            assert_eq!(negs.len(), 3);
            assert!(negs.iter().all(|n| n.layer == a.layer));
        }
    }

    #[test]
    fn single_layer_is_rejected() {
        let mut rng = SeedStreams::new(1).stream("pairs");
        let grid = EmbeddingGrid::new(
            vec!["c0".into()],
            vec!["L1".into()],
            1,
            Tensor::ones(&[1, 4]),
        )
        .unwrap();
        let random = RandomGrid::new(vec!["L1".into()], 1, Tensor::ones(&[1, 4])).unwrap();
        assert!(build_pairs(&grid, &random, 2, &mut rng).is_err());
    }
}
