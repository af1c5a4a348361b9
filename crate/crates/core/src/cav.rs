//! Linear concept probes (CAVs) and hard TCAV scoring.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig};
use crate::error::{GcavError, Result};
use crate::par::par_map;
use crate::probe::{ClassDataset, ProbeSet, TargetModel};
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavTraining {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for CavTraining {
    fn default() -> Self {
        Self {
            l2: 0.01,
            lr: 0.01,
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CavKind {
    Concept,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavVector {
    pub concept_id: String,
    pub kind: CavKind,
    pub layer: String,
    pub run_index: usize,
    pub vector: Vec<f32>,
    pub train_accuracy: f64,
}

/// Unit direction and training accuracy of one fitted probe.
#[derive(Debug, Clone, PartialEq)]
pub struct CavFit {
    pub vector: Vec<f32>,
    pub train_accuracy: f64,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pair(pos: &Tensor, neg: &Tensor) -> Result<usize> {
    let (np, dp) = pos.dims2("train_cav")?;
    let (nn, dn) = neg.dims2("train_cav")?;
    if np == 0 || nn == 0 {
        return Err(GcavError::invalid("train_cav", "empty activation set"));
    }
    if dp != dn {
        return Err(GcavError::invalid(
            "train_cav",
            format!("widths differ: {dp} vs {dn}"),
        ));
    }
    Ok(dp)
}

/// Accumulates `Σ r_i x_i` and `Σ r_i` for one side of the problem.
fn side_gradient(acts: &Tensor, w: &[f32], b: f32, positive: bool, gw: &mut [f32]) -> f32 {
    gw.iter_mut().for_each(|g| *g = 0.0);
    let mut gb = 0.0;
    for i in 0..acts.rows() {
        let x = acts.row(i);
        let z = dot(x, w) + b;
        // d/dz softplus(-z) = -σ(-z) for positives, d/dz softplus(z) = σ(z) for negatives
        let r = if positive { -sigmoid(-z) } else { sigmoid(z) };
        gw.iter_mut().zip(x).for_each(|(g, &xv)| *g += r * xv);
        gb += r;
    }
    gb
}

/// L2-regularised logistic regression, positives labelled 1.
///
/// The loss is `mean BCE + l2·‖w‖²`, optimised full-batch with Adam from a
/// zero start. Both classes contribute through separately accumulated sums,
/// so swapping `pos` and `neg` negates every iterate exactly and the result
/// flips sign bit for bit. The direction is oriented so that positives
/// project higher on average; an exact tie is an error.
pub fn train_cav(pos: &Tensor, neg: &Tensor, opts: &CavTraining) -> Result<CavFit> {
    let d = check_pair(pos, neg)?;
    let n = (pos.rows() + neg.rows()) as f32;
    let l2 = opts.l2 as f32;
    let mut params = vec![Tensor::zeros(&[d]), Tensor::zeros(&[1])];
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), [&[d][..], &[1][..]]);
    let (mut gp, mut gn) = (vec![0.0f32; d], vec![0.0f32; d]);
    for _ in 0..opts.epochs {
        let b = params[1].data()[0];
        let bp = side_gradient(pos, params[0].data(), b, true, &mut gp);
        let bn = side_gradient(neg, params[0].data(), b, false, &mut gn);
        let gw: Vec<f32> = gp
            .iter()
            .zip(&gn)
            .zip(params[0].data())
            .map(|((a, c), &w)| (a + c) / n + 2.0 * l2 * w)
            .collect();
        let grads = [Tensor::vector(gw), Tensor::vector(vec![(bp + bn) / n])];
        adam.step(&mut params, &grads)?;
    }
    let (w, b) = (params[0].data(), params[1].data()[0]);
    let correct = (0..pos.rows())
        .filter(|&i| dot(pos.row(i), w) + b > 0.0)
        .count()
        + (0..neg.rows())
            .filter(|&i| dot(neg.row(i), w) + b < 0.0)
            .count();
    let wn = norm(w);
    if wn == 0.0 {
        return Err(GcavError::DegenerateCav { value: 0.0 });
    }
    let mut v: Vec<f32> = w.iter().map(|x| x / wn).collect();
    let mean_proj = |t: &Tensor, v: &[f32]| {
        (0..t.rows()).map(|i| dot(t.row(i), v) as f64).sum::<f64>() / t.rows() as f64
    };
    let (mp, mn) = (mean_proj(pos, &v), mean_proj(neg, &v));
    if mp == mn {
        return Err(GcavError::DegenerateCav { value: mp });
    }
    if mp < mn {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(CavFit {
        vector: v,
        train_accuracy: correct as f64 / n as f64,
    })
}

/// CAV separating two random probe sets at `layer`.
pub fn train_random_cav(
    model: &TargetModel,
    layer: &str,
    a: &ProbeSet,
    b: &ProbeSet,
    run_index: usize,
    opts: &CavTraining,
) -> Result<CavVector> {
    if a.index == b.index {
        return Err(GcavError::invalid(
            "train_random_cav",
            format!("both random sets have id {}", a.index),
        ));
    }
    let fit = train_cav(
        &model.activations(layer, &a.examples)?,
        &model.activations(layer, &b.examples)?,
        opts,
    )?;
    Ok(CavVector {
        concept_id: format!("random{}", a.index),
        kind: CavKind::Random,
        layer: layer.to_string(),
        run_index,
        vector: fit.vector,
        train_accuracy: fit.train_accuracy,
    })
}

/// Fraction of rows of `grads` with a strictly positive dot against `v`.
pub fn tcav_from_gradients(grads: &Tensor, v: &[f32]) -> Result<f64> {
    let (n, d) = grads.dims2("tcav_score")?;
    if n == 0 {
        return Err(GcavError::invalid("tcav_score", "empty class set"));
    }
    if d != v.len() {
        return Err(GcavError::invalid(
            "tcav_score",
            format!("gradient width {d} vs CAV length {}", v.len()),
        ));
    }
    let vn = norm(v);
    if (vn - 1.0).abs() > 1e-4 {
        return Err(GcavError::invalid(
            "tcav_score",
            format!("CAV norm {vn} is not 1"),
        ));
    }
    let positive = (0..n).filter(|&i| dot(grads.row(i), v) > 0.0).count();
    Ok(positive as f64 / n as f64)
}

/// TCAV score of class `k` at `layer` along the unit vector `v`.
pub fn tcav_score(
    model: &TargetModel,
    layer: &str,
    k: usize,
    x_k: &Tensor,
    v: &[f32],
) -> Result<f64> {
    if x_k.rows() == 0 {
        return Err(GcavError::invalid("tcav_score", "empty class set"));
    }
    let acts = model.activations(layer, x_k)?;
    tcav_from_gradients(&model.logit_gradient(layer, k, &acts)?, v)
}

/// Per-example logit gradients of every class at every instrumented layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradients {
    pub layers: Vec<String>,
    pub n_classes: usize,
    /// `grads[l][k]`: `[n_k × d_l]`.
    pub grads: Vec<Vec<Tensor>>,
}

impl ClassGradients {
    pub fn compute(model: &TargetModel, data: &ClassDataset, layers: &[String]) -> Result<Self> {
        let mut grads = Vec::with_capacity(layers.len());
        for layer in layers {
            let mut per_class = Vec::with_capacity(data.n_classes);
            for k in 0..data.n_classes {
                let acts = model.activations(layer, &data.class_inputs(k)?)?;
                per_class.push(model.logit_gradient(layer, k, &acts)?);
            }
            grads.push(per_class);
        }
        Ok(Self {
            layers: layers.to_vec(),
            n_classes: data.n_classes,
            grads,
        })
    }

    pub fn get(&self, layer: usize, k: usize) -> &Tensor {
        &self.grads[layer][k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TCAV")]
    Tcav,
    #[serde(rename = "TGCAV")]
    Tgcav,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tcav => "TCAV",
            Method::Tgcav => "TGCAV",
        })
    }
}

/// Scores over the dense grid concept × class × layer × run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub method: Method,
    pub concepts: Vec<String>,
    pub n_classes: usize,
    pub layers: Vec<String>,
    pub runs: usize,
    scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry<'a> {
    pub concept: &'a str,
    pub class: usize,
    pub layer: &'a str,
    pub run: usize,
    pub method: Method,
    pub score: f64,
}

impl ScoreTable {
    /// Fills the grid from `f(concept, class, layer, run)`.
    pub fn from_fn(
        method: Method,
        concepts: Vec<String>,
        n_classes: usize,
        layers: Vec<String>,
        runs: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> Result<f64>,
    ) -> Result<Self> {
        let mut scores = Vec::with_capacity(concepts.len() * n_classes * layers.len() * runs);
        for c in 0..concepts.len() {
            for k in 0..n_classes {
                for l in 0..layers.len() {
                    for r in 0..runs {
                        scores.push(f(c, k, l, r)?);
                    }
                }
            }
        }
        Self::from_scores(method, concepts, n_classes, layers, runs, scores)
    }

    pub fn from_scores(
        method: Method,
        concepts: Vec<String>,
        n_classes: usize,
        layers: Vec<String>,
        runs: usize,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let expected = concepts.len() * n_classes * layers.len() * runs;
        if scores.len() != expected {
            return Err(GcavError::invalid(
                "score_table",
                format!("{} scores for a grid of {expected}", scores.len()),
            ));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(GcavError::invalid(
                "score_table",
                format!("score {bad} outside [0, 1]"),
            ));
        }
        Ok(Self {
            method,
            concepts,
            n_classes,
            layers,
            runs,
            scores,
        })
    }

    fn index(&self, c: usize, k: usize, l: usize, r: usize) -> usize {
        ((c * self.n_classes + k) * self.layers.len() + l) * self.runs + r
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, c: usize, k: usize, l: usize, r: usize) -> f64 {
        self.scores[self.index(c, k, l, r)]
    }

    pub fn concept_index(&self, id: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| GcavError::UnknownConcept(id.to_string()))
    }

    pub fn layer_index(&self, layer: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l == layer)
            .ok_or_else(|| GcavError::UnknownLayer(layer.to_string()))
    }

    /// Mean over runs for one (concept, class, layer) cell.
    pub fn run_mean(&self, c: usize, k: usize, l: usize) -> f64 {
        let i = self.index(c, k, l, 0);
        self.scores[i..i + self.runs].iter().sum::<f64>() / self.runs as f64
    }

    /// Per-layer run means for (concept, class).
    pub fn layer_series(&self, c: usize, k: usize) -> Vec<f64> {
        (0..self.layers.len())
            .map(|l| self.run_mean(c, k, l))
            .collect()
    }

    /// Per-layer scores of a single run.
    pub fn run_series(&self, c: usize, k: usize, r: usize) -> Vec<f64> {
        (0..self.layers.len())
            .map(|l| self.get(c, k, l, r))
            .collect()
    }

    pub fn same_grid(&self, other: &ScoreTable) -> bool {
        self.concepts == other.concepts
            && self.n_classes == other.n_classes
            && self.layers == other.layers
            && self.runs == other.runs
    }

    pub fn entries(&self) -> impl Iterator<Item = ScoreEntry<'_>> {
        (0..self.concepts.len()).flat_map(move |c| {
            (0..self.n_classes).flat_map(move |k| {
                (0..self.layers.len()).flat_map(move |l| {
                    (0..self.runs).map(move |r| ScoreEntry {
                        concept: &self.concepts[c],
                        class: k,
                        layer: &self.layers[l],
                        run: r,
                        method: self.method,
                        score: self.get(c, k, l, r),
                    })
                })
            })
        })
    }
}

/// Writes `concept,class,layer,run,method,score` rows for every table.
pub fn write_scores_csv<W: Write>(tables: &[&ScoreTable], mut w: W) -> std::io::Result<()> {
    writeln!(w, "concept,class,layer,run,method,score")?;
    for t in tables {
        for e in t.entries() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.concept, e.class, e.layer, e.run, e.method, e.score
            )?;
        }
    }
    Ok(())
}

/// Concept and random probe inputs used for CAV training.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBank {
    pub concepts: Vec<ProbeSet>,
    /// `runs + 1` random sets: run `r` uses set `r` as the negative.
    pub randoms: Vec<ProbeSet>,
}

/// All CAVs of a run, indexed by layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct CavSet {
    pub layers: Vec<String>,
    pub concepts: Vec<String>,
    pub runs: usize,
    /// `concept[l][c][r]`.
    pub concept: Vec<Vec<Vec<CavVector>>>,
    /// `random[l][r]`.
    pub random: Vec<Vec<CavVector>>,
}

impl CavSet {
    pub fn get(&self, l: usize, c: usize, r: usize) -> &CavVector {
        &self.concept[l][c][r]
    }
}

enum Job<'a> {
    Concept {
        l: usize,
        c: usize,
        r: usize,
        set: &'a ProbeSet,
    },
    Random {
        l: usize,
        r: usize,
    },
}

fn cav_jobs<'a>(layers: usize, concepts: &'a [ProbeSet], runs: usize) -> Vec<Job<'a>> {
    let mut jobs = Vec::new();
    for l in 0..layers {
        for (c, set) in concepts.iter().enumerate() {
            for r in 0..runs {
                jobs.push(Job::Concept { l, c, r, set });
            }
        }
        for r in 0..runs {
            jobs.push(Job::Random { l, r });
        }
    }
    jobs
}

/// Trains every concept CAV (concept set vs random set `r`) and every random
/// CAV (random `r` vs random `(r+1) mod (runs+1)`) at every layer.
pub fn train_cav_set(
    model: &TargetModel,
    bank: &ProbeBank,
    layers: &[String],
    runs: usize,
    opts: &CavTraining,
    threads: usize,
) -> Result<CavSet> {
    if bank.randoms.len() < runs + 1 {
        return Err(GcavError::invalid(
            "train_cav_set",
            format!(
                "{} random sets for {runs} runs (need runs + 1)",
                bank.randoms.len()
            ),
        ));
    }
    // Activations are shared by many jobs, so compute them once.
    let acts = |sets: &[ProbeSet]| -> Result<Vec<Vec<Tensor>>> {
        layers
            .iter()
            .map(|l| {
                sets.iter()
                    .map(|s| model.activations(l, &s.examples))
                    .collect()
            })
            .collect()
    };
    let concept_acts = acts(&bank.concepts)?;
    let random_acts = acts(&bank.randoms)?;
    let n_rand = runs + 1;
    let jobs = cav_jobs(layers.len(), &bank.concepts, runs);
    let fits = par_map(&jobs, threads, |job| -> Result<CavVector> {
        Ok(match *job {
            Job::Concept { l, c, r, set } => {
                let fit = train_cav(&concept_acts[l][c], &random_acts[l][r], opts)?;
                CavVector {
                    concept_id: set.concept_id.clone().unwrap_or_default(),
                    kind: CavKind::Concept,
                    layer: layers[l].clone(),
                    run_index: r,
                    vector: fit.vector,
                    train_accuracy: fit.train_accuracy,
                }
            }
            Job::Random { l, r } => {
                let fit = train_cav(&random_acts[l][r], &random_acts[l][(r + 1) % n_rand], opts)?;
                CavVector {
                    concept_id: format!("random{r}"),
                    kind: CavKind::Random,
                    layer: layers[l].clone(),
                    run_index: r,
                    vector: fit.vector,
                    train_accuracy: fit.train_accuracy,
                }
            }
        })
    })?;
    let mut it = fits.into_iter();
    let mut concept = Vec::with_capacity(layers.len());
    let mut random = Vec::with_capacity(layers.len());
    for _ in layers {
        concept.push(
            (0..bank.concepts.len())
                .map(|_| it.by_ref().take(runs).collect())
                .collect(),
        );
        random.push(it.by_ref().take(runs).collect());
    }
    Ok(CavSet {
        layers: layers.to_vec(),
        concepts: bank
            .concepts
            .iter()
            .map(|s| s.concept_id.clone().unwrap_or_default())
            .collect(),
        runs,
        concept,
        random,
    })
}

/// TCAV grid from trained CAVs.
pub fn tcav_table(cavs: &CavSet, grads: &ClassGradients) -> Result<ScoreTable> {
    ScoreTable::from_fn(
        Method::Tcav,
        cavs.concepts.clone(),
        grads.n_classes,
        cavs.layers.clone(),
        cavs.runs,
        |c, k, l, r| tcav_from_gradients(grads.get(l, k), &cavs.get(l, c, r).vector),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub cavs: CavSet,
    pub table: ScoreTable,
}

/// CAV training plus the full TCAV grid.
pub fn run_baseline(
    model: &TargetModel,
    bank: &ProbeBank,
    grads: &ClassGradients,
    runs: usize,
    opts: &CavTraining,
    threads: usize,
) -> Result<Baseline> {
    let cavs = train_cav_set(model, bank, &grads.layers, runs, opts, threads)?;
    let table = tcav_table(&cavs, grads)?;
    Ok(Baseline { cavs, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_seven_of_ten() {
        let v = [1.0f32, 0.0];
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| {
                if i < 7 {
                    vec![0.5, i as f32]
                } else {
                    vec![-0.5, 1.0]
                }
            })
            .collect();
        let g = Tensor::from_rows(&rows).unwrap();
        assert_eq!(tcav_from_gradients(&g, &v).unwrap(), 0.7);
    }

    #[test]
    fn ties_count_as_negative() {
        let g = Tensor::from_rows(&[vec![0.0f32, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(tcav_from_gradients(&g, &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(tcav_from_gradients(&g, &[-1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_or_unnormalised_inputs_are_rejected() {
        assert!(tcav_from_gradients(&Tensor::zeros(&[0, 2]), &[1.0, 0.0]).is_err());
        let g = Tensor::ones(&[2, 2]);
        assert!(tcav_from_gradients(&g, &[2.0, 0.0]).is_err());
    }

    #[test]
    fn identical_sets_are_degenerate() {
        let x = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert!(matches!(
            train_cav(&x, &x, &CavTraining::default()),
            Err(GcavError::DegenerateCav { .. })
        ));
    }

    #[test]
    fn table_rejects_out_of_range_scores() {
        let r = ScoreTable::from_scores(
            Method::Tcav,
            vec!["c0".into()],
            1,
            vec!["L1".into()],
            1,
            vec![1.5],
        );
        assert!(r.is_err());
    }
}
