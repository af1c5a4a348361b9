//! TGCAV scoring, layer-wise stability statistics and comparison reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autoencoder::LayerAutoencoder;
use crate::cav::{tcav_from_gradients, tcav_score, ClassGradients, Method, ScoreTable};
use crate::error::{GcavError, Result};
use crate::fusion::GlobalCav;
use crate::probe::{TargetModel, World};
use crate::tensor::{normalized, Tensor};

fn decoder_for<'a>(decoders: &'a [LayerAutoencoder], layer: &str) -> Result<&'a LayerAutoencoder> {
    decoders
        .iter()
        .find(|d| d.layer == layer)
        .ok_or_else(|| GcavError::MissingArtifact(format!("ae/{layer}/dec")))
}

/// Unit-normalised decode of a global CAV at `layer`.
pub fn decoded_direction(
    gcav: &GlobalCav,
    decoders: &[LayerAutoencoder],
    layer: &str,
) -> Result<Vec<f32>> {
    let v = decoder_for(decoders, layer)?.decode(&Tensor::vector(gcav.z.clone()))?;
    Ok(normalized(v.data()))
}

/// TCAV of class `k` at `layer` along the decoded global CAV.
pub fn tgcav_score(
    model: &TargetModel,
    layer: &str,
    k: usize,
    x_k: &Tensor,
    gcav: &GlobalCav,
    decoders: &[LayerAutoencoder],
) -> Result<f64> {
    let v = decoded_direction(gcav, decoders, layer)?;
    tcav_score(model, layer, k, x_k, &v)
}

/// TGCAV grid; `gcavs` are in (concept, run) order.
pub fn tgcav_table(
    gcavs: &[GlobalCav],
    concepts: &[String],
    runs: usize,
    decoders: &[LayerAutoencoder],
    grads: &ClassGradients,
) -> Result<ScoreTable> {
    if gcavs.len() != concepts.len() * runs {
        return Err(GcavError::invalid(
            "tgcav_table",
            format!(
                "{} global CAVs for {} concepts × {runs} runs",
                gcavs.len(),
                concepts.len()
            ),
        ));
    }
    // directions[l][c·R + r]
    let directions: Vec<Vec<Vec<f32>>> = grads
        .layers
        .iter()
        .map(|layer| {
            gcavs
                .iter()
                .map(|g| decoded_direction(g, decoders, layer))
                .collect()
        })
        .collect::<Result<_>>()?;
    ScoreTable::from_fn(
        Method::Tgcav,
        concepts.to_vec(),
        grads.n_classes,
        grads.layers.clone(),
        runs,
        |c, k, l, r| tcav_from_gradients(grads.get(l, k), &directions[l][c * runs + r]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: f64,
    /// Population standard deviation over layers.
    pub std: f64,
    /// `std / mean`; `None` when the mean is zero.
    pub cv: Option<f64>,
    /// `(max − min) / mean`; `None` when the mean is zero.
    pub rr: Option<f64>,
    pub iqr: f64,
    pub series: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `std / mean`, undefined for a non-positive mean.
pub fn coefficient_of_variation(mean: f64, std: f64) -> Option<f64> {
    (mean > 0.0).then(|| std / mean)
}

/// Mean, population Std, CV, RR and IQR of a per-layer score series.
pub fn layer_stats(series: &[f64]) -> Result<LayerStats> {
    if series.len() < 2 {
        return Err(GcavError::invalid("layer_stats", "need at least 2 layers"));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let std = (series.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[sorted.len() - 1] - sorted[0];
    let defined = mean > 0.0;
    Ok(LayerStats {
        mean,
        std,
        cv: coefficient_of_variation(mean, std),
        rr: defined.then(|| range / mean),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        series: series.to_vec(),
    })
}

/// `100·(after − before)/before` on unrounded inputs.
pub fn percent_change(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| 100.0 * (after - before) / before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: usize,
    pub concept: String,
    pub relevant: bool,
    pub tcav: LayerStats,
    pub tgcav: LayerStats,
    pub delta_std: f64,
    pub delta_cv: Option<f64>,
    pub delta_rr: Option<f64>,
    /// Population Std over layers of each individual run.
    pub tcav_run_std: Vec<f64>,
    pub tgcav_run_std: Vec<f64>,
}

impl ReportRow {
    /// TGCAV strictly below TCAV on Std, CV and RR (undefined values fail).
    pub fn improves_all(&self) -> bool {
        let below = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(t), Some(g)) if g < t);
        self.tgcav.std < self.tcav.std
            && below(self.tcav.cv, self.tgcav.cv)
            && below(self.tcav.rr, self.tgcav.rr)
    }

    /// `1 − Std(TGCAV)/Std(TCAV)`; `None` when the baseline Std is zero.
    pub fn std_reduction(&self) -> Option<f64> {
        (self.tcav.std > 0.0).then(|| 1.0 - self.tgcav.std / self.tcav.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub method: String,
    pub scope: String,
    pub before: f64,
    pub after: f64,
    pub pct_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: String,
    pub layers: Vec<String>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub attack: Vec<AttackRow>,
}

fn run_stds(t: &ScoreTable, c: usize, k: usize) -> Result<Vec<f64>> {
    (0..t.runs)
        .map(|r| Ok(layer_stats(&t.run_series(c, k, r))?.std))
        .collect()
}

/// One row per (class, concept); scores are averaged over runs before the
/// layer statistics are taken.
pub fn build_report(
    model: &str,
    baseline: &ScoreTable,
    tgcav: &ScoreTable,
    world: &World,
) -> Result<ComparisonReport> {
    if !baseline.same_grid(tgcav) {
        return Err(GcavError::invalid(
            "build_report",
            "TCAV and TGCAV tables cover different grids",
        ));
    }
    let mut rows = Vec::with_capacity(baseline.n_classes * baseline.concepts.len());
    for k in 0..baseline.n_classes {
        for (c, concept) in baseline.concepts.iter().enumerate() {
            let relevant = world
                .concept(concept)?
                .relevance
                .get(k)
                .copied()
                .unwrap_or(false);
            let t = layer_stats(&baseline.layer_series(c, k))?;
            let g = layer_stats(&tgcav.layer_series(c, k))?;
            let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
            rows.push(ReportRow {
                class: k,
                concept: concept.clone(),
                relevant,
                delta_std: g.std - t.std,
                delta_cv: diff(t.cv, g.cv),
                delta_rr: diff(t.rr, g.rr),
                tcav_run_std: run_stds(baseline, c, k)?,
                tgcav_run_std: run_stds(tgcav, c, k)?,
                tcav: t,
                tgcav: g,
            });
        }
    }
    Ok(ComparisonReport {
        model: model.to_string(),
        layers: baseline.layers.clone(),
        rows,
        attack: Vec::new(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// `class,concept,method,mean,std,cv,rr`, two lines per report row.
pub fn write_report_csv<W: Write>(report: &ComparisonReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "class,concept,method,mean,std,cv,rr")?;
    for row in &report.rows {
        for (method, s) in [(Method::Tcav, &row.tcav), (Method::Tgcav, &row.tgcav)] {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                row.class,
                row.concept,
                method,
                s.mean,
                s.std,
                opt(s.cv),
                opt(s.rr)
            )?;
        }
    }
    Ok(())
}

pub fn write_attack_csv<W: Write>(rows: &[AttackRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,scope,before,after,pct_change")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.method,
            r.scope,
            r.before,
            r.after,
            opt(r.pct_change)
        )?;
    }
    Ok(())
}

/// Grouped bar chart of per-layer mean scores: one panel per class, one bar
/// group per concept, one bar per layer.
pub fn render_svg(report: &ComparisonReport, method: Method) -> String {
    const BAR: f64 = 10.0;
    const GAP: f64 = 14.0;
    const PANEL_H: f64 = 140.0;
    const LEFT: f64 = 40.0;
    let n_layers = report.layers.len().max(1);
    let classes: Vec<usize> = {
        let mut ks: Vec<usize> = report.rows.iter().map(|r| r.class).collect();
        ks.dedup();
        ks
    };
    let per_class = report
        .rows
        .iter()
        .filter(|r| Some(&r.class) == classes.first())
        .count()
        .max(1);
    let width = LEFT + per_class as f64 * (n_layers as f64 * BAR + GAP) + 20.0;
    let height = classes.len() as f64 * (PANEL_H + 30.0) + 30.0;
    let shades: Vec<String> = (0..n_layers)
        .map(|l| {
            let t = 40 + (l * 160) / n_layers.max(2).saturating_sub(1).max(1);
            format!("rgb({},{},{})", 30, t.min(200), 200 - t.min(160))
        })
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="16">{} per-layer mean score</text>"#,
        method
    );
    for (pi, &k) in classes.iter().enumerate() {
        let top = 30.0 + pi as f64 * (PANEL_H + 30.0);
        let base = top + PANEL_H;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">class {k}</text>"#, top + 10.0);
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#,
            width - 10.0
        );
        for (gi, row) in report.rows.iter().filter(|r| r.class == k).enumerate() {
            let stats = match method {
                Method::Tcav => &row.tcav,
                Method::Tgcav => &row.tgcav,
            };
            let x0 = LEFT + gi as f64 * (n_layers as f64 * BAR + GAP);
            for (l, &v) in stats.series.iter().enumerate() {
                let h = v * (PANEL_H - 20.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{BAR}" height="{h:.2}" fill="{}"><title>{} {} {:.3}</title></rect>"#,
                    x0 + l as f64 * BAR,
                    base - h,
                    shades[l],
                    row.concept,
                    report.layers.get(l).map_or("", String::as_str),
                    v
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                x0,
                base + 12.0,
                row.concept
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rr_hand_values() {
        let s = layer_stats(&[0.2, 0.4, 0.6]).unwrap();
        assert!((s.rr.unwrap() - 1.0).abs() < 1e-12);
        let c = layer_stats(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(c.rr, Some(0.0));
        assert_eq!(c.std, 0.0);
    }

    #[test]
    fn zero_mean_leaves_ratios_undefined() {
        let s = layer_stats(&[0.0, 0.0]).unwrap();
        assert_eq!(s.cv, None);
        assert_eq!(s.rr, None);
        assert!(layer_stats(&[0.3]).is_err());
    }

    #[test]
    fn percent_change_uses_unrounded_inputs() {
        assert!((percent_change(0.52, 0.96).unwrap() - 84.615_384_615).abs() < 1e-6);
        assert_eq!(percent_change(0.0, 0.4), None);
    }

    #[test]
    fn iqr_interpolates() {
        let s = layer_stats(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((s.iqr - 0.15).abs() < 1e-12);
    }
}
