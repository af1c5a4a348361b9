//! Published summary statistics recomputed from their own printed inputs.

use gcav::eval::{coefficient_of_variation, percent_change};

const PUBLISHED: &str = include_str!("fixtures/published_stability.csv");

#[derive(Debug)]
struct Row {
    model: String,
    class: String,
    concept: String,
    method: String,
    mean: f64,
    std: f64,
    cv: f64,
}

fn rows() -> Vec<Row> {
    PUBLISHED
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f[i].parse::<f64>().unwrap();
            Row {
                model: f[0].into(),
                class: f[1].into(),
                concept: f[2].into(),
                method: f[3].into(),
                mean: num(4),
                std: num(5),
                cv: num(6),
            }
        })
        .collect()
}

fn cv_error(r: &Row) -> f64 {
    (coefficient_of_variation(r.mean, r.std).unwrap() - r.cv).abs()
}

#[test]
fn fixture_has_27_rows_per_method() {
    let rows = rows();
    assert_eq!(rows.len(), 54);
    for m in ["TCAV", "TGCAV"] {
        assert_eq!(rows.iter().filter(|r| r.method == m).count(), 27);
    }
}

/// Pins the five published rows whose CV is more than 0.001 away from the
/// ratio of the printed Mean and Std.
#[test]
fn cv_mismatches_are_exactly_the_known_rows() {
    let off: Vec<String> = rows()
        .iter()
        .filter(|r| cv_error(r) > 0.001 + 1e-12)
        .map(|r| format!("{}/{}/{}/{}", r.model, r.class, r.concept, r.method))
        .collect();
    assert_eq!(
        off,
        [
            "GoogleNet/spider_web/blotchy/TGCAV",
            "GoogleNet/zebra/zigzagged/TGCAV",
            "MobileNetV2/honeycomb/honeycombed/TGCAV",
            "MobileNetV2/honeycomb/paisley/TCAV",
            "MobileNetV2/honeycomb/paisley/TGCAV",
        ]
    );
}

/// Every published CV is reachable from some unrounded Mean and Std that
/// round to the printed three decimals.
#[test]
fn every_cv_fits_the_rounding_intervals() {
    for r in rows() {
        let h = 0.0005;
        let lo = (r.std - h) / (r.mean + h);
        let hi = (r.std + h) / (r.mean - h);
        assert!(r.cv + h >= lo && r.cv - h <= hi, "{r:?}: [{lo}, {hi}]");
    }
}

#[test]
fn attack_percent_change_convention() {
    let pct = percent_change(0.52, 0.96).unwrap();
    assert!((pct - 84.6).abs() <= 0.1, "{pct}");
    // The printed +84.61 is not the ratio of the printed two-decimal scores.
    assert!((pct - 84.615_384_6).abs() < 1e-6);
    assert!((pct - 84.61).abs() > 1e-3);

    // Each printed change lies inside the range spanned by scores that round
    // to the printed values.
    for (before, after, printed) in [
        (0.52, 0.96, 84.61),
        (0.46, 0.75, 61.77),
        (0.38, 0.49, 28.49),
        (0.37, 0.53, 42.63),
    ] {
        let h = 0.005;
        let lo = percent_change(before + h, after - h).unwrap();
        let hi = percent_change(before - h, after + h).unwrap();
        assert!(
            (lo..=hi).contains(&printed),
            "{before}→{after}: {printed} outside [{lo}, {hi}]"
        );
    }
}
