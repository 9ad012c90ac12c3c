//! Displacement metrics and per-scene curve aggregation.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("trajectory length mismatch: pred {pred} vs gt {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("scene {scene} is missing a value for fraction {fraction}")]
    MissingFraction { scene: String, fraction: f64 },
}

/// Mean Euclidean error over all future steps.
pub fn ade(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Euclidean error at the final step only.
pub fn fde(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let p = pred.last().unwrap();
    let g = gt.last().unwrap();
    Ok(((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ade_mean: f64,
    pub fde_mean: f64,
    pub n_windows: usize,
}

/// Aggregate per-window (prediction, ground truth) pairs.
pub fn report_from_pairs(pairs: &[(Vec<(f64, f64)>, Vec<(f64, f64)>)]) -> EvalReport {
    let n = pairs.len();
    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    for (pred, gt) in pairs {
        ade_sum += ade(pred, gt).expect("pair lengths checked upstream");
        fde_sum += fde(pred, gt).expect("pair lengths checked upstream");
    }
    EvalReport {
        ade_mean: ade_sum / n.max(1) as f64,
        fde_mean: fde_sum / n.max(1) as f64,
        n_windows: n,
    }
}

/// Evaluate any window-level predictor over a test set.
pub fn evaluate<F>(
    predict: F,
    windows: &[crate::core::TrajectoryWindow],
) -> Result<EvalReport, MetricError>
where
    F: Fn(&crate::core::TrajectoryWindow) -> Vec<(f64, f64)>,
{
    if windows.is_empty() {
        return Err(MetricError::EmptyTestSet);
    }
    let pairs: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> =
        windows.iter().map(|w| (predict(w), w.future.clone())).collect();
    Ok(report_from_pairs(&pairs))
}

/// One scene's ADE-vs-fraction curve plus its normalization divisor (the
/// scene's non-adaptive baseline ADE).
#[derive(Debug, Clone)]
pub struct SceneCurve {
    pub scene: String,
    /// (fraction, ade) points, any order.
    pub points: Vec<(f64, f64)>,
    pub baseline_ade: f64,
}

/// Normalized aggregate curve: each scene divided by its baseline, then
/// averaged pointwise. Also reports the per-fraction standard deviation.
pub fn normalize_curves(
    curves: &[SceneCurve],
    fractions: &[f64],
) -> Result<Vec<(f64, f64, f64)>, MetricError> {
    assert!(!curves.is_empty());
    let mut per_fraction: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for fraction in fractions {
        let key = fraction.to_bits();
        for curve in curves {
            let value = curve
                .points
                .iter()
                .find(|(f, _)| f == fraction)
                .map(|(_, a)| a / curve.baseline_ade)
                .ok_or_else(|| MetricError::MissingFraction {
                    scene: curve.scene.clone(),
                    fraction: *fraction,
                })?;
            per_fraction.entry(key).or_default().push(value);
        }
    }
    Ok(fractions
        .iter()
        .map(|fraction| {
            let vals = &per_fraction[&fraction.to_bits()];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (*fraction, mean, var.sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ade_zero_when_equal() {
        let pts = vec![(1.0, 2.0), (3.0, 4.0)];
        assert_eq!(ade(&pts, &pts).unwrap(), 0.0);
        assert_eq!(fde(&pts, &pts).unwrap(), 0.0);
    }

    #[test]
    fn ade_three_four_five() {
        let gt = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let pred: Vec<(f64, f64)> = gt.iter().map(|p| (p.0 + 3.0, p.1 + 4.0)).collect();
        assert!((ade(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert!((fde(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fde_only_final_point() {
        let t = 4;
        let gt = vec![(0.0, 0.0); t];
        let mut pred = gt.clone();
        pred[t - 1] = (0.0, 2.0);
        assert!((fde(&pred, &gt).unwrap() - 2.0).abs() < 1e-12);
        assert!((ade(&pred, &gt).unwrap() - 2.0 / t as f64).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let pred: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))).collect();
            let gt: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))).collect();
            // Brute-force loop, independent of the iterator pipeline above.
            let mut sum = 0.0;
            for k in 0..n {
                let dx = pred[k].0 - gt[k].0;
                let dy = pred[k].1 - gt[k].1;
                sum += (dx * dx + dy * dy).sqrt();
            }
            assert!((ade(&pred, &gt).unwrap() - sum / n as f64).abs() < 1e-9);
            let dx = pred[n - 1].0 - gt[n - 1].0;
            let dy = pred[n - 1].1 - gt[n - 1].1;
            assert!((fde(&pred, &gt).unwrap() - (dx * dx + dy * dy).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(ade(&[(0.0, 0.0)], &[(0.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(fde(&[(0.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn translation_invariance() {
        let gt = vec![(1.0, 1.0), (2.0, 3.0)];
        let pred = vec![(0.5, 1.5), (2.5, 2.0)];
        let shift = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
            pts.iter().map(|p| (p.0 + 11.0, p.1 - 7.0)).collect()
        };
        assert!((ade(&pred, &gt).unwrap() - ade(&shift(&pred), &shift(&gt)).unwrap()).abs() < 1e-12);
        // Symmetry in (pred, gt).
        assert_eq!(ade(&pred, &gt).unwrap(), ade(&gt, &pred).unwrap());
    }

    #[test]
    fn normalize_single_scene_is_ratio() {
        let curves = vec![SceneCurve {
            scene: "a".into(),
            points: vec![(0.02, 4.0), (0.8, 2.0)],
            baseline_ade: 4.0,
        }];
        let out = normalize_curves(&curves, &[0.02, 0.8]).unwrap();
        assert_eq!(out[0], (0.02, 1.0, 0.0));
        assert_eq!(out[1], (0.8, 0.5, 0.0));
    }

    #[test]
    fn normalize_two_scene_mean() {
        let curves = vec![
            SceneCurve { scene: "a".into(), points: vec![(0.8, 2.0)], baseline_ade: 4.0 },
            SceneCurve { scene: "b".into(), points: vec![(0.8, 9.0)], baseline_ade: 9.0 },
        ];
        let out = normalize_curves(&curves, &[0.8]).unwrap();
        // Mean of 0.5 and 1.0.
        assert!((out[0].1 - 0.75).abs() < 1e-12);
        assert!((out[0].2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn normalize_identical_scenes_equals_either() {
        let c = SceneCurve { scene: "a".into(), points: vec![(0.5, 3.0)], baseline_ade: 6.0 };
        let mut c2 = c.clone();
        c2.scene = "b".into();
        let out = normalize_curves(&[c, c2], &[0.5]).unwrap();
        assert_eq!(out[0].1, 0.5);
        assert_eq!(out[0].2, 0.0);
    }

    #[test]
    fn normalize_missing_fraction_errors() {
        let curves =
            vec![SceneCurve { scene: "a".into(), points: vec![(0.8, 2.0)], baseline_ade: 4.0 }];
        assert!(matches!(
            normalize_curves(&curves, &[0.02]),
            Err(MetricError::MissingFraction { .. })
        ));
    }

    #[test]
    fn evaluate_empty_errors_and_is_order_independent() {
        let mk = |x: f64| crate::core::TrajectoryWindow {
            identity: 0,
            scene: "s".into(),
            past: vec![(0.0, 0.0); 2],
            future: vec![(x, 0.0), (x + 1.0, 0.0)],
            start_frame: 0,
        };
        let predict = |w: &crate::core::TrajectoryWindow| vec![(w.future[0].0 + 1.0, 0.0); 2];
        assert!(matches!(evaluate(predict, &[]), Err(MetricError::EmptyTestSet)));
        let a = evaluate(predict, &[mk(1.0), mk(5.0)]).unwrap();
        let b = evaluate(predict, &[mk(5.0), mk(1.0)]).unwrap();
        assert_eq!(a.ade_mean, b.ade_mean);
        assert_eq!(a.n_windows, 2);
    }
}
