use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalResult};
use crate::imaging::{FoveaAnnotation, Point};

/// Success thresholds as multiples of the optic-disc radius.
pub const R_THRESHOLDS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub count: usize,
    /// Percent successes at each of [`R_THRESHOLDS`].
    pub accuracies: [f64; 4],
    pub mean_error_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RRuleReport {
    pub thresholds: [f64; 4],
    /// Percent successes at each of [`R_THRESHOLDS`].
    pub accuracies: [f64; 4],
    pub mean_error_px: f64,
    /// Per-sample Euclidean errors at original resolution.
    pub distances: Vec<f64>,
    pub radii: Vec<f64>,
    pub strata: Option<BTreeMap<String, StratumReport>>,
}

fn summarize(distances: &[f64], radii: &[f64]) -> ([f64; 4], f64) {
    let n = distances.len();
    if n == 0 {
        return ([0.0; 4], 0.0);
    }
    let acc = R_THRESHOLDS.map(|t| {
        let hits = distances.iter().zip(radii).filter(|(d, r)| **d <= t * **r).count();
        100.0 * hits as f64 / n as f64
    });
    (acc, distances.iter().sum::<f64>() / n as f64)
}

/// Success at `t R` iff the distance is at most `t R`.
pub fn r_rule(preds: &[Point], gts: &[FoveaAnnotation]) -> EvalResult<RRuleReport> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    if let Some(i) = gts.iter().position(|g| !(g.od_radius > 0.0 && g.od_radius.is_finite())) {
        return Err(EvalError::InvalidRadius { index: i, radius: gts[i].od_radius });
    }
    let distances: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.distance(g.fovea)).collect();
    let radii: Vec<f64> = gts.iter().map(|g| g.od_radius).collect();
    let (accuracies, mean_error_px) = summarize(&distances, &radii);
    Ok(RRuleReport { thresholds: R_THRESHOLDS, accuracies, mean_error_px, distances, radii, strata: None })
}

/// [`r_rule`] plus per-label aggregates (for example normal and diseased).
pub fn r_rule_stratified(preds: &[Point], gts: &[FoveaAnnotation], labels: &[String]) -> EvalResult<RRuleReport> {
    let mut report = r_rule(preds, gts)?;
    if labels.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: labels.len(), gts: gts.len() });
    }
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((label, d), r) in labels.iter().zip(&report.distances).zip(&report.radii) {
        let e = groups.entry(label.clone()).or_default();
        e.0.push(*d);
        e.1.push(*r);
    }
    report.strata = Some(
        groups
            .into_iter()
            .map(|(k, (d, r))| {
                let (accuracies, mean_error_px) = summarize(&d, &r);
                (k, StratumReport { count: d.len(), accuracies, mean_error_px })
            })
            .collect(),
    );
    Ok(report)
}

impl RRuleReport {
    pub fn write_json(&self, path: &Path) -> EvalResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per sample: id, prediction, truth, radius, distance and
    /// success flags at each threshold.
    pub fn write_csv(&self, path: &Path, ids: &[String], preds: &[Point], gts: &[FoveaAnnotation]) -> EvalResult<()> {
        let n = self.distances.len();
        if ids.len() != n || preds.len() != n || gts.len() != n {
            return Err(EvalError::LengthMismatch { preds: ids.len().min(preds.len()), gts: n });
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "id",
            "pred_x",
            "pred_y",
            "fovea_x",
            "fovea_y",
            "od_radius_px",
            "distance_px",
            "ok_quarter_r",
            "ok_half_r",
            "ok_1r",
            "ok_2r",
        ])?;
        for i in 0..n {
            let (d, r) = (self.distances[i], self.radii[i]);
            let mut row = vec![
                ids[i].clone(),
                preds[i].x.to_string(),
                preds[i].y.to_string(),
                gts[i].fovea.x.to_string(),
                gts[i].fovea.y.to_string(),
                r.to_string(),
                d.to_string(),
            ];
            row.extend(R_THRESHOLDS.iter().map(|t| u8::from(d <= t * r).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x: f64, y: f64, r: f64) -> FoveaAnnotation {
        FoveaAnnotation { fovea: Point::new(x, y), od_radius: r, original_size: (1000, 1000) }
    }

    #[test]
    fn nineteen_pixels_at_radius_38() {
        let rep = r_rule(&[Point::new(119.0, 100.0)], &[gt(100.0, 100.0, 38.0)]).unwrap();
        assert_eq!(rep.accuracies, [0.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn zero_distance_and_inclusive_boundary() {
        let rep = r_rule(&[Point::new(5.0, 5.0), Point::new(13.0, 5.0)], &[gt(5.0, 5.0, 8.0), gt(5.0, 5.0, 8.0)]).unwrap();
        assert_eq!(rep.accuracies, [50.0, 50.0, 100.0, 100.0]);
        assert_eq!(rep.mean_error_px, 4.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(r_rule(&[Point::new(0.0, 0.0)], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn strata_partition_samples() {
        let preds = [Point::new(0.0, 0.0), Point::new(50.0, 0.0), Point::new(0.0, 0.0)];
        let gts = [gt(0.0, 0.0, 10.0), gt(0.0, 0.0, 10.0), gt(3.0, 4.0, 10.0)];
        let labels = ["normal", "diseased", "normal"].map(String::from);
        let rep = r_rule_stratified(&preds, &gts, &labels).unwrap();
        let s = rep.strata.unwrap();
        assert_eq!(s["normal"].count, 2);
        assert_eq!(s["normal"].mean_error_px, 2.5);
        assert_eq!(s["diseased"].accuracies, [0.0; 4]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(cases in proptest::collection::vec((0.0..500.0f64, 0.0..500.0f64, 0.0..500.0f64, 0.0..500.0f64, 1.0..80.0f64), 1..50)) {
            let preds: Vec<Point> = cases.iter().map(|c| Point::new(c.0, c.1)).collect();
            let gts: Vec<FoveaAnnotation> = cases.iter().map(|c| gt(c.2, c.3, c.4)).collect();
            let rep = r_rule(&preds, &gts).unwrap();
            for (k, t) in R_THRESHOLDS.iter().enumerate() {
                let hits = cases.iter().filter(|c| ((c.0 - c.2).powi(2) + (c.1 - c.3).powi(2)).sqrt() <= t * c.4).count();
                prop_assert!((rep.accuracies[k] - 100.0 * hits as f64 / cases.len() as f64).abs() < 1e-9);
            }
            prop_assert!(rep.accuracies.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
