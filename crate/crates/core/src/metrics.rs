//! Evaluation errors and their aggregation.
//!
//! All errors are computed against the ground truth: rotation angle, relative
//! translation, point matching, relative focal, reprojection (normalized by the
//! ground-truth box diagonal) and box IoU.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_iou, geodesic_distance, BBox, ModelPoints, ParamState};

/// One prediction with everything needed to score it.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub pred: ParamState,
    pub gt: ParamState,
    pub points: ModelPoints,
    pub gt_bbox: BBox,
    /// Image diagonal in pixels.
    pub image_diagonal: f64,
    pub pred_bbox: Option<BBox>,
}

impl EvalPair {
    pub fn validate(&self) -> Result<()> {
        self.pred.validate()?;
        self.gt.validate()?;
        if !(self.image_diagonal > 0.0 && self.image_diagonal.is_finite()) {
            return Err(Error::invalid("image diagonal", self.image_diagonal));
        }
        if !(self.gt_bbox.diagonal() > 0.0) {
            return Err(Error::invalid("ground-truth box diagonal", self.gt_bbox.diagonal()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub e_r: f64,
    pub e_t: f64,
    pub e_rt: f64,
    pub e_f: f64,
    pub e_p: f64,
    pub iou: Option<f64>,
}

pub fn err_rot(pair: &EvalPair) -> f64 {
    geodesic_distance(&pair.pred.rotation, &pair.gt.rotation)
}

fn gt_translation_norm(gt: &ParamState) -> Result<f64> {
    let n = gt.translation.norm();
    if !(n > 0.0) {
        return Err(Error::invalid("ground-truth translation norm", n));
    }
    Ok(n)
}

pub fn err_trans(pair: &EvalPair) -> Result<f64> {
    let n = gt_translation_norm(&pair.gt)?;
    Ok((pair.pred.translation - pair.gt.translation).norm() / n)
}

pub fn err_pose(pair: &EvalPair) -> Result<f64> {
    let n = gt_translation_norm(&pair.gt)?;
    let sum: f64 = pair
        .points
        .iter()
        .map(|p| (pair.pred.transform(p) - pair.gt.transform(p)).norm())
        .sum();
    let avg = sum / pair.points.len() as f64;
    Ok(pair.gt_bbox.diagonal() / pair.image_diagonal * avg / n)
}

pub fn err_focal(pair: &EvalPair) -> f64 {
    (pair.gt.focal - pair.pred.focal).abs() / pair.gt.focal
}

/// Infinite when a point falls behind the predicted camera.
pub fn err_proj(pair: &EvalPair) -> Result<f64> {
    let gt = pair.gt.project_points(&pair.points)?;
    let pred = match pair.pred.project_points(&pair.points) {
        Ok(p) => p,
        Err(Error::NonPositiveDepth { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let sum: f64 = pred.iter().zip(&gt).map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / pred.len() as f64 / pair.gt_bbox.diagonal())
}

pub fn evaluate_pair(pair: &EvalPair) -> Result<MetricRecord> {
    pair.validate()?;
    Ok(MetricRecord {
        e_r: err_rot(pair),
        e_t: err_trans(pair)?,
        e_rt: err_pose(pair)?,
        e_f: err_focal(pair),
        e_p: err_proj(pair)?,
        iou: pair.pred_bbox.map(|b| bbox_iou(&b, &pair.gt_bbox)),
    })
}

/// Scores pairs in parallel; results keep the input order.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<Vec<MetricRecord>> {
    pairs.par_iter().map(evaluate_pair).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub rotation_rad: f64,
    pub projection: f64,
    pub iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rotation_rad: PI / 6.0,
            projection: 0.1,
            iou: 0.5,
        }
    }
}

/// Medians and accuracies, in the usual table order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median_e_r: f64,
    pub median_e_t: f64,
    pub median_e_rt: f64,
    pub median_e_f: f64,
    /// `None` when every reprojection error is infinite.
    pub median_e_p: Option<f64>,
    pub acc_r: f64,
    pub acc_p: f64,
    /// `None` when no record carries an IoU.
    pub acc_d: Option<f64>,
    pub thresholds: Thresholds,
}

/// Lower median: index `ceil(n/2) - 1` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[v.len().div_ceil(2) - 1])
}

fn fraction(records: &[MetricRecord], pred: impl Fn(&MetricRecord) -> bool) -> f64 {
    records.iter().filter(|r| pred(r)).count() as f64 / records.len() as f64
}

pub fn aggregate(records: &[MetricRecord], thresholds: &Thresholds) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no metric records"));
    }
    let col = |f: fn(&MetricRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let median = |f: fn(&MetricRecord) -> f64| lower_median(&col(f)).expect("non-empty");
    let e_p = col(|r| r.e_p);
    let median_e_p = if e_p.iter().all(|v| v.is_infinite()) {
        None
    } else {
        lower_median(&e_p)
    };
    let ious: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();
    Ok(Summary {
        count: records.len(),
        median_e_r: median(|r| r.e_r),
        median_e_t: median(|r| r.e_t),
        median_e_rt: median(|r| r.e_rt),
        median_e_f: median(|r| r.e_f),
        median_e_p,
        acc_r: fraction(records, |r| r.e_r <= thresholds.rotation_rad),
        acc_p: fraction(records, |r| r.e_p <= thresholds.projection),
        acc_d: (!ious.is_empty())
            .then(|| ious.iter().filter(|&&v| v > thresholds.iou).count() as f64 / ious.len() as f64),
        thresholds: *thresholds,
    })
}

/// Bin edges of the emitted histograms. Values past the last edge go to an
/// overflow bin.
pub fn histogram_edges(metric: &str) -> Vec<f64> {
    match metric {
        "e_r" => (0..=18).map(|i| i as f64 * PI / 18.0).collect(),
        "iou" => (0..=10).map(|i| i as f64 / 10.0).collect(),
        _ => (0..=20).map(|i| i as f64 / 20.0).collect(),
    }
}

pub const HISTOGRAM_METRICS: [&str; 6] = ["e_r", "e_t", "e_rt", "e_f", "e_p", "iou"];

fn metric_value(r: &MetricRecord, metric: &str) -> Option<f64> {
    match metric {
        "e_r" => Some(r.e_r),
        "e_t" => Some(r.e_t),
        "e_rt" => Some(r.e_rt),
        "e_f" => Some(r.e_f),
        "e_p" => Some(r.e_p),
        "iou" => r.iou,
        _ => None,
    }
}

/// Counts per bin `[lo, hi)`; the last entry counts values at or past the
/// final edge (for IoU the final bin is closed instead).
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; edges.len()];
    let last = edges.len() - 1;
    for &v in values {
        let bin = edges[1..].iter().position(|&hi| v < hi).unwrap_or(last);
        counts[bin] += 1;
    }
    counts
}

/// CSV histograms of every metric, bin edges listed in `#` header lines.
pub fn histograms_csv(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for m in HISTOGRAM_METRICS {
        let edges: Vec<String> = histogram_edges(m).iter().map(|e| format!("{e}")).collect();
        writeln!(out, "# {m} edges: {}", edges.join(",")).unwrap();
    }
    out.push_str("metric,bin_lo,bin_hi,count\n");
    for m in HISTOGRAM_METRICS {
        let edges = histogram_edges(m);
        let values: Vec<f64> = records.iter().filter_map(|r| metric_value(r, m)).collect();
        for (i, c) in histogram(&values, &edges).into_iter().enumerate() {
            let hi = edges.get(i + 1).map_or("inf".to_string(), |e| format!("{e}"));
            writeln!(out, "{m},{},{hi},{c}", edges[i]).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn pair(pred: ParamState, gt: ParamState, points: Vec<Vector3<f64>>) -> EvalPair {
        EvalPair {
            pred,
            gt,
            points: ModelPoints::new(points).unwrap(),
            gt_bbox: BBox::new(0.0, 0.0, 60.0, 80.0).unwrap(),
            image_diagonal: 200.0,
            pred_bbox: None,
        }
    }

    fn st(r: Rotation, t: [f64; 3], f: f64) -> ParamState {
        ParamState::new(r, t.into(), f).unwrap()
    }

    #[test]
    fn identical_prediction_scores_zero() {
        let s = st(Rotation::rot_y(0.4), [0.1, 0.0, 1.5], 700.0);
        let mut p = pair(s, s, vec![Vector3::new(0.1, 0.2, 0.0), Vector3::new(-0.1, 0.0, 0.1)]);
        p.pred_bbox = Some(p.gt_bbox);
        let r = evaluate_pair(&p).unwrap();
        assert_eq!((r.e_r, r.e_t, r.e_rt, r.e_f, r.e_p), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.iou, Some(1.0));
    }

    #[test]
    fn hand_values() {
        let gt = st(Rotation::identity(), [0.0, 0.0, 2.0], 600.0);
        let pred = st(Rotation::rot_z(PI / 6.0), [0.0, 0.0, 2.2], 600.0);
        let p = pair(pred, gt, vec![Vector3::zeros()]);
        assert!((err_rot(&p) - PI / 6.0).abs() < 1e-12);
        assert!((err_trans(&p).unwrap() - 0.1).abs() < 1e-12);

        let pred = st(Rotation::identity(), [0.0, 0.0, 2.2], 600.0);
        let mut p = pair(pred, gt, vec![Vector3::new(0.3, -0.2, 0.1), Vector3::new(1.0, 2.0, 3.0)]);
        p.gt_bbox = BBox::new(0.0, 0.0, 60.0, 80.0).unwrap();
        p.image_diagonal = 200.0;
        assert!((err_pose(&p).unwrap() - 0.05).abs() < 1e-12);

        let gt = st(Rotation::identity(), [0.0, 0.0, 1.0], 600.0);
        let pred = st(Rotation::identity(), [0.0, 0.0, 1.0], 660.0);
        let mut p = pair(pred, gt, vec![Vector3::new(0.1, 0.0, 0.0)]);
        p.gt_bbox = BBox::new(0.0, 0.0, 60.0, 80.0).unwrap();
        assert!((err_proj(&p).unwrap() - 0.06).abs() < 1e-12);
        assert!((err_focal(&p) - 0.1).abs() < 1e-12);

        let p = pair(pred, gt, vec![Vector3::zeros()]);
        assert_eq!(err_proj(&p).unwrap(), 0.0);
    }

    #[test]
    fn zero_gt_translation_is_an_error() {
        let gt = st(Rotation::identity(), [0.0, 0.0, 1.0], 600.0);
        let mut p = pair(gt, gt, vec![Vector3::zeros()]);
        p.gt.translation = Vector3::zeros();
        assert!(err_trans(&p).is_err());
        assert!(err_pose(&p).is_err());
    }

    #[test]
    fn behind_camera_is_infinite() {
        let gt = st(Rotation::identity(), [0.0, 0.0, 1.0], 600.0);
        let pred = st(Rotation::identity(), [0.0, 0.0, 0.05], 600.0);
        let p = pair(pred, gt, vec![Vector3::new(0.0, 0.0, -0.1)]);
        assert_eq!(err_proj(&p).unwrap(), f64::INFINITY);
        let r = evaluate_pair(&p).unwrap();
        let s = aggregate(&[r], &Thresholds::default()).unwrap();
        assert_eq!(s.median_e_p, None);
        assert_eq!(s.acc_p, 0.0);
    }

    fn rec(v: f64) -> MetricRecord {
        MetricRecord { e_r: v, e_t: v, e_rt: v, e_f: v, e_p: v, iou: None }
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        let values: Vec<f64> = (0..1001).rev().map(f64::from).collect();
        assert_eq!(lower_median(&values), Some(500.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn single_record_summary() {
        let r = MetricRecord { e_r: 0.2, e_t: 0.3, e_rt: 0.01, e_f: 0.05, e_p: 0.2, iou: Some(0.7) };
        let s = aggregate(&[r], &Thresholds::default()).unwrap();
        assert_eq!(
            (s.median_e_r, s.median_e_t, s.median_e_rt, s.median_e_f, s.median_e_p),
            (0.2, 0.3, 0.01, 0.05, Some(0.2))
        );
        assert_eq!((s.acc_r, s.acc_p, s.acc_d), (1.0, 0.0, Some(1.0)));
        assert!(aggregate(&[], &Thresholds::default()).is_err());
    }

    #[test]
    fn accuracy_thresholds_are_inclusive_except_iou() {
        let t = Thresholds::default();
        let r = MetricRecord { e_r: PI / 6.0, e_t: 0.0, e_rt: 0.0, e_f: 0.0, e_p: 0.1, iou: Some(0.5) };
        let s = aggregate(&[r], &t).unwrap();
        assert_eq!((s.acc_r, s.acc_p, s.acc_d), (1.0, 1.0, Some(0.0)));
    }

    #[test]
    fn histogram_counts_overflow() {
        let edges = histogram_edges("e_t");
        let counts = histogram(&[0.0, 0.04, 0.05, 2.0, f64::INFINITY], &edges);
        assert_eq!(counts[0], 2);
        assert_eq!(counts[1], 1);
        assert_eq!(*counts.last().unwrap(), 2);
        let csv = histograms_csv(&[rec(0.01)]);
        assert!(csv.contains("metric,bin_lo,bin_hi,count\n"));
        assert!(csv.lines().filter(|l| l.starts_with('#')).count() == 6);
    }

    proptest! {
        #[test]
        fn summary_is_permutation_invariant(vals in prop::collection::vec(0.0f64..3.0, 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let recs: Vec<_> = vals.iter().map(|&v| rec(v)).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut crate::rng_for(seed, 0));
            let t = Thresholds::default();
            prop_assert_eq!(aggregate(&recs, &t).unwrap(), aggregate(&shuffled, &t).unwrap());
        }

        #[test]
        fn same_rotation_pose_error_is_scaled_translation_error(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..30),
            dt in (-0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3),
            angle in 0.0f64..3.0,
        ) {
            let r = Rotation::from_scaled_axis(Vector3::new(0.3, -0.5, 0.8).normalize() * angle);
            let gt = st(r, [0.1, -0.2, 3.0], 600.0);
            let pred = st(r, [0.1 + dt.0, -0.2 + dt.1, 3.0 + dt.2], 650.0);
            let p = pair(pred, gt, pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect());
            let expected = p.gt_bbox.diagonal() / p.image_diagonal * err_trans(&p).unwrap();
            prop_assert!((err_pose(&p).unwrap() - expected).abs() <= 1e-12);
        }

        #[test]
        fn reprojection_is_resolution_invariant(s in 0.2f64..5.0, df in -100.0f64..100.0, dx in -0.05f64..0.05) {
            let gt = st(Rotation::rot_x(0.3), [0.0, 0.05, 1.2], 600.0);
            let pred = st(Rotation::rot_x(0.35), [dx, 0.05, 1.25], 600.0 + df);
            let pts = vec![Vector3::new(0.1, 0.1, 0.0), Vector3::new(-0.1, 0.05, 0.1)];
            let base = err_proj(&pair(pred, gt, pts.clone())).unwrap();
            let mut scaled = pair(
                st(pred.rotation, pred.translation.into(), pred.focal * s),
                st(gt.rotation, gt.translation.into(), gt.focal * s),
                pts,
            );
            scaled.gt_bbox = BBox::new(0.0, 0.0, 60.0 * s, 80.0 * s).unwrap();
            prop_assert!((err_proj(&scaled).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
        }
    }
}
