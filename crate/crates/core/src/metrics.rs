//! Pose-error metrics and dataset-level reports. Errors are in the units of
//! the inputs (millimeters throughout the pipeline).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::io::{read_labelled_poses, LabelledPose};
use crate::pose::Pose3D;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// AUC thresholds: 0, 5, ..., 150 mm.
pub const AUC_THRESHOLDS: usize = 31;
pub const AUC_STEP_MM: f64 = 5.0;

fn check_shapes(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::Shape(format!(
            "prediction has {} joints, ground truth {}",
            pred.joint_count(),
            gt.joint_count()
        )));
    }
    if gt.joint_count() == 0 {
        return Err(Error::Shape("pose has no joints".into()));
    }
    Ok(())
}

/// Euclidean error of every joint.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    Ok(pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect())
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn to_vectors(p: &Pose3D) -> Vec<Vector3<f64>> {
    p.coords.iter().map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn centroid(v: &[Vector3<f64>]) -> Vector3<f64> {
    v.iter().sum::<Vector3<f64>>() / v.len() as f64
}

/// Similarity transform `s R pred + t` closest to `gt` in the least-squares
/// sense, with `R` a proper rotation.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check_shapes(pred, gt)?;
    let x = to_vectors(pred);
    let y = to_vectors(gt);
    let (mx, my) = (centroid(&x), centroid(&y));
    let xc: Vec<_> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<_> = y.iter().map(|v| v - my).collect();
    let norm_x: f64 = xc.iter().map(|v| v.norm_squared()).sum();
    let norm_y: f64 = yc.iter().map(|v| v.norm_squared()).sum();
    let scale_ref = x.iter().chain(&y).map(|v| v.norm_squared()).sum::<f64>().max(1.0);
    if norm_x <= 1e-18 * scale_ref {
        return Err(Error::Degenerate(
            "prediction joints coincide; rotation is undefined".into(),
        ));
    }
    if norm_y <= 1e-18 * scale_ref {
        return Err(Error::Degenerate(
            "ground-truth joints coincide; rotation is undefined".into(),
        ));
    }
    // Cross-covariance sum_j y_j x_j^T = U S V^T; R = U D V^T.
    let mut cov = Matrix3::zeros();
    for (a, b) in xc.iter().zip(&yc) {
        cov += b * a.transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;
    let s = (svd.singular_values[0] + svd.singular_values[1] + sign * svd.singular_values[2]) / norm_x;
    let coords = xc
        .iter()
        .map(|v| {
            let p = r * v * s + my;
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(Pose3D::new(coords))
}

pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold >= 0.0) {
        return Err(Error::Validation(format!("PCK threshold must be non-negative, got {threshold}")));
    }
    Ok(())
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

fn auc_of(errors: &[f64]) -> f64 {
    (0..AUC_THRESHOLDS)
        .map(|i| pck_of(errors, i as f64 * AUC_STEP_MM) / 100.0)
        .sum::<f64>()
        / AUC_THRESHOLDS as f64
}

/// Percentage of joints with error at most `threshold`.
pub fn pck(pred: &Pose3D, gt: &Pose3D, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    Ok(pck_of(&joint_errors(pred, gt)?, threshold))
}

/// Mean PCK fraction over the 0..=150 mm grid.
pub fn auc(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(auc_of(&joint_errors(pred, gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck150: f64,
    pub auc: f64,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck150: f64,
    pub auc: f64,
    pub frame_count: usize,
    pub per_action: BTreeMap<String, MetricSummary>,
}

/// Per-frame metric values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck150: f64,
    pub auc: f64,
}

pub fn frame_metrics(pred: &Pose3D, gt: &Pose3D) -> Result<FrameMetrics> {
    let e = joint_errors(pred, gt)?;
    Ok(FrameMetrics {
        mpjpe: e.iter().sum::<f64>() / e.len() as f64,
        p_mpjpe: p_mpjpe(pred, gt)?,
        pck150: pck_of(&e, PCK_THRESHOLD_MM),
        auc: auc_of(&e),
    })
}

fn summarize(frames: &[&FrameMetrics]) -> MetricSummary {
    let n = frames.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| frames.iter().map(|m| f(m)).sum::<f64>() / n;
    MetricSummary {
        mpjpe_mm: mean(&|m| m.mpjpe),
        p_mpjpe_mm: mean(&|m| m.p_mpjpe),
        pck150: mean(&|m| m.pck150),
        auc: mean(&|m| m.auc),
        frame_count: frames.len(),
    }
}

pub const NO_ACTION: &str = "none";

/// Matches predictions to ground truth by sample id and averages per-frame
/// metrics uniformly over frames (and within each action).
pub fn evaluate(pred: &[LabelledPose], gt: &[LabelledPose], per_action: bool) -> Result<MetricReport> {
    if gt.is_empty() {
        return Err(Error::Validation("ground truth is empty".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut by_id: HashMap<&str, &LabelledPose> = HashMap::with_capacity(pred.len());
    for p in pred {
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(Error::Validation(format!("duplicate prediction id `{}`", p.sample_id)));
        }
    }
    let mut frames = Vec::with_capacity(gt.len());
    for g in gt {
        let p = by_id.get(g.sample_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("no prediction for frame `{}`", g.sample_id))
        })?;
        frames.push(frame_metrics(&p.pose, &g.pose)?);
    }
    let all: Vec<&FrameMetrics> = frames.iter().collect();
    let overall = summarize(&all);
    let mut groups: BTreeMap<String, Vec<&FrameMetrics>> = BTreeMap::new();
    if per_action {
        for (g, m) in gt.iter().zip(&frames) {
            let tag = g.action_tag.clone().unwrap_or_else(|| NO_ACTION.to_string());
            groups.entry(tag).or_default().push(m);
        }
    }
    Ok(MetricReport {
        mpjpe_mm: overall.mpjpe_mm,
        p_mpjpe_mm: overall.p_mpjpe_mm,
        pck150: overall.pck150,
        auc: overall.auc,
        frame_count: overall.frame_count,
        per_action: groups.iter().map(|(k, v)| (k.clone(), summarize(v))).collect(),
    })
}

pub fn evaluate_files(pred: &Path, gt: &Path, per_action: bool) -> Result<MetricReport> {
    let (_, p) = read_labelled_poses(pred)?;
    let (_, g) = read_labelled_poses(gt)?;
    evaluate(&p, &g, per_action)
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per action followed by the overall row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,frames,mpjpe_mm,p_mpjpe_mm,pck150,auc\n");
        let mut row = |name: &str, m: &MetricSummary| {
            let _ = writeln!(
                out,
                "{name},{},{:.4},{:.4},{:.4},{:.6}",
                m.frame_count, m.mpjpe_mm, m.p_mpjpe_mm, m.pck150, m.auc
            );
        };
        for (k, m) in &self.per_action {
            row(k, m);
        }
        row(
            "all",
            &MetricSummary {
                mpjpe_mm: self.mpjpe_mm,
                p_mpjpe_mm: self.p_mpjpe_mm,
                pck150: self.pck150,
                auc: self.auc,
                frame_count: self.frame_count,
            },
        );
        out
    }
}
