//! Registration and correspondence metrics with CSV/JSON reporting.


use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_ratio, KdTree, PointCloud, RigidTransform};
use crate::matching::CorrespondenceSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    /// Inlier distance in meters.
    pub tau1: f64,
    /// Minimum inlier ratio for a feature match.
    pub tau2: f64,
    pub rmse_thresh: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { tau1: 0.10, tau2: 0.05, rmse_thresh: 0.2 }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.tau1, self.tau2, self.rmse_thresh].iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("evaluation thresholds must be positive".into()))
        }
    }
}

/// Fraction of pairs with `‖T_gt(p) − q‖ < tau1`. An empty set gives
/// `(0, true)`.
pub fn inlier_ratio(corr: &CorrespondenceSet, p: &PointCloud, q: &PointCloud, gt: &RigidTransform, tau1: f64) -> Result<(f64, bool)> {
    corr.validate(p.len(), q.len())?;
    if corr.is_empty() {
        return Ok((0.0, true));
    }
    let hits = corr.pairs.iter().filter(|&&(i, j)| (gt.apply_point(&p[i]) - q[j]).norm() < tau1).count();
    Ok((hits as f64 / corr.len() as f64, false))
}

fn fraction(values: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| keep(v)).count() as f64 / values.len() as f64
}

/// Fraction of pairs whose inlier ratio is strictly above `tau2`.
pub fn feature_match_recall(inlier_ratios: &[f64], tau2: f64) -> f64 {
    fraction(inlier_ratios, |v| v > tau2)
}

/// RMSE of `‖T_est(p) − q‖` over ground-truth correspondences.
pub fn registration_rmse(est: &RigidTransform, gt_corr: &CorrespondenceSet, p: &PointCloud, q: &PointCloud) -> Result<f64> {
    gt_corr.validate(p.len(), q.len())?;
    if gt_corr.is_empty() {
        return Err(Error::invalid("no ground-truth correspondences"));
    }
    let sq: f64 = gt_corr.pairs.iter().map(|&(i, j)| (est.apply_point(&p[i]) - q[j]).norm_squared()).sum();
    Ok((sq / gt_corr.len() as f64).sqrt())
}

/// Fraction of RMSE values strictly below `thresh`.
pub fn registration_recall(rmses: &[f64], thresh: f64) -> f64 {
    fraction(rmses, |v| v < thresh)
}

/// Relative rotation error in degrees and translation error in meters.
///
/// The angle is `arccos((tr(RᵀR̄) − 1)/2)` with the argument clamped to
/// `[−1, 1]`; it is evaluated as `atan2(sin, cos)` of the relative rotation,
/// which is the same angle but keeps full precision near 0° and 180°.
pub fn rre_rte(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let rel: Matrix3<f64> = est.rotation().transpose() * gt.rotation();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = nalgebra::Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    let rre = sin.atan2(cos).to_degrees();
    (rre, (est.translation() - gt.translation()).norm())
}

fn mean_nn_sq(queries: impl Iterator<Item = crate::geometry::Point>, tree: &KdTree, count: usize) -> f64 {
    queries.map(|x| tree.nearest(&x).map_or(f64::INFINITY, |(_, d2)| d2)).sum::<f64>() / count as f64
}

/// `mean_P min_{Q_raw} ‖T(p) − q‖² + mean_Q min_{P_raw} ‖q − T(p)‖²`.
pub fn chamfer_modified(p: &PointCloud, q: &PointCloud, est: &RigidTransform, p_raw: &PointCloud, q_raw: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() || p_raw.is_empty() || q_raw.is_empty() {
        return Err(Error::invalid("chamfer distance needs nonempty clouds"));
    }
    let q_tree = KdTree::build(q_raw);
    let p_tree = KdTree::build(&est.apply(p_raw));
    let a = mean_nn_sq(p.iter().map(|x| est.apply_point(x)), &q_tree, p.len());
    let b = mean_nn_sq(q.iter().copied(), &p_tree, q.len());
    Ok(a + b)
}

/// `(x, |{v < x}| / |values|)` for each grid point.
pub fn ecdf_curve(values: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::invalid("ECDF of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(grid.iter().map(|&x| (x, sorted.partition_point(|&v| v < x) as f64 / n)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapFiltering {
    pub before: f64,
    pub after: f64,
    /// Set when a filtered cloud came out empty and `after` was forced to 0.
    pub empty_after: bool,
}

/// Overlap ratio before and after discarding points whose predicted
/// overlap score is below `cutoff`.
pub fn overlap_after_filtering(
    p: &PointCloud,
    q: &PointCloud,
    gt: &RigidTransform,
    o_p: &[f64],
    o_q: &[f64],
    v: f64,
    cutoff: f64,
) -> Result<OverlapFiltering> {
    if o_p.len() != p.len() || o_q.len() != q.len() {
        return Err(Error::shape("one overlap score per point"));
    }
    let before = overlap_ratio(p, q, gt, v)?;
    let keep = |o: &[f64]| (0..o.len()).filter(|&i| o[i] >= cutoff).collect::<Vec<_>>();
    let (kp, kq) = (keep(o_p), keep(o_q));
    if kp.is_empty() || kq.is_empty() {
        return Ok(OverlapFiltering { before, after: 0.0, empty_after: true });
    }
    let after = overlap_ratio(&p.select(&kp), &q.select(&kq), gt, v)?;
    Ok(OverlapFiltering { before, after, empty_after: false })
}

/// Area under the ROC curve of `scores` against binary `labels`, ties
/// counted as one half. `None` when a class is empty.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64 * mid;
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub overlap: f64,
    pub n_samples: usize,
    pub inlier_ratio: f64,
    pub rmse: f64,
    pub rre: f64,
    pub rte: f64,
    pub chamfer: f64,
    pub success: bool,
    /// Free-form grouping label.
    pub tag: String,
}

pub const CSV_HEADER: &str = "pair_id,overlap,n_samples,IR,RMSE,RRE,RTE,Chamfer,success,tag";

pub fn write_csv<W: Write>(mut w: W, rows: &[PairMetrics]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.pair_id, r.overlap, r.n_samples, r.inlier_ratio, r.rmse, r.rre, r.rte, r.chamfer, r.success as u8, r.tag
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_pairs: usize,
    pub fmr: f64,
    pub rr: f64,
    pub mean_ir: f64,
    pub mean_rmse: f64,
    pub mean_rre: f64,
    pub mean_rte: f64,
    pub mean_chamfer: f64,
    /// ECDF of the per-pair ground-truth overlap.
    pub overlap_ecdf: Vec<(f64, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregates rows; `grid` sets the ECDF abscissae.
pub fn summarize(rows: &[PairMetrics], th: &EvalThresholds, grid: &[f64]) -> Result<EvalSummary> {
    let irs: Vec<f64> = rows.iter().map(|r| r.inlier_ratio).collect();
    let rmses: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
    let overlaps: Vec<f64> = rows.iter().map(|r| r.overlap).collect();
    Ok(EvalSummary {
        n_pairs: rows.len(),
        fmr: feature_match_recall(&irs, th.tau2),
        rr: registration_recall(&rmses, th.rmse_thresh),
        mean_ir: mean(irs.iter().copied()),
        mean_rmse: mean(rmses.iter().copied()),
        mean_rre: mean(rows.iter().map(|r| r.rre)),
        mean_rte: mean(rows.iter().map(|r| r.rte)),
        mean_chamfer: mean(rows.iter().map(|r| r.chamfer)),
        overlap_ecdf: if overlaps.is_empty() { Vec::new() } else { ecdf_curve(&overlaps, grid)? },
    })
}
