//! Circle, overlap and matchability losses and the training loop.

mod train;

#[cfg(test)]
mod tests;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CircleMargins, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::feature_nn;
use crate::geometry::{gt_correspondences, gt_overlap_labels, GtCorrespondences, PointCloud, RigidTransform};
use crate::rng;

pub use train::{append_epoch_log, pair_loss, prepare_pair, train_epoch, EpochReport, PreparedPair, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub circle: f64,
    pub overlap: f64,
    pub matchability: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { circle: 1.0, overlap: 1.0, matchability: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    /// Anchors sampled per direction for the circle loss.
    pub n_p: usize,
    pub r_p: f64,
    pub r_s: f64,
    pub r_o: f64,
    pub r_m: f64,
    pub matchability_gate: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        // Radii sized for 0.05 jitter on unit-scale shapes.
        Self {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 64.0,
            n_p: 384,
            r_p: 0.08,
            r_s: 0.16,
            r_o: 0.1,
            r_m: 0.1,
            matchability_gate: 0.30,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta_p && self.delta_p < self.delta_n) {
            return Err(Error::Config("need 0 < delta_p < delta_n".into()));
        }
        if !(self.gamma > 0.0) || self.n_p == 0 {
            return Err(Error::Config("gamma and n_p must be positive".into()));
        }
        if ![self.r_p, self.r_s, self.r_o, self.r_m].iter().all(|r| *r > 0.0) || self.r_p >= self.r_s {
            return Err(Error::Config("radii must be positive with r_p < r_s".into()));
        }
        if !(0.0..=1.0).contains(&self.matchability_gate) {
            return Err(Error::Config("matchability_gate must lie in [0, 1]".into()));
        }
        let w = &self.weights;
        if ![w.circle, w.overlap, w.matchability].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn margins(&self) -> CircleMargins {
        CircleMargins { delta_p: self.delta_p, delta_n: self.delta_n, gamma: self.gamma }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub circle: f64,
    pub overlap: f64,
    pub matchability: f64,
    /// Fraction of circle-loss anchors whose descriptor NN is within `r_m`.
    pub match_rate: f64,
    /// Set when a cloud had only one overlap class and plain BCE was used.
    pub overlap_fallback: bool,
}

/// Ground truth for one pair, both directions.
#[derive(Clone, Debug)]
pub struct PairTargets {
    pub src_to_tgt: GtCorrespondences,
    pub tgt_to_src: GtCorrespondences,
    pub src_overlap: Vec<f64>,
    pub tgt_overlap: Vec<f64>,
    /// Source points mapped into the target frame.
    pub src_in_tgt: PointCloud,
    pub tgt_in_src: PointCloud,
}

impl PairTargets {
    pub fn new(src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, cfg: &LossConfig) -> Result<Self> {
        let inv = gt.invert();
        Ok(Self {
            src_to_tgt: gt_correspondences(src, tgt, gt, cfg.r_p, cfg.r_s)?,
            tgt_to_src: gt_correspondences(tgt, src, &inv, cfg.r_p, cfg.r_s)?,
            src_overlap: gt_overlap_labels(src, tgt, gt, cfg.r_o)?,
            tgt_overlap: gt_overlap_labels(tgt, src, &inv, cfg.r_o)?,
            src_in_tgt: gt.apply(src),
            tgt_in_src: inv.apply(tgt),
        })
    }
}

/// Up to `n` matchable anchors drawn without replacement, ascending.
pub fn sample_anchors(corr: &GtCorrespondences, n: usize, seed: u64) -> Result<Vec<usize>> {
    let avail = corr.matchable_anchors();
    if avail.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    if avail.len() <= n {
        return Ok(avail);
    }
    let mut picked: Vec<usize> = index::sample(&mut rng::seeded(seed), avail.len(), n).into_iter().map(|i| avail[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Circle loss from the rows of `f_p` at `anchors` against all of `f_q`.
pub fn circle_loss_anchors(
    g: &mut Graph,
    f_p: Var,
    f_q: Var,
    corr: &GtCorrespondences,
    anchors: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    let fa = g.gather_rows(f_p, anchors)?;
    let d = g.pairwise_dist(fa, f_q)?;
    let positives: Vec<Vec<usize>> = anchors.iter().map(|&i| corr.positives[i].clone()).collect();
    let negatives: Vec<Vec<usize>> = anchors.iter().map(|&i| corr.negatives(i)).collect();
    g.circle_loss(d, &positives, &negatives, cfg.margins())
}

/// One-directional circle loss over `min(n_p, available)` seeded anchors.
/// Returns the loss and the anchors used.
pub fn circle_loss(
    g: &mut Graph,
    f_p: Var,
    f_q: Var,
    corr: &GtCorrespondences,
    cfg: &LossConfig,
    seed: u64,
) -> Result<(Var, Vec<usize>)> {
    let anchors = sample_anchors(corr, cfg.n_p, seed)?;
    let loss = circle_loss_anchors(g, f_p, f_q, corr, &anchors, cfg)?;
    Ok((loss, anchors))
}

/// Class weights `N/(2 N_pos)` and `N/(2 N_neg)`; `None` when a class is empty.
pub fn balanced_weights(labels: &[f64]) -> Option<Vec<f64>> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    Some(labels.iter().map(|&y| if y > 0.5 { n / (2.0 * pos) } else { n / (2.0 * neg) }).collect())
}

/// Class-balanced BCE. The flag is set when a class is empty and the
/// unweighted loss was used instead.
pub fn overlap_loss(g: &mut Graph, o: Var, labels: &[f64]) -> Result<(Var, bool)> {
    match balanced_weights(labels) {
        Some(w) => Ok((g.weighted_bce(o, labels, &w)?, false)),
        None => Ok((g.weighted_bce(o, labels, &vec![1.0; labels.len()])?, true)),
    }
}

pub fn matchability_loss(g: &mut Graph, m: Var, labels: &[f64]) -> Result<Var> {
    g.weighted_bce(m, labels, &vec![1.0; labels.len()])
}

/// `1` where the descriptor NN of `p_i` in `Q` lies within `r_m` of
/// `T_gt(p_i)`.
pub fn matchability_labels(
    f_p: &Tensor,
    f_q: &Tensor,
    p: &PointCloud,
    q: &PointCloud,
    gt: &RigidTransform,
    r_m: f64,
) -> Result<Vec<f64>> {
    labels_in_frame(f_p, f_q, &gt.apply(p), q, r_m)
}

pub(crate) fn labels_in_frame(f_p: &Tensor, f_q: &Tensor, p_mapped: &PointCloud, q: &PointCloud, r_m: f64) -> Result<Vec<f64>> {
    if f_p.rows() != p_mapped.len() || f_q.rows() != q.len() {
        return Err(Error::shape("one descriptor per point"));
    }
    let nn = feature_nn(f_p, f_q)?;
    Ok(nn.iter().enumerate().map(|(i, &j)| if (q[j] - p_mapped[i]).norm() <= r_m { 1.0 } else { 0.0 }).collect())
}

/// Latched switch for the matchability term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchabilityGate {
    pub open: bool,
}

impl MatchabilityGate {
    /// Opens once `match_rate` reaches `threshold`; never closes.
    pub fn update(&mut self, match_rate: f64, threshold: f64) -> bool {
        self.open |= match_rate >= threshold;
        self.open
    }
}

/// Loss terms of one step on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub circle: Var,
    pub overlap: Var,
    pub matchability: Var,
}

/// Weighted sum; the matchability term only counts once the gate is open.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &LossConfig, gate: MatchabilityGate) -> Result<Var> {
    let w = &cfg.weights;
    let c = g.scale(terms.circle, w.circle);
    let o = g.scale(terms.overlap, w.overlap);
    let mut total = g.add(c, o)?;
    if gate.open {
        let m = g.scale(terms.matchability, w.matchability);
        total = g.add(total, m)?;
    }
    Ok(total)
}

/// [`total_loss`] on already computed values.
pub fn total_value(report: &LossReport, cfg: &LossConfig, gate: MatchabilityGate) -> f64 {
    let w = &cfg.weights;
    let base = w.circle * report.circle + w.overlap * report.overlap;
    if gate.open {
        base + w.matchability * report.matchability
    } else {
        base
    }
}
