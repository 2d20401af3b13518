//! Interest-point sampling, reciprocal matching, weighted Kabsch and RANSAC.


use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::model::ScoredCloud;
use crate::rng;

/// Putative matches `(index into P, index into Q)` with optional weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs, weights: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, n_p: usize, n_q: usize) -> Result<()> {
        if let Some(&(i, j)) = self.pairs.iter().find(|&&(i, j)| i >= n_p || j >= n_q) {
            return Err(Error::invalid(format!("correspondence ({i}, {j}) out of range")));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.pairs.len() || w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
                return Err(Error::invalid("weights must be nonnegative, one per pair, with positive sum"));
            }
        }
        Ok(())
    }

    /// The matched points of `p` and `q`, in pair order.
    pub fn endpoints(&self, p: &PointCloud, q: &PointCloud) -> (Vec<Point>, Vec<Point>) {
        self.pairs.iter().map(|&(i, j)| (p[i], q[j])).unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Rand,
    TopKOm,
    ProbOm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rand" => Ok(Self::Rand),
            "top_k_om" | "topk" => Ok(Self::TopKOm),
            "prob_om" | "prob" => Ok(Self::ProbOm),
            _ => Err(Error::invalid(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerMode {
    pub kind: SamplerKind,
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerMode {
    fn default() -> Self {
        Self { kind: SamplerKind::ProbOm, k: 250, seed: 0 }
    }
}

/// Sampled indices in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub indices: Vec<usize>,
    /// Set when `prob_om` ran out of positive scores and drew uniformly.
    pub fell_back: bool,
}

pub fn sample_interest_points(cloud: &ScoredCloud, mode: &SamplerMode) -> Result<Sampled> {
    let scores: Vec<f64> = cloud.overlap.iter().zip(&cloud.matchability).map(|(o, m)| o * m).collect();
    sample_by_scores(&scores, mode)
}

/// Sampling on raw per-point scores.
pub fn sample_by_scores(scores: &[f64], mode: &SamplerMode) -> Result<Sampled> {
    let n = scores.len();
    if mode.k == 0 || mode.k > n {
        return Err(Error::invalid(format!("cannot sample {} of {n} points", mode.k)));
    }
    let mut fell_back = false;
    let mut indices = match mode.kind {
        SamplerKind::Rand => index::sample(&mut rng::seeded(mode.seed), n, mode.k).into_vec(),
        SamplerKind::TopKOm => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(mode.k);
            order
        }
        SamplerKind::ProbOm => {
            let mut r = rng::seeded(mode.seed);
            let mut w: Vec<f64> = scores.iter().map(|&s| if s.is_finite() && s > 0.0 { s } else { 0.0 }).collect();
            let mut picked = Vec::with_capacity(mode.k);
            for _ in 0..mode.k {
                let total: f64 = w.iter().sum();
                let i = if total > 0.0 {
                    let mut u = r.random::<f64>() * total;
                    let mut chosen = None;
                    for (i, &wi) in w.iter().enumerate() {
                        if wi > 0.0 {
                            chosen = Some(i);
                            if u < wi {
                                break;
                            }
                            u -= wi;
                        }
                    }
                    chosen.expect("positive total")
                } else {
                    fell_back = true;
                    let rest: Vec<usize> = (0..n).filter(|i| !picked.contains(i)).collect();
                    rest[r.random_range(0..rest.len())]
                };
                w[i] = 0.0;
                picked.push(i);
            }
            picked
        }
    };
    indices.sort_unstable();
    Ok(Sampled { indices, fell_back })
}

/// Index of the nearest row of `f_q` for every row of `f_p`, lowest index on
/// ties.
pub fn feature_nn(f_p: &Tensor, f_q: &Tensor) -> Result<Vec<usize>> {
    if f_p.cols() != f_q.cols() {
        return Err(Error::shape("descriptor width mismatch"));
    }
    if f_q.rows() == 0 {
        return Err(Error::EmptyTargetSet);
    }
    Ok((0..f_p.rows())
        .map(|i| {
            let a = f_p.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..f_q.rows() {
                let d: f64 = a.iter().zip(f_q.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

/// Reciprocal nearest neighbours between the rows of `f_p` and `f_q`.
pub fn mutual_nn_matches(f_p: &Tensor, f_q: &Tensor) -> Result<CorrespondenceSet> {
    if f_p.rows() == 0 || f_q.rows() == 0 {
        return Err(Error::EmptyTargetSet);
    }
    let pq = feature_nn(f_p, f_q)?;
    let qp = feature_nn(f_q, f_p)?;
    Ok(CorrespondenceSet::new(pq.iter().enumerate().filter(|&(i, &j)| qp[j] == i).map(|(i, &j)| (i, j)).collect()))
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("row count")
}

/// Samples interest points on both clouds and matches them reciprocally;
/// the returned pairs index the full clouds.
pub fn sample_and_match(src: &ScoredCloud, tgt: &ScoredCloud, mode: &SamplerMode) -> Result<CorrespondenceSet> {
    let sp = sample_interest_points(src, mode)?;
    let sq = sample_interest_points(tgt, &SamplerMode { seed: rng::derive_seed(mode.seed, 1), ..*mode })?;
    let m = mutual_nn_matches(&select_rows(&src.descriptors, &sp.indices), &select_rows(&tgt.descriptors, &sq.indices))?;
    Ok(CorrespondenceSet::new(m.pairs.iter().map(|&(i, j)| (sp.indices[i], sq.indices[j])).collect()))
}

/// Minimizer of `Σ w_i ‖R p_i + t − q_i‖²`.
pub fn kabsch(p: &[Point], q: &[Point], weights: Option<&[f64]>) -> Result<RigidTransform> {
    let n = p.len();
    if q.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::shape("kabsch needs one target and weight per source point"));
    }
    if n < 3 {
        return Err(Error::DegenerateGeometry);
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    if (0..n).any(|i| !(w(i) >= 0.0)) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let total: f64 = (0..n).map(w).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let cp = (0..n).fold(Vector3::zeros(), |a, i| a + p[i].coords * w(i)) / total;
    let cq = (0..n).fold(Vector3::zeros(), |a, i| a + q[i].coords * w(i)) / total;
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += (p[i].coords - cp) * (q[i].coords - cq).transpose() * w(i);
    }
    let svd = h.svd(true, true);
    let mut s = svd.singular_values.as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateGeometry);
    }
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    RigidTransform::new(r, cq - r * cp).map_err(|_| Error::DegenerateGeometry)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        // 2.5 voxels of 0.06.
        Self { iterations: 50_000, inlier_threshold: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    /// Pairs within the threshold under `transform`.
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn residuals<'a>(t: &RigidTransform, p: &'a [Point], q: &'a [Point]) -> impl Iterator<Item = f64> + 'a {
    let t = *t;
    p.iter().zip(q).map(move |(a, b)| (t.apply_point(a) - b).norm())
}

/// Minimal-sample RANSAC over `corr`, refined by Kabsch on the best
/// hypothesis' inliers.
pub fn ransac_register(corr: &CorrespondenceSet, p: &PointCloud, q: &PointCloud, cfg: &RansacConfig) -> Result<RansacResult> {
    corr.validate(p.len(), q.len())?;
    if corr.len() < 3 {
        return Err(Error::RegistrationFailed);
    }
    if !(cfg.inlier_threshold > 0.0) {
        return Err(Error::invalid("inlier threshold must be positive"));
    }
    let (ps, qs) = corr.endpoints(p, q);
    let tau = cfg.inlier_threshold;
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    for it in 0..cfg.iterations {
        let pick = index::sample(&mut rng::stream(cfg.seed, it as u64), ps.len(), 3).into_vec();
        let (a, b): (Vec<Point>, Vec<Point>) = pick.iter().map(|&i| (ps[i], qs[i])).unzip();
        let Ok(t) = kabsch(&a, &b, None) else { continue };
        let (mut count, mut sq) = (0, 0.0);
        for r in residuals(&t, &ps, &qs) {
            if r < tau {
                count += 1;
                sq += r * r;
            }
        }
        if count < 3 {
            continue;
        }
        let rmse = (sq / count as f64).sqrt();
        if best.as_ref().is_none_or(|&(c, e, _)| count > c || (count == c && rmse < e)) {
            best = Some((count, rmse, t));
        }
    }
    let (_, _, hyp) = best.ok_or(Error::RegistrationFailed)?;
    let (ip, iq): (Vec<Point>, Vec<Point>) =
        residuals(&hyp, &ps, &qs).zip(ps.iter().zip(&qs)).filter(|(r, _)| *r < tau).map(|(_, (a, b))| (*a, *b)).unzip();
    let transform = kabsch(&ip, &iq, None).unwrap_or(hyp);
    let inliers = residuals(&transform, &ps, &qs).map(|r| r < tau).collect();
    Ok(RansacResult { transform, inliers })
}
