//! Procedural partial-scan pairs with known relative pose.
//!
//! A canonical shape is sampled inside the unit sphere, cropped twice by
//! random half-spaces, each crop is moved by its own random rigid motion and
//! jittered, and finally both are subsampled to a fixed size.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_ratio, Point, PointCloud, RigidTransform};
use crate::rng::{self, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Corner,
    Torus,
    /// Star-shaped surface with seeded bumps; no rotational symmetry.
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Corner,
        ShapeKind::Torus,
        ShapeKind::Blob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Corner => "corner",
            ShapeKind::Torus => "torus",
            ShapeKind::Blob => "blob",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownShape(s.to_string()))
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Recenters on the centroid and scales so the farthest point sits on the
/// unit sphere.
fn fit_unit_sphere(points: &mut [Point]) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let r = points.iter().map(|p| (p.coords - c).norm()).fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    for p in points.iter_mut() {
        *p = Point::from((p.coords - c) * s);
    }
}

/// `n` surface samples of a procedural shape, fitted to the unit sphere.
pub fn sample_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("shape needs at least one point"));
    }
    let mut rng = rng::seeded(seed);
    let points: Vec<Point> = match kind {
        ShapeKind::Sphere => (0..n).map(|_| Point::from(unit_vector(&mut rng))).collect(),
        ShapeKind::Cube => {
            // Corners on the unit sphere.
            let h = 1.0 / 3f64.sqrt();
            (0..n)
                .map(|_| {
                    let face = rng.random_range(0..6usize);
                    let axis = face / 2;
                    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                    let mut c = [rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)];
                    c[axis] = sign * h;
                    Point::new(c[0], c[1], c[2])
                })
                .collect()
        }
        ShapeKind::Corner => {
            // Two unequal perpendicular walls sharing the z edge, plus a floor strip.
            let mut pts: Vec<Point> = (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    let a: f64 = rng.random_range(0.0..1.0);
                    let b: f64 = rng.random_range(0.0..1.0);
                    if u < 0.45 {
                        Point::new(a * 1.2, 0.0, b * 0.8)
                    } else if u < 0.8 {
                        Point::new(0.0, a * 0.9, b * 0.8)
                    } else {
                        Point::new(a * 1.2, b * 0.5, 0.0)
                    }
                })
                .collect();
            fit_unit_sphere(&mut pts);
            pts
        }
        ShapeKind::Torus => {
            let (big, small) = (0.7, 0.3);
            let mut pts = Vec::with_capacity(n);
            // Rejection sampling gives uniform area density.
            while pts.len() < n {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let w: f64 = rng.random_range(0.0..1.0);
                if w <= (big + small * v.cos()) / (big + small) {
                    let r = big + small * v.cos();
                    pts.push(Point::new(r * u.cos(), r * u.sin(), small * v.sin()));
                }
            }
            pts
        }
        ShapeKind::Blob => {
            let bumps: Vec<(Vector3<f64>, f64, f64)> = (0..7)
                .map(|_| {
                    (
                        unit_vector(&mut rng),
                        rng.random_range(-0.25..0.6),
                        rng.random_range(2.0..8.0),
                    )
                })
                .collect();
            let radius = |d: &Vector3<f64>| {
                1.0 + bumps.iter().map(|(c, a, k)| a * (k * (d.dot(c) - 1.0)).exp()).sum::<f64>()
            };
            let mut pts: Vec<Point> = (0..n)
                .map(|_| {
                    let d = unit_vector(&mut rng);
                    Point::from(d * radius(&d).max(0.2))
                })
                .collect();
            fit_unit_sphere(&mut pts);
            pts
        }
    };
    Ok(PointCloud::from_points_unchecked(points))
}

/// Keeps `floor(|P|·p_v)` points on the positive side of a plane with a
/// random normal, shifting the plane along the normal to hit the count.
pub fn half_space_crop(cloud: &PointCloud, p_v: f64, seed: u64) -> Result<PointCloud> {
    let normal = unit_vector(&mut rng::seeded(seed));
    half_space_crop_along(cloud, p_v, &normal)
}

pub fn half_space_crop_along(cloud: &PointCloud, p_v: f64, normal: &Vector3<f64>) -> Result<PointCloud> {
    if !(p_v > 0.0 && p_v <= 1.0) {
        return Err(Error::invalid(format!("p_v must lie in (0, 1], got {p_v}")));
    }
    let keep = (cloud.len() as f64 * p_v).floor() as usize;
    if keep == cloud.len() {
        return Ok(cloud.clone());
    }
    let mut order: Vec<(f64, usize)> = cloud.iter().enumerate().map(|(i, p)| (p.coords.dot(normal), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(cloud.select(&kept))
}

/// Random axis, angle uniform in `[0, max_angle_deg)`, translation uniform in
/// `[-trans_range, trans_range]³`. A zero angle bound yields no rotation.
pub fn random_rigid(max_angle_deg: f64, trans_range: f64, seed: u64) -> Result<RigidTransform> {
    if !(0.0..=180.0).contains(&max_angle_deg) {
        return Err(Error::invalid("max_angle_deg must lie in [0, 180]"));
    }
    if !(trans_range >= 0.0) {
        return Err(Error::invalid("trans_range must be non-negative"));
    }
    let mut rng = rng::seeded(seed);
    let axis = unit_vector(&mut rng);
    let angle = if max_angle_deg > 0.0 {
        rng.random_range(0.0..max_angle_deg).to_radians()
    } else {
        0.0
    };
    let mut t = Vector3::zeros();
    if trans_range > 0.0 {
        for c in t.iter_mut() {
            *c = rng.random_range(-trans_range..=trans_range);
        }
    }
    Ok(RigidTransform::from_axis_angle(&axis, angle, t))
}

/// I.i.d. Gaussian noise on every coordinate.
pub fn jitter(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let pts = cloud
        .iter()
        .map(|p| Point::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng), p.z + normal.sample(&mut rng)))
        .collect();
    Ok(PointCloud::from_points_unchecked(pts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub shape: ShapeKind,
    pub n_full: usize,
    pub p_v: f64,
    pub n_keep: usize,
    pub max_angle_deg: f64,
    pub trans_range: f64,
    pub jitter_sigma: f64,
    /// Tolerance used for the stored overlap ratio.
    pub v_pair: f64,
    /// Blend weight in `[0, 1]` pulling the target crop normal toward the
    /// source crop normal. `None` draws the two independently.
    pub normal_correlation: Option<f64>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Corner,
            n_full: 2048,
            p_v: 0.7,
            n_keep: 717,
            max_angle_deg: 45.0,
            trans_range: 0.5,
            jitter_sigma: 0.05,
            v_pair: 0.06,
            normal_correlation: None,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_v > 0.0 && self.p_v <= 1.0) {
            return Err(Error::invalid("p_v must lie in (0, 1]"));
        }
        let cropped = (self.n_full as f64 * self.p_v).floor() as usize;
        if self.n_keep == 0 || self.n_keep > cropped {
            return Err(Error::invalid(format!(
                "n_keep = {} must lie in [1, floor(n_full·p_v) = {cropped}]",
                self.n_keep
            )));
        }
        if !(self.v_pair > 0.0) {
            return Err(Error::invalid("v_pair must be positive"));
        }
        if let Some(c) = self.normal_correlation {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid("normal_correlation must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One generated registration problem.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps the source frame onto the target frame.
    pub gt: RigidTransform,
    pub overlap: f64,
    /// Full clean shape in the source frame.
    pub raw_source: PointCloud,
    /// Full clean shape in the target frame.
    pub raw_target: PointCloud,
    pub p_v: f64,
    pub seed: u64,
}

fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if n >= cloud.len() {
        return cloud.clone();
    }
    let mut idx = index::sample(&mut rng::seeded(seed), cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

pub fn make_pair(cfg: &GenConfig) -> Result<PairSample> {
    cfg.validate()?;
    let s = |k| derive_seed(cfg.seed, k);
    let shape = sample_shape(cfg.shape, cfg.n_full, s(0))?;

    let n_src = unit_vector(&mut rng::seeded(s(1)));
    let mut n_tgt = unit_vector(&mut rng::seeded(s(2)));
    if let Some(c) = cfg.normal_correlation {
        let blend = n_src * c + n_tgt * (1.0 - c);
        n_tgt = if blend.norm() > 1e-12 { blend.normalize() } else { n_src };
    }
    let crop_src = half_space_crop_along(&shape, cfg.p_v, &n_src)?;
    let crop_tgt = half_space_crop_along(&shape, cfg.p_v, &n_tgt)?;

    let pose_src = random_rigid(cfg.max_angle_deg, cfg.trans_range, s(3))?;
    let pose_tgt = random_rigid(cfg.max_angle_deg, cfg.trans_range, s(4))?;

    let source = jitter(&pose_src.apply(&crop_src), cfg.jitter_sigma, s(5))?;
    let target = jitter(&pose_tgt.apply(&crop_tgt), cfg.jitter_sigma, s(6))?;
    let source = subsample(&source, cfg.n_keep, s(7));
    let target = subsample(&target, cfg.n_keep, s(8));

    let gt = pose_tgt.compose(&pose_src.invert());
    let overlap = overlap_ratio(&source, &target, &gt, cfg.v_pair)?;
    Ok(PairSample {
        source,
        target,
        gt,
        overlap,
        raw_source: pose_src.apply(&shape),
        raw_target: pose_tgt.apply(&shape),
        p_v: cfg.p_v,
        seed: cfg.seed,
    })
}

/// `count` pairs with seeds derived from `cfg.seed`; when `p_v_range` is set,
/// each pair draws its completeness uniformly from that range.
pub fn make_dataset(cfg: &GenConfig, count: usize, p_v_range: Option<(f64, f64)>) -> Result<Vec<PairSample>> {
    (0..count)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, 1000 + i as u64);
            if let Some((lo, hi)) = p_v_range {
                c.p_v = if hi > lo { rng::seeded(c.seed).random_range(lo..=hi) } else { lo };
            }
            make_pair(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::KdTree;

    #[test]
    fn sphere_on_unit_radius() {
        let s = sample_shape(ShapeKind::Sphere, 100, 1).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|p| (p.coords.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn shapes_are_deterministic_and_bounded() {
        for kind in ShapeKind::ALL {
            let a = sample_shape(kind, 10_000, 5).unwrap();
            assert_eq!(a, sample_shape(kind, 10_000, 5).unwrap());
            let max_r = a.iter().map(|p| p.coords.norm()).fold(0.0, f64::max);
            assert!(max_r <= 1.0 + 1e-9, "{kind}: {max_r}");
        }
        let cube = sample_shape(ShapeKind::Cube, 10_000, 2).unwrap();
        let max_c = cube.iter().flat_map(|p| p.coords.iter().map(|c| c.abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
        assert!(max_c <= 1.0 / 3f64.sqrt() + 1e-12);
    }

    #[test]
    fn unknown_shape_kind() {
        assert!(matches!("teapot".parse::<ShapeKind>(), Err(Error::UnknownShape(_))));
        assert_eq!("torus".parse::<ShapeKind>().unwrap(), ShapeKind::Torus);
    }

    #[test]
    fn crop_counts() {
        let s = sample_shape(ShapeKind::Sphere, 2048, 0).unwrap();
        assert_eq!(half_space_crop(&s, 1.0, 3).unwrap(), s);
        assert_eq!(half_space_crop(&s, 0.7, 3).unwrap().len(), 1433);
    }

    #[test]
    fn crop_matches_sort_oracle() {
        let s = sample_shape(ShapeKind::Blob, 500, 9).unwrap();
        let seed = 17;
        let normal = unit_vector(&mut rng::seeded(seed));
        let crop = half_space_crop(&s, 0.4, seed).unwrap();
        let mut scored: Vec<(f64, usize)> = s.iter().enumerate().map(|(i, p)| (p.coords.dot(&normal), i)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut want: Vec<usize> = scored[..200].iter().map(|x| x.1).collect();
        want.sort();
        assert_eq!(crop, s.select(&want));
    }

    #[test]
    fn rigid_angle_bounds() {
        let mut max_angle: f64 = 0.0;
        for seed in 0..10_000 {
            let t = random_rigid(45.0, 0.5, seed).unwrap();
            let c = ((t.rotation().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let angle = c.acos().to_degrees();
            assert!(angle >= 0.0);
            max_angle = max_angle.max(angle);
            assert!(t.translation().amax() <= 0.5);
            assert!(RigidTransform::new(*t.rotation(), *t.translation()).is_ok());
        }
        assert!(max_angle < 45.0 + 1e-9);
        assert!(max_angle > 44.0);
    }

    #[test]
    fn zero_angle_is_identity_rotation() {
        let t = random_rigid(0.0, 0.0, 3).unwrap();
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn jitter_moments_and_determinism() {
        let base = PointCloud::new(vec![Point::origin(); 100_000]).unwrap();
        assert_eq!(jitter(&base, 0.0, 1).unwrap(), base);
        let j = jitter(&base, 0.05, 7).unwrap();
        assert_eq!(j, jitter(&base, 0.05, 7).unwrap());
        for axis in 0..3 {
            let n = j.len() as f64;
            let mean = j.iter().map(|p| p[axis]).sum::<f64>() / n;
            let var = j.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
            assert!((var.sqrt() / 0.05 - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn full_clean_identity_pair_has_full_overlap() {
        let cfg = GenConfig {
            p_v: 1.0,
            n_keep: 2048,
            jitter_sigma: 0.0,
            max_angle_deg: 0.0,
            trans_range: 0.0,
            ..GenConfig::default()
        };
        let pair = make_pair(&cfg).unwrap();
        assert_eq!(pair.overlap, 1.0);
        assert_eq!(pair.gt, RigidTransform::identity());
    }

    #[test]
    fn stored_overlap_is_consistent() {
        for seed in 0..5 {
            let cfg = GenConfig { seed, ..GenConfig::default() };
            let pair = make_pair(&cfg).unwrap();
            assert_eq!(pair.source.len(), 717);
            assert_eq!(pair.overlap, overlap_ratio(&pair.source, &pair.target, &pair.gt, cfg.v_pair).unwrap());
            assert_eq!(pair, make_pair(&cfg).unwrap());
        }
    }

    #[test]
    fn raw_clouds_align_under_gt() {
        let pair = make_pair(&GenConfig { seed: 3, ..GenConfig::default() }).unwrap();
        let moved = pair.gt.apply(&pair.raw_source);
        for (a, b) in moved.iter().zip(&pair.raw_target) {
            assert!((a - b).norm() < 1e-9);
        }
        // Every clean target point has a raw counterpart.
        let tree = KdTree::build(&pair.raw_target);
        assert!(tree.nearest(&pair.gt.apply_point(&pair.raw_source[0])).unwrap().1 < 1e-18);
    }

    #[test]
    fn invalid_configs() {
        assert!(make_pair(&GenConfig { p_v: 0.0, ..GenConfig::default() }).is_err());
        assert!(make_pair(&GenConfig { n_keep: 1500, ..GenConfig::default() }).is_err());
    }

    #[test]
    fn default_overlap_band() {
        let mean = (0..100)
            .map(|seed| make_pair(&GenConfig { seed, ..GenConfig::default() }).unwrap().overlap)
            .sum::<f64>()
            / 100.0;
        assert!(mean > 0.4 && mean < 0.95, "mean overlap {mean}");
    }

    #[test]
    fn smaller_completeness_lowers_overlap() {
        let mean_for = |p_v: f64| {
            (0..200)
                .map(|seed| {
                    let cfg = GenConfig { seed, p_v, n_keep: 400, ..GenConfig::default() };
                    make_pair(&cfg).unwrap().overlap
                })
                .sum::<f64>()
                / 200.0
        };
        let means: Vec<f64> = [0.4, 0.55, 0.7, 0.85, 1.0].iter().map(|&p| mean_for(p)).collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
    }
}
