use super::{KdTree, PointCloud, RigidTransform};
use crate::error::{Error, Result};

fn nn_distances(p: &PointCloud, q: &PointCloud, gt: &RigidTransform) -> Vec<f64> {
    let tree = KdTree::build(q);
    p.iter()
        .map(|x| tree.nearest(&gt.apply_point(x)).map_or(f64::INFINITY, |(_, d2)| d2.sqrt()))
        .collect()
}

/// Fraction of `p` whose nearest neighbor in `q` lies within `v` after
/// mapping `p` through `gt`.
pub fn overlap_ratio(p: &PointCloud, q: &PointCloud, gt: &RigidTransform, v: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("overlap ratio of an empty cloud"));
    }
    if !(v > 0.0) {
        return Err(Error::invalid("overlap tolerance must be positive"));
    }
    if q.is_empty() {
        return Ok(0.0);
    }
    let hits = nn_distances(p, q, gt).into_iter().filter(|&d| d <= v).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Binary overlap labels: 1 where the aligned point has a neighbor in `q`
/// strictly closer than `r_o`.
pub fn gt_overlap_labels(p: &PointCloud, q: &PointCloud, gt: &RigidTransform, r_o: f64) -> Result<Vec<f64>> {
    if !(r_o > 0.0) {
        return Err(Error::invalid("overlap radius must be positive"));
    }
    if q.is_empty() {
        return Ok(vec![0.0; p.len()]);
    }
    Ok(nn_distances(p, q, gt)
        .into_iter()
        .map(|d| if d < r_o { 1.0 } else { 0.0 })
        .collect())
}

/// Positive and negative sets for every anchor of `P`.
///
/// Negatives are not stored explicitly: they are every point of `Q` outside
/// the safe radius, i.e. the complement of `within_safe`.
#[derive(Clone, Debug, PartialEq)]
pub struct GtCorrespondences {
    pub positives: Vec<Vec<usize>>,
    pub within_safe: Vec<Vec<usize>>,
    pub num_targets: usize,
}

impl GtCorrespondences {
    pub fn is_matchable(&self, anchor: usize) -> bool {
        !self.positives[anchor].is_empty()
    }

    pub fn matchable_anchors(&self) -> Vec<usize> {
        (0..self.positives.len()).filter(|&i| self.is_matchable(i)).collect()
    }

    pub fn negatives(&self, anchor: usize) -> Vec<usize> {
        let near = &self.within_safe[anchor];
        let mut out = Vec::with_capacity(self.num_targets - near.len());
        let mut it = near.iter().peekable();
        for j in 0..self.num_targets {
            if it.peek() == Some(&&j) {
                it.next();
            } else {
                out.push(j);
            }
        }
        out
    }

    /// Flattened `(anchor, positive)` pairs.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
            .collect()
    }
}

pub fn gt_correspondences(
    p: &PointCloud,
    q: &PointCloud,
    gt: &RigidTransform,
    r_p: f64,
    r_s: f64,
) -> Result<GtCorrespondences> {
    if !(r_p > 0.0 && r_p < r_s) {
        return Err(Error::invalid("need 0 < r_p < r_s"));
    }
    let tree = KdTree::build(q);
    let mut positives = Vec::with_capacity(p.len());
    let mut within_safe = Vec::with_capacity(p.len());
    for x in p {
        let y = gt.apply_point(x);
        let near = tree.within_radius(&y, r_s);
        let pos: Vec<usize> = near.iter().copied().filter(|&j| (q[j] - y).norm() <= r_p).collect();
        positives.push(pos);
        within_safe.push(near);
    }
    Ok(GtCorrespondences { positives, within_safe, num_targets: q.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::rng;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = rng::seeded(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn tf(seed: u64) -> RigidTransform {
        let mut r = rng::seeded(seed);
        RigidTransform::from_axis_angle(
            &Vector3::new(r.random(), r.random(), r.random()),
            r.random_range(0.0..3.0),
            Vector3::new(r.random(), r.random(), r.random()),
        )
    }

    fn brute_nn(y: &Point, q: &PointCloud) -> f64 {
        q.iter().map(|z| (z - y).norm()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn exact_alignment_full_overlap() {
        let p = random_cloud(100, 1);
        let t = tf(2);
        let q = t.apply(&p);
        assert_eq!(overlap_ratio(&p, &q, &t, 1e-6).unwrap(), 1.0);
        assert!(gt_overlap_labels(&p, &q, &t, 1e-6).unwrap().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn disjoint_clouds() {
        let p = random_cloud(50, 3);
        let q = RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0)).apply(&p);
        let id = RigidTransform::identity();
        assert_eq!(overlap_ratio(&p, &q, &id, 0.1).unwrap(), 0.0);
        assert!(gt_overlap_labels(&p, &q, &id, 0.1).unwrap().iter().all(|&l| l == 0.0));
        let c = gt_correspondences(&p, &q, &id, 0.1, 0.2).unwrap();
        assert!(c.matchable_anchors().is_empty());
        assert_eq!(c.negatives(0), (0..q.len()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_target() {
        let p = random_cloud(5, 0);
        let e = PointCloud::default();
        let id = RigidTransform::identity();
        assert_eq!(overlap_ratio(&p, &e, &id, 0.1).unwrap(), 0.0);
        assert_eq!(gt_overlap_labels(&p, &e, &id, 0.1).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn half_split() {
        let v = 0.05;
        let p = random_cloud(200, 7);
        let t = tf(8);
        let mut qpts: Vec<Point> = t.apply(&p).into_points();
        // Displace the second half far away from everything.
        for q in qpts.iter_mut().skip(100) {
            *q += Vector3::new(50.0 + 10.0 * v, 0.0, 0.0);
        }
        let q = PointCloud::new(qpts).unwrap();
        let aligned = t.apply(&p);
        let oracle = aligned.iter().filter(|y| brute_nn(y, &q) <= v).count() as f64 / 200.0;
        assert_eq!(oracle, 0.5);
        assert_eq!(overlap_ratio(&p, &q, &t, v).unwrap(), oracle);
    }

    #[test]
    fn labels_match_exhaustive_oracle() {
        let p = random_cloud(150, 21);
        let q = random_cloud(120, 22);
        let t = tf(23);
        let labels = gt_overlap_labels(&p, &q, &t, 0.2).unwrap();
        for (i, x) in p.iter().enumerate() {
            let want = if brute_nn(&t.apply_point(x), &q) < 0.2 { 1.0 } else { 0.0 };
            assert_eq!(labels[i], want);
        }
    }

    #[test]
    fn self_copy_is_positive() {
        let p = random_cloud(80, 30);
        let t = tf(31);
        let q = t.apply(&p);
        let c = gt_correspondences(&p, &q, &t, 0.05, 0.2).unwrap();
        for i in 0..p.len() {
            assert!(c.positives[i].contains(&i));
        }
    }

    #[test]
    fn correspondences_match_distance_filter() {
        let p = random_cloud(100, 40);
        let q = random_cloud(90, 41);
        let t = tf(42);
        let (rp, rs) = (0.25, 0.5);
        let c = gt_correspondences(&p, &q, &t, rp, rs).unwrap();
        for (i, x) in p.iter().enumerate() {
            let y = t.apply_point(x);
            let pos: Vec<usize> = (0..q.len()).filter(|&j| (q[j] - y).norm() <= rp).collect();
            let neg: Vec<usize> = (0..q.len()).filter(|&j| (q[j] - y).norm() > rs).collect();
            assert_eq!(c.positives[i], pos);
            assert_eq!(c.negatives(i), neg);
            assert_eq!(c.is_matchable(i), !pos.is_empty());
        }
    }

    #[test]
    fn rejects_bad_radii() {
        let p = random_cloud(5, 0);
        assert!(gt_correspondences(&p, &p, &RigidTransform::identity(), 0.2, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn overlap_monotone_in_tolerance(seed in 0u64..500, v in 0.01f64..0.5, dv in 0.0f64..0.5) {
            let p = random_cloud(60, seed);
            let q = random_cloud(60, seed + 1);
            let t = tf(seed + 2);
            prop_assert!(overlap_ratio(&p, &q, &t, v).unwrap() <= overlap_ratio(&p, &q, &t, v + dv).unwrap());
        }

        #[test]
        fn labels_mean_equals_overlap(seed in 0u64..500, v in 0.05f64..0.5) {
            let p = random_cloud(60, seed);
            let q = random_cloud(60, seed + 1);
            let t = tf(seed + 2);
            let labels = gt_overlap_labels(&p, &q, &t, v).unwrap();
            let mean = labels.iter().sum::<f64>() / labels.len() as f64;
            prop_assert_eq!(mean, overlap_ratio(&p, &q, &t, v).unwrap());
        }
    }
}
