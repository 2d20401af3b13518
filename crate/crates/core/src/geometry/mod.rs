//! Exact geometric primitives: clouds, rigid transforms, neighbor queries,
//! voxel filtering and ground-truth overlap labels.

mod kdtree;
mod overlap;
mod voxel;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kdtree::KdTree;
pub use overlap::{gt_correspondences, gt_overlap_labels, overlap_ratio, GtCorrespondences};
pub use voxel::{voxel_clusters, voxel_downsample, VoxelClusters, VoxelMode};

pub type Point = Point3<f64>;

/// Ordered set of 3D positions in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point::new(c[0], c[1], c[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point::from(sum / self.points.len() as f64))
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

const ORTHO_TOL: f64 = 1e-9;

/// Rotation plus translation, mapping `x` to `R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 12]", into = "[f64; 12]")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and a positive determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHO_TOL {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(*axis, 1e-15) {
            Some(axis) => Rotation3::from_axis_angle(&axis, angle).into_inner(),
            None => Matrix3::identity(),
        };
        Self { rotation, translation }
    }

    /// Row-major `[R | t]`, twelve numbers.
    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        Point::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    pub fn invert(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 12]> for RigidTransform {
    type Error = Error;

    fn try_from(v: [f64; 12]) -> Result<Self> {
        Self::from_row_major(&v)
    }
}

impl From<RigidTransform> for [f64; 12] {
    fn from(t: RigidTransform) -> Self {
        t.to_row_major()
    }
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    t.apply(cloud)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

/// k nearest targets for every source, flattened row by row.
///
/// Neighbor lists are sorted by ascending distance with ties broken by
/// ascending target index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    edges: Vec<usize>,
}

impl NeighborGraph {
    pub fn new(k: usize, edges: Vec<usize>) -> Result<Self> {
        if k == 0 || !edges.len().is_multiple_of(k) {
            return Err(Error::invalid("neighbor graph needs k >= 1 and len divisible by k"));
        }
        Ok(Self { k, edges })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_sources(&self) -> usize {
        self.edges.len() / self.k
    }

    pub fn neighbors(&self, source: usize) -> &[usize] {
        &self.edges[source * self.k..(source + 1) * self.k]
    }

    /// Flat `num_sources * k` edge target list.
    pub fn edges(&self) -> &[usize] {
        &self.edges
    }
}

/// Exact k-nearest-neighbor graph from `sources` into `targets`, with `k`
/// clamped to the number of targets.
pub fn knn(sources: &PointCloud, targets: &PointCloud, k: usize) -> Result<NeighborGraph> {
    if targets.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let k = k.min(targets.len());
    let tree = KdTree::build(targets);
    let mut edges = Vec::with_capacity(sources.len() * k);
    for p in sources {
        edges.extend(tree.k_nearest(p, k).into_iter().map(|(i, _)| i));
    }
    NeighborGraph::new(k, edges)
}

/// kNN graph of a cloud over itself with each point excluded from its own
/// list. A single-point cloud links to itself since nothing else exists.
pub fn knn_self(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    if cloud.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if cloud.len() == 1 {
        return NeighborGraph::new(1, vec![0]);
    }
    let k = k.min(cloud.len() - 1);
    let tree = KdTree::build(cloud);
    let mut edges = Vec::with_capacity(cloud.len() * k);
    for (i, p) in cloud.iter().enumerate() {
        let found = tree.k_nearest(p, k + 1);
        edges.extend(found.into_iter().map(|(j, _)| j).filter(|&j| j != i).take(k));
    }
    NeighborGraph::new(k, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
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

    fn random_transform(seed: u64) -> RigidTransform {
        let mut r = rng::seeded(seed);
        let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let t = Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        RigidTransform::from_axis_angle(&axis, r.random_range(-3.0..3.0), t)
    }

    fn exhaustive_knn(sources: &PointCloud, targets: &PointCloud, k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for p in sources {
            let mut d: Vec<(f64, usize)> =
                targets.iter().enumerate().map(|(j, q)| ((p - q).norm_squared(), j)).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(d.iter().take(k).map(|x| x.1));
        }
        out
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let p = random_cloud(20, 1);
        assert_eq!(RigidTransform::identity().apply(&p), p);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let out = t.apply(&PointCloud::from_xyz(&[[1.0, 0.0, 0.0]]).unwrap());
        assert!((out[0] - Point::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        for seed in 0..10 {
            let t = random_transform(seed);
            let p = random_cloud(100, seed + 100);
            let back = t.invert().apply(&t.apply(&p));
            for (a, b) in back.iter().zip(&p) {
                assert!((a - b).norm() < 1e-9);
            }
            let id = t.compose(&t.invert());
            assert!((id.rotation() - Matrix3::identity()).amax() < 1e-9);
            assert!(id.translation().amax() < 1e-9);
        }
    }

    #[test]
    fn invert_identity_and_translation() {
        assert_eq!(RigidTransform::identity().invert(), RigidTransform::identity());
        let t = RigidTransform::from_translation(Vector3::new(1.0, -2.0, 3.0));
        assert_eq!(*t.invert().translation(), Vector3::new(-1.0, 2.0, -3.0));
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let t = random_transform(3);
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()).unwrap(), t);
    }

    #[test]
    fn knn_single_self() {
        let a = PointCloud::from_xyz(&[[0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(knn(&a, &a, 1).unwrap().neighbors(0), &[0]);
    }

    #[test]
    fn knn_collinear() {
        let targets = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let src = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&src, &targets, 3).unwrap().neighbors(0), &[0, 1, 2]);
        assert_eq!(knn_self(&targets, 2).unwrap().neighbors(0), &[1, 2]);
    }

    #[test]
    fn knn_empty_targets() {
        let a = random_cloud(3, 0);
        assert!(matches!(knn(&a, &PointCloud::default(), 1), Err(Error::EmptyTargetSet)));
    }

    #[test]
    fn knn_clamps_k() {
        let a = random_cloud(4, 9);
        let g = knn(&a, &a, 10).unwrap();
        assert_eq!(g.k(), 4);
        assert_eq!(knn_self(&a, 10).unwrap().k(), 3);
    }

    #[test]
    fn knn_matches_exhaustive_scan() {
        let s = random_cloud(200, 11);
        let t = random_cloud(200, 12);
        assert_eq!(knn(&s, &t, 8).unwrap().edges(), exhaustive_knn(&s, &t, 8).as_slice());
    }

    #[test]
    fn knn_ties_break_by_index() {
        // Four points equidistant from the origin.
        let t = PointCloud::from_xyz(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).unwrap();
        let s = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&s, &t, 3).unwrap().neighbors(0), &[0, 1, 2]);
    }

    #[test]
    fn knn_grid_ties_match_exhaustive() {
        let mut pts = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let c = PointCloud::from_xyz(&pts).unwrap();
        assert_eq!(knn(&c, &c, 7).unwrap().edges(), exhaustive_knn(&c, &c, 7).as_slice());
    }

    proptest! {
        #[test]
        fn transform_is_isometry(seed in 0u64..1000) {
            let p = random_cloud(30, seed);
            let q = random_transform(seed ^ 0xabc).apply(&p);
            for i in 0..p.len() {
                for j in 0..p.len() {
                    let d0 = (p[i] - p[j]).norm();
                    let d1 = (q[i] - q[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn knn_invariant_under_joint_rigid_motion(seed in 0u64..1000) {
            let s = random_cloud(40, seed);
            let t = random_cloud(60, seed + 1);
            let tf = random_transform(seed + 2);
            let a = knn(&s, &t, 5).unwrap();
            let b = knn(&tf.apply(&s), &tf.apply(&t), 5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
