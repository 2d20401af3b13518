use std::collections::HashMap;

use nalgebra::Vector3;
use rand::Rng;

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoxelMode {
    /// One input point per voxel, chosen by the seeded RNG.
    PickOne,
    /// Mean of the voxel's points.
    Centroid,
}

/// Occupied voxels in order of first occurrence, with their member indices.
#[derive(Clone, Debug)]
pub struct VoxelClusters {
    pub members: Vec<Vec<usize>>,
    /// For each input point, the index of its voxel in `members`.
    pub assignment: Vec<usize>,
}

fn voxel_key(p: &Point, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

pub fn voxel_clusters(cloud: &PointCloud, size: f64) -> Result<VoxelClusters> {
    if !(size > 0.0) {
        return Err(Error::invalid("voxel size must be positive"));
    }
    let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut assignment = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.iter().enumerate() {
        let slot = *lookup.entry(voxel_key(p, size)).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
        assignment.push(slot);
    }
    Ok(VoxelClusters { members, assignment })
}

/// Voxel-grid filter with edge length `size`; at most one output point per
/// occupied voxel, in order of first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, size: f64, seed: u64, mode: VoxelMode) -> Result<PointCloud> {
    let clusters = voxel_clusters(cloud, size)?;
    let mut rng = rng::seeded(seed);
    let points = clusters
        .members
        .iter()
        .map(|m| match mode {
            VoxelMode::PickOne => cloud[m[rng.random_range(0..m.len())]],
            VoxelMode::Centroid => {
                let sum = m.iter().fold(Vector3::zeros(), |acc, &i| acc + cloud[i].coords);
                Point::from(sum / m.len() as f64)
            }
        })
        .collect();
    Ok(PointCloud::from_points_unchecked(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn one_voxel_pick_one() {
        let p = PointCloud::from_xyz(&[[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [0.4, 0.4, 0.4]]).unwrap();
        let out = voxel_downsample(&p, 1.0, 3, VoxelMode::PickOne).unwrap();
        assert_eq!(out.len(), 1);
        assert!(p.iter().any(|q| *q == out[0]));
    }

    #[test]
    fn sparse_grid_unchanged() {
        let v = 0.1;
        let mut pts = Vec::new();
        for x in -3..3 {
            for y in -3..3 {
                for z in -2..2 {
                    pts.push([(x as f64 + 0.25) * 2.0 * v, (y as f64 + 0.25) * 2.0 * v, (z as f64 + 0.25) * 2.0 * v]);
                }
            }
        }
        let p = PointCloud::from_xyz(&pts).unwrap();
        for mode in [VoxelMode::PickOne, VoxelMode::Centroid] {
            let out = voxel_downsample(&p, v, 0, mode).unwrap();
            assert_eq!(out.len(), p.len());
            for (a, b) in out.iter().zip(&p) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn count_matches_distinct_voxels() {
        let mut r = rng::seeded(4);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        let p = PointCloud::from_xyz(&pts).unwrap();
        let size = 0.17;
        // Oracle: distinct keys from per-axis floor division.
        let distinct: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|c| ((c[0] / size).floor() as i64, (c[1] / size).floor() as i64, (c[2] / size).floor() as i64))
            .collect();
        let out = voxel_downsample(&p, size, 1, VoxelMode::Centroid).unwrap();
        assert_eq!(out.len(), distinct.len());
    }

    #[test]
    fn negative_coordinates_split_at_zero() {
        let p = PointCloud::from_xyz(&[[-0.01, 0.0, 0.0], [0.01, 0.0, 0.0]]).unwrap();
        assert_eq!(voxel_downsample(&p, 1.0, 0, VoxelMode::Centroid).unwrap().len(), 2);
    }

    #[test]
    fn empty_and_invalid() {
        let e = PointCloud::default();
        assert!(voxel_downsample(&e, 0.1, 0, VoxelMode::PickOne).unwrap().is_empty());
        assert!(voxel_downsample(&e, 0.0, 0, VoxelMode::PickOne).is_err());
    }
}
