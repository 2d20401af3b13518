use super::blocks::EdgeGeometry;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{knn_self, voxel_clusters, voxel_downsample, KdTree, NeighborGraph, PointCloud, VoxelMode};

/// Geometry of one pyramid level; independent of the parameters, so it can
/// be built once per cloud and reused across training steps.
#[derive(Clone, Debug)]
pub struct LevelGeometry {
    pub points: PointCloud,
    pub graph: NeighborGraph,
    pub edges: EdgeGeometry,
    /// Voxel of the next-coarser level each point pools into.
    pub pool: Option<Vec<usize>>,
    /// Nearest point of the next-coarser level.
    pub parent_index: Option<Vec<usize>>,
}

impl LevelGeometry {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Levels finest first; level 0 is the input cloud.
#[derive(Clone, Debug)]
pub struct CloudPyramid {
    pub levels: Vec<LevelGeometry>,
}

impl CloudPyramid {
    pub fn coarsest(&self) -> &LevelGeometry {
        self.levels.last().expect("at least one level")
    }

    pub fn input(&self) -> &PointCloud {
        &self.levels[0].points
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(LevelGeometry::len).collect()
    }
}

pub fn build_pyramid(cloud: &PointCloud, cfg: &ModelConfig) -> Result<CloudPyramid> {
    cfg.validate()?;
    let k = cfg.k_graph;
    let mut clouds = vec![cloud.clone()];
    let mut pools = Vec::new();
    for l in 1..cfg.levels() {
        let size = cfg.voxel_size * (1u64 << l) as f64;
        let prev = &clouds[l - 1];
        let clusters = voxel_clusters(prev, size)?;
        let coarse = voxel_downsample(prev, size, 0, VoxelMode::Centroid)?;
        pools.push(clusters.assignment);
        clouds.push(coarse);
    }
    let mut levels = Vec::with_capacity(clouds.len());
    for (l, points) in clouds.iter().enumerate() {
        if points.len() < k + 1 {
            return Err(Error::InsufficientPoints { level: l, have: points.len(), need: k + 1 });
        }
        let graph = knn_self(points, k)?;
        let scale = cfg.voxel_size * (1u64 << l) as f64;
        let edges = EdgeGeometry::new(points, &graph, scale, cfg.edge_features);
        let parent_index = clouds.get(l + 1).map(|coarse| {
            let tree = KdTree::build(coarse);
            points.iter().map(|p| tree.nearest(p).expect("nonempty").0).collect()
        });
        levels.push(LevelGeometry { points: points.clone(), graph, edges, pool: pools.get(l).cloned(), parent_index });
    }
    Ok(CloudPyramid { levels })
}
