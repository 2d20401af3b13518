use nalgebra::{Matrix3, Vector3};

use super::{norm, project, EdgeFeatures};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geometry::{NeighborGraph, PointCloud};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Four numbers per edge, laid out source-major like the graph.
#[derive(Clone, Debug)]
pub struct EdgeGeometry {
    pub features: Tensor,
}

/// Unoriented normal of each point from the covariance of itself and its
/// graph neighbors.
fn normals(points: &PointCloud, graph: &NeighborGraph) -> Vec<Vector3<f64>> {
    (0..graph.num_sources())
        .map(|i| {
            let nb = graph.neighbors(i);
            let pts = std::iter::once(&points[i]).chain(nb.iter().map(|&j| &points[j]));
            let n = (nb.len() + 1) as f64;
            let mean = pts.clone().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
            let cov = pts.fold(Matrix3::zeros(), |a, p| {
                let d = p.coords - mean;
                a + d * d.transpose()
            });
            let eig = cov.symmetric_eigen();
            eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
        })
        .collect()
}

impl EdgeGeometry {
    pub const WIDTH: usize = 4;

    pub fn new(points: &PointCloud, graph: &NeighborGraph, scale: f64, kind: EdgeFeatures) -> Self {
        let k = graph.k();
        let mut data = Vec::with_capacity(graph.edges().len() * Self::WIDTH);
        let normals = match kind {
            EdgeFeatures::Relative => Vec::new(),
            EdgeFeatures::Invariant => normals(points, graph),
        };
        for i in 0..graph.num_sources() {
            for &j in graph.neighbors(i) {
                let d = (points[j] - points[i]) / scale;
                match kind {
                    EdgeFeatures::Relative => data.extend_from_slice(&[d.x, d.y, d.z, d.norm()]),
                    EdgeFeatures::Invariant => {
                        let len = d.norm();
                        let u = if len > 0.0 { d / len } else { d };
                        let (ni, nj) = (&normals[i], &normals[j]);
                        data.extend_from_slice(&[len, ni.dot(&u).abs(), nj.dot(&u).abs(), ni.dot(nj).abs()]);
                    }
                }
            }
        }
        let rows = graph.num_sources() * k;
        Self { features: Tensor::matrix(rows, Self::WIDTH, data).expect("row count") }
    }
}

/// `lrelu(norm(x W))`; a bias would be cancelled by the normalization.
pub fn h_theta(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = project(g, params, name, x)?;
    let y = norm(g, params, &format!("{name}.norm"), y)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

/// `max_j h(cat[x_i, x_j − x_i, geo_ij])` over the edges of `graph`.
///
/// The linear part is split per point, `x_i (A − B) + x_j B`, so only the
/// edge sum touches the edge count.
pub fn edge_conv(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    x: Var,
    graph: &NeighborGraph,
    geometry: Option<&EdgeGeometry>,
) -> Result<Var> {
    let k = graph.k();
    let ws = g.param(params, &format!("{name}.self"))?;
    let wn = g.param(params, &format!("{name}.nbr"))?;
    let xs = g.matmul(x, ws)?;
    let xn = g.matmul(x, wn)?;
    let center = g.sub(xs, xn)?;
    let geo = match geometry {
        Some(edges) => Some((&edges.features, g.param(params, &format!("{name}.geo"))?)),
        None => None,
    };
    let e = g.edge_sum(center, xn, graph.edges(), k, geo)?;
    let e = norm(g, params, &format!("{name}.norm"), e)?;
    let e = g.leaky_relu(e, LEAKY_SLOPE);
    g.neighborhood_max(e, k)
}
