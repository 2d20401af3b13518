//! Shared-weight encoder, overlap-attention bottleneck and decoder.

mod attention;
mod blocks;
mod encoder;
mod pyramid;


use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, InitScheme, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::derive_seed;

pub use attention::{bottleneck_forward, cross_attention, cross_overlap, gnn_block, overlap_scores, BottleneckVars, StateVars};
pub use blocks::{edge_conv, h_theta, EdgeGeometry, LEAKY_SLOPE};
pub use encoder::{decode, encode, encode_vars, EncodedVars, ScoredVars};
pub use pyramid::{build_pyramid, CloudPyramid, LevelGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width per pyramid level, finest first. The last entry is the
    /// bottleneck width `b`.
    pub widths: Vec<usize>,
    pub k_graph: usize,
    pub heads: usize,
    pub temperature: f64,
    /// Base voxel size; level `l` uses `2^l · voxel_size`.
    pub voxel_size: f64,
    pub descriptor_dim: usize,
    pub input_features: InputFeatures,
    pub edge_features: EdgeFeatures,
    /// Feed the attention log-normalizers to the cross-attention MLP.
    pub attention_evidence: bool,
}

/// Geometry attached to each encoder edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeatures {
    /// `[(p_j − p_i)/s, ‖p_j − p_i‖/s]` in the cloud's own frame.
    Relative,
    /// Rotation-invariant `[‖d‖/s, |n_i·d̂|, |n_j·d̂|, |n_i·n_j|]` with
    /// unoriented PCA normals.
    Invariant,
}

/// Per-point features fed to the first encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeatures {
    /// A constant 1 per point; all geometry enters through edge offsets.
    Ones,
    /// `[1, p − centroid]`.
    CenteredXyz,
}

impl InputFeatures {
    pub fn width(self) -> usize {
        match self {
            InputFeatures::Ones => 1,
            InputFeatures::CenteredXyz => 4,
        }
    }

    pub fn build(self, cloud: &PointCloud) -> Tensor {
        let n = cloud.len();
        match self {
            InputFeatures::Ones => Tensor::column(vec![1.0; n]),
            InputFeatures::CenteredXyz => {
                let c = cloud.centroid().unwrap_or_else(Point::origin);
                let data = cloud.iter().flat_map(|p| [1.0, p.x - c.x, p.y - c.y, p.z - c.z]).collect();
                Tensor::matrix(n, 4, data).expect("four columns")
            }
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            k_graph: 10,
            heads: 4,
            temperature: 0.02,
            voxel_size: 0.06,
            descriptor_dim: 32,
            input_features: InputFeatures::Ones,
            edge_features: EdgeFeatures::Relative,
            attention_evidence: false,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be nonempty and positive".into()));
        }
        if self.k_graph == 0 {
            return Err(Error::Config("k_graph must be at least 1".into()));
        }
        if self.heads == 0 || !self.bottleneck_width().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "bottleneck width {} not divisible by {} heads",
                self.bottleneck_width(),
                self.heads
            )));
        }
        if !(self.temperature > 0.0) || !(self.voxel_size > 0.0) || self.descriptor_dim == 0 {
            return Err(Error::Config("temperature, voxel_size and descriptor_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder level with its feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub points: PointCloud,
    pub features: Tensor,
    /// Nearest point of the next-coarser level; `None` at the coarsest.
    pub parent_index: Option<Vec<usize>>,
}

/// Per-point network outputs for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCloud {
    /// `N × descriptor_dim`, unit rows.
    pub descriptors: Tensor,
    pub overlap: Vec<f64>,
    pub matchability: Vec<f64>,
}

impl ScoredCloud {
    pub fn len(&self) -> usize {
        self.overlap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overlap.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        self.descriptors.row(i)
    }
}

/// Graph handles for one forward pass over a pair.
#[derive(Clone, Debug)]
pub struct PairVars {
    pub src: ScoredVars,
    pub tgt: ScoredVars,
    pub bottleneck: BottleneckVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    counter: u64,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.counter += 1;
        let s = derive_seed(self.seed, self.counter);
        self.store.init(&format!("{name}.w"), vec![fan_in, fan_out], InitScheme::XavierUniform, s)?;
        self.store.init(&format!("{name}.b"), vec![fan_out], InitScheme::Zeros, s)
    }

    /// Weight without bias, for layers whose output is normalized or fed
    /// through a softmax that cancels a constant shift.
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.counter += 1;
        let s = derive_seed(self.seed, self.counter);
        self.store.init(&format!("{name}.w"), vec![fan_in, fan_out], InitScheme::XavierUniform, s)
    }

    fn norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.store.init(&format!("{name}.gamma"), vec![width], InitScheme::Ones, 0)?;
        self.store.init(&format!("{name}.beta"), vec![width], InitScheme::Zeros, 0)
    }

    fn edge_conv(&mut self, name: &str, c_in: usize, c_out: usize, geometric: bool) -> Result<()> {
        self.counter += 1;
        let s = derive_seed(self.seed, self.counter);
        // The two halves of the weight on cat[x_i, x_j − x_i] share one fan.
        let fan_in = 2 * c_in + if geometric { EdgeGeometry::WIDTH } else { 0 };
        let bound = (6.0 / (fan_in + c_out) as f64).sqrt();
        for (k, part) in ["self", "nbr"].into_iter().enumerate() {
            let key = format!("{name}.{part}");
            self.store.init(&key, vec![c_in, c_out], InitScheme::XavierUniform, derive_seed(s, k as u64))?;
            rescale(self.store, &key, bound, c_in + c_out);
        }
        if geometric {
            let key = format!("{name}.geo");
            self.store.init(&key, vec![EdgeGeometry::WIDTH, c_out], InitScheme::XavierUniform, derive_seed(s, 2))?;
            rescale(self.store, &key, bound, EdgeGeometry::WIDTH + c_out);
        }
        self.norm(&format!("{name}.norm"), c_out)
    }
}

/// Shrinks a Xavier tensor drawn for `fan_sum` to the bound of the full
/// concatenated fan.
fn rescale(store: &mut ParamStore, name: &str, bound: f64, fan_sum: usize) {
    let own = (6.0 / fan_sum as f64).sqrt();
    if let Some(t) = store.get_mut(name) {
        t.data_mut().iter_mut().for_each(|v| *v *= bound / own);
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters; identical seeds give identical stores.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed, counter: 0 };
        let w = &self.cfg.widths;
        let b = self.cfg.bottleneck_width();
        for (l, &c) in w.iter().enumerate() {
            let c_in = if l == 0 { self.cfg.input_features.width() } else { w[l - 1] };
            init.edge_conv(&format!("enc.l{l}.a"), c_in, c, true)?;
            init.edge_conv(&format!("enc.l{l}.b"), c, c, true)?;
        }
        for gnn in ["gnn1", "gnn2"] {
            init.edge_conv(&format!("{gnn}.r1"), b, b, false)?;
            init.edge_conv(&format!("{gnn}.r2"), b, b, false)?;
            init.weight(&format!("{gnn}.out"), 3 * b, b)?;
            init.norm(&format!("{gnn}.out.norm"), b)?;
        }
        init.linear("ca.s", b, b)?;
        init.weight("ca.k", b, b)?;
        init.weight("ca.v", b, b)?;
        let extra = if self.cfg.attention_evidence { self.cfg.heads } else { 0 };
        init.weight("ca.mlp0", 2 * b + extra, 2 * b)?;
        init.norm("ca.mlp0.norm", 2 * b)?;
        init.weight("ca.mlp1", 2 * b, 2 * b)?;
        init.norm("ca.mlp1.norm", 2 * b)?;
        init.linear("ca.mlp2", 2 * b, b)?;
        init.linear("score", b, 1)?;
        let mut prev = b + 2;
        for l in (0..w.len().saturating_sub(1)).rev() {
            init.weight(&format!("dec.l{l}"), prev + w[l], w[l])?;
            init.norm(&format!("dec.l{l}.norm"), w[l])?;
            prev = w[l];
        }
        init.linear("head.desc", prev, self.cfg.descriptor_dim)?;
        init.linear("head.overlap", prev, 1)?;
        init.linear("head.match", prev, 1)?;
        store.quantize_f32();
        Ok(store)
    }

    pub fn pyramid(&self, cloud: &PointCloud) -> Result<CloudPyramid> {
        build_pyramid(cloud, &self.cfg)
    }

    /// Full forward pass over a pair of prepared pyramids.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, src: &CloudPyramid, tgt: &CloudPyramid) -> Result<PairVars> {
        let enc_src = encode_vars(g, params, src, self.cfg.input_features)?;
        let enc_tgt = encode_vars(g, params, tgt, self.cfg.input_features)?;
        let bottleneck = bottleneck_forward(g, params, &self.cfg, src, tgt, &enc_src, &enc_tgt)?;
        let src_out = decode(g, params, src, &enc_src, bottleneck.src.conditioned, bottleneck.src.overlap, bottleneck.src.cross_overlap)?;
        let tgt_out = decode(g, params, tgt, &enc_tgt, bottleneck.tgt.conditioned, bottleneck.tgt.overlap, bottleneck.tgt.cross_overlap)?;
        Ok(PairVars { src: src_out, tgt: tgt_out, bottleneck })
    }

    /// Inference on two clouds.
    pub fn infer(&self, params: &ParamStore, src: &PointCloud, tgt: &PointCloud) -> Result<(ScoredCloud, ScoredCloud)> {
        let (ps, pt) = (self.pyramid(src)?, self.pyramid(tgt)?);
        self.infer_prepared(params, &ps, &pt)
    }

    pub fn infer_prepared(&self, params: &ParamStore, src: &CloudPyramid, tgt: &CloudPyramid) -> Result<(ScoredCloud, ScoredCloud)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, src, tgt)?;
        Ok((out.src.extract(&g), out.tgt.extract(&g)))
    }
}

impl ScoredVars {
    pub fn extract(&self, g: &Graph) -> ScoredCloud {
        ScoredCloud {
            descriptors: g.value(self.descriptors).clone(),
            overlap: g.value(self.overlap).data().to_vec(),
            matchability: g.value(self.matchability).data().to_vec(),
        }
    }
}

/// Convenience: binds `name.w`/`name.b` and applies them.
pub(crate) fn linear(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// Convenience: binds `name.w` and multiplies.
pub(crate) fn project(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    g.matmul(x, w)
}

/// Convenience: binds `name.gamma`/`name.beta` and normalizes.
pub(crate) fn norm(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(params, &format!("{name}.gamma"))?;
    let beta = g.param(params, &format!("{name}.beta"))?;
    g.instance_norm(x, gamma, beta)
}
