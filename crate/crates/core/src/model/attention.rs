use super::blocks::{edge_conv, h_theta};
use super::encoder::EncodedVars;
use super::pyramid::CloudPyramid;
use super::{linear, norm, project, ModelConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::NeighborGraph;

/// Bottleneck handles for one cloud.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub gnn: Var,
    pub conditioned: Var,
    /// `N′ × 1`.
    pub overlap: Var,
    /// `N′ × 1`.
    pub cross_overlap: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub src: StateVars,
    pub tgt: StateVars,
}

/// Two unshared rounds of edge convolution followed by a projection of the
/// three stages.
pub fn gnn_block(g: &mut Graph, params: &ParamStore, name: &str, x: Var, graph: &NeighborGraph) -> Result<Var> {
    let x1 = edge_conv(g, params, &format!("{name}.r1"), x, graph, None)?;
    let x2 = edge_conv(g, params, &format!("{name}.r2"), x1, graph, None)?;
    let cat = g.concat_cols(&[x, x1, x2])?;
    h_theta(g, params, &format!("{name}.out"), cat)
}

/// Multi-head attention from `x_src` over `x_dst` with a residual MLP on
/// `cat[s, m]`.
///
/// With `evidence`, the per-head log-sum-exp of the attention logits is
/// appended to the MLP input, so the strength of the best match survives
/// the softmax normalization.
pub fn cross_attention(g: &mut Graph, params: &ParamStore, name: &str, x_src: Var, x_dst: Var, heads: usize, evidence: bool) -> Result<Var> {
    let b = g.shape(x_src).1;
    if heads == 0 || !b.is_multiple_of(heads) || g.shape(x_dst).1 != b {
        return Err(Error::shape(format!("width {b} with {heads} heads")));
    }
    let s = linear(g, params, &format!("{name}.s"), x_src)?;
    let k = project(g, params, &format!("{name}.k"), x_dst)?;
    let v = project(g, params, &format!("{name}.v"), x_dst)?;
    let hw = b / heads;
    let scale = 1.0 / (b as f64).sqrt();
    let mut messages = Vec::with_capacity(heads);
    let mut lse = Vec::new();
    for h in 0..heads {
        let sh = g.slice_cols(s, h * hw, hw)?;
        let kh = g.slice_cols(k, h * hw, hw)?;
        let vh = g.slice_cols(v, h * hw, hw)?;
        let logits = g.matmul_nt(sh, kh)?;
        let logits = g.scale(logits, scale);
        if evidence {
            lse.push(g.logsumexp_rows(logits));
        }
        let a = g.softmax_rows(logits);
        messages.push(g.matmul(a, vh)?);
    }
    let m = g.concat_cols(&messages)?;
    let mut y = g.concat_cols(&[[s, m].as_slice(), &lse].concat())?;
    for layer in 0..2 {
        let lname = format!("{name}.mlp{layer}");
        y = project(g, params, &lname, y)?;
        y = norm(g, params, &format!("{lname}.norm"), y)?;
        y = g.relu(y);
    }
    let y = linear(g, params, &format!("{name}.mlp2"), y)?;
    g.add(x_src, y)
}

/// `sigmoid(F′ w + b)` as an `N′ × 1` column.
pub fn overlap_scores(g: &mut Graph, params: &ParamStore, name: &str, features: Var) -> Result<Var> {
    let z = linear(g, params, name, features)?;
    Ok(g.sigmoid(z))
}

/// Soft assignment of each row of `f_p` onto `f_q` (unit-normalized inner
/// products over temperature `t`), applied to `o_q`.
pub fn cross_overlap(g: &mut Graph, f_p: Var, f_q: Var, o_q: Var, t: f64) -> Result<Var> {
    if !(t > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let np = g.l2_normalize_rows(f_p);
    let nq = g.l2_normalize_rows(f_q);
    let sim = g.matmul_nt(np, nq)?;
    let sim = g.scale(sim, 1.0 / t);
    let w = g.softmax_rows(sim);
    g.matmul(w, o_q)
}

pub fn bottleneck_forward(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    src: &CloudPyramid,
    tgt: &CloudPyramid,
    enc_src: &EncodedVars,
    enc_tgt: &EncodedVars,
) -> Result<BottleneckVars> {
    let (gs, gt) = (&src.coarsest().graph, &tgt.coarsest().graph);
    let xs = *enc_src.features.last().ok_or_else(|| Error::invalid("empty encoding"))?;
    let xt = *enc_tgt.features.last().ok_or_else(|| Error::invalid("empty encoding"))?;
    let gnn_s = gnn_block(g, params, "gnn1", xs, gs)?;
    let gnn_t = gnn_block(g, params, "gnn1", xt, gt)?;
    let ca_s = cross_attention(g, params, "ca", gnn_s, gnn_t, cfg.heads, cfg.attention_evidence)?;
    let ca_t = cross_attention(g, params, "ca", gnn_t, gnn_s, cfg.heads, cfg.attention_evidence)?;
    let f_s = gnn_block(g, params, "gnn2", ca_s, gs)?;
    let f_t = gnn_block(g, params, "gnn2", ca_t, gt)?;
    let o_s = overlap_scores(g, params, "score", f_s)?;
    let o_t = overlap_scores(g, params, "score", f_t)?;
    let co_s = cross_overlap(g, f_s, f_t, o_t, cfg.temperature)?;
    let co_t = cross_overlap(g, f_t, f_s, o_s, cfg.temperature)?;
    Ok(BottleneckVars {
        src: StateVars { gnn: gnn_s, conditioned: f_s, overlap: o_s, cross_overlap: co_s },
        tgt: StateVars { gnn: gnn_t, conditioned: f_t, overlap: o_t, cross_overlap: co_t },
    })
}
