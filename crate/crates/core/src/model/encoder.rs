use super::blocks::{edge_conv, h_theta};
use super::pyramid::CloudPyramid;
use super::{linear, InputFeatures, PyramidLevel};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Encoder outputs, one feature matrix per level.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub features: Vec<Var>,
}

/// Decoder outputs for one cloud.
#[derive(Clone, Copy, Debug)]
pub struct ScoredVars {
    pub descriptors: Var,
    /// `N × 1` overlap probabilities.
    pub overlap: Var,
    pub matchability: Var,
}

pub fn encode_vars(g: &mut Graph, params: &ParamStore, pyramid: &CloudPyramid, input: InputFeatures) -> Result<EncodedVars> {
    let mut x = g.constant(input.build(pyramid.input()));
    let mut features = Vec::with_capacity(pyramid.levels.len());
    for (l, level) in pyramid.levels.iter().enumerate() {
        if l > 0 {
            let prev = &pyramid.levels[l - 1];
            let pool = prev.pool.as_ref().ok_or_else(|| Error::invalid("missing pooling map"))?;
            x = g.segment_max(x, pool, level.len())?;
        }
        let a = edge_conv(g, params, &format!("enc.l{l}.a"), x, &level.graph, Some(&level.edges))?;
        let b = edge_conv(g, params, &format!("enc.l{l}.b"), a, &level.graph, Some(&level.edges))?;
        x = g.add(a, b)?;
        features.push(x);
    }
    Ok(EncodedVars { features })
}

/// Encoder pyramid with feature values, finest first.
pub fn encode(params: &ParamStore, pyramid: &CloudPyramid, input: InputFeatures) -> Result<Vec<PyramidLevel>> {
    let mut g = Graph::new();
    let enc = encode_vars(&mut g, params, pyramid, input)?;
    Ok(pyramid
        .levels
        .iter()
        .zip(&enc.features)
        .map(|(level, &f)| PyramidLevel {
            points: level.points.clone(),
            features: g.value(f).clone(),
            parent_index: level.parent_index.clone(),
        })
        .collect())
}

/// Upsamples `[F′, o′, õ′]` back to the input resolution through the skip
/// features and applies the three heads.
pub fn decode(
    g: &mut Graph,
    params: &ParamStore,
    pyramid: &CloudPyramid,
    encoded: &EncodedVars,
    conditioned: Var,
    overlap: Var,
    cross_overlap: Var,
) -> Result<ScoredVars> {
    let top = pyramid.levels.len() - 1;
    if g.shape(conditioned).0 != pyramid.levels[top].len() {
        return Err(Error::shape(format!(
            "{} conditioned rows for {} superpoints",
            g.shape(conditioned).0,
            pyramid.levels[top].len()
        )));
    }
    let mut x = g.concat_cols(&[conditioned, overlap, cross_overlap])?;
    for l in (0..top).rev() {
        let parent = pyramid.levels[l].parent_index.as_ref().ok_or_else(|| Error::invalid("missing parent map"))?;
        let up = g.gather_rows(x, parent)?;
        let cat = g.concat_cols(&[up, encoded.features[l]])?;
        x = h_theta(g, params, &format!("dec.l{l}"), cat)?;
    }
    let d = linear(g, params, "head.desc", x)?;
    let descriptors = g.l2_normalize_rows(d);
    let o = linear(g, params, "head.overlap", x)?;
    let overlap = g.sigmoid(o);
    let m = linear(g, params, "head.match", x)?;
    let matchability = g.sigmoid(m);
    Ok(ScoredVars { descriptors, overlap, matchability })
}
