use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{circle_loss, labels_in_frame, matchability_loss, overlap_loss, total_loss, LossConfig, LossReport, LossTerms, MatchabilityGate, PairTargets};
use crate::autodiff::{Graph, ParamStore, Sgd, Var};
use crate::error::{Error, Result};
use crate::model::{CloudPyramid, Model};
use crate::rng::{self, derive_seed};
use crate::synth::PairSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate of the first epoch; epoch `e` uses `lr0 · 0.95^e`.
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr0: 0.01, momentum: 0.98, weight_decay: 1e-6, epochs: 30, seed: 0 }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.95f64.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr0 ≥ 0, momentum in [0, 1), weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state carried across epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub sgd: Sgd,
    pub gate: MatchabilityGate,
    pub epoch: usize,
}

/// Mean losses of one epoch; one JSON object per line in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub circle: f64,
    pub overlap: f64,
    pub matchability: f64,
    pub match_rate: f64,
    /// Whether the matchability term was part of the objective this epoch.
    pub matchability_on: bool,
    pub overlap_fallbacks: usize,
}

/// A pair with its pyramids and ground truth computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub src: CloudPyramid,
    pub tgt: CloudPyramid,
    pub targets: PairTargets,
    pub seed: u64,
}

pub fn prepare_pair(model: &Model, sample: &PairSample, cfg: &LossConfig) -> Result<PreparedPair> {
    Ok(PreparedPair {
        src: model.pyramid(&sample.source)?,
        tgt: model.pyramid(&sample.target)?,
        targets: PairTargets::new(&sample.source, &sample.target, &sample.gt, cfg)?,
        seed: sample.seed,
    })
}

/// Forward pass and symmetric losses for one pair.
pub fn pair_loss(
    g: &mut Graph,
    model: &Model,
    params: &ParamStore,
    pair: &PreparedPair,
    cfg: &LossConfig,
    gate: MatchabilityGate,
    seed: u64,
) -> Result<(Var, LossReport)> {
    let t = &pair.targets;
    let out = model.forward(g, params, &pair.src, &pair.tgt)?;
    let (fs, ft) = (out.src.descriptors, out.tgt.descriptors);

    let (c_s, anchors_s) = circle_loss(g, fs, ft, &t.src_to_tgt, cfg, derive_seed(seed, 0))?;
    let (c_t, anchors_t) = circle_loss(g, ft, fs, &t.tgt_to_src, cfg, derive_seed(seed, 1))?;
    let c = g.add(c_s, c_t)?;
    let circle = g.scale(c, 0.5);

    let (o_s, fb_s) = overlap_loss(g, out.src.overlap, &t.src_overlap)?;
    let (o_t, fb_t) = overlap_loss(g, out.tgt.overlap, &t.tgt_overlap)?;
    let o = g.add(o_s, o_t)?;
    let overlap = g.scale(o, 0.5);

    let (ds, dt) = (g.value(fs).clone(), g.value(ft).clone());
    let m_src = labels_in_frame(&ds, &dt, &t.src_in_tgt, pair.tgt.input(), cfg.r_m)?;
    let m_tgt = labels_in_frame(&dt, &ds, &t.tgt_in_src, pair.src.input(), cfg.r_m)?;
    let m_s = matchability_loss(g, out.src.matchability, &m_src)?;
    let m_t = matchability_loss(g, out.tgt.matchability, &m_tgt)?;
    let m = g.add(m_s, m_t)?;
    let matchability = g.scale(m, 0.5);

    let hits: f64 = anchors_s.iter().map(|&i| m_src[i]).sum::<f64>() + anchors_t.iter().map(|&i| m_tgt[i]).sum::<f64>();
    let match_rate = hits / (anchors_s.len() + anchors_t.len()) as f64;

    let total = total_loss(g, &LossTerms { circle, overlap, matchability }, cfg, gate)?;
    let report = LossReport {
        circle: g.value(circle).item(),
        overlap: g.value(overlap).item(),
        matchability: g.value(matchability).item(),
        match_rate,
        overlap_fallback: fb_s || fb_t,
    };
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss { seed: pair.seed });
    }
    Ok((total, report))
}

/// One seeded pass over `data` with batch size 1. The matchability gate is
/// re-evaluated on the epoch's mean match rate after the pass.
pub fn train_epoch(
    model: &Model,
    params: &mut ParamStore,
    data: &[PreparedPair],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let epoch_seed = derive_seed(cfg.seed, epoch as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::seeded(epoch_seed));

    let mut sum = LossReport::default();
    let mut fallbacks = 0;
    for (step, &i) in order.iter().enumerate() {
        let mut g = Graph::new();
        let (loss, rep) = pair_loss(&mut g, model, params, &data[i], loss_cfg, state.gate, derive_seed(epoch_seed, step as u64 + 1))?;
        g.backward(loss)?;
        params.zero_grads();
        params.accumulate_grads(&g);
        state.sgd.step(params, lr, cfg.momentum, cfg.weight_decay).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::NonFiniteLoss { seed: data[i].seed },
            e => e,
        })?;
        // Keep the state exactly representable in the checkpoint format.
        params.quantize_f32();
        state.sgd.quantize_f32();
        sum.circle += rep.circle;
        sum.overlap += rep.overlap;
        sum.matchability += rep.matchability;
        sum.match_rate += rep.match_rate;
        fallbacks += rep.overlap_fallback as usize;
    }
    let n = data.len() as f64;
    let report = EpochReport {
        epoch,
        lr,
        circle: sum.circle / n,
        overlap: sum.overlap / n,
        matchability: sum.matchability / n,
        match_rate: sum.match_rate / n,
        matchability_on: state.gate.open,
        overlap_fallbacks: fallbacks,
    };
    log::info!(
        "epoch {epoch}: circle {:.4} overlap {:.4} matchability {:.4} match_rate {:.3}",
        report.circle,
        report.overlap,
        report.matchability,
        report.match_rate
    );
    state.gate.update(report.match_rate, loss_cfg.matchability_gate);
    state.epoch += 1;
    Ok(report)
}

pub fn append_epoch_log(path: &Path, report: &EpochReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}
