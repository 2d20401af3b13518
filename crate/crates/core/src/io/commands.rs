use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, TrainingSnapshot};
use super::cloud::{read_cloud, write_cloud};
use super::config::RunConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::{gt_overlap_labels, KdTree, PointCloud, RigidTransform};
use crate::losses::{append_epoch_log, prepare_pair, train_epoch, EpochReport, TrainState};
use crate::matching::{ransac_register, sample_and_match, CorrespondenceSet, RansacConfig, SamplerMode};
use crate::metrics::{
    auroc, chamfer_modified, ecdf_curve, inlier_ratio, overlap_after_filtering, registration_rmse, rre_rte, summarize, write_csv,
    EvalSummary, OverlapFiltering, PairMetrics,
};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::synth::{make_dataset, PairSample};

/// JSON sidecar describing one generated pair; cloud paths are relative to
/// the sidecar's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub source: String,
    pub target: String,
    pub raw_source: String,
    pub raw_target: String,
    /// Row-major `[R | t]` mapping source onto target.
    pub gt: Vec<f64>,
    pub overlap: f64,
    pub p_v: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredPair {
    pub record: PairRecord,
    pub sample: PairSample,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Generates `count` pairs from `cfg.gen` into `out_dir`.
pub fn cmd_gen(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::invalid("nothing to generate"));
    }
    fs::create_dir_all(out_dir)?;
    let pairs = make_dataset(&cfg.gen, count, cfg.dataset.p_v_range)?;
    let mut records = Vec::with_capacity(count);
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("pair_{i:04}");
        let name = |part: &str| format!("{id}_{part}.xyz");
        let record = PairRecord {
            id: id.clone(),
            source: name("src"),
            target: name("tgt"),
            raw_source: name("src_raw"),
            raw_target: name("tgt_raw"),
            gt: p.gt.to_row_major().to_vec(),
            overlap: p.overlap,
            p_v: p.p_v,
            seed: p.seed,
        };
        write_cloud(&p.source, &out_dir.join(&record.source))?;
        write_cloud(&p.target, &out_dir.join(&record.target))?;
        write_cloud(&p.raw_source, &out_dir.join(&record.raw_source))?;
        write_cloud(&p.raw_target, &out_dir.join(&record.raw_target))?;
        write_json(&record, &out_dir.join(format!("{id}.json")))?;
        records.push(record);
    }
    Ok(records)
}

/// Loads every `*.json` sidecar of `dir` in file-name order.
pub fn read_pairs(dir: &Path) -> Result<Vec<StoredPair>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(Error::invalid(format!("no pair sidecars in {}", dir.display())));
    }
    sidecars
        .iter()
        .map(|path| {
            let record: PairRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
            let gt: [f64; 12] = record
                .gt
                .as_slice()
                .try_into()
                .map_err(|_| Error::shape(format!("{}: gt needs 12 numbers", path.display())))?;
            let sample = PairSample {
                source: read_cloud(&dir.join(&record.source))?,
                target: read_cloud(&dir.join(&record.target))?,
                gt: RigidTransform::from_row_major(&gt)?,
                overlap: record.overlap,
                raw_source: read_cloud(&dir.join(&record.raw_source))?,
                raw_target: read_cloud(&dir.join(&record.raw_target))?,
                p_v: record.p_v,
                seed: record.seed,
            };
            Ok(StoredPair { record, sample })
        })
        .collect()
}

/// Trains on `cfg.dataset.train_pairs` generated pairs, appending to the
/// epoch log and rewriting the checkpoint after every epoch. A `resume`
/// checkpoint continues from its recorded epoch.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: Option<Checkpoint>) -> Result<(Checkpoint, Vec<EpochReport>)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let model = Model::new(cfg.model.clone())?;
    let (mut params, mut state) = match resume {
        Some(ck) => {
            if ck.model != cfg.model {
                return Err(Error::Config("resume checkpoint has a different model configuration".into()));
            }
            (ck.params, ck.train.to_state())
        }
        None => (model.init_params(cfg.train.seed)?, TrainState::default()),
    };
    let data = make_dataset(&cfg.gen, cfg.dataset.train_pairs, cfg.dataset.p_v_range)?
        .iter()
        .map(|p| prepare_pair(&model, p, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let log = out_dir.join(&cfg.output.train_log);
    let mut reports = Vec::new();
    let mut ckpt = snapshot(cfg, &params, &state, state.epoch.checked_sub(1).map_or(0.0, |e| cfg.train.lr_at(e)));
    while state.epoch < cfg.train.epochs {
        let report = train_epoch(&model, &mut params, &data, &cfg.loss, &cfg.train, &mut state)?;
        append_epoch_log(&log, &report)?;
        ckpt = snapshot(cfg, &params, &state, report.lr);
        save_checkpoint(&ckpt, &out_dir.join(&cfg.output.checkpoint))?;
        reports.push(report);
    }
    Ok((ckpt, reports))
}

fn snapshot(cfg: &RunConfig, params: &ParamStore, state: &TrainState, lr: f64) -> Checkpoint {
    Checkpoint {
        model: cfg.model.clone(),
        params: params.clone(),
        train: TrainingSnapshot::from_state(state, lr, cfg.train.seed, cfg.train.seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterOutput {
    pub transform: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub inliers: usize,
    /// Sample count after clamping to the cloud sizes.
    pub k: usize,
}

fn clamp_k(mode: &SamplerMode, n: usize) -> SamplerMode {
    if mode.k > n {
        log::warn!("k = {} exceeds the {n} available points; using {n}", mode.k);
    }
    SamplerMode { k: mode.k.min(n), ..*mode }
}

/// Full inference on one pair of clouds.
pub fn cmd_register(
    ckpt: &Checkpoint,
    source: &PointCloud,
    target: &PointCloud,
    sampler: &SamplerMode,
    ransac: &RansacConfig,
) -> Result<RegisterOutput> {
    let model = Model::new(ckpt.model.clone())?;
    let (s, t) = model.infer(&ckpt.params, source, target)?;
    let mode = clamp_k(sampler, source.len().min(target.len()));
    let corr = sample_and_match(&s, &t, &mode)?;
    let r = ransac_register(&corr, source, target, ransac)?;
    Ok(RegisterOutput { transform: r.transform, inliers: r.num_inliers(), correspondences: corr, k: mode.k })
}

/// Per-pair evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEval {
    pub metrics: PairMetrics,
    pub filtering: OverlapFiltering,
    /// Overlap-score AUROC of each cloud against its ground-truth labels.
    pub auroc: [Option<f64>; 2],
    pub registered: bool,
}

/// Pairs `(i, j)` with `j` the nearest target point to `T_gt(p_i)` within
/// `radius`.
fn gt_pairs(p: &PointCloud, q: &PointCloud, gt: &RigidTransform, radius: f64) -> CorrespondenceSet {
    let tree = KdTree::build(q);
    let pairs = p
        .iter()
        .enumerate()
        .filter_map(|(i, x)| tree.nearest(&gt.apply_point(x)).filter(|&(_, d2)| d2.sqrt() < radius).map(|(j, _)| (i, j)))
        .collect();
    CorrespondenceSet::new(pairs)
}

pub fn evaluate_pair(model: &Model, params: &ParamStore, pair: &StoredPair, cfg: &RunConfig) -> Result<PairEval> {
    let s = &pair.sample;
    let (so, to) = model.infer(params, &s.source, &s.target)?;
    let mut mode = clamp_k(&cfg.sampler, s.source.len().min(s.target.len()));
    mode.seed = derive_seed(cfg.sampler.seed, s.seed);
    let corr = sample_and_match(&so, &to, &mode)?;
    let (ir, _) = inlier_ratio(&corr, &s.source, &s.target, &s.gt, cfg.eval.tau1)?;
    let ransac = RansacConfig { seed: derive_seed(cfg.ransac.seed, s.seed), ..cfg.ransac };
    let (est, registered) = match ransac_register(&corr, &s.source, &s.target, &ransac) {
        Ok(r) => (r.transform, true),
        Err(Error::RegistrationFailed | Error::DegenerateGeometry) => (RigidTransform::identity(), false),
        Err(e) => return Err(e),
    };
    let rmse = match registration_rmse(&est, &gt_pairs(&s.source, &s.target, &s.gt, cfg.eval.tau1), &s.source, &s.target) {
        Ok(v) => v,
        Err(Error::InvalidArgument(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let (rre, rte) = rre_rte(&est, &s.gt);
    let chamfer = chamfer_modified(&s.source, &s.target, &est, &s.raw_source, &s.raw_target)?;
    let filtering = overlap_after_filtering(&s.source, &s.target, &s.gt, &so.overlap, &to.overlap, cfg.gen.v_pair, 0.5)?;
    let labels_s = gt_overlap_labels(&s.source, &s.target, &s.gt, cfg.loss.r_o)?;
    let labels_t = gt_overlap_labels(&s.target, &s.source, &s.gt.invert(), cfg.loss.r_o)?;
    Ok(PairEval {
        metrics: PairMetrics {
            pair_id: pair.record.id.clone(),
            overlap: s.overlap,
            n_samples: mode.k,
            inlier_ratio: ir,
            rmse,
            rre,
            rte,
            chamfer,
            success: rmse < cfg.eval.rmse_thresh,
            tag: format!("p_v={:.2}", s.p_v),
        },
        filtering,
        auroc: [auroc(&so.overlap, &labels_s), auroc(&to.overlap, &labels_t)],
        registered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilteringSummary {
    pub mean_before: f64,
    pub mean_after: f64,
    pub empty_after: usize,
    pub mean_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub filtering: FilteringSummary,
    pub registration_failures: usize,
    #[serde(skip)]
    pub pairs: Vec<PairEval>,
}

fn ecdf_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Evaluates every pair in `pairs_dir` and writes the per-pair CSV, the
/// before/after overlap table and ECDF, and a JSON summary to `out_dir`.
pub fn cmd_eval(ckpt: &Checkpoint, pairs_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    let pairs = read_pairs(pairs_dir)?;
    let model = Model::new(ckpt.model.clone())?;
    let evals = pairs.iter().map(|p| evaluate_pair(&model, &ckpt.params, p, cfg)).collect::<Result<Vec<_>>>()?;

    let rows: Vec<PairMetrics> = evals.iter().map(|e| e.metrics.clone()).collect();
    let grid = ecdf_grid();
    let summary = summarize(&rows, &cfg.eval, &grid)?;
    let before: Vec<f64> = evals.iter().map(|e| e.filtering.before).collect();
    let after: Vec<f64> = evals.iter().map(|e| e.filtering.after).collect();
    let aurocs: Vec<f64> = evals.iter().flat_map(|e| e.auroc.iter().flatten().copied()).collect();
    let out = EvalOutput {
        summary,
        filtering: FilteringSummary {
            mean_before: mean(&before),
            mean_after: mean(&after),
            empty_after: evals.iter().filter(|e| e.filtering.empty_after).count(),
            mean_auroc: (!aurocs.is_empty()).then(|| mean(&aurocs)),
        },
        registration_failures: evals.iter().filter(|e| !e.registered).count(),
        pairs: evals,
    };

    fs::create_dir_all(out_dir)?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &rows)?;
    fs::write(out_dir.join(&cfg.output.metrics_csv), csv)?;

    let mut ov = Vec::new();
    writeln!(ov, "pair_id,overlap,before,after,empty_after,auroc_src,auroc_tgt")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for e in &out.pairs {
        let f = &e.filtering;
        writeln!(
            ov,
            "{},{},{},{},{},{},{}",
            e.metrics.pair_id, e.metrics.overlap, f.before, f.after, f.empty_after as u8, opt(e.auroc[0]), opt(e.auroc[1])
        )?;
    }
    fs::write(out_dir.join(&cfg.output.overlap_csv), ov)?;

    let mut ecdf = Vec::new();
    writeln!(ecdf, "x,before,after")?;
    for ((x, b), (_, a)) in ecdf_curve(&before, &grid)?.into_iter().zip(ecdf_curve(&after, &grid)?) {
        writeln!(ecdf, "{x},{b},{a}")?;
    }
    fs::write(out_dir.join(&cfg.output.ecdf_csv), ecdf)?;
    write_json(&out, &out_dir.join(&cfg.output.summary_json))?;
    Ok(out)
}
