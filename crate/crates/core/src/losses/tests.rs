use rand::Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckConfig, InitRecord, InitScheme, ParamStore};
use crate::geometry::Point;
use crate::model::{InputFeatures, Model, ModelConfig};
use crate::synth::{make_pair, GenConfig};

const LN2: f64 = std::f64::consts::LN_2;

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn unit_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng::seeded(seed);
    PointCloud::new((0..n).map(|_| Point::new(r.random(), r.random(), r.random())).collect()).unwrap()
}

fn corr(positives: Vec<Vec<usize>>, within_safe: Vec<Vec<usize>>, num_targets: usize) -> GtCorrespondences {
    GtCorrespondences { positives, within_safe, num_targets }
}

fn bce_oracle(p: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().zip(y).zip(w).map(|((&p, &y), &w)| -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / n
}

#[test]
fn default_config_is_valid_and_checks_invariants() {
    LossConfig::default().validate().unwrap();
    let bad = [
        LossConfig { delta_p: 1.5, ..Default::default() },
        LossConfig { delta_p: 0.0, ..Default::default() },
        LossConfig { r_o: 0.0, ..Default::default() },
        LossConfig { r_s: 0.05, ..Default::default() },
        LossConfig { matchability_gate: 1.5, ..Default::default() },
        LossConfig { n_p: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(serde_json::from_str::<LossConfig>(r#"{"gamma": 24.0, "bogus": 1}"#).is_err());
    let c: LossConfig = serde_json::from_str(r#"{"gamma": 24.0}"#).unwrap();
    assert_eq!(c.gamma, 24.0);
    assert_eq!(c.delta_n, 1.4);
}

#[test]
fn circle_margins_met_exactly_is_ln2() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let fp = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let fq = g.constant(Tensor::matrix(2, 2, vec![cfg.delta_p, 0.0, cfg.delta_n, 0.0]).unwrap());
    let c = corr(vec![vec![0]], vec![vec![0]], 2);
    let l = circle_loss_anchors(&mut g, fp, fq, &c, &[0], &cfg).unwrap();
    assert!((g.value(l).item() - LN2).abs() < 1e-15);
}

#[test]
fn circle_well_separated_saturates_at_floor() {
    // With β clamped at zero, each positive inside Δp and each negative
    // beyond Δn contributes e⁰, so the loss bottoms out at
    // ln(1 + |pos|·|neg|) and further separation cannot lower it.
    let cfg = LossConfig::default();
    for negs in [1usize, 3] {
        let floor = (1.0 + negs as f64).ln();
        let mut prev = f64::INFINITY;
        for sep in [0.8, 1.2, 1.4, 1.6, 3.0, 10.0] {
            let mut g = Graph::new();
            let fp = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
            let mut q = vec![0.0];
            q.extend((0..negs).map(|k| sep + k as f64 * 0.25));
            let fq = g.constant(Tensor::matrix(negs + 1, 1, q).unwrap());
            let c = corr(vec![vec![0]], vec![vec![0]], negs + 1);
            let l = circle_loss_anchors(&mut g, fp, fq, &c, &[0], &cfg).unwrap();
            let v = g.value(l).item();
            assert!(v >= floor - 1e-15 && v <= prev + 1e-15, "sep {sep}: {v}");
            if sep >= cfg.delta_n {
                assert!((v - floor).abs() < 1e-15);
            }
            prev = v;
        }
    }
}

#[test]
fn circle_matches_scalar_oracle() {
    let cfg = LossConfig { gamma: 4.0, ..Default::default() };
    for seed in 0..5 {
        let fp = unit_rows(&random_tensor(6, 3, seed));
        let fq = unit_rows(&random_tensor(8, 3, seed + 100));
        let mut r = rng::seeded(seed + 7);
        let mut positives = Vec::new();
        let mut safe = Vec::new();
        for _ in 0..6 {
            let a = r.random_range(0..8usize);
            let b = (a + 1) % 8;
            let mut s = vec![a, b, (a + 2) % 8];
            s.sort_unstable();
            positives.push(if r.random_bool(0.5) { vec![a.min(b), a.max(b)] } else { vec![a] });
            safe.push(s);
        }
        let c = corr(positives.clone(), safe, 8);
        let anchors = [0, 2, 3, 5];
        let mut g = Graph::new();
        let vp = g.constant(fp.clone());
        let vq = g.constant(fq.clone());
        let l = circle_loss_anchors(&mut g, vp, vq, &c, &anchors, &cfg).unwrap();
        let got = g.value(l).item();

        let dist = |i: usize, j: usize| fp.row(i).iter().zip(fq.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut want = 0.0;
        for &i in &anchors {
            let sp: f64 = positives[i]
                .iter()
                .map(|&j| {
                    let d = dist(i, j);
                    ((cfg.gamma * (d - cfg.delta_p)).max(0.0) * (d - cfg.delta_p)).exp()
                })
                .sum();
            let sn: f64 = c
                .negatives(i)
                .iter()
                .map(|&j| {
                    let d = dist(i, j);
                    ((cfg.gamma * (cfg.delta_n - d)).max(0.0) * (cfg.delta_n - d)).exp()
                })
                .sum();
            want += (1.0 + sp * sn).ln();
        }
        want /= anchors.len() as f64;
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn circle_gradient_with_frozen_beta() {
    let cfg = LossConfig { gamma: 8.0, ..Default::default() };
    let c = corr(
        vec![vec![0, 1], vec![], vec![3], vec![2, 4]],
        vec![vec![0, 1, 2], vec![0], vec![3, 5], vec![2, 4]],
        6,
    );
    let anchors = [0, 2, 3];
    let positives: Vec<Vec<usize>> = anchors.iter().map(|&i| c.positives[i].clone()).collect();
    let negatives: Vec<Vec<usize>> = anchors.iter().map(|&i| c.negatives(i)).collect();
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let rec = InitRecord { scheme: InitScheme::Zeros, seed };
        store.insert("fp", random_tensor(4, 3, seed), rec);
        store.insert("fq", random_tensor(6, 3, seed + 50), rec);
        let base = {
            let mut g = Graph::new();
            let p = g.param(&store, "fp").unwrap();
            let q = g.param(&store, "fq").unwrap();
            let pn = g.l2_normalize_rows(p);
            let qn = g.l2_normalize_rows(q);
            let a = g.gather_rows(pn, &anchors).unwrap();
            let d = g.pairwise_dist(a, qn).unwrap();
            g.value(d).clone()
        };
        let rep = grad_check(
            &mut store,
            |s, g| {
                let p = g.param(s, "fp")?;
                let q = g.param(s, "fq")?;
                let pn = g.l2_normalize_rows(p);
                let qn = g.l2_normalize_rows(q);
                let a = g.gather_rows(pn, &anchors)?;
                let d = g.pairwise_dist(a, qn)?;
                g.circle_loss_frozen(d, &positives, &negatives, cfg.margins(), &base)
            },
            &GradCheckConfig { seed, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn circle_without_matchable_anchors_errors() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let fp = g.constant(random_tensor(2, 3, 0));
    let fq = g.constant(random_tensor(2, 3, 1));
    let c = corr(vec![vec![], vec![]], vec![vec![], vec![1]], 2);
    assert!(matches!(circle_loss(&mut g, fp, fq, &c, &cfg, 0), Err(Error::NoPositivePairs)));
}

#[test]
fn anchors_are_matchable_bounded_and_seeded() {
    let positives: Vec<Vec<usize>> = (0..50).map(|i| if i % 3 == 0 { vec![i] } else { vec![] }).collect();
    let c = corr(positives, vec![vec![]; 50], 50);
    let a = sample_anchors(&c, 5, 9).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(a.iter().all(|&i| i % 3 == 0));
    assert_eq!(a, sample_anchors(&c, 5, 9).unwrap());
    assert_eq!(sample_anchors(&c, 100, 9).unwrap(), c.matchable_anchors());
}

#[test]
fn overlap_loss_uninformative_is_ln2_for_any_balance() {
    for pos in [1, 3, 10, 19] {
        let labels: Vec<f64> = (0..20).map(|i| if i < pos { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let o = g.constant(Tensor::column(vec![0.5; 20]));
        let (l, fallback) = overlap_loss(&mut g, o, &labels).unwrap();
        assert!(!fallback);
        assert!((g.value(l).item() - LN2).abs() < 1e-14);
    }
}

#[test]
fn overlap_loss_perfect_prediction_vanishes() {
    let labels = vec![1.0, 0.0, 0.0, 1.0, 0.0];
    let p: Vec<f64> = labels.iter().map(|&y| if y > 0.5 { 1.0 - 1e-9 } else { 1e-9 }).collect();
    let mut g = Graph::new();
    let o = g.constant(Tensor::column(p));
    let (l, _) = overlap_loss(&mut g, o, &labels).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn overlap_loss_matches_brute_force() {
    for seed in 0..10 {
        let mut r = rng::seeded(seed);
        let n = r.random_range(5..40);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let mut y: Vec<f64> = (0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        let n_pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let w: Vec<f64> = y
            .iter()
            .map(|&v| if v == 1.0 { n as f64 / (2.0 * n_pos) } else { n as f64 / (2.0 * (n as f64 - n_pos)) })
            .collect();
        let mut g = Graph::new();
        let o = g.constant(Tensor::column(p.clone()));
        let (l, _) = overlap_loss(&mut g, o, &y).unwrap();
        assert!((g.value(l).item() - bce_oracle(&p, &y, &w)).abs() < 1e-12);
    }
}

#[test]
fn overlap_loss_single_class_falls_back() {
    let p = vec![0.2, 0.7, 0.9];
    let y = vec![1.0; 3];
    let mut g = Graph::new();
    let o = g.constant(Tensor::column(p.clone()));
    let (l, fallback) = overlap_loss(&mut g, o, &y).unwrap();
    assert!(fallback);
    assert!((g.value(l).item() - bce_oracle(&p, &y, &[1.0; 3])).abs() < 1e-12);
}

#[test]
fn bce_losses_pass_gradient_check() {
    for seed in 0..5 {
        let mut r = rng::seeded(seed);
        let labels: Vec<f64> = (0..12).map(|i| if i % 3 == 0 || r.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let mut store = ParamStore::new();
        store.insert("z", random_tensor(12, 1, seed), InitRecord { scheme: InitScheme::Zeros, seed });
        for which in 0..2 {
            let rep = grad_check(
                &mut store,
                |s, g| {
                    let z = g.param(s, "z")?;
                    let p = g.sigmoid(z);
                    if which == 0 {
                        Ok(overlap_loss(g, p, &labels)?.0)
                    } else {
                        matchability_loss(g, p, &labels)
                    }
                },
                &GradCheckConfig { seed, ..Default::default() },
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }
}

#[test]
fn matchability_loss_values() {
    let y = vec![1.0, 0.0, 0.0, 0.0];
    let mut g = Graph::new();
    let m = g.constant(Tensor::column(vec![0.5; 4]));
    let l = matchability_loss(&mut g, m, &y).unwrap();
    assert!((g.value(l).item() - LN2).abs() < 1e-14);

    let p = vec![0.3, 0.6, 0.1, 0.8];
    let m = g.constant(Tensor::column(p.clone()));
    let l = matchability_loss(&mut g, m, &y).unwrap();
    assert!((g.value(l).item() - bce_oracle(&p, &y, &[1.0; 4])).abs() < 1e-12);

    let m = g.constant(Tensor::column(vec![1.0 - 1e-10, 1e-10, 1e-10, 1e-10]));
    let l = matchability_loss(&mut g, m, &y).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn matchability_labels_identity_pair_all_ones() {
    let p = random_cloud(40, 3);
    let t = RigidTransform::from_axis_angle(&nalgebra::Vector3::new(0.2, 1.0, -0.3), 0.7, nalgebra::Vector3::new(0.1, -0.4, 0.3));
    let q = t.apply(&p);
    let f = unit_rows(&random_tensor(40, 8, 4));
    let labels = matchability_labels(&f, &f, &p, &q, &t, 1e-9).unwrap();
    assert!(labels.iter().all(|&v| v == 1.0));
}

#[test]
fn matchability_labels_vanishing_radius_all_zero() {
    let p = random_cloud(30, 5);
    let q = random_cloud(35, 6);
    let labels = matchability_labels(&unit_rows(&random_tensor(30, 4, 1)), &unit_rows(&random_tensor(35, 4, 2)), &p, &q, &RigidTransform::identity(), 1e-12)
        .unwrap();
    assert!(labels.iter().all(|&v| v == 0.0));
}

#[test]
fn matchability_labels_match_dot_product_oracle() {
    // For unit rows the nearest descriptor is the one with the largest inner
    // product.
    for seed in 0..5 {
        let p = random_cloud(50, seed);
        let q = random_cloud(60, seed + 10);
        let t = RigidTransform::from_translation(nalgebra::Vector3::new(0.05, 0.0, -0.02));
        let fp = unit_rows(&random_tensor(50, 6, seed + 20));
        let fq = unit_rows(&random_tensor(60, 6, seed + 30));
        let r_m = 0.3;
        let labels = matchability_labels(&fp, &fq, &p, &q, &t, r_m).unwrap();
        for i in 0..50 {
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..60 {
                let s: f64 = fp.row(i).iter().zip(fq.row(j)).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (j, s);
                }
            }
            let d = (q[best.0] - t.apply_point(&p[i])).norm();
            assert_eq!(labels[i], if d <= r_m { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn gate_latches() {
    let mut gate = MatchabilityGate::default();
    assert!(!gate.update(0.1, 0.3));
    assert!(!gate.update(0.29, 0.3));
    assert!(gate.update(0.31, 0.3));
    assert!(gate.update(0.0, 0.3));
}

#[test]
fn total_loss_respects_gate_and_weights() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.7));
    let terms = LossTerms { circle: x, overlap: x, matchability: x };
    let closed = total_loss(&mut g, &terms, &cfg, MatchabilityGate { open: false }).unwrap();
    let open = total_loss(&mut g, &terms, &cfg, MatchabilityGate { open: true }).unwrap();
    assert!((g.value(closed).item() - 1.4).abs() < 1e-15);
    assert!((g.value(open).item() - 2.1).abs() < 1e-15);
    let rep = LossReport { circle: 0.7, overlap: 0.7, matchability: 0.7, ..Default::default() };
    assert!((total_value(&rep, &cfg, MatchabilityGate { open: true }) - 2.1).abs() < 1e-15);
    assert!((total_value(&rep, &cfg, MatchabilityGate { open: false }) - 1.4).abs() < 1e-15);
}

fn tiny_model() -> Model {
    Model::new(ModelConfig { widths: vec![4, 8, 8], k_graph: 4, heads: 2, temperature: 0.5, voxel_size: 0.12, descriptor_dim: 6, input_features: InputFeatures::CenteredXyz, ..ModelConfig::default() }).unwrap()
}

fn tiny_pairs(model: &Model, count: u64) -> Vec<PreparedPair> {
    let cfg = LossConfig { n_p: 32, ..Default::default() };
    (0..count)
        .map(|s| {
            let sample = make_pair(&GenConfig { n_full: 600, n_keep: 150, seed: s, ..Default::default() }).unwrap();
            prepare_pair(model, &sample, &cfg).unwrap()
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_params() {
    let model = tiny_model();
    let data = tiny_pairs(&model, 2);
    let mut params = model.init_params(1).unwrap();
    let before = params.clone();
    let cfg = TrainConfig { lr0: 0.0, ..Default::default() };
    train_epoch(&model, &mut params, &data, &LossConfig { n_p: 32, ..Default::default() }, &cfg, &mut TrainState::default()).unwrap();
    for (name, p) in before.iter() {
        assert_eq!(p.tensor.data(), params.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn epochs_are_deterministic() {
    let model = tiny_model();
    let data = tiny_pairs(&model, 3);
    let lc = LossConfig { n_p: 32, ..Default::default() };
    let cfg = TrainConfig { lr0: 0.005, seed: 4, ..Default::default() };
    let run = || {
        let mut params = model.init_params(2).unwrap();
        let mut st = TrainState::default();
        let reps: Vec<EpochReport> = (0..2).map(|_| train_epoch(&model, &mut params, &data, &lc, &cfg, &mut st).unwrap()).collect();
        (reps, params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a[1].epoch, 1);
    assert!((a[1].lr - 0.005 * 0.95).abs() < 1e-15);
    assert!(a.iter().all(|r| r.circle >= 0.0 && r.overlap >= 0.0 && r.matchability >= 0.0));
}

#[test]
fn single_pair_overfits() {
    let model = tiny_model();
    let data = tiny_pairs(&model, 1);
    let lc = LossConfig { n_p: 32, gamma: 8.0, ..Default::default() };
    let cfg = TrainConfig { lr0: 0.01, momentum: 0.9, ..Default::default() };
    let mut params = model.init_params(3).unwrap();
    let eval = |params: &ParamStore| {
        let mut g = Graph::new();
        let (l, _) = pair_loss(&mut g, &model, params, &data[0], &lc, MatchabilityGate::default(), 11).unwrap();
        g.value(l).item()
    };
    let first = eval(&params);
    let mut st = TrainState::default();
    for _ in 0..50 {
        train_epoch(&model, &mut params, &data, &lc, &cfg, &mut st).unwrap();
    }
    let last = eval(&params);
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_reports_pair_seed() {
    let model = tiny_model();
    let mut data = tiny_pairs(&model, 1);
    data[0].seed = 777;
    let mut params = model.init_params(0).unwrap();
    params.get_mut("head.overlap.b").unwrap().data_mut()[0] = f64::NAN;
    let r = train_epoch(&model, &mut params, &data, &LossConfig { n_p: 32, ..Default::default() }, &TrainConfig::default(), &mut TrainState::default());
    assert!(matches!(r, Err(Error::NonFiniteLoss { seed: 777 })), "{r:?}");
}

#[test]
fn empty_dataset_rejected() {
    let model = tiny_model();
    let mut params = model.init_params(0).unwrap();
    assert!(train_epoch(&model, &mut params, &[], &LossConfig::default(), &TrainConfig::default(), &mut TrainState::default()).is_err());
}

#[test]
fn epoch_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let rep = EpochReport {
        epoch: 0,
        lr: 0.01,
        circle: 1.0,
        overlap: 0.5,
        matchability: 0.6,
        match_rate: 0.2,
        matchability_on: false,
        overlap_fallbacks: 0,
    };
    append_epoch_log(&path, &rep).unwrap();
    append_epoch_log(&path, &EpochReport { epoch: 1, ..rep.clone() }).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["epoch", "lr", "circle", "overlap", "matchability", "match_rate"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["epoch"], i);
    }
}
