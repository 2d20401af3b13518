//! Reverse-mode gradients against central finite differences.

use rand::seq::index;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Upper bound on probed coordinates per parameter.
    pub coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Coordinates whose central difference at `step` and `step / 2`
    /// disagree by more than this relative amount straddle a kink and are
    /// skipped.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, coords_per_param: 12, abs_floor: 1e-6, kink_tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

fn eval<F>(params: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(params, &mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check needs a scalar-valued function"));
    }
    Ok(v.item())
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences on a random subset of every parameter's coordinates.
pub fn grad_check<F>(params: &mut ParamStore, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new();
    let root = f(params, &mut graph)?;
    graph.backward(root)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport::default();
    let mut rng = rng::seeded(cfg.seed);
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        let analytic: Vec<f64> = graph.param_grad(&name).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
        let probe = cfg.coords_per_param.min(len);
        for idx in index::sample(&mut rng, len, probe).into_iter() {
            let central = |p: &mut ParamStore, f: &mut F, h: f64| -> Result<f64> {
                let orig = p.get(&name).expect("bound").data()[idx];
                p.get_mut(&name).expect("bound").data_mut()[idx] = orig + h;
                let plus = eval(p, f);
                p.get_mut(&name).expect("bound").data_mut()[idx] = orig - h;
                let minus = eval(p, f);
                p.get_mut(&name).expect("bound").data_mut()[idx] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = central(params, &mut f, cfg.step)?;
            let half = central(params, &mut f, cfg.step / 2.0)?;
            let scale = numeric.abs().max(half.abs()).max(cfg.abs_floor);
            if (numeric - half).abs() / scale > cfg.kink_tol {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), idx));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
