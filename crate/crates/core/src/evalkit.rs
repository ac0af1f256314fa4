//! Accuracy metrics and the surrogate-versus-solver evaluation campaign.
//!
//! RMAE is the plain arithmetic mean of `|ŷ - y| / |y|` over all samples.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, NumericalBackend};
use crate::error::{Error, Result};
use crate::model::{Multipliers, ValveLaw, PARAM_NAMES};
use crate::sampling::lhs_sample;
use crate::solver::SolverConfig;
use crate::surrogate::SurrogateModel;

/// Output names of the five compartments in state order.
pub const COMPARTMENTS: [&str; 5] = ["V_lv", "V_ao", "V_art", "V_vc", "V_la"];

/// Samples per cycle on the evaluation grid.
pub const EVAL_TIMEPOINTS: usize = 400;

/// Share of cases that may be excluded before an evaluation fails.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;

/// Relative mean absolute error of `y_hat` against `y_ref`.
pub fn rmae(y_hat: &[f64], y_ref: &[f64]) -> Result<f64> {
    if y_hat.len() != y_ref.len() || y_ref.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rmae needs equal non-empty series, got {} and {}",
            y_hat.len(),
            y_ref.len()
        )));
    }
    let mut sum = 0.0;
    for (i, (&f, &y)) in y_hat.iter().zip(y_ref).enumerate() {
        if y == 0.0 {
            return Err(Error::DegenerateReference { index: i });
        }
        sum += ((f - y) / y).abs();
    }
    Ok(sum / y_ref.len() as f64)
}

/// Percentile with linear interpolation between order statistics.
/// `q` is in [0, 100]; `sorted` must be ascending and non-empty.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distribution of per-case RMAE for one compartment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmaeStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl RmaeStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to summarize".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: s[s.len() - 1],
            min: s[0],
            p50: percentile(&s, 50.0),
            p90: percentile(&s, 90.0),
            p95: percentile(&s, 95.0),
            p99: percentile(&s, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentReport {
    pub name: String,
    pub rmae: RmaeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub multipliers: Multipliers,
    /// Per compartment, `None` when the case was excluded.
    pub rmae: Option<[f64; 5]>,
    pub error: Option<String>,
}

/// How the comparison was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub candidate: String,
    pub reference: String,
    pub reference_law: ValveLaw,
    pub solver_dt: f64,
    pub n_timepoints: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub n_cases: usize,
    pub n_excluded: usize,
    pub compartments: Vec<CompartmentReport>,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    /// Aggregates stored per-case values.
    pub fn from_cases(meta: EvalMeta, cases: Vec<CaseResult>) -> Result<Self> {
        let ok: Vec<[f64; 5]> = cases.iter().filter_map(|c| c.rmae).collect();
        let n_excluded = cases.len() - ok.len();
        if ok.is_empty() {
            return Err(Error::TooManyFailures {
                failed: n_excluded,
                total: cases.len(),
                what: "evaluation cases".into(),
            });
        }
        let compartments = COMPARTMENTS
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let v: Vec<f64> = ok.iter().map(|r| r[j]).collect();
                Ok(CompartmentReport {
                    name: name.to_string(),
                    rmae: RmaeStats::from_values(&v)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            meta,
            n_cases: cases.len(),
            n_excluded,
            compartments,
            cases,
        })
    }

    pub fn mean_rmae(&self) -> [f64; 5] {
        std::array::from_fn(|j| self.compartments[j].rmae.mean)
    }

    pub fn max_rmae(&self) -> [f64; 5] {
        std::array::from_fn(|j| self.compartments[j].rmae.max)
    }

    /// True when every compartment has mean below `mean_tol` and max below `max_tol`.
    pub fn within(&self, mean_tol: f64, max_tol: f64) -> bool {
        self.compartments
            .iter()
            .all(|c| c.rmae.mean < mean_tol && c.rmae.max < max_tol)
    }

    pub fn write_cases_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let head: Vec<String> = PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .chain(COMPARTMENTS.iter().map(|c| format!("rmae_{c}")))
            .collect();
        writeln!(w, "case,status,{}", head.join(","))?;
        for c in &self.cases {
            let m: Vec<String> = c.multipliers.0.iter().map(|x| x.to_string()).collect();
            let r: Vec<String> = match c.rmae {
                Some(r) => r.iter().map(|x| x.to_string()).collect(),
                None => vec![String::new(); 5],
            };
            let status = if c.rmae.is_some() { "ok" } else { "excluded" };
            writeln!(w, "{},{status},{},{}", c.case, m.join(","), r.join(","))?;
        }
        Ok(())
    }
}

/// Uniform grid of `n` times on [0, t_c).
pub fn eval_grid(n: usize, t_c: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * t_c / n as f64).collect()
}

fn compare_case(
    candidate: &dyn Backend,
    reference: &dyn Backend,
    m: &Multipliers,
    times: &[f64],
) -> Result<[f64; 5]> {
    let want = reference.volumes(m, times)?;
    let got = candidate.volumes(m, times)?;
    let mut out = [0.0; 5];
    for (j, o) in out.iter_mut().enumerate() {
        let y: Vec<f64> = want.iter().map(|s| s.to_array()[j]).collect();
        let f: Vec<f64> = got.iter().map(|s| s.to_array()[j]).collect();
        *o = rmae(&f, &y)?;
    }
    Ok(out)
}

/// Per-compartment RMAE of `candidate` against `reference` on each case.
/// Failed cases are kept with their error and excluded from the statistics;
/// more than 5% excluded is an error.
pub fn compare_backends(
    candidate: &dyn Backend,
    reference: &dyn Backend,
    cases: &[Multipliers],
    times: &[f64],
    meta: EvalMeta,
) -> Result<EvalReport> {
    if cases.is_empty() || times.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs cases and timepoints".into(),
        ));
    }
    let results: Vec<CaseResult> = cases
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let (rmae, error) = match compare_case(candidate, reference, m, times) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CaseResult {
                case: k,
                multipliers: *m,
                rmae,
                error,
            }
        })
        .collect();
    let failed = results.iter().filter(|c| c.rmae.is_none()).count();
    if failed as f64 > MAX_EXCLUDED_FRACTION * results.len() as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: results.len(),
            what: "evaluation cases".into(),
        });
    }
    EvalReport::from_cases(meta, results)
}

/// Compares the surrogate with the numerical solver on `n_cases` LHS cases
/// over its trained space, on the 400-point grid. A smooth-valve `solver`
/// must use the model's alpha; a hard-valve solver gives the secondary report.
pub fn evaluate_surrogate(
    model: &SurrogateModel,
    n_cases: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<EvalReport> {
    if let ValveLaw::Smooth { alpha } = solver.law {
        if alpha != model.alpha {
            return Err(Error::InvalidArgument(format!(
                "reference solver alpha {alpha} differs from the model's {}",
                model.alpha
            )));
        }
    }
    let cases = lhs_sample(n_cases, &model.space, seed)?;
    let reference = NumericalBackend {
        space: model.space.clone(),
        constants: model.constants,
        solver: *solver,
    };
    let times = eval_grid(EVAL_TIMEPOINTS, model.constants.t_c);
    let arch = model.architecture();
    let meta = EvalMeta {
        candidate: format!("surrogate {}x{}", arch.hidden, arch.depth),
        reference: "numerical".into(),
        reference_law: solver.law,
        solver_dt: solver.dt,
        n_timepoints: times.len(),
        seed,
    };
    compare_backends(model, &reference, &cases, &times, meta)
}

/// The smooth-valve report (model alpha) and the hard-valve report.
pub fn evaluate_surrogate_both(
    model: &SurrogateModel,
    n_cases: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(EvalReport, EvalReport)> {
    let smooth = SolverConfig {
        law: ValveLaw::Smooth { alpha: model.alpha },
        ..*solver
    };
    let hard = SolverConfig {
        law: ValveLaw::Hard,
        ..*solver
    };
    Ok((
        evaluate_surrogate(model, n_cases, seed, &smooth)?,
        evaluate_surrogate(model, n_cases, seed, &hard)?,
    ))
}
