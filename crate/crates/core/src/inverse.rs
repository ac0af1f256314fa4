//! Parameter estimation from one LV pressure/volume beat.
//!
//! Differential evolution (rand/1/bin) searches the free multipliers of a
//! backend's parameter space for the best mean coefficient of determination
//! between predicted and measured waveforms.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::model::{wrap_time, InputParameters, Multipliers, N_PARAMS, PARAM_NAMES};
use crate::sampling::lhs_sample;
use crate::seeds;

/// Fitness assigned to points where the backend fails.
pub const WORST_FITNESS: f64 = 1.0;

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y_true.len() != y_hat.len() || y_true.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "R^2 needs equal lengths of at least 2, got {} and {}",
            y_true.len(),
            y_hat.len()
        )));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateVariance(
            "reference series is constant".into(),
        ));
    }
    let ss_res: f64 = y_true.iter().zip(y_hat).map(|(y, f)| (y - f).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// One measured beat. Times are in ms on the measurement's own clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredBeat {
    pub t_volume: Vec<f64>,
    pub v_lv: Vec<f64>,
    pub t_pressure: Vec<f64>,
    pub p_lv: Vec<f64>,
    pub period: f64,
    /// Index into the volume samples marking the start of systole.
    pub systole_start: usize,
}

pub const MIN_BEAT_SAMPLES: usize = 20;
pub const VOLUME_RANGE: (f64, f64) = (5.0, 1000.0);
pub const PRESSURE_RANGE: (f64, f64) = (-20.0, 300.0);

impl MeasuredBeat {
    /// Beat with volume and pressure on one shared grid.
    pub fn shared(
        t: Vec<f64>,
        v_lv: Vec<f64>,
        p_lv: Vec<f64>,
        period: f64,
        systole_start: usize,
    ) -> Self {
        Self {
            t_volume: t.clone(),
            v_lv,
            t_pressure: t,
            p_lv,
            period,
            systole_start,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.period.is_finite() && self.period > 0.0) {
            return bad(format!("beat period {} must be positive", self.period));
        }
        for (what, t, y, (lo, hi), unit) in [
            ("volume", &self.t_volume, &self.v_lv, VOLUME_RANGE, "ml"),
            (
                "pressure",
                &self.t_pressure,
                &self.p_lv,
                PRESSURE_RANGE,
                "mmHg",
            ),
        ] {
            if t.len() != y.len() {
                return bad(format!("{what}: {} times but {} samples", t.len(), y.len()));
            }
            if t.len() < MIN_BEAT_SAMPLES {
                return bad(format!(
                    "{what}: {} samples, need {MIN_BEAT_SAMPLES}",
                    t.len()
                ));
            }
            if t.iter().chain(y.iter()).any(|x| !x.is_finite()) {
                return bad(format!("{what}: non-finite entry"));
            }
            if t.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!("{what}: times must increase strictly"));
            }
            if t[t.len() - 1] - t[0] >= self.period {
                return bad(format!("{what}: samples span more than one period"));
            }
            if let Some(v) = y.iter().find(|&&v| !(v > lo && v < hi)) {
                return bad(format!("{what} sample {v} outside ({lo}, {hi}) {unit}"));
            }
        }
        if self.systole_start >= self.t_volume.len() {
            return bad(format!("systole_start {} out of range", self.systole_start));
        }
        Ok(())
    }

    /// Sample times mapped onto the model cycle: systole start at 0, period
    /// scaled to `t_c`, wrapped into `[0, t_c)`.
    pub fn normalized_times(&self, t_c: f64) -> (Vec<f64>, Vec<f64>) {
        let t0 = self.t_volume[self.systole_start];
        let map = |t: &f64| wrap_time((t - t0) * t_c / self.period, t_c);
        (
            self.t_volume.iter().map(map).collect(),
            self.t_pressure.iter().map(map).collect(),
        )
    }

    /// Reads `t_ms,V_lv_ml,P_lv_mmHg` rows; the period is the sample span
    /// plus one sampling interval unless given.
    pub fn read_csv<R: Read>(r: R, period: Option<f64>, systole_start: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let want = ["t_ms", "V_lv_ml", "P_lv_mmHg"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::Validation(format!(
                "beat header must be {}, got {}",
                want.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let (mut t, mut v, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad number '{}': {e}", &rec[k])))
            };
            t.push(num(0)?);
            v.push(num(1)?);
            p.push(num(2)?);
        }
        if t.len() < 2 {
            return Err(Error::Validation("beat has fewer than two samples".into()));
        }
        let period = period.unwrap_or_else(|| {
            let n = t.len() as f64;
            (t[t.len() - 1] - t[0]) * n / (n - 1.0)
        });
        let beat = Self::shared(t, v, p, period, systole_start);
        beat.validate()?;
        Ok(beat)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.t_volume != self.t_pressure {
            return Err(Error::InvalidArgument(
                "beat CSV needs a shared time grid".into(),
            ));
        }
        writeln!(w, "t_ms,V_lv_ml,P_lv_mmHg")?;
        for k in 0..self.t_volume.len() {
            writeln!(w, "{},{},{}", self.t_volume[k], self.v_lv[k], self.p_lv[k])?;
        }
        Ok(())
    }

    /// Beat predicted by `backend` at `m` on `n` uniform samples of one cycle.
    pub fn from_backend(backend: &dyn Backend, m: &Multipliers, n: usize) -> Result<Self> {
        let t_c = backend.constants().t_c;
        let t: Vec<f64> = (0..n).map(|k| k as f64 * t_c / n as f64).collect();
        let (v, p) = backend.lv_waveforms(m, &t)?;
        Ok(Self::shared(t, v, p, t_c, 0))
    }

    /// Copy with multiplicative Gaussian noise `y (1 + level * e)`, `e ~ N(0, 1)`.
    pub fn with_noise(&self, level: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, level)
            .map_err(|e| Error::InvalidArgument(format!("noise level: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for y in out.v_lv.iter_mut().chain(out.p_lv.iter_mut()) {
            *y *= 1.0 + normal.sample(&mut rng);
        }
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("beat CSV: {e}"))
}

/// Weights of the volume and pressure R^2 in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub volume: f64,
    pub pressure: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            volume: 1.0,
            pressure: 1.0,
        }
    }
}

/// A validated beat on the model clock, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedBeat {
    t_volume: Vec<f64>,
    t_pressure: Vec<f64>,
    v_lv: Vec<f64>,
    p_lv: Vec<f64>,
    shared: bool,
}

impl PreparedBeat {
    pub fn new(beat: &MeasuredBeat, t_c: f64) -> Result<Self> {
        beat.validate()?;
        let (tv, tp) = beat.normalized_times(t_c);
        Ok(Self {
            shared: tv == tp,
            t_volume: tv,
            t_pressure: tp,
            v_lv: beat.v_lv.clone(),
            p_lv: beat.p_lv.clone(),
        })
    }

    /// Volume and pressure R^2 of the backend prediction at `m`.
    pub fn scores(&self, backend: &dyn Backend, m: &Multipliers) -> Result<(f64, f64)> {
        let (v_hat, p_hat) = if self.shared {
            let (v, p) = backend.lv_waveforms(m, &self.t_volume)?;
            (v, p)
        } else {
            let mut times = self.t_volume.clone();
            times.extend_from_slice(&self.t_pressure);
            let (v, p) = backend.lv_waveforms(m, &times)?;
            let n = self.t_volume.len();
            (v[..n].to_vec(), p[n..].to_vec())
        };
        if v_hat.iter().chain(&p_hat).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite prediction".into()));
        }
        Ok((
            r_squared(&self.v_lv, &v_hat)?,
            r_squared(&self.p_lv, &p_hat)?,
        ))
    }

    pub fn objective(&self, backend: &dyn Backend, m: &Multipliers, w: &ObjectiveWeights) -> f64 {
        match self.scores(backend, m) {
            Ok((rv, rp)) => -(w.volume * rv + w.pressure * rp) / (w.volume + w.pressure),
            Err(_) => WORST_FITNESS,
        }
    }
}

/// Negative weighted mean R^2 of the backend prediction at `m`.
pub fn objective(
    m: &Multipliers,
    beat: &MeasuredBeat,
    backend: &dyn Backend,
    w: &ObjectiveWeights,
) -> Result<f64> {
    Ok(PreparedBeat::new(beat, backend.constants().t_c)?.objective(backend, m, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeConfig {
    pub pop_size: usize,
    pub max_generations: usize,
    /// Differential weight.
    pub f: f64,
    /// Crossover rate.
    pub cr: f64,
    /// Stop once the best fitness improved by less than `tol` over
    /// `stall_generations` generations; `tol = 0` disables the test.
    pub tol: f64,
    pub stall_generations: usize,
    pub seed: u64,
    pub weights: ObjectiveWeights,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop_size: 100,
            max_generations: 200,
            f: 0.7,
            cr: 0.9,
            tol: 0.0,
            stall_generations: 20,
            seed: 0,
            weights: ObjectiveWeights::default(),
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(Error::InvalidArgument("pop_size must be at least 4".into()));
        }
        if !(self.f > 0.0 && self.f <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "F = {} not in (0, 2]",
                self.f
            )));
        }
        if !(0.0..=1.0).contains(&self.cr) {
            return Err(Error::InvalidArgument(format!(
                "CR = {} not in [0, 1]",
                self.cr
            )));
        }
        if self.max_generations == 0 || self.stall_generations == 0 || !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "max_generations and stall_generations must be positive, tol non-negative".into(),
            ));
        }
        let w = self.weights;
        if !(w.volume >= 0.0 && w.pressure >= 0.0 && w.volume + w.pressure > 0.0) {
            return Err(Error::InvalidArgument(
                "objective weights must be non-negative, not both zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub fitness: f64,
    /// Best fitness after initialisation and after each generation.
    pub trace: Vec<f64>,
    pub generations: usize,
    pub evaluations: usize,
    /// True when the stall test stopped the run before the generation cap.
    pub converged: bool,
}

/// rand/1/bin differential evolution minimising `f` over the box
/// `[lower, upper]`, with out-of-bounds trial coordinates clamped.
///
/// The initial population is a Latin hypercube; rows of `seed_points`, if
/// given, replace its first members.
pub fn differential_evolution<F>(
    f: F,
    lower: &[f64],
    upper: &[f64],
    cfg: &DeConfig,
    seed_points: &[Vec<f64>],
) -> Result<DeResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let d = lower.len();
    if d == 0 || upper.len() != d {
        return Err(Error::InvalidArgument(
            "bounds must be nonempty and of equal length".into(),
        ));
    }
    if lower
        .iter()
        .zip(upper)
        .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
    {
        return Err(Error::InvalidArgument(
            "bounds must be finite with lower <= upper".into(),
        ));
    }
    if seed_points.len() > cfg.pop_size || seed_points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument(
            "seed points do not fit the population".into(),
        ));
    }
    let np = cfg.pop_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Vec<f64>> = vec![vec![0.0; d]; np];
    let mut bins: Vec<usize> = (0..np).collect();
    for j in 0..d {
        bins.shuffle(&mut rng);
        for (x, &b) in pop.iter_mut().zip(&bins) {
            let u = (b as f64 + rng.gen::<f64>()) / np as f64;
            x[j] = (lower[j] + u * (upper[j] - lower[j])).min(upper[j]);
        }
    }
    for (slot, p) in pop.iter_mut().zip(seed_points) {
        *slot = p
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(&x, (&l, &u))| x.clamp(l, u))
            .collect();
    }
    let eval = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.par_iter()
            .map(|x| {
                let v = f(x);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect()
    };
    let mut fit = eval(&pop);
    let mut evaluations = np;
    let best_of = |fit: &[f64]| {
        fit.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        )
    };
    let (mut bi, mut bf) = best_of(&fit);
    let mut trace = vec![bf];
    let mut converged = false;
    let mut generations = 0;
    for g in 1..=cfg.max_generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut pick = || loop {
                    let r = rng.gen_range(0..np);
                    if r != i {
                        break r;
                    }
                };
                let r1 = pick();
                let r2 = loop {
                    let r = pick();
                    if r != r1 {
                        break r;
                    }
                };
                let r3 = loop {
                    let r = pick();
                    if r != r1 && r != r2 {
                        break r;
                    }
                };
                let j_rand = rng.gen_range(0..d);
                (0..d)
                    .map(|j| {
                        if j == j_rand || rng.gen::<f64>() < cfg.cr {
                            let v = pop[r1][j] + cfg.f * (pop[r2][j] - pop[r3][j]);
                            v.clamp(lower[j], upper[j])
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let tf = eval(&trials);
        evaluations += np;
        for (i, (t, v)) in trials.into_iter().zip(tf).enumerate() {
            if v <= fit[i] {
                pop[i] = t;
                fit[i] = v;
            }
        }
        let (i, v) = best_of(&fit);
        if v < bf {
            bi = i;
            bf = v;
        } else if fit[bi] > bf {
            bi = i;
        }
        trace.push(bf);
        generations = g;
        if cfg.tol > 0.0 && g >= cfg.stall_generations {
            let past = trace[g - cfg.stall_generations];
            if past - bf < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    let best = pop
        .iter()
        .zip(&fit)
        .filter(|(_, &v)| v == bf)
        .map(|(p, _)| p.clone())
        .next()
        .unwrap_or_else(|| pop[bi].clone());
    Ok(DeResult {
        best,
        fitness: bf,
        trace,
        generations,
        evaluations,
        converged,
    })
}

/// The ten parameters in table order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    #[serde(rename = "R_av")]
    pub r_av: f64,
    #[serde(rename = "R_ao")]
    pub r_ao: f64,
    #[serde(rename = "C_ao")]
    pub c_ao: f64,
    #[serde(rename = "R_art")]
    pub r_art: f64,
    #[serde(rename = "C_art")]
    pub c_art: f64,
    #[serde(rename = "R_vc")]
    pub r_vc: f64,
    #[serde(rename = "C_vc")]
    pub c_vc: f64,
    #[serde(rename = "R_mv")]
    pub r_mv: f64,
    #[serde(rename = "E_es")]
    pub e_es: f64,
    #[serde(rename = "t_tr")]
    pub t_tr: f64,
}

impl From<[f64; N_PARAMS]> for ParameterRow {
    fn from(a: [f64; N_PARAMS]) -> Self {
        Self {
            r_av: a[0],
            r_ao: a[1],
            c_ao: a[2],
            r_art: a[3],
            c_art: a[4],
            r_vc: a[5],
            c_vc: a[6],
            r_mv: a[7],
            e_es: a[8],
            t_tr: a[9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub multipliers: ParameterRow,
    pub parameters: ParameterRow,
    pub r2_volume: f64,
    pub r2_pressure: f64,
    pub objective: f64,
    pub generations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Beat period and model cycle the beat was mapped onto (ms).
    pub beat_period_ms: f64,
    pub model_cycle_ms: f64,
}

impl FitResult {
    pub fn multiplier_array(&self) -> Multipliers {
        let r = self.multipliers;
        Multipliers([
            r.r_av, r.r_ao, r.c_ao, r.r_art, r.c_art, r.r_vc, r.c_vc, r.r_mv, r.e_es, r.t_tr,
        ])
    }
}

/// Fits the free multipliers of `backend`'s space to `beat`.
///
/// `seed_multipliers` are injected into the initial population.
pub fn fit(
    beat: &MeasuredBeat,
    backend: &dyn Backend,
    cfg: &DeConfig,
    seed_multipliers: &[Multipliers],
) -> Result<FitResult> {
    let space = backend.space();
    let prepared = PreparedBeat::new(beat, backend.constants().t_c)?;
    let free = space.free_dims();
    if free.is_empty() {
        return Err(Error::InvalidArgument(
            "parameter space has no free dimension".into(),
        ));
    }
    let lower: Vec<f64> = free.iter().map(|&d| space.lower[d]).collect();
    let upper: Vec<f64> = free.iter().map(|&d| space.upper[d]).collect();
    let to_m = |x: &[f64]| -> Multipliers {
        let mut m = Multipliers::ones();
        for i in 0..N_PARAMS {
            m.0[i] = space.fixed[i].unwrap_or(1.0f64.clamp(space.lower[i], space.upper[i]));
        }
        for (&d, &v) in free.iter().zip(x) {
            m.0[d] = v;
        }
        m
    };
    let seeds: Vec<Vec<f64>> = seed_multipliers
        .iter()
        .map(|m| free.iter().map(|&d| m.0[d]).collect())
        .collect();
    let de = differential_evolution(
        |x| prepared.objective(backend, &to_m(x), &cfg.weights),
        &lower,
        &upper,
        cfg,
        &seeds,
    )?;
    let m = to_m(&de.best);
    let (rv, rp) = prepared.scores(backend, &m)?;
    let p: InputParameters = space.apply_multipliers(&m)?;
    Ok(FitResult {
        multipliers: m.0.into(),
        parameters: p.to_array().into(),
        r2_volume: rv,
        r2_pressure: rp,
        objective: de.fitness,
        generations: de.generations,
        evaluations: de.evaluations,
        converged: de.converged,
        beat_period_ms: beat.period,
        model_cycle_ms: backend.constants().t_c,
    })
}

/// Relative mean absolute error between estimates and truths of one
/// parameter across cases.
fn relative_error(est: f64, truth: f64) -> f64 {
    ((est - truth) / truth).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub case: usize,
    pub truth: ParameterRow,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudy {
    pub cases: Vec<SyntheticCase>,
    /// Names of the free parameters, matching `rmae`.
    pub parameters: Vec<String>,
    /// Per free parameter, mean relative error of the recovered multiplier.
    pub rmae: Vec<f64>,
    pub r2_volume_min: f64,
    pub r2_pressure_min: f64,
    pub n_failed: usize,
}

pub const SYNTHETIC_CSV_HEADER: &str = "case,status,R2_volume,R2_pressure,\
true_R_av,true_R_ao,true_C_ao,true_R_art,true_C_art,true_R_vc,true_C_vc,true_R_mv,true_E_es,true_t_tr,\
fit_R_av,fit_R_ao,fit_C_ao,fit_R_art,fit_C_art,fit_R_vc,fit_C_vc,fit_R_mv,fit_E_es,fit_t_tr";

impl SyntheticStudy {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SYNTHETIC_CSV_HEADER}")?;
        for c in &self.cases {
            let t = row_values(&c.truth);
            match &c.fit {
                Some(f) => {
                    let m = row_values(&f.multipliers);
                    writeln!(
                        w,
                        "{},ok,{},{},{},{}",
                        c.case,
                        f.r2_volume,
                        f.r2_pressure,
                        join(&t),
                        join(&m)
                    )?;
                }
                None => writeln!(
                    w,
                    "{},failed,,,{},{}",
                    c.case,
                    join(&t),
                    [""; N_PARAMS].join(",")
                )?,
            }
        }
        Ok(())
    }
}

fn row_values(r: &ParameterRow) -> [f64; N_PARAMS] {
    [
        r.r_av, r.r_ao, r.c_ao, r.r_art, r.c_art, r.r_vc, r.c_vc, r.r_mv, r.e_es, r.t_tr,
    ]
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Options of a synthetic recovery study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_cases: usize,
    pub n_samples: usize,
    /// Multiplicative Gaussian noise level; 0 for clean beats.
    pub noise: f64,
    /// Inject the true multipliers into the initial population.
    pub seed_with_truth: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_cases: 10,
            n_samples: 100,
            noise: 0.0,
            seed_with_truth: false,
            seed: 0,
        }
    }
}

/// Generates beats with `generator` at LHS truths, fits each with `fitter`
/// and tabulates recovery errors. Per-case failures are recorded.
pub fn synthetic_study(
    generator: &dyn Backend,
    fitter: &dyn Backend,
    de: &DeConfig,
    cfg: &SyntheticConfig,
) -> Result<SyntheticStudy> {
    if cfg.n_cases == 0 {
        return Err(Error::InvalidArgument("n_cases must be at least 1".into()));
    }
    let space = fitter.space();
    let truths = lhs_sample(
        cfg.n_cases,
        space,
        seeds::derive_seed(cfg.seed, seeds::SYNTHETIC),
    )?;
    let mut cases = Vec::with_capacity(truths.len());
    for (k, m) in truths.iter().enumerate() {
        let run = || -> Result<FitResult> {
            let mut beat = MeasuredBeat::from_backend(generator, m, cfg.n_samples)?;
            if cfg.noise > 0.0 {
                beat = beat.with_noise(
                    cfg.noise,
                    seeds::derive_seed(cfg.seed, seeds::NOISE) ^ k as u64,
                )?;
            }
            let de_k = DeConfig {
                seed: seeds::derive_seed(de.seed, seeds::DE).wrapping_add(k as u64),
                ..de.clone()
            };
            let inject = if cfg.seed_with_truth {
                vec![*m]
            } else {
                Vec::new()
            };
            fit(&beat, fitter, &de_k, &inject)
        };
        let (fit, error) = match run() {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        cases.push(SyntheticCase {
            case: k,
            truth: m.0.into(),
            fit,
            error,
        });
    }
    let free = space.free_dims();
    let ok: Vec<(&SyntheticCase, &FitResult)> = cases
        .iter()
        .filter_map(|c| c.fit.as_ref().map(|f| (c, f)))
        .collect();
    let n_ok = ok.len().max(1) as f64;
    let rmae = free
        .iter()
        .map(|&d| {
            ok.iter()
                .map(|(c, f)| {
                    relative_error(row_values(&f.multipliers)[d], row_values(&c.truth)[d])
                })
                .sum::<f64>()
                / n_ok
        })
        .collect();
    let min = |g: fn(&FitResult) -> f64| ok.iter().map(|(_, f)| g(f)).fold(f64::INFINITY, f64::min);
    Ok(SyntheticStudy {
        parameters: free.iter().map(|&d| PARAM_NAMES[d].to_string()).collect(),
        rmae,
        r2_volume_min: min(|f| f.r2_volume),
        r2_pressure_min: min(|f| f.r2_pressure),
        n_failed: cases.len() - ok.len(),
        cases,
    })
}
