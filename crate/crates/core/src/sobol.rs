//! Variance-based sensitivity analysis with Saltelli cross-sampling.
//!
//! For base matrices `A` and `B` (`n` rows, `d` columns), `AB_i` is `A` with
//! column `i` taken from `B` and `BA_i` is `B` with column `i` taken from
//! `A`, giving `n (2d + 2)` evaluations. With pooled variance `V` of
//! `f(A) u f(B)` and outputs centred by their pooled mean:
//!
//! * `S_i  = mean(f(B) (f(AB_i) - f(A))) / V`
//! * `S_ij = mean(f(BA_i) f(AB_j) - f(A) f(B)) / V - S_i - S_j`
//! * `ST_i = S_i + sum_{j != i} S_ij` (truncated total)
//!
//! The usual total-effect estimator `mean((f(A) - f(AB_i))^2) / (2V)` is
//! available as a diagnostic.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{lv_pressures, Backend};
use crate::error::{Error, Result};
use crate::model::PARAM_NAMES;

/// Base and cross-substituted sample matrices over `[0, 1]^dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaltelliDesign {
    pub n_base: usize,
    pub dims: usize,
    /// Row-major `n_base x dims`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl SaltelliDesign {
    pub fn rows_per_group(&self) -> usize {
        2 * self.dims + 2
    }

    pub fn n_evals(&self) -> usize {
        self.n_base * self.rows_per_group()
    }

    pub fn a_row(&self, j: usize) -> &[f64] {
        &self.a[j * self.dims..(j + 1) * self.dims]
    }

    pub fn b_row(&self, j: usize) -> &[f64] {
        &self.b[j * self.dims..(j + 1) * self.dims]
    }

    /// Row `j` of `AB_i`.
    pub fn ab_row(&self, i: usize, j: usize) -> Vec<f64> {
        let mut r = self.a_row(j).to_vec();
        r[i] = self.b_row(j)[i];
        r
    }

    /// Row `j` of `BA_i`.
    pub fn ba_row(&self, i: usize, j: usize) -> Vec<f64> {
        let mut r = self.b_row(j).to_vec();
        r[i] = self.a_row(j)[i];
        r
    }

    /// The evaluation rows of group `j`, ordered
    /// `A_j, B_j, AB_0j .. AB_(d-1)j, BA_0j .. BA_(d-1)j`.
    pub fn group(&self, j: usize) -> Vec<Vec<f64>> {
        let mut g = Vec::with_capacity(self.rows_per_group());
        g.push(self.a_row(j).to_vec());
        g.push(self.b_row(j).to_vec());
        g.extend((0..self.dims).map(|i| self.ab_row(i, j)));
        g.extend((0..self.dims).map(|i| self.ba_row(i, j)));
        g
    }

    /// All evaluation rows, group by group.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_base).flat_map(|j| self.group(j)).collect()
    }
}

/// Draws `[A | B]` as one Latin hypercube in `2 dims` columns.
pub fn saltelli_sample(n_base: usize, dims: usize, seed: u64) -> Result<SaltelliDesign> {
    if n_base < 2 || !n_base.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "n_base must be a power of two and at least 2, got {n_base}"
        )));
    }
    if dims == 0 {
        return Err(Error::InvalidArgument("dims must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![vec![0.0; n_base]; 2 * dims];
    let mut bins: Vec<usize> = (0..n_base).collect();
    for col in cols.iter_mut() {
        bins.shuffle(&mut rng);
        for (x, &b) in col.iter_mut().zip(&bins) {
            *x = ((b as f64 + rng.gen::<f64>()) / n_base as f64).min(1.0);
        }
    }
    let mut a = vec![0.0; n_base * dims];
    let mut b = vec![0.0; n_base * dims];
    for j in 0..n_base {
        for i in 0..dims {
            a[j * dims + i] = cols[i][j];
            b[j * dims + i] = cols[dims + i][j];
        }
    }
    Ok(SaltelliDesign { n_base, dims, a, b })
}

/// Indices for one scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolIndices {
    #[serde(rename = "S1")]
    pub s1: Vec<f64>,
    /// Symmetric, zero diagonal.
    #[serde(rename = "S2")]
    pub s2: Vec<Vec<f64>>,
    #[serde(rename = "ST")]
    pub st: Vec<f64>,
    /// Standard total-effect estimator; diagnostic, not the truncated total.
    #[serde(rename = "ST_jansen", default, skip_serializing_if = "Option::is_none")]
    pub st_jansen: Option<Vec<f64>>,
}

impl SobolIndices {
    fn zeros(d: usize, jansen: bool) -> Self {
        Self {
            s1: vec![0.0; d],
            s2: vec![vec![0.0; d]; d],
            st: vec![0.0; d],
            st_jansen: jansen.then(|| vec![0.0; d]),
        }
    }

    /// Copy with negative estimates set to zero.
    pub fn clipped(&self) -> Self {
        let c = |v: &Vec<f64>| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        Self {
            s1: c(&self.s1),
            s2: self.s2.iter().map(c).collect(),
            st: c(&self.st),
            st_jansen: self.st_jansen.as_ref().map(c),
        }
    }

    /// Element-wise arithmetic mean.
    pub fn mean(all: &[SobolIndices]) -> Result<Self> {
        let first = all
            .first()
            .ok_or_else(|| Error::InvalidArgument("no indices to average".into()))?;
        let d = first.s1.len();
        let mut out = Self::zeros(d, first.st_jansen.is_some());
        let w = 1.0 / all.len() as f64;
        for s in all {
            for i in 0..d {
                out.s1[i] += w * s.s1[i];
                out.st[i] += w * s.st[i];
                for j in 0..d {
                    out.s2[i][j] += w * s.s2[i][j];
                }
                if let (Some(o), Some(x)) = (out.st_jansen.as_mut(), s.st_jansen.as_ref()) {
                    o[i] += w * x[i];
                }
            }
        }
        Ok(out)
    }
}

/// Streaming sums behind the estimators, for one scalar output.
///
/// Values are stored relative to a provisional `shift` to limit
/// cancellation; centring on the pooled mean is applied exactly in
/// [`SobolAccumulator::finish`].
#[derive(Debug, Clone)]
pub struct SobolAccumulator {
    dims: usize,
    shift: Option<f64>,
    n: usize,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    p1: Vec<f64>,
    d1: Vec<f64>,
    jn: Vec<f64>,
    p2: Vec<f64>,
    d2: Vec<f64>,
}

impl SobolAccumulator {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            shift: None,
            n: 0,
            sa: 0.0,
            sb: 0.0,
            saa: 0.0,
            sbb: 0.0,
            p1: vec![0.0; dims],
            d1: vec![0.0; dims],
            jn: vec![0.0; dims],
            p2: vec![0.0; dims * dims],
            d2: vec![0.0; dims * dims],
        }
    }

    /// Adds one group in [`SaltelliDesign::group`] order.
    pub fn add_group(&mut self, f: &[f64]) -> Result<()> {
        let d = self.dims;
        if f.len() != 2 * d + 2 {
            return Err(Error::Contract(format!(
                "group of {} values for {d} dims",
                f.len()
            )));
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model output".into()));
        }
        let c = *self.shift.get_or_insert(f[0]);
        let ya = f[0] - c;
        let yb = f[1] - c;
        let ab = |i: usize| f[2 + i] - c;
        let ba = |i: usize| f[2 + d + i] - c;
        self.n += 1;
        self.sa += ya;
        self.sb += yb;
        self.saa += ya * ya;
        self.sbb += yb * yb;
        for i in 0..d {
            let diff = ab(i) - ya;
            self.p1[i] += yb * diff;
            self.d1[i] += diff;
            self.jn[i] += diff * diff;
        }
        for i in 0..d {
            for j in i + 1..d {
                self.p2[i * d + j] += ba(i) * ab(j) - ya * yb;
                self.d2[i * d + j] += ba(i) + ab(j) - ya - yb;
            }
        }
        Ok(())
    }

    pub fn finish(&self, jansen: bool) -> Result<SobolIndices> {
        let d = self.dims;
        if self.n < 2 {
            return Err(Error::InvalidArgument(
                "need at least two sample groups".into(),
            ));
        }
        let n = self.n as f64;
        let mu = (self.sa + self.sb) / (2.0 * n);
        let var = (self.saa + self.sbb) / (2.0 * n) - mu * mu;
        let scale = (self.saa + self.sbb) / (2.0 * n);
        if !(var > 1e-13 * scale) || !(var > 0.0) {
            return Err(Error::DegenerateVariance(format!(
                "output variance {var:e} is zero to working precision"
            )));
        }
        let mut out = SobolIndices::zeros(d, jansen);
        for i in 0..d {
            out.s1[i] = (self.p1[i] - mu * self.d1[i]) / n / var;
            if let Some(st) = out.st_jansen.as_mut() {
                st[i] = self.jn[i] / (2.0 * n) / var;
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                let vij = (self.p2[i * d + j] - mu * self.d2[i * d + j]) / n / var;
                let s = vij - out.s1[i] - out.s1[j];
                out.s2[i][j] = s;
                out.s2[j][i] = s;
            }
        }
        for i in 0..d {
            out.st[i] = out.s1[i]
                + (0..d)
                    .filter(|&j| j != i)
                    .map(|j| out.s2[i][j])
                    .sum::<f64>();
        }
        Ok(out)
    }
}

/// Indices from evaluations `values[r]` of `design.rows()[r]`.
pub fn estimate_indices(
    design: &SaltelliDesign,
    values: &[f64],
    jansen: bool,
) -> Result<SobolIndices> {
    if values.len() != design.n_evals() {
        return Err(Error::Contract(format!(
            "{} values for {} design rows",
            values.len(),
            design.n_evals()
        )));
    }
    let mut acc = SobolAccumulator::new(design.dims);
    for g in values.chunks(design.rows_per_group()) {
        acc.add_group(g)?;
    }
    acc.finish(jansen)
}

/// Signals whose sensitivities can be analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Output {
    #[serde(rename = "V_lv")]
    VLv,
    #[serde(rename = "P_lv")]
    PLv,
    #[serde(rename = "V_ao")]
    VAo,
    #[serde(rename = "V_art")]
    VArt,
    #[serde(rename = "V_vc")]
    VVc,
    #[serde(rename = "V_la")]
    VLa,
}

impl Output {
    pub const ALL: [Output; 6] = [
        Output::VLv,
        Output::PLv,
        Output::VAo,
        Output::VArt,
        Output::VVc,
        Output::VLa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Output::VLv => "V_lv",
            Output::PLv => "P_lv",
            Output::VAo => "V_ao",
            Output::VArt => "V_art",
            Output::VVc => "V_vc",
            Output::VLa => "V_la",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobolConfig {
    pub n_base: usize,
    pub outputs: Vec<Output>,
    pub n_timepoints: usize,
    pub seed: u64,
    /// Also compute the standard total-effect estimator.
    pub jansen_total: bool,
    /// Clip negative estimates to zero when reporting.
    pub clip_negative: bool,
    /// Groups evaluated per parallel batch.
    pub groups_per_batch: usize,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self {
            n_base: 1024,
            outputs: Output::ALL.to_vec(),
            n_timepoints: 200,
            seed: 0,
            jansen_total: false,
            clip_negative: false,
            groups_per_batch: 64,
        }
    }
}

impl SobolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_base < 2 || !self.n_base.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "n_base must be a power of two and at least 2, got {}",
                self.n_base
            )));
        }
        if self.outputs.is_empty() || self.n_timepoints == 0 || self.groups_per_batch == 0 {
            return Err(Error::InvalidArgument(
                "outputs, n_timepoints and groups_per_batch must be nonempty".into(),
            ));
        }
        Ok(())
    }

    /// Model evaluations for `dims` free parameters.
    pub fn n_evals(&self, dims: usize) -> usize {
        self.n_base * (2 * dims + 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputIndices {
    pub output: Output,
    /// Mean of the per-timepoint indices.
    pub time_averaged: SobolIndices,
    #[serde(skip)]
    pub per_timepoint: Vec<SobolIndices>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolResult {
    pub parameters: Vec<String>,
    pub n_base: usize,
    pub n_evaluations: usize,
    pub n_failed: usize,
    pub timepoints: Vec<f64>,
    pub outputs: Vec<OutputIndices>,
}

impl SobolResult {
    pub fn get(&self, o: Output) -> Option<&OutputIndices> {
        self.outputs.iter().find(|x| x.output == o)
    }

    /// Position of a parameter name in the index arrays.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p == name)
    }

    /// Per-timepoint indices as `output,t_ms,index,i,j,value` rows.
    pub fn write_timepoint_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "output,t_ms,index,i,j,value")?;
        for o in &self.outputs {
            for (t, s) in self.timepoints.iter().zip(&o.per_timepoint) {
                let name = o.output.name();
                for i in 0..s.s1.len() {
                    writeln!(w, "{name},{t},S1,{i},,{}", s.s1[i])?;
                    writeln!(w, "{name},{t},ST,{i},,{}", s.st[i])?;
                }
                for i in 0..s.s1.len() {
                    for j in i + 1..s.s1.len() {
                        writeln!(w, "{name},{t},S2,{i},{j},{}", s.s2[i][j])?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn output_values(o: Output, vols: &[crate::model::StateVolumes], p_lv: &[f64]) -> Vec<f64> {
    match o {
        Output::VLv => vols.iter().map(|v| v.lv).collect(),
        Output::PLv => p_lv.to_vec(),
        Output::VAo => vols.iter().map(|v| v.ao).collect(),
        Output::VArt => vols.iter().map(|v| v.art).collect(),
        Output::VVc => vols.iter().map(|v| v.vc).collect(),
        Output::VLa => vols.iter().map(|v| v.la).collect(),
    }
}

/// Sensitivity of every requested output, at every timepoint, to the free
/// parameters of the backend's space.
pub fn analyze(backend: &dyn Backend, cfg: &SobolConfig) -> Result<SobolResult> {
    cfg.validate()?;
    let space = backend.space();
    let c = backend.constants();
    let free = space.free_dims();
    let d = free.len();
    if d == 0 {
        return Err(Error::InvalidArgument(
            "parameter space has no free dimension".into(),
        ));
    }
    let design = saltelli_sample(cfg.n_base, d, cfg.seed)?;
    let times: Vec<f64> = (0..cfg.n_timepoints)
        .map(|k| k as f64 * c.t_c / cfg.n_timepoints as f64)
        .collect();
    let n_out = cfg.outputs.len();
    let mut acc: Vec<Vec<SobolAccumulator>> = (0..n_out)
        .map(|_| (0..times.len()).map(|_| SobolAccumulator::new(d)).collect())
        .collect();

    let eval_row = |row: &[f64]| -> Result<Vec<Vec<f64>>> {
        let m = space.from_free_unit(row)?;
        let p = space.apply_multipliers(&m)?;
        let vols = backend.volumes(&m, &times)?;
        let v_lv: Vec<f64> = vols.iter().map(|v| v.lv).collect();
        let p_lv = lv_pressures(&v_lv, &times, &p, c);
        let vals: Vec<Vec<f64>> = cfg
            .outputs
            .iter()
            .map(|&o| output_values(o, &vols, &p_lv))
            .collect();
        if vals.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model output".into()));
        }
        Ok(vals)
    };

    let mut failed_groups = 0usize;
    let mut n_failed = 0usize;
    let rpg = design.rows_per_group();
    let max_failed_groups = cfg.n_base / 100;
    for start in (0..cfg.n_base).step_by(cfg.groups_per_batch) {
        let end = (start + cfg.groups_per_batch).min(cfg.n_base);
        let rows: Vec<Vec<f64>> = (start..end).flat_map(|j| design.group(j)).collect();
        let evals: Vec<Result<Vec<Vec<f64>>>> = rows.par_iter().map(|r| eval_row(r)).collect();
        for g in evals.chunks(rpg) {
            let bad = g.iter().filter(|r| r.is_err()).count();
            if bad > 0 {
                n_failed += bad;
                failed_groups += 1;
                if failed_groups > max_failed_groups {
                    return Err(Error::TooManyFailures {
                        failed: n_failed,
                        total: design.n_evals(),
                        what: "sensitivity evaluations".into(),
                    });
                }
                continue;
            }
            let g: Vec<&Vec<Vec<f64>>> = g.iter().map(|r| r.as_ref().expect("checked")).collect();
            for (oi, per_t) in acc.iter_mut().enumerate() {
                for (ti, a) in per_t.iter_mut().enumerate() {
                    let f: Vec<f64> = g.iter().map(|row| row[oi][ti]).collect();
                    a.add_group(&f)?;
                }
            }
        }
    }

    let mut outputs = Vec::with_capacity(n_out);
    for (oi, per_t) in acc.iter().enumerate() {
        let per_timepoint = per_t
            .iter()
            .map(|a| a.finish(cfg.jansen_total))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::DegenerateVariance(msg) => {
                    Error::DegenerateVariance(format!("{}: {msg}", cfg.outputs[oi].name()))
                }
                other => other,
            })?;
        let mut time_averaged = SobolIndices::mean(&per_timepoint)?;
        if cfg.clip_negative {
            time_averaged = time_averaged.clipped();
        }
        outputs.push(OutputIndices {
            output: cfg.outputs[oi],
            time_averaged,
            per_timepoint,
        });
    }
    Ok(SobolResult {
        parameters: free.iter().map(|&i| PARAM_NAMES[i].to_string()).collect(),
        n_base: cfg.n_base,
        n_evaluations: design.n_evals(),
        n_failed,
        timepoints: times,
        outputs,
    })
}
