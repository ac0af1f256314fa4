//! Multiplier space, Latin hypercube designs and output-volume scaling.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{idx, InputParameters, ModelConstants, Multipliers, N_PARAMS, PARAM_NAMES};
use crate::solver::{solve_steady, SolverConfig};

/// Header of the dataset CSV.
pub const DATASET_HEADER: &str =
    "case_id,m_Rav,m_Rao,m_Cao,m_Rart,m_Cart,m_Rvc,m_Cvc,m_Rmv,m_Ees,m_ttr";

/// Bounds of the multipliers and the baseline they scale.
///
/// Dimensions listed in `fixed` are held at the given multiplier by the
/// samplers; the unit-cube maps stay plain affine maps over `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpace {
    pub names: Vec<String>,
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
    pub baselines: [f64; N_PARAMS],
    #[serde(default)]
    pub fixed: [Option<f64>; N_PARAMS],
}

impl Default for ParameterSpace {
    fn default() -> Self {
        let mut lower = [0.3; N_PARAMS];
        let mut upper = [3.0; N_PARAMS];
        lower[idx::T_TR] = 0.8;
        upper[idx::T_TR] = 1.2;
        Self {
            names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            lower,
            upper,
            baselines: InputParameters::baseline().to_array(),
            fixed: [None; N_PARAMS],
        }
    }
}

impl ParameterSpace {
    /// Full bounds, with every dimension outside `free` held at multiplier 1.
    pub fn reduced(free: &[usize]) -> Self {
        let mut s = Self::default();
        for i in 0..N_PARAMS {
            if !free.contains(&i) {
                s.fixed[i] = Some(1.0);
            }
        }
        s
    }

    /// The E_es / t_tr subspace used for desk-scale studies.
    pub fn contractility_timing() -> Self {
        Self::reduced(&[idx::E_ES, idx::T_TR])
    }

    pub fn free_dims(&self) -> Vec<usize> {
        (0..N_PARAMS).filter(|&i| self.fixed[i].is_none()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != N_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "parameter space needs {N_PARAMS} names, got {}",
                self.names.len()
            )));
        }
        for i in 0..N_PARAMS {
            if !(self.lower[i] < self.upper[i]) || !(self.lower[i] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bounds of {} must satisfy 0 < lower < upper",
                    self.names[i]
                )));
            }
            if !(self.baselines[i] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "baseline of {} must be positive",
                    self.names[i]
                )));
            }
            if let Some(v) = self.fixed[i] {
                if !(self.lower[i]..=self.upper[i]).contains(&v) {
                    return Err(Error::OutOfRange {
                        index: i,
                        value: v,
                        lower: self.lower[i],
                        upper: self.upper[i],
                    });
                }
            }
        }
        Ok(())
    }

    fn check(&self, m: &[f64; N_PARAMS]) -> Result<()> {
        for i in 0..N_PARAMS {
            if !(self.lower[i]..=self.upper[i]).contains(&m[i]) {
                return Err(Error::OutOfRange {
                    index: i,
                    value: m[i],
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    /// Affine map of multipliers onto the unit cube.
    pub fn to_unit(&self, m: &Multipliers) -> Result<[f64; N_PARAMS]> {
        self.check(&m.0)?;
        let mut u = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            u[i] = (m.0[i] - self.lower[i]) / (self.upper[i] - self.lower[i]);
        }
        Ok(u)
    }

    /// Inverse of [`ParameterSpace::to_unit`].
    pub fn from_unit(&self, u: &[f64; N_PARAMS]) -> Result<Multipliers> {
        for (i, &x) in u.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::OutOfRange {
                    index: i,
                    value: x,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
        }
        let mut m = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            m[i] = self.lower[i] + u[i] * (self.upper[i] - self.lower[i]);
        }
        Ok(Multipliers(m))
    }

    /// Multipliers from unit coordinates of the free dimensions only; fixed
    /// dimensions take their fixed value.
    pub fn from_free_unit(&self, x: &[f64]) -> Result<Multipliers> {
        let free = self.free_dims();
        if x.len() != free.len() {
            return Err(Error::Contract(format!(
                "{} coordinates for {} free dimensions",
                x.len(),
                free.len()
            )));
        }
        let mut m = self.centred(1.0);
        for (&d, &v) in free.iter().zip(x) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    index: d,
                    value: v,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
            m[d] = self.lower[d] + v * (self.upper[d] - self.lower[d]);
        }
        Ok(Multipliers(m))
    }

    /// Physical parameters: baseline times multiplier.
    pub fn apply_multipliers(&self, m: &Multipliers) -> Result<InputParameters> {
        self.check(&m.0)?;
        let mut a = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            a[i] = self.baselines[i] * m.0[i];
        }
        Ok(InputParameters::from_array(&a))
    }

    /// Multipliers with free dimensions set to `value` (clamped) and fixed
    /// dimensions at their fixed values.
    fn centred(&self, value: f64) -> [f64; N_PARAMS] {
        let mut m = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            m[i] = self.fixed[i].unwrap_or(value.clamp(self.lower[i], self.upper[i]));
        }
        m
    }
}

/// Latin hypercube design over the free dimensions of `space`.
///
/// Each free dimension gets an independent random permutation of the `n`
/// equal-width bins with a uniform jitter inside each bin.
pub fn lhs_sample(n: usize, space: &ParameterSpace, seed: u64) -> Result<Vec<Multipliers>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "LHS needs at least one sample".into(),
        ));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Multipliers> = (0..n).map(|_| Multipliers(space.centred(1.0))).collect();
    let mut bins: Vec<usize> = (0..n).collect();
    for d in space.free_dims() {
        bins.shuffle(&mut rng);
        let (lo, hi) = (space.lower[d], space.upper[d]);
        for (row, &b) in out.iter_mut().zip(&bins) {
            let u = (b as f64 + rng.gen::<f64>()) / n as f64;
            row.0[d] = (lo + u * (hi - lo)).min(hi);
        }
    }
    Ok(out)
}

/// Design used to calibrate the output scaling: every corner of the
/// designated extreme dimensions (those that are free), the baseline, and an
/// LHS fill up to at least 16 points.
pub fn calibration_design(
    space: &ParameterSpace,
    extreme_dims: &[usize],
    n_lhs: usize,
    seed: u64,
) -> Result<Vec<Multipliers>> {
    space.validate()?;
    let dims: Vec<usize> = extreme_dims
        .iter()
        .copied()
        .filter(|d| space.fixed[*d].is_none())
        .collect();
    let base = space.centred(1.0);
    let mut design = vec![Multipliers(base)];
    for mask in 0..(1usize << dims.len()) {
        let mut m = base;
        for (bit, &d) in dims.iter().enumerate() {
            m[d] = if mask >> bit & 1 == 1 {
                space.upper[d]
            } else {
                space.lower[d]
            };
        }
        design.push(Multipliers(m));
    }
    let fill = n_lhs.max(16usize.saturating_sub(design.len())).max(1);
    design.extend(lhs_sample(fill, space, seed)?);
    Ok(design)
}

/// Default extreme dimensions for calibration.
pub const EXTREME_DIMS: [usize; 3] = [idx::E_ES, idx::C_VC, idx::C_ART];

/// Output range of one network, in ml.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bracket {
    pub min: f64,
    pub max: f64,
}

impl Bracket {
    /// Observed range padded by 20% of its span on each side, with a floor
    /// of +-1 ml around the midpoint for degenerate spans.
    pub fn padded(observed_min: f64, observed_max: f64) -> Self {
        let span = observed_max - observed_min;
        let (min, max) = (observed_min - 0.2 * span, observed_max + 0.2 * span);
        if max - min < 2.0 {
            let mid = 0.5 * (observed_min + observed_max);
            Self {
                min: mid - 1.0,
                max: mid + 1.0,
            }
        } else {
            Self { min, max }
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.max - self.min)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }
}

/// Physical ranges that the `[-1, 1]` network outputs are mapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeScaling {
    pub lv: Bracket,
    pub ao: Bracket,
    pub art: Bracket,
    pub la: Bracket,
}

impl VolumeScaling {
    /// Brackets in network order (lv, ao, art, la).
    pub fn brackets(&self) -> [Bracket; 4] {
        [self.lv, self.ao, self.art, self.la]
    }

    pub fn from_brackets(b: [Bracket; 4]) -> Self {
        Self {
            lv: b[0],
            ao: b[1],
            art: b[2],
            la: b[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.brackets() {
            if !(b.min < b.max) || !b.min.is_finite() || !b.max.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "volume bracket [{}, {}] is empty",
                    b.min, b.max
                )));
            }
        }
        Ok(())
    }
}

/// Runs the numerical model on every design point and brackets the
/// observed lv/ao/art/la volumes.
///
/// Diverged solves are skipped; more than 10% skipped is an error.
pub fn calibrate_volume_scaling(
    design: &[Multipliers],
    space: &ParameterSpace,
    c: &ModelConstants,
    cfg: &SolverConfig,
) -> Result<VolumeScaling> {
    if design.is_empty() {
        return Err(Error::InvalidArgument("calibration design is empty".into()));
    }
    let runs: Vec<Result<([f64; 4], [f64; 4])>> = design
        .par_iter()
        .map(|m| {
            let p = space.apply_multipliers(m)?;
            let sol = solve_steady(&p, c, cfg)?;
            let mut lo = [f64::INFINITY; 4];
            let mut hi = [f64::NEG_INFINITY; 4];
            for v in &sol.volumes {
                for (k, x) in [v.lv, v.ao, v.art, v.la].into_iter().enumerate() {
                    lo[k] = lo[k].min(x);
                    hi[k] = hi[k].max(x);
                }
            }
            Ok((lo, hi))
        })
        .collect();

    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    let mut failed = 0;
    for r in runs {
        match r {
            Ok((l, h)) => {
                for k in 0..4 {
                    lo[k] = lo[k].min(l[k]);
                    hi[k] = hi[k].max(h[k]);
                }
            }
            Err(Error::IntegrationDiverged { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed * 10 > design.len() {
        return Err(Error::TooManyFailures {
            failed,
            total: design.len(),
            what: "calibration solves".into(),
        });
    }
    Ok(VolumeScaling::from_brackets([
        Bracket::padded(lo[0], hi[0]),
        Bracket::padded(lo[1], hi[1]),
        Bracket::padded(lo[2], hi[2]),
        Bracket::padded(lo[3], hi[3]),
    ]))
}

pub fn write_dataset<W: Write>(cases: &[Multipliers], mut w: W) -> Result<()> {
    writeln!(w, "{DATASET_HEADER}")?;
    for (id, m) in cases.iter().enumerate() {
        let cols: Vec<String> = m.0.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{id},{}", cols.join(","))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Multipliers>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("dataset is empty".into()))??;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Validation(format!(
            "unexpected dataset header: {header}"
        )));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != N_PARAMS + 1 {
            return Err(Error::Validation(format!(
                "dataset row {row} has {} columns",
                fields.len()
            )));
        }
        let mut m = [0.0; N_PARAMS];
        for (i, f) in fields[1..].iter().enumerate() {
            m[i] = f
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("dataset row {row}: bad number {f:?}")))?;
        }
        out.push(Multipliers(m));
    }
    Ok(out)
}
