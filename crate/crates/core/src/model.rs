//! Closed-loop circulation with a time-varying elastance left ventricle and
//! left atrium.
//!
//! Five compliance compartments (LV, aorta, peripheral arteries, vena cava,
//! LA) connected in a ring by five resistances. The two valves only pass
//! forward flow, either through a hard `max(dP, 0)` law or a softplus
//! relaxation of it.
//!
//! Units throughout: ml, mmHg, ms, ml/ms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of physiological inputs exposed to the surrogate and the samplers.
pub const N_PARAMS: usize = 10;

/// Canonical parameter order used by multipliers, datasets and fit reports.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "R_av", "R_ao", "C_ao", "R_art", "C_art", "R_vc", "C_vc", "R_mv", "E_es", "t_tr",
];

/// Position of each parameter in [`PARAM_NAMES`].
pub mod idx {
    pub const R_AV: usize = 0;
    pub const R_AO: usize = 1;
    pub const C_AO: usize = 2;
    pub const R_ART: usize = 3;
    pub const C_ART: usize = 4;
    pub const R_VC: usize = 5;
    pub const C_VC: usize = 6;
    pub const R_MV: usize = 7;
    pub const E_ES: usize = 8;
    pub const T_TR: usize = 9;
}

/// Fixed physiological constants of the loop, the ventricle and the atrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConstants {
    /// Cycle duration (ms).
    pub t_c: f64,
    /// Total blood volume (ml).
    pub v_total: f64,
    pub v_ao_r: f64,
    pub v_art_r: f64,
    pub v_vc_r: f64,
    /// LV EDPVR scale (mmHg/ml).
    pub a_lv: f64,
    /// LV EDPVR exponent (1/ml).
    pub b_lv: f64,
    pub v_lv_r: f64,
    pub t_max_lv: f64,
    pub tau_lv: f64,
    pub e_es_la: f64,
    pub a_la: f64,
    pub b_la: f64,
    pub v_la_r: f64,
    pub t_max_la: f64,
    pub tau_la: f64,
    pub t_tr_la: f64,
}

impl Default for ModelConstants {
    fn default() -> Self {
        Self {
            t_c: 800.0,
            v_total: 5200.0,
            v_ao_r: 100.0,
            v_art_r: 900.0,
            v_vc_r: 2800.0,
            a_lv: 1.0,
            b_lv: 0.027,
            v_lv_r: 10.0,
            t_max_lv: 280.0,
            tau_lv: 25.0,
            e_es_la: 0.45,
            a_la: 0.45,
            b_la: 0.05,
            v_la_r: 10.0,
            t_max_la: 150.0,
            tau_la: 25.0,
            t_tr_la: 225.0,
        }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("t_c", self.t_c),
            ("v_total", self.v_total),
            ("v_ao_r", self.v_ao_r),
            ("v_art_r", self.v_art_r),
            ("v_vc_r", self.v_vc_r),
            ("a_lv", self.a_lv),
            ("b_lv", self.b_lv),
            ("v_lv_r", self.v_lv_r),
            ("t_max_lv", self.t_max_lv),
            ("tau_lv", self.tau_lv),
            ("e_es_la", self.e_es_la),
            ("a_la", self.a_la),
            ("b_la", self.b_la),
            ("v_la_r", self.v_la_r),
            ("t_max_la", self.t_max_la),
            ("tau_la", self.tau_la),
            ("t_tr_la", self.t_tr_la),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "constant {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.t_tr_la >= self.t_c || self.t_max_lv >= self.t_c {
            return Err(Error::InvalidArgument(
                "t_tr_la and t_max_lv must be shorter than the cycle".into(),
            ));
        }
        Ok(())
    }

    pub fn lv_timing(&self, t_tr: f64) -> ChamberTiming {
        ChamberTiming {
            t_max: self.t_max_lv,
            t_tr,
            tau: self.tau_lv,
            t_c: self.t_c,
        }
    }

    pub fn la_timing(&self) -> ChamberTiming {
        ChamberTiming {
            t_max: self.t_max_la,
            t_tr: self.t_tr_la,
            tau: self.tau_la,
            t_c: self.t_c,
        }
    }
}

/// The ten physiological inputs in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputParameters {
    pub r_av: f64,
    pub r_ao: f64,
    pub r_art: f64,
    pub r_vc: f64,
    pub r_mv: f64,
    pub c_ao: f64,
    pub c_art: f64,
    pub c_vc: f64,
    /// LV end-systolic elastance (mmHg/ml).
    pub e_es: f64,
    /// LV transition time (ms).
    pub t_tr: f64,
}

impl InputParameters {
    pub fn baseline() -> Self {
        Self {
            r_av: 6.0,
            r_ao: 240.0,
            r_art: 1125.0,
            r_vc: 9.0,
            r_mv: 4.1,
            c_ao: 0.3,
            c_art: 3.0,
            c_vc: 133.3,
            e_es: 3.0,
            t_tr: 420.0,
        }
    }

    /// Values in [`PARAM_NAMES`] order.
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.r_av, self.r_ao, self.c_ao, self.r_art, self.c_art, self.r_vc, self.c_vc,
            self.r_mv, self.e_es, self.t_tr,
        ]
    }

    pub fn from_array(a: &[f64; N_PARAMS]) -> Self {
        Self {
            r_av: a[idx::R_AV],
            r_ao: a[idx::R_AO],
            c_ao: a[idx::C_AO],
            r_art: a[idx::R_ART],
            c_art: a[idx::C_ART],
            r_vc: a[idx::R_VC],
            c_vc: a[idx::C_VC],
            r_mv: a[idx::R_MV],
            e_es: a[idx::E_ES],
            t_tr: a[idx::T_TR],
        }
    }

    pub fn validate(&self, c: &ModelConstants) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.t_tr > c.t_c {
            return Err(Error::InvalidArgument(format!(
                "t_tr = {} exceeds the cycle length {}",
                self.t_tr, c.t_c
            )));
        }
        Ok(())
    }
}

impl Default for InputParameters {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Dimensionless scale factors applied to the baseline [`InputParameters`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers(pub [f64; N_PARAMS]);

impl Multipliers {
    pub fn ones() -> Self {
        Self([1.0; N_PARAMS])
    }
}

/// Compartment volumes (ml).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVolumes {
    pub lv: f64,
    pub ao: f64,
    pub art: f64,
    pub vc: f64,
    pub la: f64,
}

impl StateVolumes {
    pub fn to_array(&self) -> [f64; 5] {
        [self.lv, self.ao, self.art, self.vc, self.la]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            lv: a[0],
            ao: a[1],
            art: a[2],
            vc: a[3],
            la: a[4],
        }
    }

    pub fn total(&self) -> f64 {
        self.lv + self.ao + self.art + self.vc + self.la
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Compartment pressures (mmHg).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pressures {
    pub lv: f64,
    pub ao: f64,
    pub art: f64,
    pub vc: f64,
    pub la: f64,
}

impl Pressures {
    pub fn to_array(&self) -> [f64; 5] {
        [self.lv, self.ao, self.art, self.vc, self.la]
    }
}

/// Flow rates (ml/ms) through the five resistances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowRates {
    pub av: f64,
    pub ao: f64,
    pub art: f64,
    pub vc: f64,
    pub mv: f64,
}

impl FlowRates {
    pub fn to_array(&self) -> [f64; 5] {
        [self.av, self.ao, self.art, self.vc, self.mv]
    }
}

/// Pascals per mmHg.
pub const PA_PER_MMHG: f64 = 133.322_387_415;

/// Valve opening law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ValveLaw {
    Hard,
    /// Softplus relaxation. `alpha` is the sharpness per pascal of pressure
    /// difference; pressures stay in mmHg, so the relaxation acts with
    /// `alpha * PA_PER_MMHG` per mmHg.
    Smooth {
        alpha: f64,
    },
}

impl ValveLaw {
    pub fn smooth(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smooth valve alpha must be positive, got {alpha}"
            )));
        }
        Ok(ValveLaw::Smooth { alpha })
    }

    /// Opening function applied to a pressure difference, before division by
    /// the valve resistance.
    #[inline]
    pub fn open(&self, dp: f64) -> f64 {
        match *self {
            ValveLaw::Hard => dp.max(0.0),
            ValveLaw::Smooth { alpha } => relaxed_max(dp, alpha * PA_PER_MMHG),
        }
    }

    /// Derivative of [`ValveLaw::open`] with respect to the pressure difference.
    #[inline]
    pub fn open_slope(&self, dp: f64) -> f64 {
        match *self {
            ValveLaw::Hard => {
                if dp > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ValveLaw::Smooth { alpha } => {
                let z = alpha * PA_PER_MMHG * dp;
                if z > 20.0 {
                    1.0
                } else {
                    1.0 / (1.0 + (-z).exp())
                }
            }
        }
    }
}

/// `log(1 + e^z)`, switching to the identity above 20.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z <= 20.0 {
        z.exp().ln_1p()
    } else {
        z
    }
}

/// Smooth approximation of `max(x - y, 0)`.
pub fn smooth_max(x: f64, y: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smooth_max alpha must be positive, got {alpha}"
        )));
    }
    Ok(relaxed_max(x - y, alpha))
}

#[inline]
fn relaxed_max(d: f64, alpha: f64) -> f64 {
    let z = alpha * d;
    if z > 20.0 {
        d
    } else {
        z.exp().ln_1p() / alpha
    }
}

/// Aortic, arterial and venous pressures from their volumes.
pub fn vessel_pressures(
    v: &StateVolumes,
    p: &InputParameters,
    c: &ModelConstants,
) -> (f64, f64, f64) {
    (
        (v.ao - c.v_ao_r) / p.c_ao,
        (v.art - c.v_art_r) / p.c_art,
        (v.vc - c.v_vc_r) / p.c_vc,
    )
}

/// Timing constants of one chamber's activation curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamberTiming {
    pub t_max: f64,
    pub t_tr: f64,
    pub tau: f64,
    pub t_c: f64,
}

/// Activation `e(t)` blending end-diastolic and end-systolic behaviour:
/// a raised cosine up to `t_tr`, exponential relaxation afterwards.
pub fn elastance_fraction(t: f64, timing: &ChamberTiming) -> Result<f64> {
    if !(0.0..=timing.t_c).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside [0, {}]",
            timing.t_c
        )));
    }
    Ok(activation(t, timing))
}

/// Unchecked activation for callers that already keep `t` inside the cycle.
#[inline]
pub(crate) fn activation(t: f64, timing: &ChamberTiming) -> f64 {
    if t <= timing.t_tr {
        0.5 * (1.0 - (std::f64::consts::PI * t / timing.t_max).cos())
    } else {
        0.5 * (-(t - timing.t_tr) / timing.tau).exp()
    }
}

/// Atrial clock: the ventricular time shifted forward by a tenth of a cycle.
#[inline]
pub fn atrial_time(t: f64, t_c: f64) -> f64 {
    if t <= 0.9 * t_c {
        t + 0.1 * t_c
    } else {
        t - 0.9 * t_c
    }
}

/// Elastance parameters of a chamber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamberLaw {
    pub e_es: f64,
    pub a: f64,
    pub b: f64,
    pub v_r: f64,
}

impl ChamberLaw {
    pub fn lv(p: &InputParameters, c: &ModelConstants) -> Self {
        Self {
            e_es: p.e_es,
            a: c.a_lv,
            b: c.b_lv,
            v_r: c.v_lv_r,
        }
    }

    pub fn la(c: &ModelConstants) -> Self {
        Self {
            e_es: c.e_es_la,
            a: c.a_la,
            b: c.b_la,
            v_r: c.v_la_r,
        }
    }

    /// Pressure for a given activation level.
    #[inline]
    pub fn pressure_at(&self, v: f64, e: f64) -> f64 {
        let dv = v - self.v_r;
        e * self.e_es * dv + (1.0 - e) * self.a * ((self.b * dv).exp() - 1.0)
    }

    /// `dP/dV` for a given activation level.
    #[inline]
    pub fn stiffness_at(&self, v: f64, e: f64) -> f64 {
        e * self.e_es + (1.0 - e) * self.a * self.b * (self.b * (v - self.v_r)).exp()
    }
}

/// Time-varying elastance pressure of a chamber.
pub fn chamber_pressure(v: f64, t: f64, law: &ChamberLaw, timing: &ChamberTiming) -> Result<f64> {
    let e = elastance_fraction(t, timing)?;
    Ok(law.pressure_at(v, e))
}

/// Activation levels of the ventricle and the atrium at ventricular time `t`.
#[inline]
pub fn activations(t: f64, p: &InputParameters, c: &ModelConstants) -> (f64, f64) {
    let t = wrap_time(t, c.t_c);
    (
        activation(t, &c.lv_timing(p.t_tr)),
        activation(atrial_time(t, c.t_c), &c.la_timing()),
    )
}

/// Maps any finite time onto `[0, t_c)`.
#[inline]
pub fn wrap_time(t: f64, t_c: f64) -> f64 {
    let w = t.rem_euclid(t_c);
    if w >= t_c {
        0.0
    } else {
        w
    }
}

/// All five pressures for given activation levels.
#[inline]
pub fn pressures_at(
    v: &StateVolumes,
    e_lv: f64,
    e_la: f64,
    p: &InputParameters,
    c: &ModelConstants,
) -> Pressures {
    let (ao, art, vc) = vessel_pressures(v, p, c);
    Pressures {
        lv: ChamberLaw::lv(p, c).pressure_at(v.lv, e_lv),
        ao,
        art,
        vc,
        la: ChamberLaw::la(c).pressure_at(v.la, e_la),
    }
}

/// All five pressures at ventricular time `t` (wrapped into the cycle).
pub fn pressures(t: f64, v: &StateVolumes, p: &InputParameters, c: &ModelConstants) -> Pressures {
    let (e_lv, e_la) = activations(t, p, c);
    pressures_at(v, e_lv, e_la, p, c)
}

/// Flows through the five resistances.
#[inline]
pub fn flow_rates(pr: &Pressures, p: &InputParameters, law: ValveLaw) -> FlowRates {
    FlowRates {
        av: law.open(pr.lv - pr.ao) / p.r_av,
        ao: (pr.ao - pr.art) / p.r_ao,
        art: (pr.art - pr.vc) / p.r_art,
        vc: (pr.vc - pr.la) / p.r_vc,
        mv: law.open(pr.la - pr.lv) / p.r_mv,
    }
}

/// Net inflow of every compartment for the given flows, in `StateVolumes`
/// order (lv, ao, art, vc, la).
#[inline]
pub fn net_inflow(q: &FlowRates) -> [f64; 5] {
    [
        q.mv - q.av,
        q.av - q.ao,
        q.ao - q.art,
        q.art - q.vc,
        q.vc - q.mv,
    ]
}

/// Right-hand side of the circulation ODE at ventricular time `t`.
pub fn ode_rhs(
    t: f64,
    v: &StateVolumes,
    p: &InputParameters,
    c: &ModelConstants,
    law: ValveLaw,
) -> [f64; 5] {
    let pr = pressures(t, v, p, c);
    net_inflow(&flow_rates(&pr, p, law))
}

/// Right-hand side together with its Jacobian with respect to the five
/// volumes, `jac[i][j] = d rhs_i / d V_j`, for given activation levels.
pub fn ode_rhs_with_jacobian(
    v: &StateVolumes,
    e_lv: f64,
    e_la: f64,
    p: &InputParameters,
    c: &ModelConstants,
    law: ValveLaw,
) -> ([f64; 5], [[f64; 5]; 5]) {
    let pr = pressures_at(v, e_lv, e_la, p, c);
    let q = flow_rates(&pr, p, law);

    // dP/dV is diagonal.
    let dp = [
        ChamberLaw::lv(p, c).stiffness_at(v.lv, e_lv),
        1.0 / p.c_ao,
        1.0 / p.c_art,
        1.0 / p.c_vc,
        ChamberLaw::la(c).stiffness_at(v.la, e_la),
    ];
    let g_av = law.open_slope(pr.lv - pr.ao) / p.r_av;
    let g_mv = law.open_slope(pr.la - pr.lv) / p.r_mv;
    let (g_ao, g_art, g_vc) = (1.0 / p.r_ao, 1.0 / p.r_art, 1.0 / p.r_vc);

    // dq/dV rows for (av, ao, art, vc, mv), columns in compartment order.
    let mut dq = [[0.0; 5]; 5];
    dq[0][0] = g_av * dp[0];
    dq[0][1] = -g_av * dp[1];
    dq[1][1] = g_ao * dp[1];
    dq[1][2] = -g_ao * dp[2];
    dq[2][2] = g_art * dp[2];
    dq[2][3] = -g_art * dp[3];
    dq[3][3] = g_vc * dp[3];
    dq[3][4] = -g_vc * dp[4];
    dq[4][4] = g_mv * dp[4];
    dq[4][0] = -g_mv * dp[0];

    // rhs = S q with S the signed incidence of each compartment.
    let (av, ao, art, vc, mv) = (0, 1, 2, 3, 4);
    let pairs = [(mv, av), (av, ao), (ao, art), (art, vc), (vc, mv)];
    let mut jac = [[0.0; 5]; 5];
    for (i, &(inflow, outflow)) in pairs.iter().enumerate() {
        for j in 0..5 {
            jac[i][j] = dq[inflow][j] - dq[outflow][j];
        }
    }
    (net_inflow(&q), jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn baseline_lv_timing() -> ChamberTiming {
        ModelConstants::default().lv_timing(420.0)
    }

    #[test]
    fn softplus_values() {
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(softplus(25.0), 25.0);
        assert_relative_eq!(softplus(-0.1), 0.644_396_660_073_570_9, epsilon = 1e-15);
        // The branch switch at 20 drops by log1p(e^-20) ~ 2e-9.
        assert!(softplus(20.0) - softplus(20.0 + 1e-12) < 2.1e-9);
        assert!(softplus(19.0) < softplus(19.5) && softplus(20.5) < softplus(21.0));
    }

    #[test]
    fn smooth_max_values() {
        assert_relative_eq!(
            smooth_max(5.0, 5.0, 0.01).unwrap(),
            100.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            smooth_max(69.3147, 69.3147, 0.01).unwrap(),
            69.3147,
            epsilon = 1e-4
        );
        assert_eq!(smooth_max(2500.0, 0.0, 0.01).unwrap(), 2500.0);
        assert_relative_eq!(
            smooth_max(0.0, 10.0, 0.01).unwrap(),
            64.439_666_007_357_09,
            epsilon = 1e-11
        );
        assert!(matches!(
            smooth_max(1.0, 0.0, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(smooth_max(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn vessel_pressure_values() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v = StateVolumes {
            lv: 100.0,
            ao: 130.0,
            art: 900.0,
            vc: 2933.3,
            la: 50.0,
        };
        let (ao, art, vc) = vessel_pressures(&v, &p, &c);
        assert_relative_eq!(ao, 100.0, epsilon = 1e-12);
        assert_eq!(art, 0.0);
        assert_relative_eq!(vc, 1.0, epsilon = 1e-12);
        let below = StateVolumes { ao: 90.0, ..v };
        assert!(vessel_pressures(&below, &p, &c).0 < 0.0);
    }

    #[test]
    fn elastance_fraction_values() {
        let tm = baseline_lv_timing();
        assert_eq!(elastance_fraction(0.0, &tm).unwrap(), 0.0);
        assert_relative_eq!(
            elastance_fraction(280.0, &tm).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            elastance_fraction(445.0, &tm).unwrap(),
            0.183_939_720_585_721_16,
            epsilon = 1e-15
        );
        assert!(elastance_fraction(-1.0, &tm).is_err());
        assert!(elastance_fraction(800.1, &tm).is_err());
        assert!(elastance_fraction(800.0, &tm).is_ok());
    }

    #[test]
    fn elastance_continuous_at_baseline_transition() {
        let tm = baseline_lv_timing();
        let at = elastance_fraction(420.0, &tm).unwrap();
        let after = elastance_fraction(420.0 + 1e-9, &tm).unwrap();
        assert_relative_eq!(at, 0.5, epsilon = 1e-12);
        assert_relative_eq!(after, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn elastance_in_unit_interval_when_transition_after_peak() {
        let tm = baseline_lv_timing();
        for k in 0..=800 {
            let e = elastance_fraction(k as f64, &tm).unwrap();
            assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn atrial_time_values() {
        assert_eq!(atrial_time(0.0, 800.0), 80.0);
        assert_eq!(atrial_time(800.0, 800.0), 80.0);
        assert_eq!(atrial_time(720.0, 800.0), 800.0);
        for k in 0..=800 {
            let ta = atrial_time(k as f64, 800.0);
            assert!((0.0..=800.0).contains(&ta));
        }
    }

    #[test]
    fn chamber_pressure_values() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let lv = ChamberLaw::lv(&p, &c);
        let tm = baseline_lv_timing();
        for t in [0.0, 100.0, 280.0, 500.0] {
            assert_eq!(chamber_pressure(10.0, t, &lv, &tm).unwrap(), 0.0);
        }
        assert_relative_eq!(
            chamber_pressure(60.0, 280.0, &lv, &tm).unwrap(),
            150.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            chamber_pressure(110.0, 0.0, &lv, &tm).unwrap(),
            13.879_731_724_872_834,
            epsilon = 1e-12
        );
    }

    #[test]
    fn flow_rate_values() {
        let p = InputParameters::baseline();
        let pr = Pressures {
            lv: 50.0,
            ao: 100.0,
            art: 97.6,
            vc: 2.0,
            la: 50.0,
        };
        let q = flow_rates(&pr, &p, ValveLaw::Hard);
        assert_relative_eq!(q.ao, 0.01, epsilon = 1e-12);
        assert_eq!(q.av, 0.0);
        assert_eq!(q.mv, 0.0);
        let qs = flow_rates(&pr, &p, ValveLaw::smooth(0.01).unwrap());
        assert_relative_eq!(qs.mv, 0.126_805_625_986_284_45, epsilon = 1e-14);
        // The unit-free relaxation at alpha = 0.01 per mmHg.
        assert_relative_eq!(
            smooth_max(pr.la, pr.lv, 0.01).unwrap() / p.r_mv,
            16.906_028_794_145_01,
            epsilon = 1e-11
        );
    }

    // Independent scalar evaluation, written without the helpers above.
    #[test]
    fn ode_rhs_matches_hand_evaluation() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v = StateVolumes {
            lv: 125.0,
            ao: 130.0,
            art: 1050.0,
            vc: 2933.3,
            la: 55.0,
        };
        let hard = ode_rhs(0.0, &v, &p, &c, ValveLaw::Hard);
        let expected_hard = [
            0.0,
            -0.208_333_333_333_333_33,
            0.164_777_777_777_777_78,
            1.365_052_111_939_609,
            -1.321_496_556_384_053_5,
        ];
        for (a, b) in hard.iter().zip(expected_hard) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let smooth = ode_rhs(0.0, &v, &p, &c, ValveLaw::smooth(0.01).unwrap());
        let expected_smooth = [
            2.451_838_453_739_337e-6,
            -0.208_333_333_333_333_33,
            0.164_777_777_777_777_78,
            1.365_052_111_939_609,
            -1.321_499_008_222_507,
        ];
        for (a, b) in smooth.iter().zip(expected_smooth) {
            assert_relative_eq!(*a, b, epsilon = 1e-12, max_relative = 1e-9);
        }
    }

    #[test]
    fn rhs_sums_to_zero_for_equal_flows() {
        let q = FlowRates {
            av: 0.3,
            ao: 0.3,
            art: 0.3,
            vc: 0.3,
            mv: 0.3,
        };
        assert_eq!(net_inflow(&q), [0.0; 5]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v = StateVolumes {
            lv: 120.0,
            ao: 135.0,
            art: 1040.0,
            vc: 3850.0,
            la: 55.0,
        };
        for law in [
            ValveLaw::smooth(0.01).unwrap(),
            ValveLaw::smooth(0.002).unwrap(),
            ValveLaw::smooth(1e-5).unwrap(),
        ] {
            for t in [10.0, 250.0, 430.0, 700.0] {
                let (e_lv, e_la) = activations(t, &p, &c);
                let (_, jac) = ode_rhs_with_jacobian(&v, e_lv, e_la, &p, &c, law);
                for j in 0..5 {
                    let h = 1e-5;
                    let mut up = v.to_array();
                    let mut dn = v.to_array();
                    up[j] += h;
                    dn[j] -= h;
                    let fu = ode_rhs(t, &StateVolumes::from_array(up), &p, &c, law);
                    let fd = ode_rhs(t, &StateVolumes::from_array(dn), &p, &c, law);
                    for i in 0..5 {
                        let fdv = (fu[i] - fd[i]) / (2.0 * h);
                        assert!(
                            (fdv - jac[i][j]).abs() < 1e-6 * (1.0 + fdv.abs()),
                            "jac[{i}][{j}] = {} vs fd {fdv}",
                            jac[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn constants_defaults_validate() {
        ModelConstants::default().validate().unwrap();
        InputParameters::baseline()
            .validate(&ModelConstants::default())
            .unwrap();
        let bad = ModelConstants {
            t_tr_la: 900.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_array_order_round_trips() {
        let p = InputParameters::baseline();
        let a = p.to_array();
        assert_eq!(a[idx::E_ES], 3.0);
        assert_eq!(a[idx::C_AO], 0.3);
        assert_eq!(InputParameters::from_array(&a), p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rhs_conserves_mass(
                lv in 5.0..400.0f64, ao in 50.0..300.0f64, art in 500.0..1500.0f64,
                vc in 2000.0..4500.0f64, la in 5.0..200.0f64, t in 0.0..800.0f64,
                alpha in prop::option::of(0.001..1.0f64),
            ) {
                let c = ModelConstants::default();
                let p = InputParameters::baseline();
                let law = alpha.map_or(ValveLaw::Hard, |a| ValveLaw::Smooth { alpha: a });
                let v = StateVolumes { lv, ao, art, vc, la };
                let d = ode_rhs(t, &v, &p, &c, law);
                let scale: f64 = d.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
                prop_assert!(d.iter().sum::<f64>().abs() <= 1e-14 * scale);
            }

            #[test]
            fn smooth_max_gap_bounded(x in -1e3..1e3f64, y in -1e3..1e3f64, alpha in 1e-3..10.0f64) {
                let s = smooth_max(x, y, alpha).unwrap();
                let hard = (x - y).max(0.0);
                let gap = s - hard;
                prop_assert!(s >= 0.0);
                prop_assert!(gap >= 0.0 && gap <= std::f64::consts::LN_2 / alpha * (1.0 + 1e-12));
                if alpha * (x - y) > 20.0 {
                    prop_assert_eq!(s, x - y);
                }
                // gap is non-increasing in alpha
                let s2 = smooth_max(x, y, alpha * 2.0).unwrap();
                prop_assert!(s2 - hard <= gap + 1e-12);
            }

            #[test]
            fn chamber_pressure_increasing_in_volume(
                v in 10.5..400.0f64, dv in 0.01..50.0f64, t in 0.0..800.0f64,
            ) {
                let c = ModelConstants::default();
                let p = InputParameters::baseline();
                let law = ChamberLaw::lv(&p, &c);
                let tm = c.lv_timing(p.t_tr);
                let a = chamber_pressure(v, t, &law, &tm).unwrap();
                let b = chamber_pressure(v + dv, t, &law, &tm).unwrap();
                prop_assert!(b > a);
            }

            #[test]
            fn atrial_time_injective_away_from_wrap(a in 0.0..800.0f64, b in 0.0..800.0f64) {
                prop_assume!(a != b);
                // 0 and the cycle end both map to 0.1 T_c.
                prop_assume!(!(a == 0.0 || b == 0.0));
                prop_assert_ne!(atrial_time(a, 800.0), atrial_time(b, 800.0));
            }
        }
    }
}
