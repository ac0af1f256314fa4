//! Forward-Euler integration of the circulation to its periodic steady state.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    activation, atrial_time, flow_rates, net_inflow, ode_rhs, pressures, pressures_at, wrap_time,
    FlowRates, InputParameters, ModelConstants, Pressures, StateVolumes, ValveLaw,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Requested step (ms); snapped so that a cycle holds a whole number of steps.
    pub dt: f64,
    pub max_cycles: usize,
    /// Cycle-to-cycle volume drift, relative to the total volume.
    pub cycle_tol: f64,
    pub law: ValveLaw,
    /// Output samples per cycle.
    pub n_out: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            max_cycles: 200,
            cycle_tol: 1e-6,
            law: ValveLaw::Hard,
            n_out: 400,
        }
    }
}

impl SolverConfig {
    /// Coarser settings used for large sampling campaigns.
    pub fn loosened() -> Self {
        Self {
            dt: 0.1,
            cycle_tol: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self, c: &ModelConstants) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= c.t_c) {
            return Err(Error::InvalidArgument(format!(
                "dt must lie in (0, T_c], got {}",
                self.dt
            )));
        }
        if !(self.cycle_tol > 0.0) {
            return Err(Error::InvalidArgument("cycle_tol must be positive".into()));
        }
        if self.max_cycles == 0 {
            return Err(Error::InvalidArgument(
                "max_cycles must be at least 1".into(),
            ));
        }
        if self.n_out < 2 {
            return Err(Error::InvalidArgument("n_out must be at least 2".into()));
        }
        if let ValveLaw::Smooth { alpha } = self.law {
            ValveLaw::smooth(alpha)?;
        }
        Ok(())
    }

    /// Number of steps per cycle after snapping `dt` to the cycle length.
    pub fn steps_per_cycle(&self, t_c: f64) -> usize {
        ((t_c / self.dt).round() as usize).max(1)
    }
}

/// A uniformly sampled signal over one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

/// Signals recorded by the solver, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Volume(usize),
    Pressure(usize),
    Flow(usize),
}

pub const CSV_HEADER: &str =
    "t_ms,V_lv,V_ao,V_art,V_vc,V_la,P_lv,P_ao,P_art,P_vc,P_la,q_av,q_ao,q_art,q_vc,q_mv";

/// One recorded cycle of the periodic steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSolution {
    pub t: Vec<f64>,
    pub volumes: Vec<StateVolumes>,
    pub pressures: Vec<Pressures>,
    pub flows: Vec<FlowRates>,
    pub cycles_run: usize,
    pub converged: bool,
    /// Largest compartment drift over the last settling cycle, relative to V_total.
    pub cyclic_residual: f64,
    /// Volume passed by the aortic valve during the recorded cycle (ml).
    pub aortic_throughput: f64,
    /// Volume passed by the mitral valve during the recorded cycle (ml).
    pub mitral_throughput: f64,
    /// Volumes at the end of the recorded cycle (t = T_c).
    pub end_state: StateVolumes,
}

impl CycleSolution {
    pub fn waveform(&self, s: Signal) -> Waveform {
        let y = match s {
            Signal::Volume(i) => self.volumes.iter().map(|v| v.to_array()[i]).collect(),
            Signal::Pressure(i) => self.pressures.iter().map(|p| p.to_array()[i]).collect(),
            Signal::Flow(i) => self.flows.iter().map(|q| q.to_array()[i]).collect(),
        };
        Waveform {
            t: self.t.clone(),
            y,
        }
    }

    pub fn v_lv(&self) -> Vec<f64> {
        self.volumes.iter().map(|v| v.lv).collect()
    }

    pub fn p_lv(&self) -> Vec<f64> {
        self.pressures.iter().map(|p| p.lv).collect()
    }

    /// max(V_lv) - min(V_lv) over the recorded samples.
    pub fn stroke_volume(&self) -> f64 {
        let v = self.v_lv();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for k in 0..self.t.len() {
            let mut row = vec![self.t[k]];
            row.extend(self.volumes[k].to_array());
            row.extend(self.pressures[k].to_array());
            row.extend(self.flows[k].to_array());
            let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Physiological starting point; the venous volume closes the total.
pub fn initial_state(c: &ModelConstants) -> StateVolumes {
    let lv = 125.0;
    let ao = c.v_ao_r + 30.0;
    let art = c.v_art_r + 150.0;
    let la = c.v_la_r + 45.0;
    StateVolumes {
        lv,
        ao,
        art,
        vc: c.v_total - lv - ao - art - la,
        la,
    }
}

/// One explicit Euler step of size `dt` from time `t`.
pub fn step(
    t: f64,
    v: &StateVolumes,
    p: &InputParameters,
    c: &ModelConstants,
    law: ValveLaw,
    dt: f64,
) -> Result<StateVolumes> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let d = ode_rhs(t, v, p, c, law);
    let next = advance(v, &d, dt);
    if !next.is_finite() {
        return Err(Error::IntegrationDiverged { cycle: 0, t });
    }
    Ok(next)
}

#[inline]
fn advance(v: &StateVolumes, d: &[f64; 5], dt: f64) -> StateVolumes {
    StateVolumes {
        lv: v.lv + dt * d[0],
        ao: v.ao + dt * d[1],
        art: v.art + dt * d[2],
        vc: v.vc + dt * d[3],
        la: v.la + dt * d[4],
    }
}

/// Final cycle on the integration grid.
struct FineCycle {
    states: Vec<StateVolumes>,
    dt: f64,
    cycles_run: usize,
    converged: bool,
    residual: f64,
    aortic: f64,
    mitral: f64,
}

impl FineCycle {
    fn at(&self, t: f64, t_c: f64) -> StateVolumes {
        interpolate_states(&self.states, wrap_time(t, t_c) / self.dt)
    }
}

/// Integrates whole cycles from [`initial_state`] until the cycle-to-cycle
/// drift falls under `cfg.cycle_tol`, then records one more cycle.
pub fn solve_steady(
    p: &InputParameters,
    c: &ModelConstants,
    cfg: &SolverConfig,
) -> Result<CycleSolution> {
    let fine = integrate(p, c, cfg)?;
    let mut t_out = Vec::with_capacity(cfg.n_out);
    let mut vols = Vec::with_capacity(cfg.n_out);
    let mut prs = Vec::with_capacity(cfg.n_out);
    let mut qs = Vec::with_capacity(cfg.n_out);
    for j in 0..cfg.n_out {
        let t = j as f64 * c.t_c / cfg.n_out as f64;
        let s = fine.at(t, c.t_c);
        let pr = pressures(t, &s, p, c);
        t_out.push(t);
        vols.push(s);
        qs.push(flow_rates(&pr, p, cfg.law));
        prs.push(pr);
    }

    Ok(CycleSolution {
        t: t_out,
        volumes: vols,
        pressures: prs,
        flows: qs,
        cycles_run: fine.cycles_run,
        converged: fine.converged,
        cyclic_residual: fine.residual,
        aortic_throughput: fine.aortic,
        mitral_throughput: fine.mitral,
        end_state: *fine.states.last().expect("nonempty cycle"),
    })
}

/// Steady-state volumes at arbitrary times (wrapped into the cycle),
/// linearly interpolated from the integration grid.
pub fn sample_steady(
    p: &InputParameters,
    c: &ModelConstants,
    cfg: &SolverConfig,
    times: &[f64],
) -> Result<Vec<StateVolumes>> {
    let fine = integrate(p, c, cfg)?;
    Ok(times.iter().map(|&t| fine.at(t, c.t_c)).collect())
}

fn integrate(p: &InputParameters, c: &ModelConstants, cfg: &SolverConfig) -> Result<FineCycle> {
    cfg.validate(c)?;
    p.validate(c)?;
    let n = cfg.steps_per_cycle(c.t_c);
    let dt = c.t_c / n as f64;

    // Activation only depends on time, so tabulate it once per solve.
    let lv_timing = c.lv_timing(p.t_tr);
    let la_timing = c.la_timing();
    let (e_lv, e_la): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            (
                activation(t, &lv_timing),
                activation(atrial_time(t, c.t_c), &la_timing),
            )
        })
        .unzip();

    let rhs = |v: &StateVolumes, k: usize| -> ([f64; 5], FlowRates) {
        let pr = pressures_at(v, e_lv[k], e_la[k], p, c);
        let q = flow_rates(&pr, p, cfg.law);
        (net_inflow(&q), q)
    };

    let mut v = initial_state(c);
    let mut converged = false;
    let mut cycles_run = 0;
    let mut residual = f64::INFINITY;
    for cycle in 0..cfg.max_cycles {
        let start = v;
        for k in 0..n {
            let (d, _) = rhs(&v, k);
            v = advance(&v, &d, dt);
        }
        cycles_run = cycle + 1;
        if !v.is_finite() {
            return Err(Error::IntegrationDiverged {
                cycle,
                t: cycles_run as f64 * c.t_c,
            });
        }
        residual = start
            .to_array()
            .iter()
            .zip(v.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / c.v_total;
        if residual < cfg.cycle_tol {
            converged = true;
            break;
        }
    }

    // Record the final cycle on the fine grid.
    let mut states = Vec::with_capacity(n + 1);
    let mut aortic = 0.0;
    let mut mitral = 0.0;
    states.push(v);
    for k in 0..n {
        let (d, q) = rhs(&v, k);
        aortic += q.av * dt;
        mitral += q.mv * dt;
        v = advance(&v, &d, dt);
        states.push(v);
    }
    cycles_run += 1;
    if !v.is_finite() {
        return Err(Error::IntegrationDiverged {
            cycle: cycles_run - 1,
            t: cycles_run as f64 * c.t_c,
        });
    }

    Ok(FineCycle {
        states,
        dt,
        cycles_run,
        converged,
        residual,
        aortic,
        mitral,
    })
}

fn interpolate_states(states: &[StateVolumes], pos: f64) -> StateVolumes {
    let last = states.len() - 1;
    let k0 = (pos.floor() as usize).min(last);
    let frac = pos - k0 as f64;
    if k0 == last || frac <= 1e-9 {
        return states[k0];
    }
    if frac >= 1.0 - 1e-9 {
        return states[k0 + 1];
    }
    let a = states[k0].to_array();
    let b = states[k0 + 1].to_array();
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = a[i] + frac * (b[i] - a[i]);
    }
    StateVolumes::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn initial_state_closes_total() {
        let c = ModelConstants::default();
        let v = initial_state(&c);
        assert_eq!(v.total(), 5200.0);
        assert_eq!(v.vc, 3840.0);
        assert!(v.to_array().iter().all(|x| *x > 0.0));
        let small = ModelConstants {
            v_total: 4000.0,
            ..c
        };
        assert!(initial_state(&small).to_array().iter().all(|x| *x > 0.0));
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v0 = initial_state(&c);
        let v1 = step(0.0, &v0, &p, &c, ValveLaw::Hard, 0.05).unwrap();
        let expected = [
            125.0,
            129.989_583_333_333_33,
            1050.008_541_197_799_4,
            3840.030_161_682_866,
            54.971_713_786_000_92,
        ];
        for (a, b) in v1.to_array().iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-10);
        }
        assert!((v1.total() - v0.total()).abs() <= 5.0 * f64::EPSILON * 5200.0);
    }

    #[test]
    fn step_at_fixed_point_is_identity() {
        // Equal pressures everywhere and closed valves: no flow.
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v = StateVolumes {
            lv: c.v_lv_r,
            ao: c.v_ao_r,
            art: c.v_art_r,
            vc: c.v_vc_r,
            la: c.v_la_r,
        };
        assert_eq!(step(0.0, &v, &p, &c, ValveLaw::Hard, 0.05).unwrap(), v);
    }

    #[test]
    fn step_rejects_bad_dt_and_reports_divergence() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let v = initial_state(&c);
        assert!(step(0.0, &v, &p, &c, ValveLaw::Hard, 0.0).is_err());
        let blown = StateVolumes { lv: f64::NAN, ..v };
        assert!(matches!(
            step(0.0, &blown, &p, &c, ValveLaw::Hard, 0.05),
            Err(Error::IntegrationDiverged { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let c = ModelConstants::default();
        assert!(SolverConfig::default().validate(&c).is_ok());
        for bad in [
            SolverConfig {
                dt: 0.0,
                ..Default::default()
            },
            SolverConfig {
                n_out: 1,
                ..Default::default()
            },
            SolverConfig {
                cycle_tol: 0.0,
                ..Default::default()
            },
            SolverConfig {
                max_cycles: 0,
                ..Default::default()
            },
            SolverConfig {
                law: ValveLaw::Smooth { alpha: -1.0 },
                ..Default::default()
            },
        ] {
            assert!(bad.validate(&c).is_err());
        }
        assert_eq!(SolverConfig::default().steps_per_cycle(800.0), 16000);
        assert_eq!(
            SolverConfig {
                dt: 0.33,
                ..Default::default()
            }
            .steps_per_cycle(800.0),
            2424
        );
    }

    #[test]
    fn unstable_step_is_reported_with_cycle() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let cfg = SolverConfig {
            dt: 40.0,
            ..Default::default()
        };
        match solve_steady(&p, &c, &cfg) {
            Err(Error::IntegrationDiverged { cycle, .. }) => assert!(cycle < cfg.max_cycles),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn baseline_solution_is_periodic_and_conservative() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let sol = solve_steady(&p, &c, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.cyclic_residual < 1e-6);
        assert_eq!(sol.t.len(), 400);
        assert_eq!(sol.t[0], 0.0);
        for v in &sol.volumes {
            assert!((v.total() - c.v_total).abs() < 1e-9 * c.v_total);
        }
        // Equal valve throughput over a periodic cycle.
        let rel = (sol.aortic_throughput - sol.mitral_throughput).abs() / sol.aortic_throughput;
        assert!(rel < 0.005, "throughput mismatch {rel}");
        // Stroke volume from the sampled waveform agrees with the ejected volume.
        let sv = sol.stroke_volume();
        assert!(
            (sv - sol.aortic_throughput).abs() / sol.aortic_throughput < 0.01,
            "SV {sv} vs ejected {}",
            sol.aortic_throughput
        );
        let first = sol.volumes[0].to_array();
        let end = sol.end_state.to_array();
        for i in 0..5 {
            assert!((first[i] - end[i]).abs() / c.v_total < 1e-6);
        }
    }

    #[test]
    fn csv_has_documented_header() {
        let c = ModelConstants::default();
        let p = InputParameters::baseline();
        let cfg = SolverConfig {
            dt: 0.1,
            cycle_tol: 1e-4,
            n_out: 8,
            ..Default::default()
        };
        let sol = solve_steady(&p, &c, &cfg).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.split(',').count() == 16));
    }
}
