//! Model backends: anything that maps multipliers to volume waveforms.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{
    activations, ChamberLaw, InputParameters, ModelConstants, Multipliers, StateVolumes,
};
use crate::sampling::ParameterSpace;
use crate::solver::{sample_steady, SolverConfig};
use crate::surrogate::SurrogateModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Numerical,
    Surrogate,
}

/// Periodic volume predictions for a parameter space.
pub trait Backend: Sync {
    fn kind(&self) -> BackendKind;
    fn space(&self) -> &ParameterSpace;
    fn constants(&self) -> &ModelConstants;
    /// Volumes at `times` (ms, wrapped into the cycle).
    fn volumes(&self, m: &Multipliers, times: &[f64]) -> Result<Vec<StateVolumes>>;

    /// LV volume and pressure at `times`, pressure from the elastance law.
    fn lv_waveforms(&self, m: &Multipliers, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.space().apply_multipliers(m)?;
        let vols = self.volumes(m, times)?;
        let v: Vec<f64> = vols.iter().map(|s| s.lv).collect();
        let pr = lv_pressures(&v, times, &p, self.constants());
        Ok((v, pr))
    }
}

/// LV pressure for volumes sampled at `times`.
pub fn lv_pressures(
    v_lv: &[f64],
    times: &[f64],
    p: &InputParameters,
    c: &ModelConstants,
) -> Vec<f64> {
    let law = ChamberLaw::lv(p, c);
    v_lv.iter()
        .zip(times)
        .map(|(&v, &t)| law.pressure_at(v, activations(t, p, c).0))
        .collect()
}

/// The forward-Euler solver run to steady state for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalBackend {
    pub space: ParameterSpace,
    pub constants: ModelConstants,
    pub solver: SolverConfig,
}

impl Backend for NumericalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Numerical
    }

    fn space(&self) -> &ParameterSpace {
        &self.space
    }

    fn constants(&self) -> &ModelConstants {
        &self.constants
    }

    fn volumes(&self, m: &Multipliers, times: &[f64]) -> Result<Vec<StateVolumes>> {
        let p = self.space.apply_multipliers(m)?;
        sample_steady(&p, &self.constants, &self.solver, times)
    }
}

impl Backend for SurrogateModel {
    fn kind(&self) -> BackendKind {
        BackendKind::Surrogate
    }

    fn space(&self) -> &ParameterSpace {
        &self.space
    }

    fn constants(&self) -> &ModelConstants {
        &self.constants
    }

    fn volumes(&self, m: &Multipliers, times: &[f64]) -> Result<Vec<StateVolumes>> {
        self.predict(m, times)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pressures;
    use crate::solver::solve_steady;

    #[test]
    fn numerical_backend_matches_solver_grid() {
        let b = NumericalBackend {
            space: ParameterSpace::default(),
            constants: ModelConstants::default(),
            solver: SolverConfig::loosened(),
        };
        let m = Multipliers::ones();
        let sol = solve_steady(&InputParameters::baseline(), &b.constants, &b.solver).unwrap();
        let (v, p) = b.lv_waveforms(&m, &sol.t).unwrap();
        for k in 0..sol.t.len() {
            assert_eq!(v[k], sol.volumes[k].lv);
            let want = pressures(
                sol.t[k],
                &sol.volumes[k],
                &InputParameters::baseline(),
                &b.constants,
            )
            .lv;
            assert!((p[k] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
        // Times one cycle later give the same samples.
        let shifted: Vec<f64> = sol.t.iter().map(|t| t + 800.0).collect();
        let v2 = b.volumes(&m, &shifted).unwrap();
        for k in 0..sol.t.len() {
            assert!((v2[k].lv - v[k]).abs() < 1e-9);
        }
    }
}
