//! Run configuration: one JSON document with a section per module.

use std::path::{Path, PathBuf};

use hemopinn::inverse::{DeConfig, SyntheticConfig};
use hemopinn::model::{ModelConstants, N_PARAMS, PARAM_NAMES};
use hemopinn::sampling::ParameterSpace;
use hemopinn::seeds;
use hemopinn::sobol::SobolConfig;
use hemopinn::solver::SolverConfig;
use hemopinn::surrogate::Architecture;
use hemopinn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Free dimensions and optional bound overrides of the multiplier space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    /// Names of the free parameters; the rest are held at multiplier 1.
    pub free: Vec<String>,
    pub lower: Option<[f64; N_PARAMS]>,
    pub upper: Option<[f64; N_PARAMS]>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            free: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            lower: None,
            upper: None,
        }
    }
}

impl SpaceConfig {
    pub fn build(&self) -> Result<ParameterSpace, CliError> {
        let mut free = Vec::with_capacity(self.free.len());
        for name in &self.free {
            let d = PARAM_NAMES.iter().position(|p| p == name).ok_or_else(|| {
                CliError::Config(format!("unknown parameter {name:?} in space.free"))
            })?;
            free.push(d);
        }
        let mut space = ParameterSpace::reduced(&free);
        if let Some(l) = self.lower {
            space.lower = l;
        }
        if let Some(u) = self.upper {
            space.upper = u;
        }
        space.validate()?;
        Ok(space)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub depth: usize,
    pub n_harmonics: usize,
    /// LHS points added to the corner design when calibrating the output scaling.
    pub calibration_lhs: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: Architecture::DESK.hidden,
            depth: Architecture::DESK.depth,
            n_harmonics: 6,
            calibration_lhs: 16,
        }
    }
}

impl SurrogateConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            depth: self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_cases: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_cases: 20 }
    }
}

/// Everything a run needs. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; module seeds are derived from it on resolution.
    pub seed: u64,
    pub out: PathBuf,
    pub constants: ModelConstants,
    pub space: SpaceConfig,
    pub solver: SolverConfig,
    pub surrogate: SurrogateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sobol: SobolConfig,
    pub de: DeConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            constants: ModelConstants::default(),
            space: SpaceConfig::default(),
            solver: SolverConfig::default(),
            surrogate: SurrogateConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            sobol: SobolConfig::default(),
            de: DeConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Names accepted by `--config` in place of a path.
pub const PRESETS: [&str; 3] = ["default", "desk", "full"];

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "desk" => Some(Self {
                space: SpaceConfig {
                    free: vec!["E_es".into(), "t_tr".into()],
                    ..SpaceConfig::default()
                },
                ..Self::default()
            }),
            "full" => Some(Self {
                surrogate: SurrogateConfig {
                    hidden: Architecture::FULL.hidden,
                    depth: Architecture::FULL.depth,
                    ..SurrogateConfig::default()
                },
                train: TrainConfig::full(),
                eval: EvalConfig { n_cases: 1000 },
                ..Self::default()
            }),
            _ => None,
        }
    }

    /// Reads a preset name or a JSON file.
    pub fn load(spec: &str) -> Result<Self, CliError> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and derives the module seeds from
    /// the root seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.train.seed = self.seed;
        self.synthetic.seed = self.seed;
        self.de.seed = self.seed;
        self.sobol.seed = seeds::derive_seed(self.seed, seeds::SOBOL);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.constants.validate()?;
        self.space.build()?;
        self.solver.validate(&self.constants)?;
        self.train.validate()?;
        self.sobol.validate()?;
        self.de.validate()?;
        if self.surrogate.hidden == 0
            || self.surrogate.depth == 0
            || self.surrogate.n_harmonics == 0
        {
            return Err(CliError::Config(
                "surrogate sizes must be at least 1".into(),
            ));
        }
        if self.eval.n_cases == 0 {
            return Err(CliError::Config("eval.n_cases must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.json` in the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        let path = self.out.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(hemopinn::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Output {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_round_trip() {
        for name in PRESETS {
            let c = RunConfig::preset(name)
                .unwrap()
                .resolve(Some(7), None)
                .unwrap();
            assert_eq!(c.train.seed, 7);
            let text = serde_json::to_string(&c).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epochs": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"seed": 3, "solver": {"dt": 0.1}, "constants": {"t_c": 800.0}}"#,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.solver.dt, 0.1);
        assert_eq!(c.solver.max_cycles, SolverConfig::default().max_cycles);
        assert_eq!(c.constants, ModelConstants::default());
    }

    #[test]
    fn space_names_are_checked() {
        let s = SpaceConfig {
            free: vec!["E_es".into(), "bogus".into()],
            ..SpaceConfig::default()
        };
        assert!(matches!(s.build(), Err(CliError::Config(_))));
        let s = SpaceConfig {
            free: vec!["E_es".into(), "t_tr".into()],
            ..SpaceConfig::default()
        };
        assert_eq!(s.build().unwrap().free_dims(), vec![8, 9]);
    }
}
