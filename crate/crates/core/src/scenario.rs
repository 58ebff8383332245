//! TOML scenario files.
//!
//! ```toml
//! [system]
//! a = [[1.0, 1.0], [0.0, 1.0]]
//! b = [[1.0, 0.0], [0.0, 1.0]]
//! noise_covariance = [[0.0, 0.0], [0.0, 1.0]]
//! noise_scale = 2.0
//! cost_row = [1.0, 0.0]
//! x_aim = [0.0, 0.0]
//! delta_g = 12.5
//!
//! [link]
//! mode = "bernoulli"   # or "fixed_age" with `age`, "periodic" with `period`
//! p = 0.8
//!
//! [simulation]
//! horizon = 1000
//! episodes = 100
//! base_seed = 7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aoi_link::LinkModel;
use crate::control_loop::{SystemModel, DEFAULT_HISTORY_DEPTH};
use crate::error::{Error, Result};
use crate::montecarlo::Scenario;
use crate::outage_model::{InflectionAxis, VarianceConvention};
use crate::report::OutputFormat;
use crate::statespace::{RealMatrix, DEFAULT_DIAG_TOLERANCE};

/// Built-in scenario matching the truck-platoon setup table.
pub const TABLE1_PLATOON: &str = include_str!("../scenarios/table1_platoon.toml");

pub const PRESETS: &[(&str, &str)] = &[("table1_platoon", TABLE1_PLATOON)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Noise covariance shape, multiplied by `noise_scale²`.
    pub noise_covariance: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub noise_scale: f64,
    pub cost_row: Vec<f64>,
    pub x_aim: Vec<f64>,
    pub delta_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Initial state; `x_aim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub horizon: u64,
    /// Defaults to ten times the largest analysed age.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<u64>,
    pub episodes: u64,
    pub base_seed: u64,
    #[serde(default = "one_u64")]
    pub sample_stride: u64,
    #[serde(default = "default_depth")]
    pub history_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub convention: VarianceConvention,
    #[serde(default)]
    pub axis: InflectionAxis,
    #[serde(default = "default_ages")]
    pub ages: Vec<u32>,
    #[serde(default)]
    pub noise_grid: Vec<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_diag_tol")]
    pub diag_tolerance: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            convention: VarianceConvention::default(),
            axis: InflectionAxis::default(),
            ages: default_ages(),
            noise_grid: Vec::new(),
            confidence: default_confidence(),
            diag_tolerance: default_diag_tol(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<OutputFormat>,
}

impl OutputSection {
    fn is_empty(&self) -> bool {
        self.path.is_none() && self.format.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub system: SystemSection,
    pub link: LinkModel,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default, skip_serializing_if = "OutputSection::is_empty")]
    pub output: OutputSection,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

fn default_depth() -> usize {
    DEFAULT_HISTORY_DEPTH
}

fn default_ages() -> Vec<u32> {
    vec![1, 2, 3, 4]
}

fn default_confidence() -> f64 {
    0.99
}

fn default_diag_tol() -> f64 {
    DEFAULT_DIAG_TOLERANCE
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<RealMatrix> {
    RealMatrix::from_rows(rows).map_err(|e| Error::scenario(field, e.to_string()))
}

fn finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::scenario(format!("{field}[{i}]"), "value must be finite")),
        None => Ok(()),
    }
}

impl ScenarioFile {
    /// Parses TOML text. Syntax and type errors carry the line, column and key.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text))
            .unwrap_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(Error::Usage(format!(
                    "unknown preset `{name}` (available: {})",
                    names.join(", ")
                )))
            })
    }

    /// Field-level checks that do not need the linear algebra.
    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        for (field, m) in [
            ("system.a", &s.a),
            ("system.b", &s.b),
            ("system.noise_covariance", &s.noise_covariance),
        ] {
            matrix(field, m)?;
        }
        finite("system.cost_row", &s.cost_row)?;
        finite("system.x_aim", &s.x_aim)?;
        if !(s.delta_g > 0.0 && s.delta_g.is_finite()) {
            return Err(Error::scenario("system.delta_g", "must be positive and finite"));
        }
        if !(s.noise_scale >= 0.0 && s.noise_scale.is_finite()) {
            return Err(Error::scenario("system.noise_scale", "must be nonnegative and finite"));
        }
        self.link
            .validate()
            .map_err(|e| Error::scenario("link", e.to_string()))?;
        if let Some(x0) = &self.simulation.x0 {
            finite("simulation.x0", x0)?;
        }
        let a = &self.analysis;
        if let Some(i) = a.ages.iter().position(|&k| k == 0) {
            return Err(Error::scenario(format!("analysis.ages[{i}]"), "ages start at 1"));
        }
        if let Some(i) = a.noise_grid.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::scenario(
                format!("analysis.noise_grid[{i}]"),
                "must be nonnegative and finite",
            ));
        }
        if !(a.confidence > 0.0 && a.confidence < 1.0) {
            return Err(Error::scenario("analysis.confidence", "must lie in (0, 1)"));
        }
        if !(a.diag_tolerance > 0.0 && a.diag_tolerance < 1.0) {
            return Err(Error::scenario("analysis.diag_tolerance", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SystemModel> {
        let s = &self.system;
        SystemModel::new(
            matrix("system.a", &s.a)?,
            matrix("system.b", &s.b)?,
            matrix("system.noise_covariance", &s.noise_covariance)?,
            RealMatrix::row_vector(&s.cost_row).map_err(|e| Error::scenario("system.cost_row", e.to_string()))?,
            s.x_aim.clone(),
            s.delta_g,
        )
    }

    /// Largest age the scenario analyses or its link produces.
    pub fn max_age(&self) -> u32 {
        let analysed = self.analysis.ages.iter().copied().max().unwrap_or(1);
        analysed.max(self.link.max_age().unwrap_or(1))
    }

    pub fn warmup(&self) -> u64 {
        self.simulation.warmup.unwrap_or(10 * self.max_age() as u64)
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let model = self.model()?;
        let sim = &self.simulation;
        let scenario = Scenario {
            x0: sim.x0.clone().unwrap_or_else(|| model.x_aim().to_vec()),
            model,
            noise_scale: self.system.noise_scale,
            link: self.link,
            horizon: sim.horizon,
            episodes: sim.episodes,
            warmup: self.warmup(),
            sample_stride: sim.sample_stride,
            base_seed: sim.base_seed,
            convention: self.analysis.convention,
            history_depth: sim.history_depth,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical TOML form; parsing it yields an identical file.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize scenario: {e}")))
    }

    /// SHA-256 of the canonical form, in hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preset_parses() {
        let file = ScenarioFile::preset("table1_platoon").unwrap();
        assert_eq!(file.system.cost_row, vec![1.0, 0.0, 0.0]);
        assert_eq!(file.system.delta_g, 12.5);
        assert_eq!(file.link, LinkModel::FixedAge { age: 1 });
        let sc = file.to_scenario().unwrap();
        assert_eq!(sc.x0, vec![-90.0, 0.0, 25.0]);
        assert_eq!(sc.warmup, 40);
        assert_eq!(sc.counted_per_episode() * sc.episodes, 1_000_000);
        assert!(ScenarioFile::preset("nope").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ScenarioFile::preset("table1_platoon").unwrap();
        let h = a.hash().unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, a.clone().hash().unwrap());
        let mut b = a.clone();
        b.simulation.base_seed += 1;
        assert_ne!(h, b.hash().unwrap());
    }

    #[test]
    fn errors_name_the_field() {
        let base = TABLE1_PLATOON;
        let ragged = base.replace("a = [[1.0, 1.0, 0.0],", "a = [[1.0, 1.0],");
        match ScenarioFile::parse(&ragged) {
            Err(Error::InvalidScenario { field, .. }) => assert_eq!(field, "system.a"),
            other => panic!("unexpected {other:?}"),
        }
        let typo = base.replace("delta_g = 12.5", "delta_gg = 12.5");
        let msg = ScenarioFile::parse(&typo).unwrap_err().to_string();
        assert!(msg.contains("delta_gg") && msg.contains("line"), "{msg}");
        let bad_type = base.replace("horizon = 540", "horizon = \"long\"");
        let msg = ScenarioFile::parse(&bad_type).unwrap_err().to_string();
        assert!(msg.contains("horizon"), "{msg}");
        let bad_link = base.replace("age = 1", "age = 0");
        assert!(matches!(
            ScenarioFile::parse(&bad_link),
            Err(Error::InvalidScenario { field, .. }) if field == "link"
        ));
        let neg = base.replace("delta_g = 12.5", "delta_g = -1.0");
        assert!(matches!(
            ScenarioFile::parse(&neg),
            Err(Error::InvalidScenario { field, .. }) if field == "system.delta_g"
        ));
    }

    #[test]
    fn non_psd_noise_is_numerical() {
        let text = TABLE1_PLATOON.replace(
            "noise_covariance = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]",
            "noise_covariance = [[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.0]]",
        );
        let err = ScenarioFile::parse(&text).unwrap().to_scenario().unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn defaults_fill_in() {
        let text = "
[system]
a = [[1.0]]
b = [[1.0]]
noise_covariance = [[1.0]]
cost_row = [1.0]
x_aim = [3.0]
delta_g = 2.0

[link]
mode = \"bernoulli\"
p = 0.5

[simulation]
horizon = 100
episodes = 2
base_seed = 9
";
        let file = ScenarioFile::parse(text).unwrap();
        assert_eq!(file.system.noise_scale, 1.0);
        assert_eq!(file.analysis.ages, vec![1, 2, 3, 4]);
        assert_eq!(file.warmup(), 40);
        let sc = file.to_scenario().unwrap();
        assert_eq!(sc.x0, vec![3.0]);
        assert_eq!(sc.sample_stride, 1);
        assert_eq!(sc.history_depth, DEFAULT_HISTORY_DEPTH);
        assert_eq!(sc.convention, VarianceConvention::Accumulation);
    }

    fn arb_matrix(r: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1e3..1e3f64, c), r)
    }

    fn arb_file() -> impl Strategy<Value = ScenarioFile> {
        (1usize..=4, 1usize..=3).prop_flat_map(|(n, m)| {
            let link = prop_oneof![
                (0.01..=1.0f64).prop_map(|p| LinkModel::Bernoulli { p }),
                (1u32..20).prop_map(|age| LinkModel::FixedAge { age }),
                (1u32..20).prop_map(|period| LinkModel::Periodic { period }),
            ];
            (
                (arb_matrix(n, n), arb_matrix(n, m), prop::collection::vec(0.0..5.0f64, n)),
                (prop::collection::vec(-10.0..10.0f64, n), prop::collection::vec(-100.0..100.0f64, n)),
                (0.1..100.0f64, 0.0..10.0f64, link),
                (100u64..1000, prop::option::of(0u64..50), 1u64..100, any::<u32>(), 1u64..5),
                (
                    prop::bool::ANY,
                    prop::collection::vec(1u32..10, 1..5),
                    prop::collection::vec(0.0..20.0f64, 0..4),
                    prop::option::of(prop::collection::vec(-100.0..100.0f64, n)),
                ),
            )
                .prop_map(|((a, b, diag), (g, x_aim), (dg, scale, link), (h, w, e, seed, stride), (conv, ages, grid, x0))| {
                    let noise = (0..diag.len())
                        .map(|i| (0..diag.len()).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
                        .collect();
                    ScenarioFile {
                        system: SystemSection {
                            a,
                            b,
                            noise_covariance: noise,
                            noise_scale: scale,
                            cost_row: g,
                            x_aim,
                            delta_g: dg,
                        },
                        link,
                        simulation: SimulationSection {
                            x0,
                            horizon: h,
                            warmup: w,
                            episodes: e,
                            base_seed: seed as u64,
                            sample_stride: stride,
                            history_depth: 64,
                        },
                        analysis: AnalysisSection {
                            convention: if conv {
                                VarianceConvention::PaperShifted
                            } else {
                                VarianceConvention::Accumulation
                            },
                            ages,
                            noise_grid: grid,
                            ..AnalysisSection::default()
                        },
                        output: OutputSection::default(),
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip(file in arb_file()) {
            let text = file.to_toml_string().unwrap();
            let parsed = ScenarioFile::parse(&text).unwrap();
            prop_assert_eq!(&parsed, &file);
            let again = ScenarioFile::parse(&parsed.to_toml_string().unwrap()).unwrap();
            prop_assert_eq!(&again, &parsed);
            prop_assert_eq!(again.hash().unwrap(), file.hash().unwrap());
            match (file.to_scenario(), again.to_scenario()) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
                (a, b) => prop_assert!(false, "diverged: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
    }
}
