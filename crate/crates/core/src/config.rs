//! Experiment configuration: a versioned TOML schema with dotted-path overrides and a canonical
//! content hash recorded in every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{CutoffProfile, OddMap};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub n: usize,
    pub h: f64,
}

/// Multipliers of the base density for the two components of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Amplitudes {
    pub s00: f64,
    pub s11: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaConfig {
    RadialBump { radius: f64, power: u32, amplitude: f64 },
    BalancedBump { radius: f64, inner: f64, power: u32, amplitude: f64 },
}

fn default_profile() -> CutoffProfile {
    CutoffProfile::Smoothstep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureConfig {
    /// Compactly supported example densities scaled per phase and component.
    Example {
        r0: f64,
        n_exp: u32,
        a: f64,
        #[serde(default = "default_profile")]
        profile: CutoffProfile,
        minus: Amplitudes,
        plus: Amplitudes,
    },
    /// θ-smoothed Gibbs measures at two temperatures.
    GibbsSmoothed {
        t_minus: f64,
        t_plus: f64,
        a: f64,
        #[serde(default = "default_profile")]
        profile: CutoffProfile,
        theta: ThetaConfig,
    },
    /// Example measure pushed forward pointwise by odd maps before splicing.
    NonGaussian {
        r0: f64,
        n_exp: u32,
        a: f64,
        #[serde(default = "default_profile")]
        profile: CutoffProfile,
        minus: Amplitudes,
        plus: Amplitudes,
        f0: OddMap,
        f1: OddMap,
    },
}

impl MeasureConfig {
    pub fn half_width(&self) -> f64 {
        match *self {
            MeasureConfig::Example { a, .. } | MeasureConfig::GibbsSmoothed { a, .. } | MeasureConfig::NonGaussian { a, .. } => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub times: Vec<f64>,
    pub samples: u64,
    #[serde(with = "seed_repr")]
    pub seed: u64,
}

/// TOML integers are signed 64-bit, so seeds above `i64::MAX` are stored as decimal strings.
mod seed_repr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(|_| de::Error::custom(format!("seed '{t}' is not a u64"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub x: [i64; 3],
    pub y: [i64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub power: u32,
    pub a0: f64,
    pub a1: f64,
    /// Rescale both amplitudes so that `Q∞(Ψ, Ψ)` equals this value.
    #[serde(default)]
    pub normalize_qinf: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    pub center: [f64; 3],
    pub radius: f64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesConfig {
    #[serde(default = "yes")]
    pub transverse_average: bool,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
    #[serde(default)]
    pub functionals: Vec<FunctionalConfig>,
    #[serde(default)]
    pub current_points: Vec<[i64; 3]>,
    #[serde(default)]
    pub energy_balls: Vec<BallConfig>,
}

impl Default for ProbesConfig {
    fn default() -> Self {
        Self {
            transverse_average: true,
            pairs: Vec::new(),
            functionals: Vec::new(),
            current_points: Vec::new(),
            energy_balls: Vec::new(),
        }
    }
}

fn three() -> f64 {
    3.0
}
fn five() -> f64 {
    5.0
}

/// Approach of `Q̂^{ij}_t` at a pair probe to the limit correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumCheck {
    pub pair: usize,
    pub component: [usize; 2],
    #[serde(default = "three")]
    pub sigma: f64,
    pub systematic: f64,
}

/// Mean current at the final time against `∇q¹⁰∞(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentCheck {
    pub point: usize,
    #[serde(default = "three")]
    pub sigma: f64,
    pub rel_tol: f64,
    #[serde(default = "five")]
    pub min_z: f64,
    /// Temperatures `[T₋, T₊]` used for the prediction instead of the measure's own.
    #[serde(default)]
    pub prediction_temperatures: Option<[f64; 2]>,
}

/// Currents and cross-correlation probes statistically zero at the final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqualTemperatureCheck {
    #[serde(default = "three")]
    pub sigma: f64,
}

/// Characteristic functionals and moments of `⟨Y(t), Ψ⟩` at the final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianityCheck {
    #[serde(default = "five")]
    pub char_radius: f64,
    #[serde(default = "five")]
    pub moment_sigma: f64,
    #[serde(default = "five")]
    pub initial_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalEnergyCheck {
    pub ball: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default)]
    pub equilibrium: Option<EquilibriumCheck>,
    #[serde(default)]
    pub current: Option<CurrentCheck>,
    #[serde(default)]
    pub equal_temperature: Option<EqualTemperatureCheck>,
    #[serde(default)]
    pub gaussianity: Option<GaussianityCheck>,
    #[serde(default)]
    pub local_energy: Option<LocalEnergyCheck>,
}

fn default_resolution() -> f64 {
    0.6
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_truncation() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticChecks {
    #[serde(default)]
    pub decomposition_tol: Option<f64>,
    #[serde(default)]
    pub width_ratio_factor: Option<f64>,
    #[serde(default)]
    pub fourth_moment_factor: Option<f64>,
    #[serde(default)]
    pub lindeberg_sigma: Option<f64>,
    #[serde(default)]
    pub radon_tol: Option<f64>,
    #[serde(default)]
    pub laplacian_identity_tol: Option<f64>,
    #[serde(default)]
    pub max_growth: Option<f64>,
    #[serde(default)]
    pub spherical_exact_tol: Option<f64>,
    #[serde(default)]
    pub spherical_smooth_tol: Option<f64>,
    #[serde(default)]
    pub spherical_cutoff_tol: Option<f64>,
}

/// Fixed analytic setup for the plane-integral and spherical identity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityConfig {
    pub n: usize,
    pub h: f64,
    pub bump_radius: f64,
    pub sphere_order: usize,
    pub hemisphere_order: usize,
    pub plane_points: usize,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { n: 64, h: 0.5, bump_radius: 3.0, sphere_order: 29, hemisphere_order: 32, plane_points: 128 }
    }
}

/// Room–corridor and identity diagnostics; the homogeneous measure is the `plus` phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub delta: f64,
    pub times: Vec<f64>,
    /// Room counts per time; the default schedule is used when absent.
    #[serde(default)]
    pub rooms: Option<Vec<usize>>,
    pub samples: usize,
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub test_function: FunctionalConfig,
    pub checks: DiagnosticChecks,
    #[serde(default)]
    pub identities: IdentityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub lattice: LatticeConfig,
    pub measure: MeasureConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub probes: ProbesConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
}

/// Sets `path` (dot separated) in a TOML table; `raw` is parsed as a TOML value and falls back
/// to a plain string.
pub fn apply_override(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path '{path}'")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses non-table key '{k}'")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    /// Structural checks; wrap safety against the lattice is checked when the run is built.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.schedule.times.is_empty() {
            return Err(Error::Config("schedule.times is empty".into()));
        }
        if self.schedule.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("schedule.times must be strictly increasing".into()));
        }
        let half = self.lattice.n as f64 * self.lattice.h / 2.0;
        let t_max = self.schedule.times.last().copied().unwrap_or(0.0);
        if t_max + self.measure.half_width() >= half {
            return Err(Error::WrapSafety(format!(
                "t_max {t_max} + a {} ≥ L/2 = {half}",
                self.measure.half_width()
            )));
        }
        let c = &self.checks;
        if let Some(e) = &c.equilibrium {
            if e.pair >= self.probes.pairs.len() || e.component.iter().any(|&i| i > 1) {
                return Err(Error::Config("checks.equilibrium refers to a missing pair or component".into()));
            }
        }
        if let Some(e) = &c.current {
            if e.point >= self.probes.current_points.len() {
                return Err(Error::Config("checks.current refers to a missing current point".into()));
            }
            if e.prediction_temperatures.is_some() && !matches!(self.measure, MeasureConfig::GibbsSmoothed { .. }) {
                return Err(Error::Config("prediction_temperatures needs a gibbs_smoothed measure".into()));
            }
        }
        if let Some(e) = &c.local_energy {
            if e.ball >= self.probes.energy_balls.len() {
                return Err(Error::Config("checks.local_energy refers to a missing ball".into()));
            }
        }
        if c.gaussianity.is_some() && self.probes.functionals.is_empty() {
            return Err(Error::Config("checks.gaussianity needs functionals".into()));
        }
        if let Some(d) = &self.diagnostics {
            if let Some(r) = &d.rooms {
                if r.len() != d.times.len() {
                    return Err(Error::Config("diagnostics.rooms must match diagnostics.times".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form of the validated configuration.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let text = serde_json::to_string(&value).expect("json");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
schema_version = 1
[lattice]
n = 16
h = 1.0
[measure]
kind = "example"
r0 = 2.0
n_exp = 1
a = 2.0
minus = { s00 = 1.0, s11 = 1.0 }
plus = { s00 = 2.0, s11 = 2.0 }
[schedule]
times = [0.0, 2.0]
samples = 10
seed = 7
"#;

    #[test]
    fn parses_and_overrides() {
        let c = ExperimentConfig::from_toml_str(MIN, &[]).unwrap();
        assert_eq!(c.lattice.n, 16);
        assert!(c.probes.transverse_average);
        let o = ExperimentConfig::from_toml_str(
            MIN,
            &["schedule.seed=9".into(), "measure.profile=power_preserving".into(), "name=run a".into()],
        )
        .unwrap();
        assert_eq!(o.schedule.seed, 9);
        assert_eq!(o.name, "run a");
        assert!(matches!(o.measure, MeasureConfig::Example { profile: CutoffProfile::PowerPreserving, .. }));
        assert_ne!(c.hash(), o.hash());
        assert_eq!(c.hash(), ExperimentConfig::from_toml_str(MIN, &[]).unwrap().hash());
        let round = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap(), &[]).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str(MIN, &["schema_version=2".into()]).is_err());
        assert!(matches!(
            ExperimentConfig::from_toml_str(MIN, &["schedule.times=[0.0, 7.0]".into()]),
            Err(Error::WrapSafety(_))
        ));
        assert!(ExperimentConfig::from_toml_str(MIN, &["lattice.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(MIN, &["noequals".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(MIN, &["checks.current.point=0".into(), "checks.current.rel_tol=0.1".into()]).is_err());
    }
}
