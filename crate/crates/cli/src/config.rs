//! Run configuration: one JSON document per invocation.

use std::path::{Path, PathBuf};

use manifold_gap::harness::{
    FamilyKind, FamilyParams, NonlinearityChoice, ProblemSpec, SpectrumSpec, DEFAULT_EPS,
};
use manifold_gap::manifold::SolverConfig;
use manifold_gap::nonlinearity::TanhParams;
use serde::{Deserialize, Serialize};

/// Location of the schema document, quoted in validation errors.
pub const SCHEMA_PATH: &str = "crates/cli/schema/run-config.schema.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub kind: FamilyKind,
    #[serde(default)]
    pub params: FamilyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_spectrum")]
    pub spectrum: SpectrumSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Slow dimension; chosen by the gap scan when absent.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: NonlinearityChoice,
    /// Lipschitz constant for the gap scan; defaults to the certified `L_F`.
    #[serde(default)]
    pub l_f: Option<f64>,
    #[serde(default = "default_family")]
    pub family: FamilyConfig,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_spectrum() -> SpectrumSpec {
    ProblemSpec::default_sweep().spectrum
}

fn default_alpha() -> f64 {
    0.5
}

fn default_nonlinearity() -> NonlinearityChoice {
    NonlinearityChoice::Tanh(TanhParams {
        amp: 0.01,
        decay: 0.5,
        weight: 1.0,
        radius: 4.0,
    })
}

fn default_family() -> FamilyConfig {
    FamilyConfig {
        kind: FamilyKind::EigenShift,
        params: FamilyParams::default(),
    }
}

fn default_eps() -> Vec<f64> {
    DEFAULT_EPS.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config takes all defaults")
    }
}

/// A config problem with the JSON path it occurred at.
#[derive(Debug, thiserror::Error)]
#[error("config error at `{path}`: {message} (schema: {SCHEMA_PATH})")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn at(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = match e.path().to_string() {
                p if p == "?" => ".".to_string(),
                p => p,
            };
            at(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| at(".", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Range checks that the type system does not express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(at("alpha", format!("{} is outside [0, 1)", self.alpha)));
        }
        match &self.spectrum {
            SpectrumSpec::Quadratic { n } | SpectrumSpec::LinearGapped { n, .. } if *n < 2 => {
                return Err(at("spectrum.n", "need at least two modes"));
            }
            SpectrumSpec::LinearGapped { gap, .. } if !(*gap > 0.0) => {
                return Err(at("spectrum.gap", "must be positive"));
            }
            SpectrumSpec::Explicit { eigenvalues } => {
                if eigenvalues.len() < 2 {
                    return Err(at("spectrum.eigenvalues", "need at least two modes"));
                }
                for (i, w) in eigenvalues.windows(2).enumerate() {
                    if !(w[1] >= w[0]) {
                        return Err(at(&format!("spectrum.eigenvalues[{}]", i + 1), "must be nondecreasing"));
                    }
                }
                if !(eigenvalues[0] >= 1.0) {
                    return Err(at("spectrum.eigenvalues[0]", "smallest eigenvalue must be >= 1"));
                }
            }
            _ => {}
        }
        if self.m == Some(0) {
            return Err(at("m", "must be at least 1"));
        }
        if let Some(l) = self.l_f {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(at("l_f", "must be finite and >= 0"));
            }
        }
        if self.eps.is_empty() {
            return Err(at("eps", "must not be empty"));
        }
        for (i, e) in self.eps.iter().enumerate() {
            if !(*e >= 0.0 && e.is_finite()) {
                return Err(at(&format!("eps[{i}]"), "must be finite and >= 0"));
            }
        }
        self.solver
            .validate()
            .map_err(|e| at("solver", e.to_string()))?;
        Ok(())
    }

    pub fn problem_spec(&self, m: usize) -> ProblemSpec {
        ProblemSpec {
            spectrum: self.spectrum.clone(),
            alpha: self.alpha,
            m,
            nonlinearity: self.nonlinearity.clone(),
        }
    }
}
