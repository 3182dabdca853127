//! Declarative run configuration in TOML.
//!
//! Every numeric setting has a default, unknown keys are rejected and schema
//! errors name the offending path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coherent::GridSpec;
use crate::ensemble::Numerics;
use crate::error::{Error, Result};
use crate::fock::{ModeId, C64, DEFAULT_DIMENSION_LIMIT};
use crate::model::{volume_family, CapScaling, Dispersion, EnsembleParams, ModelSpec, TruncatedModel};

/// Names of the checks a suite may request.
pub const CHECK_NAMES: [&str; 8] = [
    "sandwich",
    "shift",
    "maxz",
    "peak",
    "collapse",
    "condensate",
    "concentration",
    "multimode",
];

/// One tabulated interaction value `ν(p) = re + i·im`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuEntry {
    pub p: Vec<i32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyEntry {
    pub k: Vec<i32>,
    pub energy: f64,
}

/// `ν(p) = g·exp(−(|p|σ)²)`; the potential used when no table is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub g: f64,
    pub sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { g: 1.0, sigma: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Box side length of a single model.
    pub box_length: Option<f64>,
    /// Side lengths of a volume family.
    pub lengths: Option<Vec<f64>>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Vec<i32>>,
    /// Explicit energies; the quadratic dispersion when omitted.
    pub dispersion: Option<Vec<EnergyEntry>>,
    pub nu: Option<Vec<NuEntry>>,
    pub generator: Option<GeneratorConfig>,
    pub phi: Option<f64>,
}

fn default_dimension() -> usize {
    1
}

fn default_modes() -> Vec<Vec<i32>> {
    vec![vec![-1], vec![0], vec![1]]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            box_length: None,
            lengths: None,
            modes: default_modes(),
            dispersion: None,
            nu: None,
            generator: None,
            phi: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            beta: vec![1.0],
            mu: vec![-0.5],
            lambda: vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    /// Occupation caps in mode order; the first family member's caps.
    pub caps: Vec<u32>,
    pub cap_scaling: CapScaling,
    pub dimension_limit: usize,
    pub grid: GridSpec,
    pub multimode_grid: GridSpec,
    pub zmax_margin: f64,
    pub coarse_points: usize,
    pub search_tolerance: f64,
    pub fd_step: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        let n = Numerics::default();
        Self {
            caps: vec![10, 24, 10],
            cap_scaling: CapScaling::default(),
            dimension_limit: DEFAULT_DIMENSION_LIMIT,
            grid: n.grid,
            multimode_grid: n.multimode_grid,
            zmax_margin: n.zmax_margin,
            coarse_points: n.coarse_points,
            search_tolerance: n.search_tolerance,
            fd_step: n.fd_step,
        }
    }
}

impl NumericsConfig {
    pub fn numerics(&self) -> Numerics {
        Numerics {
            grid: self.grid,
            multimode_grid: self.multimode_grid,
            zmax_margin: self.zmax_margin,
            coarse_points: self.coarse_points,
            search_tolerance: self.search_tolerance,
            fd_step: self.fd_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub checks: Vec<String>,
    /// Wave vectors substituted by the multimode check.
    pub multimode_modes: Vec<Vec<i32>>,
    /// Also run the closed-form collapse check of the non-interacting family.
    pub free_family: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            checks: vec!["sandwich".into()],
            multimode_modes: vec![vec![0], vec![1]],
            free_family: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Rows,
    Document,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![Format::Rows, Format::Document],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner().message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for c in &self.suite.checks {
            if !CHECK_NAMES.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "at `suite.checks`: unknown check `{c}`; expected one of {}",
                    CHECK_NAMES.join(", ")
                )));
            }
        }
        if self.model.box_length.is_some() && self.model.lengths.is_some() {
            return Err(Error::Config("at `model`: give either `box_length` or `lengths`, not both".into()));
        }
        if self.model.nu.is_some() && self.model.generator.is_some() {
            return Err(Error::Config("at `model`: give at most one of `nu` and `generator`".into()));
        }
        if self.model.nu.is_none() && self.model.dispersion.is_some() {
            return Err(Error::Config(
                "at `model.dispersion`: a generated potential uses the quadratic dispersion".into(),
            ));
        }
        if self.numerics.caps.len() != self.model.modes.len() {
            return Err(Error::Config(format!(
                "at `numerics.caps`: {} caps for {} modes",
                self.numerics.caps.len(),
                self.model.modes.len()
            )));
        }
        for (name, list) in [
            ("beta", &self.ensemble.beta),
            ("mu", &self.ensemble.mu),
            ("lambda", &self.ensemble.lambda),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("at `ensemble.{name}`: empty list")));
            }
        }
        self.base_spec()?;
        for &b in &self.ensemble.beta {
            EnsembleParams::new(b, 0.0, 0.0).map_err(|e| Error::Config(format!("at `ensemble.beta`: {e}")))?;
        }
        Ok(())
    }

    pub fn lengths(&self) -> Vec<f64> {
        match (&self.model.lengths, self.model.box_length) {
            (Some(ls), _) => ls.clone(),
            (None, Some(l)) => vec![l],
            (None, None) => vec![4.0],
        }
    }

    /// Model in the first box of the configuration.
    pub fn base_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let l = self.lengths()[0];
        if m.nu.is_none() {
            let g = m.generator.unwrap_or_default();
            return ModelSpec::gaussian(m.dimension, l, &m.modes, g.g, g.sigma, m.phi);
        }
        let nu: Vec<(Vec<i32>, C64)> = m
            .nu
            .as_ref()
            .expect("validated")
            .iter()
            .map(|e| (e.p.clone(), C64::new(e.re, e.im)))
            .collect();
        let max_nu = nu.iter().map(|(_, v)| v.norm()).fold(0.0, f64::max);
        let dispersion = m.dispersion.as_deref().map(table).unwrap_or(Dispersion::Quadratic);
        ModelSpec::new(m.dimension, l, &m.modes, dispersion, nu, m.phi.unwrap_or(max_nu))
    }

    /// Truncated models of every configured box, with caps scaled along the
    /// family.
    pub fn family(&self) -> Result<Vec<TruncatedModel>> {
        let base = self.base_spec()?;
        volume_family(
            &base,
            &self.lengths(),
            &self.numerics.caps,
            self.numerics.cap_scaling,
            self.numerics.dimension_limit,
        )
    }

    /// Non-interacting copies of the configured family.
    pub fn free_family(&self) -> Result<Vec<ModelSpec>> {
        let m = &self.model;
        self.lengths()
            .iter()
            .map(|&l| {
                let dispersion = m.dispersion.as_deref().map(table).unwrap_or(Dispersion::Quadratic);
                let nu = vec![(vec![0; m.dimension], C64::new(0.0, 0.0))];
                ModelSpec::new(m.dimension, l, &m.modes, dispersion, nu, 0.0)
            })
            .collect()
    }

    /// Every `(β, μ, λ)` point in β-major order.
    pub fn points(&self) -> Result<Vec<EnsembleParams>> {
        let e = &self.ensemble;
        let mut out = Vec::new();
        for &b in &e.beta {
            for &mu in &e.mu {
                for &l in &e.lambda {
                    out.push(EnsembleParams::new(b, mu, l)?);
                }
            }
        }
        Ok(out)
    }

    pub fn multimode_modes(&self, spec: &ModelSpec) -> Result<Vec<ModeId>> {
        self.suite
            .multimode_modes
            .iter()
            .map(|w| spec.mode(w).cloned())
            .collect()
    }

    /// Copy with the suite restricted to `checks` when it is non-empty.
    pub fn with_checks(&self, checks: &[String]) -> Result<Self> {
        let mut c = self.clone();
        if !checks.is_empty() {
            c.suite.checks = checks.to_vec();
        }
        c.validate()?;
        Ok(c)
    }
}

fn table(entries: &[EnergyEntry]) -> Dispersion {
    Dispersion::Table(entries.iter().map(|e| (e.k.clone(), e.energy)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("[model]\nbox_length = 4.0\n").unwrap();
        assert_eq!(c.numerics, NumericsConfig::default());
        assert_eq!(c.ensemble, EnsembleConfig::default());
        assert_eq!(c.base_spec().unwrap(), ModelSpec::three_mode(4.0, 1.0, 0.5).unwrap());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = parse_config("[model]\ngenerator = { g = 1.0, sigma = 0.5 }\n[numerics]\ncapz = [1]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("numerics") && msg.contains("capz"), "{msg}");
    }

    #[test]
    fn asymmetric_nu_names_the_pair() {
        let text = r#"
[model]
modes = [[0], [1]]
nu = [{ p = [0], re = 1.0 }, { p = [1], re = 0.5, im = 0.1 }, { p = [-1], re = 0.5, im = 0.1 }]
[numerics]
caps = [4, 2]
"#;
        let msg = parse_config(text).unwrap_err().to_string();
        assert!(msg.contains("[1]") && msg.contains("[-1]"), "{msg}");
    }

    #[test]
    fn phi_below_max_nu_rejected() {
        let text = "[model]\nphi = 0.5\ngenerator = { g = 1.0, sigma = 0.5 }\n";
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn family_expands_to_four_models() {
        let text = r#"
[model]
lengths = [4.0, 8.0, 16.0, 32.0]
generator = { g = 1.0, sigma = 0.5 }
[numerics]
caps = [3, 20, 3]
"#;
        let c = parse_config(text).unwrap();
        let fam = c.family().unwrap();
        assert_eq!(fam.len(), 4);
        assert!(fam.iter().all(|m| m.spec.modes.len() == 3));
        assert_eq!(fam[3].caps, vec![3, 160, 3]);
    }

    #[test]
    fn unknown_check_rejected() {
        let text = "[model]\ngenerator = { g = 1.0, sigma = 0.5 }\n[suite]\nchecks = [\"sandwhich\"]\n";
        assert!(parse_config(text).unwrap_err().to_string().contains("sandwhich"));
    }
}
