//! Run configuration: a TOML file with `[run]`, `[kernel]`, `[phi]`,
//! `[majorant]`, `[init]` and `[output]` sections. Unknown keys are errors.

use std::fmt;

use coag_core::kernels::{HomogeneousBase, SpatialRate};
use coag_core::{
    ClusterState, ConservedQuantity, DiscreteMeasure, EllPreset, KernelSpec, MajorantSpec, Mass,
    Matrix, OffspringForm, Placement, Xi,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Solve,
    Compare,
    CheckKernel,
    GelTime,
    Ensemble,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Solve => "solve",
            Mode::Compare => "compare",
            Mode::CheckKernel => "check-kernel",
            Mode::GelTime => "gel-time",
            Mode::Ensemble => "ensemble",
        }
    }
}

/// A configuration problem, with the 1-based line it points at when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config error at line {l}: {}", self.message),
            None => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub kernel: KernelSection,
    #[serde(default)]
    pub phi: PhiSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majorant: Option<MajorantSection>,
    pub init: InitSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    #[default]
    Exact,
    Rejection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Rk4,
    Rk4HalvingCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowName {
    #[default]
    ToGel,
    ReflectError,
}

fn default_seed() -> u64 {
    1
}
fn default_family() -> String {
    "standard".into()
}
fn default_audit() -> u64 {
    1000
}
fn default_samples() -> usize {
    10_000
}
fn default_sample_max_mass() -> u64 {
    100
}
fn default_max_error() -> f64 {
    0.02
}
fn default_slope_range() -> [f64; 2] {
    [-0.8, -0.2]
}
fn default_c_bound() -> f64 {
    1.0
}
fn default_extent() -> f64 {
    2.0
}

/// Run parameters. Which of the optional keys are required depends on the mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// When present, must agree with the mode given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_values: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Largest mass on the solver grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_mass: Option<u64>,
    #[serde(default)]
    pub method: MethodName,
    #[serde(default)]
    pub overflow: OverflowName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default)]
    pub strategy: StrategyName,
    #[serde(default = "default_audit")]
    pub audit_interval: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<u64>,
    /// Triples drawn by the kernel classifier.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_sample_max_mass")]
    pub sample_max_mass: u64,
    /// Half-width of the attribute box sampled by the classifier.
    #[serde(default = "default_extent")]
    pub sample_extent: f64,
    /// Radius of `D_R` for the eventually-conservative check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default = "default_c_bound")]
    pub c_bound: f64,
    /// Compare mode passes when the largest-N median error is below this.
    #[serde(default = "default_max_error")]
    pub max_error: f64,
    #[serde(default = "default_slope_range")]
    pub slope_range: [f64; 2],
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: None,
            seed: default_seed(),
            t_end: None,
            n: None,
            n_values: None,
            replicas: None,
            snapshot_times: Vec::new(),
            dt: None,
            max_mass: None,
            method: MethodName::default(),
            overflow: OverflowName::default(),
            eps: None,
            family: default_family(),
            strategy: StrategyName::default(),
            audit_interval: default_audit(),
            max_events: None,
            samples: default_samples(),
            sample_max_mass: default_sample_max_mass(),
            sample_extent: default_extent(),
            radius: None,
            c_bound: default_c_bound(),
            max_error: default_max_error(),
            slope_range: default_slope_range(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseName {
    #[default]
    Product,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllName {
    One,
    Bump,
}

impl EllName {
    fn preset(self) -> EllPreset {
        match self {
            EllName::One => EllPreset::One,
            EllName::Bump => EllPreset::Bump,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementName {
    #[default]
    MassWeighted,
    Sum,
    Heavier,
}

impl PlacementName {
    fn placement(self) -> Placement {
        match self {
            PlacementName::MassWeighted => Placement::MassWeighted,
            PlacementName::Sum => Placement::Sum,
            PlacementName::Heavier => Placement::Heavier,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSection {
    Constant {
        #[serde(default = "one")]
        rate: f64,
    },
    Additive {},
    Multiplicative {},
    Homogeneous {
        gamma: f64,
        #[serde(default)]
        base: BaseName,
    },
    Bilinear {
        matrix: Vec<Vec<f64>>,
    },
    MinLog {
        eps: f64,
    },
    SpatialToy {
        ell: EllName,
        #[serde(default)]
        interaction: f64,
        #[serde(default)]
        placement: PlacementName,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSection {
    #[default]
    Zero,
    MassProduct,
    MassTimesEll {
        ell: EllName,
    },
    Bilinear {
        matrix: Vec<Vec<f64>>,
    },
    MinMass,
    MassSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum MajorantSection {
    /// `xi(s) = intercept + coef * s^exponent`, majorant `xi(m(x)) xi(m(y))`.
    Product {
        #[serde(default)]
        intercept: f64,
        #[serde(default = "one")]
        coef: f64,
        exponent: f64,
    },
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `round(w N)` copies of each state.
    #[default]
    Counts,
    /// `N` independent draws.
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassValue {
    Integer(u64),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEntry {
    pub mass: MassValue,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attrs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub kind: InitKind,
    pub states: Vec<StateEntry>,
}

fn default_out() -> String {
    "out".into()
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: String,
    /// Write full empirical measures at snapshot times (ensemble mode).
    #[serde(default)]
    pub full_measure: bool,
    /// Write the event log (simulate mode).
    #[serde(default)]
    pub events: bool,
    /// Write long-form `series, x, y` plot tables.
    #[serde(default = "yes")]
    pub plot: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out(),
            full_measure: false,
            events: false,
            plot: true,
        }
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, for errors found after parsing.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn err_at(text: &str, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: line_of(text, section, key).or_else(|| line_of(text, section, "")),
        message: message.into(),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
        line: e.span().map(|s| line_at(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.check_static(text)?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serialises")
}

fn matrix_of(rows: &[Vec<f64>], what: &str) -> Result<Matrix, String> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(format!("{what} must be a non-empty square matrix"));
    }
    let m = Matrix::new(d, rows.concat()).map_err(|e| format!("{what}: {e}"))?;
    if !m.is_symmetric() {
        return Err(format!("{what} is not symmetric (A != A^T)"));
    }
    Ok(m)
}

fn positive(v: Option<f64>) -> bool {
    v.is_none_or(|x| x.is_finite() && x > 0.0)
}

impl RunConfig {
    /// Mode-independent checks: value ranges and kernel construction.
    fn check_static(&self, text: &str) -> Result<(), ConfigError> {
        self.kernel_spec().map_err(|m| {
            let key = if m.contains("matrix") { "matrix" } else { "name" };
            err_at(text, "kernel", key, m)
        })?;
        self.phi().map_err(|m| err_at(text, "phi", "matrix", m))?;
        self.initial_measure().map_err(|m| err_at(text, "init", "", m))?;
        let r = &self.run;
        if r.t_end.is_some_and(|t| !(t.is_finite() && t >= 0.0)) {
            return Err(err_at(text, "run", "t_end", "run.t_end must be finite and non-negative"));
        }
        for (key, v) in [("dt", r.dt), ("eps", r.eps), ("radius", r.radius)] {
            if !positive(v) {
                return Err(err_at(text, "run", key, format!("run.{key} must be positive")));
            }
        }
        if r.t_end.is_some_and(|t| r.snapshot_times.iter().any(|s| *s > t)) {
            return Err(err_at(text, "run", "snapshot_times", "snapshot times must not exceed run.t_end"));
        }
        if r.snapshot_times.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || r.snapshot_times.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(err_at(
                text,
                "run",
                "snapshot_times",
                "snapshot times must be non-negative and strictly increasing",
            ));
        }
        for (key, v) in [("n", r.n), ("max_mass", r.max_mass), ("max_events", r.max_events)] {
            if v == Some(0) {
                return Err(err_at(text, "run", key, format!("run.{key} must be positive")));
            }
        }
        if r.replicas == Some(0) {
            return Err(err_at(text, "run", "replicas", "run.replicas must be positive"));
        }
        if r.n_values.as_ref().is_some_and(|v| v.is_empty() || v.contains(&0)) {
            return Err(err_at(text, "run", "n_values", "run.n_values must be a non-empty list of positive counts"));
        }
        if r.eps.is_some_and(|e| e > 1.0) {
            return Err(err_at(text, "run", "eps", "run.eps is a mass fraction in (0, 1]"));
        }
        if !(r.c_bound.is_finite() && r.c_bound > 0.0) || !(r.max_error > 0.0) || r.samples == 0 {
            return Err(err_at(text, "run", "", "c_bound, max_error and samples must be positive"));
        }
        if !(r.slope_range[0] <= r.slope_range[1]) {
            return Err(err_at(text, "run", "slope_range", "slope_range must be [low, high]"));
        }
        coag_core::test_family(&r.family, 0).map_err(|e| err_at(text, "run", "family", e.to_string()))?;
        if r.strategy == StrategyName::Rejection {
            self.majorant_spec()
                .and_then(|m| coag_core::SystemOptions::rejection(&m).map_err(|e| e.to_string()))
                .map_err(|m| err_at(text, "majorant", "form", m))?;
        }
        Ok(())
    }

    /// Keys each mode needs, and the command-line mode agreeing with `[run] mode`.
    pub fn check_mode(&self, mode: Mode) -> Result<(), ConfigError> {
        if let Some(m) = self.run.mode {
            if m != mode {
                return Err(ConfigError {
                    line: None,
                    message: format!("config is for mode `{}` but `{}` was requested", m.as_str(), mode.as_str()),
                });
            }
        }
        let r = &self.run;
        let need: &[(&str, bool)] = match mode {
            Mode::Simulate => &[("t_end", r.t_end.is_some()), ("n", r.n.is_some())],
            Mode::Solve => &[("t_end", r.t_end.is_some()), ("dt", r.dt.is_some()), ("max_mass", r.max_mass.is_some())],
            Mode::Compare => &[
                ("t_end", r.t_end.is_some()),
                ("dt", r.dt.is_some()),
                ("max_mass", r.max_mass.is_some()),
                ("n_values", r.n_values.is_some()),
                ("replicas", r.replicas.is_some()),
            ],
            Mode::CheckKernel => &[],
            Mode::GelTime => &[
                ("t_end", r.t_end.is_some()),
                ("n", r.n.is_some()),
                ("replicas", r.replicas.is_some()),
                ("eps", r.eps.is_some()),
            ],
            Mode::Ensemble => &[
                ("t_end", r.t_end.is_some()),
                ("n_values", r.n_values.is_some()),
                ("replicas", r.replicas.is_some()),
            ],
        };
        match need.iter().find(|(_, present)| !present) {
            Some((key, _)) => Err(ConfigError {
                line: None,
                message: format!("missing required key run.{key} for mode `{}`", mode.as_str()),
            }),
            None => Ok(()),
        }
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec, String> {
        let k = match &self.kernel {
            KernelSection::Constant { rate } => KernelSpec::constant(*rate),
            KernelSection::Additive {} => Ok(KernelSpec::additive()),
            KernelSection::Multiplicative {} => Ok(KernelSpec::multiplicative()),
            KernelSection::Homogeneous { gamma, base } => KernelSpec::homogeneous(
                *gamma,
                match base {
                    BaseName::Product => HomogeneousBase::Product,
                    BaseName::Sum => HomogeneousBase::Sum,
                },
            ),
            KernelSection::Bilinear { matrix } => KernelSpec::bilinear(matrix_of(matrix, "kernel.matrix")?),
            KernelSection::MinLog { eps } => KernelSpec::min_log(*eps),
            KernelSection::SpatialToy {
                ell,
                interaction,
                placement,
            } => KernelSpec::spatial_toy(
                SpatialRate {
                    ell: ell.preset(),
                    interaction: *interaction,
                },
                OffspringForm::DeltaSum(placement.placement()),
            ),
        };
        k.map_err(|e| e.to_string())
    }

    pub fn phi(&self) -> Result<ConservedQuantity, String> {
        Ok(match &self.phi {
            PhiSection::Zero => ConservedQuantity::zero(),
            PhiSection::MassProduct => ConservedQuantity::mass_product(),
            PhiSection::MassTimesEll { ell } => ConservedQuantity::mass_times_ell(ell.preset()),
            PhiSection::Bilinear { matrix } => ConservedQuantity::bilinear(matrix_of(matrix, "phi.matrix")?),
            PhiSection::MinMass => ConservedQuantity::min_mass(),
            PhiSection::MassSquared => ConservedQuantity::mass_squared(),
        })
    }

    /// The configured majorant, or the kernel's default product majorant.
    pub fn majorant_spec(&self) -> Result<MajorantSpec, String> {
        match &self.majorant {
            Some(MajorantSection::Product {
                intercept,
                coef,
                exponent,
            }) => Ok(MajorantSpec::product(Xi::new(*intercept, *coef, *exponent))),
            Some(MajorantSection::Min) => Ok(MajorantSpec::min()),
            None => self
                .kernel_spec()?
                .default_majorant()
                .ok_or_else(|| "kernel has no default majorant; add a [majorant] section".to_string()),
        }
    }

    pub fn initial_measure(&self) -> Result<DiscreteMeasure, String> {
        if self.init.states.is_empty() {
            return Err("init.states must list at least one state".into());
        }
        let kernel_is_bilinear = matches!(self.kernel, KernelSection::Bilinear { .. });
        let mut states = Vec::with_capacity(self.init.states.len());
        let mut weights = Vec::with_capacity(self.init.states.len());
        for (i, s) in self.init.states.iter().enumerate() {
            let base = match s.mass {
                MassValue::Integer(m) if kernel_is_bilinear && !s.attrs.is_empty() => {
                    let st = ClusterState::from_components(&s.attrs).map_err(|e| format!("init.states[{i}]: {e}"))?;
                    if st.mass() != Mass::Integer(m) {
                        return Err(format!("init.states[{i}]: mass must equal the sum of the components"));
                    }
                    Ok(st)
                }
                MassValue::Integer(m) => ClusterState::integer(m).with_attributes(s.attrs.clone()),
                MassValue::Real(m) => {
                    ClusterState::real(m).and_then(|c| c.with_attributes(s.attrs.clone()))
                }
            }
            .map_err(|e| format!("init.states[{i}]: {e}"))?;
            states.push(match s.label {
                Some(l) => base.with_label(l),
                None => base,
            });
            weights.push(s.weight);
        }
        let mu = DiscreteMeasure::new(states, weights).map_err(|e| e.to_string())?;
        if self.init.kind == InitKind::Iid && (mu.total_variation() - 1.0).abs() > 1e-9 {
            return Err("i.i.d. initial weights must sum to 1".into());
        }
        Ok(mu)
    }

    pub fn output_dir(&self) -> &str {
        &self.output.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
t_end = 1.0
n = 100

[kernel]
name = "constant"

[init]
[[init.states]]
mass = 1
weight = 1.0
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.run.seed, 1);
        assert_eq!(cfg.kernel, KernelSection::Constant { rate: 1.0 });
        assert_eq!(cfg.phi, PhiSection::Zero);
        assert_eq!(cfg.init.kind, InitKind::Counts);
        assert_eq!(cfg.output.dir, "out");
        assert_eq!(cfg.run.family, "standard");
        assert!(cfg.check_mode(Mode::Simulate).is_ok());
        assert!(cfg.check_mode(Mode::Solve).unwrap_err().message.contains("run.dt"));
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = parse_config(MINIMAL).unwrap();
        let again = parse_config(&to_toml(&cfg)).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(to_toml(&cfg), to_toml(&again));
    }

    #[test]
    fn asymmetric_matrix_is_named() {
        let text = MINIMAL.replace(
            "name = \"constant\"",
            "name = \"bilinear\"\nmatrix = [[1.0, 2.0], [0.0, 1.0]]",
        );
        let e = parse_config(&text).unwrap_err();
        assert!(e.message.contains("kernel.matrix"), "{e}");
        assert_eq!(e.line, Some(8));
    }

    #[test]
    fn duplicate_and_unknown_keys_are_rejected() {
        let dup = MINIMAL.replace("n = 100", "n = 100\nn = 200");
        let e = parse_config(&dup).unwrap_err();
        assert!(e.message.contains("duplicate"), "{e}");
        assert_eq!(e.line, Some(5));

        let unknown = MINIMAL.replace("n = 100", "n = 100\ntemperature = 3");
        let e = parse_config(&unknown).unwrap_err();
        assert!(e.message.contains("temperature"), "{e}");
        assert!(e.line.is_some());

        let stray = MINIMAL.replace("name = \"constant\"", "name = \"constant\"\ngamma = 2.0");
        assert!(parse_config(&stray).unwrap_err().message.contains("gamma"));
    }

    #[test]
    fn unknown_kernel_is_rejected() {
        let e = parse_config(&MINIMAL.replace("constant", "brownian")).unwrap_err();
        assert!(e.message.contains("brownian"), "{e}");
    }

    #[test]
    fn snapshot_after_horizon_is_rejected() {
        let e = parse_config(&MINIMAL.replace("n = 100", "n = 100\nsnapshot_times = [0.5, 2.0]")).unwrap_err();
        assert_eq!(e.line, Some(5));
    }

    #[test]
    fn mode_mismatch() {
        let cfg = parse_config(&MINIMAL.replace("[run]", "[run]\nmode = \"solve\"")).unwrap();
        assert!(cfg.check_mode(Mode::Simulate).is_err());
    }
}
