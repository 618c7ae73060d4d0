//! Experiment configuration: a TOML file with nested sections.
//!
//! ```toml
//! seed = 7
//!
//! [domain]
//! shape = "square"        # square | disk | lshape | annulus
//! n = 64                  # cells per side; `ny` and `h` default to `n` and 1/n
//!
//! [problem]
//! kind = "dirichlet"      # dirichlet | double_obstacle
//! p = 2.0
//! varsigma = 0.0
//! a = "1"
//! g = "x^2 - y^2"
//! f = ["0", "0"]          # or a [problem.draw] table for a random smooth F
//! exact = "x^2 - y^2"     # optional, reported as an error metric
//!
//! [operators]
//! alpha = [0.0, 0.5]
//!
//! [[spaces.norms]]
//! space = "lorentz"
//! q = 1.5
//! s = 2.0
//!
//! [scan]
//! eps = [0.1, 0.01, 0.001]
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Every section except `domain`/`input` is optional; [`ExperimentConfig::resolve`]
//! fills in the defaults, and the resolved form is what a run records.

use std::fmt;
use std::path::{Path, PathBuf};

use fmdlab_core::funcspaces::{NormSpec, YoungFn};
use fmdlab_core::grid::ShapeTag;
use fmdlab_core::pde::P_MAX;
use fmdlab_core::verify::{LocalMode, DRAW_KMAX};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{key}: {source}")]
    Expr { key: String, source: ExprError },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// A real exponent that may be `inf`. Written as a number when finite and as
/// the string `"inf"` otherwise, so that it survives a JSON round trip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exponent(pub f64);

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Int(v) => Ok(Exponent(v as f64)),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => Ok(Exponent(f64::INFINITY)),
                other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", found \"{other}\""))),
            },
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub operators: OperatorsConfig,
    #[serde(default)]
    pub levels: LevelsConfig,
    #[serde(default)]
    pub spaces: SpacesConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "default_shape")]
    pub shape: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    /// Defaults to `1/n` (square, L-shape) or `2/n` (disk, annulus: outer radius 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

fn default_shape() -> String {
    "square".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKindConfig {
    Dirichlet,
    DoubleObstacle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_kind")]
    pub kind: ProblemKindConfig,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default)]
    pub varsigma: f64,
    /// Coefficient `a(x, y)`.
    #[serde(default = "one_expr")]
    pub a: String,
    /// Ellipticity Λ; defaults to the smallest admissible value for `a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Components of `F`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<[String; 2]>,
    /// Random smooth `F`, used instead of `f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw: Option<DrawConfig>,
    /// Boundary datum.
    #[serde(default = "zero_expr")]
    pub g: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<String>,
    /// Closed-form solution for the error metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default = "default_tol_rel")]
    pub tol_rel: f64,
    #[serde(default = "default_tol_abs")]
    pub tol_abs: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Restrict `p` to `(1, 2]`.
    #[serde(default)]
    pub paper_strict: bool,
}

fn default_kind() -> ProblemKindConfig {
    ProblemKindConfig::Dirichlet
}
fn two() -> f64 {
    2.0
}
fn one_expr() -> String {
    "1".into()
}
fn zero_expr() -> String {
    "0".into()
}
fn default_tol_rel() -> f64 {
    1e-8
}
fn default_tol_abs() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawConfig {
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_kmax() -> usize {
    DRAW_KMAX
}

/// A scalar field CSV written by `save_field` (grid header in the `.json` sidecar).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub field: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorsConfig {
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    /// Largest radius of `{h, 2h, …}`; defaults to the domain diameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_max: Option<f64>,
}

fn default_alpha() -> Vec<f64> {
    vec![0.0]
}

impl Default for OperatorsConfig {
    fn default() -> Self {
        Self { alpha: default_alpha(), radius_max: None }
    }
}

/// Log-spaced levels over `[10^{−decades}·max, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsConfig {
    #[serde(default = "default_level_count")]
    pub count: usize,
    #[serde(default = "default_decades")]
    pub decades: f64,
}

fn default_level_count() -> usize {
    61
}
fn default_decades() -> f64 {
    3.0
}

impl Default for LevelsConfig {
    fn default() -> Self {
        Self { count: default_level_count(), decades: default_decades() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormConfig {
    Lorentz { q: Exponent, s: Exponent },
    Orlicz { phi: String },
    OrliczLorentz { phi: String, q: Exponent, s: Exponent },
}

impl NormConfig {
    pub fn build(&self) -> fmdlab_core::Result<NormSpec<f64>> {
        let spec = match self {
            NormConfig::Lorentz { q, s } => NormSpec::Lorentz { q: q.0, s: s.0 },
            NormConfig::Orlicz { phi } => NormSpec::Orlicz { phi: YoungFn::parse(phi)?.certified()? },
            NormConfig::OrliczLorentz { phi, q, s } => {
                NormSpec::OrliczLorentz { phi: YoungFn::parse(phi)?.certified()?, q: q.0, s: s.0 }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacesConfig {
    #[serde(default)]
    pub norms: Vec<NormConfig>,
    /// Also report `‖M_α G‖ / ‖M_α F‖` when a problem is solved.
    #[serde(default = "yes")]
    pub compare: bool,
    #[serde(default = "default_mode")]
    pub mode: LocalMode,
    /// γ for the averaged comparison; taken from the reverse Hölder sweep when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn yes() -> bool {
    true
}
fn default_mode() -> LocalMode {
    LocalMode::Averaged
}

impl Default for SpacesConfig {
    fn default() -> Self {
        Self { norms: Vec::new(), compare: true, mode: default_mode(), gamma: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_modes")]
    pub modes: Vec<LocalMode>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    /// ε of the local comparison ingredient table.
    #[serde(default = "default_ingredient_eps")]
    pub ingredient_eps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Cap on the reverse Hölder sup ratio in the γ sweep.
    #[serde(default = "default_gamma_cap")]
    pub gamma_cap: f64,
    #[serde(default = "default_interior")]
    pub interior: usize,
    #[serde(default = "default_boundary")]
    pub boundary: usize,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_seed: Option<u64>,
}

fn default_modes() -> Vec<LocalMode> {
    vec![LocalMode::Averaged, LocalMode::Bounded]
}
fn default_eps() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}
fn default_ingredient_eps() -> Vec<f64> {
    vec![0.5, 0.1, 0.02]
}
fn default_gamma_cap() -> f64 {
    10.0
}
fn default_interior() -> usize {
    20
}
fn default_boundary() -> usize {
    12
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            eps: default_eps(),
            ingredient_eps: default_ingredient_eps(),
            gamma: None,
            gamma_cap: default_gamma_cap(),
            interior: default_interior(),
            boundary: default_boundary(),
            ball_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Dat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json, Format::Dat]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir(), formats: default_formats() }
    }
}

/// JSON files or directories merged by the `report` subcommand; defaults to
/// the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

fn parse_expr(key: &str, src: &str) -> Result<Expr, ConfigError> {
    Expr::parse(src).map_err(|source| ConfigError::Expr { key: key.to_string(), source })
}

fn check_list(key: &str, v: &[f64], ok: impl Fn(f64) -> bool, what: &str) -> Result<(), ConfigError> {
    if v.is_empty() {
        return Err(invalid(key, "must not be empty"));
    }
    for (i, &x) in v.iter().enumerate() {
        if !ok(x) {
            return Err(invalid(&format!("{key}[{i}]"), format!("{x} is not {what}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads a TOML config, or a run manifest (`.json`) whose embedded
    /// resolved config is re-used.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: shown.clone(), source })?;
        let parse_err = |message: String| ConfigError::Parse { path: shown.clone(), message };
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            let inner = match v.get_mut("resolved_config") {
                Some(c) => c.take(),
                None => v,
            };
            serde_json::from_value(inner).map_err(|e| parse_err(e.to_string()))
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                ConfigError::Parse { message, .. } => parse_err(message),
                other => other,
            })
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<config>".into(), message: e.to_string() })
    }

    /// Fills in derived defaults and validates every parameter.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        if self.problem.is_none() && self.input.is_none() {
            return Err(invalid("config", "needs a [problem] or an [input] section"));
        }
        if let Some(d) = &mut self.domain {
            let shape: ShapeTag = d.shape.parse().map_err(|e: fmdlab_core::Error| invalid("domain.shape", e.to_string()))?;
            d.shape = shape.to_string();
            if d.n < 4 {
                return Err(invalid("domain.n", format!("{} is below 4", d.n)));
            }
            let ny = *d.ny.get_or_insert(d.n);
            if ny < 4 {
                return Err(invalid("domain.ny", format!("{ny} is below 4")));
            }
            let span = match shape {
                ShapeTag::Disk | ShapeTag::Annulus => 2.0,
                _ => 1.0,
            };
            let h = *d.h.get_or_insert(span / d.n as f64);
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("domain.h", format!("{h} is not a positive spacing")));
            }
        }
        if let Some(p) = &mut self.problem {
            if self.domain.is_none() {
                return Err(invalid("problem", "needs a [domain] section"));
            }
            let pmax = if p.paper_strict { 2.0 } else { P_MAX };
            if !(p.p > 1.0 && p.p <= pmax) {
                return Err(invalid("problem.p", format!("{} outside (1, {pmax}]", p.p)));
            }
            if !(0.0..=1.0).contains(&p.varsigma) {
                return Err(invalid("problem.varsigma", format!("{} outside [0, 1]", p.varsigma)));
            }
            parse_expr("problem.a", &p.a)?;
            parse_expr("problem.g", &p.g)?;
            if let Some([fx, fy]) = &p.f {
                parse_expr("problem.f[0]", fx)?;
                parse_expr("problem.f[1]", fy)?;
            }
            if p.f.is_some() && p.draw.is_some() {
                return Err(invalid("problem", "give either `f` or `draw`, not both"));
            }
            if let Some(d) = &mut p.draw {
                if d.kmax == 0 {
                    return Err(invalid("problem.draw.kmax", "must be at least 1"));
                }
                d.seed.get_or_insert(self.seed);
            }
            if let Some(e) = &p.exact {
                parse_expr("problem.exact", e)?;
            }
            match p.kind {
                ProblemKindConfig::Dirichlet => {
                    if p.f1.is_some() || p.f2.is_some() {
                        return Err(invalid("problem", "obstacles `f1`/`f2` need kind = \"double_obstacle\""));
                    }
                }
                ProblemKindConfig::DoubleObstacle => {
                    let f1 = p.f1.as_deref().ok_or_else(|| invalid("problem.f1", "missing lower obstacle"))?;
                    let f2 = p.f2.as_deref().ok_or_else(|| invalid("problem.f2", "missing upper obstacle"))?;
                    parse_expr("problem.f1", f1)?;
                    parse_expr("problem.f2", f2)?;
                }
            }
            if !(p.tol_rel > 0.0) || !(p.tol_abs >= 0.0) || p.max_iter == 0 {
                return Err(invalid("problem", "tolerances must be positive and max_iter at least 1"));
            }
        }
        check_list("operators.alpha", &self.operators.alpha, |a| (0.0..2.0).contains(&a), "in [0, 2)")?;
        if let Some(r) = self.operators.radius_max {
            if !(r > 0.0) {
                return Err(invalid("operators.radius_max", format!("{r} is not positive")));
            }
        }
        if self.levels.count < 2 || !(self.levels.decades > 0.0) {
            return Err(invalid("levels", "needs count ≥ 2 and decades > 0"));
        }
        for (i, n) in self.spaces.norms.iter().enumerate() {
            n.build().map_err(|e| invalid(&format!("spaces.norms[{i}]"), e.to_string()))?;
        }
        if let Some(g) = self.spaces.gamma {
            if !(g > 1.0) {
                return Err(invalid("spaces.gamma", format!("{g} must exceed 1")));
            }
        }
        if let Some(s) = &mut self.scan {
            if self.problem.is_none() {
                return Err(invalid("scan", "needs a [problem] section"));
            }
            if s.modes.is_empty() {
                return Err(invalid("scan.modes", "must not be empty"));
            }
            check_list("scan.eps", &s.eps, |e| e > 0.0 && e < 1.0, "in (0, 1)")?;
            check_list("scan.ingredient_eps", &s.ingredient_eps, |e| e > 0.0 && e < 1.0, "in (0, 1)")?;
            if let Some(g) = s.gamma {
                if !(g > 1.0) {
                    return Err(invalid("scan.gamma", format!("{g} must exceed 1")));
                }
            }
            if !(s.gamma_cap >= 1.0) {
                return Err(invalid("scan.gamma_cap", format!("{} is below 1", s.gamma_cap)));
            }
            s.ball_seed.get_or_insert(self.seed);
        }
        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "must not be empty"));
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form, with the output directory left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn writes(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [domain]
        n = 32
        [problem]
        g = "x^2 - y^2"
        exact = "x^2 - y^2"
    "#;

    #[test]
    fn defaults_are_resolved() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap().resolve().unwrap();
        let d = c.domain.as_ref().unwrap();
        assert_eq!((d.ny, d.h), (Some(32), Some(1.0 / 32.0)));
        assert_eq!(c.problem.as_ref().unwrap().p, 2.0);
        assert_eq!(c.operators.alpha, vec![0.0]);
        assert!(c.scan.is_none());
        let again = c.clone().resolve().unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn json_round_trip_keeps_infinite_exponents() {
        let text = format!("{MINIMAL}\n[[spaces.norms]]\nspace = \"lorentz\"\nq = 2\ns = inf\n");
        let c = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"s\":\"inf\""), "{json}");
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_their_location() {
        let e = ExperimentConfig::from_toml("[domain]\nn = 32\n[problem]\ng = \"x +\"\n").unwrap().resolve().unwrap_err();
        assert_eq!(e.to_string(), "problem.g: at column 4: expected a value, found end of input");
        let e = ExperimentConfig::from_toml("[domain]\nn = \"big\"\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = ExperimentConfig::from_toml("[domain]\nn = 32\nsize = 3\n").unwrap_err();
        assert!(e.to_string().contains("size"), "{e}");
        let e = ExperimentConfig::from_toml("[domain]\nn = 32\n[problem]\np = 2.5\npaper_strict = true\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(e.to_string().starts_with("problem.p:"), "{e}");
        let e = ExperimentConfig::from_toml("[domain]\nn = 32\n[problem]\n[operators]\nalpha = [0.5, 2.5]\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(e.to_string().starts_with("operators.alpha[1]:"), "{e}");
        let e = ExperimentConfig::from_toml("[domain]\nn = 32\n").unwrap().resolve().unwrap_err();
        assert!(e.to_string().contains("[problem] or an [input]"), "{e}");
    }

    #[test]
    fn obstacles_need_the_obstacle_kind() {
        let e = ExperimentConfig::from_toml("[domain]\nn = 8\n[problem]\nf1 = \"-1\"\nf2 = \"1\"\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(e.to_string().contains("double_obstacle"), "{e}");
        let c = ExperimentConfig::from_toml(
            "[domain]\nn = 8\n[problem]\nkind = \"double_obstacle\"\nf1 = \"-1\"\nf2 = \"1\"\n",
        )
        .unwrap()
        .resolve();
        assert!(c.is_ok());
    }
}
