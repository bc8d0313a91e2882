//! Run configuration, read from a TOML file and patched by flags.

use super::AppError;
use crate::dynamics::EvolveMode;
use crate::fields::{TestFunction, TestFunctionSpec};
use crate::kernel::{KernelParams, KineticMode};
use crate::trilinear::{QuadratureSpec, Representation};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub out: PathBuf,
    pub kernel: Option<KernelSection>,
    pub grid: GridSection,
    pub quadrature: QuadratureSpec,
    pub suite: SuiteSection,
    pub evolve: EvolveSection,
    pub gamma: GammaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            kernel: Some(KernelSection::default()),
            grid: GridSection::default(),
            quadrature: QuadratureSpec::default(),
            suite: SuiteSection::default(),
            evolve: EvolveSection::default(),
            gamma: GammaSection::default(),
        }
    }
}

/// Either `p` (inverse-power law) or the pair `(gamma, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub p: Option<f64>,
    pub gamma: Option<f64>,
    pub s: Option<f64>,
    #[serde(default = "one")]
    pub c_b: f64,
    #[serde(default = "one")]
    pub c_phi: f64,
    #[serde(default)]
    pub kinetic_mode: KineticMode,
}

fn one() -> f64 {
    1.0
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            p: Some(5.0),
            gamma: None,
            s: None,
            c_b: 1.0,
            c_phi: 1.0,
            kinetic_mode: KineticMode::Power,
        }
    }
}

impl KernelSection {
    pub fn params(&self) -> Result<KernelParams, AppError> {
        let mut k = match (self.p, self.gamma, self.s) {
            (Some(p), g, s) => {
                let k = KernelParams::from_inverse_power(p)?;
                let clash = |x: Option<f64>, y: f64| x.is_some_and(|x| (x - y).abs() > 1e-12);
                if clash(g, k.gamma) || clash(s, k.s) {
                    return Err(AppError::Config(format!("p = {p} gives gamma = {}, s = {}; conflicting values given", k.gamma, k.s)));
                }
                k
            }
            (None, Some(g), Some(s)) => KernelParams::new(g, s)?,
            _ => return Err(AppError::Config("[kernel] needs either p or both gamma and s".into())),
        };
        k.c_b = self.c_b;
        k.c_phi = self.c_phi;
        k.kinetic_mode = self.kinetic_mode;
        k.validate()?;
        Ok(k)
    }
}

/// Velocity box `[-R, R]^3` with `n` nodes per axis. Unset fields fall
/// back to the default of the command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "R")]
    pub radius: Option<f64>,
    pub n: Option<usize>,
}

impl GridSection {
    pub fn resolve(&self, radius: f64, n: usize) -> (f64, usize) {
        (self.radius.unwrap_or(radius), self.n.unwrap_or(n))
    }
}

/// Test-function suite: seeds `first_seed .. first_seed + count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub first_seed: u64,
    pub count: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self { first_seed: 1, count: 20 }
    }
}

impl SuiteSection {
    pub fn functions(&self) -> Result<Vec<TestFunction>, AppError> {
        (0..self.count as u64)
            .map(|i| Ok(TestFunction::new(TestFunctionSpec::random_gaussian_poly(self.first_seed + i))?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveSection {
    #[serde(rename = "K_x")]
    pub kx: i32,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub mode: EvolveMode,
    /// Sobolev order in `x`.
    pub order: i32,
    /// Size of the random initial datum.
    pub amplitude: f64,
    /// Horizon of the step-halving check (0 disables it).
    pub halving_horizon: f64,
    pub checkpoint_every: f64,
}

impl Default for EvolveSection {
    fn default() -> Self {
        Self {
            kx: 1,
            dt: 0.025,
            t_final: 2.0,
            mode: EvolveMode::Linear,
            order: 2,
            amplitude: 0.05,
            halving_horizon: 0.5,
            checkpoint_every: 0.5,
        }
    }
}

/// A test function named by seed, by the keyword `maxwellian`, or given
/// in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FunctionChoice {
    Seed(u64),
    Named(String),
    Spec(TestFunctionSpec),
}

impl FunctionChoice {
    pub fn build(&self) -> Result<TestFunction, AppError> {
        let spec = match self {
            Self::Seed(s) => TestFunctionSpec::random_gaussian_poly(*s),
            Self::Named(n) if n == "maxwellian" => TestFunctionSpec::gaussian([0.0; 3], 4.0),
            Self::Named(n) => return Err(AppError::Config(format!("unknown test function `{n}`"))),
            Self::Spec(s) => *s,
        };
        Ok(TestFunction::new(spec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSection {
    pub g: FunctionChoice,
    pub h: FunctionChoice,
    pub f: FunctionChoice,
    pub representation: Representation,
}

impl Default for GammaSection {
    fn default() -> Self {
        Self {
            g: FunctionChoice::Seed(1),
            h: FunctionChoice::Seed(2),
            f: FunctionChoice::Seed(3),
            representation: Representation::Sigma,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, AppError> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    /// A file without a `[kernel]` table leaves `kernel` unset.
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        if !table.contains_key("kernel") {
            cfg.kernel = None;
        }
        Ok(cfg)
    }

    pub fn kernel(&self) -> Result<KernelParams, AppError> {
        self.kernel.as_ref().ok_or_else(|| AppError::Config("missing [kernel] section".into()))?.params()
    }

    /// Monte-Carlo settings with the run seed folded in.
    pub fn quadrature(&self) -> Result<QuadratureSpec, AppError> {
        let mut q = self.quadrature.clone();
        q.seed = self.seed;
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), AppError> {
        self.kernel()?;
        self.quadrature()?;
        if let Some(r) = self.grid.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(AppError::Config(format!("grid R = {r} must be positive")));
            }
        }
        if self.grid.n.is_some_and(|n| n < 2) {
            return Err(AppError::Config("grid n must be at least 2".into()));
        }
        if self.suite.count < 3 {
            return Err(AppError::Config("the suite needs at least three functions".into()));
        }
        let e = &self.evolve;
        if e.kx < 0 || e.kx > 3 {
            return Err(AppError::Config(format!("K_x = {} must lie in 0..=3", e.kx)));
        }
        if !(e.dt > 0.0 && e.t_final >= e.dt) {
            return Err(AppError::Config(format!("need 0 < dt <= T, got dt = {}, T = {}", e.dt, e.t_final)));
        }
        if e.order < 1 || !(e.amplitude >= 0.0) || !(e.halving_horizon >= 0.0) || !(e.checkpoint_every > 0.0) {
            return Err(AppError::Config("evolve: need order >= 1, amplitude >= 0, halving_horizon >= 0, checkpoint_every > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::from_toml(
            r#"
seed = 7
[kernel]
gamma = 0.0
s = 0.5
[grid]
R = 5.0
n = 20
[quadrature]
samples = 1000
[suite]
count = 5
[evolve]
K_x = 1
dt = 0.01
T = 0.5
mode = "picard"
[gamma]
g = "maxwellian"
h = 4
representation = "carleman"
"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.kernel().unwrap().s, 0.5);
        assert_eq!(c.grid.resolve(6.0, 16), (5.0, 20));
        assert_eq!(c.quadrature().unwrap().seed, 7);
        assert_eq!(c.evolve.mode, EvolveMode::Picard);
        assert_eq!(c.gamma.h, FunctionChoice::Seed(4));
        assert_eq!(c.gamma.representation, Representation::Carleman);
        assert_eq!(c.gamma.f, FunctionChoice::Seed(3));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(AppError::Config(_))));
        let c = RunConfig::from_toml("[kernel]\np = 3.0").unwrap();
        let e = c.kernel().unwrap_err();
        assert!(e.to_string().contains("p > 3"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let c = RunConfig::from_toml("[kernel]\np = 5.0\ns = 0.5").unwrap();
        assert!(c.kernel().is_err());
        let c = RunConfig::from_toml("[kernel]\ns = 0.5").unwrap();
        assert!(c.kernel().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert!(matches!(c.kernel(), Err(AppError::Config(m)) if m.contains("missing")));
    }
}
