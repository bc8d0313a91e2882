//! Command layer behind the `kinetic` binary: configuration, commands and
//! report files.

pub mod audits;
pub mod config;
pub mod evolve;
pub mod report;

use crate::dynamics::DynamicsError;
use crate::fields::{FieldError, VelocityField};
use crate::kernel::{KernelError, KernelParams};
use crate::lp::LpError;
use crate::norms::NormError;
use crate::trilinear::{self, Representation, TrilinearError, TrilinearReport};
pub use config::RunConfig;
pub use report::AuditReport;
use serde::Serialize;
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("aborted: {0}")]
    Abort(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Abort(_) | Self::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<KernelError> for AppError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::InversePower(_) | KernelError::Invalid(_) => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<FieldError> for AppError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Io(_) => Self::Io(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<TrilinearError> for AppError {
    fn from(e: TrilinearError) -> Self {
        match e {
            TrilinearError::Spec(_) | TrilinearError::Range(_) => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<LpError> for AppError {
    fn from(e: LpError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<NormError> for AppError {
    fn from(e: NormError) -> Self {
        match e {
            NormError::Invalid(_) => Self::Config(e.to_string()),
            NormError::Quadrature(_) => Self::Numerical(e.to_string()),
            NormError::Field(e) => e.into(),
            NormError::Trilinear(e) => e.into(),
            NormError::Dynamics(e) => e.into(),
        }
    }
}

impl From<DynamicsError> for AppError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Invalid(_) | DynamicsError::Unstable(_) | DynamicsError::IllConditioned(_) | DynamicsError::ShortTrajectory(_) => {
                Self::Config(e.to_string())
            }
            DynamicsError::BlowUp { .. } => Self::Abort(e.to_string()),
            DynamicsError::NonFinite(_) => Self::Numerical(e.to_string()),
            DynamicsError::Field(e) => e.into(),
        }
    }
}

// ---------------------------------------------------------------- kernel-info

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelInfo {
    pub params: KernelParams,
    pub order: f64,
    pub spectral_gap: bool,
    /// Angles in `(0, pi/2]` tested against the two-sided bound on `b`.
    pub angles_checked: usize,
    pub angles_ok: usize,
}

impl std::fmt::Display for KernelInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = &self.params;
        if let Some(p) = k.p {
            writeln!(f, "p={p}")?;
        }
        writeln!(f, "gamma={} s={} gamma+2s={}", k.gamma, k.s, self.order)?;
        writeln!(f, "gap={}", if self.spectral_gap { "yes" } else { "no" })?;
        write!(f, "angular bound: {}/{} angles within [c_b, 1/c_b] theta^(-1-2s) (c_b = {})", self.angles_ok, self.angles_checked, k.c_b)
    }
}

pub fn cmd_kernel_info(cfg: &RunConfig) -> Result<KernelInfo, AppError> {
    let params = cfg.kernel()?;
    let angles: Vec<f64> = (1..=64).map(|i| FRAC_PI_2 * 2f64.powf(-(64 - i) as f64 / 4.0)).collect();
    Ok(KernelInfo {
        params,
        order: params.order(),
        spectral_gap: params.order() >= 0.0,
        angles_checked: angles.len(),
        angles_ok: angles.iter().filter(|&&t| params.satisfies_angular_bound(t)).count(),
    })
}

// ---------------------------------------------------------------- gamma

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaOutput {
    pub reports: Vec<TrilinearReport>,
    /// Largest `|a - b|` over pairs of representations (with `--compare`).
    pub max_deviation: Option<f64>,
    /// The same deviation over the pair's combined error estimate.
    pub deviation_over_error: Option<f64>,
}

/// `(max |a - b|, max |a - b| / (e_a + e_b))` over pairs of reports.
pub fn pairwise_deviation(reports: &[TrilinearReport]) -> (f64, f64) {
    let mut dev: f64 = 0.0;
    let mut rel: f64 = 0.0;
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            let d = (a.value - b.value).abs();
            dev = dev.max(d);
            let e = a.error_estimate + b.error_estimate;
            rel = rel.max(if e > 0.0 { d / e } else if d == 0.0 { 0.0 } else { f64::INFINITY });
        }
    }
    (dev, rel)
}

pub fn cmd_gamma(cfg: &RunConfig, compare: bool) -> Result<GammaOutput, AppError> {
    cfg.validate()?;
    let params = cfg.kernel()?;
    let quad = cfg.quadrature()?;
    let (g, h, f) = (cfg.gamma.g.build()?, cfg.gamma.h.build()?, cfg.gamma.f.build()?);
    let reps: Vec<Representation> = if compare { Representation::ALL.to_vec() } else { vec![cfg.gamma.representation] };
    let reports = reps
        .iter()
        .map(|&rep| trilinear::gamma(rep, &g, &h, &f as &dyn VelocityField, &params, &quad))
        .collect::<Result<Vec<_>, _>>()?;
    let (dev, rel) = pairwise_deviation(&reports);
    Ok(GammaOutput {
        max_deviation: compare.then_some(dev),
        deviation_over_error: compare.then_some(rel),
        reports,
    })
}

/// Runs an audit by name and writes its CSV and JSON into the output
/// directory.
pub fn cmd_audit(cfg: &RunConfig, name: &str) -> Result<AuditReport, AppError> {
    let report = audits::run_audit(name, cfg)?;
    report.write(&cfg.out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::FunctionChoice;

    #[test]
    fn kernel_info_for_inverse_powers() {
        let cfg = RunConfig::default();
        let info = cmd_kernel_info(&cfg).unwrap();
        let text = info.to_string();
        assert!(text.contains("gamma=0 s=0.25"), "{text}");
        assert!(text.contains("gap=yes"));
        assert_eq!(info.angles_ok, info.angles_checked);
        let cfg = RunConfig::from_toml("[kernel]\np = 3.0").unwrap();
        let e = cmd_kernel_info(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("requires p > 3"));
    }

    #[test]
    fn gamma_of_maxwellians_vanishes_and_is_reproducible() {
        let mut cfg = RunConfig::default();
        cfg.quadrature.samples = 20_000;
        cfg.gamma.g = FunctionChoice::Named("maxwellian".into());
        cfg.gamma.h = FunctionChoice::Named("maxwellian".into());
        let a = cmd_gamma(&cfg, true).unwrap();
        for r in &a.reports {
            assert!(r.value.abs() <= 3.0 * r.error_estimate + 1e-12, "{r:?}");
        }
        let b = cmd_gamma(&cfg, true).unwrap();
        assert_eq!(report::to_json(&a), report::to_json(&b));
        cfg.quadrature.phi_nodes = 3;
        assert_eq!(cmd_gamma(&cfg, false).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(AppError::from(DynamicsError::Unstable("x".into())).exit_code(), 2);
        assert_eq!(AppError::from(DynamicsError::BlowUp { t: 1.0, norm2: 9.0, initial: 1.0 }).exit_code(), 4);
        assert_eq!(AppError::from(TrilinearError::NonFinite).exit_code(), 3);
        assert_eq!(AppError::from(NormError::Quadrature("x".into())).exit_code(), 3);
        assert!(audits::run_audit("nope", &RunConfig::default()).is_err_and(|e| e.exit_code() == 2));
    }
}
