//! The `evolve` command: a toy run of the perturbation equation with its
//! energy ledger, checkpoints and decay fit.

use super::config::RunConfig;
use super::report::to_json;
use super::AppError;
use crate::dynamics::{CollisionRule, DynamicsError, EnergyLedger, EvolveConfig, Evolver, LinearizedOperator, SpatioVelocityField};
use crate::fields::{save_field, VelocityGrid};
use crate::kernel::KernelParams;
use crate::norms::AnisotropicNorm;
use crate::quad;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Halving {
    pub horizon: f64,
    pub dt: [f64; 2],
    /// Largest macroscopic-equation residual for `dt` and `dt/2`.
    pub macro_residual: [f64; 2],
    /// `log2` of their ratio; about 2 for a second-order scheme.
    pub observed_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolveSummary {
    pub steps: usize,
    pub lambda_hat: Option<f64>,
    pub envelope_ratio: Option<f64>,
    pub c1: f64,
    pub c_prime: f64,
    pub interaction_constant: f64,
    pub interaction_ratio: f64,
    pub max_conservation_residual: f64,
    pub max_macro_residual: f64,
    pub spectral_radius: f64,
    pub halving: Option<Halving>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    kernel: KernelParams,
    grid_radius: f64,
    grid_n: usize,
    modes: &'a [[i32; 3]],
    version: &'static str,
}

pub struct EvolveOutcome {
    pub dir: PathBuf,
    pub summary: EvolveSummary,
    pub ledger: EnergyLedger,
}

fn write_checkpoint(dir: &Path, t: f64, f: &SpatioVelocityField) -> Result<(), AppError> {
    let d = dir.join(format!("t{t:.4}"));
    std::fs::create_dir_all(&d)?;
    for (m, k) in f.modes.iter().enumerate() {
        let (re, im) = f.mode_parts(m);
        let tag = format!("k{}_{}_{}", k[0], k[1], k[2]);
        save_field(&d.join(format!("{tag}_re.gf")), &re)?;
        save_field(&d.join(format!("{tag}_im.gf")), &im)?;
    }
    Ok(())
}

pub fn cmd_evolve(cfg: &RunConfig) -> Result<EvolveOutcome, AppError> {
    cfg.validate()?;
    let k = cfg.kernel()?;
    let e = &cfg.evolve;
    let (radius, n) = cfg.grid.resolve(6.5, 16);
    let grid = VelocityGrid::new(radius, n)?;
    let op = LinearizedOperator::assemble(&grid, &k, &CollisionRule::default())?;
    let norm = AnisotropicNorm::new(&grid, &k)?;
    let ev = Evolver::new(&op, &norm)?;
    let f0 = SpatioVelocityField::random(&grid, e.kx, e.amplitude, quad::rng_seed(cfg.seed, 0))?;
    let run = EvolveConfig {
        dt: e.dt,
        t_final: e.t_final,
        mode: e.mode,
        order: e.order,
    };
    let (ledger, traj) = ev.evolve(&f0, &run).map_err(|err| match err {
        DynamicsError::BlowUp { t, norm2, initial } => {
            AppError::Abort(format!("blow-up; last ledger row: t={t:.16e}, norm2={norm2:.16e} (initial {initial:.16e})"))
        }
        other => other.into(),
    })?;
    let halving = if e.halving_horizon > 0.0 && e.amplitude > 0.0 {
        let horizon = e.halving_horizon.min(e.t_final).max(4.0 * e.dt);
        let mut res = [0.0; 2];
        for (i, dt) in [e.dt, 0.5 * e.dt].into_iter().enumerate() {
            let (_, tr) = ev.evolve(&f0, &EvolveConfig { dt, t_final: horizon, ..run })?;
            res[i] = ev.macro_residuals(&tr, e.mode, e.order)?.into_iter().fold(0.0, f64::max);
        }
        Some(Halving {
            horizon,
            dt: [e.dt, 0.5 * e.dt],
            macro_residual: res,
            observed_order: (res[0] / res[1]).log2(),
        })
    } else {
        None
    };
    let summary = EvolveSummary {
        steps: traj.times.len() - 1,
        lambda_hat: ledger.lambda_hat,
        envelope_ratio: ledger.envelope_ratio,
        c1: ledger.c1,
        c_prime: ledger.c_prime,
        interaction_constant: ledger.interaction_constant,
        interaction_ratio: ledger.interaction_ratio(),
        max_conservation_residual: ledger.max_conservation_residual(),
        max_macro_residual: ledger.max_macro_residual(),
        spectral_radius: ledger.spectral_radius,
        halving,
    };
    let dir = cfg.out.join(format!("evolve-seed{}", cfg.seed));
    std::fs::create_dir_all(&dir)?;
    let manifest = Manifest {
        config: cfg,
        kernel: k,
        grid_radius: radius,
        grid_n: n,
        modes: &f0.modes,
        version: env!("CARGO_PKG_VERSION"),
    };
    std::fs::write(dir.join("manifest.json"), to_json(&manifest))?;
    std::fs::write(dir.join("ledger.csv"), ledger.to_csv())?;
    std::fs::write(dir.join("summary.json"), to_json(&summary))?;
    let every = (e.checkpoint_every / e.dt).round().max(1.0) as usize;
    let last = traj.states.len() - 1;
    for (s, f) in traj.states.iter().enumerate() {
        if s % every == 0 || s == last {
            write_checkpoint(&dir.join("checkpoints"), traj.times[s], f)?;
        }
    }
    Ok(EvolveOutcome { dir, summary, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    // h ~ 1.1 keeps the trapezoid moments of the Maxwellian exact to ~1e-7
    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::from_toml("[grid]\nR = 6.5\nn = 16\n[evolve]\ndt = 0.025\nT = 0.1\nhalving_horizon = 0.0\n[kernel]\np = 5.0").unwrap();
        c.out = dir.to_path_buf();
        c
    }

    #[test]
    fn zero_data_gives_a_flat_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.evolve.amplitude = 0.0;
        let out = cmd_evolve(&c).unwrap();
        assert!(out.summary.lambda_hat.is_none());
        assert!(out.ledger.rows.iter().all(|r| r.norm2 == 0.0 && r.energy == 0.0));
        for f in ["manifest.json", "ledger.csv", "summary.json"] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
        assert!(out.dir.join("checkpoints").read_dir().unwrap().count() >= 2);
    }

    #[test]
    fn small_data_decays_and_large_steps_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let out = cmd_evolve(&c).unwrap();
        assert!(out.summary.lambda_hat.unwrap() > 0.0, "{:?}", out.summary);
        assert!(out.summary.max_conservation_residual <= 1e-6, "{:?}", out.summary);
        let again = cmd_evolve(&c).unwrap();
        assert_eq!(to_json(&out.summary), to_json(&again.summary));
        let mut c = tiny(dir.path());
        c.evolve.dt = 0.1;
        c.evolve.t_final = 0.2;
        let e = cmd_evolve(&c).err().expect("budget");
        assert_eq!(e.exit_code(), 2, "{e}");
    }
}
