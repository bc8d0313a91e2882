//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and a
//! tally; the exit status is always 0 so the tally is the result.

use kinetic::cli::audits::{invariant_suite, representation_suite, run_audit};
use kinetic::cli::evolve::cmd_evolve;
use kinetic::cli::report::to_json;
use kinetic::cli::{cmd_gamma, AuditReport, RunConfig};
use kinetic::fields::{maxwellian, GridFunction, VelocityGrid};
use kinetic::geometry::{add, deviation_relation, norm, norm2, post_collision, scale, sub, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Outcome = Result<(bool, String), String>;

fn base() -> RunConfig {
    RunConfig::from_toml("[kernel]\np = 5\n").expect("base config")
}

fn audit(name: &str) -> Result<AuditReport, String> {
    run_audit(name, &base()).map_err(|e| e.to_string())
}

fn describe(r: &AuditReport) -> String {
    r.checks
        .iter()
        .map(|c| format!("{}={:.4e} ({})", c.name, c.value, c.target))
        .collect::<Vec<_>>()
        .join(", ")
}

fn from_reports(reports: &[AuditReport]) -> Outcome {
    let passed = reports.iter().all(|r| r.passed);
    let detail = reports.iter().map(|r| format!("{}: {}", r.audit, describe(r))).collect::<Vec<_>>().join("; ");
    Ok((passed, detail))
}

fn moments() -> Outcome {
    let grid = VelocityGrid::new(8.0, 48).map_err(|e| e.to_string())?;
    let m = maxwellian(&grid);
    let weighted = |k: i32| {
        let w = GridFunction::from_fn(&grid, |v| norm2(v).powi(k));
        m.inner(&w)
    };
    let got = [m.integrate(), weighted(1), weighted(2)];
    let want = [1.0, 3.0, 15.0];
    let err = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-4, format!("moments {:.8} {:.8} {:.8}, max error {err:.2e} (<= 1e-4)", got[0], got[1], got[2])))
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vec3 = |r: &mut ChaCha8Rng, s: f64| -> Vec3 { [s * r.gen_range(-1.0..1.0), s * r.gen_range(-1.0..1.0), s * r.gen_range(-1.0..1.0)] };
    let (mut worst_cons, mut worst_dev): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let v = vec3(&mut rng, 5.0);
        let vs = vec3(&mut rng, 5.0);
        let raw = vec3(&mut rng, 1.0);
        if norm(raw) < 1e-3 {
            continue;
        }
        let sigma = scale(1.0 / norm(raw), raw);
        let (vp, vsp) = post_collision(v, vs, sigma).map_err(|e| e.to_string())?;
        let e0 = norm2(v) + norm2(vs);
        let mom = norm(sub(add(vp, vsp), add(v, vs))) / norm(add(v, vs)).max(1.0);
        let energy = (norm2(vp) + norm2(vsp) - e0).abs() / e0.max(1.0);
        worst_cons = worst_cons.max(mom).max(energy);
        let (cos_t, dist) = deviation_relation(v, vs, sigma).map_err(|e| e.to_string())?;
        let r2 = norm2(sub(v, vs));
        // |v - v'|^2 = |v - v*|^2 sin^2(theta/2)
        let dev = (dist * dist - 0.5 * r2 * (1.0 - cos_t)).abs() / r2.max(1.0);
        worst_dev = worst_dev.max(dev);
    }
    Ok((
        worst_cons <= 1e-12 && worst_dev <= 1e-12,
        format!("conservation {worst_cons:.2e}, deviation identity {worst_dev:.2e} (<= 1e-12, 1e4 samples)"),
    ))
}

fn with_samples(samples: usize) -> RunConfig {
    let mut c = base();
    c.quadrature.samples = samples;
    c
}

fn representations() -> Outcome {
    let r = representation_suite(&with_samples(2_000_000)).map_err(|e| e.to_string())?;
    let rel = r.constants.get("max_relative_deviation").copied().unwrap_or(f64::NAN);
    Ok((r.passed, format!("{}, max relative deviation {rel:.2e}, {} triples", describe(&r), r.rows.len())))
}

fn invariants() -> Outcome {
    let r = invariant_suite(&with_samples(2_000_000)).map_err(|e| e.to_string())?;
    Ok((r.passed, describe(&r)))
}

fn evolution() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = base();
    c.out = dir.path().to_path_buf();
    let s = cmd_evolve(&c).map_err(|e| e.to_string())?.summary;
    let lambda = s.lambda_hat.unwrap_or(f64::NAN);
    let env = s.envelope_ratio.unwrap_or(f64::NAN);
    let order = s.halving.as_ref().map_or(f64::NAN, |h| h.observed_order);
    let ok = [
        lambda > 0.0,
        env <= 1.05,
        s.max_conservation_residual <= 1e-6,
        order >= 1.7,
        s.interaction_constant.is_finite() && s.interaction_ratio <= 1.0,
    ];
    Ok((
        ok.iter().all(|&b| b),
        format!(
            "lambda_hat={lambda:.4} (> 0), envelope={env:.4} (<= 1.05), conservation={:.2e} (<= 1e-6), halving order={order:.3} (>= 1.7), |I|/(C|f|^2)={:.3e} with C={:.3e} (<= 1)",
            s.max_conservation_residual, s.interaction_ratio, s.interaction_constant
        ),
    ))
}

/// JSON from a set of cheap runs inside a pool of `threads` workers.
fn fingerprint(threads: usize) -> Result<Vec<String>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let mut out = Vec::new();
        for name in ["bjest", "cancellation", "estnorm3", "nonlin", "compact", "psi", "redistribution", "nu"] {
            out.push(audit(name)?.to_json());
        }
        let mut c = with_samples(20_000);
        c.suite.count = 4;
        out.push(invariant_suite(&c).map_err(|e| e.to_string())?.to_json());
        out.push(to_json(&cmd_gamma(&with_samples(20_000), true).map_err(|e| e.to_string())?));
        Ok(out)
    })
}

fn determinism() -> Outcome {
    let one = fingerprint(1)?;
    let three = fingerprint(3)?;
    let same = one.iter().zip(&three).filter(|(a, b)| a == b).count();
    Ok((same == one.len() && one.len() == three.len(), format!("{same}/{} JSON documents identical across 1 and 3 threads", one.len())))
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("maxwellian moments", Box::new(moments)),
        ("collision geometry", Box::new(geometry)),
        ("representation agreement", Box::new(representations)),
        ("collision invariants", Box::new(invariants)),
        ("linearized operator", Box::new(|| from_reports(&[audit("coercivity")?]))),
        ("collision frequency slope", Box::new(|| from_reports(&[audit("nu")?]))),
        ("dyadic kernel audits", Box::new(|| from_reports(&[audit("bjest")?, audit("cancellation")?]))),
        ("littlewood-paley", Box::new(|| from_reports(&[audit("lp_slopes")?]))),
        ("norm equivalence window", Box::new(|| from_reports(&[audit("estnorm3")?]))),
        ("symbol scaling", Box::new(|| from_reports(&[audit("psi")?]))),
        ("fourier redistribution", Box::new(|| from_reports(&[audit("redistribution")?]))),
        ("toy evolution", Box::new(evolution)),
        ("determinism", Box::new(determinism)),
    ];
    let total = criteria.len();
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(x) => x,
            Err(e) => (false, format!("error: {e}")),
        };
        passed += ok as usize;
        println!("{} {:>2} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{passed}/{total} passed");
}
