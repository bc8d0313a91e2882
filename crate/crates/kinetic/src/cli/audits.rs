//! The named audits. Each returns a table of cases, fitted constants and
//! checks against fixed tolerances.

use super::config::RunConfig;
use super::report::AuditReport;
use super::{pairwise_deviation, AppError};
use crate::dynamics::{self, CollisionRule, LinearizedOperator, NuTable};
use crate::fields::{sqrt_mu, FnField, GridFunction, TestFunction, TestFunctionSpec, VelocityField, VelocityGrid};
use crate::geometry::{norm2, Vec3};
use crate::kernel::{sphere_integral_bound_audit, DyadicIndex, KernelParams};
use crate::lp::{self, LpQuadrature, ScalingProfile};
use crate::norms::{self, AnisotropicNorm, AuditContext, AuditKind, BRoute, SeminormSpec};
use crate::quad;
use crate::trilinear::{self, Representation, Split};
use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;

pub const AUDIT_NAMES: [&str; 10] = ["bjest", "cancellation", "lp_slopes", "estnorm3", "nonlin", "compact", "psi", "redistribution", "nu", "coercivity"];

pub fn run_audit(name: &str, cfg: &RunConfig) -> Result<AuditReport, AppError> {
    if !AUDIT_NAMES.contains(&name) {
        return Err(AppError::Usage(format!("unknown audit `{name}`; expected one of {}", AUDIT_NAMES.join(", "))));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut r = match name {
        "bjest" => bjest(cfg),
        "cancellation" => cancellation(cfg),
        "lp_slopes" => lp_slopes(cfg),
        "estnorm3" => estnorm3(cfg),
        "nonlin" => nonlin(cfg),
        "compact" => compact(cfg),
        "psi" => psi(cfg),
        "redistribution" => redistribution(cfg),
        "nu" => nu(cfg),
        "coercivity" => coercivity(cfg),
        _ => unreachable!(),
    }?;
    r.wall_time = start.elapsed();
    Ok(r)
}

fn grid(cfg: &RunConfig, radius: f64, n: usize) -> Result<Arc<VelocityGrid>, AppError> {
    let (r, n) = cfg.grid.resolve(radius, n);
    Ok(VelocityGrid::new(r, n)?)
}

fn seminorm_spec(cfg: &RunConfig) -> SeminormSpec {
    SeminormSpec {
        seed: cfg.seed,
        ..SeminormSpec::default()
    }
}

/// Slope of `log2 |y|` against `x`.
fn log2_slope(x: &[f64], y: &[f64]) -> f64 {
    let ly: Vec<f64> = y.iter().map(|v| v.abs().log2()).collect();
    quad::slope(x, &ly)
}

fn bjest(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let k = cfg.kernel()?;
    let mut r = AuditReport::new("bjest", cfg.seed, &["rel_speed", "j", "value", "ratio"]);
    let js: Vec<f64> = (0..=8).map(f64::from).collect();
    for speed in [2.0, 4.0, 8.0] {
        let mut vals = Vec::new();
        for j in 0..=8 {
            let (v, ratio) = sphere_integral_bound_audit(&k, DyadicIndex::new(j), speed)?;
            r.row(vec![speed.into(), (j as i64).into(), v.into(), ratio.into()]);
            vals.push(v);
        }
        r.check_within(&format!("slope_speed{speed}"), log2_slope(&js, &vals), 2.0 * k.s, 0.1);
    }
    Ok(r)
}

/// Smooth Gaussian triple used by the dyadic audits.
fn gaussian_triple() -> Result<[TestFunction; 3], AppError> {
    let gs = |c: Vec3| TestFunction::new(TestFunctionSpec::gaussian(c, 1.0));
    Ok([gs([0.3, 0.0, 0.0])?, gs([0.0, -0.2, 0.1])?, gs([0.0, 0.0, 0.3])?])
}

fn cancellation(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let [g, h, f] = gaussian_triple()?;
    let quad = trilinear::QuadratureSpec::product();
    let mut r = AuditReport::new("cancellation", cfg.seed, &["split", "s", "j", "value"]);
    for (split, s, tol) in [(Split::Minus, 0.25, 0.2), (Split::Star, 0.75, 0.3)] {
        let k = KernelParams::new(0.0, s)?;
        let c = trilinear::cancellation_audit(split, 1..=6, &g, &h, &f, &k, &quad)?;
        let name = match split {
            Split::Minus => "minus",
            Split::Star => "star",
        };
        for (j, v) in c.levels.iter().zip(&c.values) {
            r.row(vec![name.into(), s.into(), (*j as i64).into(), (*v).into()]);
        }
        r.constant(&format!("slope_{name}"), c.slope);
        r.check_at_most(&format!("slope_{name}_s{s}"), c.slope, c.predicted + tol);
    }
    Ok(r)
}

fn lp_slopes(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let k = cfg.kernel()?;
    let profile = ScalingProfile::default();
    let rule = LpQuadrature::default();
    let suite = cfg.suite.functions()?;
    let mut r = AuditReport::new("lp_slopes", cfg.seed, &["quantity", "j", "value"]);

    // telescoping on a grid fine enough for three levels
    let fine = VelocityGrid::new(2.0, 33)?;
    let out = VelocityGrid::new(2.0, 9)?;
    let levels = lp::max_level(&fine).unwrap_or(0);
    let st = lp::lp_stack(&suite[0].sample(&fine), levels, &out, &profile, &rule, false)?;
    let sum = st.pieces.iter().fold(GridFunction::zeros(&out), |a, q| a.axpy(1.0, q));
    let tele = sum.axpy(-1.0, &st.residual).max_abs();
    r.constant("levels", levels as f64);
    r.check_at_most("telescoping_error", tele, 1e-10);

    // Q_j 1
    let one = FnField(|_: Vec3| 1.0);
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.5, -0.5], [2.5, 0.0, 1.0], [-3.0, 2.0, 0.0]];
    let js: Vec<f64> = (1..=5).map(f64::from).collect();
    let q1: Vec<f64> = (1..=5)
        .map(|j| pts.iter().map(|&v| lp::q_jet(j, &one, v, &profile, &rule, false).value.abs()).fold(0.0, f64::max))
        .collect();
    for (j, v) in js.iter().zip(&q1) {
        r.row(vec!["q_of_one".into(), (*j as i64).into(), (*v).into()]);
    }
    r.check_at_most("q_of_one_slope", log2_slope(&js, &q1), -1.7);

    // derivative scaling on band-limited bumps
    let ratios: Vec<[f64; 2]> = (1..=5).map(|j| lp::band_limited_ratios(j, [0.5, 0.0, -0.5], &profile, &rule)).collect();
    for (i, q) in ratios.iter().enumerate() {
        r.row(vec!["grad_ratio".into(), (i as i64 + 1).into(), q[0].into()]);
        r.row(vec!["hess_ratio".into(), (i as i64 + 1).into(), q[1].into()]);
    }
    let s1 = log2_slope(&js, &ratios.iter().map(|q| q[0]).collect::<Vec<_>>());
    let s2 = log2_slope(&js, &ratios.iter().map(|q| q[1]).collect::<Vec<_>>());
    r.check_within("derivative_slope_k1", s1, 1.0, 0.2);
    r.check_within("derivative_slope_k2", s2, 2.0, 0.3);

    // square function against the norm, fitted over part of the suite on two grids
    let members = &suite[..suite.len().min(4)];
    let mut consts = Vec::new();
    for (n, n_out) in [(33, 17), (49, 25)] {
        let g = VelocityGrid::new(4.0, n)?;
        let out = VelocityGrid::new(4.0, n_out)?;
        let levels = lp::max_level(&g).unwrap_or(0);
        let norm = AnisotropicNorm::new(&g, &k)?;
        let mut c = [0.0f64; 3];
        for f in members {
            let fs = f.sample(&g);
            let sq = lp::square_function(&fs, levels, k.s, k.gamma, &out, &profile, &rule)?;
            let nn = norm.eval(&fs)?.total.powi(2);
            for i in 0..3 {
                c[i] = c[i].max(sq.totals[i] / nn);
            }
        }
        for (i, ci) in c.iter().enumerate() {
            r.row(vec![format!("square_constant_k{i}").into(), (n as i64).into(), (*ci).into()]);
        }
        consts.push(c);
    }
    let spread = (0..3).map(|i| (consts[1][i] / consts[0][i]).max(consts[0][i] / consts[1][i])).fold(0.0, f64::max);
    r.constant("square_constant_k0", consts[1][0]);
    r.check_at_most("square_constant_refinement_ratio", spread, 2.0);
    Ok(r)
}

fn norm_setup(cfg: &RunConfig) -> Result<(KernelParams, Arc<VelocityGrid>, AnisotropicNorm, NuTable), AppError> {
    let k = cfg.kernel()?;
    let g = grid(cfg, 4.0, 25)?;
    let norm = AnisotropicNorm::new(&g, &k)?;
    let nu = NuTable::new(&k, g.radius * 3f64.sqrt() + 1.0)?;
    Ok((k, g, norm, nu))
}

fn table_rows(r: &mut AuditReport, t: &norms::AuditTable, label: &str) {
    for row in &t.rows {
        r.row(vec![label.into(), row.function_id.clone().into(), row.lhs.into(), row.rhs.into(), row.ratio.into()]);
    }
}

const TABLE_COLUMNS: [&str; 5] = ["table", "case", "lhs", "rhs", "ratio"];

fn estnorm3(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let (k, g, norm, nu) = norm_setup(cfg)?;
    let suite = cfg.suite.functions()?;
    let ctx = AuditContext {
        params: k,
        grid: g,
        norm: &norm,
        nu: &nu,
        seminorm: seminorm_spec(cfg),
        trilinear: cfg.quadrature()?,
        etas: vec![],
    };
    let mut r = AuditReport::new("estnorm3", cfg.seed, &TABLE_COLUMNS);
    let upper = norms::estimate_audit(AuditKind::NormUpper, &suite, &ctx)?;
    table_rows(&mut r, &upper, "norm_upper");
    let lower = norms::estimate_audit(AuditKind::Coercive, &suite, &ctx)?;
    table_rows(&mut r, &lower, "coercive");
    r.constant("window_low", upper.min_ratio);
    r.constant("window_high", upper.max_ratio);
    r.constant("coercive_constant", lower.max_ratio);
    r.check_at_least("window_low", upper.min_ratio, 0.0);
    r.check_at_most("window_spread", upper.max_ratio / upper.min_ratio, 50.0);
    r.check("coercive_constant_finite", lower.max_ratio, "finite", lower.max_ratio.is_finite());
    // the two routes to the B seminorm
    let mut worst: f64 = 0.0;
    for f in &suite[..suite.len().min(5)] {
        let a = norms::b_seminorm(f, &k, BRoute::Sigma, &ctx.seminorm)?;
        let b = norms::b_seminorm(f, &k, BRoute::Carleman, &ctx.seminorm)?;
        let dev = (a.value - b.value).abs() / (a.error_estimate + b.error_estimate);
        r.row(vec!["routes".into(), format!("seed{}", f.spec.seed).into(), a.value.into(), b.value.into(), dev.into()]);
        worst = worst.max(dev);
    }
    r.check_at_most("route_deviation_over_error", worst, 3.0);
    Ok(r)
}

fn nonlin(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let (k, g, norm, nu) = norm_setup(cfg)?;
    let suite = cfg.suite.functions()?;
    let ctx = AuditContext {
        params: k,
        grid: g,
        norm: &norm,
        nu: &nu,
        seminorm: seminorm_spec(cfg),
        trilinear: cfg.quadrature()?,
        etas: vec![],
    };
    let t = norms::estimate_audit(AuditKind::Nonlin, &suite, &ctx)?;
    let mut r = AuditReport::new("nonlin", cfg.seed, &TABLE_COLUMNS);
    table_rows(&mut r, &t, "nonlin");
    r.constant("fitted_constant", t.max_ratio);
    r.check("fitted_constant_finite", t.max_ratio, "finite and positive", t.max_ratio.is_finite() && t.max_ratio > 0.0);
    Ok(r)
}

fn compact(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let (k, g, norm, nu) = norm_setup(cfg)?;
    let suite = cfg.suite.functions()?;
    let etas = vec![1.0, 0.5, 0.25, 0.125];
    let ctx = AuditContext {
        params: k,
        grid: g,
        norm: &norm,
        nu: &nu,
        seminorm: seminorm_spec(cfg),
        trilinear: cfg.quadrature()?,
        etas: etas.clone(),
    };
    let t = norms::estimate_audit(AuditKind::CompactUpper, &suite, &ctx)?;
    let mut r = AuditReport::new("compact", cfg.seed, &TABLE_COLUMNS);
    table_rows(&mut r, &t, "compact");
    let per_eta: Vec<f64> = etas
        .iter()
        .map(|eta| {
            let tag = format!("@eta{eta}");
            t.rows.iter().filter(|row| row.function_id.ends_with(&tag)).map(|row| row.ratio).fold(0.0, f64::max)
        })
        .collect();
    for (eta, c) in etas.iter().zip(&per_eta) {
        r.constant(&format!("constant_eta{eta}"), *c);
    }
    let finite = per_eta.iter().all(|c| c.is_finite());
    r.check("constants_finite", per_eta.iter().copied().fold(0.0, f64::max), "finite", finite);
    // a smaller eta leaves more of K to the L^2 side
    let monotone = per_eta.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    r.check("constant_grows_as_eta_shrinks", per_eta[per_eta.len() - 1], "nonincreasing in eta", monotone);
    Ok(r)
}

fn psi(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let mut r = AuditReport::new("psi", cfg.seed, &["s", "lambda", "psi", "psi_2lambda", "ratio_over_target"]);
    let l = 1024.0;
    for s in [0.25, 0.5, 0.75] {
        let a = norms::psi(l, s, 1.0)?;
        let b = norms::psi(2.0 * l, s, 1.0)?;
        let q = b / a / 2f64.powf(2.0 * s);
        r.row(vec![s.into(), l.into(), a.into(), b.into(), q.into()]);
        r.check_within(&format!("doubling_ratio_s{s}"), q, 1.0, 0.05);
    }
    Ok(r)
}

fn redistribution(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let (s, eps) = (0.5, 0.2);
    let rep = norms::fourier_redistribution_check(s, eps, 64)?;
    let mut r = AuditReport::new("redistribution", cfg.seed, &["xi_x", "xi_y", "xi_z", "xi_norm", "lhs", "rhs"]);
    for row in &rep.rows {
        let d = row.direction;
        r.row(vec![(d[0] * row.xi_norm).into(), (d[1] * row.xi_norm).into(), (d[2] * row.xi_norm).into(), row.xi_norm.into(), row.lhs.into(), row.rhs.into()]);
    }
    r.constant("ratio_constant", rep.ratio_constant);
    r.constant("additive_constant", rep.additive_constant);
    r.check("ratio_constant_finite", rep.ratio_constant, "finite", rep.ratio_constant.is_finite());
    r.check_within("lhs_slope", rep.lhs_slope, 2.0 * s, 0.15);
    r.check_within("rhs_slope", rep.rhs_slope, 2.0 * s, 0.15);
    Ok(r)
}

fn nu(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let mut r = AuditReport::new("nu", cfg.seed, &["p", "r", "nu_tilde", "nu"]);
    for p in [5.0, 9.0] {
        let k = KernelParams::from_inverse_power(p)?;
        let t = NuTable::new(&k, 12.0)?;
        for (i, v) in t.values.iter().enumerate().step_by(4) {
            let rr = i as f64 * t.step;
            r.row(vec![p.into(), rr.into(), (*v).into(), t.nu([rr, 0.0, 0.0]).into()]);
        }
        r.constant(&format!("c1_p{p}"), t.c1);
        r.constant(&format!("c0_p{p}"), t.c0);
        r.constant(&format!("raw_slope_p{p}"), t.slope_total);
        r.constant(&format!("fit_residual_p{p}"), t.fit_residual);
        r.check_within(&format!("slope_p{p}"), t.slope_leading, k.order(), 0.15);
    }
    Ok(r)
}

fn coercivity(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    let k = cfg.kernel()?;
    let g = grid(cfg, 6.0, 16)?;
    let op = LinearizedOperator::assemble(&g, &k, &CollisionRule::default())?;
    let mut r = AuditReport::new("coercivity", cfg.seed, &["quantity", "case", "value"]);
    let null: [fn(Vec3) -> f64; 5] = [sqrt_mu, |v| v[0] * sqrt_mu(v), |v| v[1] * sqrt_mu(v), |v| v[2] * sqrt_mu(v), |v| norm2(v) * sqrt_mu(v)];
    let mut worst_null: f64 = 0.0;
    for (i, e) in null.iter().enumerate() {
        let x = GridFunction::from_fn(&g, e);
        let q = op.apply_l_raw(&x)?.l2() / x.l2();
        r.row(vec!["null_residual".into(), (i as i64).into(), q.into()]);
        worst_null = worst_null.max(q);
    }
    r.check_at_most("null_residual", worst_null, 1e-3);
    let mut worst_form = f64::INFINITY;
    for i in 0..100u64 {
        let f = TestFunction::new(TestFunctionSpec::random_gaussian_poly(cfg.seed.wrapping_mul(1000).wrapping_add(i)))?;
        let x = f.sample(&g);
        let q = op.quadratic_form(&x)? / x.l2().powi(2);
        r.row(vec!["form_over_l2".into(), (i as i64).into(), q.into()]);
        worst_form = worst_form.min(q);
    }
    r.check_at_least("min_form_over_l2", worst_form, -1e-3);
    // the probe on two refinements of a common box
    let suite = cfg.suite.functions()?;
    let fields: Vec<&dyn VelocityField> = suite.iter().map(|f| f as &dyn VelocityField).collect();
    let mut deltas = Vec::new();
    for n in [24, 32] {
        let pg = VelocityGrid::new(4.0, n)?;
        let norm = AnisotropicNorm::new(&pg, &k)?;
        let rep = dynamics::coercivity_probe(&fields, &k, &norm, 100_000, cfg.seed)?;
        for (i, q) in rep.ratios.iter().enumerate() {
            r.row(vec![format!("probe_n{n}").into(), (i as i64).into(), (*q).into()]);
        }
        r.constant(&format!("delta_hat_n{n}"), rep.delta_hat);
        deltas.push(rep.delta_hat);
    }
    let delta = deltas[0].min(deltas[1]);
    r.check("delta_hat", delta, "> 0", delta > 0.0);
    let q = (deltas[1] / deltas[0]).max(deltas[0] / deltas[1]);
    r.check_at_most("delta_hat_refinement_ratio", q, 2.0);
    Ok(r)
}

// ---------------------------------------------------------------- trilinear suites

/// Cyclic triples `(f_i, f_{i+1}, f_{i+2})` of the suite.
fn triples(suite: &[TestFunction]) -> Vec<[&TestFunction; 3]> {
    let n = suite.len();
    (0..n).map(|i| [&suite[i], &suite[(i + 1) % n], &suite[(i + 2) % n]]).collect()
}

/// All three representations on every triple of the suite.
pub fn representation_suite(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    cfg.validate()?;
    let start = Instant::now();
    let k = cfg.kernel()?;
    let suite = cfg.suite.functions()?;
    let mut r = AuditReport::new("representations", cfg.seed, &["triple", "sigma", "carleman", "dual", "error", "deviation_over_error", "relative_deviation"]);
    let mut worst: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for (i, [g, h, f]) in triples(&suite).into_iter().enumerate() {
        let mut q = cfg.quadrature()?;
        q.seed = quad::rng_seed(cfg.seed, i as u64);
        let reps = Representation::ALL
            .iter()
            .map(|&rep| trilinear::gamma(rep, g, h, f as &dyn VelocityField, &k, &q))
            .collect::<Result<Vec<_>, _>>()?;
        let (dev, over) = pairwise_deviation(&reps);
        let scale = reps.iter().map(|x| x.value.abs()).fold(0.0, f64::max);
        let rel = if scale > 0.0 { dev / scale } else { 0.0 };
        let err = reps.iter().map(|x| x.error_estimate).fold(0.0, f64::max);
        let id = format!("seed{}|{}|{}", g.spec.seed, h.spec.seed, f.spec.seed);
        r.row(vec![id.into(), reps[0].value.into(), reps[1].value.into(), reps[2].value.into(), err.into(), over.into(), rel.into()]);
        worst = worst.max(over);
        worst_rel = worst_rel.max(rel);
    }
    r.constant("max_relative_deviation", worst_rel);
    r.check_at_most("max_deviation_over_error", worst, 3.0);
    r.wall_time = start.elapsed();
    Ok(r)
}

/// `<Gamma(g,h), e>` for the five collision invariants `e` on pairs of the
/// suite. Only mass is conserved by `Gamma(g,h)` alone; momentum and energy
/// cancel in `Gamma(g,h) + Gamma(h,g)`, so both orders are evaluated.
pub fn invariant_suite(cfg: &RunConfig) -> Result<AuditReport, AppError> {
    cfg.validate()?;
    let start = Instant::now();
    let k = cfg.kernel()?;
    let suite = cfg.suite.functions()?;
    let inv = trilinear::collision_invariants();
    let refs: Vec<&dyn VelocityField> = inv.iter().map(|b| b.as_ref() as &dyn VelocityField).collect();
    // L^2 norms for the scale, on a box holding every suite member
    let box_grid = VelocityGrid::new(6.0, 40)?;
    let l2 = |f: &dyn VelocityField| GridFunction::sample(&box_grid, f).l2();
    let inv_l2: Vec<f64> = refs.iter().map(|e| l2(*e)).collect();
    let mut r = AuditReport::new("invariants", cfg.seed, &["pair", "invariant", "value", "swapped", "error", "scale", "bound"]);
    let pairs: Vec<(usize, usize)> = (0..suite.len()).map(|i| (i, (i + 1) % suite.len())).collect();
    let rows: Vec<_> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, &(i, j))| {
            let mut q = cfg.quadrature()?;
            q.seed = quad::rng_seed(cfg.seed, 1000 + p as u64);
            let ab = trilinear::gamma_multi(Representation::Sigma, &suite[i], &suite[j], &refs, &k, &q)?;
            let ba = trilinear::gamma_multi(Representation::Sigma, &suite[j], &suite[i], &refs, &k, &q)?;
            Ok::<_, AppError>((i, j, ab, ba))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (mut worst, mut worst_mass, mut worst_sym): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (i, j, ab, ba) in rows {
        let gh = l2(&suite[i]) * l2(&suite[j]);
        for (e, (x, y)) in ab.iter().zip(&ba).enumerate() {
            let scale = gh * inv_l2[e];
            let bound = (1e-3 * scale).max(3.0 * x.error_estimate);
            let id = format!("seed{}|{}", suite[i].spec.seed, suite[j].spec.seed);
            r.row(vec![id.into(), (e as i64).into(), x.value.into(), y.value.into(), x.error_estimate.into(), scale.into(), bound.into()]);
            worst = worst.max(x.value.abs() / bound);
            if e == 0 {
                worst_mass = worst_mass.max(x.value.abs() / bound).max(y.value.abs() / bound);
            }
            let sym_bound = (1e-3 * scale).max(3.0 * (x.error_estimate + y.error_estimate));
            worst_sym = worst_sym.max((x.value + y.value).abs() / sym_bound);
        }
    }
    r.check_at_most("max_value_over_bound", worst, 1.0);
    r.check_at_most("mass_value_over_bound", worst_mass, 1.0);
    r.check_at_most("symmetrized_value_over_bound", worst_sym, 1.0);
    r.wall_time = start.elapsed();
    Ok(r)
}
