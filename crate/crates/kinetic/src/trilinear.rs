//! The trilinear collision form `<Gamma(g,h), f>` in sigma, Carleman and
//! dual representations, and its dyadic pieces.
//!
//! Every representation is written as
//! `int dx int dy int_0^{pi/2} d theta theta^{-1-2s} int_0^{2 pi} d phi F`
//! with `(x, y) = (v, v_*)` in sigma variables and `(x, y) = (v', v_*)` in
//! Carleman variables, so that the same Monte-Carlo and product engines
//! serve all of them.

use crate::fields::{sqrt_mu, VelocityField};
use crate::geometry::{self, norm, sub, Vec3};
use crate::kernel::{DyadicIndex, KernelParams};
use crate::quad;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrilinearError {
    #[error("cutoff extrapolation diverged (level differences {0:e}, {1:e})")]
    Divergence(f64, f64),
    #[error("non-finite quadrature result")]
    NonFinite,
    #[error("invalid quadrature spec: {0}")]
    Spec(String),
    #[error("insufficient dyadic range: {0} usable levels, need 4")]
    Range(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Sigma,
    Carleman,
    Dual,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Self::Sigma, Self::Carleman, Self::Dual];

    fn stream(self) -> u64 {
        match self {
            Self::Sigma => 1,
            Self::Carleman => 2,
            Self::Dual => 3,
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = TrilinearError;
    fn from_str(s: &str) -> Result<Self, TrilinearError> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "carleman" => Ok(Self::Carleman),
            "dual" => Ok(Self::Dual),
            o => Err(TrilinearError::Spec(format!("unknown representation `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Product,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    pub backend: Backend,
    /// Angular cutoff levels for the Monte-Carlo backend, decreasing.
    pub cutoffs: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian proposals for the two velocity
    /// variables (Monte Carlo) and the scale of the Gauss-Hermite rules
    /// (product).
    pub proposal_scale: f64,
    pub hermite_nodes: usize,
    /// Gauss-Legendre nodes in the substituted angle (full range) or per
    /// smooth piece of a dyadic band.
    pub theta_nodes: usize,
    /// Azimuthal trapezoid nodes (even).
    pub phi_nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            backend: Backend::MonteCarlo,
            cutoffs: vec![1e-2, 5e-3, 2.5e-3],
            samples: 200_000,
            seed: 1,
            proposal_scale: 1.0,
            hermite_nodes: 6,
            theta_nodes: 24,
            phi_nodes: 8,
        }
    }
}

impl QuadratureSpec {
    pub fn product() -> Self {
        Self {
            backend: Backend::Product,
            ..Self::default()
        }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrilinearError> {
        let bad = |m: &str| Err(TrilinearError::Spec(m.to_string()));
        if self.cutoffs.len() < 2 || self.cutoffs.iter().any(|&e| !(e > 0.0 && e < PI / 4.0)) {
            return bad("need at least two cutoffs in (0, pi/4)");
        }
        if self.cutoffs.windows(2).any(|w| w[1] >= w[0]) {
            return bad("cutoffs must decrease");
        }
        if self.samples == 0 || self.hermite_nodes == 0 || self.theta_nodes == 0 {
            return bad("node and sample counts must be positive");
        }
        if self.phi_nodes == 0 || self.phi_nodes % 2 == 1 {
            return bad("azimuthal node count must be even and positive");
        }
        if !(self.proposal_scale > 0.0) {
            return bad("proposal scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrilinearReport {
    pub value: f64,
    pub error_estimate: f64,
    pub backend: Backend,
    pub representation: Representation,
    pub seed: u64,
}

/// Which part of an integrand to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Gain,
    Loss,
    Both,
}

impl Part {
    #[inline]
    fn pick(self, gain: f64, loss: f64) -> f64 {
        match self {
            Part::Gain => gain,
            Part::Loss => loss,
            Part::Both => gain - loss,
        }
    }
}

/// Integrand of one representation for a bank of `f`s sharing `g`, `h`.
struct Integrand<'a> {
    rep: Representation,
    params: &'a KernelParams,
    g: &'a dyn VelocityField,
    h: &'a dyn VelocityField,
    fs: &'a [&'a dyn VelocityField],
    part: Part,
    band: Option<DyadicIndex>,
}

impl Integrand<'_> {
    /// Adds `weight * F(x, y, theta, phi)` to `out` (one entry per `f`).
    #[inline]
    fn accumulate(&self, x: Vec3, y: Vec3, theta: f64, phi: f64, weight: f64, out: &mut [f64]) {
        let d = sub(x, y);
        let r = norm(d);
        if r == 0.0 {
            return;
        }
        let half = 0.5 * theta;
        match self.rep {
            Representation::Sigma => {
                let chi = match self.band {
                    Some(j) => j.chi(r * half.sin()),
                    None => 1.0,
                };
                if chi == 0.0 {
                    return;
                }
                let frame = geometry::CollisionFrame {
                    v: x,
                    v_star: y,
                    k: geometry::scale(1.0 / r, d),
                    rel_speed: r,
                };
                let sigma = frame.sigma(theta, phi);
                let (vp, vsp) = geometry::post_collision_unchecked(x, y, sigma);
                let ms = sqrt_mu(y);
                let gain = if self.part != Part::Loss { self.g.eval(vsp) * self.h.eval(vp) } else { 0.0 };
                let loss = if self.part != Part::Gain { self.g.eval(y) * self.h.eval(x) } else { 0.0 };
                let common = weight * chi * self.params.phi_kinetic(r) * ms * self.part.pick(gain, loss);
                if common == 0.0 {
                    return;
                }
                for (o, f) in out.iter_mut().zip(self.fs) {
                    *o += common * f.eval(x);
                }
            }
            Representation::Carleman | Representation::Dual => {
                // x = v', y = v_*; v on the plane through v' normal to v' - v_*
                let t = half.tan();
                let dist = r * t;
                let chi = match self.band {
                    Some(j) => j.chi(dist),
                    None => 1.0,
                };
                if chi == 0.0 {
                    return;
                }
                let n = geometry::scale(1.0 / r, d);
                let (e1, e2) = geometry::orthonormal_complement(n);
                let (sp, cp) = phi.sin_cos();
                let v = [
                    x[0] + dist * (cp * e1[0] + sp * e2[0]),
                    x[1] + dist * (cp * e1[1] + sp * e2[1]),
                    x[2] + dist * (cp * e1[2] + sp * e2[2]),
                ];
                let c = half.cos();
                let rho = r / c;
                let vsp = [v[0] + y[0] - x[0], v[1] + y[1] - x[1], v[2] + y[2] - x[2]];
                let w = weight * chi / (c * c * c);
                let gy = self.g.eval(y);
                if gy == 0.0 {
                    return;
                }
                if self.rep == Representation::Carleman {
                    let phi_rho = self.params.phi_kinetic(rho);
                    let hv = self.h.eval(v);
                    let (mg, ml) = (sqrt_mu(vsp), sqrt_mu(y));
                    for (o, f) in out.iter_mut().zip(self.fs) {
                        let gain = if self.part != Part::Loss { mg * f.eval(x) } else { 0.0 };
                        let loss = if self.part != Part::Gain { ml * f.eval(v) } else { 0.0 };
                        *o += w * phi_rho * gy * hv * self.part.pick(gain, loss);
                    }
                } else {
                    let gain = if self.part != Part::Loss {
                        self.params.phi_kinetic(rho) * sqrt_mu(vsp) * self.h.eval(v)
                    } else {
                        0.0
                    };
                    let loss = if self.part != Part::Gain {
                        self.params.phi_kinetic(r) * c * c * c * sqrt_mu(y) * self.h.eval(x)
                    } else {
                        0.0
                    };
                    let common = w * gy * self.part.pick(gain, loss);
                    for (o, f) in out.iter_mut().zip(self.fs) {
                        *o += common * f.eval(x);
                    }
                }
            }
        }
    }
}

/// Sampler for `theta ~ theta^{-2s}` on `[eps, pi/2]`; returns the angle and
/// the weight `Z / theta` for `int theta^{-1-2s} d theta`.
struct ThetaSampler {
    a: f64,
    lo: f64,
    span: f64,
    z: f64,
}

impl ThetaSampler {
    fn new(s: f64, eps: f64) -> Self {
        let a = 1.0 - 2.0 * s;
        if a.abs() < 1e-12 {
            let span = (FRAC_PI_2 / eps).ln();
            Self { a: 0.0, lo: eps, span, z: span }
        } else {
            let lo = eps.powf(a);
            let span = FRAC_PI_2.powf(a) - lo;
            Self { a, lo, span, z: span / a }
        }
    }

    #[inline]
    fn sample(&self, u: f64) -> (f64, f64) {
        let theta = if self.a == 0.0 {
            self.lo * (u * self.span).exp()
        } else {
            (self.lo + u * self.span).powf(1.0 / self.a)
        };
        (theta, self.z / theta)
    }
}

/// Per-output statistics of the nested-cutoff estimator.
#[derive(Debug, Clone)]
struct LevelStats {
    value: f64,
    stderr: f64,
    residual: f64,
    level_means: Vec<f64>,
    diff_stderr: Vec<f64>,
}

/// Richardson weights `c_l` with `E_0 = sum c_l E(eps_l)` for the model
/// `E(eps) = E_0 + C eps^q` (least squares over the levels).
fn richardson_weights(cutoffs: &[f64], q: f64) -> Vec<f64> {
    let x: Vec<f64> = cutoffs.iter().map(|e| e.powf(q)).collect();
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let det = n * sxx - sx * sx;
    x.iter().map(|xi| (sxx - sx * xi) / det).collect()
}

fn mc_engine(integrand: &Integrand, quad: &QuadratureSpec, stream: u64) -> Result<Vec<LevelStats>, TrilinearError> {
    quad.validate()?;
    let dim = integrand.fs.len();
    let nl = quad.cutoffs.len();
    let eps_min = *quad.cutoffs.last().unwrap();
    let sampler = ThetaSampler::new(integrand.params.s, eps_min);
    let q = 2.0 - 2.0 * integrand.params.s;
    let coef = richardson_weights(&quad.cutoffs, q);
    let sd = quad.proposal_scale;
    let norm_c = (TAU * sd * sd).powf(1.5);
    const CHUNK: usize = 4096;
    // layout per output: [sum X_l (nl), sum X_l X_m (nl*nl)]
    let stride = nl + nl * nl;
    let n = quad.samples;
    let sums = quad::det_sum_vec(n.div_ceil(CHUNK), 1, dim * stride, |c, acc| {
        let mut rng = quad::rng_for(quad.seed, stream, c as u64);
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut vals = vec![0.0; dim];
        for _ in lo..hi {
            let mut draw = || -> Vec3 {
                [
                    sd * rng.sample::<f64, _>(StandardNormal),
                    sd * rng.sample::<f64, _>(StandardNormal),
                    sd * rng.sample::<f64, _>(StandardNormal),
                ]
            };
            let x = draw();
            let y = draw();
            let (theta, wt) = sampler.sample(rng.gen::<f64>());
            let phi = TAU * rng.gen::<f64>();
            let px = (-0.5 * geometry::norm2(x) / (sd * sd)).exp() / norm_c;
            let py = (-0.5 * geometry::norm2(y) / (sd * sd)).exp() / norm_c;
            // antithetic azimuths; 2 pi / 2 for the average
            let w = wt * PI / (px * py);
            vals.iter_mut().for_each(|v| *v = 0.0);
            integrand.accumulate(x, y, theta, phi, w, &mut vals);
            integrand.accumulate(x, y, theta, phi + PI, w, &mut vals);
            // samples with theta below eps_l contribute 0 to level l
            for (k, &val) in vals.iter().enumerate() {
                let base = k * stride;
                for l in 0..nl {
                    if theta < quad.cutoffs[l] {
                        continue;
                    }
                    acc[base + l] += val;
                    for m in 0..nl {
                        if theta >= quad.cutoffs[m] {
                            acc[base + nl + l * nl + m] += val * val;
                        }
                    }
                }
            }
        }
    });
    let nf = n as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim {
        let base = k * stride;
        let mean: Vec<f64> = (0..nl).map(|l| sums[base + l] / nf).collect();
        let cov = |l: usize, m: usize| sums[base + nl + l * nl + m] / nf - mean[l] * mean[m];
        let value: f64 = coef.iter().zip(&mean).map(|(c, m)| c * m).sum();
        let mut var = 0.0;
        for l in 0..nl {
            for m in 0..nl {
                var += coef[l] * coef[m] * cov(l, m);
            }
        }
        let stderr = (var.max(0.0) / nf).sqrt();
        // residual of the two-parameter fit
        let x: Vec<f64> = quad.cutoffs.iter().map(|e| e.powf(q)).collect();
        let slope_c = if nl > 1 {
            let mx = x.iter().sum::<f64>() / nl as f64;
            let my = mean.iter().sum::<f64>() / nl as f64;
            let sxy: f64 = x.iter().zip(&mean).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            sxy / sxx
        } else {
            0.0
        };
        let residual = x
            .iter()
            .zip(&mean)
            .map(|(xi, m)| (m - value - slope_c * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        let diff_stderr = (1..nl)
            .map(|l| ((cov(l, l) + cov(l - 1, l - 1) - 2.0 * cov(l, l - 1)).max(0.0) / nf).sqrt())
            .collect();
        if !value.is_finite() || !stderr.is_finite() {
            return Err(TrilinearError::NonFinite);
        }
        out.push(LevelStats {
            value,
            stderr,
            residual,
            level_means: mean,
            diff_stderr,
        });
    }
    for st in &out {
        check_convergence(st)?;
    }
    Ok(out)
}

/// The level increments must shrink (up to noise) as the cutoff is halved.
fn check_convergence(st: &LevelStats) -> Result<(), TrilinearError> {
    let m = &st.level_means;
    for l in 2..m.len() {
        let d1 = m[l - 1] - m[l - 2];
        let d2 = m[l] - m[l - 1];
        let noise = 6.0 * (st.diff_stderr[l - 1] + st.diff_stderr[l - 2]);
        if d2.abs() > 2.0 * d1.abs() + noise + 1e-14 * m[l].abs() {
            return Err(TrilinearError::Divergence(d1, d2));
        }
    }
    Ok(())
}

fn stats_to_report(st: &LevelStats, rep: Representation, quad: &QuadratureSpec) -> TrilinearReport {
    TrilinearReport {
        value: st.value,
        error_estimate: (st.stderr * st.stderr + st.residual * st.residual).sqrt(),
        backend: Backend::MonteCarlo,
        representation: rep,
        seed: quad.seed,
    }
}

/// Angular rule for the product backend: nodes and weights for
/// `int theta^{-1-2s} d theta`, either over `(0, pi/2]` or over the support
/// of `chi_j` at relative speed `r` (for sigma variables) / plane scale
/// `r` (Carleman variables).
fn theta_rule(s: f64, n: usize, band: Option<(DyadicIndex, f64, bool)>) -> Vec<(f64, f64)> {
    match band {
        None => {
            // theta = (pi/2) u^{1/(2-2s)}
            let p = 1.0 / (2.0 - 2.0 * s);
            quad::gauss_legendre_on(n, 0.0, 1.0)
                .into_iter()
                .map(|(u, w)| {
                    let th = FRAC_PI_2 * u.powf(p);
                    let dth = FRAC_PI_2 * p * u.powf(p - 1.0);
                    (th, w * dth * th.powf(-1.0 - 2.0 * s))
                })
                .collect()
        }
        Some((j, r, carleman)) => {
            // breakpoints of chi_j(r sin(theta/2)) or chi_j(r tan(theta/2))
            let mut br: Vec<f64> = j
                .knots()
                .iter()
                .filter_map(|k| {
                    let x = k / r;
                    let th = if carleman { 2.0 * x.atan() } else if x < 1.0 { 2.0 * x.asin() } else { f64::INFINITY };
                    (th < FRAC_PI_2).then_some(th)
                })
                .collect();
            if br.is_empty() {
                return Vec::new();
            }
            br.sort_by(|a, b| a.total_cmp(b));
            if br.len() < 4 {
                br.push(FRAC_PI_2);
            }
            let mut out = Vec::new();
            for w in br.windows(2) {
                for (tau, wt) in quad::gauss_legendre_on(n, w[0].ln(), w[1].ln()) {
                    let th = tau.exp();
                    out.push((th, wt * th.powf(-2.0 * s)));
                }
            }
            out
        }
    }
}

fn product_engine(integrand: &Integrand, quad: &QuadratureSpec) -> Result<Vec<f64>, TrilinearError> {
    quad.validate()?;
    let dim = integrand.fs.len();
    let nodes = quad::hermite_cube(quad.hermite_nodes, [0.0; 3], quad.proposal_scale);
    let nn = nodes.len();
    let s = integrand.params.s;
    let carleman = integrand.rep != Representation::Sigma;
    let full_rule = theta_rule(s, quad.theta_nodes, None);
    let np = quad.phi_nodes;
    let dphi = TAU / np as f64;
    let band_n = (quad.theta_nodes / 3).max(6);
    let sums = quad::det_sum_vec(nn, 1, dim, |i, acc| {
        let (x, wx) = nodes[i];
        for &(y, wy) in &nodes {
            let r = norm(sub(x, y));
            if r == 0.0 {
                continue;
            }
            let band_rule;
            let rule = match integrand.band {
                None => &full_rule,
                Some(j) => {
                    band_rule = theta_rule(s, band_n, Some((j, r, carleman)));
                    &band_rule
                }
            };
            for &(th, wth) in rule {
                for m in 0..np {
                    integrand.accumulate(x, y, th, m as f64 * dphi, wx * wy * wth * dphi, acc);
                }
            }
        }
    });
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(TrilinearError::NonFinite);
    }
    Ok(sums)
}

/// `<Gamma(g,h), f_k>` for a bank of `f`s in one representation.
pub fn gamma_multi(
    rep: Representation,
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    fs: &[&dyn VelocityField],
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<Vec<TrilinearReport>, TrilinearError> {
    let integrand = Integrand {
        rep,
        params,
        g,
        h,
        fs,
        part: Part::Both,
        band: None,
    };
    match quad.backend {
        Backend::MonteCarlo => Ok(mc_engine(&integrand, quad, rep.stream())?
            .iter()
            .map(|st| stats_to_report(st, rep, quad))
            .collect()),
        Backend::Product => {
            let vals = product_engine(&integrand, quad)?;
            // a coarser angular rule gives the error indicator
            let coarse_q = QuadratureSpec {
                theta_nodes: (quad.theta_nodes / 2).max(2),
                ..quad.clone()
            };
            let coarse = product_engine(&integrand, &coarse_q)?;
            Ok(vals
                .iter()
                .zip(&coarse)
                .map(|(v, c)| TrilinearReport {
                    value: *v,
                    error_estimate: (v - c).abs(),
                    backend: Backend::Product,
                    representation: rep,
                    seed: quad.seed,
                })
                .collect())
        }
    }
}

pub fn gamma(
    rep: Representation,
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<TrilinearReport, TrilinearError> {
    Ok(gamma_multi(rep, g, h, &[f], params, quad)?.remove(0))
}

pub fn gamma_sigma(
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<TrilinearReport, TrilinearError> {
    gamma(Representation::Sigma, g, h, f, params, quad)
}

pub fn gamma_carleman(
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<TrilinearReport, TrilinearError> {
    gamma(Representation::Carleman, g, h, f, params, quad)
}

pub fn gamma_dual(
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<TrilinearReport, TrilinearError> {
    gamma(Representation::Dual, g, h, f, params, quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceKind {
    /// Gain piece in sigma variables.
    Plus,
    /// Gain piece in Carleman variables (same value as `Plus`).
    PlusCarleman,
    /// Loss piece in sigma variables.
    Minus,
    /// Loss piece of the dual representation.
    Star,
}

fn piece_integrand<'a>(
    kind: PieceKind,
    j: DyadicIndex,
    g: &'a dyn VelocityField,
    h: &'a dyn VelocityField,
    fs: &'a [&'a dyn VelocityField],
    params: &'a KernelParams,
) -> Integrand<'a> {
    let (rep, part) = match kind {
        PieceKind::Plus => (Representation::Sigma, Part::Gain),
        PieceKind::PlusCarleman => (Representation::Carleman, Part::Gain),
        PieceKind::Minus => (Representation::Sigma, Part::Loss),
        PieceKind::Star => (Representation::Dual, Part::Loss),
    };
    Integrand {
        rep,
        params,
        g,
        h,
        fs,
        part,
        band: Some(j),
    }
}

/// `T^j_+`, `T^j_-` or `T^j_*` with the deterministic product rule.
pub fn t_piece(
    kind: PieceKind,
    j: DyadicIndex,
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<TrilinearReport, TrilinearError> {
    let fs = [f];
    let it = piece_integrand(kind, j, g, h, &fs, params);
    let v = product_engine(&it, quad)?[0];
    let coarse = product_engine(
        &it,
        &QuadratureSpec {
            theta_nodes: (quad.theta_nodes * 2 / 3).max(3),
            ..quad.clone()
        },
    )?[0];
    Ok(TrilinearReport {
        value: v,
        error_estimate: (v - coarse).abs(),
        backend: Backend::Product,
        representation: it.rep,
        seed: quad.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// `T^j_+ - T^j_-` (differences on `f`).
    Minus,
    /// `T^j_+ - T^j_*` (differences on `h`).
    Star,
}

/// `T^j_+ - T^j_-` or `T^j_+ - T^j_*`, evaluated as a single integral so
/// that the cancellation is resolved node by node.
pub fn t_difference(
    split: Split,
    j: DyadicIndex,
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<f64, TrilinearError> {
    let fs = [f];
    let rep = match split {
        Split::Minus => Representation::Sigma,
        Split::Star => Representation::Dual,
    };
    let it = Integrand {
        rep,
        params,
        g,
        h,
        fs: &fs,
        part: Part::Both,
        band: Some(j),
    };
    Ok(product_engine(&it, quad)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancellationReport {
    pub split: Split,
    pub levels: Vec<i32>,
    pub values: Vec<f64>,
    pub slope: f64,
    /// `2s - 1`, or `2s - 2` when `s >= 1/2`.
    pub predicted: f64,
}

/// Empirical decay of `|T^j_+ - T^j_-|` (or `_*`) in `j`.
pub fn cancellation_audit(
    split: Split,
    levels: std::ops::RangeInclusive<i32>,
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    f: &dyn VelocityField,
    params: &KernelParams,
    quad: &QuadratureSpec,
) -> Result<CancellationReport, TrilinearError> {
    let levels: Vec<i32> = levels.collect();
    if levels.len() < 4 {
        return Err(TrilinearError::Range(levels.len()));
    }
    let mut values = Vec::with_capacity(levels.len());
    for &j in &levels {
        values.push(t_difference(split, DyadicIndex::new(j), g, h, f, params, quad)?);
    }
    let usable: Vec<(f64, f64)> = levels
        .iter()
        .zip(&values)
        .filter(|(_, v)| v.abs() > 0.0)
        .map(|(j, v)| (*j as f64, v.abs().log2()))
        .collect();
    if usable.len() < 4 {
        return Err(TrilinearError::Range(usable.len()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
    let s = params.s;
    Ok(CancellationReport {
        split,
        levels,
        values,
        slope: quad::slope(&x, &y),
        predicted: if s >= 0.5 { 2.0 * s - 2.0 } else { 2.0 * s - 1.0 },
    })
}

/// Collision invariants `M, v_i M, |v|^2 M` as fields.
pub fn collision_invariants() -> Vec<Box<dyn VelocityField + Send>> {
    use crate::fields::FnField;
    vec![
        Box::new(FnField(sqrt_mu)),
        Box::new(FnField(|v: Vec3| v[0] * sqrt_mu(v))),
        Box::new(FnField(|v: Vec3| v[1] * sqrt_mu(v))),
        Box::new(FnField(|v: Vec3| v[2] * sqrt_mu(v))),
        Box::new(FnField(|v: Vec3| geometry::norm2(v) * sqrt_mu(v))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FnField, TestFunction, TestFunctionSpec, Zero};

    fn tf(seed: u64) -> TestFunction {
        TestFunction::new(TestFunctionSpec::random_gaussian_poly(seed)).unwrap()
    }

    #[test]
    fn richardson_weights_reproduce_model() {
        let c = richardson_weights(&[1e-2, 5e-3, 2.5e-3], 1.5);
        let e: Vec<f64> = [1e-2f64, 5e-3, 2.5e-3].iter().map(|x| 3.0 + 7.0 * x.powf(1.5)).collect();
        let v: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn maxwellian_pair_annihilates() {
        let k = KernelParams::maxwell_molecules();
        let m = FnField(sqrt_mu);
        let f = tf(4);
        let q = QuadratureSpec::monte_carlo(20_000, 3);
        for rep in Representation::ALL {
            let r = gamma(rep, &m, &m, &f, &k, &q).unwrap();
            assert!(r.value.abs() <= 3.0 * r.error_estimate + 1e-12, "{rep:?} {r:?}");
        }
        let r = gamma_dual(&f, &Zero, &f, &k, &q).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn product_and_monte_carlo_agree_on_gaussians() {
        let k = KernelParams::maxwell_molecules();
        let gs = |c: Vec3| TestFunction::new(TestFunctionSpec::gaussian(c, 1.0)).unwrap();
        let (g, h, f) = (gs([0.3, 0.0, 0.0]), gs([0.0, -0.2, 0.1]), gs([0.0, 0.0, 0.3]));
        let p = gamma_sigma(&g, &h, &f, &k, &QuadratureSpec::product()).unwrap();
        let m = gamma_sigma(&g, &h, &f, &k, &QuadratureSpec::monte_carlo(100_000, 9)).unwrap();
        assert!((p.value - m.value).abs() <= 3.0 * (m.error_estimate + p.error_estimate) + 1e-3 * p.value.abs(), "{p:?} {m:?}");
    }

    #[test]
    fn linear_in_f() {
        let k = KernelParams::maxwell_molecules();
        let (g, h, f1, f2) = (tf(5), tf(6), tf(7), tf(8));
        let comb = FnField(|v: Vec3| 2.0 * f1.eval(v) - 0.5 * f2.eval(v));
        let q = QuadratureSpec::monte_carlo(4096, 1);
        for rep in Representation::ALL {
            let r = gamma_multi(rep, &g, &h, &[&f1, &f2, &comb], &k, &q).unwrap();
            let lin = 2.0 * r[0].value - 0.5 * r[1].value;
            assert!((r[2].value - lin).abs() <= 1e-10 * (r[0].value.abs() + r[1].value.abs()));
        }
    }

    #[test]
    fn telescoping_minus_split() {
        let k = KernelParams::maxwell_molecules();
        let (g, h, f) = (tf(11), tf(12), tf(13));
        let q = QuadratureSpec {
            hermite_nodes: 5,
            ..QuadratureSpec::product()
        };
        let full = gamma_sigma(&g, &h, &f, &k, &q).unwrap().value;
        let sum: f64 = (-4..=16)
            .map(|j| t_difference(Split::Minus, DyadicIndex::new(j), &g, &h, &f, &k, &q).unwrap())
            .sum();
        assert!((sum - full).abs() < 2e-3 * full.abs().max(1e-3), "sum {sum} full {full}");
        let sum_star: f64 = (-4..=16)
            .map(|j| t_difference(Split::Star, DyadicIndex::new(j), &g, &h, &f, &k, &q).unwrap())
            .sum();
        let dual = gamma_dual(&g, &h, &f, &k, &q).unwrap().value;
        assert!((sum_star - dual).abs() < 2e-3 * dual.abs().max(1e-3), "sum {sum_star} dual {dual}");
    }

    #[test]
    fn gain_piece_in_both_variable_sets() {
        let k = KernelParams::maxwell_molecules();
        let (g, h, f) = (tf(21), tf(22), tf(23));
        let q = QuadratureSpec {
            hermite_nodes: 6,
            ..QuadratureSpec::product()
        };
        let j = DyadicIndex::new(1);
        let a = t_piece(PieceKind::Plus, j, &g, &h, &f, &k, &q).unwrap();
        let b = t_piece(PieceKind::PlusCarleman, j, &g, &h, &f, &k, &q).unwrap();
        assert!((a.value - b.value).abs() < 2e-2 * a.value.abs(), "{a:?} {b:?}");
    }

    #[test]
    fn minus_piece_scaling() {
        let k = KernelParams::maxwell_molecules();
        let g = TestFunction::new(TestFunctionSpec::gaussian([0.0; 3], 2.0)).unwrap();
        let q = QuadratureSpec {
            hermite_nodes: 5,
            ..QuadratureSpec::product()
        };
        let (x, y): (Vec<f64>, Vec<f64>) = (2..=7)
            .map(|j| {
                let v = t_piece(PieceKind::Minus, DyadicIndex::new(j), &g, &g, &g, &k, &q).unwrap().value;
                (j as f64, v.abs().log2())
            })
            .unzip();
        let sl = quad::slope(&x, &y);
        assert!((sl - 2.0 * k.s).abs() < 0.15, "{sl}");
    }

    #[test]
    fn cancellation_slopes_for_smooth_inputs() {
        let gs = |c: Vec3| TestFunction::new(TestFunctionSpec::gaussian(c, 1.0)).unwrap();
        let (g, h, f) = (gs([0.3, 0.0, 0.0]), gs([0.0, -0.2, 0.1]), gs([0.0, 0.0, 0.3]));
        let k = KernelParams::new(0.0, 0.25).unwrap();
        let r = cancellation_audit(Split::Minus, 1..=6, &g, &h, &f, &k, &QuadratureSpec::product()).unwrap();
        assert!(r.slope <= r.predicted + 0.2, "{r:?}");
        let k = KernelParams::new(0.0, 0.75).unwrap();
        let r = cancellation_audit(Split::Star, 1..=6, &g, &h, &f, &k, &QuadratureSpec::product()).unwrap();
        assert!(r.slope <= r.predicted + 0.3, "{r:?}");
        assert!(cancellation_audit(Split::Star, 1..=2, &g, &h, &f, &k, &QuadratureSpec::product()).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut q = QuadratureSpec::default();
        q.phi_nodes = 3;
        assert!(q.validate().is_err());
        q = QuadratureSpec::default();
        q.cutoffs = vec![1e-2, 2e-2];
        assert!(q.validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]

        #[test]
        fn linear_in_g_and_h(a in -2.0f64..2.0, b in -2.0f64..2.0, s in 0u64..50) {
            let k = KernelParams::maxwell_molecules();
            let (g1, g2, h, f) = (tf(s), tf(s + 100), tf(s + 200), tf(s + 300));
            let q = QuadratureSpec::monte_carlo(2048, s);
            let comb = FnField(|v: Vec3| a * g1.eval(v) + b * g2.eval(v));
            for rep in Representation::ALL {
                let r1 = gamma(rep, &g1, &h, &f, &k, &q).unwrap().value;
                let r2 = gamma(rep, &g2, &h, &f, &k, &q).unwrap().value;
                let lin = gamma(rep, &comb, &h, &f, &k, &q).unwrap().value;
                let tol = 1e-10 * (a.abs() * r1.abs() + b.abs() * r2.abs()).max(1e-300);
                proptest::prop_assert!((lin - a * r1 - b * r2).abs() <= tol, "{:?} g: {} vs {}", rep, lin, a * r1 + b * r2);
                let r1 = gamma(rep, &h, &g1, &f, &k, &q).unwrap().value;
                let r2 = gamma(rep, &h, &g2, &f, &k, &q).unwrap().value;
                let lin = gamma(rep, &h, &comb, &f, &k, &q).unwrap().value;
                let tol = 1e-10 * (a.abs() * r1.abs() + b.abs() * r2.abs()).max(1e-300);
                proptest::prop_assert!((lin - a * r1 - b * r2).abs() <= tol, "{:?} h: {} vs {}", rep, lin, a * r1 + b * r2);
            }
        }
    }
}
