//! The anisotropic norm `N^{s,gamma}`, the collision semi-norm `|.|_B` by
//! two routes, `(eta, delta)` norms, the one-dimensional `Psi` integral,
//! Fourier redistribution, a patchwise Sobolev characterisation and ratio
//! audits of the main estimates.

use crate::dynamics::{self, NuTable};
use crate::fields::{mu, sqrt_mu, GridFunction, TestFunction, VelocityField, VelocityGrid};
use crate::geometry::{self, bracket, dot, norm, norm2, sub, Vec3};
use crate::kernel::KernelParams;
use crate::quad;
use crate::trilinear::{self, QuadratureSpec};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NormError {
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Field(#[from] crate::fields::FieldError),
    #[error(transparent)]
    Trilinear(#[from] trilinear::TrilinearError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub l2_part: f64,
    pub derivative_part: f64,
    pub total: f64,
    /// Fraction of lattice pairs with `|v - v'| <= 1` that also satisfy
    /// `|v^ - v'^| <= 1`.
    pub pair_fraction: f64,
}

/// `int_{S^2} omega omega^T w(omega) rho(omega)^{2-2s} / (2-2s) d omega`
/// where `rho` is the distance from the centre of a cube of side `h` to its
/// boundary along `omega`, integrated in a frame whose third axis is `axis`
/// over `cos(theta) in [c_lo, c_hi]`.
fn cell_moment(h: f64, s: f64, axis: Vec3, c_range: (f64, f64), n_polar: usize, n_az: usize, w: impl Fn(f64) -> f64) -> [[f64; 3]; 3] {
    let (e1, e2) = geometry::orthonormal_complement(axis);
    let dphi = TAU / n_az as f64;
    let q = 2.0 - 2.0 * s;
    let mut m = [[0.0; 3]; 3];
    for (ct, wt) in quad::gauss_legendre_on(n_polar, c_range.0, c_range.1) {
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let wc = w(ct);
        for k in 0..n_az {
            let (sp, cp) = ((k as f64 + 0.5) * dphi).sin_cos();
            let om = [
                ct * axis[0] + st * (cp * e1[0] + sp * e2[0]),
                ct * axis[1] + st * (cp * e1[1] + sp * e2[1]),
                ct * axis[2] + st * (cp * e1[2] + sp * e2[2]),
            ];
            let rho = 0.5 * h / om.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let c = wt * dphi * wc * rho.powf(q) / q;
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] += c * om[a] * om[b];
                }
            }
        }
    }
    m
}

/// Evaluator of `|f|_{N^{s,gamma}}` on a fixed uniform grid.
///
/// Lattice pairs with `|v^ - v'^| <= 1` are summed directly; the cell
/// around each node is replaced by the local model
/// `(f' - f)^2 ~ (grad f . (v' - v))^2` with `|v^ - v'^|^2 ~ |w|^2 + (v.w)^2`,
/// integrated over the cube.
pub struct AnisotropicNorm {
    grid: Arc<VelocityGrid>,
    params: KernelParams,
    offsets: Vec<[i64; 3]>,
    /// Per-node cell moment, weighted by `<v>^{gamma+2s+1}` and the node weight.
    cell: Vec<[[f64; 3]; 3]>,
    half_weight: Vec<f64>,
}

impl AnisotropicNorm {
    pub fn new(grid: &Arc<VelocityGrid>, params: &KernelParams) -> Result<Self, NormError> {
        if grid.rule != crate::fields::Rule::Trapezoid {
            return Err(NormError::Invalid("the anisotropic norm needs a uniform grid".into()));
        }
        let h = grid.spacing();
        let m = (1.0 / h).floor() as i64;
        let mut offsets = Vec::new();
        for a in -m..=m {
            for b in -m..=m {
                for c in -m..=m {
                    let r2 = ((a * a + b * b + c * c) as f64) * h * h;
                    if (a, b, c) != (0, 0, 0) && r2 <= 1.0 {
                        offsets.push([a, b, c]);
                    }
                }
            }
        }
        let s = params.s;
        let e = 0.5 * (3.0 + 2.0 * s);
        let beta = params.order() + 1.0;
        let cell = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let v = grid.node(i);
                let r = norm(v);
                let axis = if r > 0.0 { geometry::scale(1.0 / r, v) } else { [0.0, 0.0, 1.0] };
                let mut mm = cell_moment(h, s, axis, (-1.0, 1.0), 48, 48, |c| (1.0 + r * r * c * c).powf(-e));
                let f = grid.weight(i) * bracket(v).powf(beta);
                mm.iter_mut().for_each(|row| row.iter_mut().for_each(|x| *x *= f));
                mm
            })
            .collect();
        let half_weight = (0..grid.len()).map(|i| bracket(grid.node(i)).powf(0.5 * beta)).collect();
        Ok(Self {
            grid: grid.clone(),
            params: *params,
            offsets,
            cell,
            half_weight,
        })
    }

    pub fn grid(&self) -> &Arc<VelocityGrid> {
        &self.grid
    }

    pub fn eval(&self, f: &GridFunction) -> Result<NormReport, NormError> {
        if !f.grid.same_as(&self.grid) {
            return Err(NormError::Invalid("field lives on a different grid".into()));
        }
        let g = &self.grid;
        let n = g.n as i64;
        let h = g.spacing();
        let e = 0.5 * (3.0 + 2.0 * self.params.s);
        let spline = f.spline()?;
        let sums = quad::det_sum_vec(g.len(), 256, 3, |i, acc| {
            let (a, b, c) = g.unindex(i);
            let (a, b, c) = (a as i64, b as i64, c as i64);
            let v = g.node(i);
            let nv = norm2(v);
            let fi = f.values[i];
            let wi = g.weight(i) * self.half_weight[i];
            let mut pairs = 0.0;
            for o in &self.offsets {
                let (x, y, z) = (a + o[0], b + o[1], c + o[2]);
                if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
                    continue;
                }
                acc[2] += 1.0;
                let j = g.index(x as usize, y as usize, z as usize);
                let d = (norm2(g.node(j)) - nv) * 0.5;
                let d2 = ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64) * h * h + d * d;
                if d2 > 1.0 {
                    continue;
                }
                acc[1] += 1.0;
                let df = f.values[j] - fi;
                pairs += g.weight(j) * self.half_weight[j] * df * df * (-e * d2.ln()).exp();
            }
            let gr = spline.gradient(v);
            let m = &self.cell[i];
            let mut q = 0.0;
            for r in 0..3 {
                for s in 0..3 {
                    q += gr[r] * m[r][s] * gr[s];
                }
            }
            acc[0] += wi * pairs + q;
        });
        let l2 = f.weighted_l2(self.params.order());
        let d = sums[0].max(0.0).sqrt();
        Ok(NormReport {
            l2_part: l2,
            derivative_part: d,
            total: (l2 * l2 + d * d).sqrt(),
            pair_fraction: if sums[2] > 0.0 { sums[1] / sums[2] } else { 0.0 },
        })
    }
}

pub fn n_norm(f: &GridFunction, params: &KernelParams) -> Result<NormReport, NormError> {
    AnisotropicNorm::new(&f.grid, params)?.eval(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BRoute {
    /// `1/2 int int int B (f' - f)^2 M'_* M_*`
    Sigma,
    /// `int int K(v, v') (f' - f)^2`
    Carleman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeminormReport {
    pub value: f64,
    pub error_estimate: f64,
    pub route: BRoute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeminormSpec {
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian proposal for `v`.
    pub proposal_scale: f64,
}

impl Default for SeminormSpec {
    fn default() -> Self {
        Self {
            samples: 200_000,
            seed: 1,
            proposal_scale: 1.0,
        }
    }
}

struct Gauss3 {
    sd: f64,
    norm: f64,
}

impl Gauss3 {
    fn new(sd: f64) -> Self {
        Self {
            sd,
            norm: (TAU * sd * sd).powf(-1.5),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec3 {
        [
            self.sd * rng.sample::<f64, _>(StandardNormal),
            self.sd * rng.sample::<f64, _>(StandardNormal),
            self.sd * rng.sample::<f64, _>(StandardNormal),
        ]
    }

    fn pdf(&self, x: Vec3) -> f64 {
        self.norm * (-0.5 * norm2(x) / (self.sd * self.sd)).exp()
    }
}

/// Mean and standard error of per-chunk Monte Carlo sums.
fn mc_mean<F>(samples: usize, seed: u64, stream: u64, f: F) -> (f64, f64)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    const CHUNK: usize = 4096;
    let sums = quad::det_sum_vec(samples.div_ceil(CHUNK), 1, 2, |c, acc| {
        let mut rng = quad::rng_for(seed, stream, c as u64);
        let lo = c * CHUNK;
        for _ in lo..(lo + CHUNK).min(samples) {
            let x = f(&mut rng);
            acc[0] += x;
            acc[1] += x * x;
        }
    });
    let n = samples as f64;
    let m = sums[0] / n;
    let var = (sums[1] / n - m * m).max(0.0);
    (m, (var / n).sqrt())
}

/// `|f|_B^2` by Monte Carlo along either route.
pub fn b_seminorm(f: &dyn VelocityField, params: &KernelParams, route: BRoute, spec: &SeminormSpec) -> Result<SeminormReport, NormError> {
    if spec.samples == 0 || !(spec.proposal_scale > 0.0) {
        return Err(NormError::Invalid("samples and proposal scale must be positive".into()));
    }
    let s = params.s;
    let q = 2.0 - 2.0 * s;
    let pv = Gauss3::new(spec.proposal_scale);
    let (value, err) = match route {
        BRoute::Sigma => {
            // theta with density proportional to theta^{1-2s}
            let ang = FRAC_PI_2.powf(q) / q * PI;
            mc_mean(spec.samples, spec.seed, 11, |rng| {
                let v = pv.draw(rng);
                let vs = pv.draw(rng);
                let th = FRAC_PI_2 * rng.gen::<f64>().powf(1.0 / q);
                let ph = TAU * rng.gen::<f64>();
                let d = sub(v, vs);
                let r = norm(d);
                if r == 0.0 || th == 0.0 {
                    return 0.0;
                }
                let frame = geometry::CollisionFrame {
                    v,
                    v_star: vs,
                    k: geometry::scale(1.0 / r, d),
                    rel_speed: r,
                };
                let fv = f.eval(v);
                let mut acc = 0.0;
                for p in [ph, ph + PI] {
                    let (vp, vsp) = geometry::post_collision_unchecked(v, vs, frame.sigma(th, p));
                    let df = f.eval(vp) - fv;
                    acc += df * df * sqrt_mu(vsp);
                }
                // 1/2 * (2 pi / 2 antithetic) * theta^{-1-2s}/density
                0.5 * ang * acc * sqrt_mu(vs) * params.phi_kinetic(r) / (th * th) / (pv.pdf(v) * pv.pdf(vs))
            })
        }
        BRoute::Carleman => {
            let a_c = 0.5;
            let pd = Gauss3::new(1.0);
            mc_mean(spec.samples, spec.seed, 12, |rng| {
                let v = pv.draw(rng);
                let d = if rng.gen::<bool>() {
                    let a = a_c * rng.gen::<f64>().powf(1.0 / q);
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    let ph = TAU * rng.gen::<f64>();
                    let st = (1.0 - z * z).sqrt();
                    [a * st * ph.cos(), a * st * ph.sin(), a * z]
                } else {
                    pd.draw(rng)
                };
                let a = norm(d);
                if a == 0.0 {
                    return 0.0;
                }
                let q_small = if a < a_c { q * a.powf(1.0 - 2.0 * s) / (a_c.powf(q) * 2.0 * TAU * a * a) } else { 0.0 };
                let density = pv.pdf(v) * (0.5 * q_small + 0.5 * pd.pdf(d));
                let vp = geometry::add(v, d);
                let df = f.eval(vp) - f.eval(v);
                if df == 0.0 {
                    return 0.0;
                }
                // one plane point, Gaussian around the projection of -d/2
                let nrm = geometry::scale(1.0 / a, d);
                let (e1, e2) = geometry::orthonormal_complement(nrm);
                let c0 = geometry::scale(-0.5, d);
                let cp = geometry::axpy(c0, -dot(sub(c0, v), nrm), nrm);
                let (x, y): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let p = [cp[0] + x * e1[0] + y * e2[0], cp[1] + x * e1[1] + y * e2[1], cp[2] + x * e1[2] + y * e2[2]];
                let pdens = (-(x * x + y * y) / 2.0).exp() / TAU;
                let k = carleman_integrand(v, vp, p, params);
                k * df * df / (density * pdens)
            })
        }
    };
    if !value.is_finite() {
        return Err(NormError::Quadrature("non-finite semi-norm estimate".into()));
    }
    Ok(SeminormReport {
        value,
        error_estimate: err,
        route,
    })
}

/// Integrand of `K(v, v')` at the plane point `p` (`<v' - v, p - v> = 0`).
#[inline]
fn carleman_integrand(v: Vec3, vp: Vec3, p: Vec3, params: &KernelParams) -> f64 {
    let a = norm(sub(vp, v));
    let r = norm(sub(p, v));
    if r <= a {
        return 0.0;
    }
    let theta = 2.0 * (a / r).atan();
    let rho = (a * a + r * r).sqrt();
    let b = params.angular_density(theta) / theta.sin();
    let ms = sqrt_mu(geometry::add(p, sub(vp, v)));
    2.0 * ms * sqrt_mu(p) * params.phi_kinetic(rho) * b / (a * rho)
}

/// `K(v, v')` by polar quadrature on the plane through `v` orthogonal to
/// `v' - v`.
pub fn carleman_kernel(v: Vec3, vp: Vec3, params: &KernelParams, n_r: usize, n_phi: usize) -> Result<f64, NormError> {
    let d = sub(vp, v);
    let a = norm(d);
    if a == 0.0 {
        return Err(NormError::Invalid("K is singular on the diagonal".into()));
    }
    let plane = geometry::carleman_plane(v, vp).map_err(|e| NormError::Invalid(e.to_string()))?;
    let nrm = geometry::scale(1.0 / a, d);
    let c0 = geometry::scale(-0.5, d);
    let cp = geometry::axpy(c0, -dot(sub(c0, v), nrm), nrm);
    let hi = norm(sub(cp, v)) + 9.0;
    let dphi = TAU / n_phi as f64;
    let mut acc = quad::Kahan::default();
    // radial pieces [a, 2a], [2a, hi] resolve the grazing growth near r = a
    let mut cuts = vec![a, 2.0 * a];
    if hi > 2.0 * a {
        cuts.push(hi);
    }
    for w in cuts.windows(2) {
        for (r, wr) in quad::gauss_legendre_on(n_r, w[0], w[1]) {
            for m in 0..n_phi {
                let p = plane.point(r, (m as f64 + 0.5) * dphi);
                acc.add(wr * r * dphi * carleman_integrand(v, vp, p, params));
            }
        }
    }
    Ok(acc.sum())
}

/// Minimum and maximum of `K(v, v') |v - v'|^{3+2s} / <v'>^{gamma+2s+1}`
/// over random pairs with `|v - v'| <= 1` and `||v|^2 - |v'|^2| <= |v - v'|`.
pub fn kernel_lower_bound_audit(params: &KernelParams, pairs: usize, max_speed: f64, seed: u64) -> Result<(f64, f64), NormError> {
    let mut rng = quad::rng_for(seed, 13, 0);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut found = 0;
    while found < pairs {
        let v: Vec3 = [
            rng.gen_range(-max_speed..max_speed),
            rng.gen_range(-max_speed..max_speed),
            rng.gen_range(-max_speed..max_speed),
        ];
        let d: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let a = norm(d);
        let vp = geometry::add(v, d);
        if a > 1.0 || a < 1e-3 || (norm2(v) - norm2(vp)).abs() > a {
            continue;
        }
        found += 1;
        let k = carleman_kernel(v, vp, params, 32, 48)?;
        let ratio = k * a.powf(3.0 + 2.0 * params.s) / bracket(vp).powf(params.order() + 1.0);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

/// `<N f, f> = |f|_B^2 + int nu f^2`, with the semi-norm along the sigma
/// route; returns `(value, error_estimate)`.
pub fn norm_piece_form(f: &TestFunction, grid: &Arc<VelocityGrid>, params: &KernelParams, nu: &NuTable, spec: &SeminormSpec) -> Result<(f64, f64), NormError> {
    let b = b_seminorm(f, params, BRoute::Sigma, spec)?;
    let g = f.sample(grid);
    let w = GridFunction::from_fn(grid, |v| nu.nu(v));
    let m = quad::det_sum(grid.len(), 4096, |i| grid.weight(i) * w.values[i] * g.values[i] * g.values[i]);
    Ok((b.value + m, b.error_estimate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaDeltaSpec {
    pub eta: f64,
    pub delta: f64,
}

impl EtaDeltaSpec {
    pub fn new(eta: f64, delta: f64) -> Result<Self, NormError> {
        if !(eta > 0.0 && delta > 0.0 && eta.is_finite() && delta.is_finite()) {
            return Err(NormError::Invalid(format!("eta = {eta}, delta = {delta} must be positive")));
        }
        Ok(Self { eta, delta })
    }
}

/// `(int f^2 (eta <v>^{gamma+2s} + 1/delta))^{1/2}`
pub fn eta_delta_norm(f: &GridFunction, spec: &EtaDeltaSpec, params: &KernelParams) -> f64 {
    let a = f.weighted_l2(params.order());
    let b = f.l2();
    (spec.eta * a * a + b * b / spec.delta).sqrt()
}

/// Infimum over `(eta, delta)` of `|g|_{delta,eta} |h|_{eta,delta}`: a 13x13
/// logarithmic grid on `[1e-3, 1e3]^2` followed by a golden-section
/// refinement in `eta delta`, on which the product depends alone.
pub fn eta_delta_infimum(g: &GridFunction, h: &GridFunction, params: &KernelParams) -> (f64, EtaDeltaSpec) {
    let (ag, bg) = (g.weighted_l2(params.order()), g.l2());
    let (ah, bh) = (h.weighted_l2(params.order()), h.l2());
    let prod = |eta: f64, delta: f64| ((delta * ag * ag + bg * bg / eta) * (eta * ah * ah + bh * bh / delta)).sqrt();
    let mut best = (f64::INFINITY, 1.0, 1.0);
    for i in 0..13 {
        for j in 0..13 {
            let eta = 10f64.powf(-3.0 + 0.5 * i as f64);
            let delta = 10f64.powf(-3.0 + 0.5 * j as f64);
            let p = prod(eta, delta);
            if p < best.0 {
                best = (p, eta, delta);
            }
        }
    }
    // refine along t = eta delta with eta fixed
    let eta = best.1;
    let f = |lt: f64| prod(eta, lt.exp() / eta);
    let (mut lo, mut hi) = ((best.1 * best.2).ln() - 1.2, (best.1 * best.2).ln() + 1.2);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let m1 = hi - gr * (hi - lo);
        let m2 = lo + gr * (hi - lo);
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let lt = 0.5 * (lo + hi);
    let p = f(lt);
    if p < best.0 {
        best = (p, eta, lt.exp() / eta);
    }
    (best.0, EtaDeltaSpec { eta: best.1, delta: best.2 })
}

/// `Psi(lambda) = int_0^a |e^{2 pi i lambda t} - 1|^2 t^{-1-2s} dt`
pub fn psi(lambda: f64, s: f64, a: f64) -> Result<f64, NormError> {
    if !(lambda >= 0.0) || !(a > 0.0) || !(s > 0.0 && s < 1.0) {
        return Err(NormError::Invalid(format!("psi needs lambda >= 0, a > 0, s in (0,1); got {lambda}, {a}, {s}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let g = |t: f64| {
        let x = (PI * lambda * t).sin();
        4.0 * x * x * t.powf(-1.0 - 2.0 * s)
    };
    let t1 = a.min(0.5 / lambda);
    let t0 = t1 * 1e-6;
    // below t0 the integrand is (2 pi lambda)^2 t^{1-2s} to relative 1e-12
    let head = (TAU * lambda).powi(2) * t0.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s);
    let scale = (TAU * lambda).powi(2) * t1.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s);
    let (mid, err) = quad::adaptive_simpson(&|tau: f64| g(tau.exp()) * tau.exp(), t0.ln(), t1.ln(), 1e-13 * scale, 40);
    let mut tail = quad::Kahan::default();
    if a > t1 {
        let half = 0.5 / lambda;
        let pieces = ((a - t1) / half).ceil() as usize;
        for k in 0..pieces {
            let lo = t1 + k as f64 * half;
            let hi = (lo + half).min(a);
            for (t, w) in quad::gauss_legendre_on(16, lo, hi) {
                tail.add(w * g(t));
            }
        }
    }
    let v = head + mid + tail.sum();
    if !v.is_finite() {
        return Err(NormError::Quadrature("psi is not finite".into()));
    }
    if err > 1e-9 * v.abs() {
        return Err(NormError::Quadrature(format!("psi head error {err:.3e} for value {v:.3e}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionRow {
    pub direction: Vec3,
    pub xi_norm: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionReport {
    pub s: f64,
    pub epsilon: f64,
    pub n: usize,
    pub rows: Vec<RedistributionRow>,
    /// Smallest `C` with `lhs <= C (1 + rhs)` over the sweep.
    pub ratio_constant: f64,
    /// Smallest `C >= 0` with `lhs <= C + rhs` over the sweep.
    pub additive_constant: f64,
    /// Log-log slopes of the direction-averaged sides for `|xi| >= 4`.
    pub lhs_slope: f64,
    pub rhs_slope: f64,
}

pub const REDISTRIBUTION_DIRECTIONS: [Vec3; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0],
];
pub const REDISTRIBUTION_MAGNITUDES: [f64; 9] = [0.0, 0.5, 1.0, 2.0, 4.0, 4.756_828_460_010_884, 5.656_854_249_492_381, 6.727_171_322_029_716, 8.0];

/// Cells within this many spacings of the origin are sub-sampled.
const NEAR_CELLS: f64 = 6.0;
const SUB_NODES: usize = 6;

/// Both sides of `int K_1 |e^{2 pi i xi.u} - 1|^2 <= C + int K_2 |...|^2`
/// with `K_1 = |u|^{-3-2s} 1_{|u| <= 1}` and `K_2 = K_1 1_{|u_3| <= eps |u|}`,
/// by lattice sums on `[-1, 1)^3` with `n` points per axis; the cell at
/// the origin uses the quadratic expansion of the phase.
pub fn fourier_redistribution_check(s: f64, epsilon: f64, n: usize) -> Result<RedistributionReport, NormError> {
    if !n.is_power_of_two() || n < 4 {
        return Err(NormError::Invalid(format!("lattice size {n} must be a power of two")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) || !(s > 0.0 && s < 1.0) {
        return Err(NormError::Invalid("need s in (0,1) and eps in (0,1]".into()));
    }
    let h = 2.0 / n as f64;
    let cell = h * h * h;
    let mut pts: Vec<(Vec3, f64, bool)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let u = [(i as f64 - (n / 2) as f64) * h, (j as f64 - (n / 2) as f64) * h, (k as f64 - (n / 2) as f64) * h];
                let r = norm(u);
                if r == 0.0 || r > 1.0 {
                    continue;
                }
                if r > NEAR_CELLS * h {
                    pts.push((u, cell * r.powf(-3.0 - 2.0 * s), u[2].abs() <= epsilon * r));
                    continue;
                }
                // near the origin the cone is thin on the scale of a cell
                let m = SUB_NODES;
                let hs = h / m as f64;
                for a in 0..m {
                    for b in 0..m {
                        for c in 0..m {
                            let off = [a, b, c].map(|q| (q as f64 + 0.5) * hs - 0.5 * h);
                            let us = geometry::add(u, off);
                            let rs = norm(us);
                            pts.push((us, hs * hs * hs * rs.powf(-3.0 - 2.0 * s), us[2].abs() <= epsilon * rs));
                        }
                    }
                }
            }
        }
    }
    let m1 = cell_moment(h, s, [0.0, 0.0, 1.0], (-1.0, 1.0), 64, 64, |_| 1.0);
    let m2 = cell_moment(h, s, [0.0, 0.0, 1.0], (-epsilon, epsilon), 64, 64, |_| 1.0);
    let quad_form = |m: &[[f64; 3]; 3], xi: Vec3| {
        let mut q = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                q += xi[a] * m[a][b] * xi[b];
            }
        }
        4.0 * PI * PI * q
    };
    let mut rows = Vec::new();
    for dir in REDISTRIBUTION_DIRECTIONS {
        for &mag in &REDISTRIBUTION_MAGNITUDES {
            let xi = geometry::scale(mag, dir);
            let (l, r) = pts
                .par_chunks(4096)
                .map(|ch| {
                    let mut l = 0.0;
                    let mut r = 0.0;
                    for (u, k, band) in ch {
                        let x = 2.0 - 2.0 * (TAU * dot(xi, *u)).cos();
                        l += k * x;
                        if *band {
                            r += k * x;
                        }
                    }
                    (l, r)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            rows.push(RedistributionRow {
                direction: dir,
                xi_norm: mag,
                lhs: l + quad_form(&m1, xi),
                rhs: r + quad_form(&m2, xi),
            });
        }
    }
    let ratio_constant = rows.iter().map(|r| r.lhs / (1.0 + r.rhs)).fold(0.0, f64::max);
    let additive_constant = rows.iter().map(|r| r.lhs - r.rhs).fold(0.0, f64::max);
    let big: Vec<f64> = REDISTRIBUTION_MAGNITUDES.iter().copied().filter(|&m| m >= 4.0).collect();
    let avg = |m: f64, pick: fn(&RedistributionRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.xi_norm == m).map(pick).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let lx: Vec<f64> = big.iter().map(|m| m.ln()).collect();
    let ll: Vec<f64> = big.iter().map(|&m| avg(m, |r| r.lhs).ln()).collect();
    let lr: Vec<f64> = big.iter().map(|&m| avg(m, |r| r.rhs).ln()).collect();
    Ok(RedistributionReport {
        s,
        epsilon,
        n,
        lhs_slope: quad::slope(&lx, &ll),
        rhs_slope: quad::slope(&lx, &lr),
        rows,
        ratio_constant,
        additive_constant,
    })
}

/// Nearest point of the paraboloid to `c in R^4`, and its distance.
fn nearest_on_paraboloid(c: [f64; 4]) -> (Vec3, f64) {
    let p = [c[0], c[1], c[2]];
    let pn = norm(p);
    let dir = if pn > 0.0 { geometry::scale(1.0 / pn, p) } else { [1.0, 0.0, 0.0] };
    let g = |t: f64| (t - pn).powi(2) + (0.5 * t * t - c[3]).powi(2);
    let top = pn + (2.0 * c[3].abs()).sqrt() + 2.0;
    let steps = 400;
    let (mut bt, mut bg) = (0.0, g(0.0));
    for k in 1..=steps {
        let t = top * k as f64 / steps as f64;
        if g(t) < bg {
            bt = t;
            bg = g(t);
        }
    }
    let (mut lo, mut hi) = ((bt - top / steps as f64).max(0.0), bt + top / steps as f64);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let m1 = hi - gr * (hi - lo);
        let m2 = lo + gr * (hi - lo);
        if g(m1) < g(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = 0.5 * (lo + hi);
    (geometry::scale(t, dir), g(t).sqrt())
}

/// `sum_i <v_i>^{gamma+2s-1} |f_i|_{H^s}^2` with `f_i(u) = phi_i(lift(v_i +
/// tau_{v_i} u)) f(v_i + tau_{v_i} u)`, for a partition of unity built from
/// bumps of radius `1.25 r` on the lattice `r Z^4`, restricted to the
/// paraboloid. `extent` bounds the region where `f` is not negligible.
pub fn patchwise_sobolev(f: &dyn VelocityField, params: &KernelParams, patch_radius: f64, extent: f64) -> Result<f64, NormError> {
    if !(patch_radius > 0.0 && extent > 0.0) {
        return Err(NormError::Invalid("patch radius and extent must be positive".into()));
    }
    let r = patch_radius;
    let rs = 1.25 * r;
    let bump = |x: [f64; 4], c: [f64; 4]| {
        let t2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2) + (x[3] - c[3]).powi(2)) / (rs * rs);
        if t2 >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - t2)).exp()
        }
    };
    let reach = (rs / r).ceil() as i64 + 1;
    let mut nbr = Vec::new();
    for a in -reach..=reach {
        for b in -reach..=reach {
            for c in -reach..=reach {
                for d in -reach..=reach {
                    nbr.push([a, b, c, d]);
                }
            }
        }
    }
    let partition = |x: [f64; 4], c: [f64; 4]| {
        let own = bump(x, c);
        if own == 0.0 {
            return 0.0;
        }
        let base = x.map(|y| (y / r).round() as i64);
        let mut tot = 0.0;
        for o in &nbr {
            let cc = [0, 1, 2, 3].map(|k| (base[k] + o[k]) as f64 * r);
            tot += bump(x, cc);
        }
        own / tot
    };
    // centres whose bump meets the paraboloid inside the extent
    let m3 = ((extent + rs) / r).ceil() as i64;
    let mut centres = Vec::new();
    for i in -m3..=m3 {
        for j in -m3..=m3 {
            for k in -m3..=m3 {
                let c3 = [i as f64 * r, j as f64 * r, k as f64 * r];
                let n3 = norm(c3);
                if n3 > extent + rs {
                    continue;
                }
                let lo = ((0.5 * (n3 - rs).max(0.0).powi(2) - rs) / r).floor() as i64;
                let hi = ((0.5 * (n3 + rs).powi(2) + rs) / r).ceil() as i64;
                for l in lo..=hi {
                    let c = [c3[0], c3[1], c3[2], l as f64 * r];
                    let (vi, dist) = nearest_on_paraboloid(c);
                    if dist < rs {
                        centres.push((c, vi));
                    }
                }
            }
        }
    }
    let nf = 16usize;
    let half = 2.0 * rs;
    let hu = 2.0 * half / nf as f64;
    let fmax = {
        let mut m = 0.0f64;
        let k = 24;
        for a in 0..=k {
            for b in 0..=k {
                for c in 0..=k {
                    let v = [a, b, c].map(|x| -extent + 2.0 * extent * x as f64 / k as f64);
                    m = m.max(f.eval(v).abs());
                }
            }
        }
        m
    };
    let beta = params.order() - 1.0;
    let s = params.s;
    let parts: Vec<f64> = centres
        .par_iter()
        .map(|&(c, vi)| {
            let frame = geometry::TangentFrame::new(vi);
            let mut buf = vec![Complex64::new(0.0, 0.0); nf * nf * nf];
            let mut any = false;
            for a in 0..nf {
                for b in 0..nf {
                    for d in 0..nf {
                        let u = [a, b, d].map(|x| -half + hu * x as f64);
                        let v = geometry::add(vi, frame.tau(u));
                        let fv = f.eval(v);
                        if fv.abs() <= 1e-12 * fmax {
                            continue;
                        }
                        let p = partition(geometry::lift(v), c);
                        if p != 0.0 {
                            any = true;
                            buf[(a * nf + b) * nf + d] = Complex64::new(p * fv, 0.0);
                        }
                    }
                }
            }
            if !any {
                return 0.0;
            }
            fft3(&mut buf, nf);
            let dxi = 1.0 / (nf as f64 * hu);
            let mut acc = 0.0;
            for a in 0..nf {
                for b in 0..nf {
                    for d in 0..nf {
                        let k = [a, b, d].map(|x| if x < nf / 2 { x as f64 } else { x as f64 - nf as f64 });
                        let xi2 = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) * dxi * dxi;
                        let fh = buf[(a * nf + b) * nf + d] * hu.powi(3);
                        acc += (1.0 + 4.0 * PI * PI * xi2).powf(s) * fh.norm_sqr();
                    }
                }
            }
            bracket(vi).powf(beta) * acc * dxi.powi(3)
        })
        .collect();
    Ok(parts.iter().sum())
}

fn fft3(buf: &mut [Complex64], n: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    // last axis is contiguous
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for a in 0..n {
        for d in 0..n {
            for b in 0..n {
                line[b] = buf[(a * n + b) * n + d];
            }
            fft.process(&mut line);
            for b in 0..n {
                buf[(a * n + b) * n + d] = line[b];
            }
        }
    }
    for b in 0..n {
        for d in 0..n {
            for a in 0..n {
                line[a] = buf[(a * n + b) * n + d];
            }
            fft.process(&mut line);
            for a in 0..n {
                buf[(a * n + b) * n + d] = line[a];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    /// `|<Gamma(g,h),f>|` against the trilinear upper bound.
    Nonlin,
    /// `|<Ng,g>|` against `|g|_N^2`.
    NormUpper,
    /// `(|<Kg,g>| - eta |g|^2_{L^2_{gamma+2s}})_+` against `|g|_{L^2}^2`.
    CompactUpper,
    /// `|g|_N^2` against `|g|^2_{L^2_{gamma+2s}} + |g|_B^2`.
    Coercive,
}

impl std::str::FromStr for AuditKind {
    type Err = NormError;
    fn from_str(s: &str) -> Result<Self, NormError> {
        match s {
            "nonlin" => Ok(Self::Nonlin),
            "norm_upper" => Ok(Self::NormUpper),
            "compact_upper" => Ok(Self::CompactUpper),
            "coercive" | "estnorm3" => Ok(Self::Coercive),
            other => Err(NormError::Invalid(format!("unknown audit `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub function_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTable {
    pub kind: AuditKind,
    pub rows: Vec<AuditRow>,
    pub max_ratio: f64,
    pub min_ratio: f64,
    /// Set when the ratios spread by more than a factor 50.
    pub flagged: bool,
}

impl AuditTable {
    fn new(kind: AuditKind, rows: Vec<AuditRow>) -> Self {
        let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
        let min_ratio = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        let flagged = !(max_ratio.is_finite()) || (min_ratio > 0.0 && max_ratio / min_ratio > 50.0);
        Self {
            kind,
            rows,
            max_ratio,
            min_ratio,
            flagged,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("function_id,lhs,rhs,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.16e},{:.16e},{:.16e}\n", r.function_id, r.lhs, r.rhs, r.ratio));
        }
        s
    }
}

/// Everything an audit needs besides the suite.
pub struct AuditContext<'a> {
    pub params: KernelParams,
    pub grid: Arc<VelocityGrid>,
    pub norm: &'a AnisotropicNorm,
    pub nu: &'a NuTable,
    pub seminorm: SeminormSpec,
    pub trilinear: QuadratureSpec,
    pub etas: Vec<f64>,
}

pub fn estimate_audit(kind: AuditKind, suite: &[TestFunction], ctx: &AuditContext) -> Result<AuditTable, NormError> {
    let id = |f: &TestFunction| format!("seed{}", f.spec.seed);
    let mut rows = Vec::new();
    let nn = |f: &TestFunction| -> Result<NormReport, NormError> { ctx.norm.eval(&f.sample(&ctx.grid)) };
    match kind {
        AuditKind::NormUpper => {
            for f in suite {
                let (n, _) = norm_piece_form(f, &ctx.grid, &ctx.params, ctx.nu, &ctx.seminorm)?;
                let rhs = nn(f)?.total.powi(2);
                rows.push(AuditRow {
                    function_id: id(f),
                    lhs: n.abs(),
                    rhs,
                    ratio: n.abs() / rhs,
                });
            }
        }
        AuditKind::Coercive => {
            for f in suite {
                let r = nn(f)?;
                let b = b_seminorm(f, &ctx.params, BRoute::Sigma, &ctx.seminorm)?;
                let rhs = r.l2_part.powi(2) + b.value;
                rows.push(AuditRow {
                    function_id: id(f),
                    lhs: r.total.powi(2),
                    rhs,
                    ratio: r.total.powi(2) / rhs,
                });
            }
        }
        AuditKind::CompactUpper => {
            for f in suite {
                let (n, _) = norm_piece_form(f, &ctx.grid, &ctx.params, ctx.nu, &ctx.seminorm)?;
                let l = dynamics::dirichlet_form(f, &ctx.params, ctx.seminorm.samples, ctx.seminorm.seed)?;
                let k = (l.0 - n).abs();
                let g = f.sample(&ctx.grid);
                let (wl, l2) = (g.weighted_l2(ctx.params.order()).powi(2), g.l2().powi(2));
                for &eta in &ctx.etas {
                    let lhs = (k - eta * wl).max(0.0);
                    rows.push(AuditRow {
                        function_id: format!("{}@eta{eta}", id(f)),
                        lhs,
                        rhs: l2,
                        ratio: lhs / l2,
                    });
                }
            }
        }
        AuditKind::Nonlin => {
            for w in suite.windows(3) {
                let (g, h, f) = (&w[0], &w[1], &w[2]);
                let t = trilinear::gamma_sigma(g, h, f, &ctx.params, &ctx.trilinear)?;
                let gs = g.sample(&ctx.grid);
                let hs = h.sample(&ctx.grid);
                let fs = f.sample(&ctx.grid);
                let (g0, gw) = (gs.l2(), gs.weighted_l2(ctx.params.order()));
                let (h0, hn) = (hs.l2(), ctx.norm.eval(&hs)?.total);
                let (f0, fnn) = (fs.l2(), ctx.norm.eval(&fs)?.total);
                let rhs = g0 * hn * fnn + gw * (h0 * fnn + hn * f0);
                rows.push(AuditRow {
                    function_id: format!("{}|{}|{}", id(g), id(h), id(f)),
                    lhs: t.value.abs(),
                    rhs,
                    ratio: t.value.abs() / rhs,
                });
            }
        }
    }
    Ok(AuditTable::new(kind, rows))
}

/// `int mu` style sanity helper used by the audits' JSON summaries.
pub fn maxwellian_mass(grid: &Arc<VelocityGrid>) -> f64 {
    GridFunction::from_fn(grid, mu).integrate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sqrt_maxwellian, TestFunctionSpec};

    fn tf(seed: u64) -> TestFunction {
        TestFunction::new(TestFunctionSpec::random_gaussian_poly(seed)).unwrap()
    }

    #[test]
    fn zero_and_constant_fields() {
        let g = VelocityGrid::new(3.0, 13).unwrap();
        let k = KernelParams::maxwell_molecules();
        let z = n_norm(&GridFunction::zeros(&g), &k).unwrap();
        assert_eq!(z.total, 0.0);
        let c = n_norm(&GridFunction::from_fn(&g, |_| 2.5), &k).unwrap();
        assert!(c.derivative_part.abs() < 1e-6, "{c:?}");
        assert!((c.total * c.total - c.l2_part * c.l2_part - c.derivative_part * c.derivative_part).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_of_degree_one() {
        let g = VelocityGrid::new(4.0, 17).unwrap();
        let k = KernelParams::maxwell_molecules();
        let nrm = AnisotropicNorm::new(&g, &k).unwrap();
        let f = tf(3).sample(&g);
        let a = nrm.eval(&f).unwrap().total;
        let b = nrm.eval(&f.scaled(-3.0)).unwrap().total;
        assert!((b / a - 3.0).abs() < 1e-12);
    }

    #[test]
    fn maxwellian_norm_is_grid_stable() {
        let k = KernelParams::maxwell_molecules();
        let vals: Vec<f64> = [32usize, 48]
            .iter()
            .map(|&n| {
                let g = VelocityGrid::new(4.0, n).unwrap();
                n_norm(&sqrt_maxwellian(&g), &k).unwrap().total
            })
            .collect();
        assert!((vals[1] / vals[0] - 1.0).abs() <= 0.05, "{vals:?}");
    }

    #[test]
    fn brackets_comparable_in_the_indicator_region() {
        let mut rng = quad::rng_for(5, 0, 0);
        for _ in 0..2000 {
            let v: Vec3 = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let d: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let vp = geometry::add(v, d);
            let l = geometry::lift(v);
            let lp = geometry::lift(vp);
            let dist = (0..4).map(|i| (l[i] - lp[i]).powi(2)).sum::<f64>().sqrt();
            if dist <= 1.0 {
                let r = bracket(v) / bracket(vp);
                assert!(r.max(1.0 / r) <= std::f64::consts::E);
            }
        }
    }

    #[test]
    fn seminorm_routes_agree() {
        let k = KernelParams::maxwell_molecules();
        let f = tf(21);
        let spec = SeminormSpec {
            samples: 400_000,
            ..Default::default()
        };
        let a = b_seminorm(&f, &k, BRoute::Sigma, &spec).unwrap();
        let b = b_seminorm(&f, &k, BRoute::Carleman, &spec).unwrap();
        assert!((a.value - b.value).abs() <= 3.0 * (a.error_estimate + b.error_estimate), "{a:?} {b:?}");
        let z = b_seminorm(&crate::fields::Zero, &k, BRoute::Carleman, &spec).unwrap();
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn kernel_lower_bound_holds() {
        let k = KernelParams::maxwell_molecules();
        let (lo, hi) = kernel_lower_bound_audit(&k, 40, 3.0, 2).unwrap();
        assert!(lo > 0.0 && hi.is_finite(), "{lo} {hi}");
    }

    #[test]
    fn eta_delta_identities() {
        let g = VelocityGrid::new(4.0, 21).unwrap();
        let k = KernelParams::maxwell_molecules();
        let f = tf(1).sample(&g);
        let kk = KernelParams {
            gamma: -0.5,
            s: 0.25,
            ..KernelParams::maxwell_molecules()
        };
        let one = EtaDeltaSpec::new(1.0, 1.0).unwrap();
        assert!((eta_delta_norm(&f, &one, &kk) - 2f64.sqrt() * f.l2()).abs() < 1e-12);
        assert_eq!(eta_delta_norm(&GridFunction::zeros(&g), &one, &k), 0.0);
        let h = tf(2).sample(&g);
        let (inf, _) = eta_delta_infimum(&f, &h, &k);
        let o = k.order();
        let target = f.l2() * h.weighted_l2(o) + f.weighted_l2(o) * h.l2();
        assert!((inf / target - 1.0).abs() < 0.05, "{inf} {target}");
        assert!(EtaDeltaSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn psi_scaling() {
        assert_eq!(psi(0.0, 0.5, 1.0).unwrap(), 0.0);
        for s in [0.25, 0.5, 0.75] {
            let l = 1024.0;
            let r = psi(2.0 * l, s, 1.0).unwrap() / psi(l, s, 1.0).unwrap();
            assert!((r / 2f64.powf(2.0 * s) - 1.0).abs() < 0.05, "s {s} ratio {r}");
            let xs: Vec<f64> = (8..=12).map(|k| -(k as f64)).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| psi(2f64.powf(x), s, 1.0).unwrap().log2()).collect();
            assert!((quad::slope(&xs, &ys) - 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn redistribution_trivial_cases() {
        let r = fourier_redistribution_check(0.5, 1.0, 16).unwrap();
        assert!(r.additive_constant <= 1e-12);
        for row in r.rows.iter().filter(|r| r.xi_norm == 0.0) {
            assert_eq!(row.lhs, 0.0);
            assert_eq!(row.rhs, 0.0);
        }
        assert!(fourier_redistribution_check(0.5, 0.2, 24).is_err());
    }

    #[test]
    fn patchwise_matches_the_norm_up_to_constants() {
        let k = KernelParams::maxwell_molecules();
        let g = VelocityGrid::new(4.0, 25).unwrap();
        let nrm = AnisotropicNorm::new(&g, &k).unwrap();
        let mut ratios = Vec::new();
        for seed in [1u64, 2, 3] {
            let f = tf(seed);
            let p = patchwise_sobolev(&f, &k, 1.0, 4.0).unwrap();
            let n = nrm.eval(&f.sample(&g)).unwrap().total.powi(2);
            ratios.push(p / n);
        }
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |a, &r| (a.0.min(r), a.1.max(r)));
        assert!(lo > 0.0 && hi / lo <= 50.0, "{ratios:?}");
        assert_eq!(patchwise_sobolev(&crate::fields::Zero, &k, 1.0, 4.0).unwrap(), 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn scaling_is_absolutely_homogeneous(lam in -10.0f64..10.0, s in 0u64..100) {
            let g = VelocityGrid::new(3.0, 11).unwrap();
            let k = KernelParams::maxwell_molecules();
            let nrm = AnisotropicNorm::new(&g, &k).unwrap();
            let f = tf(s).sample(&g);
            let a = nrm.eval(&f).unwrap().total;
            let b = nrm.eval(&f.scaled(lam)).unwrap().total;
            proptest::prop_assert!((b - lam.abs() * a).abs() <= 1e-12 * a * lam.abs().max(1.0));
        }
    }
}
