//! Anisotropic Littlewood-Paley projections adapted to the paraboloid
//! `v -> (v, |v|^2/2)`.
//!
//! `P_j f(v) = int f(v') 2^{3j} phi(2^j (v^ - v'^)) <v'> dv'` is evaluated in
//! the tangent variable `v' = v + 2^{-j} tau_v u`, in which the kernel
//! becomes `<v>^{-1} phi(tau^_v u + 2^{-j-1} |tau_v u|^2 e_4)` and its
//! support is a slightly deformed unit ball in `u`.

use crate::fields::{GridFunction, VelocityField, VelocityGrid};
use crate::geometry::{self, bracket, Vec3, Vec4};
use crate::quad;
use nalgebra::{Matrix4, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("level {j} is under-resolved: 2^-j = {width} is below two grid spacings ({h})")]
    UnderResolved { j: u32, width: f64, h: f64 },
    #[error("invalid level range: {0}")]
    Levels(String),
}

/// Radial bump `c exp(-1/(1 - |a x|^2))` on the ball of radius `1/a` in `R^4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingProfile {
    /// Normalisation so that `int_{R^3} phi(tau^_v u) du = 1`.
    pub c: f64,
    /// Dilation `a` of the rescaled variant `phi(a x)`.
    pub dilation: f64,
}

/// `int_0^1 r^2 exp(-1/(1-r^2)) dr`
fn bump_radial_moment() -> f64 {
    let f = |r: f64| if r >= 1.0 { 0.0 } else { r * r * (-1.0 / (1.0 - r * r)).exp() };
    quad::gauss_legendre_on(40, 0.0, 0.5)
        .into_iter()
        .chain(quad::gauss_legendre_on(80, 0.5, 1.0))
        .map(|(x, w)| w * f(x))
        .sum()
}

impl Default for ScalingProfile {
    fn default() -> Self {
        Self::with_dilation(1.0)
    }
}

impl ScalingProfile {
    pub fn with_dilation(a: f64) -> Self {
        let c = a * a * a / (4.0 * PI * bump_radial_moment());
        Self { c, dilation: a }
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.dilation
    }

    #[inline]
    pub fn value(&self, x: Vec4) -> f64 {
        let a = self.dilation;
        let r2 = a * a * geometry::dot4(x, x);
        if r2 >= 1.0 {
            return 0.0;
        }
        self.c * (-1.0 / (1.0 - r2)).exp()
    }

    /// Value, gradient and Hessian.
    #[inline]
    pub fn jet(&self, x: Vec4) -> (f64, Vec4, [[f64; 4]; 4]) {
        let a = self.dilation;
        let y = [a * x[0], a * x[1], a * x[2], a * x[3]];
        let r2 = geometry::dot4(y, y);
        if r2 >= 1.0 {
            return (0.0, [0.0; 4], [[0.0; 4]; 4]);
        }
        let q = 1.0 - r2;
        let phi = self.c * (-1.0 / q).exp();
        // grad psi = -2y/q^2, hess psi = -2I/q^2 - 8 y y^T/q^3
        let q2 = q * q;
        let gp = [-2.0 * y[0] / q2, -2.0 * y[1] / q2, -2.0 * y[2] / q2, -2.0 * y[3] / q2];
        let mut grad = [0.0; 4];
        let mut hess = [[0.0; 4]; 4];
        for i in 0..4 {
            grad[i] = a * phi * gp[i];
            for k in 0..4 {
                let hp = -8.0 * y[i] * y[k] / (q2 * q) - if i == k { 2.0 / q2 } else { 0.0 };
                hess[i][k] = a * a * phi * (gp[i] * gp[k] + hp);
            }
        }
        (phi, grad, hess)
    }
}

/// Node counts of the tangent-variable quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpQuadrature {
    pub polar: usize,
    pub azimuth: usize,
    pub radial: usize,
}

impl Default for LpQuadrature {
    fn default() -> Self {
        Self {
            polar: 12,
            azimuth: 24,
            radial: 24,
        }
    }
}

impl LpQuadrature {
    pub fn fine() -> Self {
        Self {
            polar: 20,
            azimuth: 40,
            radial: 40,
        }
    }

    pub fn coarse() -> Self {
        Self {
            polar: 8,
            azimuth: 16,
            radial: 16,
        }
    }
}

/// Radii along `omega` where the deformed kernel argument has norm below
/// `radius`: `rho^2 [alpha + (q + c alpha rho)^2] < radius^2`.
fn radial_intervals(q: f64, alpha: f64, c: f64, radius: f64) -> Vec<(f64, f64)> {
    let h = |r: f64| r * r * (alpha + (q + c * alpha * r).powi(2)) - radius * radius;
    let rmax = radius / alpha.sqrt();
    let steps = 64;
    let mut out = Vec::new();
    let mut start = Some(0.0);
    let mut prev = 0.0;
    for i in 1..=steps {
        let r = rmax * i as f64 / steps as f64;
        let inside = h(r) < 0.0;
        match (start, inside) {
            (Some(s), false) => {
                let (mut a, mut b) = (prev, r);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    if h(m) < 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                out.push((s, 0.5 * (a + b)));
                start = None;
            }
            (None, true) => {
                let (mut a, mut b) = (prev, r);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    if h(m) < 0.0 {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                start = Some(0.5 * (a + b));
            }
            _ => {}
        }
        prev = r;
    }
    if let Some(s) = start {
        out.push((s, rmax));
    }
    out
}

/// Quadrature nodes `(u, weight)` covering the support of the level-`j`
/// kernel at `v`.
pub fn kernel_nodes(v: Vec3, j: u32, profile: &ScalingProfile, rule: &LpQuadrature) -> Vec<(Vec3, f64)> {
    let br = bracket(v);
    let c = 2f64.powi(-(j as i32) - 1);
    let radius = profile.radius();
    let polar = quad::gauss_legendre_on(rule.polar, -1.0, 1.0);
    let radial = quad::gauss_legendre(rule.radial);
    let dphi = 2.0 * PI / rule.azimuth as f64;
    let mut out = Vec::with_capacity(rule.polar * rule.azimuth * rule.radial);
    for &(ct, wt) in &polar {
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        for m in 0..rule.azimuth {
            let ph = (m as f64 + 0.5) * dphi;
            let om = [st * ph.cos(), st * ph.sin(), ct];
            let q = geometry::dot(v, om) / br;
            let alpha = 1.0 - q * q;
            for (a, b) in radial_intervals(q, alpha, c, radius) {
                let half = 0.5 * (b - a);
                for (x, w) in radial.0.iter().zip(&radial.1) {
                    let r = a + half * (x + 1.0);
                    out.push(([r * om[0], r * om[1], r * om[2]], wt * dphi * half * w * r * r));
                }
            }
        }
    }
    out
}

/// Kernel argument `tau^_v u + 2^{-j-1}|tau_v u|^2 e_4` and the point `v'`.
#[inline]
fn lifted_offset(frame: &geometry::TangentFrame, j: u32, u: Vec3) -> (Vec4, Vec3) {
    let t = frame.tau(u);
    let th = frame.tau_hat(u);
    let sc = 2f64.powi(-(j as i32));
    let x = [th[0], th[1], th[2], th[3] + 0.5 * sc * geometry::norm2(t)];
    (x, geometry::axpy(frame.anchor, sc, t))
}

/// `P_j f` and its `R^4` gradient and Hessian at `v^`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec4,
    pub hess: [[f64; 4]; 4],
}

impl Jet {
    fn sub(&self, o: &Jet) -> Jet {
        let mut r = *self;
        r.value -= o.value;
        for i in 0..4 {
            r.grad[i] -= o.grad[i];
            for k in 0..4 {
                r.hess[i][k] -= o.hess[i][k];
            }
        }
        r
    }

    pub fn grad_norm(&self) -> f64 {
        geometry::norm4(self.grad)
    }

    /// Spectral norm of the Hessian, i.e. `sup_{|xi|<=1} |(xi . grad)^2|`.
    pub fn hess_norm(&self) -> f64 {
        let m = Matrix4::from_fn(|i, k| self.hess[i][k]);
        SymmetricEigen::new(m).eigenvalues.iter().fold(0.0f64, |a, e| a.max(e.abs()))
    }
}

/// `P_j f(v)` with derivatives of its `R^4` extension (when `derivs`).
pub fn p_jet(
    j: u32,
    f: &dyn VelocityField,
    v: Vec3,
    profile: &ScalingProfile,
    rule: &LpQuadrature,
    derivs: bool,
) -> Jet {
    p_jet_weighted(j, f, v, profile, rule, derivs, 1.0)
}

fn p_jet_weighted(
    j: u32,
    f: &dyn VelocityField,
    v: Vec3,
    profile: &ScalingProfile,
    rule: &LpQuadrature,
    derivs: bool,
    beta: f64,
) -> Jet {
    let frame = geometry::TangentFrame::new(v);
    let sc = 2f64.powi(j as i32);
    let mut out = Jet::default();
    for (u, w) in kernel_nodes(v, j, profile, rule) {
        let (x, vp) = lifted_offset(&frame, j, u);
        let fv = f.eval(vp);
        if fv == 0.0 {
            continue;
        }
        let wf = w * fv * if beta == 1.0 { bracket(vp) } else { bracket(vp).powf(beta) };
        if derivs {
            let (p, g, hm) = profile.jet(x);
            out.value += wf * p;
            for i in 0..4 {
                // the kernel argument is 2^j (v^ - v'^) = -x
                out.grad[i] -= wf * sc * g[i];
                for k in 0..4 {
                    out.hess[i][k] += wf * sc * sc * hm[i][k];
                }
            }
        } else {
            out.value += wf * profile.value(x);
        }
    }
    let inv = 1.0 / frame.bracket();
    out.value *= inv;
    for i in 0..4 {
        out.grad[i] *= inv;
        for k in 0..4 {
            out.hess[i][k] *= inv;
        }
    }
    out
}

/// `Q_j f` jet: `P_0` for `j = 0`, `P_j - P_{j-1}` otherwise.
pub fn q_jet(j: u32, f: &dyn VelocityField, v: Vec3, profile: &ScalingProfile, rule: &LpQuadrature, derivs: bool) -> Jet {
    let p = p_jet(j, f, v, profile, rule, derivs);
    if j == 0 {
        p
    } else {
        p.sub(&p_jet(j - 1, f, v, profile, rule, derivs))
    }
}

/// `<v>^{-1} int phi(...) <v'>^beta du`, i.e. `P_j` applied to `<.>^{beta-1}`.
pub fn moment(j: u32, v: Vec3, beta: f64, profile: &ScalingProfile, rule: &LpQuadrature) -> f64 {
    struct One;
    impl VelocityField for One {
        fn eval(&self, _: Vec3) -> f64 {
            1.0
        }
    }
    p_jet_weighted(j, &One, v, profile, rule, false, beta).value
}

/// Finest admissible level on a grid: the kernel diameter `2^{1-j}` must
/// span at least four cells.
pub fn max_level(grid: &VelocityGrid) -> Option<u32> {
    let l = (1.0 / (2.0 * grid.spacing())).log2().floor();
    (l >= 0.0).then_some(l as u32)
}

fn check_resolution(j: u32, grid: &VelocityGrid) -> Result<(), LpError> {
    let h = grid.spacing();
    let width = 2f64.powi(-(j as i32));
    if width < 2.0 * h * (1.0 - 1e-12) {
        return Err(LpError::UnderResolved { j, width, h });
    }
    Ok(())
}

fn interpolant(f: &GridFunction) -> crate::fields::Interpolated {
    crate::fields::Interpolated::new(f).expect("projections need a uniform grid")
}

pub fn project_p(j: u32, f: &GridFunction, profile: &ScalingProfile, rule: &LpQuadrature) -> Result<GridFunction, LpError> {
    check_resolution(j, &f.grid)?;
    let fi = interpolant(f);
    Ok(GridFunction::from_fn(&f.grid, |v| p_jet(j, &fi, v, profile, rule, false).value))
}

pub fn project_q(j: u32, f: &GridFunction, profile: &ScalingProfile, rule: &LpQuadrature) -> Result<GridFunction, LpError> {
    check_resolution(j, &f.grid)?;
    let fi = interpolant(f);
    Ok(GridFunction::from_fn(&f.grid, |v| q_jet(j, &fi, v, profile, rule, false).value))
}

/// `|grad_4|^k Q_j f` restricted to the paraboloid, on the nodes of `out`.
pub fn extended_derivative(
    j: u32,
    f: &GridFunction,
    k: u32,
    profile: &ScalingProfile,
    rule: &LpQuadrature,
) -> Result<GridFunction, LpError> {
    check_resolution(j, &f.grid)?;
    let fi = interpolant(f);
    Ok(GridFunction::from_fn(&f.grid, |v| {
        let jt = q_jet(j, &fi, v, profile, rule, k > 0);
        match k {
            0 => jt.value.abs(),
            1 => jt.grad_norm(),
            _ => jt.hess_norm(),
        }
    }))
}

/// `L^2` ratios `| |grad_4|^k Q_j b | / |Q_j b|` for `k = 1, 2`, where
/// `b = exp(-4^j |v - c|^2)` lives at frequency `2^j`. The norms are taken
/// over a lattice of spacing `2^{-j-1}` around `c`.
pub fn band_limited_ratios(j: u32, center: Vec3, profile: &ScalingProfile, rule: &LpQuadrature) -> [f64; 2] {
    let a = 4f64.powi(j as i32);
    let bump = crate::fields::FnField(move |v: Vec3| (-a * geometry::norm2(geometry::sub(v, center))).exp());
    let h = 2f64.powi(-(j as i32) - 1);
    let pts: Vec<Vec3> = (0..729)
        .map(|i| {
            let o = [(i / 81) as f64 - 4.0, ((i / 9) % 9) as f64 - 4.0, (i % 9) as f64 - 4.0];
            geometry::axpy(center, h, o)
        })
        .collect();
    let sums = pts
        .par_iter()
        .map(|&v| {
            let jt = q_jet(j, &bump, v, profile, rule, true);
            [jt.value.powi(2), jt.grad_norm().powi(2), jt.hess_norm().powi(2)]
        })
        .collect::<Vec<_>>()
        .iter()
        .fold([0.0; 3], |acc, x| [acc[0] + x[0], acc[1] + x[1], acc[2] + x[2]]);
    [(sums[1] / sums[0]).sqrt(), (sums[2] / sums[0]).sqrt()]
}

/// The stack `Q_0 f, ..., Q_J f` with the residual `P_J f`.
#[derive(Debug, Clone)]
pub struct LpStack {
    pub levels: u32,
    pub pieces: Vec<GridFunction>,
    pub residual: GridFunction,
    /// `|grad_4|^k Q_j f` for `k = 1, 2` when requested.
    pub derivatives: Option<Vec<[GridFunction; 2]>>,
}

/// Builds the stack on the nodes of `out` (which may be coarser than the
/// grid carrying `f`).
pub fn lp_stack(
    f: &GridFunction,
    levels: u32,
    out: &Arc<VelocityGrid>,
    profile: &ScalingProfile,
    rule: &LpQuadrature,
    derivs: bool,
) -> Result<LpStack, LpError> {
    check_resolution(levels, &f.grid)?;
    let fi = interpolant(f);
    let nodes = out.len();
    // P_j jets at all output nodes
    let jets: Vec<Vec<Jet>> = (0..=levels)
        .map(|j| {
            (0..nodes)
                .into_par_iter()
                .map(|i| p_jet(j, &fi, out.node(i), profile, rule, derivs))
                .collect()
        })
        .collect();
    let mut pieces = Vec::new();
    let mut ders = Vec::new();
    for j in 0..=levels as usize {
        let q: Vec<Jet> = (0..nodes)
            .map(|i| if j == 0 { jets[0][i] } else { jets[j][i].sub(&jets[j - 1][i]) })
            .collect();
        pieces.push(GridFunction::from_values(out, q.iter().map(|x| x.value).collect()).unwrap());
        if derivs {
            ders.push([
                GridFunction::from_values(out, q.iter().map(|x| x.grad_norm()).collect()).unwrap(),
                GridFunction::from_values(out, q.iter().map(|x| x.hess_norm()).collect()).unwrap(),
            ]);
        }
    }
    let residual = GridFunction::from_values(out, jets[levels as usize].iter().map(|x| x.value).collect()).unwrap();
    Ok(LpStack {
        levels,
        pieces,
        residual,
        derivatives: derivs.then_some(ders),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareFunction {
    /// `energies[k][j] = 2^{2(s-k)j} || |grad_4|^k Q_j f ||^2_{L^2_{gamma+2s}}`
    pub energies: [Vec<f64>; 3],
    pub totals: [f64; 3],
}

pub fn square_function(
    f: &GridFunction,
    levels: u32,
    s: f64,
    gamma: f64,
    out: &Arc<VelocityGrid>,
    profile: &ScalingProfile,
    rule: &LpQuadrature,
) -> Result<SquareFunction, LpError> {
    let st = lp_stack(f, levels, out, profile, rule, true)?;
    let beta = gamma + 2.0 * s;
    let ders = st.derivatives.as_ref().unwrap();
    let mut energies: [Vec<f64>; 3] = Default::default();
    for j in 0..=levels as usize {
        let fields = [&st.pieces[j], &ders[j][0], &ders[j][1]];
        for k in 0..3 {
            let n = fields[k].weighted_l2(beta);
            energies[k].push(2f64.powf(2.0 * (s - k as f64) * j as f64) * n * n);
        }
    }
    let totals = [0, 1, 2].map(|k| energies[k].iter().sum());
    Ok(SquareFunction { energies, totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FnField, TestFunction, TestFunctionSpec};

    #[test]
    fn normalisation_is_frame_independent() {
        let p = ScalingProfile::default();
        let rule = LpQuadrature::fine();
        for v in [[0.0; 3], [3.0, 0.0, 0.0], [1.0, 2.0, -2.0]] {
            let fr = geometry::TangentFrame::new(v);
            // pure tangent argument: use a huge j so the e_4 correction vanishes
            let s: f64 = kernel_nodes(v, 60, &p, &rule).iter().map(|(u, w)| w * p.value(fr.tau_hat(*u))).sum();
            assert!((s - 1.0).abs() < 1e-8, "{v:?} {s}");
        }
        let p2 = ScalingProfile::with_dilation(2.0);
        let s: f64 = kernel_nodes([0.5, 0.0, 0.0], 60, &p2, &rule)
            .iter()
            .map(|(u, w)| w * p2.value(geometry::TangentFrame::new([0.5, 0.0, 0.0]).tau_hat(*u)))
            .sum();
        assert!((s - 1.0).abs() < 1e-8);
    }

    #[test]
    fn jet_matches_finite_differences() {
        let p = ScalingProfile::default();
        let x = [0.2, -0.3, 0.1, 0.4];
        let (_, g, h) = p.jet(x);
        let e = 1e-5;
        for i in 0..4 {
            let mut a = x;
            let mut b = x;
            a[i] += e;
            b[i] -= e;
            let fd = (p.value(a) - p.value(b)) / (2.0 * e);
            assert!((fd - g[i]).abs() < 1e-7 * g[i].abs().max(1.0));
            let (_, ga, _) = p.jet(a);
            let (_, gb, _) = p.jet(b);
            for k in 0..4 {
                assert!(((ga[k] - gb[k]) / (2.0 * e) - h[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn expansion_error_decays_quadratically() {
        let p = ScalingProfile::default();
        for (v, u) in [([0.5, -1.0, 2.0], [0.3, 0.2, -0.4]), ([3.0, 0.0, 1.0], [-0.5, 0.1, 0.2])] {
            let fr = geometry::TangentFrame::new(v);
            let th = fr.tau_hat(u);
            let t2 = geometry::norm2(fr.tau(u));
            let (p0, g, _) = p.jet(th);
            let (xs, ys): (Vec<f64>, Vec<f64>) = (2..=10)
                .map(|j| {
                    let sc = 2f64.powi(-j);
                    let l1 = geometry::lift(geometry::axpy(v, sc, fr.tau(u)));
                    let l0 = geometry::lift(v);
                    let arg = [0, 1, 2, 3].map(|i| (l1[i] - l0[i]) / sc);
                    let err = p.value(arg) - p0 - 0.5 * sc * t2 * g[3];
                    (j as f64, err.abs().log2())
                })
                .unzip();
            assert!(quad::slope(&xs, &ys) <= -1.8, "{}", quad::slope(&xs, &ys));
        }
    }

    #[test]
    fn moment_cancellation() {
        let p = ScalingProfile::default();
        let rule = LpQuadrature::fine();
        for beta in [0.0, 1.0, 0.5] {
            for v in [[0.5, 0.0, 0.0], [2.0, -1.0, 1.0]] {
                let target = bracket(v).powf(beta - 1.0);
                let (xs, ys): (Vec<f64>, Vec<f64>) = (1..=6)
                    .map(|j| (j as f64, (moment(j, v, beta, &p, &rule) - target).abs().log2()))
                    .unzip();
                let sl = quad::slope(&xs, &ys);
                assert!(sl <= -1.8, "beta {beta} v {v:?} slope {sl} {ys:?}");
            }
        }
    }

    #[test]
    fn q_of_one_decays() {
        let p = ScalingProfile::default();
        let rule = LpQuadrature::default();
        let one = FnField(|_: Vec3| 1.0);
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.5, -0.5], [2.5, 0.0, 1.0], [-3.0, 2.0, 0.0]];
        let (xs, ys): (Vec<f64>, Vec<f64>) = (1..=5)
            .map(|j| {
                let m = pts.iter().map(|&v| q_jet(j, &one, v, &p, &rule, false).value.abs()).fold(0.0, f64::max);
                (j as f64, m.log2())
            })
            .unzip();
        assert!(quad::slope(&xs, &ys) <= -1.7);
    }

    #[test]
    fn derivative_ratios_scale_with_level() {
        let p = ScalingProfile::default();
        let rule = LpQuadrature::default();
        for c in [[0.0, 0.0, 0.0], [1.5, 0.0, -1.0]] {
            let r: Vec<[f64; 2]> = (1..=5).map(|j| band_limited_ratios(j, c, &p, &rule)).collect();
            let xs: Vec<f64> = (1..=5).map(|j| j as f64).collect();
            let s1 = quad::slope(&xs, &r.iter().map(|x| x[0].log2()).collect::<Vec<_>>());
            let s2 = quad::slope(&xs, &r.iter().map(|x| x[1].log2()).collect::<Vec<_>>());
            assert!((s1 - 1.0).abs() <= 0.2 && (s2 - 2.0).abs() <= 0.3, "{s1} {s2}");
        }
    }

    #[test]
    fn telescoping_and_resolution() {
        let g = VelocityGrid::new(4.0, 17).unwrap();
        let f = TestFunction::new(TestFunctionSpec::random_gaussian_poly(4)).unwrap().sample(&g);
        let rule = LpQuadrature::coarse();
        let p = ScalingProfile::default();
        assert_eq!(max_level(&g), Some(0));
        let st = lp_stack(&f, 0, &g, &p, &rule, false).unwrap();
        let sum = st.pieces.iter().fold(GridFunction::zeros(&g), |a, q| a.axpy(1.0, q));
        assert!(sum.axpy(-1.0, &st.residual).max_abs() <= 1e-10);
        assert!(matches!(project_p(1, &f, &p, &rule), Err(LpError::UnderResolved { .. })));
        let z = project_q(0, &GridFunction::zeros(&g), &p, &rule).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }
}
