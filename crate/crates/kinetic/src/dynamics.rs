//! The linearized operator `L = N + K` on a velocity grid, the collision
//! frequency, the macroscopic projection, and a Fourier-in-`x` evolution
//! on the torus with its energy ledger.
//!
//! `L` is discretised in the variable `G = g / M`:
//! `Lg(x) = -M(x) int int B mu_* [G' + G'_* - G - G_*]`, with `G` read off
//! the grid through a local C^2 cubic B-spline quasi-interpolant (all
//! terms, including `G(v)` at the node itself). Quadratic `G` (the
//! collision invariants) are reproduced exactly, so the null space is
//! annihilated to rounding.

use crate::fields::{mu, sqrt_mu, FieldError, GridFunction, VelocityField, VelocityGrid};
use crate::geometry::{self, bracket, dot, norm, norm2, CollisionFrame, Vec3};
use crate::kernel::{grazing_rule, KernelParams};
use crate::norms::AnisotropicNorm;
use crate::quad;
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Gram matrix is ill-conditioned (condition number {0:.3e}); refine the grid")]
    IllConditioned(f64),
    #[error("stability budget exceeded: {0}")]
    Unstable(String),
    #[error("blow-up at t = {t}: |f|^2 = {norm2:.6e} (initial {initial:.6e})")]
    BlowUp { t: f64, norm2: f64, initial: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("need at least three stored states for time differences, got {0}")]
    ShortTrajectory(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
}

// ---------------------------------------------------------------- nu

/// `nu~(|v|)` tabulated on radii, with the two-term fit
/// `nu~ ~ c1 <v>^{gamma+2s} + c0 <v>^gamma` on `4 <= |v| <= 12`;
/// `nu` is the first term and `nu_K = nu~ - nu`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuTable {
    pub params: KernelParams,
    pub step: f64,
    pub values: Vec<f64>,
    pub c1: f64,
    pub c0: f64,
    /// Log-log slope of `nu~` against `<v>` over the fit window.
    pub slope_total: f64,
    /// Leading exponent fitted freely in `c1 <v>^beta + c0 <v>^gamma`.
    pub slope_leading: f64,
    /// Same for `|nu_K|`.
    pub slope_compact: f64,
    /// Largest relative residual of the fit.
    pub fit_residual: f64,
}

/// `int int B (M_* - M'_*) M_*` at `v = (r, 0, 0)`.
pub fn nu_tilde_at(params: &KernelParams, r: f64) -> f64 {
    let v = [r, 0.0, 0.0];
    let split = FRAC_PI_2.min(1.0 / bracket(v));
    let angles = grazing_rule(params.s, 12, 12, split);
    let nphi = 24;
    let dphi = TAU / nphi as f64;
    let mut acc = quad::Kahan::default();
    for (vs, w) in quad::hermite_cube(12, [0.0; 3], 1.0) {
        let Ok(frame) = CollisionFrame::new(v, vs) else { continue };
        let ms = sqrt_mu(vs);
        let mut inner = 0.0;
        for &(th, wt) in &angles {
            let mut ring = 0.0;
            for m in 0..nphi {
                let (_, vsp) = geometry::post_collision_unchecked(v, vs, frame.sigma(th, (m as f64 + 0.5) * dphi));
                ring += ms - sqrt_mu(vsp);
            }
            inner += wt * ring * dphi;
        }
        acc.add(w * params.phi_kinetic(frame.rel_speed) * ms * inner);
    }
    acc.sum()
}

impl NuTable {
    pub fn new(params: &KernelParams, r_max: f64) -> Result<Self, DynamicsError> {
        let step = 0.25;
        let top = r_max.max(12.0);
        let count = (top / step).ceil() as usize + 1;
        let values: Vec<f64> = (0..count).into_par_iter().map(|i| nu_tilde_at(params, i as f64 * step)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("collision frequency"));
        }
        let beta = params.order();
        let window: Vec<(f64, f64)> = (0..count)
            .map(|i| i as f64 * step)
            .zip(values.iter().copied())
            .filter(|(r, _)| (4.0..=12.0 + 1e-9).contains(r))
            .collect();
        let g = params.gamma;
        // relative least squares in (c1, c0) for a given leading exponent
        let fit = |beta: f64| -> Option<(f64, f64, f64)> {
            let mut a = SMatrix::<f64, 2, 2>::zeros();
            let mut b = SVector::<f64, 2>::zeros();
            for &(r, y) in &window {
                let br = (1.0 + r * r).sqrt();
                let x = SVector::<f64, 2>::new(br.powf(beta) / y, br.powf(g) / y);
                a += x * x.transpose();
                b += x;
            }
            let c = a.lu().solve(&b)?;
            let res = window
                .iter()
                .map(|&(r, y)| {
                    let br = (1.0 + r * r).sqrt();
                    ((c[0] * br.powf(beta) + c[1] * br.powf(g)) / y - 1.0).powi(2)
                })
                .sum::<f64>();
            Some((c[0], c[1], res))
        };
        // the leading exponent is a free parameter: golden section on the residual
        let score = |beta: f64| fit(beta).map_or(f64::INFINITY, |f| f.2);
        let (mut lo, mut hi) = (g + 0.02, g + 2.0);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut x1, mut x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        let (mut f1, mut f2) = (score(x1), score(x2));
        for _ in 0..80 {
            if f1 <= f2 {
                hi = x2;
                (x2, f2) = (x1, f1);
                x1 = hi - phi * (hi - lo);
                f1 = score(x1);
            } else {
                lo = x1;
                (x1, f1) = (x2, f2);
                x2 = lo + phi * (hi - lo);
                f2 = score(x2);
            }
        }
        let beta_hat = 0.5 * (lo + hi);
        let (c1, c0, _) = fit(beta).ok_or(DynamicsError::NonFinite("collision frequency fit"))?;
        let lx: Vec<f64> = window.iter().map(|(r, _)| (1.0 + r * r).sqrt().ln()).collect();
        let slope_of = |f: &dyn Fn(f64, f64) -> f64| {
            let ly: Vec<f64> = window.iter().map(|&(r, y)| f(r, y).abs().ln()).collect();
            quad::slope(&lx, &ly)
        };
        let slope_total = slope_of(&|_, y| y);
        let slope_compact = slope_of(&|r, y| y - c1 * (1.0 + r * r).powf(0.5 * beta));
        let fit_residual = window
            .iter()
            .map(|&(r, y)| {
                let br = (1.0 + r * r).sqrt();
                ((c1 * br.powf(beta) + c0 * br.powf(g)) / y - 1.0).abs()
            })
            .fold(0.0, f64::max);
        Ok(Self {
            params: *params,
            step,
            values,
            c1,
            c0,
            slope_total,
            slope_leading: beta_hat,
            slope_compact,
            fit_residual,
        })
    }

    /// `nu~(v)`: Catmull-Rom in `|v|` inside the table, the fit beyond it.
    pub fn nu_tilde(&self, v: Vec3) -> f64 {
        let r = norm(v);
        let n = self.values.len();
        let u = r / self.step;
        if u >= (n - 2) as f64 {
            let br = bracket(v);
            return self.c1 * br.powf(self.params.order()) + self.c0 * br.powf(self.params.gamma);
        }
        let i = u.floor() as usize;
        let t = u - i as f64;
        // even reflection at r = 0
        let p = |k: isize| self.values[k.unsigned_abs()];
        let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
        0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t + (3.0 * (p1 - p2) + p3 - p0) * t * t * t)
    }

    pub fn nu(&self, v: Vec3) -> f64 {
        self.c1 * bracket(v).powf(self.params.order())
    }

    pub fn nu_compact(&self, v: Vec3) -> f64 {
        self.nu_tilde(v) - self.nu(v)
    }
}

/// `(nu, nu_K)` on the nodes of a grid.
pub fn nu_weight(params: &KernelParams, grid: &Arc<VelocityGrid>) -> Result<(GridFunction, GridFunction, NuTable), DynamicsError> {
    let table = NuTable::new(params, grid.radius * 3f64.sqrt())?;
    let nu = GridFunction::from_fn(grid, |v| table.nu(v));
    let nk = GridFunction::from_fn(grid, |v| table.nu_compact(v));
    Ok((nu, nk, table))
}

// ---------------------------------------------------------------- L

/// Node counts for the collision integrals on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRule {
    /// Gauss-Hermite nodes per axis for `v_*`.
    pub hermite: usize,
    pub theta_inner: usize,
    pub theta_outer: usize,
    pub split: f64,
    /// Azimuthal nodes (even).
    pub phi: usize,
}

impl Default for CollisionRule {
    fn default() -> Self {
        Self {
            hermite: 5,
            theta_inner: 6,
            theta_outer: 6,
            split: 0.3,
            phi: 8,
        }
    }
}

impl CollisionRule {
    fn validate(&self) -> Result<(), DynamicsError> {
        if self.hermite == 0 || self.theta_inner == 0 || self.phi == 0 || self.phi % 2 == 1 || !(self.split > 0.0) {
            return Err(DynamicsError::Invalid(format!("bad collision rule {self:?}")));
        }
        Ok(())
    }

    fn angles(&self, s: f64) -> Vec<(f64, f64)> {
        grazing_rule(s, self.theta_inner, self.theta_outer, self.split)
    }
}

#[inline]
fn add_stencil(row: &mut [f64], grid: &VelocityGrid, v: Vec3, w: f64) {
    let (b, lw) = grid.smooth_stencil(v);
    for a in 0..6 {
        let wa = w * lw[0][a];
        for c in 0..6 {
            let wc = wa * lw[1][c];
            let base = grid.index(b[0] + a, b[1] + c, b[2]);
            for d in 0..6 {
                row[base + d] += wc * lw[2][d];
            }
        }
    }
}

#[inline]
fn eval_stencil(values: &[f64], grid: &VelocityGrid, v: Vec3) -> f64 {
    let (b, lw) = grid.smooth_stencil(v);
    let mut s = 0.0;
    for a in 0..6 {
        for c in 0..6 {
            let base = grid.index(b[0] + a, b[1] + c, b[2]);
            let mut t = 0.0;
            for d in 0..6 {
                t += lw[2][d] * values[base + d];
            }
            s += lw[0][a] * lw[1][c] * t;
        }
    }
    s
}

fn inside(grid: &VelocityGrid, v: Vec3) -> bool {
    v.iter().all(|x| x.abs() <= grid.radius)
}

/// Orthogonal projection onto `span{M, v M, |v|^2 M}` in the grid inner
/// product, with coefficients `(a, b, c)` of `(a + b.v + c|v|^2) M`.
#[derive(Debug, Clone)]
pub struct NullProjector {
    grid: Arc<VelocityGrid>,
    basis: Vec<Vec<f64>>,
    gram_inv: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroCoeffs {
    pub a: f64,
    pub b: [f64; 3],
    pub c: f64,
}

impl MacroCoeffs {
    fn from_slice(x: &[f64]) -> Self {
        Self {
            a: x[0],
            b: [x[1], x[2], x[3]],
            c: x[4],
        }
    }
}

fn basis_values(grid: &VelocityGrid, fns: &[fn(Vec3) -> f64]) -> Vec<Vec<f64>> {
    fns.iter().map(|f| (0..grid.len()).map(|i| f(grid.node(i))).collect()).collect()
}

fn gram(grid: &VelocityGrid, basis: &[Vec<f64>]) -> Result<DMatrix<f64>, DynamicsError> {
    let w = grid.weights();
    let m = basis.len();
    let g = DMatrix::from_fn(m, m, |a, b| basis[a].iter().zip(&basis[b]).zip(&w).map(|((x, y), w)| x * y * w).sum());
    let sv = g.clone().svd(false, false).singular_values;
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |a, &s| (a.0.min(s), a.1.max(s)));
    let cond = hi / lo;
    if !(cond < 1e10) {
        return Err(DynamicsError::IllConditioned(cond));
    }
    g.try_inverse().ok_or(DynamicsError::IllConditioned(f64::INFINITY))
}

const NULL_BASIS: [fn(Vec3) -> f64; 5] = [
    |v| sqrt_mu(v),
    |v| v[0] * sqrt_mu(v),
    |v| v[1] * sqrt_mu(v),
    |v| v[2] * sqrt_mu(v),
    |v| norm2(v) * sqrt_mu(v),
];

impl NullProjector {
    pub fn new(grid: &Arc<VelocityGrid>) -> Result<Self, DynamicsError> {
        if grid.n < 4 {
            return Err(DynamicsError::IllConditioned(f64::INFINITY));
        }
        let basis = basis_values(grid, &NULL_BASIS);
        let gram_inv = gram(grid, &basis)?;
        Ok(Self {
            grid: grid.clone(),
            basis,
            gram_inv,
        })
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    fn coeff_vec(&self, values: &[f64]) -> DVector<f64> {
        let w = self.grid.weights();
        let rhs = DVector::from_iterator(5, self.basis.iter().map(|e| e.iter().zip(values).zip(&w).map(|((e, g), w)| e * g * w).sum()));
        &self.gram_inv * rhs
    }

    fn synth(&self, c: &DVector<f64>) -> Vec<f64> {
        (0..self.grid.len()).map(|i| (0..5).map(|k| c[k] * self.basis[k][i]).sum()).collect()
    }

    pub fn coefficients(&self, g: &GridFunction) -> MacroCoeffs {
        MacroCoeffs::from_slice(self.coeff_vec(&g.values).as_slice())
    }

    pub fn project(&self, g: &GridFunction) -> (GridFunction, MacroCoeffs) {
        let c = self.coeff_vec(&g.values);
        let p = GridFunction::from_values(&self.grid, self.synth(&c)).expect("same grid");
        (p, MacroCoeffs::from_slice(c.as_slice()))
    }

    /// `(I - P) g`
    pub fn microscopic(&self, g: &GridFunction) -> GridFunction {
        let (p, _) = self.project(g);
        g.axpy(-1.0, &p)
    }
}

/// `L` (and its conservative correction) as a dense matrix on a grid.
pub struct LinearizedOperator {
    pub grid: Arc<VelocityGrid>,
    pub params: KernelParams,
    pub rule: CollisionRule,
    pub nu: NuTable,
    /// `L` assembled node by node.
    pub raw: DMatrix<f64>,
    /// `L - E G^{-1} E^T W L`, whose range is orthogonal to the invariants.
    pub conservative: DMatrix<f64>,
    pub projector: NullProjector,
}

impl LinearizedOperator {
    pub fn assemble(grid: &Arc<VelocityGrid>, params: &KernelParams, rule: &CollisionRule) -> Result<Self, DynamicsError> {
        rule.validate()?;
        if grid.rule != crate::fields::Rule::Trapezoid || grid.n < 6 {
            return Err(DynamicsError::Invalid("the operator needs a uniform grid with n >= 6".into()));
        }
        let nn = grid.len();
        if nn > 20_000 {
            return Err(DynamicsError::Invalid(format!("dense assembly on {nn} nodes is out of budget")));
        }
        let projector = NullProjector::new(grid)?;
        let nu = NuTable::new(params, grid.radius * 3f64.sqrt())?;
        let angles = rule.angles(params.s);
        let hermite = quad::hermite_cube(rule.hermite, [0.0; 3], 1.0);
        let dphi = TAU / rule.phi as f64;
        let m: Vec<f64> = (0..nn).map(|i| sqrt_mu(grid.node(i))).collect();
        let rows: Vec<Vec<f64>> = (0..nn)
            .into_par_iter()
            .map(|i| {
                let x = grid.node(i);
                let mut row = vec![0.0; nn];
                for &(vs, ws) in &hermite {
                    let Ok(frame) = CollisionFrame::new(x, vs) else { continue };
                    let base = ws * mu(vs) * params.phi_kinetic(frame.rel_speed);
                    let mut tot = 0.0;
                    for &(th, wt) in &angles {
                        let w = base * wt * dphi;
                        for k in 0..rule.phi {
                            let (vp, vsp) = geometry::post_collision_unchecked(x, vs, frame.sigma(th, (k as f64 + 0.5) * dphi));
                            add_stencil(&mut row, grid, vp, w);
                            add_stencil(&mut row, grid, vsp, w);
                            tot += w;
                        }
                    }
                    add_stencil(&mut row, grid, x, -tot);
                    add_stencil(&mut row, grid, vs, -tot);
                }
                for (j, r) in row.iter_mut().enumerate() {
                    *r *= -m[i] / m[j];
                }
                row
            })
            .collect();
        let raw = DMatrix::from_fn(nn, nn, |i, j| rows[i][j]);
        drop(rows);
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFinite("operator assembly"));
        }
        let w = grid.weights();
        let e = DMatrix::from_fn(nn, 5, |i, k| projector.basis[k][i]);
        let ewt = DMatrix::from_fn(5, nn, |k, i| projector.basis[k][i] * w[i]);
        let a = &projector.gram_inv * (ewt * &raw);
        let conservative = &raw - e * a;
        Ok(Self {
            grid: grid.clone(),
            params: *params,
            rule: *rule,
            nu,
            raw,
            conservative,
            projector,
        })
    }

    fn check(&self, g: &GridFunction) -> Result<(), DynamicsError> {
        if !g.grid.same_as(&self.grid) {
            return Err(DynamicsError::Invalid("field lives on a different grid".into()));
        }
        Ok(())
    }

    fn mul(m: &DMatrix<f64>, g: &GridFunction) -> GridFunction {
        let v = m * DVector::from_column_slice(&g.values);
        GridFunction::from_values(&g.grid, v.as_slice().to_vec()).expect("same grid")
    }

    /// Conservative `L g`.
    pub fn apply_l(&self, g: &GridFunction) -> Result<GridFunction, DynamicsError> {
        self.check(g)?;
        Ok(Self::mul(&self.conservative, g))
    }

    /// `L g` without the conservative correction.
    pub fn apply_l_raw(&self, g: &GridFunction) -> Result<GridFunction, DynamicsError> {
        self.check(g)?;
        Ok(Self::mul(&self.raw, g))
    }

    /// `N g = -int int B (g' - g) M'_* M_* + nu g`, matrix-free.
    pub fn apply_n(&self, g: &GridFunction) -> Result<GridFunction, DynamicsError> {
        self.check(g)?;
        let grid = &self.grid;
        let angles = self.rule.angles(self.params.s);
        let hermite = quad::hermite_cube(self.rule.hermite, [0.0; 3], 2f64.sqrt());
        let dphi = TAU / self.rule.phi as f64;
        let out = GridFunction::from_fn(grid, |x| {
            let gx = eval_stencil(&g.values, grid, x);
            let mut acc = 0.0;
            for &(vs, ws) in &hermite {
                let Ok(frame) = CollisionFrame::new(x, vs) else { continue };
                let base = ws * sqrt_mu(vs) * self.params.phi_kinetic(frame.rel_speed);
                for &(th, wt) in &angles {
                    for k in 0..self.rule.phi {
                        let (vp, vsp) = geometry::post_collision_unchecked(x, vs, frame.sigma(th, (k as f64 + 0.5) * dphi));
                        acc += base * wt * dphi * sqrt_mu(vsp) * (eval_stencil(&g.values, grid, vp) - gx);
                    }
                }
            }
            -acc + self.nu.nu(x) * gx
        });
        Ok(out)
    }

    /// `K g = L g - N g`.
    pub fn apply_k(&self, g: &GridFunction) -> Result<GridFunction, DynamicsError> {
        Ok(self.apply_l_raw(g)?.axpy(-1.0, &self.apply_n(g)?))
    }

    /// `<Lg, g>` in the grid inner product.
    pub fn quadratic_form(&self, g: &GridFunction) -> Result<f64, DynamicsError> {
        Ok(self.apply_l(g)?.inner(g))
    }

    /// Largest `|lambda|` of the conservative matrix by power iteration.
    pub fn spectral_radius(&self, iterations: usize, seed: u64) -> f64 {
        let mut rng = quad::rng_for(seed, 31, 0);
        let n = self.grid.len();
        let mut x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut est = 0.0;
        for _ in 0..iterations {
            let y = &self.conservative * &x;
            let ny = y.norm();
            if ny == 0.0 {
                return 0.0;
            }
            est = ny / x.norm();
            x = y / ny;
        }
        est
    }
}

/// `L g` at the nodes without assembling a matrix (no conservative
/// correction).
pub fn apply_l_free(g: &GridFunction, params: &KernelParams, rule: &CollisionRule) -> Result<GridFunction, DynamicsError> {
    rule.validate()?;
    let grid = &g.grid;
    let angles = rule.angles(params.s);
    let hermite = quad::hermite_cube(rule.hermite, [0.0; 3], 1.0);
    let dphi = TAU / rule.phi as f64;
    let big: Vec<f64> = (0..grid.len()).map(|i| g.values[i] / sqrt_mu(grid.node(i))).collect();
    Ok(GridFunction::from_fn(grid, |x| {
        let gx = eval_stencil(&big, grid, x);
        let mut acc = 0.0;
        for &(vs, ws) in &hermite {
            let Ok(frame) = CollisionFrame::new(x, vs) else { continue };
            let base = ws * mu(vs) * params.phi_kinetic(frame.rel_speed);
            let g0 = gx + eval_stencil(&big, grid, vs);
            for &(th, wt) in &angles {
                for k in 0..rule.phi {
                    let (vp, vsp) = geometry::post_collision_unchecked(x, vs, frame.sigma(th, (k as f64 + 0.5) * dphi));
                    acc += base * wt * dphi * (eval_stencil(&big, grid, vp) + eval_stencil(&big, grid, vsp) - g0);
                }
            }
        }
        -sqrt_mu(x) * acc
    }))
}

/// The thirteen moments `v_i|v|^2 M, v_i^2 M, v_i v_j M (i<j), v_i M, M`.
pub const MACRO_BASIS: [fn(Vec3) -> f64; 13] = [
    |v| v[0] * norm2(v) * sqrt_mu(v),
    |v| v[1] * norm2(v) * sqrt_mu(v),
    |v| v[2] * norm2(v) * sqrt_mu(v),
    |v| v[0] * v[0] * sqrt_mu(v),
    |v| v[1] * v[1] * sqrt_mu(v),
    |v| v[2] * v[2] * sqrt_mu(v),
    |v| v[0] * v[1] * sqrt_mu(v),
    |v| v[0] * v[2] * sqrt_mu(v),
    |v| v[1] * v[2] * sqrt_mu(v),
    |v| v[0] * sqrt_mu(v),
    |v| v[1] * sqrt_mu(v),
    |v| v[2] * sqrt_mu(v),
    |v| sqrt_mu(v),
];
const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Coefficients with respect to [`MACRO_BASIS`] by a Gram solve.
#[derive(Debug, Clone)]
pub struct MacroBasis {
    basis: Vec<Vec<f64>>,
    weights: Vec<f64>,
    pub gram_inv: DMatrix<f64>,
}

impl MacroBasis {
    pub fn new(grid: &Arc<VelocityGrid>) -> Result<Self, DynamicsError> {
        let basis = basis_values(grid, &MACRO_BASIS);
        let gram_inv = gram(grid, &basis)?;
        Ok(Self {
            basis,
            weights: grid.weights(),
            gram_inv,
        })
    }

    pub fn coefficients(&self, values: &[Complex64]) -> Vec<Complex64> {
        let rhs: Vec<Complex64> = self
            .basis
            .iter()
            .map(|e| e.iter().zip(values).zip(&self.weights).map(|((e, g), w)| g * (e * w)).sum())
            .collect();
        (0..13).map(|l| (0..13).map(|m| rhs[m] * self.gram_inv[(l, m)]).sum()).collect()
    }
}

// ---------------------------------------------------------------- MC forms

/// `<Lg, h> = 1/4 int int int B mu mu_* (G'+G'_*-G-G_*)(H'+H'_*-H-H_*)`
/// with `G = g/M`, by Monte Carlo over `v, v_* ~ mu`; returns
/// `(value, standard error)`.
pub fn dirichlet_bilinear(
    g: &dyn VelocityField,
    h: &dyn VelocityField,
    params: &KernelParams,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), DynamicsError> {
    if samples == 0 {
        return Err(DynamicsError::Invalid("need at least one sample".into()));
    }
    let q = 2.0 - 2.0 * params.s;
    let ang = FRAC_PI_2.powf(q) / q * TAU;
    const CHUNK: usize = 4096;
    let big = |f: &dyn VelocityField, v: Vec3| f.eval(v) / sqrt_mu(v);
    let sums = quad::det_sum_vec(samples.div_ceil(CHUNK), 1, 2, |c, acc| {
        let mut rng = quad::rng_for(seed, 41, c as u64);
        let lo = c * CHUNK;
        for _ in lo..(lo + CHUNK).min(samples) {
            let mut draw = || -> Vec3 { [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)] };
            let v = draw();
            let vs = draw();
            let th = FRAC_PI_2 * rng.gen::<f64>().powf(1.0 / q);
            let ph = TAU * rng.gen::<f64>();
            let Ok(frame) = CollisionFrame::new(v, vs) else { continue };
            let (g0, h0) = (big(g, v) + big(g, vs), big(h, v) + big(h, vs));
            let mut x = 0.0;
            for p in [ph, ph + PI] {
                let (vp, vsp) = geometry::post_collision_unchecked(v, vs, frame.sigma(th, p));
                let dg = big(g, vp) + big(g, vsp) - g0;
                let dh = big(h, vp) + big(h, vsp) - h0;
                x += 0.5 * dg * dh;
            }
            let val = 0.25 * ang * params.phi_kinetic(frame.rel_speed) * x / (th * th);
            acc[0] += val;
            acc[1] += val * val;
        }
    });
    let n = samples as f64;
    let m = sums[0] / n;
    if !m.is_finite() {
        return Err(DynamicsError::NonFinite("Dirichlet form"));
    }
    Ok((m, ((sums[1] / n - m * m).max(0.0) / n).sqrt()))
}

pub fn dirichlet_form(g: &dyn VelocityField, params: &KernelParams, samples: usize, seed: u64) -> Result<(f64, f64), DynamicsError> {
    dirichlet_bilinear(g, g, params, samples, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub ratios: Vec<f64>,
    pub excluded: usize,
    pub delta_hat: f64,
}

/// `min_g <Lg,g> / |(I-P)g|^2_N` over a suite; functions whose microscopic
/// part is negligible are excluded.
pub fn coercivity_probe(
    suite: &[&dyn VelocityField],
    params: &KernelParams,
    norm: &AnisotropicNorm,
    samples: usize,
    seed: u64,
) -> Result<CoercivityReport, DynamicsError> {
    let grid = norm.grid().clone();
    let proj = NullProjector::new(&grid)?;
    let mut ratios = Vec::new();
    let mut excluded = 0;
    for (k, g) in suite.iter().enumerate() {
        let gs = GridFunction::sample(&grid, *g);
        let micro = proj.microscopic(&gs);
        let den = norm.eval(&micro).map_err(|e| DynamicsError::Invalid(e.to_string()))?.total.powi(2);
        if den <= 1e-10 * gs.l2().powi(2).max(1e-300) {
            excluded += 1;
            continue;
        }
        let (num, _) = dirichlet_form(*g, params, samples, seed.wrapping_add(k as u64))?;
        ratios.push(num / den);
    }
    let delta_hat = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CoercivityReport { ratios, excluded, delta_hat })
}

// ---------------------------------------------------------------- Gamma on a grid

/// `Gamma(g, h)(x) = int int B M_* (g'_* h' - g_* h)` with the same local
/// interpolation of `g, h` (zero outside the box).
pub fn gamma_grid(g: &GridFunction, h: &GridFunction, params: &KernelParams, rule: &CollisionRule) -> Result<GridFunction, DynamicsError> {
    rule.validate()?;
    if !g.grid.same_as(&h.grid) {
        return Err(DynamicsError::Invalid("fields live on different grids".into()));
    }
    let grid = &g.grid;
    let angles = rule.angles(params.s);
    let hermite = quad::hermite_cube(rule.hermite, [0.0; 3], 2f64.sqrt());
    let dphi = TAU / rule.phi as f64;
    let ev = |f: &GridFunction, v: Vec3| if inside(grid, v) { eval_stencil(&f.values, grid, v) } else { 0.0 };
    Ok(GridFunction::from_fn(grid, |x| {
        let hx = ev(h, x);
        let mut acc = 0.0;
        for &(vs, ws) in &hermite {
            let Ok(frame) = CollisionFrame::new(x, vs) else { continue };
            let base = ws * sqrt_mu(vs) * params.phi_kinetic(frame.rel_speed);
            let loss = ev(g, vs) * hx;
            for &(th, wt) in &angles {
                for k in 0..rule.phi {
                    let (vp, vsp) = geometry::post_collision_unchecked(x, vs, frame.sigma(th, (k as f64 + 0.5) * dphi));
                    acc += base * wt * dphi * (ev(g, vsp) * ev(h, vp) - loss);
                }
            }
        }
        acc
    }))
}

// ---------------------------------------------------------------- x-modes

/// `f(x, v) = sum_k f_k(v) e^{i k.x}` on the torus with `k in {-K..K}^3`;
/// only `k = 0` and the modes whose first nonzero entry is positive are
/// stored, the rest follow from `f_{-k} = conj(f_k)`.
#[derive(Debug, Clone)]
pub struct SpatioVelocityField {
    pub kx: i32,
    pub grid: Arc<VelocityGrid>,
    pub modes: Vec<[i32; 3]>,
    pub values: Vec<Vec<Complex64>>,
}

pub fn half_modes(kx: i32) -> Vec<[i32; 3]> {
    let mut out = vec![[0, 0, 0]];
    for a in -kx..=kx {
        for b in -kx..=kx {
            for c in -kx..=kx {
                let k = [a, b, c];
                if k.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0) {
                    out.push(k);
                }
            }
        }
    }
    out
}

fn k_norm2(k: [i32; 3]) -> f64 {
    (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64
}

/// Number of full-lattice modes a stored mode stands for.
fn multiplicity(k: [i32; 3]) -> f64 {
    if k == [0, 0, 0] {
        1.0
    } else {
        2.0
    }
}

impl SpatioVelocityField {
    pub fn zeros(grid: &Arc<VelocityGrid>, kx: i32) -> Self {
        let modes = half_modes(kx);
        let values = vec![vec![Complex64::new(0.0, 0.0); grid.len()]; modes.len()];
        Self {
            kx,
            grid: grid.clone(),
            modes,
            values,
        }
    }

    /// Small random datum with vanishing mean of `P f`: each stored mode is
    /// `amplitude (g_1 + i g_2)` with seeded Gaussian-polynomial `g_j`.
    pub fn random(grid: &Arc<VelocityGrid>, kx: i32, amplitude: f64, seed: u64) -> Result<Self, DynamicsError> {
        use crate::fields::{TestFunction, TestFunctionSpec};
        let mut f = Self::zeros(grid, kx);
        for (m, k) in f.modes.clone().iter().enumerate() {
            let s = seed.wrapping_mul(1000).wrapping_add(2 * m as u64);
            let re = TestFunction::new(TestFunctionSpec::random_gaussian_poly(s))?.sample(grid);
            let im = TestFunction::new(TestFunctionSpec::random_gaussian_poly(s + 1))?.sample(grid);
            let zero = *k == [0, 0, 0];
            f.values[m] = re
                .values
                .iter()
                .zip(&im.values)
                .map(|(a, b)| amplitude * Complex64::new(*a, if zero { 0.0 } else { *b }))
                .collect();
        }
        let proj = NullProjector::new(grid)?;
        let g0 = GridFunction::from_values(grid, f.values[0].iter().map(|z| z.re).collect())?;
        let (p, _) = proj.project(&g0);
        for (z, p) in f.values[0].iter_mut().zip(&p.values) {
            z.re -= p;
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.values.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(DynamicsError::NonFinite("field"));
        }
        if self.values[0].iter().any(|z| z.im.abs() > 1e-12 * (1.0 + z.re.abs())) {
            return Err(DynamicsError::Invalid("the zero mode of a real field must be real".into()));
        }
        Ok(())
    }

    /// `sum_k (1 + |k|^2)^order |f_k|^2_{L^2_v}`
    pub fn sobolev_norm2(&self, order: i32) -> f64 {
        let w = self.grid.weights();
        self.modes
            .iter()
            .zip(&self.values)
            .map(|(k, f)| multiplicity(*k) * (1.0 + k_norm2(*k)).powi(order) * f.iter().zip(&w).map(|(z, w)| w * z.norm_sqr()).sum::<f64>())
            .sum()
    }

    pub fn mode_parts(&self, m: usize) -> (GridFunction, GridFunction) {
        let re = GridFunction::from_values(&self.grid, self.values[m].iter().map(|z| z.re).collect()).expect("same grid");
        let im = GridFunction::from_values(&self.grid, self.values[m].iter().map(|z| z.im).collect()).expect("same grid");
        (re, im)
    }

    /// Full-lattice mode `k`, conjugating when only `-k` is stored.
    fn full_mode(&self, k: [i32; 3]) -> Option<(usize, bool)> {
        if let Some(i) = self.modes.iter().position(|m| *m == k) {
            return Some((i, false));
        }
        let nk = [-k[0], -k[1], -k[2]];
        self.modes.iter().position(|m| *m == nk).map(|i| (i, true))
    }
}

// ---------------------------------------------------------------- evolution

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvolveMode {
    Linear,
    Picard,
}

impl std::str::FromStr for EvolveMode {
    type Err = DynamicsError;
    fn from_str(s: &str) -> Result<Self, DynamicsError> {
        match s {
            "linear" => Ok(Self::Linear),
            "picard" => Ok(Self::Picard),
            o => Err(DynamicsError::Invalid(format!("unknown mode `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub dt: f64,
    pub t_final: f64,
    pub mode: EvolveMode,
    /// Sobolev order `N` in `x`.
    pub order: i32,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            dt: 0.025,
            t_final: 2.0,
            mode: EvolveMode::Linear,
            order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: f64,
    pub norm2: f64,
    pub dissipation: f64,
    pub interaction: f64,
    pub energy: f64,
    /// Residuals of the three local conservation laws, relative to `|f|`.
    pub res_cl: [f64; 3],
    /// Residual of the thirteen macroscopic equations.
    pub res_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub rows: Vec<LedgerRow>,
    pub c1: f64,
    pub c_prime: f64,
    /// Constant in `|I(t)| <= C |f(t)|^2` built from the coefficient maps.
    pub interaction_constant: f64,
    /// `-d log|f|^2/dt` by least squares; `None` for zero data.
    pub lambda_hat: Option<f64>,
    /// `max_t |f(t)| / (|f_0| e^{-lambda t/2})`.
    pub envelope_ratio: Option<f64>,
    pub spectral_radius: f64,
}

impl EnergyLedger {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,norm2,D,I,E,res_cl0,res_cl1,res_cl2,res_macro\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.t, r.norm2, r.dissipation, r.interaction, r.energy, r.res_cl[0], r.res_cl[1], r.res_cl[2], r.res_macro
            ));
        }
        s
    }

    pub fn max_conservation_residual(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.res_cl).fold(0.0, f64::max)
    }

    pub fn max_macro_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.res_macro).fold(0.0, f64::max)
    }

    /// `max_t |I(t)| / (C |f(t)|^2)`
    pub fn interaction_ratio(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.norm2 > 0.0)
            .map(|r| r.interaction.abs() / (self.interaction_constant * r.norm2))
            .fold(0.0, f64::max)
    }
}

pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpatioVelocityField>,
}

/// Everything the time loop needs.
pub struct Evolver<'a> {
    pub op: &'a LinearizedOperator,
    pub norm: &'a AnisotropicNorm,
    pub macro_basis: MacroBasis,
}

impl<'a> Evolver<'a> {
    pub fn new(op: &'a LinearizedOperator, norm: &'a AnisotropicNorm) -> Result<Self, DynamicsError> {
        Ok(Self {
            op,
            norm,
            macro_basis: MacroBasis::new(&op.grid)?,
        })
    }

    /// `-(L_c f + Gamma(f, f))` on every stored mode (transport excluded).
    fn collision_rhs(&self, f: &SpatioVelocityField, mode: EvolveMode) -> Result<Vec<Vec<Complex64>>, DynamicsError> {
        let n = self.op.grid.len();
        let nm = f.modes.len();
        let y = DMatrix::from_fn(n, 2 * nm, |i, c| if c % 2 == 0 { f.values[c / 2][i].re } else { f.values[c / 2][i].im });
        let ly = &self.op.conservative * y;
        let mut out: Vec<Vec<Complex64>> = (0..nm).map(|m| (0..n).map(|i| -Complex64::new(ly[(i, 2 * m)], ly[(i, 2 * m + 1)])).collect()).collect();
        if mode == EvolveMode::Picard {
            let parts: Vec<(GridFunction, GridFunction)> = (0..nm).map(|m| f.mode_parts(m)).collect();
            // (re, im) of the full-lattice mode q
            let full = |q: [i32; 3]| -> Option<(GridFunction, GridFunction)> {
                let (i, conj) = f.full_mode(q)?;
                let (re, im) = &parts[i];
                Some((re.clone(), if conj { im.scaled(-1.0) } else { im.clone() }))
            };
            let kx = f.kx;
            let g = |x: &GridFunction, y: &GridFunction| gamma_grid(x, y, &self.op.params, &self.op.rule);
            for (m, k) in f.modes.iter().enumerate() {
                let mut re = GridFunction::zeros(&self.op.grid);
                let mut im = GridFunction::zeros(&self.op.grid);
                for q in half_modes(kx).into_iter().flat_map(|q| if q == [0, 0, 0] { vec![q] } else { vec![q, [-q[0], -q[1], -q[2]]] }) {
                    let r = [k[0] - q[0], k[1] - q[1], k[2] - q[2]];
                    let (Some((a, b)), Some((c, d))) = (full(q), full(r)) else { continue };
                    re = re.axpy(1.0, &g(&a, &c)?.axpy(-1.0, &g(&b, &d)?));
                    im = im.axpy(1.0, &g(&a, &d)?.axpy(1.0, &g(&b, &c)?));
                }
                // same conservative correction as for L
                let (re, im) = (self.op.projector.microscopic(&re), self.op.projector.microscopic(&im));
                for i in 0..n {
                    out[m][i] += Complex64::new(re.values[i], im.values[i]);
                }
            }
        }
        Ok(out)
    }

    fn phase(&self, k: [i32; 3], dt: f64) -> Vec<Complex64> {
        let g = &self.op.grid;
        (0..g.len())
            .map(|i| {
                let v = g.node(i);
                let a = -(k[0] as f64 * v[0] + k[1] as f64 * v[1] + k[2] as f64 * v[2]) * dt;
                Complex64::new(a.cos(), a.sin())
            })
            .collect()
    }

    /// Heun with the transport integrated exactly per mode.
    pub fn evolve(&self, f0: &SpatioVelocityField, cfg: &EvolveConfig) -> Result<(EnergyLedger, Trajectory), DynamicsError> {
        f0.validate()?;
        if !(cfg.dt > 0.0 && cfg.t_final >= cfg.dt) {
            return Err(DynamicsError::Invalid(format!("dt = {}, T = {}", cfg.dt, cfg.t_final)));
        }
        let grid = &self.op.grid;
        let vmax = grid.radius * 3f64.sqrt();
        let numax = (0..grid.len()).map(|i| self.op.nu.nu(grid.node(i))).fold(0.0, f64::max);
        let budget = cfg.dt * (numax + f0.kx as f64 * vmax);
        if budget > 1.0 {
            return Err(DynamicsError::Unstable(format!("dt (max nu + K_x v_max) = {budget:.3} > 1")));
        }
        let rho = self.op.spectral_radius(40, 7);
        if cfg.dt * rho > 2.0 {
            return Err(DynamicsError::Unstable(format!("dt * spectral radius = {:.3} > 2", cfg.dt * rho)));
        }
        let steps = (cfg.t_final / cfg.dt).round() as usize;
        let phases: Vec<Vec<Complex64>> = f0.modes.iter().map(|k| self.phase(*k, cfg.dt)).collect();
        let initial = f0.sobolev_norm2(0);
        let mut states = vec![f0.clone()];
        let mut times = vec![0.0];
        let mut f = f0.clone();
        for step in 1..=steps {
            let r0 = self.collision_rhs(&f, cfg.mode)?;
            let mut y1 = f.clone();
            for m in 0..f.modes.len() {
                for i in 0..grid.len() {
                    y1.values[m][i] = phases[m][i] * (f.values[m][i] + cfg.dt * r0[m][i]);
                }
            }
            let r1 = self.collision_rhs(&y1, cfg.mode)?;
            for m in 0..f.modes.len() {
                for i in 0..grid.len() {
                    let p = phases[m][i];
                    f.values[m][i] = p * f.values[m][i] + 0.5 * cfg.dt * (p * r0[m][i] + r1[m][i]);
                }
            }
            let t = step as f64 * cfg.dt;
            let n2 = f.sobolev_norm2(0);
            if !n2.is_finite() || (initial > 0.0 && n2 > 4.0 * initial) {
                return Err(DynamicsError::BlowUp { t, norm2: n2, initial });
            }
            states.push(f.clone());
            times.push(t);
        }
        let traj = Trajectory { times, states };
        let ledger = self.ledger(&traj, cfg, rho)?;
        Ok((ledger, traj))
    }

    /// `(a, b, c)` of every stored mode.
    fn macro_coeffs(&self, f: &SpatioVelocityField) -> Vec<[Complex64; 5]> {
        let pr = &self.op.projector;
        (0..f.modes.len())
            .map(|m| {
                let (re, im) = f.mode_parts(m);
                let a = pr.coefficients(&re);
                let b = pr.coefficients(&im);
                let c = |x: f64, y: f64| Complex64::new(x, y);
                [c(a.a, b.a), c(a.b[0], b.b[0]), c(a.b[1], b.b[1]), c(a.b[2], b.b[2]), c(a.c, b.c)]
            })
            .collect()
    }

    fn microscopic(&self, f: &SpatioVelocityField) -> SpatioVelocityField {
        let mut out = f.clone();
        let pr = &self.op.projector;
        for m in 0..f.modes.len() {
            let (re, im) = f.mode_parts(m);
            let (r, i) = (pr.microscopic(&re), pr.microscopic(&im));
            out.values[m] = r.values.iter().zip(&i.values).map(|(a, b)| Complex64::new(*a, *b)).collect();
        }
        out
    }

    /// Semi-discrete time derivative `-(i k.v + L_c) f (+ Gamma)`.
    fn derivative(&self, f: &SpatioVelocityField, mode: EvolveMode) -> Result<SpatioVelocityField, DynamicsError> {
        let r = self.collision_rhs(f, mode)?;
        let mut out = f.clone();
        let g = &self.op.grid;
        for (m, k) in f.modes.iter().enumerate() {
            for i in 0..g.len() {
                let kv = dot([k[0] as f64, k[1] as f64, k[2] as f64], g.node(i));
                out.values[m][i] = r[m][i] - Complex64::new(0.0, kv) * f.values[m][i];
            }
        }
        Ok(out)
    }

    fn moment(&self, f: &[Complex64], e: impl Fn(Vec3) -> f64) -> Complex64 {
        let g = &self.op.grid;
        (0..g.len()).map(|i| f[i] * (g.weight(i) * e(g.node(i)))).sum()
    }

    fn conservation_residuals(&self, f: &SpatioVelocityField, mode: EvolveMode) -> Result<[f64; 3], DynamicsError> {
        let df = self.derivative(f, mode)?;
        let dc = self.macro_coeffs(&df);
        let cc = self.macro_coeffs(f);
        let micro = self.microscopic(f);
        let mut res = [0.0; 3];
        let i = Complex64::new(0.0, 1.0);
        for (m, k) in f.modes.iter().enumerate() {
            let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
            let w = multiplicity(*k);
            let q: Vec<Complex64> = (0..3).map(|l| self.moment(&micro.values[m], |v| norm2(v) * v[l] * sqrt_mu(v))).collect();
            let kq: Complex64 = (0..3).map(|l| i * kf[l] * q[l]).sum();
            let r0 = dc[m][0] - 0.5 * kq;
            let r2 = dc[m][4] + (0..3).map(|l| i * kf[l] * cc[m][1 + l]).sum::<Complex64>() / 3.0 + kq / 6.0;
            let mut r1 = 0.0;
            for a in 0..3 {
                let tens: Complex64 = (0..3).map(|b| i * kf[b] * self.moment(&micro.values[m], |v| v[a] * v[b] * sqrt_mu(v))).sum();
                let z = dc[m][1 + a] + i * kf[a] * (cc[m][0] + 5.0 * cc[m][4]) + tens;
                r1 += z.norm_sqr();
            }
            res[0] += w * r0.norm_sqr();
            res[1] += w * r1;
            res[2] += w * r2.norm_sqr();
        }
        let scale = f.sobolev_norm2(0).sqrt();
        Ok(res.map(|r| if scale > 0.0 { r.sqrt() / scale } else { r.sqrt() }))
    }

    /// Residuals of the thirteen macroscopic equations at every stored
    /// time, with centred differences in `t` (second-order one-sided at
    /// the ends), relative to `|f|`.
    pub fn macro_residuals(&self, traj: &Trajectory, mode: EvolveMode, order: i32) -> Result<Vec<f64>, DynamicsError> {
        let n = traj.states.len();
        if n < 3 {
            return Err(DynamicsError::ShortTrajectory(n));
        }
        let dt = traj.times[1] - traj.times[0];
        let coeffs: Vec<Vec<[Complex64; 5]>> = traj.states.iter().map(|f| self.macro_coeffs(f)).collect();
        let micro: Vec<SpatioVelocityField> = traj.states.iter().map(|f| self.microscopic(f)).collect();
        let r: Vec<Vec<Vec<Complex64>>> = micro.iter().map(|f| f.values.iter().map(|v| self.macro_basis.coefficients(v)).collect()).collect();
        // l = -(i k.v + L_c)(I-P) f, i.e. the semi-discrete derivative of the
        // microscopic part in linear mode (plus Gamma in picard mode)
        let mut l = Vec::with_capacity(n);
        for (mf, f) in micro.iter().zip(&traj.states) {
            let mut d = self.derivative(mf, EvolveMode::Linear)?;
            if mode == EvolveMode::Picard {
                let full = self.derivative(f, EvolveMode::Picard)?;
                let lin = self.derivative(f, EvolveMode::Linear)?;
                for m in 0..d.values.len() {
                    for i in 0..d.values[m].len() {
                        d.values[m][i] += full.values[m][i] - lin.values[m][i];
                    }
                }
            }
            l.push(d.values.iter().map(|v| self.macro_basis.coefficients(v)).collect::<Vec<_>>());
        }
        let ddt = |s: usize, get: &dyn Fn(usize) -> Complex64| -> Complex64 {
            if s == 0 {
                (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * dt)
            } else if s == n - 1 {
                (3.0 * get(n - 1) - 4.0 * get(n - 2) + get(n - 3)) / (2.0 * dt)
            } else {
                (get(s + 1) - get(s - 1)) / (2.0 * dt)
            }
        };
        let iu = Complex64::new(0.0, 1.0);
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let f = &traj.states[s];
            let mut tot = 0.0;
            for (m, k) in f.modes.iter().enumerate() {
                let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
                let cm = &coeffs[s][m];
                let (a, b, c) = (cm[0], [cm[1], cm[2], cm[3]], cm[4]);
                let dta = ddt(s, &|t| coeffs[t][m][0]);
                let dtb: Vec<Complex64> = (0..3).map(|q| ddt(s, &|t| coeffs[t][m][1 + q])).collect();
                let dtc = ddt(s, &|t| coeffs[t][m][4]);
                let mut lhs = [Complex64::new(0.0, 0.0); 13];
                for q in 0..3 {
                    lhs[q] = iu * kf[q] * c;
                    lhs[3 + q] = dtc + iu * kf[q] * b[q];
                    lhs[9 + q] = dtb[q] + iu * kf[q] * a;
                }
                for (p, &(x, y)) in PAIRS.iter().enumerate() {
                    lhs[6 + p] = iu * kf[x] * b[y] + iu * kf[y] * b[x];
                }
                lhs[12] = dta;
                let mut e = 0.0;
                for q in 0..13 {
                    let dr = ddt(s, &|t| r[t][m][q]);
                    e += (lhs[q] - (-dr + l[s][m][q])).norm_sqr();
                }
                tot += multiplicity(*k) * (1.0 + k_norm2(*k)).powi(order - 1) * e;
            }
            let scale = f.sobolev_norm2(0).sqrt();
            out.push(if scale > 0.0 { tot.sqrt() / scale } else { tot.sqrt() });
        }
        Ok(out)
    }

    /// `sum_{|alpha| <= N-1} (I_a + I_b + I_c)` in Fourier variables.
    pub fn interaction(&self, f: &SpatioVelocityField, order: i32) -> f64 {
        let cc = self.macro_coeffs(f);
        let micro = self.microscopic(f);
        let iu = Complex64::new(0.0, 1.0);
        let mut tot = 0.0;
        for (m, k) in f.modes.iter().enumerate() {
            if *k == [0, 0, 0] {
                continue;
            }
            let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
            let w = multiplicity(*k) * alpha_weight(*k, order - 1);
            let r = self.macro_basis.coefficients(&micro.values[m]);
            let (a, b, c) = (cc[m][0], [cc[m][1], cc[m][2], cc[m][3]], cc[m][4]);
            let mut ia = Complex64::new(0.0, 0.0);
            let mut ib = Complex64::new(0.0, 0.0);
            let mut ic = Complex64::new(0.0, 0.0);
            for q in 0..3 {
                // (div b) a + d_i r_bi a
                ia += iu * kf[q] * (b[q] + r[9 + q]) * a.conj();
                // -r_c . grad c
                ic -= r[q] * (iu * kf[q] * c).conj();
                for j in 0..3 {
                    if j != q {
                        let p = PAIRS.iter().position(|&(x, y)| (x, y) == (q.min(j), q.max(j))).unwrap();
                        ib -= iu * kf[j] * r[6 + p] * b[q].conj();
                    }
                }
            }
            tot += w * (ia + ib + ic).re;
        }
        tot
    }

    /// `C` with `|I| <= C |f|^2_{L^2_v H^N_x}`, from the norms of the dual
    /// vectors of the coefficient maps.
    pub fn interaction_constant(&self) -> f64 {
        let g5 = self.op.projector.gram_inverse();
        let g13 = &self.macro_basis.gram_inv;
        let a = g5[(0, 0)].sqrt();
        let b = (1..4).map(|i| g5[(i, i)]).sum::<f64>().sqrt();
        let c = g5[(4, 4)].sqrt();
        let rb = (9..12).map(|i| g13[(i, i)]).sum::<f64>().sqrt();
        let rc = (0..3).map(|i| g13[(i, i)]).sum::<f64>().sqrt();
        let rij = (6..9).map(|i| g13[(i, i)]).sum::<f64>().sqrt();
        b * a + rb * a + rc * c + 2f64.sqrt() * rij * b
    }

    fn dissipation(&self, f: &SpatioVelocityField, order: i32) -> Result<f64, DynamicsError> {
        let micro = self.microscopic(f);
        let beta = self.op.params.order();
        let mut tot = 0.0;
        for (m, k) in f.modes.iter().enumerate() {
            let w = multiplicity(*k) * (1.0 + k_norm2(*k)).powi(order);
            let (re, im) = micro.mode_parts(m);
            let nn = |g: &GridFunction| -> Result<f64, DynamicsError> { Ok(self.norm.eval(g).map_err(|e| DynamicsError::Invalid(e.to_string()))?.total.powi(2)) };
            tot += w * (nn(&re)? + nn(&im)?);
            if *k != [0, 0, 0] {
                let (fr, fi) = f.mode_parts(m);
                let (pr, pi) = (fr.axpy(-1.0, &re), fi.axpy(-1.0, &im));
                tot += w * (pr.weighted_l2(beta).powi(2) + pi.weighted_l2(beta).powi(2));
            }
        }
        Ok(tot)
    }

    fn ledger(&self, traj: &Trajectory, cfg: &EvolveConfig, rho: f64) -> Result<EnergyLedger, DynamicsError> {
        let order = cfg.order;
        let macro_res = self.macro_residuals(traj, cfg.mode, order)?;
        let c_prime = 1.0;
        let n0 = traj.states[0].sobolev_norm2(order);
        let i0 = self.interaction(&traj.states[0], order);
        let mut c1 = 2f64.powi(-10);
        while (c1 + 1.0) * n0 - c_prime * i0 < 0.5 * n0 {
            c1 *= 2.0;
        }
        let mut rows = Vec::with_capacity(traj.states.len());
        for (s, f) in traj.states.iter().enumerate() {
            let norm2 = f.sobolev_norm2(order);
            let interaction = self.interaction(f, order);
            let row = LedgerRow {
                t: traj.times[s],
                norm2,
                dissipation: self.dissipation(f, order)?,
                interaction,
                energy: (c1 + 1.0) * norm2 - c_prime * interaction,
                res_cl: self.conservation_residuals(f, cfg.mode)?,
                res_macro: macro_res[s],
            };
            if [row.norm2, row.dissipation, row.interaction, row.energy, row.res_macro].iter().any(|x| !x.is_finite()) {
                return Err(DynamicsError::NonFinite("ledger"));
            }
            rows.push(row);
        }
        let (lambda_hat, envelope_ratio) = if n0 > 0.0 {
            let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.norm2.ln()).collect();
            let lam = -quad::slope(&t, &y);
            let env = rows.iter().map(|r| (r.norm2 / n0).sqrt() / (-0.5 * lam * r.t).exp()).fold(0.0, f64::max);
            (Some(lam), Some(env))
        } else {
            (None, None)
        };
        Ok(EnergyLedger {
            rows,
            c1,
            c_prime,
            interaction_constant: self.interaction_constant(),
            lambda_hat,
            envelope_ratio,
            spectral_radius: rho,
        })
    }
}

/// `sum_{|alpha| <= m} k^{2 alpha}`
fn alpha_weight(k: [i32; 3], m: i32) -> f64 {
    let mut tot = 0.0;
    for a in 0..=m {
        for b in 0..=m - a {
            for c in 0..=m - a - b {
                tot += (k[0] as f64).powi(2 * a) * (k[1] as f64).powi(2 * b) * (k[2] as f64).powi(2 * c);
            }
        }
    }
    tot
}

/// The x-means `(int a, int b, int c)` of a field, read off the zero mode.
pub fn global_means(f: &SpatioVelocityField) -> Result<MacroCoeffs, DynamicsError> {
    let proj = NullProjector::new(&f.grid)?;
    let re = GridFunction::from_values(&f.grid, f.values[0].iter().map(|z| z.re).collect())?;
    Ok(proj.coefficients(&re))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FnField, TestFunction, TestFunctionSpec};

    fn tf(seed: u64) -> TestFunction {
        TestFunction::new(TestFunctionSpec::random_gaussian_poly(seed)).unwrap()
    }

    #[test]
    fn projector_basics() {
        let g = VelocityGrid::new(6.0, 24).unwrap();
        let p = NullProjector::new(&g).unwrap();
        let m = GridFunction::from_fn(&g, sqrt_mu);
        let (pm, c) = p.project(&m);
        assert!(pm.axpy(-1.0, &m).max_abs() < 1e-10);
        assert!((c.a - 1.0).abs() < 1e-8 && c.c.abs() < 1e-8);
        let v1 = GridFunction::from_fn(&g, |v| v[0] * sqrt_mu(v));
        let c = p.coefficients(&v1);
        assert!((c.b[0] - 1.0).abs() < 1e-8 && c.a.abs() < 1e-8 && c.c.abs() < 1e-8 && c.b[1].abs() < 1e-8);
        let f = tf(3).sample(&g);
        let (pf, _) = p.project(&f);
        let (ppf, _) = p.project(&pf);
        assert!(ppf.axpy(-1.0, &pf).max_abs() < 1e-10);
        let coarse = VelocityGrid::new(6.0, 3).unwrap();
        assert!(NullProjector::new(&coarse).is_err());
    }

    #[test]
    fn nu_is_positive_and_grows() {
        let k = KernelParams::maxwell_molecules();
        let t = NuTable::new(&k, 12.0).unwrap();
        let t9 = NuTable::new(&KernelParams::from_inverse_power(9.0).unwrap(), 12.0).unwrap();
        println!("{} {} {} {}", t.slope_leading, t.fit_residual, t9.slope_leading, t9.fit_residual);
        // negative near the origin, where M'_* >= M_* on average
        assert!(t.values[0] < 0.0);
        assert!(t.values[16..].iter().all(|&v| v > 0.0));
        assert!(t.c1 > 0.0);
        assert!((t.slope_leading - k.order()).abs() <= 0.15, "{t:?}");
        assert!(t.slope_compact <= k.gamma + 0.2);
        // brute force at one radius with a finer rule
        let r = 2.0;
        let direct = {
            let v = [r, 0.0, 0.0];
            let angles = grazing_rule(k.s, 24, 24, 0.3);
            let mut acc = 0.0;
            for (vs, w) in quad::hermite_cube(16, [0.0; 3], 1.0) {
                let fr = CollisionFrame::new(v, vs).unwrap();
                for &(th, wt) in &angles {
                    for m in 0..48 {
                        let (_, vsp) = geometry::post_collision_unchecked(v, vs, fr.sigma(th, (m as f64 + 0.5) * TAU / 48.0));
                        acc += w * wt * TAU / 48.0 * sqrt_mu(vs) * (sqrt_mu(vs) - sqrt_mu(vsp));
                    }
                }
            }
            acc
        };
        assert!((t.nu_tilde([r, 0.0, 0.0]) / direct - 1.0).abs() < 1e-2, "{} {direct}", t.nu_tilde([r, 0.0, 0.0]));
    }

    #[test]
    fn dirichlet_form_is_symmetric_and_kills_invariants() {
        let k = KernelParams::maxwell_molecules();
        let g = tf(5);
        let h = tf(6);
        let (a, ea) = dirichlet_bilinear(&g, &h, &k, 100_000, 3).unwrap();
        let (b, _) = dirichlet_bilinear(&h, &g, &k, 100_000, 3).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        assert!(ea.is_finite());
        let inv = FnField(|v: Vec3| (1.0 + v[1] - 0.5 * norm2(v)) * sqrt_mu(v));
        let (z, _) = dirichlet_form(&inv, &k, 10_000, 1).unwrap();
        assert!(z.abs() < 1e-20, "{z}");
    }

    #[test]
    fn dirichlet_form_matches_the_trilinear_form() {
        use crate::trilinear::{gamma_sigma, QuadratureSpec};
        let k = KernelParams::maxwell_molecules();
        let g = TestFunction::new(TestFunctionSpec::gaussian([0.3, 0.0, -0.1], 1.5)).unwrap();
        let h = TestFunction::new(TestFunctionSpec::gaussian([0.0, 0.2, 0.0], 1.2)).unwrap();
        let m = FnField(sqrt_mu);
        let q = QuadratureSpec::monte_carlo(400_000, 5);
        let t1 = gamma_sigma(&m, &g, &h, &k, &q).unwrap();
        let t2 = gamma_sigma(&g, &m, &h, &k, &q).unwrap();
        let (d, ed) = dirichlet_bilinear(&g, &h, &k, 400_000, 5).unwrap();
        let lhs = -(t1.value + t2.value);
        let tol = 3.0 * (t1.error_estimate + t2.error_estimate + ed);
        assert!((lhs - d).abs() <= tol.max(0.05 * d.abs()), "{lhs} {d} tol {tol}");
    }

    fn small_operator() -> LinearizedOperator {
        let g = VelocityGrid::new(6.0, 12).unwrap();
        LinearizedOperator::assemble(&g, &KernelParams::maxwell_molecules(), &CollisionRule::default()).unwrap()
    }

    #[test]
    fn operator_kills_null_space_and_is_nonnegative() {
        let op = small_operator();
        let g = &op.grid;
        for e in NULL_BASIS {
            let x = GridFunction::from_fn(g, e);
            assert!(op.apply_l(&x).unwrap().l2() <= 1e-8 * x.l2());
            assert!(op.apply_l_raw(&x).unwrap().l2() <= 1e-8 * x.l2());
        }
        for seed in 0..10 {
            let x = tf(seed).sample(g);
            let q = op.quadratic_form(&x).unwrap();
            assert!(q >= -1e-3 * x.l2().powi(2), "{seed} {q}");
        }
        // L = N + K
        let x = tf(2).sample(g);
        let s = op.apply_n(&x).unwrap().axpy(1.0, &op.apply_k(&x).unwrap());
        assert!(s.axpy(-1.0, &op.apply_l_raw(&x).unwrap()).max_abs() < 1e-12);
        // conservative range
        let lx = op.apply_l(&x).unwrap();
        let c = op.projector.coefficients(&lx);
        assert!(c.a.abs() + c.c.abs() + c.b.iter().map(|b| b.abs()).sum::<f64>() < 1e-10);
    }

    #[test]
    fn operator_agrees_with_monte_carlo_form() {
        let op = small_operator();
        // wide enough for h = 1 to resolve G = g/M
        let g = TestFunction::new(TestFunctionSpec::gaussian([0.4, 0.0, 0.0], 3.0)).unwrap();
        let gs = g.sample(&op.grid);
        let grid_val = op.apply_l_raw(&gs).unwrap().inner(&gs);
        let free = apply_l_free(&gs, &op.params, &op.rule).unwrap().inner(&gs);
        assert!((grid_val - free).abs() <= 1e-10 * grid_val.abs());
        let (mc, err) = dirichlet_form(&g, &op.params, 400_000, 2).unwrap();
        assert!((grid_val - mc).abs() <= (4.0 * err).max(0.2 * mc), "{grid_val} {mc} {err}");
    }

    #[test]
    fn macro_basis_recovers_coefficients() {
        let g = VelocityGrid::new(6.0, 20).unwrap();
        let mb = MacroBasis::new(&g).unwrap();
        let want: Vec<f64> = (0..13).map(|i| 0.1 * i as f64 - 0.4).collect();
        let f: Vec<Complex64> = (0..g.len())
            .map(|i| Complex64::new((0..13).map(|l| want[l] * MACRO_BASIS[l](g.node(i))).sum(), 0.0))
            .collect();
        let got = mb.coefficients(&f);
        for l in 0..13 {
            assert!((got[l].re - want[l]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let op = small_operator();
        let norm = AnisotropicNorm::new(&op.grid, &op.params).unwrap();
        let ev = Evolver::new(&op, &norm).unwrap();
        let f0 = SpatioVelocityField::zeros(&op.grid, 1);
        let cfg = EvolveConfig {
            t_final: 0.1,
            ..Default::default()
        };
        let (ledger, traj) = ev.evolve(&f0, &cfg).unwrap();
        assert!(traj.states.iter().all(|s| s.sobolev_norm2(0) == 0.0));
        assert!(ledger.lambda_hat.is_none());
        assert!(ledger.rows.iter().all(|r| r.interaction == 0.0 && r.energy == 0.0));
        let bad = EvolveConfig {
            dt: 1.0,
            t_final: 2.0,
            ..Default::default()
        };
        assert!(matches!(ev.evolve(&f0, &bad), Err(DynamicsError::Unstable(_))));
    }

    #[test]
    fn picard_mode_runs_and_conserves_on_a_tiny_grid() {
        let g = VelocityGrid::new(5.0, 8).unwrap();
        let op = LinearizedOperator::assemble(&g, &KernelParams::maxwell_molecules(), &CollisionRule::default()).unwrap();
        let norm = AnisotropicNorm::new(&g, &op.params).unwrap();
        let ev = Evolver::new(&op, &norm).unwrap();
        let f0 = SpatioVelocityField::random(&g, 0, 1e-2, 4).unwrap();
        let cfg = EvolveConfig {
            dt: 0.025,
            t_final: 0.1,
            mode: EvolveMode::Picard,
            order: 1,
        };
        let (ledger, traj) = ev.evolve(&f0, &cfg).unwrap();
        assert!(traj.states.last().unwrap().sobolev_norm2(0) <= f0.sobolev_norm2(0) * 1.01);
        let m = global_means(traj.states.last().unwrap()).unwrap();
        assert!(m.a.abs() < 1e-8 && m.c.abs() < 1e-8);
        assert!(ledger.rows.iter().all(|r| r.dissipation >= 0.0));
    }

    fn shared_operator() -> &'static LinearizedOperator {
        static OP: std::sync::OnceLock<LinearizedOperator> = std::sync::OnceLock::new();
        OP.get_or_init(small_operator)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn operator_is_self_adjoint(s1 in 0u64..1000, s2 in 0u64..1000) {
            let op = shared_operator();
            let g = tf(s1).sample(&op.grid);
            let h = tf(s2).sample(&op.grid);
            let lhs = op.apply_l(&g).unwrap().inner(&h);
            let rhs = g.inner(&op.apply_l(&h).unwrap());
            let scale = (op.quadratic_form(&g).unwrap() * op.quadratic_form(&h).unwrap()).sqrt();
            // the spline G-form is symmetric only up to discretization error
            proptest::prop_assert!((lhs - rhs).abs() <= 0.1 * scale, "{} {} scale {}", lhs, rhs, scale);
        }
    }
}
