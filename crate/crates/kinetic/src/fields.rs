//! Truncated velocity grids, scalar fields on them, cubic-spline
//! interpolation, test-function families and field files.

use crate::geometry::{norm2, Vec3};
use crate::quad;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field header: {0}")]
    Header(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unsupported test-function kind `{0}`")]
    UnsupportedKind(String),
    #[error("invalid test-function spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Trapezoid,
    GaussLegendre,
}

/// Tensor grid on `[-R, R]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub radius: f64,
    pub n: usize,
    pub rule: Rule,
    axis: Vec<f64>,
    axis_w: Vec<f64>,
}

impl VelocityGrid {
    /// Uniform grid with trapezoid weights.
    pub fn new(radius: f64, n: usize) -> Result<Arc<Self>, FieldError> {
        Self::with_rule(radius, n, Rule::Trapezoid)
    }

    pub fn with_rule(radius: f64, n: usize, rule: Rule) -> Result<Arc<Self>, FieldError> {
        if !(radius > 0.0 && radius.is_finite()) || n < 2 {
            return Err(FieldError::InvalidGrid(format!("R = {radius}, n = {n}")));
        }
        let (axis, axis_w) = match rule {
            Rule::Trapezoid => {
                let h = 2.0 * radius / (n - 1) as f64;
                let x = (0..n).map(|i| -radius + h * i as f64).collect();
                let mut w = vec![h; n];
                w[0] = 0.5 * h;
                w[n - 1] = 0.5 * h;
                (x, w)
            }
            Rule::GaussLegendre => quad::gauss_legendre_on(n, -radius, radius).into_iter().unzip(),
        };
        Ok(Arc::new(Self {
            radius,
            n,
            rule,
            axis,
            axis_w,
        }))
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn axis_weights(&self) -> &[f64] {
        &self.axis_w
    }

    /// Node spacing of a uniform grid.
    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.n - 1) as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    pub fn unindex(&self, idx: usize) -> (usize, usize, usize) {
        let n = self.n;
        (idx / (n * n), (idx / n) % n, idx % n)
    }

    #[inline]
    pub fn node(&self, idx: usize) -> Vec3 {
        let (i, j, k) = self.unindex(idx);
        [self.axis[i], self.axis[j], self.axis[k]]
    }

    #[inline]
    pub fn weight(&self, idx: usize) -> f64 {
        let (i, j, k) = self.unindex(idx);
        self.axis_w[i] * self.axis_w[j] * self.axis_w[k]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    pub fn same_as(&self, other: &VelocityGrid) -> bool {
        self == other
    }

    /// Local cubic Lagrange stencil on a uniform grid with `n >= 4`: first
    /// node index per axis and the four weights. Reproduces cubic
    /// polynomials exactly, including outside the box.
    #[inline]
    pub fn lagrange_stencil(&self, v: Vec3) -> ([usize; 3], [[f64; 4]; 3]) {
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for d in 0..3 {
            let u = (v[d] + self.radius) / h;
            let i = (u.floor() - 1.0).clamp(0.0, (self.n - 4) as f64) as usize;
            let t = u - i as f64;
            base[d] = i;
            w[d] = [
                -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
                t * (t - 2.0) * (t - 3.0) / 2.0,
                -t * (t - 1.0) * (t - 3.0) / 2.0,
                t * (t - 1.0) * (t - 2.0) / 6.0,
            ];
        }
        (base, w)
    }

    /// Six-point stencil of the cubic B-spline quasi-interpolant with
    /// coefficients `(-G_{k-1} + 8 G_k - G_{k+1}) / 6`: C^2 inside, exact
    /// for cubics, O(h^4). Cells whose stencil would leave the grid (and
    /// points outside the box) use the cubic Lagrange weights, padded.
    /// Needs `n >= 6`.
    #[inline]
    pub fn smooth_stencil(&self, v: Vec3) -> ([usize; 3], [[f64; 6]; 3]) {
        let (lb, lw) = self.lagrange_stencil(v);
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut w = [[0.0; 6]; 3];
        for d in 0..3 {
            let u = (v[d] + self.radius) / h;
            let cell = u.floor();
            let b = (cell - 2.0).clamp(0.0, (self.n - 6) as f64) as usize;
            base[d] = b;
            if cell >= 2.0 && cell + 3.0 <= (self.n - 1) as f64 {
                let t = u - cell;
                let (t2, t3) = (t * t, t * t * t);
                let bs = [(1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0];
                // B-spline k sits on node cell-1+k, i.e. stencil slot k+1
                for (k, bk) in bs.iter().enumerate() {
                    w[d][k] -= bk / 6.0;
                    w[d][k + 1] += bk * 8.0 / 6.0;
                    w[d][k + 2] -= bk / 6.0;
                }
            } else {
                let off = lb[d] - b;
                w[d][off..off + 4].copy_from_slice(&lw[d]);
            }
        }
        (base, w)
    }
}

/// Scalar values on the nodes of a grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: Arc<VelocityGrid>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &Arc<VelocityGrid>) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &Arc<VelocityGrid>, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::GridMismatch(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn from_fn<F: Fn(Vec3) -> f64 + Sync>(grid: &Arc<VelocityGrid>, f: F) -> Self {
        use rayon::prelude::*;
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.node(i))).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn sample(grid: &Arc<VelocityGrid>, f: &(impl VelocityField + ?Sized)) -> Self {
        Self::from_fn(grid, |v| f.eval(v))
    }

    pub fn integrate(&self) -> f64 {
        let g = &self.grid;
        quad::det_sum(self.values.len(), 4096, |i| g.weight(i) * self.values[i])
    }

    pub fn inner(&self, other: &GridFunction) -> f64 {
        let g = &self.grid;
        quad::det_sum(self.values.len(), 4096, |i| g.weight(i) * self.values[i] * other.values[i])
    }

    pub fn l2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// `(int <v>^beta f^2)^{1/2}`
    pub fn weighted_l2(&self, beta: f64) -> f64 {
        let g = &self.grid;
        quad::det_sum(self.values.len(), 4096, |i| {
            let v = g.node(i);
            g.weight(i) * (1.0 + norm2(v)).powf(0.5 * beta) * self.values[i] * self.values[i]
        })
        .sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|x| c * x).collect(),
        }
    }

    /// `self + c other`
    pub fn axpy(&self, c: f64, other: &GridFunction) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn spline(&self) -> Result<Spline, FieldError> {
        Spline::new(self)
    }
}

/// Free-standing Maxwellian `mu(v) = (2 pi)^{-3/2} e^{-|v|^2/2}`.
#[inline]
pub fn mu(v: Vec3) -> f64 {
    (2.0 * PI).powf(-1.5) * (-0.5 * norm2(v)).exp()
}

/// `M = sqrt(mu)`.
#[inline]
pub fn sqrt_mu(v: Vec3) -> f64 {
    (2.0 * PI).powf(-0.75) * (-0.25 * norm2(v)).exp()
}

pub fn maxwellian(grid: &Arc<VelocityGrid>) -> GridFunction {
    GridFunction::from_fn(grid, mu)
}

pub fn sqrt_maxwellian(grid: &Arc<VelocityGrid>) -> GridFunction {
    GridFunction::from_fn(grid, sqrt_mu)
}

/// Anything that can be evaluated at an arbitrary velocity.
pub trait VelocityField: Sync {
    fn eval(&self, v: Vec3) -> f64;
}

/// Adapter turning a closure into a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<F: Fn(Vec3) -> f64 + Sync> VelocityField for FnField<F> {
    fn eval(&self, v: Vec3) -> f64 {
        (self.0)(v)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn eval(&self, v: Vec3) -> f64 {
        (**self).eval(v)
    }
}

impl<T: VelocityField + ?Sized + Send> VelocityField for Box<T> {
    fn eval(&self, v: Vec3) -> f64 {
        (**self).eval(v)
    }
}

/// The zero field.
pub struct Zero;

impl VelocityField for Zero {
    fn eval(&self, _: Vec3) -> f64 {
        0.0
    }
}

/// Not-a-knot cubic spline coefficients along one uniform axis:
/// `c = S y` with `S` of shape `(n+2) x n`.
fn prefilter(n: usize) -> DMatrix<f64> {
    let m = n + 2;
    let mut a = DMatrix::<f64>::zeros(m, m);
    // rows 1..=n: interpolation at node i, coefficients c_{i-1}, c_i, c_{i+1}
    // (stored at offset +1)
    for i in 0..n {
        a[(i + 1, i)] = 1.0 / 6.0;
        a[(i + 1, i + 1)] = 4.0 / 6.0;
        a[(i + 1, i + 2)] = 1.0 / 6.0;
    }
    if n >= 4 {
        // third-derivative continuity at the second and penultimate nodes
        for (row, base) in [(0usize, 0usize), (m - 1, n - 3)] {
            for (o, c) in [-1.0, 4.0, -6.0, 4.0, -1.0].iter().enumerate() {
                a[(row, base + o)] = *c;
            }
        }
    } else {
        // natural end conditions
        a[(0, 0)] = 1.0;
        a[(0, 1)] = -2.0;
        a[(0, 2)] = 1.0;
        a[(m - 1, m - 3)] = 1.0;
        a[(m - 1, m - 2)] = -2.0;
        a[(m - 1, m - 1)] = 1.0;
    }
    let mut rhs = DMatrix::<f64>::zeros(m, n);
    for i in 0..n {
        rhs[(i + 1, i)] = 1.0;
    }
    a.lu().solve(&rhs).expect("spline system is nonsingular")
}

/// Tensor-product cubic B-spline interpolant of a uniform-grid function.
/// Outside the grid box the boundary polynomial pieces are continued.
#[derive(Debug, Clone)]
pub struct Spline {
    x0: f64,
    h: f64,
    n: usize,
    radius: f64,
    coef: Vec<f64>,
}

#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

#[inline]
fn bspline_dweights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [-0.5 * u * u, (9.0 * t * t - 12.0 * t) / 6.0, (-9.0 * t * t + 6.0 * t + 3.0) / 6.0, 0.5 * t * t]
}

impl Spline {
    pub fn new(f: &GridFunction) -> Result<Self, FieldError> {
        let g = &f.grid;
        if g.rule != Rule::Trapezoid {
            return Err(FieldError::InvalidGrid("spline interpolation needs a uniform grid".into()));
        }
        let n = g.n;
        let s = prefilter(n);
        let coef = apply_prefilter(&s, n, &f.values);
        Ok(Self {
            x0: -g.radius,
            h: g.spacing(),
            n,
            radius: g.radius,
            coef,
        })
    }

    /// Cell index and local coordinate along one axis.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let u = (x - self.x0) / self.h;
        let i = (u.floor().max(0.0) as usize).min(self.n - 2);
        (i, u - i as f64)
    }

    /// Stencil `(flat coefficient offsets, weights)` for the point.
    #[inline]
    pub fn stencil(&self, v: Vec3) -> ([usize; 3], [[f64; 4]; 3]) {
        let m = self.n + 2;
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for d in 0..3 {
            let (i, t) = self.locate(v[d]);
            base[d] = i;
            w[d] = bspline_weights(t);
        }
        let _ = m;
        (base, w)
    }

    #[inline]
    pub fn eval(&self, v: Vec3) -> f64 {
        let (base, w) = self.stencil(v);
        let m = self.n + 2;
        let mut acc = 0.0;
        for a in 0..4 {
            let ia = (base[0] + a) * m;
            let mut acc_b = 0.0;
            for b in 0..4 {
                let ib = (ia + base[1] + b) * m + base[2];
                let c = &self.coef[ib..ib + 4];
                acc_b += w[1][b] * (w[2][0] * c[0] + w[2][1] * c[1] + w[2][2] * c[2] + w[2][3] * c[3]);
            }
            acc += w[0][a] * acc_b;
        }
        acc
    }

    pub fn gradient(&self, v: Vec3) -> Vec3 {
        let m = self.n + 2;
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        let mut dw = [[0.0; 4]; 3];
        for d in 0..3 {
            let (i, t) = self.locate(v[d]);
            base[d] = i;
            w[d] = bspline_weights(t);
            dw[d] = bspline_dweights(t);
        }
        let mut g = [0.0; 3];
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let x = self.coef[((base[0] + a) * m + base[1] + b) * m + base[2] + c];
                    g[0] += dw[0][a] * w[1][b] * w[2][c] * x;
                    g[1] += w[0][a] * dw[1][b] * w[2][c] * x;
                    g[2] += w[0][a] * w[1][b] * dw[2][c] * x;
                }
            }
        }
        [g[0] / self.h, g[1] / self.h, g[2] / self.h]
    }

    pub fn inside(&self, v: Vec3) -> bool {
        v.iter().all(|x| x.abs() <= self.radius)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }
}

/// Applies the prefilter along all three axes of an `n^3` array, giving an
/// `(n+2)^3` coefficient array.
fn apply_prefilter(s: &DMatrix<f64>, n: usize, values: &[f64]) -> Vec<f64> {
    let m = n + 2;
    // axis 2
    let mut a = vec![0.0; n * n * m];
    for ij in 0..n * n {
        for p in 0..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += s[(p, k)] * values[ij * n + k];
            }
            a[ij * m + p] = acc;
        }
    }
    // axis 1
    let mut b = vec![0.0; n * m * m];
    for i in 0..n {
        for q in 0..m {
            for p in 0..m {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += s[(q, j)] * a[(i * n + j) * m + p];
                }
                b[(i * m + q) * m + p] = acc;
            }
        }
    }
    // axis 0
    let mut c = vec![0.0; m * m * m];
    for r in 0..m {
        for qp in 0..m * m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += s[(r, i)] * b[i * m * m + qp];
            }
            c[r * m * m + qp] = acc;
        }
    }
    c
}

/// One-dimensional prefilter matrix (exposed for operator assembly).
pub fn spline_prefilter(n: usize) -> DMatrix<f64> {
    prefilter(n)
}

/// Grid functions evaluate through their spline and vanish outside the box.
pub struct Interpolated {
    spline: Spline,
}

impl Interpolated {
    pub fn new(f: &GridFunction) -> Result<Self, FieldError> {
        Ok(Self { spline: f.spline()? })
    }

    pub fn spline(&self) -> &Spline {
        &self.spline
    }
}

impl VelocityField for Interpolated {
    fn eval(&self, v: Vec3) -> f64 {
        if self.spline.inside(v) {
            self.spline.eval(v)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    GaussianPoly,
    Hermite,
    Bump,
}

impl std::str::FromStr for TestKind {
    type Err = FieldError;
    fn from_str(s: &str) -> Result<Self, FieldError> {
        match s {
            "gaussian_poly" => Ok(Self::GaussianPoly),
            "hermite" => Ok(Self::Hermite),
            "bump" => Ok(Self::Bump),
            other => Err(FieldError::UnsupportedKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub kind: TestKind,
    pub center: Vec3,
    /// Gaussian width `w` in `exp(-|v-c|^2/w)`, or the bump radius.
    pub width: f64,
    pub degree: u32,
    pub seed: u64,
}

impl TestFunctionSpec {
    /// Seeded member of the Gaussian-polynomial family: centre in the ball
    /// of radius 1/2, width in [1, 2], degree up to 4.
    pub fn random_gaussian_poly(seed: u64) -> Self {
        let mut rng = quad::rng_for(seed, 0x7e57, 0);
        let center = loop {
            let c: Vec3 = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            if norm2(c) <= 0.25 {
                break c;
            }
        };
        Self {
            kind: TestKind::GaussianPoly,
            center,
            width: rng.gen_range(1.0..2.0),
            degree: rng.gen_range(0..=4),
            seed,
        }
    }

    pub fn gaussian(center: Vec3, width: f64) -> Self {
        Self {
            kind: TestKind::GaussianPoly,
            center,
            width,
            degree: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.degree > 4 {
            return Err(FieldError::InvalidSpec(format!("degree {} exceeds 4", self.degree)));
        }
        if !(self.width > 0.0 && self.width.is_finite()) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::InvalidSpec("width must be positive and centre finite".into()));
        }
        Ok(())
    }
}

/// Analytic test function `P(v - c) exp(-|v - c|^2 / w)` (or a compact bump).
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub spec: TestFunctionSpec,
    /// Monomial exponents and coefficients of `P`.
    terms: Vec<([u8; 3], f64)>,
}

fn hermite_coeffs(n: usize) -> Vec<f64> {
    // probabilists' He_n
    let mut p0 = vec![1.0];
    if n == 0 {
        return p0;
    }
    let mut p1 = vec![0.0, 1.0];
    for k in 1..n {
        let mut p2 = vec![0.0; k + 2];
        for (i, c) in p1.iter().enumerate() {
            p2[i + 1] += c;
        }
        for (i, c) in p0.iter().enumerate() {
            p2[i] -= k as f64 * c;
        }
        p0 = p1;
        p1 = p2;
    }
    p1
}

impl TestFunction {
    pub fn new(spec: TestFunctionSpec) -> Result<Self, FieldError> {
        spec.validate()?;
        let mut rng = quad::rng_for(spec.seed, 0xc0ef, 0);
        let d = spec.degree as usize;
        let terms = match spec.kind {
            TestKind::GaussianPoly => {
                let mut t = Vec::new();
                for a in 0..=d {
                    for b in 0..=d - a {
                        for c in 0..=d - a - b {
                            let coef = if a + b + c == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) };
                            t.push(([a as u8, b as u8, c as u8], coef));
                        }
                    }
                }
                t
            }
            TestKind::Hermite => {
                // a single multi-index alpha with |alpha| = degree
                let a = rng.gen_range(0..=d);
                let b = rng.gen_range(0..=d - a);
                let c = d - a - b;
                let (ha, hb, hc) = (hermite_coeffs(a), hermite_coeffs(b), hermite_coeffs(c));
                let mut t = Vec::new();
                for (i, x) in ha.iter().enumerate() {
                    for (j, y) in hb.iter().enumerate() {
                        for (k, z) in hc.iter().enumerate() {
                            let coef = x * y * z;
                            if coef != 0.0 {
                                t.push(([i as u8, j as u8, k as u8], coef));
                            }
                        }
                    }
                }
                t
            }
            TestKind::Bump => vec![([0, 0, 0], 1.0)],
        };
        Ok(Self { spec, terms })
    }

    #[inline]
    fn poly(&self, u: Vec3) -> f64 {
        if self.terms.len() == 1 {
            return self.terms[0].1;
        }
        let mut pw = [[1.0; 5]; 3];
        for d in 0..3 {
            for e in 1..5 {
                pw[d][e] = pw[d][e - 1] * u[d];
            }
        }
        self.terms
            .iter()
            .map(|(e, c)| c * pw[0][e[0] as usize] * pw[1][e[1] as usize] * pw[2][e[2] as usize])
            .sum()
    }

    /// Extension to `R^4` agreeing with the function on the paraboloid
    /// `x_4 = |x|^2/2`.
    pub fn extension(&self, x: [f64; 4]) -> f64 {
        let v = [x[0], x[1], x[2]];
        let c = self.spec.center;
        let u = [v[0] - c[0], v[1] - c[1], v[2] - c[2]];
        let off = x[3] - 0.5 * norm2(v);
        let r2 = norm2(u) + off * off;
        self.profile(r2) * self.poly(u)
    }

    #[inline]
    fn profile(&self, r2: f64) -> f64 {
        let w = self.spec.width;
        match self.spec.kind {
            TestKind::Bump => {
                let q = 1.0 - r2 / (w * w);
                if q <= 0.0 {
                    0.0
                } else {
                    (-1.0 / q).exp()
                }
            }
            _ => (-r2 / w).exp(),
        }
    }

    pub fn sample(&self, grid: &Arc<VelocityGrid>) -> GridFunction {
        GridFunction::sample(grid, self)
    }
}

impl VelocityField for TestFunction {
    #[inline]
    fn eval(&self, v: Vec3) -> f64 {
        let c = self.spec.center;
        let u = [v[0] - c[0], v[1] - c[1], v[2] - c[2]];
        self.profile(norm2(u)) * self.poly(u)
    }
}

pub fn make_test_function(spec: TestFunctionSpec, grid: &Arc<VelocityGrid>) -> Result<(GridFunction, TestFunction), FieldError> {
    let tf = TestFunction::new(spec)?;
    Ok((tf.sample(grid), tf))
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    format: String,
    #[serde(rename = "R")]
    radius: f64,
    n: usize,
    order: String,
    #[serde(default = "default_rule")]
    rule: Rule,
}

fn default_rule() -> Rule {
    Rule::Trapezoid
}

const FIELD_FORMAT: &str = "gf-v1";
const FIELD_ORDER: &str = "row-major x,y,z";

pub fn save_field(path: &Path, f: &GridFunction) -> Result<(), FieldError> {
    let header = FieldHeader {
        format: FIELD_FORMAT.into(),
        radius: f.grid.radius,
        n: f.grid.n,
        order: FIELD_ORDER.into(),
        rule: f.grid.rule,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header).map_err(|e| FieldError::Header(e.to_string()))?;
    out.write_all(b"\n")?;
    for x in &f.values {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a field file written for `grid`.
pub fn load_field(path: &Path, grid: &Arc<VelocityGrid>) -> Result<GridFunction, FieldError> {
    let mut rd = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    if rd.read_line(&mut line)? == 0 {
        return Err(FieldError::Header("empty file".into()));
    }
    let header: FieldHeader = serde_json::from_str(line.trim_end()).map_err(|e| FieldError::Header(e.to_string()))?;
    if header.format != FIELD_FORMAT || header.order != FIELD_ORDER {
        return Err(FieldError::Header(format!("unknown format {} / order {}", header.format, header.order)));
    }
    if header.n != grid.n || header.radius != grid.radius || header.rule != grid.rule {
        return Err(FieldError::GridMismatch(format!(
            "file has n={} R={}, expected n={} R={}",
            header.n, header.radius, grid.n, grid.radius
        )));
    }
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * grid.len() {
        return Err(FieldError::GridMismatch(format!("payload has {} bytes, expected {}", bytes.len(), 8 * grid.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    GridFunction::from_values(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn moment(grid: &Arc<VelocityGrid>, k: i32) -> f64 {
        GridFunction::from_fn(grid, |v| norm2(v).powi(k) * mu(v)).integrate()
    }

    #[test]
    fn maxwellian_moments() {
        let g = VelocityGrid::new(8.0, 48).unwrap();
        assert!((moment(&g, 0) - 1.0).abs() < 1e-6);
        assert!((moment(&g, 1) - 3.0).abs() < 1e-5);
        assert!((moment(&g, 2) - 15.0).abs() < 1e-4);
        let m = sqrt_maxwellian(&g);
        let u = maxwellian(&g);
        for i in (0..g.len()).step_by(97) {
            assert!((m.values[i] * m.values[i] - u.values[i]).abs() < 1e-14);
        }
        assert_eq!(mu([0.0; 3]), (2.0 * PI).powf(-1.5));
        let ws: f64 = g.weights().iter().sum();
        assert!((ws - 4096.0).abs() < 1e-9 * 4096.0, "{ws}");
    }

    #[test]
    fn gauss_legendre_grid() {
        let g = VelocityGrid::with_rule(8.0, 32, Rule::GaussLegendre).unwrap();
        assert!((moment(&g, 1) - 3.0).abs() < 1e-8);
    }

    #[test]
    fn trapezoid_convergence_is_fast() {
        let errs: Vec<f64> = [6usize, 11, 21]
            .iter()
            .map(|&n| (moment(&VelocityGrid::new(8.0, n).unwrap(), 0) - 1.0).abs())
            .collect();
        assert!(errs[0] / errs[1] >= 3.0 && errs[1] / errs[2].max(1e-300) >= 3.0, "{errs:?}");
    }

    #[test]
    fn weighted_l2_against_radial_oracle() {
        let g = VelocityGrid::new(8.0, 48).unwrap();
        let f = maxwellian(&g);
        assert_eq!(GridFunction::zeros(&g).weighted_l2(2.0), 0.0);
        assert!((f.weighted_l2(0.0) - f.l2()).abs() < 1e-15);
        let radial = |r: f64| 4.0 * PI * r * r * (1.0 + r * r) * mu([r, 0.0, 0.0]).powi(2);
        let (oracle, _) = quad::adaptive_simpson(&radial, 0.0, 12.0, 1e-14, 40);
        let got = f.weighted_l2(2.0);
        assert!((got * got - oracle).abs() < 1e-5 * oracle);
    }

    #[test]
    fn spline_reproduces_quadratics_everywhere() {
        let g = VelocityGrid::new(4.0, 9).unwrap();
        let p = |v: Vec3| 1.0 + 0.5 * v[0] - v[1] * v[2] + 0.25 * norm2(v) + 0.1 * v[0] * v[0] * v[1];
        let s = GridFunction::from_fn(&g, p).spline().unwrap();
        for v in [[0.3, -1.7, 2.2], [3.9, 3.9, -3.9], [5.0, -6.0, 0.1]] {
            assert!((s.eval(v) - p(v)).abs() < 1e-10, "{v:?}");
        }
        let gr = s.gradient([0.3, -1.7, 2.2]);
        let exact = [0.5 + 0.15 + 0.2 * 0.3 * -1.7, 2.2 * -1.0 - 0.85 + 0.1 * 0.09, 1.7 + 1.1];
        for d in 0..3 {
            assert!((gr[d] - exact[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn spline_interpolates_smooth_function() {
        let g = VelocityGrid::new(6.0, 33).unwrap();
        let f = GridFunction::from_fn(&g, mu);
        let s = f.spline().unwrap();
        for i in (0..g.len()).step_by(131) {
            assert!((s.eval(g.node(i)) - f.values[i]).abs() < 1e-13);
        }
        let err = (s.eval([0.31, -0.27, 0.55]) - mu([0.31, -0.27, 0.55])).abs();
        assert!(err < 5e-4 * mu([0.0; 3]), "{err}");
    }

    #[test]
    fn test_functions_deterministic_and_decaying() {
        let g = VelocityGrid::new(8.0, 17).unwrap();
        let spec = TestFunctionSpec::gaussian(TestFunctionSpec::random_gaussian_poly(3).center, 1.5);
        let tf = TestFunction::new(spec).unwrap();
        let v = [0.4, 0.1, -0.2];
        let c = spec.center;
        assert!((tf.eval(v) - (-norm2([v[0] - c[0], v[1] - c[1], v[2] - c[2]]) / 1.5).exp()).abs() < 1e-15);
        for seed in 0..10 {
            let spec = TestFunctionSpec::random_gaussian_poly(seed);
            let (a, tf) = make_test_function(spec, &g).unwrap();
            let (b, _) = make_test_function(spec, &g).unwrap();
            assert_eq!(a.values, b.values);
            // shell |v| = R
            let bound = 50.0 * (-(8.0f64 - 0.5).powi(2) / spec.width).exp() * 8f64.powi(4);
            for i in 0..200 {
                let t = PI * (i as f64 + 0.5) / 200.0;
                let p = 2.399 * i as f64;
                let v = [8.0 * t.sin() * p.cos(), 8.0 * t.sin() * p.sin(), 8.0 * t.cos()];
                assert!(tf.eval(v).abs() <= bound);
            }
        }
        assert!("fourier".parse::<TestKind>().is_err());
        let mut bad = TestFunctionSpec::random_gaussian_poly(1);
        bad.degree = 5;
        assert!(TestFunction::new(bad).is_err());
    }

    #[test]
    fn hermite_kind_and_bump() {
        let spec = TestFunctionSpec {
            kind: TestKind::Hermite,
            center: [0.0; 3],
            width: 4.0,
            degree: 3,
            seed: 5,
        };
        let tf = TestFunction::new(spec).unwrap();
        // orthogonal to M for degree >= 1
        let g = VelocityGrid::new(10.0, 41).unwrap();
        let m = sqrt_maxwellian(&g);
        assert!(tf.sample(&g).inner(&m).abs() < 1e-10);
        let bump = TestFunction::new(TestFunctionSpec {
            kind: TestKind::Bump,
            center: [1.0, 0.0, 0.0],
            width: 0.5,
            degree: 0,
            seed: 0,
        })
        .unwrap();
        assert_eq!(bump.eval([0.0; 3]), 0.0);
        assert!((bump.eval([1.0, 0.0, 0.0]) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn extension_restricts_to_function() {
        let tf = TestFunction::new(TestFunctionSpec::random_gaussian_poly(11)).unwrap();
        for v in [[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5]] {
            let x = [v[0], v[1], v[2], 0.5 * norm2(v)];
            assert!((tf.extension(x) - tf.eval(v)).abs() < 1e-15);
            assert!(tf.extension([v[0], v[1], v[2], x[3] + 0.5]).abs() < tf.eval(v).abs() + 1e-300 || tf.eval(v) == 0.0);
        }
    }

    #[test]
    fn field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = VelocityGrid::new(8.0, 9).unwrap();
        let f = GridFunction::from_fn(&g, |v| v[0].sin() * 1e-300 + v[1] / 3.0);
        let p = dir.path().join("f.gf");
        save_field(&p, &f).unwrap();
        let back = load_field(&p, &g).unwrap();
        assert!(f.values.iter().zip(&back.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let other = VelocityGrid::new(8.0, 11).unwrap();
        assert!(matches!(load_field(&p, &other), Err(FieldError::GridMismatch(_))));
        let empty = dir.path().join("e.gf");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(load_field(&empty, &g), Err(FieldError::Header(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weighted_l2_is_a_norm(s1 in 0u64..1000, s2 in 0u64..1000, lam in -5.0f64..5.0, beta in -1.0f64..2.0) {
            let g = VelocityGrid::new(6.0, 13).unwrap();
            let a = TestFunction::new(TestFunctionSpec::random_gaussian_poly(s1)).unwrap().sample(&g);
            let b = TestFunction::new(TestFunctionSpec::random_gaussian_poly(s2)).unwrap().sample(&g);
            let na = a.weighted_l2(beta);
            prop_assert!((a.scaled(lam).weighted_l2(beta) - lam.abs() * na).abs() <= 1e-10 * na.max(1e-300));
            prop_assert!(a.axpy(1.0, &b).weighted_l2(beta) <= na + b.weighted_l2(beta) + 1e-10);
        }
    }
}
