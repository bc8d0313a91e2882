//! Collision kernel `B = Phi(|v - v_*|) b(cos theta)`, its angular
//! singularity and the dyadic decomposition in `|v - v'|`.

use crate::geometry::{self, GeometryError, Vec3};
use crate::quad;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("inverse-power exponent requires p > 3 (gamma + 2s >= 0 ensures a spectral gap); got p = {0}")]
    InversePower(f64),
    #[error("invalid kernel parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("angular quadrature did not converge (residual {residual:e})")]
    Quadrature { residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KineticMode {
    /// `Phi(r) = C_Phi r^gamma`
    #[default]
    Power,
    /// `Phi(r) = C_Phi <r>^gamma`
    Regularized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub gamma: f64,
    pub s: f64,
    #[serde(default = "one")]
    pub c_b: f64,
    #[serde(default = "one")]
    pub c_phi: f64,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub kinetic_mode: KineticMode,
}

fn one() -> f64 {
    1.0
}

impl KernelParams {
    pub fn new(gamma: f64, s: f64) -> Result<Self, KernelError> {
        let k = Self {
            gamma,
            s,
            c_b: 1.0,
            c_phi: 1.0,
            p: None,
            kinetic_mode: KineticMode::Power,
        };
        k.validate()?;
        Ok(k)
    }

    /// Inverse-power-law interaction `r^{1-p}`.
    pub fn from_inverse_power(p: f64) -> Result<Self, KernelError> {
        if !(p > 3.0) || !p.is_finite() {
            return Err(KernelError::InversePower(p));
        }
        let mut k = Self::new((p - 5.0) / (p - 1.0), 1.0 / (p - 1.0))?;
        k.p = Some(p);
        Ok(k)
    }

    pub fn maxwell_molecules() -> Self {
        Self::from_inverse_power(5.0).expect("p = 5 is admissible")
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let Self { gamma, s, c_b, c_phi, .. } = *self;
        if !(s > 0.0 && s < 1.0) {
            return Err(KernelError::Invalid(format!("s = {s} must lie in (0,1)")));
        }
        if !(gamma > -(2.0 * s).min(1.5)) {
            return Err(KernelError::Invalid(format!("gamma = {gamma} must exceed -min(2s, 3/2)")));
        }
        if gamma + 2.0 * s < -1e-12 {
            return Err(KernelError::Invalid(format!("gamma + 2s = {} must be nonnegative", gamma + 2.0 * s)));
        }
        if !(c_b > 0.0 && c_phi > 0.0) {
            return Err(KernelError::Invalid("c_b and c_phi must be positive".into()));
        }
        if let Some(p) = self.p {
            if !(p > 3.0) {
                return Err(KernelError::InversePower(p));
            }
        }
        Ok(())
    }

    /// `gamma + 2s`, the order of the weight in the norm.
    pub fn order(&self) -> f64 {
        self.gamma + 2.0 * self.s
    }

    /// `b(cos theta)` for the canonical profile `sin theta b = theta^{-1-2s}`
    /// on `(0, pi/2]`.
    pub fn b_angular(&self, cos_theta: f64) -> f64 {
        let t = cos_theta.clamp(-1.0, 1.0);
        if t < 0.0 {
            return 0.0;
        }
        let theta = t.acos();
        if theta == 0.0 {
            return f64::INFINITY;
        }
        self.angular_density(theta) / theta.sin()
    }

    /// `sin theta b(cos theta)` as a function of the angle.
    #[inline]
    pub fn angular_density(&self, theta: f64) -> f64 {
        if theta > FRAC_PI_2 || theta <= 0.0 {
            return if theta <= 0.0 { f64::INFINITY } else { 0.0 };
        }
        theta.powf(-1.0 - 2.0 * self.s)
    }

    #[inline]
    pub fn phi_kinetic(&self, r: f64) -> f64 {
        if self.gamma == 0.0 {
            return self.c_phi;
        }
        match self.kinetic_mode {
            KineticMode::Power => {
                if r == 0.0 {
                    if self.gamma < 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                } else {
                    self.c_phi * r.powf(self.gamma)
                }
            }
            KineticMode::Regularized => self.c_phi * (1.0 + r * r).powf(0.5 * self.gamma),
        }
    }

    /// Full kernel `B(v - v_*, sigma)`.
    pub fn collision_kernel(&self, v: Vec3, v_star: Vec3, sigma: Vec3) -> Result<f64, KernelError> {
        let f = geometry::CollisionFrame::new(v, v_star)?;
        Ok(self.phi_kinetic(f.rel_speed) * self.b_angular(geometry::dot(f.k, sigma)))
    }

    /// Two-sided bound `c_b theta^{-1-2s} <= sin theta b <= theta^{-1-2s}/c_b`.
    pub fn satisfies_angular_bound(&self, theta: f64) -> bool {
        let d = self.angular_density(theta);
        let r = theta.powf(-1.0 - 2.0 * self.s);
        d >= self.c_b * r * (1.0 - 1e-14) && d <= r / self.c_b * (1.0 + 1e-14)
    }

    /// `2 pi int_eps^{pi/2} theta^{-1-2s} d theta`, the sigma-mass of `b`
    /// above an angular cutoff.
    pub fn cutoff_mass(&self, eps: f64) -> f64 {
        let q = 2.0 * self.s;
        2.0 * PI * (eps.powf(-q) - FRAC_PI_2.powf(-q)) / q
    }
}

/// Angular rule on `(0, pi/2]` whose weights include `theta^{-1-2s}`, exact
/// for integrands vanishing like `theta^2` times a polynomial in
/// `theta^{2-2s}` below `split`; log-spaced Gauss-Legendre above it.
pub fn grazing_rule(s: f64, n_inner: usize, n_outer: usize, split: f64) -> Vec<(f64, f64)> {
    let split = split.min(FRAC_PI_2);
    let p = 1.0 / (2.0 - 2.0 * s);
    let mut out: Vec<(f64, f64)> = quad::gauss_legendre_on(n_inner, 0.0, 1.0)
        .into_iter()
        .map(|(u, w)| {
            let th = split * u.powf(p);
            (th, w * split * p * u.powf(p - 1.0) * th.powf(-1.0 - 2.0 * s))
        })
        .collect();
    if split < FRAC_PI_2 && n_outer > 0 {
        for (tau, w) in quad::gauss_legendre_on(n_outer, split.ln(), FRAC_PI_2.ln()) {
            let th = tau.exp();
            out.push((th, w * th.powf(-2.0 * s)));
        }
    }
    out
}

/// `[b(t) + b(-t)] 1_{t >= 0}` for an arbitrary profile.
pub fn symmetrized_b<F: Fn(f64) -> f64>(profile: F, t: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else {
        profile(t) + profile(-t)
    }
}

/// Half-width (in octaves) of the transition layer of `chi_j`.
pub const CHI_HALF_WIDTH: f64 = 0.25;

/// Quintic smoothstep from 0 at `t = -w` to 1 at `t = w`.
#[inline]
fn smooth_step(t: f64) -> f64 {
    let w = CHI_HALF_WIDTH;
    if t <= -w {
        0.0
    } else if t >= w {
        1.0
    } else {
        let x = (t + w) / (2.0 * w);
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

/// Dyadic level with its nominal band `[2^{-j-1}, 2^{-j}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicIndex {
    pub j: i32,
}

impl DyadicIndex {
    pub fn new(j: i32) -> Self {
        Self { j }
    }

    pub fn band(&self) -> (f64, f64) {
        (2f64.powi(-self.j - 1), 2f64.powi(-self.j))
    }

    /// Closed support of `chi_j` (the nominal band widened by the
    /// transition layers).
    pub fn support(&self) -> (f64, f64) {
        let w = CHI_HALF_WIDTH;
        (2f64.powf(-(self.j as f64) - 1.0 - w), 2f64.powf(-(self.j as f64) + w))
    }

    /// `chi_j(r)`; the family sums to one over `j` in `Z` for every `r > 0`.
    #[inline]
    pub fn chi(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let t = -r.log2() - self.j as f64;
        smooth_step(t) - smooth_step(t - 1.0)
    }

    /// Breakpoints of `chi_j` in `r`, decreasing.
    pub fn knots(&self) -> [f64; 4] {
        let w = CHI_HALF_WIDTH;
        let j = self.j as f64;
        [
            2f64.powf(-j + w),
            2f64.powf(-j - w),
            2f64.powf(-j - 1.0 + w),
            2f64.powf(-j - 1.0 - w),
        ]
    }
}

/// `B_j = Phi b chi_j(|v - v'|)`.
pub fn dyadic_kernel(params: &KernelParams, j: DyadicIndex, v: Vec3, v_star: Vec3, sigma: Vec3) -> Result<f64, KernelError> {
    let (cos, d) = geometry::deviation_relation(v, v_star, sigma)?;
    let chi = j.chi(d);
    if chi == 0.0 {
        return Ok(0.0);
    }
    Ok(params.phi_kinetic(geometry::norm(geometry::sub(v, v_star))) * params.b_angular(cos) * chi)
}

/// Angles in `[0, pi/2]` at which `r sin(theta/2)` crosses the knots of
/// `chi_j`, sorted increasing and bracketed by the support ends.
fn theta_breaks(j: DyadicIndex, rel_speed: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for k in j.knots() {
        let s = k / rel_speed;
        if s < std::f64::consts::FRAC_1_SQRT_2 {
            out.push(2.0 * s.asin());
        }
    }
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

/// `(int_{S^2} B_j d sigma, value / (2^{2sj} <rel_speed>^{gamma+2s}))`.
pub fn sphere_integral_bound_audit(params: &KernelParams, j: DyadicIndex, rel_speed: f64) -> Result<(f64, f64), KernelError> {
    if !(rel_speed > 0.0) {
        return Err(KernelError::Invalid("relative speed must be positive".into()));
    }
    let mut breaks = theta_breaks(j, rel_speed);
    if breaks.is_empty() {
        return Ok((0.0, 0.0));
    }
    // the last piece may be cut off by theta = pi/2
    if breaks.len() < 4 {
        breaks.push(FRAC_PI_2);
    }
    let q = 2.0 * params.s;
    // theta = e^tau: theta^{-1-2s} d theta = theta^{-2s} d tau
    let integrate = |n: usize| -> f64 {
        let mut acc = 0.0;
        for w in breaks.windows(2) {
            let (a, b) = (w[0].ln(), w[1].ln());
            for (tau, wt) in quad::gauss_legendre_on(n, a, b) {
                let th = tau.exp();
                acc += wt * th.powf(-q) * j.chi(rel_speed * (0.5 * th).sin());
            }
        }
        acc
    };
    let fine = integrate(24);
    let coarse = integrate(12);
    let residual = (fine - coarse).abs();
    if residual > 1e-8 * fine.abs().max(1e-300) {
        return Err(KernelError::Quadrature { residual });
    }
    let value = 2.0 * PI * params.phi_kinetic(rel_speed) * fine;
    let scale = 2f64.powf(q * j.j as f64) * (1.0 + rel_speed * rel_speed).powf(0.5 * params.order());
    Ok((value, value / scale))
}
