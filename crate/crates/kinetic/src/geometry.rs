//! Velocity-space geometry: the paraboloid lift, tangent maps, collision
//! parametrisation and Carleman hyperplanes.

use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Vec4 = [f64; 4];

/// Tolerance on `| |sigma| - 1 |` for unit-vector inputs.
pub const UNIT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("sigma is not a unit vector (|sigma| = {0})")]
    NonUnitSigma(f64),
    #[error("coincident velocities: relative direction undefined")]
    Coincident,
    #[error("argument out of range: {0}")]
    OutOfRange(&'static str),
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm2(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(c: f64, a: Vec3) -> Vec3 {
    [c * a[0], c * a[1], c * a[2]]
}

/// `a + c b`
#[inline]
pub fn axpy(a: Vec3, c: f64, b: Vec3) -> Vec3 {
    [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot4(a: Vec4, b: Vec4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
pub fn norm4(a: Vec4) -> f64 {
    dot4(a, a).sqrt()
}

/// Japanese bracket `<v> = sqrt(1 + |v|^2)`.
#[inline]
pub fn bracket(v: Vec3) -> f64 {
    (1.0 + norm2(v)).sqrt()
}

/// `v -> (v, |v|^2 / 2)`.
#[inline]
pub fn lift(v: Vec3) -> Vec4 {
    [v[0], v[1], v[2], 0.5 * norm2(v)]
}

/// Returns `(tau_v u, tau_hat_v u)`.
///
/// `tau_v` shrinks the component of `u` along `v` by `<v>^{-1}`; `tau_hat_v`
/// appends the lost length as a fourth coordinate, so it is an isometry
/// into the tangent space of the paraboloid at `lift(v)`.
pub fn tangent_map(v: Vec3, u: Vec3) -> (Vec3, Vec4) {
    let v2 = norm2(v);
    let br = (1.0 + v2).sqrt();
    let vu = dot(v, u);
    // (1 - 1/<v>)/|v|^2 = 1/(<v>(<v>+1)), regular at v = 0
    let c = vu / (br * (br + 1.0));
    let tau = axpy(u, -c, v);
    (tau, [tau[0], tau[1], tau[2], vu / br])
}

/// Frame attached to an anchor velocity; caches `<v>`.
#[derive(Debug, Clone, Copy)]
pub struct TangentFrame {
    pub anchor: Vec3,
    bracket: f64,
}

impl TangentFrame {
    pub fn new(anchor: Vec3) -> Self {
        Self {
            anchor,
            bracket: bracket(anchor),
        }
    }

    pub fn bracket(&self) -> f64 {
        self.bracket
    }

    pub fn tau(&self, u: Vec3) -> Vec3 {
        let c = dot(self.anchor, u) / (self.bracket * (self.bracket + 1.0));
        axpy(u, -c, self.anchor)
    }

    pub fn tau_hat(&self, u: Vec3) -> Vec4 {
        let t = self.tau(u);
        [t[0], t[1], t[2], dot(self.anchor, u) / self.bracket]
    }
}

fn check_unit(sigma: Vec3) -> Result<(), GeometryError> {
    let n = norm(sigma);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(GeometryError::NonUnitSigma(n));
    }
    Ok(())
}

/// Post-collisional velocities in the sigma parametrisation.
pub fn post_collision(v: Vec3, v_star: Vec3, sigma: Vec3) -> Result<(Vec3, Vec3), GeometryError> {
    check_unit(sigma)?;
    Ok(post_collision_unchecked(v, v_star, sigma))
}

#[inline]
pub fn post_collision_unchecked(v: Vec3, v_star: Vec3, sigma: Vec3) -> (Vec3, Vec3) {
    let half_r = 0.5 * norm(sub(v, v_star));
    let mid = scale(0.5, add(v, v_star));
    (axpy(mid, half_r, sigma), axpy(mid, -half_r, sigma))
}

/// Relative-velocity frame of a collision pair.
#[derive(Debug, Clone, Copy)]
pub struct CollisionFrame {
    pub v: Vec3,
    pub v_star: Vec3,
    pub k: Vec3,
    pub rel_speed: f64,
}

impl CollisionFrame {
    pub fn new(v: Vec3, v_star: Vec3) -> Result<Self, GeometryError> {
        let d = sub(v, v_star);
        let r = norm(d);
        if r == 0.0 {
            return Err(GeometryError::Coincident);
        }
        Ok(Self {
            v,
            v_star,
            k: scale(1.0 / r, d),
            rel_speed: r,
        })
    }

    /// Scattering direction at deviation angle `theta` and azimuth `phi`
    /// around `k`.
    pub fn sigma(&self, theta: f64, phi: f64) -> Vec3 {
        let (e1, e2) = orthonormal_complement(self.k);
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        [
            ct * self.k[0] + st * (cp * e1[0] + sp * e2[0]),
            ct * self.k[1] + st * (cp * e1[1] + sp * e2[1]),
            ct * self.k[2] + st * (cp * e1[2] + sp * e2[2]),
        ]
    }
}

/// Returns `(cos theta, |v - v'|)`.
pub fn deviation_relation(v: Vec3, v_star: Vec3, sigma: Vec3) -> Result<(f64, f64), GeometryError> {
    check_unit(sigma)?;
    let frame = CollisionFrame::new(v, v_star)?;
    let (vp, _) = post_collision_unchecked(v, v_star, sigma);
    Ok((dot(frame.k, sigma), norm(sub(v, vp))))
}

/// Two unit vectors completing `n` (assumed unit) to a right-handed
/// orthonormal basis.
pub fn orthonormal_complement(n: Vec3) -> (Vec3, Vec3) {
    // Branchless construction (Duff et al.)
    let sign = 1.0f64.copysign(n[2]);
    let a = -1.0 / (sign + n[2]);
    let b = n[0] * n[1] * a;
    let e1 = [1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]];
    let e2 = [b, sign + n[1] * n[1] * a, -n[1]];
    (e1, e2)
}

/// Affine plane through `base_point` orthogonal to `normal`.
#[derive(Debug, Clone, Copy)]
pub struct CarlemanPlane {
    pub base_point: Vec3,
    pub normal: Vec3,
    pub axes: [Vec3; 2],
    /// Distance between the two defining points.
    pub separation: f64,
}

/// Plane through `base` with normal `(base - other)/|base - other|`.
pub fn carleman_plane(base: Vec3, other: Vec3) -> Result<CarlemanPlane, GeometryError> {
    let d = sub(base, other);
    let r = norm(d);
    if r == 0.0 || !r.is_finite() {
        return Err(GeometryError::Coincident);
    }
    let normal = scale(1.0 / r, d);
    let (e1, e2) = orthonormal_complement(normal);
    Ok(CarlemanPlane {
        base_point: base,
        normal,
        axes: [e1, e2],
        separation: r,
    })
}

impl CarlemanPlane {
    /// Point at polar offset `(r, phi)` from the base point.
    #[inline]
    pub fn point(&self, r: f64, phi: f64) -> Vec3 {
        let (sp, cp) = phi.sin_cos();
        let [e1, e2] = self.axes;
        [
            self.base_point[0] + r * (cp * e1[0] + sp * e2[0]),
            self.base_point[1] + r * (cp * e1[1] + sp * e2[1]),
            self.base_point[2] + r * (cp * e1[2] + sp * e2[2]),
        ]
    }

    /// Polar product rule for `d pi` on the disc of radius `r_max`:
    /// Gauss-Legendre in the radius, trapezoid in the angle.
    pub fn polar_nodes(&self, r_max: f64, n_r: usize, n_phi: usize) -> Vec<(Vec3, f64)> {
        let (x, w) = crate::quad::gauss_legendre(n_r);
        let mut out = Vec::with_capacity(n_r * n_phi);
        let dphi = std::f64::consts::TAU / n_phi as f64;
        for (xi, wi) in x.iter().zip(&w) {
            let r = 0.5 * r_max * (xi + 1.0);
            let wr = 0.5 * r_max * wi * r;
            for m in 0..n_phi {
                out.push((self.point(r, m as f64 * dphi), wr * dphi));
            }
        }
        out
    }
}

/// Jacobian of `v -> v + t (v' - v)` restricted to the collision geometry,
/// `(1 - t/2)^2 [(1 - t/2) + (t/2) cos_dev]`.
pub fn interp_jacobian(t: f64, cos_dev: f64) -> Result<f64, GeometryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::OutOfRange("interpolation parameter must lie in [0,1]"));
    }
    if !(-1.0..=1.0).contains(&cos_dev) {
        return Err(GeometryError::OutOfRange("cosine must lie in [-1,1]"));
    }
    let a = 1.0 - 0.5 * t;
    Ok(a * a * (a + 0.5 * t * cos_dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v3() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-10.0f64..10.0)
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        (0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU)
            .prop_map(|(t, p)| [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()])
    }

    #[test]
    fn lift_examples() {
        assert_eq!(lift([0.0; 3]), [0.0; 4]);
        assert_eq!(lift([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.5]);
        assert_eq!(lift([1.0, 2.0, 2.0])[3], 4.5);
    }

    #[test]
    fn tangent_map_at_origin_and_orthogonal() {
        let u = [0.3, -1.2, 2.0];
        let (t, th) = tangent_map([0.0; 3], u);
        assert_eq!(t, u);
        assert_eq!(th[3], 0.0);
        let (t, th) = tangent_map([1.0, 0.0, 0.0], [0.0, 2.0, -1.0]);
        assert_eq!(t, [0.0, 2.0, -1.0]);
        assert_eq!(th, [0.0, 2.0, -1.0, 0.0]);
    }

    #[test]
    fn plane_example() {
        let p = carleman_plane([1.0, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(p.normal, [1.0, 0.0, 0.0]);
        for (x, _) in p.polar_nodes(2.0, 4, 6) {
            assert!((x[0] - 1.0).abs() < 1e-12);
        }
        assert!(carleman_plane([1.0; 3], [1.0; 3]).is_err());
    }

    #[test]
    fn plane_polar_rule_integrates_gaussian() {
        let p = carleman_plane([0.2, 0.1, -0.3], [1.0, 2.0, 0.5]).unwrap();
        let s: f64 = p
            .polar_nodes(9.0, 40, 16)
            .iter()
            .map(|(x, w)| w * (-0.5 * norm2(sub(*x, p.base_point))).exp())
            .sum();
        assert!((s - std::f64::consts::TAU).abs() < 1e-10);
    }

    #[test]
    fn post_collision_identities() {
        let v = [1.0, 2.0, 3.0];
        let vs = [-1.0, 0.5, 0.0];
        let f = CollisionFrame::new(v, vs).unwrap();
        let (a, b) = post_collision(v, vs, f.k).unwrap();
        for i in 0..3 {
            assert!((a[i] - v[i]).abs() < 1e-14 && (b[i] - vs[i]).abs() < 1e-14);
        }
        assert_eq!(post_collision(v, v, [0.0, 0.0, 1.0]).unwrap(), (v, v));
        assert!(post_collision(v, vs, [0.0, 0.0, 1.1]).is_err());
        assert_eq!(deviation_relation(v, v, [0.0, 0.0, 1.0]), Err(GeometryError::Coincident));
    }

    #[test]
    fn deviation_at_right_angle() {
        let v = [1.0, 0.0, 0.0];
        let vs = [-1.0, 0.0, 0.0];
        let (c, d) = deviation_relation(v, vs, [0.0, 1.0, 0.0]).unwrap();
        assert!(c.abs() < 1e-15);
        assert!((d * d - 2.0).abs() < 1e-14);
    }

    #[test]
    fn jacobian_examples() {
        assert_eq!(interp_jacobian(0.0, 0.3).unwrap(), 1.0);
        assert_eq!(interp_jacobian(1.0, 1.0).unwrap(), 0.25);
        assert!(interp_jacobian(1.5, 0.0).is_err());
        assert!(interp_jacobian(0.5, -1.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn collision_conserves(v in v3(), vs in v3(), s in unit()) {
            let (a, b) = post_collision(v, vs, s).unwrap();
            let e = norm2(v) + norm2(vs);
            prop_assert!((norm2(a) + norm2(b) - e).abs() <= 1e-12 * e.max(1.0));
            for i in 0..3 {
                let m = (v[i] + vs[i]).abs().max(1.0);
                prop_assert!((a[i] + b[i] - v[i] - vs[i]).abs() <= 1e-12 * m);
            }
        }

        #[test]
        fn deviation_identity(v in v3(), vs in v3(), s in unit()) {
            prop_assume!(norm(sub(v, vs)) > 1e-6);
            let (c, d) = deviation_relation(v, vs, s).unwrap();
            let r2 = norm2(sub(v, vs));
            prop_assert!((d * d - 0.5 * r2 * (1.0 - c)).abs() <= 1e-12 * r2);
        }

        #[test]
        fn tau_hat_is_isometry(v in v3(), u in v3()) {
            let (t, th) = tangent_map(v, u);
            prop_assert!((norm4(th) - norm(u)).abs() <= 1e-12 * norm(u).max(1e-300));
            let lhs = dot(v, t);
            prop_assert!((lhs - dot(v, u) / bracket(v)).abs() <= 1e-12 * (norm(v) * norm(u)).max(1e-300));
            let f = TangentFrame::new(v);
            prop_assert_eq!(f.tau_hat(u), th);
        }

        // lift(v + tau u) - lift(v) = tau_hat u + |tau u|^2/2 e4
        #[test]
        fn lifted_difference(v in v3(), u in v3()) {
            let (t, th) = tangent_map(v, u);
            let lhs = lift(add(v, t));
            let l0 = lift(v);
            let rhs = [l0[0] + th[0], l0[1] + th[1], l0[2] + th[2], l0[3] + th[3] + 0.5 * norm2(t)];
            let m = (1.0 + norm2(v) + norm2(u)).max(1.0);
            for i in 0..4 {
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-12 * m);
            }
        }

        #[test]
        fn lifted_difference_orthogonal(v in v3(), u in v3()) {
            // with <v,u> = 0 the quadratic term is |u|^2/2
            let n2 = norm2(v);
            prop_assume!(n2 > 1e-6);
            let w = axpy(u, -dot(u, v) / n2, v);
            let (_, th) = tangent_map(v, w);
            let lhs = lift(add(v, w))[3] - lift(v)[3];
            prop_assert!((lhs - th[3] - 0.5 * norm2(w)).abs() <= 1e-12 * (1.0 + n2 + norm2(w)));
        }

        #[test]
        fn plane_samples_orthogonal(b in v3(), o in v3(), r in 0.0f64..5.0, phi in 0.0f64..7.0) {
            prop_assume!(norm(sub(b, o)) > 1e-6);
            let p = carleman_plane(b, o).unwrap();
            let x = p.point(r, phi);
            prop_assert!(dot(sub(x, b), p.normal).abs() <= 1e-12 * (1.0 + r));
            let [e1, e2] = p.axes;
            prop_assert!((norm(e1) - 1.0).abs() < 1e-12 && (norm(e2) - 1.0).abs() < 1e-12);
            prop_assert!(dot(e1, e2).abs() < 1e-12 && dot(e1, p.normal).abs() < 1e-12);
        }

        #[test]
        fn jacobian_lower_bound(t in 0.0f64..=1.0, c in 0.0f64..=1.0) {
            prop_assert!(interp_jacobian(t, c).unwrap() >= 0.125 - 1e-15);
        }
    }
}
