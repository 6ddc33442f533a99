//! Small fixed-size linear algebra shared by every stage.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[inline]
pub fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

/// Cross-product matrix `[w]x` such that `[w]x v = w x v`.
#[inline]
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.x.is_finite() && v.y.is_finite() && v.z.is_finite()
}

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SERIES_ANGLE: f64 = 1e-3;

/// Coefficients of `R = I + a K + b K^2` (`K = [w]x`, unnormalized) and the
/// derivatives `a'(t)/t`, `b'(t)/t` used by the Jacobian.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    let (a, b, _, _) = rodrigues_coeffs(theta);
    Mat3::identity() + k * a + k * k * b
}

/// Rotation matrix and its partial derivatives with respect to each component of `w`.
pub fn rodrigues_jacobian(w: &Vec3) -> (Mat3, [Mat3; 3]) {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let (a, b, da, db) = rodrigues_coeffs(theta);
    let r = Mat3::identity() + k * a + k2 * b;
    let mut d = [Mat3::zeros(); 3];
    for (c, dc) in d.iter_mut().enumerate() {
        let mut e = Vec3::zeros();
        e[c] = 1.0;
        let ek = skew(&e);
        // d(theta)/dw_c = w_c / theta, folded into da/db which are already divided by theta
        *dc = ek * a + (ek * k + k * ek) * b + (k * da + k2 * db) * w[c];
    }
    (r, d)
}

/// Maps an axis-angle vector onto the equivalent one with magnitude below pi.
pub fn normalize_axis_angle(w: &Vec3) -> Vec3 {
    let theta = w.norm();
    if theta < std::f64::consts::PI {
        return *w;
    }
    let axis = w / theta;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t > std::f64::consts::PI {
        t -= two_pi;
    }
    axis * t
}

/// Rigid or affine map `x -> a x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: Mat3,
    pub b: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            a: Mat3::identity(),
            b: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.a * x + self.b
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Affine) -> Affine {
        Affine {
            a: self.a * other.a,
            b: self.a * other.b + self.b,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|x| x.is_finite()) && is_finite3(&self.b)
    }
}
