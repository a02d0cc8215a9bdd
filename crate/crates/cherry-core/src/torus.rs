//! Flat geometry of the 2-torus: points, tangent vectors, 2x2 matrices.

use core::fmt;

use crate::math;

/// A point on the flat torus, both coordinates reduced mod 1.
#[derive(Clone, Copy, PartialEq)]
pub struct TorusPoint {
    x: f64,
    y: f64,
}

impl TorusPoint {
    /// Wraps both coordinates into `[0, 1)`.
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x: math::wrap_unit(x),
            y: math::wrap_unit(y),
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// Torus distance: minimum over integer shifts of the Euclidean
    /// distance. Always at most `sqrt(2)/2`.
    pub fn dist(&self, other: &TorusPoint) -> f64 {
        let dx = math::circle_dist(self.x, other.x);
        let dy = math::circle_dist(self.y, other.y);
        math::hypot(dx, dy)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> TorusPoint {
        TorusPoint::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Debug for TorusPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.x, self.y)
    }
}

/// Tangent vector in the flat chart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarVector {
    pub dx: f64,
    pub dy: f64,
}

impl PlanarVector {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        math::hypot(self.dx, self.dy)
    }

    pub fn dot(&self, other: &PlanarVector) -> f64 {
        self.dx * other.dx + self.dy * other.dy
    }

    /// Rotation by +90 degrees; used to span the normal bundle of a flow.
    pub fn rot90(&self) -> PlanarVector {
        PlanarVector::new(-self.dy, self.dx)
    }

    pub fn scale(&self, s: f64) -> PlanarVector {
        PlanarVector::new(self.dx * s, self.dy * s)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

/// Row-major 2x2 real matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
    };

    pub const IDENTITY: Mat2 = Mat2 {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Self::new(a, 0.0, 0.0, d)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn apply(&self, v: PlanarVector) -> PlanarVector {
        PlanarVector::new(self.a * v.dx + self.b * v.dy, self.c * v.dx + self.d * v.dy)
    }

    pub fn mul(&self, m: &Mat2) -> Mat2 {
        Mat2::new(
            self.a * m.a + self.b * m.c,
            self.a * m.b + self.b * m.d,
            self.c * m.a + self.d * m.c,
            self.c * m.b + self.d * m.d,
        )
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(Mat2::new(
            self.d / det,
            -self.b / det,
            -self.c / det,
            self.a / det,
        ))
    }

    /// Eigenvalues as `(re, im)` pairs, sorted by real part (descending).
    pub fn eigenvalues(&self) -> [(f64, f64); 2] {
        let tr = self.trace();
        let disc = tr * tr - 4.0 * self.det();
        if disc >= 0.0 {
            let s = math::sqrt(disc);
            let l1 = 0.5 * (tr + s);
            let l2 = 0.5 * (tr - s);
            [(l1, 0.0), (l2, 0.0)]
        } else {
            let s = math::sqrt(-disc);
            [(0.5 * tr, 0.5 * s), (0.5 * tr, -0.5 * s)]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite() && self.d.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_distance_wraps() {
        let p = TorusPoint::new(0.05, 0.95);
        let q = TorusPoint::new(0.95, 0.05);
        assert!((p.dist(&q) - math::hypot(0.1, 0.1)).abs() < 1e-14);
        assert!(p.dist(&q) <= math::sqrt(2.0) / 2.0 + 1e-15);
    }

    #[test]
    fn point_constructor_reduces_mod_one() {
        let p = TorusPoint::new(1.25, -0.25);
        assert!((p.x() - 0.25).abs() < 1e-15);
        assert!((p.y() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn eigenvalues_of_saddle_matrix() {
        let m = Mat2::diag(2.0, -1.0);
        let ev = m.eigenvalues();
        assert_eq!(ev[0], (2.0, 0.0));
        assert_eq!(ev[1], (-1.0, 0.0));
        assert_eq!(m.det(), -2.0);
        assert_eq!(m.trace(), 1.0);
    }

    #[test]
    fn eigenvalues_of_rotation_are_complex() {
        let m = Mat2::new(0.0, -1.0, 1.0, 0.0);
        let ev = m.eigenvalues();
        assert_eq!(ev[0].0, 0.0);
        assert!((ev[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matrix_inverse_roundtrip() {
        let m = Mat2::new(1.0, 2.0, 3.0, 5.0);
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        assert!((id.a - 1.0).abs() < 1e-14);
        assert!(id.b.abs() < 1e-14);
        assert!(id.c.abs() < 1e-14);
        assert!((id.d - 1.0).abs() < 1e-14);
    }
}
