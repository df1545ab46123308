//! Tiny dense linear algebra for the 1- or 2-channel case. Covariances,
//! precision matrices and the bias-update system matrix are all at most 2x2
//! symmetric, so everything here is closed-form.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::volume::MAX_CHANNELS;

pub type Vec2 = [f64; MAX_CHANNELS];

/// Symmetric matrix of order `d` (1 or 2). For d = 1 only `xx` is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub d: usize,
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn zero(d: usize) -> Sym2 {
        Sym2 { d, xx: 0.0, xy: 0.0, yy: 0.0 }
    }

    pub fn identity(d: usize) -> Sym2 {
        Sym2 { d, xx: 1.0, xy: 0.0, yy: if d == 2 { 1.0 } else { 0.0 } }
    }

    pub fn scaled_identity(d: usize, s: f64) -> Sym2 {
        Sym2 { d, xx: s, xy: 0.0, yy: if d == 2 { s } else { 0.0 } }
    }

    pub fn trace(&self) -> f64 {
        if self.d == 1 {
            self.xx
        } else {
            self.xx + self.yy
        }
    }

    pub fn det(&self) -> f64 {
        if self.d == 1 {
            self.xx
        } else {
            self.xx * self.yy - self.xy * self.xy
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.d == 1 {
            self.xx
        } else {
            let mean = 0.5 * (self.xx + self.yy);
            let half = 0.5 * (self.xx - self.yy);
            mean - (half * half + self.xy * self.xy).sqrt()
        }
    }

    pub fn add(&self, other: &Sym2) -> Sym2 {
        Sym2 { d: self.d, xx: self.xx + other.xx, xy: self.xy + other.xy, yy: self.yy + other.yy }
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2 { d: self.d, xx: self.xx * s, xy: self.xy * s, yy: self.yy * s }
    }

    /// self + s * I
    pub fn add_scaled_identity(&self, s: f64) -> Sym2 {
        Sym2 {
            d: self.d,
            xx: self.xx + s,
            xy: self.xy,
            yy: if self.d == 2 { self.yy + s } else { self.yy },
        }
    }

    pub fn inverse(&self) -> Result<Sym2, CoreError> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(CoreError::BadParameter(format!("singular {}x{} matrix", self.d, self.d)));
        }
        if self.d == 1 {
            Ok(Sym2 { d: 1, xx: 1.0 / self.xx, xy: 0.0, yy: 0.0 })
        } else {
            Ok(Sym2 { d: 2, xx: self.yy / det, xy: -self.xy / det, yy: self.xx / det })
        }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        if self.d == 1 {
            [self.xx * v[0], 0.0]
        } else {
            [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
        }
    }

    /// Solves self * x = b.
    pub fn solve(&self, b: Vec2) -> Result<Vec2, CoreError> {
        Ok(self.inverse()?.mul_vec(b))
    }

    /// v' * self * v
    #[inline]
    pub fn quad_form(&self, v: Vec2) -> f64 {
        if self.d == 1 {
            self.xx * v[0] * v[0]
        } else {
            self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
        }
    }
}

#[inline]
pub fn vec_sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn vec_add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn vec_scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

/// Squared Euclidean norm over the first `d` components.
#[inline]
pub fn norm_sq(a: Vec2, d: usize) -> f64 {
    if d == 1 {
        a[0] * a[0]
    } else {
        a[0] * a[0] + a[1] * a[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inverse_2x2() {
        let m = Sym2 { d: 2, xx: 4.0, xy: 1.0, yy: 3.0 };
        let inv = m.inverse().unwrap();
        // m * inv == I
        let c1 = inv.mul_vec([m.xx, m.xy]);
        let c2 = inv.mul_vec([m.xy, m.yy]);
        assert_relative_eq!(c1[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c1[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(c2[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(c2[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let m = Sym2 { d: 2, xx: 2.5, xy: -0.5, yy: 1.25 };
        let b = [1.0, -2.0];
        let x = m.solve(b).unwrap();
        let back = m.mul_vec(x);
        assert_relative_eq!(back[0], b[0], epsilon = 1e-12);
        assert_relative_eq!(back[1], b[1], epsilon = 1e-12);
    }

    #[test]
    fn singular_matrix_is_an_error() {
        let m = Sym2 { d: 2, xx: 1.0, xy: 1.0, yy: 1.0 };
        assert!(m.inverse().is_err());
        assert!(Sym2::zero(1).inverse().is_err());
    }

    #[test]
    fn min_eigenvalue_closed_form() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let m = Sym2 { d: 2, xx: 2.0, xy: 1.0, yy: 2.0 };
        assert_relative_eq!(m.min_eigenvalue(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quad_form_matches_expansion() {
        let m = Sym2 { d: 2, xx: 2.0, xy: 0.5, yy: 3.0 };
        let v = [1.5, -2.0];
        let direct = 2.0 * 1.5 * 1.5 + 2.0 * 0.5 * 1.5 * -2.0 + 3.0 * 4.0;
        assert_relative_eq!(m.quad_form(v), direct, epsilon = 1e-12);
    }
}
