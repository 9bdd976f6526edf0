//! Scalar abstraction and small fixed-size algebra used throughout the solvers.
//!
//! Everything numeric is generic over [`Scalar`] so the same kernels run in
//! `f32` or `f64`; the crate root exports `f64` aliases for the common case.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by the mesh, flow and optimization kernels.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum
        + Default
        + Debug
        + Display
        + LowerExp
        + Send
        + Sync
        + 'static
{
}

/// Shorthand for converting an `f64` literal into the active scalar type.
#[inline]
pub fn num<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal not representable in scalar type")
}

/// Two-component vector (points, velocities, normals).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2<S> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Vec2<S> {
    #[inline]
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn zero() -> Self {
        Self {
            x: S::zero(),
            y: S::zero(),
        }
    }

    #[inline]
    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product (useful for signed areas).
    #[inline]
    pub fn cross(self, o: Self) -> S {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm_sq(self) -> S {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> S {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn scale(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    /// Rotate by -90 degrees; maps a CCW edge direction to its outward normal.
    #[inline]
    pub fn rot_cw(self) -> Self {
        Self::new(self.y, -self.x)
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == S::zero() {
            Self::zero()
        } else {
            self.scale(S::one() / n)
        }
    }

    #[inline]
    pub fn comp(self, i: usize) -> S {
        match i {
            0 => self.x,
            1 => self.y,
            _ => panic!("Vec2 component index out of range"),
        }
    }
}

impl<S: Scalar> Add for Vec2<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<S: Scalar> Sub for Vec2<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<S: Scalar> Neg for Vec2<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl<S: Scalar> Mul<S> for Vec2<S> {
    type Output = Self;
    #[inline]
    fn mul(self, s: S) -> Self {
        self.scale(s)
    }
}

impl<S: Scalar> Div<S> for Vec2<S> {
    type Output = Self;
    #[inline]
    fn div(self, s: S) -> Self {
        Self::new(self.x / s, self.y / s)
    }
}

impl<S: Scalar> AddAssign for Vec2<S> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl<S: Scalar> SubAssign for Vec2<S> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl<S: Scalar> MulAssign<S> for Vec2<S> {
    #[inline]
    fn mul_assign(&mut self, s: S) {
        self.x *= s;
        self.y *= s;
    }
}

/// 2x2 tensor with the convention `m[i][j] = d(component i)/d(x_j)` when it
/// stores a velocity gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mat2<S> {
    pub m: [[S; 2]; 2],
}

impl<S: Scalar> Mat2<S> {
    #[inline]
    pub fn zero() -> Self {
        Self {
            m: [[S::zero(); 2]; 2],
        }
    }

    /// Build from row vectors (row i = gradient of component i).
    #[inline]
    pub fn from_rows(r0: Vec2<S>, r1: Vec2<S>) -> Self {
        Self {
            m: [[r0.x, r0.y], [r1.x, r1.y]],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> Vec2<S> {
        Vec2::new(self.m[i][0], self.m[i][1])
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Self {
            m: [
                [self.m[0][0], self.m[1][0]],
                [self.m[0][1], self.m[1][1]],
            ],
        }
    }

    /// `self + self^T`, the symmetric strain-rate style tensor.
    #[inline]
    pub fn sym_twice(&self) -> Self {
        self.add(&self.transpose())
    }

    #[inline]
    pub fn add(&self, o: &Self) -> Self {
        let mut r = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                r.m[i][j] = self.m[i][j] + o.m[i][j];
            }
        }
        r
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec2<S>) -> Vec2<S> {
        Vec2::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y,
            self.m[1][0] * v.x + self.m[1][1] * v.y,
        )
    }

    #[inline]
    pub fn trace(&self) -> S {
        self.m[0][0] + self.m[1][1]
    }

    /// Frobenius inner product `self : other`.
    #[inline]
    pub fn ddot(&self, o: &Self) -> S {
        let mut s = S::zero();
        for i in 0..2 {
            for j in 0..2 {
                s += self.m[i][j] * o.m[i][j];
            }
        }
        s
    }

    #[inline]
    pub fn frob_sq(&self) -> S {
        self.ddot(self)
    }
}

impl<S: Scalar> std::ops::Add for Mat2<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut m = self.m;
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] += o.m[i][j];
            }
        }
        Self { m }
    }
}

impl<S: Scalar> std::ops::Mul<S> for Mat2<S> {
    type Output = Self;
    #[inline]
    fn mul(self, s: S) -> Self {
        let mut m = self.m;
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] *= s;
            }
        }
        Self { m }
    }
}

/// Solve a symmetric 2x2 system `[[a,b],[b,c]] x = r`; returns `None` when
/// (numerically) singular.
#[inline]
pub fn solve_sym2<S: Scalar>(a: S, b: S, c: S, r: Vec2<S>) -> Option<Vec2<S>> {
    let det = a * c - b * b;
    let scale = a.abs().max(c.abs()).max(b.abs());
    if scale == S::zero() || det.abs() < S::epsilon() * scale * scale {
        return None;
    }
    Some(Vec2::new((c * r.x - b * r.y) / det, (a * r.y - b * r.x) / det))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec2_ops() {
        let a: Vec2<f64> = Vec2::new(3.0, 4.0);
        assert_eq!(a.norm(), 5.0);
        assert_eq!(a.dot(Vec2::new(1.0, 2.0)), 11.0);
        assert_eq!(a.cross(Vec2::new(1.0, 0.0)), -4.0);
        let n = Vec2::new(1.0, 0.0).rot_cw();
        assert_eq!(n, Vec2::new(0.0, -1.0));
    }

    #[test]
    fn mat2_products() {
        let g: Mat2<f64> = Mat2::from_rows(Vec2::new(1.0, 2.0), Vec2::new(3.0, 4.0));
        let v = g.mul_vec(Vec2::new(1.0, 1.0));
        assert_eq!(v, Vec2::new(3.0, 7.0));
        assert_eq!(g.trace(), 5.0);
        assert_eq!(g.ddot(&g), 30.0);
        let s = g.sym_twice();
        assert_eq!(s.m[0][1], s.m[1][0]);
    }

    #[test]
    fn sym2_solve_roundtrip() {
        let (a, b, c) = (4.0, 1.0, 3.0);
        let x = solve_sym2(a, b, c, Vec2::new(5.0, 4.0)).unwrap();
        assert!((a * x.x + b * x.y - 5.0f64).abs() < 1e-14);
        assert!((b * x.x + c * x.y - 4.0f64).abs() < 1e-14);
        assert!(solve_sym2(0.0, 0.0, 0.0, Vec2::new(1.0f64, 1.0)).is_none());
    }

    #[test]
    fn generic_over_f32() {
        let a: Vec2<f32> = Vec2::new(1.0, 1.0);
        assert!((a.norm() - 2.0f32.sqrt()).abs() < 1e-6);
        let x: f32 = num(0.5);
        assert_eq!(x, 0.5);
    }
}
