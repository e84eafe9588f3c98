//! Minimal fixed-size 2D vector helpers for the hot loops.

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    norm2(a).sqrt()
}

#[inline]
pub fn norm2(a: Vec2) -> f64 {
    dot(a, a)
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

/// `a + s * b`
#[inline]
pub fn axpy(a: Vec2, s: f64, b: Vec2) -> Vec2 {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

#[inline]
pub fn normalize(a: Vec2) -> Vec2 {
    scale(a, 1.0 / norm(a))
}

/// Counter-clockwise quarter turn.
#[inline]
pub fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}
