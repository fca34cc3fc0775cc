//! Flat-vector helpers. Every tensor in the crate is a flattened `[T]`.

use crate::{Error, Result, Scalar};

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

pub fn check_same_len<T>(expected: &[T], actual: &[T]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    Ok(())
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Scales `a` to unit Euclidean norm in place. A zero vector is left untouched.
pub fn normalize<T: Scalar>(a: &mut [T]) {
    let n = norm(a);
    if n > T::zero() {
        a.iter_mut().for_each(|v| *v = *v / n);
    }
}
