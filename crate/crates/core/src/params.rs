use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Flat model parameters (or a parameter-shaped update/gradient).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what} (index {i})"))),
        }
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        linalg::dot(&self.0, &other.0)
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * c).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        linalg::axpy(alpha, &x.0, &mut self.0);
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: self.len() });
        }
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Cosine similarity; errors when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let nu = linalg::norm(u);
    let nv = linalg::norm(v);
    if nu == 0.0 {
        return Err(Error::ZeroVector("first cosine argument"));
    }
    if nv == 0.0 {
        return Err(Error::ZeroVector("second cosine argument"));
    }
    Ok((linalg::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_reference_values() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - half_sqrt2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroVector(_))));
    }

    proptest! {
        #[test]
        fn cosine_positive_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 6),
            v in prop::collection::vec(-5.0f64..5.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(linalg::norm(&u) > 1e-3 && linalg::norm(&v) > 1e-3);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let a = cosine(&u, &v).unwrap();
            let b = cosine(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
