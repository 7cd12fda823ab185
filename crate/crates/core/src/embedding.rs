//! Unit-sphere embeddings and the cosine geometry shared by every loss,
//! the memory bank and the mining curriculum.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TceError};

/// Vectors with norm at or below this are treated as directionless.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on `| ||v|| - 1 |` for a value to count as an embedding.
pub const UNIT_TOL: f64 = 1e-5;

pub const DEFAULT_DIM: usize = 128;

/// A unit-norm embedding of dimension `D >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit norm (within [`UNIT_TOL`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(TceError::arg(format!(
                "embedding dimension must be >= 2, got {}",
                values.len()
            )));
        }
        let n = l2_norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(TceError::arg(format!("embedding is not unit norm (norm {n})")));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Rounds every component to the nearest `f32`. The result stays unit
    /// norm within [`UNIT_TOL`] and survives an `f32` serialization round trip.
    pub fn to_f32_precision(&self) -> Embedding {
        Embedding(self.0.iter().map(|&x| x as f32 as f64).collect())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = TceError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Projects `v` onto the unit sphere. Inputs whose norm is already 1 up to
/// a few ulps are returned unchanged, so the operation is exactly idempotent.
pub fn normalize(v: &[f64]) -> Result<Embedding> {
    let n = l2_norm(v);
    if !(n > NORM_EPS) {
        return Err(TceError::DegenerateVector { norm: n });
    }
    if v.len() < 2 {
        return Err(TceError::arg("embedding dimension must be >= 2"));
    }
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(Embedding(v.to_vec()));
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity `<a,b> / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TceError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(TceError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradients with respect to both inputs.
///
/// The gradients are those of the unclamped expression; callers only use this
/// on inputs where the clamp is inactive up to rounding.
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(TceError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(TceError::ZeroNorm);
    }
    let inv = 1.0 / (na * nb);
    let s = dot(a, b) * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - s * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - s * y / (nb * nb))
        .collect();
    Ok((s.clamp(-1.0, 1.0), ga, gb))
}
