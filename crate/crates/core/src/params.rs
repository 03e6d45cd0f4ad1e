//! Flat model-parameter vectors.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// A flat vector of model parameters.
///
/// All clients and the server share one length per experiment; every
/// arithmetic helper asserts matching lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm distance between two vectors of equal length.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Little-endian encoding: u64 element count followed by each f64.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.len());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<ParamVector> {
        let (head, body) = bytes.split_at_checked(8)?;
        let len = u64::from_le_bytes(head.try_into().ok()?) as usize;
        if body.len() != len.checked_mul(8)? {
            return None;
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(ParamVector(values))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}
