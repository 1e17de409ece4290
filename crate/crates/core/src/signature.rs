//! The fixed-grid multichannel magnetic signature.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Timesteps per signature.
pub const T: usize = 100;
/// Channels per signature.
pub const C: usize = 6;

/// Channel names in storage order.
pub const CHANNEL_NAMES: [&str; C] = ["B_s1Y", "B_s1Z", "B_s2Y", "B_s2Z", "B_s1C5", "B_s2C6"];

/// A `T x C` real time series. Rows are timesteps, columns are channels.
///
/// Construction checks the shape and that every entry is finite, so any
/// `Signature` in hand satisfies both invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    values: Array2<f64>,
}

impl Signature {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.dim() != (T, C) {
            return Err(Error::InvalidInput(format!(
                "signature must be {T}x{C}, got {:?}",
                values.dim()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "signature contains non-finite value {bad}"
            )));
        }
        Ok(Self { values })
    }

    /// Builds from a row-major (timestep-major) slice of `T * C` values.
    pub fn from_row_major(data: &[f64]) -> Result<Self> {
        if data.len() != T * C {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                T * C,
                data.len()
            )));
        }
        Self::new(Array2::from_shape_vec((T, C), data.to_vec()).expect("shape checked"))
    }

    pub fn zeros() -> Self {
        Self {
            values: Array2::zeros((T, C)),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.column(c)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    /// Row-major copy of the values.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    /// Little-endian f64 bytes in row-major order, `T * C * 8` bytes long.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(T * C * 8);
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != T * C * 8 {
            return Err(Error::InvalidInput(format!(
                "expected {} signal bytes, got {}",
                T * C * 8,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Self::from_row_major(&data)
    }

    /// Per-channel `max - min`.
    pub fn channel_ranges(&self) -> [f64; C] {
        let mut out = [0.0; C];
        for (c, r) in out.iter_mut().enumerate() {
            let col = self.values.column(c);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            *r = max - min;
        }
        out
    }

    /// Euclidean (Frobenius) distance between two signatures.
    pub fn l2_distance(&self, other: &Signature) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Signature) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_shape_and_non_finite() {
        assert!(Signature::new(Array2::zeros((99, C))).is_err());
        assert!(Signature::new(Array2::zeros((T, 5))).is_err());
        let mut v = Array2::zeros((T, C));
        v[[3, 2]] = f64::NAN;
        assert!(Signature::new(v.clone()).is_err());
        v[[3, 2]] = f64::INFINITY;
        assert!(Signature::new(v).is_err());
    }

    #[test]
    fn negative_entries_are_allowed() {
        let mut v = Array2::zeros((T, C));
        v[[10, 4]] = -3.5;
        v[[11, 5]] = -0.1;
        assert!(Signature::new(v).is_ok());
    }

    #[test]
    fn byte_layout_is_timestep_major() {
        let data: Vec<f64> = (0..T * C).map(|i| i as f64).collect();
        let sig = Signature::from_row_major(&data).unwrap();
        assert_eq!(sig.values()[[1, 0]], 6.0);
        let bytes = sig.to_le_bytes();
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(Signature::from_le_bytes(&bytes).unwrap(), sig);
    }
}
