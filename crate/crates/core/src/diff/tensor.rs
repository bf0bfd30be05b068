use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

/// Dense row-major matrix of `f64`. Every tensor is rank 2; scalars are
/// `[1, 1]` and vectors are a single row or column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    #[serde(serialize_with = "values_17_digits")]
    pub values: Vec<f64>,
}

/// Writes each value as a decimal with 17 significant digits. Non-finite
/// values are an error.
fn values_17_digits<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for v in values {
        if !v.is_finite() {
            return Err(S::Error::custom(format!("cannot serialize non-finite value {v}")));
        }
        let raw = RawValue::from_string(format!("{v:.16e}")).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "values do not match shape [{rows}, {cols}]");
        Self { shape: vec![rows, cols], values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn from_rows(rows: &[[f64; 2]]) -> Self {
        Self::new(rows.len(), 2, rows.iter().flatten().copied().collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on a non-scalar tensor");
        self.values[0]
    }

    /// Rows of a two-column tensor.
    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        assert_eq!(self.cols(), 2);
        self.values.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_values_have_17_digits_and_round_trip() {
        let vals = vec![0.1, -0.0, 1.0 / 3.0, f64::MAX, f64::MIN_POSITIVE, 5e-324, -2.5e300, 123456789.0];
        let t = Tensor::row(vals.clone());
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        let back: Tensor = serde_json::from_str(&s).unwrap();
        for (a, b) in vals.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(serde_json::to_string(&Tensor::scalar(f64::NAN)).is_err());
    }
}
