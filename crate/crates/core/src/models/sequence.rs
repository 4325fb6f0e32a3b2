use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

/// A length-n token sequence with its simplex view `h` (n×K).
///
/// For sequences produced by the quantizer `h` is the softmax over codebook
/// logits; for sampled or loaded sequences it is the one-hot table itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    ids: Vec<usize>,
    h: Tensor<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn from_ids(ids: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary needs K >= 2, got {k}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range for K={k}")));
        }
        let h = Tensor::one_hot(&ids, k);
        Ok(Self { ids, h })
    }

    /// Builds from a simplex table; ids are the row argmaxes (lowest index on ties).
    pub fn from_simplex(h: Tensor<T>) -> Result<Self> {
        if h.rank() != 2 || h.cols() < 2 {
            return Err(Error::shape("token_sequence", format!("expected n×K with K >= 2, got {:?}", h.shape())));
        }
        for r in 0..h.rows() {
            let row = h.row(r);
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < T::zero()) {
                return Err(Error::InvalidArgument(format!("row {r} of h is not on the simplex (sum {s})")));
            }
        }
        let ids = (0..h.rows()).map(|r| argmax(h.row(r))).collect();
        Ok(Self { ids, h })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.h.cols()
    }

    pub fn simplex(&self) -> &Tensor<T> {
        &self.h
    }

    pub fn one_hot(&self) -> Tensor<T> {
        Tensor::one_hot(&self.ids, self.vocab())
    }
}
