use crate::error::{Error, Result};
use crate::models::TokenizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest enumerable sequence space.
pub const MAX_STATES: usize = 1_000_000;

/// Deterministic map from a datum to a token-id sequence.
pub trait TokenEncoder<T> {
    fn encode_ids(&self, x: &Tensor<T>) -> Result<Vec<usize>>;
}

impl<T: Scalar> TokenEncoder<T> for TokenizerState<T> {
    fn encode_ids(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.tokenize(x)?.ids().to_vec())
    }
}

impl<T, F: Fn(&Tensor<T>) -> Result<Vec<usize>>> TokenEncoder<T> for F {
    fn encode_ids(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self(x)
    }
}

/// Mixed-radix index of `ids` with the first token most significant.
pub fn sequence_index(ids: &[usize], k: usize) -> usize {
    ids.iter().fold(0, |acc, &i| acc * k + i)
}

/// Exact aggregate posterior over all `Kⁿ` sequences for a uniform
/// distribution over `dataset`.
pub fn exact_ar_aggregate<T, E: TokenEncoder<T> + ?Sized>(
    encoder: &E,
    dataset: &[Tensor<T>],
    n: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let states = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if states > MAX_STATES as u128 {
        return Err(Error::StateSpaceTooLarge { states, limit: MAX_STATES });
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut counts = vec![0usize; states as usize];
    for x in dataset {
        let ids = encoder.encode_ids(x)?;
        if ids.len() != n || ids.iter().any(|&i| i >= k) {
            return Err(Error::InvalidArgument(format!("encoder produced {ids:?}, expected {n} ids below {k}")));
        }
        counts[sequence_index(&ids, k)] += 1;
    }
    let total = dataset.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}
