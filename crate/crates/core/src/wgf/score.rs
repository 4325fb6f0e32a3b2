use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `log Q − log P`, elementwise over n×K log-probability tables.
pub fn prior_matching_score<T: Scalar>(log_q: &Tensor<T>, log_p: &Tensor<T>) -> Result<Tensor<T>> {
    if log_q.shape() != log_p.shape() {
        return Err(Error::shape("prior_matching_score", format!("{:?} vs {:?}", log_q.shape(), log_p.shape())));
    }
    let data = log_q.data().iter().zip(log_p.data()).map(|(&a, &b)| a - b).collect();
    Tensor::new(log_q.shape().to_vec(), data)
}

/// Gradient with respect to the one-hot tokens, kept in its two parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleGradient<T> {
    pub g_z: Tensor<T>,
    pub recon: Tensor<T>,
    /// `log Q − log P` before weighting.
    pub prior: Tensor<T>,
}

/// `g_z = recon_grad_z + λ (log Q − log P)`
pub fn particle_gradient<T: Scalar>(
    recon_grad_z: &Tensor<T>,
    log_q: &Tensor<T>,
    log_p: &Tensor<T>,
    lambda: f64,
) -> Result<ParticleGradient<T>> {
    let prior = prior_matching_score(log_q, log_p)?;
    if recon_grad_z.shape() != prior.shape() {
        return Err(Error::shape("particle_gradient", format!("{:?} vs {:?}", recon_grad_z.shape(), prior.shape())));
    }
    if !recon_grad_z.is_finite() || !prior.is_finite() {
        return Err(Error::NonFinite { op: "particle_gradient" });
    }
    let l = T::of(lambda);
    let g = recon_grad_z.data().iter().zip(prior.data()).map(|(&r, &s)| r + l * s).collect();
    Ok(ParticleGradient { g_z: Tensor::new(prior.shape().to_vec(), g)?, recon: recon_grad_z.clone(), prior })
}

/// Signature shared by the score and its test-only replacements.
pub type ScoreFn = fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;

/// Reference score used by the oracles.
pub fn reference_score(log_q: &Tensor<f64>, log_p: &Tensor<f64>) -> Result<Tensor<f64>> {
    prior_matching_score(log_q, log_p)
}

/// Sign-flipped score, a negative control for descent checks.
pub fn flipped_score(log_q: &Tensor<f64>, log_p: &Tensor<f64>) -> Result<Tensor<f64>> {
    prior_matching_score(log_p, log_q)
}
