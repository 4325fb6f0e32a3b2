use super::score::ScoreFn;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{log_sum_exp, Tensor};
use crate::tvc::exact_kl;

fn log_normalize(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|v| v - z).collect()
}

/// Exact KL trajectory of free logits updated by the particle rule
/// `ℓ ← ℓ − lr · score(log q, log p)` with the exact `q = softmax(ℓ)` as its
/// own proxy. Entry 0 is the initial KL.
pub fn logit_space_descent(logits: &[f64], log_p: &[f64], steps: usize, lr: f64, score: ScoreFn) -> Result<Vec<f64>> {
    let k = logits.len();
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let mut l = logits.to_vec();
    let mut kls = Vec::with_capacity(steps + 1);
    let lp = Tensor::new([1, k], log_p.to_vec())?;
    for step in 0..=steps {
        let lq = log_normalize(&l);
        let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        kls.push(exact_kl(&q, &p)?);
        if step == steps {
            break;
        }
        let s = score(&Tensor::new([1, k], lq)?, &lp)?;
        for (li, si) in l.iter_mut().zip(s.data()) {
            *li -= lr * si;
        }
    }
    Ok(kls)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub pairs: usize,
    /// Largest `KL_final / KL_initial` over pairs.
    pub worst_ratio: f64,
    /// Pairs where some step increased the KL.
    pub non_monotone: usize,
    pub pass: bool,
}

/// Runs [`logit_space_descent`] on `pairs` random `(q, p)` pairs over `k` states.
pub fn kl_descent_suite(pairs: usize, k: usize, steps: usize, lr: f64, seed: u64, score: ScoreFn) -> Result<DescentReport> {
    let mut r = rng::seeded(seed);
    let (mut worst, mut non_monotone) = (0.0f64, 0);
    for _ in 0..pairs {
        let q: Vec<f64> = (0..k).map(|_| rng::normal(&mut r, 1.0)).collect();
        let p = log_normalize(&(0..k).map(|_| rng::normal(&mut r, 1.0)).collect::<Vec<f64>>());
        let kls = logit_space_descent(&q, &p, steps, lr, score)?;
        let ratio = kls[steps] / kls[0];
        worst = worst.max(if ratio.is_nan() { f64::INFINITY } else { ratio });
        if kls.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
    }
    Ok(DescentReport { pairs, worst_ratio: worst, non_monotone, pass: non_monotone == 0 && worst < 0.1 })
}

/// `(E_q[log q_ψ − log p], KL(q‖p) − KL(q‖q_ψ))` on tabular distributions.
pub fn surrogate_decomposition(q: &[f64], q_psi: &[f64], p: &[f64]) -> Result<(f64, f64)> {
    if q.len() != q_psi.len() || q.len() != p.len() {
        return Err(Error::InvalidArgument("tables must share one support".into()));
    }
    let mut lhs = 0.0;
    for i in 0..q.len() {
        if q[i] > 0.0 {
            if !(q_psi[i] > 0.0) || !(p[i] > 0.0) {
                return Err(Error::Support { index: i, q: q[i] });
            }
            lhs += q[i] * (q_psi[i].ln() - p[i].ln());
        }
    }
    Ok((lhs, exact_kl(q, p)? - exact_kl(q, q_psi)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStep {
    /// Fitted moments of the cloud before the update.
    pub m: f64,
    pub s: f64,
    pub kl: f64,
    /// RMS over the cloud of the empirical velocity minus the closed-form one.
    pub velocity_rms_err: f64,
}

pub const GAUSSIAN_CLOUD: usize = 10_000;

fn moments(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// `KL(N(m, s²) ‖ N(0, 1)) = ½(s² + m² − 1 − ln s²)`, with `t − ln(1 + t)`
/// expanded in series near `s = 1` to avoid cancellation.
pub fn gaussian_kl(m: f64, s: f64) -> f64 {
    let t = (s - 1.0) * (s + 1.0);
    let g = if t.abs() < 1e-3 {
        t * t * (0.5 - t * (1.0 / 3.0 - t * (0.25 - t * 0.2)))
    } else {
        t - t.ln_1p()
    };
    0.5 * (m * m + g)
}

/// Particle simulation of the flow toward `N(0, 1)`.
///
/// Each step fits a Gaussian `q̂ = N(m, s²)` to the cloud and moves every
/// particle by `lr · v(z)` with `v(z) = (z − m)/s² − z`, the negated score
/// difference `−(∇log q̂ − ∇log p)`. The closed-form reference evolves the
/// moments by `m ← (1 − lr) m`, `s ← s + lr (1/s − s)` from the cloud's
/// initial fit; `velocity_rms_err` compares the two fields on the cloud.
/// A final entry records the moments after the last update.
pub fn gaussian_wgf_demo(m0: f64, s0: f64, steps: usize, lr: f64, seed: u64) -> Result<Vec<GaussianStep>> {
    if !(s0 > 0.0) || !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("need s0 > 0 and lr > 0, got {s0}, {lr}")));
    }
    let mut r: Rng = rng::seeded(seed);
    let mut z: Vec<f64> = (0..GAUSSIAN_CLOUD).map(|_| m0 + rng::normal::<f64>(&mut r, s0)).collect();
    let (mut mc, mut sc) = moments(&z);
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (m, s) = moments(&z);
        if !(s > 1e-12) {
            return Err(Error::DegenerateCloud(s));
        }
        let v = |x: f64, m: f64, s: f64| (x - m) / (s * s) - x;
        let err = (z.iter().map(|&x| (v(x, m, s) - v(x, mc, sc)).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        out.push(GaussianStep { m, s, kl: gaussian_kl(m, s), velocity_rms_err: err });
        if step == steps {
            break;
        }
        for x in &mut z {
            *x += lr * v(*x, m, s);
        }
        (mc, sc) = ((1.0 - lr) * mc, sc + lr * (1.0 / sc - sc));
    }
    Ok(out)
}
