use super::lvm::TabularLvm;
use crate::error::{Error, Result};

/// The three log-ratios of the decomposition at one `(x, z)` cell, with the
/// residual `log p(x) − (L + P − Post + log p_data(x))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvcTerms {
    pub likelihood: f64,
    pub prior: f64,
    pub posterior: f64,
    pub residual: f64,
}

pub fn tvc_terms(lvm: &TabularLvm, x: usize, z: usize) -> Result<TvcTerms> {
    lvm.require_full_support()?;
    if x >= lvm.nx() || z >= lvm.nz() {
        return Err(Error::InvalidArgument(format!("cell ({x}, {z}) outside {}×{}", lvm.nx(), lvm.nz())));
    }
    let px = lvm.model_marginal()[x];
    let qz = lvm.aggregate_posterior()[z];
    let likelihood = (lvm.p_lik[z][x] / lvm.q_lik(x, z)).ln();
    let prior = (lvm.p_prior[z] / qz).ln();
    let posterior = (lvm.p_post(x, z) / lvm.q_post[x][z]).ln();
    let residual = px.ln() - (likelihood + prior - posterior + lvm.p_data[x].ln());
    Ok(TvcTerms { likelihood, prior, posterior, residual })
}

/// Largest `|residual|` over every cell.
pub fn max_tvc_residual(lvm: &TabularLvm) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in 0..lvm.nx() {
        for z in 0..lvm.nz() {
            worst = worst.max(tvc_terms(lvm, x, z)?.residual.abs());
        }
    }
    Ok(worst)
}

/// `Σ q ln(q/p)` with `0 ln 0 = 0`.
pub fn exact_kl(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::InvalidArgument(format!("tables of length {} and {}", q.len(), p.len())));
    }
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi > 0.0 {
            if !(pi > 0.0) {
                return Err(Error::Support { index: i, q: qi });
            }
            kl += qi * (qi / pi).ln();
        }
    }
    Ok(kl)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Rank by Gaussian elimination with partial pivoting; pivots below `tol`
/// (relative to the largest entry) count as zero.
pub fn matrix_rank(rows: &[Vec<f64>], tol: f64) -> usize {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let m = a.len();
    let n = a.first().map_or(0, Vec::len);
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for c in 0..n {
        if rank == m {
            break;
        }
        let piv = (rank..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows remain");
        if a[piv][c].abs() <= tol * scale {
            continue;
        }
        a.swap(rank, piv);
        for i in rank + 1..m {
            let f = a[i][c] / a[rank][c];
            for k in c..n {
                a[i][k] -= f * a[rank][k];
            }
        }
        rank += 1;
    }
    rank
}

/// A unit vector `v` with `rows · v ≈ 0`, if the null space is non-trivial.
pub fn null_vector(rows: &[Vec<f64>], tol: f64) -> Option<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let m = a.len();
    let n = a.first().map_or(0, Vec::len);
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..n {
        if r == m {
            break;
        }
        let piv = (r..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows remain");
        if a[piv][c].abs() <= tol * scale {
            continue;
        }
        a.swap(r, piv);
        let p = a[r][c];
        for v in &mut a[r] {
            *v /= p;
        }
        for i in 0..m {
            if i != r {
                let f = a[i][c];
                if f != 0.0 {
                    for k in 0..n {
                        a[i][k] -= f * a[r][k];
                    }
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    let free = (0..n).find(|c| !pivots.contains(c))?;
    let mut v = vec![0.0; n];
    v[free] = 1.0;
    for (row, &c) in pivots.iter().enumerate() {
        v[c] = -a[row][free];
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Some(v.into_iter().map(|x| x / norm).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedundancyCase {
    /// Likelihood and prior consistency imply posterior consistency.
    LikelihoodPrior = 1,
    /// Posterior and likelihood consistency imply prior consistency.
    PosteriorLikelihood = 2,
    /// Posterior and prior consistency imply likelihood consistency,
    /// given completeness of the variational likelihood family.
    PosteriorPrior = 3,
}

impl RedundancyCase {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::LikelihoodPrior),
            2 => Ok(Self::PosteriorLikelihood),
            3 => Ok(Self::PosteriorPrior),
            _ => Err(Error::InvalidArgument(format!("no redundancy case {n}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Premises hold and the implied consistency was observed.
    Verified,
    /// Premises hold but completeness fails, so the implication is not guaranteed.
    NotGuaranteed,
    /// The model does not satisfy the case's premises.
    PremiseViolated,
    /// Premises (and completeness) hold yet the implication failed.
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyReport {
    pub case: RedundancyCase,
    pub premise_residual: f64,
    pub implied_residual: f64,
    /// `max_x |p(x) − p_data(x)|`
    pub marginal_residual: f64,
    /// Rank of the `q(x|z)` matrix and whether it equals `|X|` (case 3 only).
    pub rank: Option<usize>,
    pub complete: Option<bool>,
    pub verdict: Verdict,
}

pub const PREMISE_TOL: f64 = 1e-12;
pub const IMPLIED_TOL: f64 = 1e-10;
const RANK_TOL: f64 = 1e-9;

fn max_gap(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn redundancy_check(case: RedundancyCase, lvm: &TabularLvm) -> Result<RedundancyReport> {
    lvm.require_full_support()?;
    let (nx, nz) = (lvm.nx(), lvm.nz());
    let cells = || (0..nx).flat_map(move |x| (0..nz).map(move |z| (x, z)));
    let lik = max_gap(cells().map(|(x, z)| lvm.p_lik[z][x]), cells().map(|(x, z)| lvm.q_lik(x, z)));
    let prior = max_gap(lvm.p_prior.iter().copied(), lvm.aggregate_posterior().into_iter());
    let post = max_gap(cells().map(|(x, z)| lvm.p_post(x, z)), cells().map(|(x, z)| lvm.q_post[x][z]));
    let marginal = max_gap(lvm.model_marginal().into_iter(), lvm.p_data.iter().copied());
    let (premise, implied) = match case {
        RedundancyCase::LikelihoodPrior => (lik.max(prior), post),
        RedundancyCase::PosteriorLikelihood => (post.max(lik), prior),
        RedundancyCase::PosteriorPrior => (post.max(prior), lik),
    };
    let (rank, complete) = if case == RedundancyCase::PosteriorPrior {
        let r = matrix_rank(&lvm.q_lik_matrix(), RANK_TOL);
        (Some(r), Some(r == nx))
    } else {
        (None, None)
    };
    let holds = implied <= IMPLIED_TOL && marginal <= IMPLIED_TOL;
    let verdict = if premise > PREMISE_TOL {
        Verdict::PremiseViolated
    } else if complete == Some(false) {
        Verdict::NotGuaranteed
    } else if holds {
        Verdict::Verified
    } else {
        Verdict::Failed
    };
    Ok(RedundancyReport {
        case,
        premise_residual: premise,
        implied_residual: implied,
        marginal_residual: marginal,
        rank,
        complete,
        verdict,
    })
}

/// Model satisfying posterior and prior consistency whose variational
/// likelihood `q(x|z)` has rank below `|X|` (two data states share a
/// likelihood profile), with `p(x) ≠ p_data(x)`: the case-3 implication
/// genuinely fails without completeness.
pub fn incomplete_case3(r: &mut crate::rng::Rng, nx: usize, nz: usize) -> Result<TabularLvm> {
    if nx < 2 || nz < 1 {
        return Err(Error::InvalidArgument("need |X| >= 2".into()));
    }
    let p_data = super::lvm::random_dist(r, nx, 0.5);
    let mut q_post: Vec<Vec<f64>> = (0..nx).map(|_| super::lvm::random_dist(r, nz, 1.0)).collect();
    // data states 0 and 1 share q(z|x), so q(x|z) columns 0 and 1 are proportional
    q_post[1] = q_post[0].clone();
    let base = TabularLvm::new(p_data.clone(), vec![1.0 / nz as f64; nz], vec![vec![1.0 / nx as f64; nx]; nz], q_post)?;
    let ql = base.q_lik_matrix();
    let v = null_vector(&ql, RANK_TOL).ok_or_else(|| Error::InvalidArgument("likelihood family is complete".into()))?;
    // r(x) = 1 + ε v(x) keeps E_{q(x|z)} r = 1 for every z
    let vmax = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let eps = 0.5 / vmax;
    let ratio: Vec<f64> = v.iter().map(|a| 1.0 + eps * a).collect();
    let p_prior = base.aggregate_posterior();
    let p_lik = (0..nz).map(|z| (0..nx).map(|x| ql[z][x] * ratio[x]).collect::<Vec<f64>>()).collect::<Vec<_>>();
    let p_lik = p_lik
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    TabularLvm::new(base.p_data, p_prior, p_lik, base.q_post)
}

/// Model satisfying posterior and prior consistency with a complete
/// likelihood family (`|Z| ≥ |X|`, generic tables).
pub fn complete_case3(r: &mut crate::rng::Rng, nx: usize, nz: usize) -> Result<TabularLvm> {
    if nz < nx {
        return Err(Error::InvalidArgument(format!("completeness needs |Z| >= |X|, got {nz} < {nx}")));
    }
    let p_data = super::lvm::random_dist(r, nx, 1.0);
    let q_post: Vec<Vec<f64>> = (0..nx).map(|_| super::lvm::random_dist(r, nz, 1.0)).collect();
    let base = TabularLvm::new(p_data, vec![1.0 / nz as f64; nz], vec![vec![1.0 / nx as f64; nx]; nz], q_post)?;
    let p_prior = base.aggregate_posterior();
    let p_lik = base.q_lik_matrix();
    TabularLvm::new(base.p_data, p_prior, p_lik, base.q_post)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    /// `E_x log p(x)`
    pub loglik: f64,
    pub elbo: f64,
    /// `E_x KL(q(z|x) ‖ p(z|x))`
    pub posterior_gap: f64,
    /// `loglik − (elbo + posterior_gap)`
    pub residual: f64,
    /// `E_x KL(q(z|x) ‖ p(z))`
    pub rate: f64,
    /// `H_q(Z)`
    pub h_z: f64,
    /// `H_q(Z|X)`
    pub h_z_given_x: f64,
    /// `KL(q(z) ‖ p(z))`
    pub kl_aggregate: f64,
    /// `rate − (h_z − h_z_given_x + kl_aggregate)`
    pub expansion_residual: f64,
}

/// Evidence lower bound with its posterior gap, and the rate term expanded
/// through the aggregate posterior. Point-mass posteriors are allowed.
pub fn elbo_decomposition(lvm: &TabularLvm) -> Result<ElboReport> {
    let px = lvm.model_marginal();
    let qz = lvm.aggregate_posterior();
    let (mut loglik, mut elbo, mut gap, mut rate, mut h_cond) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for x in 0..lvm.nx() {
        let w = lvm.p_data[x];
        if w == 0.0 {
            continue;
        }
        loglik += w * px[x].ln();
        let q = &lvm.q_post[x];
        let post: Vec<f64> = (0..lvm.nz()).map(|z| lvm.p_post(x, z)).collect();
        let mut e = 0.0;
        for z in 0..lvm.nz() {
            if q[z] > 0.0 {
                e += q[z] * (lvm.p_lik[z][x].ln() + lvm.p_prior[z].ln() - q[z].ln());
            }
        }
        elbo += w * e;
        gap += w * exact_kl(q, &post)?;
        rate += w * exact_kl(q, &lvm.p_prior)?;
        h_cond += w * entropy(q);
    }
    let h_z = entropy(&qz);
    let kl_aggregate = exact_kl(&qz, &lvm.p_prior)?;
    Ok(ElboReport {
        loglik,
        elbo,
        posterior_gap: gap,
        residual: loglik - (elbo + gap),
        rate,
        h_z,
        h_z_given_x: h_cond,
        kl_aggregate,
        expansion_residual: rate - (h_z - h_cond + kl_aggregate),
    })
}
