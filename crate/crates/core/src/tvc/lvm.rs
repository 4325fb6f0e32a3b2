use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Smallest admissible probability in a full-support table.
pub const FLOOR: f64 = 1e-12;
const SUM_TOL: f64 = 1e-12;

/// Finite latent-variable model given by explicit tables.
///
/// `p_lik` is stored row-per-latent (`p_lik[z][x]`), `q_post` row-per-datum
/// (`q_post[x][z]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLvm {
    pub p_data: Vec<f64>,
    pub p_prior: Vec<f64>,
    pub p_lik: Vec<Vec<f64>>,
    pub q_post: Vec<Vec<f64>>,
}

fn check_dist(name: &str, row: &[f64]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::InvalidTable(format!("{name} is empty")));
    }
    if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidTable(format!("{name} has invalid entry {v}")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidTable(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Normalizes positive weights into a distribution with every entry at least `FLOOR`.
pub fn normalize_floored(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| (v / s).max(FLOOR)).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Random full-support distribution with log-normal weights.
pub fn random_dist(r: &mut Rng, n: usize, spread: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng::normal::<f64>(r, spread).exp()).collect();
    normalize_floored(&w)
}

impl TabularLvm {
    pub fn new(p_data: Vec<f64>, p_prior: Vec<f64>, p_lik: Vec<Vec<f64>>, q_post: Vec<Vec<f64>>) -> Result<Self> {
        check_dist("p_data", &p_data)?;
        check_dist("p_prior", &p_prior)?;
        let (nx, nz) = (p_data.len(), p_prior.len());
        if p_lik.len() != nz || q_post.len() != nx {
            return Err(Error::InvalidTable(format!(
                "expected {nz} likelihood rows and {nx} posterior rows, got {} and {}",
                p_lik.len(),
                q_post.len()
            )));
        }
        for (z, row) in p_lik.iter().enumerate() {
            if row.len() != nx {
                return Err(Error::InvalidTable(format!("p_lik[{z}] has {} entries, expected {nx}", row.len())));
            }
            check_dist(&format!("p_lik[{z}]"), row)?;
        }
        for (x, row) in q_post.iter().enumerate() {
            if row.len() != nz {
                return Err(Error::InvalidTable(format!("q_post[{x}] has {} entries, expected {nz}", row.len())));
            }
            check_dist(&format!("q_post[{x}]"), row)?;
        }
        Ok(Self { p_data, p_prior, p_lik, q_post })
    }

    /// Random model with every table drawn independently.
    pub fn random(r: &mut Rng, nx: usize, nz: usize) -> Self {
        let p_data = random_dist(r, nx, 1.0);
        let p_prior = random_dist(r, nz, 1.0);
        let p_lik = (0..nz).map(|_| random_dist(r, nx, 1.0)).collect();
        let q_post = (0..nx).map(|_| random_dist(r, nz, 1.0)).collect();
        Self { p_data, p_prior, p_lik, q_post }
    }

    /// Model whose posterior is a point mass `q(z|x) = δ(z = code[x])`.
    /// Such tables contain exact zeros and do not have full support.
    pub fn deterministic_coding(
        p_data: Vec<f64>,
        code: &[usize],
        p_prior: Vec<f64>,
        p_lik: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let nz = p_prior.len();
        if code.len() != p_data.len() || code.iter().any(|&z| z >= nz) {
            return Err(Error::InvalidTable("code must map every datum to a latent index".into()));
        }
        let q_post = code
            .iter()
            .map(|&z| {
                let mut row = vec![0.0; nz];
                row[z] = 1.0;
                row
            })
            .collect();
        Self::new(p_data, p_prior, p_lik, q_post)
    }

    /// Model whose variational joint equals the generative joint: draws a
    /// random `p(z)`, `p(x|z)` and sets `p_data := p(x)`, `q(z|x) := p(z|x)`.
    pub fn consistent(r: &mut Rng, nx: usize, nz: usize) -> Self {
        let p_prior = random_dist(r, nz, 1.0);
        let p_lik: Vec<Vec<f64>> = (0..nz).map(|_| random_dist(r, nx, 1.0)).collect();
        let mut lvm = Self { p_data: vec![1.0 / nx as f64; nx], p_prior, p_lik, q_post: vec![vec![1.0 / nz as f64; nz]; nx] };
        lvm.p_data = lvm.model_marginal();
        lvm.q_post = (0..nx).map(|x| (0..nz).map(|z| lvm.p_post(x, z)).collect()).collect();
        lvm
    }

    pub fn nx(&self) -> usize {
        self.p_data.len()
    }

    pub fn nz(&self) -> usize {
        self.p_prior.len()
    }

    pub fn has_full_support(&self) -> bool {
        let all = self
            .p_data
            .iter()
            .chain(&self.p_prior)
            .chain(self.p_lik.iter().flatten())
            .chain(self.q_post.iter().flatten());
        all.into_iter().all(|&v| v >= FLOOR)
    }

    pub fn require_full_support(&self) -> Result<()> {
        if self.has_full_support() {
            Ok(())
        } else {
            Err(Error::InvalidTable(format!("table entry below the {FLOOR:e} support floor")))
        }
    }

    /// `p(x) = Σ_z p(x|z) p(z)`
    pub fn model_marginal(&self) -> Vec<f64> {
        (0..self.nx()).map(|x| (0..self.nz()).map(|z| self.p_lik[z][x] * self.p_prior[z]).sum()).collect()
    }

    /// `q(z) = Σ_x p_data(x) q(z|x)`
    pub fn aggregate_posterior(&self) -> Vec<f64> {
        (0..self.nz()).map(|z| (0..self.nx()).map(|x| self.p_data[x] * self.q_post[x][z]).sum()).collect()
    }

    /// Generative posterior `p(z|x)` by Bayes.
    pub fn p_post(&self, x: usize, z: usize) -> f64 {
        let px: f64 = (0..self.nz()).map(|k| self.p_lik[k][x] * self.p_prior[k]).sum();
        self.p_lik[z][x] * self.p_prior[z] / px
    }

    /// Variational likelihood `q(x|z) = p_data(x) q(z|x) / q(z)`.
    pub fn q_lik(&self, x: usize, z: usize) -> f64 {
        let qz: f64 = (0..self.nx()).map(|k| self.p_data[k] * self.q_post[k][z]).sum();
        self.p_data[x] * self.q_post[x][z] / qz
    }

    /// `q(x|z)` as a `|Z| × |X|` matrix.
    pub fn q_lik_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.nz()).map(|z| (0..self.nx()).map(|x| self.q_lik(x, z)).collect()).collect()
    }
}
