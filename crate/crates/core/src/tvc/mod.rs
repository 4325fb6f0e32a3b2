//! Exact-enumeration oracles on finite latent-variable models.

mod aggregate;
mod identities;
mod lvm;

pub use aggregate::{exact_ar_aggregate, sequence_index, TokenEncoder, MAX_STATES};
pub use identities::{
    complete_case3, elbo_decomposition, entropy, exact_kl, incomplete_case3, matrix_rank, max_tvc_residual,
    null_vector, redundancy_check, tvc_terms, ElboReport, RedundancyCase, RedundancyReport, TvcTerms, Verdict,
    IMPLIED_TOL, PREMISE_TOL,
};
pub use lvm::{normalize_floored, random_dist, TabularLvm, FLOOR};

#[cfg(test)]
mod tests;
