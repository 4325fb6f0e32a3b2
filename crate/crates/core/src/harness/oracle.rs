use std::io::Write;
use std::time::Instant;

use crate::autodiff::catalog::op_cases;
use crate::autodiff::{grad_check, grad_check_against_f64};
use crate::data::write_pairs;
use crate::error::Result;
use crate::models::check::{pipeline_grad_check, pipeline_grad_check_f32};
use crate::rng;
use crate::tensor::Tensor;
use crate::tvc::{
    complete_case3, elbo_decomposition, incomplete_case3, max_tvc_residual, random_dist, redundancy_check,
    RedundancyCase, TabularLvm, Verdict,
};
use crate::wgf::{gaussian_wgf_demo, kl_descent_suite, prior_matching_score, reference_score, surrogate_decomposition, ScoreFn};

/// One named check: passes iff `residual <= tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub residual: f64,
    pub pass: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write(&self, sink: &mut impl Write) -> std::io::Result<()> {
        for c in &self.checks {
            write_pairs(
                &[
                    ("check", c.name.to_string()),
                    ("status", if c.pass { "pass" } else { "FAIL" }.to_string()),
                    ("tolerance", format!("{:e}", c.tolerance)),
                    ("residual", format!("{:e}", c.residual)),
                    ("seconds", format!("{:.3}", c.seconds)),
                ],
                sink,
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        write_pairs(&[("checks", self.checks.len().to_string()), ("failed", failed.to_string())], sink)
    }
}

struct Suite {
    checks: Vec<OracleCheck>,
}

impl Suite {
    fn run(&mut self, name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<f64>) {
        let start = Instant::now();
        // an error is a failed check with infinite residual
        let residual = f().unwrap_or(f64::INFINITY);
        let residual = if residual.is_nan() { f64::INFINITY } else { residual };
        self.checks.push(OracleCheck {
            name,
            tolerance,
            residual,
            pass: residual <= tolerance,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Every identity, gradient, fixed-point and descent check with the
/// reference score.
pub fn oracle_suite() -> OracleReport {
    oracle_suite_with(reference_score)
}

/// [`oracle_suite`] with the KL-descent check driven by `score`.
pub fn oracle_suite_with(score: ScoreFn) -> OracleReport {
    let mut s = Suite { checks: Vec::new() };

    s.run("tvc_identity", 1e-10, || {
        let mut r = rng::seeded(101);
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let lvm = TabularLvm::random(&mut r, 2 + i % 7, 1 + i % 6);
            worst = worst.max(max_tvc_residual(&lvm)?);
        }
        Ok(worst)
    });

    for (name, case) in [
        ("redundancy_case1", RedundancyCase::LikelihoodPrior),
        ("redundancy_case2", RedundancyCase::PosteriorLikelihood),
    ] {
        s.run(name, 1e-10, || {
            let mut r = rng::seeded(102);
            let mut worst: f64 = 0.0;
            for i in 0..20 {
                let lvm = TabularLvm::consistent(&mut r, 2 + i % 7, 1 + i % 6);
                let rep = redundancy_check(case, &lvm)?;
                if rep.verdict != Verdict::Verified {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max(rep.implied_residual).max(rep.marginal_residual);
            }
            Ok(worst)
        });
    }

    s.run("redundancy_case3_full_rank", 1e-10, || {
        let mut r = rng::seeded(103);
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let nx = 2 + i % 5;
            let lvm = complete_case3(&mut r, nx, nx + i % 3)?;
            let rep = redundancy_check(RedundancyCase::PosteriorPrior, &lvm)?;
            if rep.verdict != Verdict::Verified {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(rep.implied_residual).max(rep.marginal_residual);
        }
        Ok(worst)
    });

    // residual 0 when every rank-deficient control is flagged
    s.run("redundancy_case3_rank_deficient_flagged", 0.0, || {
        let mut r = rng::seeded(104);
        let mut missed = 0;
        for i in 0..20 {
            let lvm = incomplete_case3(&mut r, 3 + i % 4, 2 + i % 5)?;
            let rep = redundancy_check(RedundancyCase::PosteriorPrior, &lvm)?;
            if rep.verdict != Verdict::NotGuaranteed {
                missed += 1;
            }
        }
        Ok(missed as f64)
    });

    s.run("elbo_decomposition", 1e-10, || {
        let mut r = rng::seeded(105);
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let rep = elbo_decomposition(&TabularLvm::random(&mut r, 2 + i % 7, 1 + i % 6))?;
            worst = worst.max(rep.residual.abs());
        }
        Ok(worst)
    });

    s.run("aggregate_expansion", 1e-10, || {
        let mut r = rng::seeded(106);
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let rep = elbo_decomposition(&TabularLvm::random(&mut r, 2 + i % 7, 1 + i % 6))?;
            worst = worst.max(rep.expansion_residual.abs());
        }
        Ok(worst)
    });

    s.run("posterior_gap_zero", 1e-12, || {
        let mut r = rng::seeded(107);
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let rep = elbo_decomposition(&TabularLvm::consistent(&mut r, 2 + i % 7, 1 + i % 6))?;
            worst = worst.max(rep.posterior_gap.abs());
        }
        Ok(worst)
    });

    s.run("surrogate_decomposition", 1e-10, || {
        let mut r = rng::seeded(108);
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let k = 2 + i % 15;
            let (q, qp, p) = (random_dist(&mut r, k, 1.0), random_dist(&mut r, k, 1.0), random_dist(&mut r, k, 1.0));
            let (lhs, rhs) = surrogate_decomposition(&q, &qp, &p)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok(worst)
    });

    s.run("op_grad_f64", 1e-6, || {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            for case in op_cases::<f64>(seed) {
                worst = worst.max(grad_check(&case.function, &case.inputs, 1e-6)?.max_rel_err);
            }
        }
        Ok(worst)
    });

    s.run("op_grad_f32", 1e-4, || {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            for (case, twin) in op_cases::<f32>(seed).into_iter().zip(op_cases::<f64>(seed)) {
                worst = worst.max(grad_check_against_f64(&case.function, &twin.function, &case.inputs, 1e-4)?.max_rel_err);
            }
        }
        Ok(worst)
    });

    s.run("pipeline_grad_f64", 1e-6, || {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            worst = worst.max(pipeline_grad_check(seed, 1e-6)?.max_rel_err);
        }
        Ok(worst)
    });

    s.run("pipeline_grad_f32", 1e-4, || {
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            worst = worst.max(pipeline_grad_check_f32(seed, 1e-4)?.max_rel_err);
        }
        Ok(worst)
    });

    s.run("fixed_point", 0.0, || {
        let mut r = rng::seeded(109);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let rows: Vec<f64> = (0..4).flat_map(|_| random_dist(&mut r, 8, 1.0)).map(f64::ln).collect();
            let lp = Tensor::new([4, 8], rows)?;
            worst = worst.max(prior_matching_score(&lp, &lp)?.max_abs());
        }
        Ok(worst)
    });

    // residual is the worst final/initial KL ratio; any increase fails
    s.run("kl_descent", 0.1, || {
        let rep = kl_descent_suite(100, 4, 200, 1e-2, 110, score)?;
        Ok(if rep.non_monotone > 0 { f64::INFINITY } else { rep.worst_ratio })
    });

    s.run("gaussian_velocity", 1e-3, || {
        let mut worst: f64 = 0.0;
        for (m0, s0, lr) in [(2.0, 0.5, 0.1), (-1.0, 2.0, 0.05), (0.5, 1.0, 0.1)] {
            for st in gaussian_wgf_demo(m0, s0, 200, lr, 111)? {
                worst = worst.max(st.velocity_rms_err);
            }
        }
        Ok(worst)
    });

    // residual is the largest single-step KL increase
    s.run("gaussian_kl_monotone", 0.0, || {
        let mut worst: f64 = 0.0;
        for (m0, s0, lr) in [(2.0, 0.5, 0.1), (-1.0, 2.0, 0.05), (0.5, 1.0, 0.1)] {
            let steps = gaussian_wgf_demo(m0, s0, 200, lr, 112)?;
            for w in steps.windows(2) {
                worst = worst.max(w[1].kl - w[0].kl);
            }
        }
        Ok(worst)
    });

    OracleReport { checks: s.checks }
}
