use super::*;
use crate::rng;
use crate::tensor::Tensor;

#[test]
fn marginal_with_single_latent_is_its_likelihood() {
    let mut r = rng::seeded(1);
    let mut lvm = TabularLvm::random(&mut r, 4, 1);
    lvm.p_prior = vec![1.0];
    assert_eq!(lvm.model_marginal(), lvm.p_lik[0]);
}

#[test]
fn marginal_with_latent_independent_likelihood() {
    let mut r = rng::seeded(2);
    let mut lvm = TabularLvm::random(&mut r, 5, 3);
    let row = lvm.p_lik[0].clone();
    lvm.p_lik = vec![row.clone(); 3];
    for (a, b) in lvm.model_marginal().iter().zip(&row) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn marginal_and_aggregate_match_double_loops() {
    let mut r = rng::seeded(3);
    let lvm = TabularLvm::random(&mut r, 3, 4);
    let mut px = vec![0.0; 3];
    let mut qz = vec![0.0; 4];
    for x in 0..3 {
        for z in 0..4 {
            px[x] += lvm.p_lik[z][x] * lvm.p_prior[z];
            qz[z] += lvm.p_data[x] * lvm.q_post[x][z];
        }
    }
    for (a, b) in lvm.model_marginal().iter().zip(&px) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in lvm.aggregate_posterior().iter().zip(&qz) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((lvm.model_marginal().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((lvm.aggregate_posterior().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn aggregate_of_deterministic_coding_is_pushforward() {
    let p_data = vec![0.1, 0.2, 0.3, 0.4];
    let lvm = TabularLvm::deterministic_coding(p_data, &[2, 0, 2, 1], vec![1.0 / 3.0; 3], vec![vec![0.25; 4]; 3]).unwrap();
    let q = lvm.aggregate_posterior();
    let want = [0.2, 0.4, 0.4];
    for (a, b) in q.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(!lvm.has_full_support());
    assert!(tvc_terms(&lvm, 0, 0).is_err());
}

#[test]
fn uniform_tables_give_uniform_aggregate() {
    let lvm = TabularLvm::new(vec![0.25; 4], vec![0.5; 2], vec![vec![0.25; 4]; 2], vec![vec![0.5; 2]; 4]).unwrap();
    assert_eq!(lvm.aggregate_posterior(), vec![0.5, 0.5]);
}

#[test]
fn invalid_tables_are_rejected() {
    assert!(TabularLvm::new(vec![0.5, 0.6], vec![1.0], vec![vec![0.5, 0.5]], vec![vec![1.0]; 2]).is_err());
    assert!(TabularLvm::new(vec![0.5, 0.5], vec![1.0], vec![vec![0.5, 0.5]], vec![vec![1.0]]).is_err());
}

#[test]
fn tvc_residual_vanishes_on_random_models() {
    let mut r = rng::seeded(4);
    for i in 0..100 {
        let (nx, nz) = (2 + i % 7, 1 + i % 6);
        let lvm = TabularLvm::random(&mut r, nx, nz);
        assert!(max_tvc_residual(&lvm).unwrap() <= 1e-10);
    }
}

#[test]
fn consistent_joint_has_zero_terms() {
    let mut r = rng::seeded(5);
    let lvm = TabularLvm::consistent(&mut r, 5, 3);
    for x in 0..5 {
        for z in 0..3 {
            let t = tvc_terms(&lvm, x, z).unwrap();
            assert!(t.likelihood.abs() < 1e-12 && t.prior.abs() < 1e-12 && t.posterior.abs() < 1e-12, "{t:?}");
        }
    }
}

#[test]
fn redundancy_cases() {
    let mut r = rng::seeded(6);
    let lvm = TabularLvm::consistent(&mut r, 6, 4);
    for case in [RedundancyCase::LikelihoodPrior, RedundancyCase::PosteriorLikelihood] {
        let rep = redundancy_check(case, &lvm).unwrap();
        assert_eq!(rep.verdict, Verdict::Verified, "{rep:?}");
    }
    let complete = complete_case3(&mut r, 4, 6).unwrap();
    let rep = redundancy_check(RedundancyCase::PosteriorPrior, &complete).unwrap();
    assert_eq!(rep.rank, Some(4));
    assert_eq!(rep.verdict, Verdict::Verified, "{rep:?}");

    let bad = incomplete_case3(&mut r, 4, 6).unwrap();
    let rep = redundancy_check(RedundancyCase::PosteriorPrior, &bad).unwrap();
    assert_eq!(rep.complete, Some(false));
    assert_eq!(rep.verdict, Verdict::NotGuaranteed);
    assert!(rep.premise_residual <= PREMISE_TOL);
    // the implication genuinely fails here
    assert!(rep.implied_residual > 1e-3 && rep.marginal_residual > 1e-3, "{rep:?}");

    let random = TabularLvm::random(&mut r, 4, 3);
    let rep = redundancy_check(RedundancyCase::LikelihoodPrior, &random).unwrap();
    assert_eq!(rep.verdict, Verdict::PremiseViolated);
}

#[test]
fn rank_and_null_space() {
    let m = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]];
    assert_eq!(matrix_rank(&m, 1e-12), 1);
    let v = null_vector(&m, 1e-12).unwrap();
    assert!((v[0] + 2.0 * v[1] + 3.0 * v[2]).abs() < 1e-12);
    assert!(null_vector(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-12).is_none());
}

#[test]
fn elbo_identities() {
    let mut r = rng::seeded(7);
    for _ in 0..50 {
        let lvm = TabularLvm::random(&mut r, 6, 5);
        let rep = elbo_decomposition(&lvm).unwrap();
        assert!(rep.residual.abs() <= 1e-10 && rep.expansion_residual.abs() <= 1e-10, "{rep:?}");
        assert!(rep.posterior_gap >= 0.0);
    }
    let tight = TabularLvm::consistent(&mut r, 5, 4);
    let rep = elbo_decomposition(&tight).unwrap();
    assert!(rep.posterior_gap.abs() < 1e-12);
    assert!((rep.elbo - rep.loglik).abs() < 1e-12);

    let det = TabularLvm::deterministic_coding(vec![0.1, 0.2, 0.3, 0.4], &[2, 0, 2, 1], vec![0.2, 0.5, 0.3], vec![
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.25; 4],
        vec![0.4, 0.3, 0.2, 0.1],
    ])
    .unwrap();
    let rep = elbo_decomposition(&det).unwrap();
    assert_eq!(rep.h_z_given_x, 0.0);
    assert!(rep.expansion_residual.abs() <= 1e-10);
}

#[test]
fn kl_examples() {
    assert_eq!(exact_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert!((exact_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap() - 0.5108).abs() < 1e-4);
    assert!(matches!(exact_kl(&[0.5, 0.5], &[1.0, 0.0]), Err(crate::Error::Support { index: 1, .. })));
    assert_eq!(exact_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    let mut r = rng::seeded(8);
    for _ in 0..1000 {
        let (q, p) = (random_dist(&mut r, 5, 1.0), random_dist(&mut r, 5, 1.0));
        assert!(exact_kl(&q, &p).unwrap() >= 0.0);
    }
}

fn images(count: usize) -> Vec<Tensor<f64>> {
    (0..count).map(|i| Tensor::from_f64([2], &[(i % 16) as f64, (i / 16) as f64]).unwrap()).collect()
}

#[test]
fn aggregate_of_constant_encoder_is_point_mass() {
    let enc = |_: &Tensor<f64>| Ok(vec![1, 3]);
    let q = exact_ar_aggregate(&enc, &images(10), 2, 4).unwrap();
    assert_eq!(q[sequence_index(&[1, 3], 4)], 1.0);
    assert_eq!(q.iter().filter(|&&v| v > 0.0).count(), 1);
}

#[test]
fn single_token_aggregate_is_histogram() {
    let data = images(30);
    let enc = |x: &Tensor<f64>| Ok(vec![(x.data()[0] as usize) % 3]);
    let q = exact_ar_aggregate(&enc, &data, 1, 3).unwrap();
    let mut counts = [0usize; 3];
    for x in &data {
        counts[(x.data()[0] as usize) % 3] += 1;
    }
    for k in 0..3 {
        assert!((q[k] - counts[k] as f64 / 30.0).abs() < 1e-15);
    }
}

#[test]
fn two_token_aggregate_matches_counting() {
    let data = images(256);
    let enc = |x: &Tensor<f64>| Ok(vec![(x.data()[0] as usize) % 4, (x.data()[1] as usize * 3 + 1) % 4]);
    let q = exact_ar_aggregate(&enc, &data, 2, 4).unwrap();
    let mut counts = vec![0usize; 16];
    for x in &data {
        let ids = enc(x).unwrap();
        counts[ids[0] * 4 + ids[1]] += 1;
    }
    for i in 0..16 {
        assert!((q[i] - counts[i] as f64 / 256.0).abs() < 1e-15);
    }
    assert!(matches!(
        exact_ar_aggregate(&enc, &data, 11, 4),
        Err(crate::Error::StateSpaceTooLarge { .. })
    ));
}
