use super::*;
use crate::baselines::{stage_one_step, TailDropoutSchedule};
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::models::{ArConfig, ArModel, TokenizerConfig, TokenizerState};
use crate::nn::AdamWConfig;
use crate::tensor::Tensor;
use crate::tvc::random_dist;

fn t(shape: [usize; 2], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn score_examples() {
    let lq = t([1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let lp = t([1, 2], &[0.9f64.ln(), 0.1f64.ln()]);
    assert_eq!(prior_matching_score(&lq, &lq).unwrap().data(), &[0.0, 0.0]);
    let s = prior_matching_score(&lq, &lp).unwrap();
    assert!((s.data()[0] + 0.5878).abs() < 1e-4 && (s.data()[1] - 1.6094).abs() < 1e-4);
    let shift = |x: &Tensor<f64>| x.map(|v| v + 3.0);
    let s2 = prior_matching_score(&shift(&lq), &shift(&lp)).unwrap();
    for (a, b) in s.data().iter().zip(s2.data()) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(prior_matching_score(&lq, &t([2, 1], &[0.0, 0.0])).is_err());
}

#[test]
fn particle_gradient_cases() {
    let rec = t([1, 2], &[0.3, -0.2]);
    let lq = t([1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let lp = t([1, 2], &[0.9f64.ln(), 0.1f64.ln()]);
    assert_eq!(particle_gradient(&rec, &lq, &lp, 0.0).unwrap().g_z, rec);
    let zero = Tensor::zeros([1, 2]);
    assert_eq!(particle_gradient(&zero, &lq, &lq, 1.0).unwrap().g_z.data(), &[0.0, 0.0]);
    // descent along −g_z moves mass toward token 0, where P exceeds Q
    let g = particle_gradient(&zero, &lq, &lp, 1.0).unwrap().g_z;
    assert!(-g.data()[0] > 0.0 && -g.data()[1] < 0.0);
}

#[test]
fn matched_tables_are_a_fixed_point() {
    let mut r = crate::rng::seeded(0);
    let rows: Vec<f64> = (0..4).flat_map(|_| random_dist(&mut r, 6, 1.0).into_iter().map(f64::ln)).collect();
    let lq = t([4, 6], &rows);
    let s = prior_matching_score(&lq, &lq.clone()).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn logit_descent_reduces_kl_and_sign_flip_does_not() {
    let rep = kl_descent_suite(100, 4, 200, 1e-2, 7, reference_score).unwrap();
    assert!(rep.pass, "{rep:?}");
    let bad = kl_descent_suite(100, 4, 200, 1e-2, 7, flipped_score).unwrap();
    assert!(!bad.pass);
}

#[test]
fn surrogate_decomposition_holds() {
    let mut r = crate::rng::seeded(3);
    for _ in 0..100 {
        let (q, qp, p) = (random_dist(&mut r, 8, 1.0), random_dist(&mut r, 8, 1.0), random_dist(&mut r, 8, 1.0));
        let (lhs, rhs) = surrogate_decomposition(&q, &qp, &p).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10);
    }
}

#[test]
fn gaussian_demo_cases() {
    let fixed = gaussian_wgf_demo(0.0, 1.0, 50, 0.1, 1).unwrap();
    assert!(fixed.iter().all(|s| s.kl < 1e-3));
    let shift = gaussian_wgf_demo(1.0, 1.0, 10, 0.01, 2).unwrap();
    for w in shift.windows(2) {
        assert!(((w[0].m - w[1].m) - 0.01 * w[0].m).abs() < 1e-9);
        assert!((w[0].m - w[1].m - 0.01).abs() < 1e-3);
    }
    for &(m0, s0) in &[(2.0, 0.5), (-1.0, 3.0), (0.5, 0.2)] {
        let traj = gaussian_wgf_demo(m0, s0, 200, 0.1, 4).unwrap();
        assert!(traj.windows(2).all(|w| w[1].kl <= w[0].kl), "{m0} {s0}");
        assert!(traj.iter().all(|s| s.velocity_rms_err <= 1e-3));
    }
    assert!(gaussian_wgf_demo(0.0, 0.0, 1, 0.1, 0).is_err());
    assert!(matches!(gaussian_wgf_demo(0.0, 1.0, 3, 1.0, 0), Err(crate::Error::DegenerateCloud(_)) | Ok(_)));
}

fn tiny_state(lambda: f64, seed: u64) -> JointTrainState<f32> {
    let tc = TokenizerConfig {
        height: 8,
        width: 8,
        channels: 3,
        patch: 4,
        tokens: 4,
        codebook: 8,
        code_dim: 4,
        dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        mlp_ratio: 2,
        tau_q: 0.1,
    };
    let opt = AdamWConfig { lr: 3e-3, ..Default::default() };
    let tok = TokenizerState::new(tc, opt, seed).unwrap();
    let ar = |layers, temperature| ArConfig { vocab: 8, context: 4, layers, dim: 8, heads: 2, mlp_ratio: 2, temperature };
    let target = ArModel::new(ar(2, 0.5), opt, seed + 1).unwrap();
    let proxy = ArModel::new(ar(1, 1.0), opt, seed + 2).unwrap();
    let cfg = JointConfig { lambda_wgf: lambda, total_steps: 100, seed, ..Default::default() };
    JointTrainState::new(tok, target, proxy, cfg).unwrap()
}

fn tiny_data(count: usize) -> Vec<Tensor<f32>> {
    gen_synthetic(&SyntheticSpec { height: 8, width: 8, size: count, ..Default::default() }, 5).unwrap()
}

#[test]
fn target_stays_frozen() {
    let mut s = tiny_state(0.25, 1);
    let before = s.target.params.clone();
    let data = tiny_data(8);
    for _ in 0..100 {
        dpd_train_step(&mut s, &data[..4]).unwrap();
    }
    assert_eq!(s.target.params, before);
    assert_ne!(s.proxy.params, tiny_state(0.25, 1).proxy.params);
}

#[test]
fn zero_lambda_matches_stage_one_bit_for_bit() {
    let mut joint = tiny_state(0.0, 2);
    let mut tok = joint.tokenizer.clone();
    let data = tiny_data(6);
    for step in 0..5 {
        let batch = &data[step % 2 * 3..step % 2 * 3 + 3];
        let a = dpd_train_step(&mut joint, batch).unwrap();
        let b = stage_one_step(&mut tok, batch, TailDropoutSchedule::off(), 2, step as u64).unwrap();
        assert_eq!(a.l_rec, b.l_rec);
        assert!(a.wgf_score_norm.is_none());
    }
    assert_eq!(joint.tokenizer.params, tok.params);
    assert_eq!(joint.tokenizer.opt, tok.opt);
}

#[test]
fn warmup_ramps_lambda() {
    let c = JointConfig { lambda_wgf: 0.5, warmup_frac: 0.1, total_steps: 100, ..Default::default() };
    assert!((c.lambda_at(0) - 0.05).abs() < 1e-15);
    assert_eq!(c.lambda_at(9), 0.5);
    assert_eq!(c.lambda_at(50), 0.5);
    let none = JointConfig { warmup_frac: 0.0, ..c };
    assert_eq!(none.lambda_at(0), 0.5);
}

#[test]
fn tail_keep_is_deterministic_and_in_range() {
    let a: Vec<usize> = (0..50).map(|i| tail_keep(0.5, 16, 3, 7, i)).collect();
    let b: Vec<usize> = (0..50).map(|i| tail_keep(0.5, 16, 3, 7, i)).collect();
    assert_eq!(a, b);
    assert!(a.iter().all(|&k| k <= 16));
    assert!(a.iter().any(|&k| k < 16) && a.contains(&16));
    assert!((0..50).all(|i| tail_keep(0.0, 16, 3, 7, i) == 16));
}

#[test]
fn non_finite_input_aborts_without_changes() {
    let mut s = tiny_state(0.25, 3);
    let before = s.tokenizer.params.clone();
    let mut bad = tiny_data(1);
    bad[0].data_mut()[0] = f32::NAN;
    assert!(matches!(dpd_train_step(&mut s, &bad), Err(crate::Error::NumericalAbort { step: 0, .. })));
    assert_eq!(s.tokenizer.params, before);
    assert_eq!(s.step, 0);
}

