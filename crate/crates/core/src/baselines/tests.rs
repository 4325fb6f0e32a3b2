use super::*;
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::models::TokenizerConfig;

fn tok(seed: u64) -> TokenizerState<f64> {
    let cfg = TokenizerConfig {
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
    TokenizerState::new(cfg, AdamWConfig::default(), seed).unwrap()
}

fn data(count: usize, seed: u64) -> Vec<Tensor<f64>> {
    gen_synthetic(&SyntheticSpec { height: 8, width: 8, size: count, ..Default::default() }, seed).unwrap()
}

#[test]
fn full_cutoff_equals_plain_reconstruction() {
    let s = tok(1);
    let x = &data(1, 0)[0];
    let z = s.tokenize(x).unwrap();
    let plain = reconstruction_loss(x, &s.decode(&z).unwrap()).unwrap();
    assert_eq!(tail_dropout_loss_at(&s, &z, x, 4).unwrap(), plain);
    assert!(tail_dropout_loss_at(&s, &z, x, 0).unwrap().is_finite());
    let sched = TailDropoutSchedule::default();
    assert_eq!(tail_dropout_loss(&s, &z, x, sched, 9).unwrap(), tail_dropout_loss(&s, &z, x, sched, 9).unwrap());
    assert_eq!(tail_dropout_loss(&s, &z, x, TailDropoutSchedule::off(), 9).unwrap(), plain);
}

#[test]
fn schedule_distribution_sums_to_one() {
    let p = TailDropoutSchedule::default().distribution(16);
    assert_eq!(p.len(), 17);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(p[16], 0.5);
}

#[test]
fn stage_two_leaves_tokenizer_untouched() {
    let s = tok(2);
    let before = s.params.clone();
    let ids = tokenize_all(&s, &data(16, 1)).unwrap();
    let cfg = PriorFitConfig { layers: 1, dim: 8, heads: 2, steps: 5, batch: 4, ..Default::default() };
    fit_prior::<f64>(&ids, &ids, 8, &cfg, 0).unwrap();
    assert_eq!(s.params, before);
}

#[test]
fn stage_two_beats_uniform_and_memorizes_one_image() {
    let s = tok(3);
    let ids = tokenize_all(&s, &data(64, 2)).unwrap();
    let cfg = PriorFitConfig { layers: 1, dim: 16, heads: 2, steps: 300, batch: 16, lr: 1e-2, ..Default::default() };
    let (_, loss) = fit_prior::<f32>(&ids, &ids, 8, &cfg, 1).unwrap();
    assert!(loss <= 8f64.ln(), "{loss}");
    let one = vec![ids[0].clone()];
    let cfg = PriorFitConfig { steps: 2000, batch: 1, ..cfg };
    let (_, loss) = fit_prior::<f32>(&one, &one, 8, &cfg, 1).unwrap();
    assert!(loss < 0.01, "{loss}");
}

#[test]
fn comparing_a_method_with_itself_is_symmetric() {
    let train = data(16, 3);
    let held = data(8, 4);
    let mut snaps = Vec::new();
    let mut s = tok(4);
    for step in 0..3 {
        stage_one_step(&mut s, &train[..4], TailDropoutSchedule::off(), 0, step).unwrap();
        snaps.push(Snapshot { step, recon: mean_reconstruction(&s, &held).unwrap(), tokenizer: s.clone() });
    }
    let runs = vec![("a".to_string(), snaps.clone()), ("b".to_string(), snaps)];
    let cfg = PriorFitConfig { layers: 1, dim: 8, heads: 2, steps: 10, batch: 4, ..Default::default() };
    let rep = matched_comparison(&runs, &train, &held, &cfg, 0.05, 7).unwrap();
    let (a, b) = (rep.row("a").unwrap(), rep.row("b").unwrap());
    assert_eq!((a.step, a.recon, a.eval_ar_loss), (b.step, b.recon, b.eval_ar_loss));
    assert_eq!(rep.recon_spread(), 0.0);
    let mut buf = Vec::new();
    rep.write(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}
