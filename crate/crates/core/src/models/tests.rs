use proptest::prelude::*;

use super::*;
use crate::autodiff::{finite_difference_gradient, Graph};

fn tiny_lm(vocab: usize) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
    }
}

fn lm(vocab: usize, seed: u64) -> Model {
    init_model(&ModelConfig::Lm(tiny_lm(vocab)), seed).unwrap()
}

fn mlp(width: usize, seed: u64) -> Model {
    init_model(&ModelConfig::Mlp(MlpConfig::new(4, width, 2)), seed).unwrap()
}

fn sphere_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[test]
fn init_is_deterministic() {
    assert_eq!(mlp(16, 3).params(), mlp(16, 3).params());
    assert_eq!(lm(6, 3).params(), lm(6, 3).params());
    assert_ne!(mlp(16, 3).params(), mlp(16, 4).params());
}

#[test]
fn parameter_count_follows_layer_algebra() {
    // input 4, two hidden layers, two scalar heads
    let count = |n: usize| 4 * n + n * n + 2 * n;
    assert_eq!(mlp(64, 0).param_count(), count(64));
    assert_eq!(mlp(128, 0).param_count(), count(128));
}

#[test]
fn unit_normal_init_has_small_mean() {
    let m = init_model(&ModelConfig::Mlp(MlpConfig::new(100, 100, 1)), 11).unwrap();
    let w = m.params().get("layer0.weight").unwrap().data();
    assert_eq!(w.len(), 10_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() <= 0.05, "mean {mean}");
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var - 1.0).abs() < 0.05);
}

#[test]
fn lm_init_uses_small_weights_and_unit_gains() {
    let m = lm(6, 0);
    assert!(m.params().get("blocks.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(m.params().get("blocks.1.mlp.up_bias").unwrap().data().iter().all(|&v| v == 0.0));
    let w = m.params().get("lm_head").unwrap().data();
    assert!(w.iter().all(|v| v.abs() < 0.02 * 6.0));
    assert_eq!(m.down_proj(), ["blocks.0.mlp.down", "blocks.1.mlp.down"]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_lm(6);
    c.n_heads = 3;
    assert!(init_model(&ModelConfig::Lm(c), 0).is_err());
    let mut m = MlpConfig::new(4, 8, 1);
    m.heads = 3;
    assert!(init_model(&ModelConfig::Mlp(m), 0).is_err());
    assert!(init_model(&ModelConfig::Mlp(MlpConfig::new(4, 0, 1)), 0).is_err());
}

#[test]
fn zero_readout_gives_zero_output() {
    let mut m = mlp(8, 1);
    for h in ["head0.weight", "head1.weight"] {
        m.params_mut().get_mut(h).unwrap().data_mut().fill(0.0);
    }
    let x = Tensor::from_rows(&sphere_points(5, 4, 0)).unwrap();
    let out = mlp_forward(&m, &x).unwrap();
    assert_eq!(out.shape(), &[5, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn outputs_are_finite_across_widths() {
    let x = Tensor::from_rows(&sphere_points(8, 16, 2)).unwrap();
    for width in [64, 128, 256, 512, 1024, 2048] {
        let m = init_model(&ModelConfig::Mlp(MlpConfig::new(16, width, 1)), 5).unwrap();
        assert!(mlp_forward(&m, &x).unwrap().is_finite());
    }
}

#[test]
fn perturbing_head_one_leaves_head_zero_bit_identical() {
    let m = mlp(16, 2);
    let x = Tensor::from_rows(&sphere_points(4, 4, 1)).unwrap();
    let before = mlp_forward(&m, &x).unwrap();
    let mut p = m.clone();
    p.params_mut().get_mut("head1.weight").unwrap().data_mut().iter_mut().for_each(|v| *v += 0.3);
    let after = mlp_forward(&p, &x).unwrap();
    for r in 0..4 {
        assert_eq!(before.row(r)[0].to_bits(), after.row(r)[0].to_bits());
        assert_ne!(before.row(r)[1], after.row(r)[1]);
    }
}

#[test]
fn head_zero_loss_has_exactly_zero_gradient_on_head_one() {
    let m = mlp(16, 4);
    let data = RegressionSet::new(sphere_points(6, 4, 3), vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.3]).unwrap();
    let all = m.select(&ParamFilter::All).unwrap();
    let (_, g) = train::mlp_loss_grad(&m, &data, Heads::F, &all).unwrap();
    assert!(g.slice("head1.weight").unwrap().iter().all(|&v| v == 0.0));
    assert!(g.slice("head0.weight").unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let m = mlp(6, 9);
    let data = RegressionSet::new(sphere_points(5, 4, 8), vec![0.5, -0.2, 0.1, 0.9, -0.7]).unwrap();
    let all = m.select(&ParamFilter::All).unwrap();
    let (_, analytic) = train::mlp_loss_grad(&m, &data, Heads::Both, &all).unwrap();
    let numeric = finite_difference_gradient(
        |p| {
            let mm = m.with_params(p.clone())?;
            train::mlp_loss_grad(&mm, &data, Heads::Both, &all).map(|r| r.0)
        },
        m.params(),
        |_| true,
        1e-5,
    )
    .unwrap();
    let err = analytic
        .entries()
        .iter()
        .zip(numeric.entries())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.entries().iter().map(|v| v.abs()).fold(1e-8, f64::max);
    assert!(err / scale < 1e-6, "{}", err / scale);
}

#[test]
fn uniform_logits_give_minus_ln_vocab() {
    let mut m = lm(4, 0);
    m.params_mut().get_mut("lm_head").unwrap().data_mut().fill(0.0);
    for a in 0..4 {
        let lp = lm_logprob(&m, &[1, 2], &[a]).unwrap();
        assert!((lp + 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn two_token_answer_follows_chain_rule() {
    let m = lm(6, 7);
    let joint = lm_logprob(&m, &[1, 2], &[3, 4]).unwrap();
    let first = lm_logprob(&m, &[1, 2], &[3]).unwrap();
    let second = lm_logprob(&m, &[1, 2, 3], &[4]).unwrap();
    assert!((joint - (first + second)).abs() < 1e-12);
    assert!(joint <= 0.0);
}

#[test]
fn next_token_distribution_sums_to_one() {
    let m = lm(6, 8);
    let total: f64 = (0..6).map(|t| lm_logprob(&m, &[2, 5, 1], &[t]).unwrap().exp()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let lp = next_token_logprobs(&m, &[2, 5, 1]).unwrap();
    assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn logprob_validates_inputs() {
    let m = lm(6, 0);
    assert!(matches!(lm_logprob(&m, &[1; 6], &[1, 2, 3]), Err(Error::SequenceTooLong { len: 9, max: 8 })));
    assert!(matches!(lm_logprob(&m, &[1], &[6]), Err(Error::UnknownToken(6))));
    assert!(lm_logprob(&m, &[1], &[]).is_err());
    assert!(matches!(lm_logprob(&mlp(4, 0), &[1], &[1]), Err(Error::UnsupportedModel(_))));
}

/// Makes the next-token logits independent of the context: row 0 of the
/// final norm output is the constant bias.
fn constant_logits(m: &mut Model, logits: &[f64]) {
    m.params_mut().get_mut("ln_f.gain").unwrap().data_mut().fill(0.0);
    let bias = m.params_mut().get_mut("ln_f.bias").unwrap().data_mut();
    bias.fill(0.0);
    bias[0] = 1.0;
    let head = m.params_mut().get_mut("lm_head").unwrap().data_mut();
    head.fill(0.0);
    head[..logits.len()].copy_from_slice(logits);
}

#[test]
fn degenerate_distribution_repeats_one_token() {
    let mut m = lm(3, 1);
    constant_logits(&mut m, &[-50.0, 50.0, -50.0]);
    let out = sample_generate(&m, &[2], Sampling::Temperature(0.7), 5, 3).unwrap();
    assert_eq!(out, vec![1; 5]);
}

#[test]
fn greedy_decoding_is_argmax() {
    let m = lm(6, 4);
    let out = sample_generate(&m, &[1, 2], Sampling::Greedy, 4, 0).unwrap();
    let mut seq = vec![1, 2];
    for &t in &out {
        let lp = next_token_logprobs(&m, &seq).unwrap();
        assert_eq!(t, lm::argmax(&lp));
        seq.push(t);
    }
}

#[test]
fn sampling_frequencies_match_softmax() {
    let mut m = lm(4, 2);
    constant_logits(&mut m, &[0.2, 0.9, -0.4, 0.5]);
    let temp = 0.7;
    let lp = next_token_logprobs(&m, &[1]).unwrap();
    let mut p: Vec<f64> = lp.iter().map(|v| (v / temp).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for seed in 0..n {
        let out = sample_generate(&m, &[1], Sampling::Temperature(temp), 1, seed as u64).unwrap();
        counts[out.first().copied().unwrap_or(EOS)] += 1;
    }
    for k in 0..4 {
        let freq = counts[k] as f64 / n as f64;
        assert!((freq - p[k]).abs() < 0.02, "token {k}: {freq} vs {}", p[k]);
    }
}

#[test]
fn sampling_validates_arguments() {
    let m = lm(4, 0);
    assert!(sample_generate(&m, &[1], Sampling::Temperature(0.0), 3, 0).is_err());
    assert!(sample_generate(&m, &[1], Sampling::Greedy, 0, 0).is_err());
    let a = sample_generate(&m, &[1], Sampling::Temperature(1.0), 3, 9).unwrap();
    assert_eq!(a, sample_generate(&m, &[1], Sampling::Temperature(1.0), 3, 9).unwrap());
}

#[test]
fn memorized_fact_has_high_probability() {
    let m = lm(8, 5);
    let data = Dataset::Lm(vec![
        LmExample { query: vec![1, 2], answer: vec![5] },
        LmExample { query: vec![3, 2], answer: vec![6, 7] },
    ]);
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        ..TrainConfig::gd(150, 0.02)
    };
    let (trained, curve) = train(&m, &data, &cfg).unwrap();
    assert_eq!(curve.len(), 150);
    assert!(lm_logprob(&trained, &[1, 2], &[5]).unwrap() > 0.9f64.ln());
    assert!(lm_logprob(&trained, &[3, 2], &[6, 7]).unwrap() > 0.9f64.ln());
    assert_eq!(sample_generate(&trained, &[3, 2], Sampling::Greedy, 5, 0).unwrap(), vec![6, 7]);
}

#[test]
fn one_parameter_quadratic_decreases_monotonically() {
    let m = init_model(&ModelConfig::Mlp(MlpConfig::new(1, 1, 1)), 3).unwrap();
    let data = RegressionSet::new(vec![vec![1.0]], vec![0.8]).unwrap();
    let cfg = TrainConfig {
        params: ParamFilter::Names(vec!["head0.weight".into()]),
        ..TrainConfig::gd(30, 0.5)
    };
    let (trained, curve) = train(&m, &Dataset::Regression(data), &cfg).unwrap();
    assert!(curve.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(trained.params().get("layer0.weight"), m.params().get("layer0.weight"));
}

#[test]
fn zero_steps_is_the_identity() {
    let m = mlp(8, 0);
    let data = RegressionSet::new(sphere_points(3, 4, 0), vec![0.1, 0.2, 0.3]).unwrap();
    let (trained, curve) = train(&m, &Dataset::Regression(data), &TrainConfig::gd(0, 0.1)).unwrap();
    assert!(curve.is_empty());
    assert_eq!(trained, m);
}

#[test]
fn conflicting_duplicates_are_rejected() {
    let m = mlp(8, 0);
    let x = sphere_points(2, 4, 0);
    let bad = RegressionSet::new(vec![x[0].clone(), x[1].clone(), x[0].clone()], vec![0.1, 0.2, 0.5]).unwrap();
    assert!(train(&m, &Dataset::Regression(bad), &TrainConfig::gd(1, 0.1)).is_err());
    let ok = RegressionSet::new(vec![x[0].clone(), x[0].clone()], vec![0.1, 0.1]).unwrap();
    assert!(train(&m, &Dataset::Regression(ok), &TrainConfig::gd(1, 0.1)).is_ok());

    let l = lm(6, 0);
    let conflict = Dataset::Lm(vec![
        LmExample { query: vec![1], answer: vec![2] },
        LmExample { query: vec![1], answer: vec![3] },
    ]);
    assert!(train(&l, &conflict, &TrainConfig::gd(1, 0.1)).is_err());
    assert!(train(&l, &Dataset::Lm(vec![]), &TrainConfig::gd(1, 0.1)).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let m = mlp(8, 0);
    let data = RegressionSet::new(sphere_points(3, 4, 0), vec![100.0, -100.0, 50.0]).unwrap();
    let err = train(&m, &Dataset::Regression(data), &TrainConfig::gd(50, 1e3)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn training_is_bit_deterministic() {
    let m = lm(6, 1);
    let data = Dataset::Lm(vec![
        LmExample { query: vec![1, 2], answer: vec![3] },
        LmExample { query: vec![4], answer: vec![5, 1] },
    ]);
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        ..TrainConfig::gd(5, 0.01)
    };
    let (a, ca) = train(&m, &data, &cfg).unwrap();
    let (b, cb) = train(&m, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn filter_restricts_updates() {
    let m = lm(6, 1);
    let data = Dataset::Lm(vec![LmExample { query: vec![1, 2], answer: vec![3] }]);
    let cfg = TrainConfig {
        params: ParamFilter::DownProj,
        ..TrainConfig::gd(3, 0.5)
    };
    let (t, _) = train(&m, &data, &cfg).unwrap();
    for (name, tensor) in m.params().iter() {
        let changed = t.params().get(name).unwrap() != tensor;
        assert_eq!(changed, name.ends_with("mlp.down"), "{name}");
    }
}

#[test]
fn lm_logprob_gradient_matches_finite_differences() {
    let m = lm(6, 12);
    let grad = |p: &crate::autodiff::Params| {
        let mut g = Graph::with_params(p, |_| true);
        let (lp, _) = logprob_graph(&mut g, m.lm_config().unwrap(), &[1, 4, 2], &[3, 5], None).unwrap();
        g.backward(lp).unwrap()
    };
    let analytic = grad(m.params());
    let numeric = finite_difference_gradient(
        |p| lm_logprob(&m.with_params(p.clone())?, &[1, 4, 2], &[3, 5]),
        m.params(),
        |_| true,
        1e-5,
    )
    .unwrap();
    let err = analytic
        .entries()
        .iter()
        .zip(numeric.entries())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.entries().iter().map(|v| v.abs()).fold(1e-8, f64::max);
    assert!(err / scale < 1e-6, "{}", err / scale);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for m in [lm(6, 3), mlp(8, 3)] {
        let bytes = write_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&lm(6, 1), &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), lm(6, 1));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let mut bytes = write_checkpoint(&mlp(8, 0)).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    assert!(read_checkpoint(b"RIPL0002\0\0\0\0").is_err());
}

#[test]
fn param_filter_text_round_trips() {
    for s in ["all", "down-proj", "prefix:blocks.1.", "names:a,b"] {
        assert_eq!(s.parse::<ParamFilter>().unwrap().to_string(), s);
    }
    assert!("bogus".parse::<ParamFilter>().is_err());
    let m = lm(6, 0);
    assert!(m.select(&ParamFilter::Prefix("nothing".into())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_token_probabilities_sum_to_one(seed in 0u64..500, q in prop::collection::vec(0usize..6, 1..6)) {
        let m = lm(6, seed);
        let total: f64 = (0..6).map(|t| lm_logprob(&m, &q, &[t]).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}
