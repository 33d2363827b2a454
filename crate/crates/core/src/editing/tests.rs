use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{init_model, LmConfig, MlpConfig, RegressionSet};
use crate::ntk::auto_ntk_rate;
use crate::pipeline::edit_request;
use crate::testutil::toy_world_lm;

fn lm(n_layers: usize, seed: u64) -> Model {
    let c = LmConfig {
        vocab_size: 9,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
    };
    init_model(&ModelConfig::Lm(c), seed).unwrap()
}

fn mlp(width: usize, seed: u64) -> Model {
    init_model(&ModelConfig::Mlp(MlpConfig::new(3, width, 1)), seed).unwrap()
}

fn regression(n: usize, seed: u64) -> RegressionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let targets = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    RegressionSet::new(inputs, targets).unwrap()
}

fn lm_set(q: &[usize], a: &[usize]) -> Dataset {
    Dataset::Lm(vec![LmExample {
        query: q.to_vec(),
        answer: a.to_vec(),
    }])
}

/// Silences every MLP in `layers` so their keys, and hence their
/// down-projection gradients, are exactly zero.
fn kill_mlps(m: &mut Model, layers: &[usize]) {
    for &i in layers {
        let p = m.params_mut();
        p.get_mut(&format!("blocks.{i}.mlp.up")).unwrap().data_mut().fill(0.0);
        p.get_mut(&format!("blocks.{i}.mlp.up_bias")).unwrap().data_mut().fill(-1.0);
    }
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let m = mlp(16, 1);
    let out = finetune_edit(&m, &Dataset::Regression(regression(3, 2)), &EditConfig::finetune(5, 0.0)).unwrap();
    assert_eq!(out.model.params(), m.params());
    assert_eq!(out.steps, 5);
    let l = lm(2, 3);
    let out = finetune_edit(&l, &lm_set(&[1, 2], &[3]), &EditConfig::finetune(4, 0.0)).unwrap();
    assert_eq!(out.model.params(), l.params());
    assert_eq!(out.pre_logprob, out.post_logprob);
}

#[test]
fn readout_only_edit_decays_at_the_closed_form_rate() {
    // With only the head-f readout trainable and one example, the loss is a
    // 1-d convex quadratic: the residual contracts by (1 − ηλ) per step with
    // λ = ‖∂f/∂v‖² = ‖φ(x)‖²/n.
    let m = mlp(32, 4);
    let data = regression(1, 5);
    let cfg = EditConfig {
        params: ParamFilter::Names(vec!["head0.weight".into()]),
        ..EditConfig::finetune(8, 0.3)
    };
    let out = finetune_edit(&m, &Dataset::Regression(data.clone()), &cfg).unwrap();
    let w = m.params().get("layer0.weight").unwrap();
    let x = data.inputs.row(0);
    let lambda: f64 = (0..32)
        .map(|j| {
            let pre: f64 = (0..3).map(|i| x[i] * w.data()[i * 32 + j]).sum::<f64>() / 3f64.sqrt();
            pre.tanh().powi(2)
        })
        .sum::<f64>()
        / 32.0;
    let ratio = (1.0 - 0.3 * lambda).powi(2);
    for t in 1..8 {
        let got = out.loss_curve[t] / out.loss_curve[t - 1];
        assert!((got - ratio).abs() < 1e-10, "step {t}: {got} vs {ratio}");
    }
}

#[test]
fn finetune_runs_exactly_the_requested_steps() {
    let l = lm(2, 6);
    let out = finetune_edit(&l, &lm_set(&[1, 2], &[3]), &EditConfig::finetune(7, 0.05)).unwrap();
    assert_eq!(out.loss_curve.len(), 7);
    assert!(out.post_logprob.unwrap() > out.pre_logprob.unwrap());
}

#[test]
fn finetune_validates_its_inputs() {
    let l = lm(2, 7);
    let set = lm_set(&[1], &[2]);
    assert!(matches!(finetune_edit(&l, &set, &EditConfig::finetune(0, 0.1)), Err(Error::InvalidConfig(_))));
    assert!(finetune_edit(&l, &set, &EditConfig::finetune(1, -0.1)).is_err());
    assert!(finetune_edit(&l, &set, &EditConfig::finetune(1, f64::NAN)).is_err());
    assert!(matches!(finetune_edit(&l, &Dataset::Lm(vec![]), &EditConfig::finetune(1, 0.1)), Err(Error::InvalidInput(_))));
    assert!(finetune_edit(&l, &Dataset::Regression(regression(2, 1)), &EditConfig::finetune(1, 0.1)).is_err());
    assert!(finetune_edit(&l, &set, &EditConfig::rank_one()).is_err());
    let auto = EditConfig {
        learning_rate: LearningRate::Mode(EtaMode::AutoNtk),
        ..EditConfig::finetune(1, 0.0)
    };
    assert!(matches!(finetune_edit(&l, &set, &auto), Err(Error::UnsupportedModel(_))));
}

#[test]
fn auto_ntk_rate_is_used_for_the_mlp() {
    let m = mlp(64, 8);
    let data = regression(3, 9);
    let auto = EditConfig {
        learning_rate: LearningRate::Mode(EtaMode::AutoNtk),
        ..EditConfig::finetune(3, 0.0)
    };
    let a = finetune_edit(&m, &Dataset::Regression(data.clone()), &auto).unwrap();
    let eta = auto_ntk_rate(&m, &data).unwrap();
    let b = finetune_edit(&m, &Dataset::Regression(data), &EditConfig::finetune(3, eta)).unwrap();
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn divergence_is_reported() {
    let m = mlp(8, 10);
    let err = finetune_edit(&m, &Dataset::Regression(regression(4, 11)), &EditConfig::finetune(60, 1e4)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
}

#[test]
fn config_parses_rate_forms() {
    let c: EditConfig = serde_json::from_str(r#"{"method":"finetune","steps":5,"learning_rate":"auto-ntk"}"#).unwrap();
    assert_eq!(c.learning_rate, LearningRate::Mode(EtaMode::AutoNtk));
    let c: EditConfig = serde_json::from_str(r#"{"method":"finetune","learning_rate":0.5,"params":"down-proj"}"#).unwrap();
    assert_eq!(c.learning_rate, LearningRate::Fixed(0.5));
    assert_eq!(c.params, ParamFilter::DownProj);
    assert_eq!(c.steps, 100);
    let c: EditConfig = serde_json::from_str(r#"{"method":"rank_one"}"#).unwrap();
    assert_eq!(c.method, EditMethod::RankOne);
    assert!(serde_json::from_str::<EditConfig>(r#"{"method":"rank_one","bogus":1}"#).is_err());
    assert!(serde_json::from_str::<EditConfig>(r#"{"method":"finetune","learning_rate":"fast"}"#).is_err());
}

#[test]
fn locate_finds_the_only_layer_with_gradient() {
    let mut m = lm(3, 12);
    kill_mlps(&mut m, &[0, 1]);
    assert_eq!(locate_layer(&m, &[1, 4, 2], &[5]).unwrap(), 2);
}

#[test]
fn locate_breaks_ties_towards_the_first_layer() {
    let mut m = lm(3, 13);
    kill_mlps(&mut m, &[0, 1, 2]);
    assert_eq!(locate_layer(&m, &[3, 3], &[3]).unwrap(), 0);
}

#[test]
fn locate_rejects_the_mlp() {
    assert!(matches!(locate_layer(&mlp(4, 1), &[1], &[2]), Err(Error::UnsupportedModel(_))));
}

#[test]
fn locate_matches_brute_force_sign_steps() {
    // An L∞-bounded ascent step of size ε on layer ℓ alone raises log P by
    // ε‖g_ℓ‖₁ to first order, so the layer with the largest actual gain
    // under such a step is the layer with the largest gradient L1 mass.
    let (data, m) = toy_world_lm();
    for case in &data.cases {
        let req = edit_request(data.vocab(), case).unwrap();
        let base = lm_logprob(m, &req.query, &req.target).unwrap();
        let g = knowledge_gradient(m, &req.query, &req.target, &ParamFilter::DownProj).unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, name) in m.down_proj().iter().enumerate() {
            let mut stepped = m.clone();
            let w = stepped.params_mut().get_mut(name).unwrap();
            for (x, d) in w.data_mut().iter_mut().zip(g.slice(name).unwrap()) {
                *x += 1e-6 * d.signum();
            }
            let gain = lm_logprob(&stepped, &req.query, &req.target).unwrap() - base;
            if gain > best.1 {
                best = (i, gain);
            }
        }
        assert_eq!(locate_layer(m, &req.query, &req.target).unwrap(), best.0, "{}", case.case_id);
    }
}

#[test]
fn rank_one_update_hits_the_value() {
    let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
    let k = [1.0, 2.0, 0.0];
    let v = [5.0, -3.0];
    let u = rank_one_update(&w, &k, &v).unwrap();
    // k·W = (1, 2), residual (4, −5), k/‖k‖² = (0.2, 0.4, 0)
    let expect = [1.8, -1.0, 1.6, -1.0, 2.0, -1.0];
    for (a, b) in u.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(matches!(rank_one_update(&w, &[0.0; 3], &v), Err(Error::DegenerateKey(_))));
    assert!(rank_one_update(&w, &[1.0; 2], &v).is_err());
}

fn key_times(w: &Tensor, k: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|c| k.iter().enumerate().map(|(r, kr)| kr * w.data()[r * cols + c]).sum()).collect()
}

#[test]
fn rank_one_edit_writes_value_and_touches_one_weight() {
    let (data, m) = toy_world_lm();
    let before = m.clone();
    let req = edit_request(data.vocab(), &data.cases[0]).unwrap();
    let out = rank_one_edit(m, &req).unwrap();
    assert_eq!(m.params(), before.params());
    let layer = out.layer.unwrap();
    let name = &m.down_proj()[layer];
    let vec = out.vectors.as_ref().unwrap();
    let w = out.model.params().get(name).unwrap();
    let scale = vec.value.iter().map(|v| v.abs()).fold(1.0, f64::max);
    for (a, b) in key_times(w, &vec.key).iter().zip(&vec.value) {
        assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
    }
    for (n, t) in out.model.params().iter() {
        if n != name {
            assert_eq!(Some(t), m.params().get(n), "{n} changed");
        }
    }
    assert_eq!(out.steps, VALUE_STEPS);
    assert_eq!(out.loss_curve.len(), VALUE_STEPS);
    assert_eq!(out.pre_logprob.unwrap(), lm_logprob(m, &req.query, &req.target).unwrap());
    assert!(out.post_logprob.unwrap() > out.pre_logprob.unwrap());

    // same (k*, v*) applied again keeps W k* = v*
    let again = rank_one_update(w, &vec.key, &vec.value).unwrap();
    for (a, b) in key_times(&again, &vec.key).iter().zip(&vec.value) {
        assert!((a - b).abs() <= 1e-12 * scale);
    }
}

#[test]
fn rank_one_rejects_a_dead_key() {
    let mut m = lm(2, 14);
    kill_mlps(&mut m, &[0, 1]);
    let req = EditRequest {
        query: vec![1, 2],
        subject_pos: 1,
        target: vec![3],
    };
    assert!(matches!(rank_one_edit(&m, &req), Err(Error::DegenerateKey(_))));
    let bad = EditRequest { subject_pos: 2, ..req };
    assert!(matches!(rank_one_edit(&m, &bad), Err(Error::InvalidInput(_))));
}

#[test]
fn both_editors_flip_toy_facts() {
    let (data, m) = toy_world_lm();
    for case in &data.cases {
        let req = edit_request(data.vocab(), case).unwrap();
        assert!(!edit_succeeded(m, &req.query, &req.target).unwrap());
        for cfg in [EditConfig::rank_one(), EditConfig::finetune(100, 0.01)] {
            let out = apply_edit(m, &req, &cfg).unwrap();
            assert!(edit_succeeded(&out.model, &req.query, &req.target).unwrap(), "{:?} on {}", cfg.method, case.case_id);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn finetune_never_touches_unselected_parameters(seed in 0u64..1000, mask in 1u32..(1 << 12)) {
        let l = lm(1, seed);
        let names: Vec<String> = l.params().names().map(str::to_string).collect();
        let chosen: Vec<String> = names.iter().enumerate().filter(|(i, _)| mask >> (i % 12) & 1 == 1).map(|(_, n)| n.clone()).collect();
        let cfg = EditConfig { params: ParamFilter::Names(chosen.clone()), ..EditConfig::finetune(3, 0.1) };
        let out = finetune_edit(&l, &lm_set(&[1, 2, 3], &[4, 5]), &cfg).unwrap();
        for n in &names {
            if !chosen.contains(n) {
                prop_assert_eq!(out.model.params().get(n), l.params().get(n));
            }
        }
    }
}
