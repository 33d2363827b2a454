use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_gradient, LayoutEntry, Reduction};
use crate::models::{init_model, lm_logprob, LmConfig, ModelConfig};

fn toy_lm(seed: u64) -> Model {
    let c = LmConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
    };
    init_model(&ModelConfig::Lm(c), seed).unwrap()
}

fn vector(entries: Vec<f64>) -> GradientVector {
    let n = entries.len();
    GradientVector::new(entries, vec![LayoutEntry { name: "w".into(), offset: 0, len: n }]).unwrap()
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> GradientVector {
    vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn layered(parts: &[Vec<f64>]) -> (GradientVector, Vec<Layer>) {
    let mut entries = Vec::new();
    let mut layout = Vec::new();
    let mut layers = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let name = format!("l{i}");
        layout.push(LayoutEntry { name: name.clone(), offset: entries.len(), len: p.len() });
        entries.extend_from_slice(p);
        layers.push(Layer { name: name.clone(), params: vec![name] });
    }
    (GradientVector::new(entries, layout).unwrap(), layers)
}

#[test]
fn filtered_parameters_are_absent() {
    let m = toy_lm(1);
    let g = knowledge_gradient(&m, &[1, 2], &[3], &ParamFilter::DownProj).unwrap();
    let names: Vec<&str> = g.layout().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["blocks.0.mlp.down", "blocks.1.mlp.down"]);
    let all = knowledge_gradient(&m, &[1, 2], &[3], &ParamFilter::All).unwrap();
    assert_eq!(all.len(), m.param_count());
}

#[test]
fn knowledge_gradient_matches_finite_differences() {
    let m = toy_lm(2);
    let (q, a) = ([1, 5, 2], [3, 4]);
    let analytic = knowledge_gradient(&m, &q, &a, &ParamFilter::All).unwrap();
    let numeric = finite_difference_gradient(|p| lm_logprob(&m.with_params(p.clone())?, &q, &a), m.params(), |_| true, 1e-5).unwrap();
    let err = analytic.entries().iter().zip(numeric.entries()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = analytic.entries().iter().chain(numeric.entries()).map(|v| v.abs()).fold(1e-8, f64::max);
    assert!(err / scale < 1e-6, "{}", err / scale);
}

#[test]
fn single_token_gradient_is_negated_cross_entropy_gradient() {
    let m = toy_lm(3);
    let kg = knowledge_gradient(&m, &[4, 1], &[6], &ParamFilter::All).unwrap();
    let c = m.lm_config().unwrap();
    let mut g = Graph::with_params(m.params(), |_| true);
    let trace = lm_graph(&mut g, c, &[4, 1], &[1], None).unwrap();
    let ce = g.cross_entropy(trace.logits, &[Some(6)], Reduction::Mean).unwrap();
    let ceg = g.backward(ce).unwrap();
    for (x, y) in kg.entries().iter().zip(ceg.entries()) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn grad_sim_examples() {
    let g = vector(vec![1.0, -2.0, 0.5]);
    assert!((grad_sim(&g, &g).unwrap() - 1.0).abs() < 1e-15);
    assert!((grad_sim(&g, &g.scaled(-2.0)).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(grad_sim(&vector(vec![1.0, 0.0]), &vector(vec![0.0, 1.0])).unwrap(), 0.0);
    assert!(matches!(grad_sim(&g, &vector(vec![0.0; 3])), Err(Error::ZeroNorm)));
    assert!(matches!(grad_sim(&g, &vector(vec![1.0; 2])), Err(Error::Graph(GraphError::LayoutMismatch))));
}

#[test]
fn l1_profile_examples() {
    let (g, layers) = layered(&[vec![0.0, 0.0], vec![0.0], vec![0.0; 3], vec![1.0, -2.0]]);
    assert_eq!(layer_l1_profile(&g, &layers).unwrap(), vec![0.0, 0.0, 0.0, 3.0]);
    let (g, layers) = layered(&[vec![0.5, -1.5], vec![2.0], vec![-0.25, 0.0, 1.0]]);
    let p = layer_l1_profile(&g, &layers).unwrap();
    assert!((p.iter().sum::<f64>() - g.l1_norm()).abs() < 1e-15);
    assert!(layer_l1_profile(&g, &layers[..2]).is_err());
    let mut dup = layers.clone();
    dup[1].params.push("l0".into());
    assert!(layer_l1_profile(&g, &dup).is_err());
}

#[test]
fn per_layer_examples() {
    let (g, layers) = layered(&[vec![1.0, 2.0], vec![3.0], vec![-1.0]]);
    assert_eq!(per_layer_gradsim(&g, &g, &layers).unwrap().iter().map(|v| v.map(|x| (x * 1e12).round())).collect::<Vec<_>>(), vec![Some(1e12); 3]);
    let (h, _) = layered(&[vec![0.0, 0.0], vec![1.0], vec![2.0]]);
    let pl = per_layer_gradsim(&h, &g, &layers).unwrap();
    assert_eq!(pl[0], None);
    assert_eq!(pl[2], Some(-1.0));
}

#[test]
fn per_layer_terms_recombine_to_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let parts: Vec<Vec<f64>> = (0..5).map(|i| (0..(i + 2)).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let parts2: Vec<Vec<f64>> = parts.iter().map(|p| p.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let (g1, layers) = layered(&parts);
    let (g2, _) = layered(&parts2);
    let t = per_layer_terms(&g1, &g2, &layers).unwrap();
    let dot: f64 = t.iter().map(|x| x.0).sum();
    let n1: f64 = t.iter().map(|x| x.1).sum::<f64>().sqrt();
    let n2: f64 = t.iter().map(|x| x.2).sum::<f64>().sqrt();
    assert!((dot / (n1 * n2) - grad_sim(&g1, &g2).unwrap()).abs() < 1e-9);
}

#[test]
fn csv_has_header_and_empty_missing_values() {
    let (g, layers) = layered(&[vec![1.0], vec![0.0]]);
    let (h, _) = layered(&[vec![2.0], vec![1.0]]);
    let rec = GradSimRecord::compute("x", "y", "LG", &g, &h, &layers, &ParamFilter::All).unwrap();
    let mut buf = Vec::new();
    write_gradsim_csv(&[rec], &["l0".into(), "l1".into()], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x_id,y_id,category,gradsim,norm_x,norm_y,cos_l0,cos_l1");
    assert!(lines[1].ends_with(','));
}

#[test]
fn probability_and_log_probability_gradients_agree_in_direction() {
    let m = toy_lm(4);
    for (q, a) in [(vec![1, 2], vec![3]), (vec![5], vec![2, 6, 1])] {
        let gl = knowledge_gradient(&m, &q, &a, &ParamFilter::All).unwrap();
        let gp = probability_gradient(&m, &q, &a, &ParamFilter::All).unwrap();
        let p = lm_logprob(&m, &q, &a).unwrap().exp();
        assert!((grad_sim(&gl, &gp).unwrap() - 1.0).abs() < 1e-12);
        let max = gl.entries().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in gl.entries().iter().zip(gp.entries()) {
            assert!((p * x - y).abs() <= 1e-12 * p * max);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn algebraic_properties(seed in 0u64..100_000, n in 1usize..40, a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = random_vector(&mut rng, n);
        let g2 = random_vector(&mut rng, n);
        let s = grad_sim(&g1, &g2).unwrap();
        prop_assert!(s.abs() <= 1.0 + 1e-12);
        prop_assert_eq!(s.to_bits(), grad_sim(&g2, &g1).unwrap().to_bits());
        prop_assert!((grad_sim(&g1.scaled(a), &g2.scaled(b)).unwrap() - s).abs() < 1e-12);
        prop_assert!(g1.dot(&g2).unwrap().abs() <= g1.norm() * g2.norm() * (1.0 + 1e-12));
    }
}
