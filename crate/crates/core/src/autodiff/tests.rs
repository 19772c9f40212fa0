use super::*;
use proptest::prelude::*;
use rand::SeedableRng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn square_forward_and_backward() {
    let mut tape = Tape::new();
    let x = tape.param("x", &Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.value(y).item(), 9.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g["x"].item(), 6.0);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.input("x", t(&[1, 2], &[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.input("x", t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 0.5).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_is_p_minus_onehot() {
    let mut tape = Tape::new();
    let logits = tape.param("logits", &t(&[1, 2], &[0.0, 0.0]));
    let target = tape.input("y", t(&[1], &[0.0]));
    let loss = tape.cross_entropy(logits, target).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g["logits"].data(), &[-0.5, 0.5]);
}

struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn mlp(seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp {
        w1: Tensor::randn(vec![4, 5], 0.5, &mut rng),
        b1: Tensor::randn(vec![5], 0.5, &mut rng),
        w2: Tensor::randn(vec![5, 3], 0.5, &mut rng),
        b2: Tensor::randn(vec![3], 0.5, &mut rng),
    }
}

/// Straight-line evaluation with explicit loops, independent of the tape.
fn mlp_oracle(m: &Mlp, x: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..rows {
        let xr = &x[r * 4..(r + 1) * 4];
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = m.b1.data()[j];
            for i in 0..4 {
                s += xr[i] * m.w1.data()[i * 5 + j];
            }
            h[j] = s.max(0.0);
        }
        for j in 0..3 {
            let mut s = m.b2.data()[j];
            for i in 0..5 {
                s += h[i] * m.w2.data()[i * 3 + j];
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn mlp_forward_matches_hand_evaluation() {
    let m = mlp(7);
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::full(vec![2, 4], 1.0));
    let w1 = tape.param("w1", &m.w1);
    let b1 = tape.param("b1", &m.b1);
    let w2 = tape.param("w2", &m.w2);
    let b2 = tape.param("b2", &m.b2);
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.add(h, b1).unwrap();
    let h = tape.relu(h).unwrap();
    let o = tape.matmul(h, w2).unwrap();
    let o = tape.add(o, b2).unwrap();
    let expect = mlp_oracle(&m, &[1.0; 8], 2);
    for (a, b) in tape.value(o).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // replay with a new input binding
    let x2: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let mut bind = BTreeMap::new();
    bind.insert("x".to_string(), t(&[2, 4], &x2));
    let out = tape.forward_eval(&bind).unwrap();
    for (a, b) in out.data().iter().zip(&mlp_oracle(&m, &x2, 2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_eval_requires_bound_inputs_and_matching_shapes() {
    let mut tape = Tape::new();
    let x = tape.input("x", Tensor::zeros(vec![2, 2]));
    tape.scale(x, 2.0).unwrap();
    assert!(matches!(
        tape.forward_eval(&BTreeMap::new()),
        Err(Error::UnboundInput(n)) if n == "x"
    ));
    let mut bind = BTreeMap::new();
    bind.insert("x".to_string(), Tensor::zeros(vec![3]));
    let err = tape.forward_eval(&bind).unwrap_err().to_string();
    assert!(err.contains("forward_eval") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn shape_mismatch_names_the_operation() {
    let mut tape = Tape::new();
    let a = tape.input("a", Tensor::zeros(vec![2, 3]));
    let b = tape.input("b", Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.starts_with("matmul"), "{err}");
    assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.param("a", &Tensor::zeros(vec![2]));
    let b = tape.scale(a, 1.0).unwrap();
    assert!(matches!(tape.backward(b), Err(Error::NonScalarLoss(_))));
}

#[test]
fn detached_and_unreachable_params_are_absent() {
    let mut tape = Tape::new();
    let mut frozen = Tensor::scalar(2.0);
    frozen.set_requires_grad(false);
    let a = tape.param("a", &Tensor::scalar(1.0));
    let f = tape.param("frozen", &frozen);
    let _unused = tape.param("unused", &Tensor::scalar(5.0));
    let y = tape.mul(a, f).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a"]);
    assert_eq!(g["a"].item(), 2.0);
}

#[test]
fn zero_gradient_is_present_not_absent() {
    let mut tape = Tape::new();
    let a = tape.param("a", &Tensor::scalar(1.0));
    let y = tape.scale(a, 0.0).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g["a"].item(), 0.0);
}

#[test]
fn sgd_step_definition() {
    let mut p = ParamSet::new();
    p.insert("p".into(), Tensor::scalar(1.0));
    let mut g = GradMap::new();
    g.insert("p".into(), Tensor::scalar(0.5));
    sgd_step(&mut p, &g, 0.1).unwrap();
    assert!((p["p"].item() - 0.95).abs() < 1e-15);

    g.insert("p".into(), Tensor::scalar(0.0));
    let before = p.clone();
    sgd_step(&mut p, &g, 0.1).unwrap();
    assert_eq!(p, before);
}

#[test]
fn sgd_two_steps_on_square() {
    let mut p = ParamSet::new();
    p.insert("x".into(), Tensor::scalar(1.0));
    let mut seen = Vec::new();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.param("x", &p["x"]);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        sgd_step(&mut p, &g, 0.1).unwrap();
        seen.push(p["x"].item());
    }
    assert!((seen[0] - 0.8).abs() < 1e-15);
    assert!((seen[1] - 0.64).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite_and_unknown() {
    let mut p = ParamSet::new();
    p.insert("w".into(), Tensor::scalar(1.0));
    let mut g = GradMap::new();
    g.insert("w".into(), Tensor::scalar(f64::NAN));
    assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::NonFinite(n)) if n == "w"));
    let mut g = GradMap::new();
    g.insert("v".into(), Tensor::scalar(1.0));
    assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::UnknownParam(_))));
}

fn single(name: &str, v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name.into(), Tensor::scalar(v));
    p
}

#[test]
fn grad_check_cube() {
    let f = |p: &ParamSet| {
        let mut tape = Tape::new();
        let x = tape.param("x", &p["x"]);
        let x2 = tape.mul(x, x)?;
        let y = tape.mul(x2, x)?;
        Ok((tape.value(y).item(), tape.backward(y)?))
    };
    let cfg = GradCheck::default();
    let err = grad_check(f, &single("x", 2.0), &cfg).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_linear_is_exact_to_rounding() {
    let f = |p: &ParamSet| {
        let mut tape = Tape::new();
        let x = tape.param("x", &p["x"]);
        let y = tape.scale(x, 3.0)?;
        Ok((tape.value(y).item(), tape.backward(y)?))
    };
    let err = grad_check(f, &single("x", 0.7), &GradCheck::default()).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_reports_non_finite_as_infinite() {
    let f = |p: &ParamSet| {
        let g = {
            let mut g = GradMap::new();
            g.insert("x".to_string(), Tensor::scalar(f64::NAN));
            g
        };
        Ok((p["x"].item(), g))
    };
    let err = grad_check(f, &single("x", 0.0), &GradCheck::default()).unwrap();
    assert!(err.is_infinite());
}

#[test]
fn grad_check_rejects_bad_eps() {
    let f = |_: &ParamSet| Ok((0.0, GradMap::new()));
    let cfg = GradCheck {
        eps: 0.1,
        ..GradCheck::default()
    };
    assert!(grad_check(f, &single("x", 0.0), &cfg).is_err());
}

fn mlp_ln_params(seed: u64) -> ParamSet {
    let m = mlp(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut p = ParamSet::new();
    p.insert("w1".into(), m.w1);
    p.insert("b1".into(), m.b1);
    p.insert("gamma".into(), Tensor::randn(vec![5], 0.3, &mut rng));
    p.insert("w2".into(), m.w2);
    p.insert("b2".into(), m.b2);
    p
}

fn mlp_ln_loss(p: &ParamSet, x: &Tensor, y: &Tensor) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let x = tape.input("x", x.clone());
    let y = tape.input("y", y.clone());
    let v: BTreeMap<&str, Var> = p.iter().map(|(k, t)| (k.as_str(), tape.param(k, t))).collect();
    let h = tape.matmul(x, v["w1"])?;
    let h = tape.add(h, v["b1"])?;
    let h = tape.layer_norm(h)?;
    let h = tape.mul(h, v["gamma"])?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, v["w2"])?;
    let o = tape.add(o, v["b2"])?;
    let loss = tape.cross_entropy(o, y)?;
    Ok((tape.value(loss).item(), tape.backward(loss)?))
}

#[test]
fn mlp_with_layer_norm_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let y = t(&[3], &[0.0, 2.0, 1.0]);
    let params = mlp_ln_params(7);
    let err = grad_check(|p| mlp_ln_loss(p, &x, &y), &params, &GradCheck::default()).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = mlp_ln_params(3);
    let x1 = Tensor::randn(vec![2, 4], 1.0, &mut rng);
    let x2 = Tensor::randn(vec![2, 4], 1.0, &mut rng);
    let y = t(&[2], &[1.0, 0.0]);
    let (_, g1) = mlp_ln_loss(&params, &x1, &y).unwrap();
    let (_, g2) = mlp_ln_loss(&params, &x2, &y).unwrap();

    // both losses summed on one tape
    let mut tape = Tape::new();
    let v: BTreeMap<&str, Var> = params
        .iter()
        .map(|(k, t)| (k.as_str(), tape.param(k, t)))
        .collect();
    let yv = tape.input("y", y.clone());
    let mut losses = Vec::new();
    for (i, x) in [&x1, &x2].into_iter().enumerate() {
        let x = tape.input(format!("x{i}"), x.clone());
        let h = tape.matmul(x, v["w1"]).unwrap();
        let h = tape.add(h, v["b1"]).unwrap();
        let h = tape.layer_norm(h).unwrap();
        let h = tape.mul(h, v["gamma"]).unwrap();
        let h = tape.gelu(h).unwrap();
        let o = tape.matmul(h, v["w2"]).unwrap();
        let o = tape.add(o, v["b2"]).unwrap();
        losses.push(tape.cross_entropy(o, yv).unwrap());
    }
    let a = tape.reshape(losses[0], vec![1]).unwrap();
    let b = tape.reshape(losses[1], vec![1]).unwrap();
    let both = tape.concat(&[a, b], 0).unwrap();
    let m = tape.mean(both).unwrap();
    let total = tape.scale(m, 2.0).unwrap();
    let g = tape.backward(total).unwrap();
    for (k, gt) in &g {
        for ((s, a), b) in gt.data().iter().zip(g1[k].data()).zip(g2[k].data()) {
            let denom = s.abs().max(1e-300);
            assert!((s - (a + b)).abs() / denom <= 1e-12 || (s - (a + b)).abs() < 1e-15);
        }
    }
}

#[test]
fn rerun_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let y = t(&[3], &[0.0, 1.0, 2.0]);
    let p = mlp_ln_params(11);
    let a = mlp_ln_loss(&p, &x, &y).unwrap();
    let b = mlp_ln_loss(&p, &x, &y).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn batched_matmul_transpose_slice_concat_embedding_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    params.insert("a".into(), Tensor::randn(vec![2, 3, 4], 1.0, &mut rng));
    params.insert("b".into(), Tensor::randn(vec![2, 3, 4], 1.0, &mut rng));
    params.insert("table".into(), Tensor::randn(vec![5, 3], 1.0, &mut rng));
    let idx = t(&[2, 2], &[4.0, 0.0, 2.0, 4.0]);
    let f = |p: &ParamSet| {
        let mut tape = Tape::new();
        let a = tape.param("a", &p["a"]);
        let b = tape.param("b", &p["b"]);
        let table = tape.param("table", &p["table"]);
        let idx = tape.input("idx", idx.clone());
        let bt = tape.transpose(b)?;
        let s = tape.matmul(a, bt)?; // [2,3,3]
        let s = tape.softmax(s)?;
        let left = tape.slice(s, 2, 0, 2)?; // [2,3,2]
        let e = tape.embedding(table, idx)?; // [2,2,3]
        let et = tape.transpose(e)?; // [2,3,2]
        let mixed = tape.mul(left, et)?;
        let c = tape.concat(&[mixed, left], 2)?; // [2,3,4]
        let m = tape.mean_axis(c, 1)?; // [2,4]
        let sq = tape.mul(m, m)?;
        let y = tape.mean(sq)?;
        Ok((tape.value(y).item(), tape.backward(y)?))
    };
    let err = grad_check(f, &params, &GradCheck::default()).unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::new(vec![3, 4], vals).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_graphs_pass_grad_check(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let y = Tensor::new(vec![3], vec![(seed % 3) as f64, 1.0, 2.0]).unwrap();
        let params = mlp_ln_params(seed);
        let err = grad_check(|p| mlp_ln_loss(p, &x, &y), &params, &GradCheck::default()).unwrap();
        prop_assert!(err < 1e-4, "seed {} err {}", seed, err);
    }
}
