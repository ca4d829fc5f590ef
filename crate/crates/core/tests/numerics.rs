use dcq::numerics::{
    central_differences, finite_difference_check, softmax_cross_entropy, Tape, Tensor, Var, NORM_EPS,
};
use dcq::rng::{self, Domain};
use proptest::prelude::*;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, Domain::Test, &[shape.len() as u64, n as u64]);
    Tensor::new(shape.to_vec(), rng::gaussian_vec(&mut r, n)).unwrap()
}

/// Max relative error of the tape gradient of `sum(probe ⊙ op(inputs))`.
fn op_error(inputs: &[Tensor], probe_seed: u64, op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let probe = random(probe_seed ^ 0x9e37_79b9, tape.value(out).shape());
        let p = tape.constant(probe);
        let d = tape.row_dot(out, p).unwrap();
        let loss = tape.sum_all(d);
        let g = tape.backward(loss).unwrap();
        let grad = vars
            .iter()
            .zip(vals)
            .flat_map(|(&v, t)| g.get_or_zeros(v, t).into_data())
            .collect();
        (tape.value(loss).data()[0], grad)
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let (_, analytic) = eval(inputs);
    let unflatten = |p: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.len();
                off += n;
                Tensor::new(t.shape().to_vec(), p[off - n..off].to_vec()).unwrap()
            })
            .collect()
    };
    finite_difference_check(|p| Ok(eval(&unflatten(p)).0), &flat, &analytic, 1e-5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let e = op_error(&[random(seed, &[m, k]), random(seed + 1, &[k, n])], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn bias_gradient(seed in 0u64..1000, b in 1usize..4, d in 1usize..5) {
        let e = op_error(&[random(seed, &[b, d]), random(seed + 1, &[1, d])], seed, |t, v| t.add_row_bias(v[0], v[1]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn prelu_gradient(seed in 0u64..1000, b in 1usize..4, d in 1usize..5) {
        let e = op_error(&[random(seed, &[b, d]), Tensor::scalar(0.25)], seed, |t, v| t.prelu(v[0], v[1]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn normalize_gradient(seed in 0u64..1000, b in 1usize..4, d in 2usize..6) {
        let e = op_error(&[random(seed, &[b, d])], seed, |t, v| t.l2_normalize_rows(v[0], NORM_EPS));
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn transpose_gradient(seed in 0u64..1000, b in 1usize..4, d in 1usize..5) {
        let e = op_error(&[random(seed, &[b, d])], seed, |t, v| t.transpose(v[0]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn row_dot_gradient(seed in 0u64..1000, b in 1usize..4, d in 1usize..5) {
        let e = op_error(&[random(seed, &[b, d]), random(seed + 7, &[b, d])], seed, |t, v| t.row_dot(v[0], v[1]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn concat_gradient(seed in 0u64..1000, b in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
        let e = op_error(&[random(seed, &[b, d1]), random(seed + 3, &[b, d2])], seed, |t, v| t.concat_cols(v[0], v[1]).unwrap());
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn affine_scalar_gradient(seed in 0u64..1000, c in -2.0f64..2.0, s in 0.1f64..5.0) {
        let e = op_error(&[random(seed, &[3, 2])], seed, |t, v| {
            let a = t.add_scalar(v[0], c);
            t.scale(a, s)
        });
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn margin_and_mask_gradient(seed in 0u64..1000, m in 0.0f64..0.5) {
        let mask = [false, true, false, false, false, true];
        let e = op_error(&[random(seed, &[2, 3])], seed, |t, v| {
            let a = t.margin_at(v[0], &[2, 0], m).unwrap();
            t.masked_fill(a, &mask, -3.0).unwrap()
        });
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn cross_entropy_gradient(seed in 0u64..1000, b in 1usize..4, c in 2usize..6) {
        let targets: Vec<usize> = (0..b).map(|i| (seed as usize + i) % c).collect();
        let e = op_error(&[random(seed, &[b, c])], seed, |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap().0);
        prop_assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, b in 1usize..5, c in 1usize..8, scale in 0.1f64..100.0) {
        let logits = random(seed, &[b, c]).map(|v| v * scale);
        let (_, diag, probs) = softmax_cross_entropy(&logits, &vec![0; b]).unwrap();
        for r in 0..b {
            prop_assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
            let s = diag.p_pos[r] + diag.p_neg[r].iter().sum::<f64>();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in 0u64..1000) {
        let x = random(seed, &[1, 5]).l2_normalize_rows(NORM_EPS);
        prop_assert!((x.row_norms()[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(1, &[3, 4]);
    let b = random(2, &[4, 2]);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - s).abs() < 1e-12);
        }
    }
    let eye = Tensor::identity(3);
    let a3 = random(3, &[3, 3]);
    assert_eq!(eye.matmul(&a3).unwrap(), a3);
    let six = Tensor::scalar(2.0).matmul(&Tensor::scalar(3.0)).unwrap();
    assert_eq!(six.data(), &[6.0]);
    assert!(a.matmul(&a).is_err());
}

#[test]
fn prelu_values_and_slope_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![-2.0, 3.0]).unwrap());
    let s = tape.param(Tensor::scalar(0.25));
    let y = tape.prelu(x, s).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.5, 3.0]);
    let l = tape.sum_all(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(s).unwrap().data(), &[-2.0]);
}

#[test]
fn normalize_examples() {
    let x = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
    let n = x.l2_normalize_rows(NORM_EPS);
    assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
    assert_eq!(n.row(1), &[0.0, 0.0]);
}

#[test]
fn linear_head_gradients_follow_pull_push_forms() {
    for seed in 0..20u64 {
        let (d, c, target) = (4, 5, (seed % 5) as usize);
        let f0 = random(seed, &[1, d]);
        let w0 = random(seed + 100, &[d, c]);
        let mut tape = Tape::new();
        let f = tape.param(f0.clone());
        let w = tape.param(w0.clone());
        let logits = tape.matmul(f, w).unwrap();
        let (loss, diag) = tape.softmax_cross_entropy(logits, &[target]).unwrap();
        let g = tape.backward(loss).unwrap();
        let (gf, gw) = (g.get(f).unwrap(), g.get(w).unwrap());

        let p_pos = diag.p_pos[0];
        let neg: Vec<usize> = (0..c).filter(|&j| j != target).collect();
        let p_neg = &diag.p_neg[0];
        assert!(((1.0 - p_pos) - p_neg.iter().sum::<f64>()).abs() < 1e-12);
        for k in 0..d {
            let mut want = -(1.0 - p_pos) * w0.get(k, target);
            for (i, &j) in neg.iter().enumerate() {
                want += p_neg[i] * w0.get(k, j);
            }
            assert!((gf.data()[k] - want).abs() < 1e-9);
            assert!((gw.get(k, target) + (1.0 - p_pos) * f0.data()[k]).abs() < 1e-9);
            for (i, &j) in neg.iter().enumerate() {
                assert!((gw.get(k, j) - p_neg[i] * f0.data()[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn detached_inputs_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(random(1, &[2, 3]));
    let b = tape.constant(random(2, &[3, 2]));
    let c = tape.matmul(a, b).unwrap();
    let l = tape.sum_all(c);
    let g = tape.backward(l).unwrap();
    assert!(g.get(b).is_none());
    assert!(!tape.requires_grad(b));
    assert!(g.get(a).is_some());
}

#[test]
fn constant_output_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(random(1, &[2, 3]));
    // every row is pushed to the same masked value, so the output ignores x
    let m = tape.masked_fill(x, &[true; 6], 1.5).unwrap();
    let l = tape.sum_all(m);
    let g = tape.backward(l).unwrap();
    let gx = g.get_or_zeros(x, tape.value(x));
    assert!(gx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_on_matrix_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.param(random(1, &[2, 3]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn central_differences_of_square() {
    let g = central_differences(|p| Ok(p[0] * p[0]), &[1.0], 1e-5).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-10);
    let e = finite_difference_check(|_| Ok(3.0), &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap();
    assert_eq!(e, 0.0);
}

#[test]
fn cross_entropy_hand_values() {
    let t = Tensor::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap();
    let (l, _, _) = softmax_cross_entropy(&t, &[0]).unwrap();
    let e = std::f64::consts::E;
    assert!((l + (e * e / (e * e + e + 1.0)).ln()).abs() < 1e-14);
    let eq = Tensor::zeros(&[1, 4]);
    assert!((softmax_cross_entropy(&eq, &[3]).unwrap().0 - 4f64.ln()).abs() < 1e-15);
    assert!(softmax_cross_entropy(&eq, &[4]).is_err());
}
