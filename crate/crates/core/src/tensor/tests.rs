use std::sync::Arc;

use super::*;
use crate::Result;

/// Gradient check of `build` applied to the named inputs, with the output
/// contracted against a fixed random tensor so that no output coordinate
/// gets a symmetric weight.
fn check_op<F>(inputs: &[(&str, Tensor)], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParameterStore::new();
    for (name, t) in inputs {
        store.insert(*name, t.clone()).unwrap();
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = names.iter().map(|n| tape.param(&store, n).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        Rng::new(999).uniform_tensor(tape.value(out).shape(), -1.0, 1.0)
    };
    let f = |tape: &mut Tape, s: &ParameterStore| -> Result<Var> {
        let vars: Vec<Var> = names.iter().map(|n| tape.param(s, n)).collect::<Result<_>>()?;
        let out = build(tape, &vars)?;
        let weighted = tape.mul_const(out, Arc::new(probe.clone()))?;
        Ok(tape.sum(weighted))
    };
    let report = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Rng::new(seed).uniform_tensor(shape, -1.0, 1.0)
}

#[test]
fn grad_matmul_and_transpose() {
    check_op(&[("a", rand(&[3, 4], 1)), ("b", rand(&[4, 2], 2))], |t, v| t.matmul(v[0], v[1]));
    check_op(&[("a", rand(&[3, 4], 3))], |t, v| t.transpose(v[0]));
}

#[test]
fn grad_elementwise_binary() {
    let a = ("a", rand(&[3, 3], 4));
    let b = ("b", rand(&[3, 3], 5));
    check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(&[a, b], |t, v| t.mul(v[0], v[1]));
}

#[test]
fn grad_bias_scale_and_scalar() {
    check_op(&[("a", rand(&[4, 3], 6)), ("b", rand(&[3], 7))], |t, v| t.add_bias(v[0], v[1]));
    check_op(&[("a", rand(&[2, 3, 2], 8)), ("b", rand(&[2], 9))], |t, v| t.add_bias(v[0], v[1]));
    check_op(&[("a", rand(&[3, 3], 10))], |t, v| Ok(t.scale(v[0], -2.5)));
    check_op(&[("a", rand(&[3, 2], 11)), ("s", rand(&[1], 12))], |t, v| t.mul_scalar(v[0], v[1]));
    let mask = Arc::new(rand(&[3, 2], 13));
    check_op(&[("a", rand(&[3, 2], 14))], move |t, v| t.mul_const(v[0], mask.clone()));
    let factors = Arc::new(vec![0.0, 2.0, -1.0]);
    check_op(&[("a", rand(&[3, 2], 15))], move |t, v| t.scale_rows(v[0], factors.clone()));
}

#[test]
fn grad_activations() {
    // Keep inputs away from the ReLU/ELU kink at zero.
    let mut x = rand(&[4, 4], 16);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    let x = ("x", x);
    check_op(std::slice::from_ref(&x), |t, v| Ok(t.relu(v[0])));
    check_op(std::slice::from_ref(&x), |t, v| Ok(t.elu(v[0])));
    check_op(std::slice::from_ref(&x), |t, v| Ok(t.tanh(v[0])));
    check_op(std::slice::from_ref(&x), |t, v| Ok(t.sigmoid(v[0])));
    check_op(&[x], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
    check_op(&[("p", Rng::new(17).uniform_tensor(&[3, 3], 0.1, 2.0))], |t, v| {
        Ok(t.log_eps(v[0], 1e-12))
    });
}

#[test]
fn grad_structural_ops() {
    check_op(&[("a", rand(&[3, 2], 18)), ("b", rand(&[3, 4], 19))], |t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
    check_op(&[("a", rand(&[3, 6], 20))], |t, v| t.slice_cols(v[0], 2, 3));
    check_op(&[("a", rand(&[2, 6], 21))], |t, v| t.reshape(v[0], &[3, 4]));
    check_op(&[("a", rand(&[3, 2], 22)), ("b", rand(&[3, 2], 23))], |t, v| t.stack(&[v[0], v[1], v[0]]));
    check_op(&[("a", rand(&[2, 3, 4], 24))], |t, v| t.permute021(v[0]));
    check_op(&[("a", rand(&[4, 4], 25))], |t, v| t.diag(v[0]));
    check_op(&[("a", rand(&[4, 3], 26))], |t, v| Ok(t.sum(v[0])));
    check_op(&[("a", rand(&[4, 3], 27))], |t, v| Ok(t.mean(v[0])));
}

#[test]
fn grad_softmax_family() {
    check_op(&[("a", rand(&[3, 5], 28))], |t, v| Ok(t.softmax_rows(v[0])));
    check_op(&[("a", rand(&[2, 3, 4], 29))], |t, v| Ok(t.softmax_rows(v[0])));
    check_op(&[("a", rand(&[3, 5], 30))], |t, v| Ok(t.logsumexp_rows(v[0])));
    check_op(&[("a", rand(&[4, 3], 31))], |t, v| t.l2_normalize_rows(v[0], 0.0));
    check_op(&[("a", rand(&[4, 3], 32))], |t, v| t.l2_normalize_rows(v[0], 1e-3));
}

#[test]
fn grad_sparse_product() {
    let s = Arc::new(Csr::from_triplets(3, 4, vec![(0, 1, 0.5), (1, 0, 2.0), (1, 3, -1.0), (2, 2, 1.5)]).unwrap());
    check_op(&[("a", rand(&[4, 3], 33))], move |t, v| t.spmm(s.clone(), v[0]));
}

#[test]
fn grad_conv_pool_and_weighted_sum() {
    check_op(
        &[
            ("x", rand(&[2, 3, 9], 34)),
            ("k", rand(&[4, 3, 5], 35)),
            ("b", rand(&[4], 36)),
        ],
        |t, v| t.conv1d(v[0], v[1], v[2], 1, 2),
    );
    check_op(
        &[
            ("x", rand(&[2, 2, 10], 37)),
            ("k", rand(&[3, 2, 3], 38)),
            ("b", rand(&[3], 39)),
        ],
        |t, v| t.conv1d(v[0], v[1], v[2], 2, 1),
    );
    check_op(&[("x", rand(&[2, 3, 9], 40))], |t, v| t.maxpool1d(v[0], 2));
    check_op(&[("w", rand(&[3, 4], 41)), ("s", rand(&[3, 4, 2], 42))], |t, v| {
        t.weighted_sum(v[0], v[1])
    });
}

#[test]
fn conv_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let k = tape.constant(Tensor::ones(&[1, 1, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv1d(x, k, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

    let k1 = tape.constant(Tensor::ones(&[1, 1, 1]));
    let y1 = tape.conv1d(x, k1, b, 1, 0).unwrap();
    assert_eq!(tape.value(y1).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn conv_output_length_with_default_geometry() {
    assert_eq!(conv1d_output_len(40, 25, 1, 12), Some(40));
    assert_eq!(conv1d_output_len(3, 5, 1, 0), None);
}

#[test]
fn conv_rejects_invalid_geometry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 3]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 5]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d(x, k, b, 1, 0), Err(crate::Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let s = softmax(&Tensor::vector(vec![0.0, 0.0]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax(&Tensor::vector(vec![1000.0, 1000.0]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0, 0.0]));
    for (a, b) in s.data().iter().zip([0.5, 0.25, 0.25]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn activation_closed_forms() {
    let e = std::f64::consts::E;
    for x in [-1.0f64, 0.0, 1.0] {
        assert!((relu(x) - if x > 0.0 { x } else { 0.0 }).abs() < 1e-12);
        assert!((elu(x) - if x > 0.0 { x } else { e.powf(x) - 1.0 }).abs() < 1e-12);
        assert!((sigmoid(x) - 1.0 / (1.0 + e.powf(-x))).abs() < 1e-12);
        let th = (e.powf(x) - e.powf(-x)) / (e.powf(x) + e.powf(-x));
        assert!((x.tanh() - th).abs() < 1e-12);
    }
}

#[test]
fn normalize_rejects_zero_rows_when_strict() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    assert!(matches!(
        tape.l2_normalize_rows(x, 0.0),
        Err(crate::Error::DegenerateEmbedding { row: 1 })
    ));
    assert!(tape.l2_normalize_rows(x, 1e-6).is_ok());
}

#[test]
fn gradients_flow_only_to_variables() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2, 2]));
    let v = tape.variable(Tensor::ones(&[2, 2]));
    let p = tape.mul(c, v).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(v).unwrap().data(), &[1.0; 4]);
}

#[test]
fn frozen_prefix_blocks_gradients() {
    let mut store = ParameterStore::new();
    store.insert("frozen.w", Tensor::scalar(2.0)).unwrap();
    store.insert("live.w", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    tape.freeze_prefix("frozen.");
    let a = tape.param(&store, "frozen.w").unwrap();
    let b = tape.param(&store, "live.w").unwrap();
    let p = tape.mul(a, b).unwrap();
    let grads = tape.backward(p).unwrap();
    tape.accumulate_param_grads(&grads, &mut store).unwrap();
    assert_eq!(store.get("frozen.w").unwrap().grad.data(), &[0.0]);
    assert_eq!(store.get("live.w").unwrap().grad.data(), &[2.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&Tensor::vector(logits.clone()));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax(&Tensor::vector(shifted));
            prop_assert!((a.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(a.data().iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        }

        #[test]
        fn matmul_gradients_on_random_shapes(p in 1usize..8, q in 1usize..8, r in 1usize..8, seed in 0u64..1000) {
            check_op(&[("a", rand(&[p, q], seed)), ("b", rand(&[q, r], seed + 1))], |t, v| t.matmul(v[0], v[1]));
        }
    }
}
