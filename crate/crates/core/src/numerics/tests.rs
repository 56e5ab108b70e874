use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

/// Central differences of `f` around `x`, one coordinate at a time.
fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn assert_close_rel(analytic: &Tensor, numeric: &Tensor, tol: f64) {
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        assert!((a - n).abs() / denom < tol, "analytic {a} vs numeric {n}");
    }
}

/// Builds `loss = build(g, x)` with `x` trainable and checks d loss / d x.
fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
    let mut g = Graph::new();
    let xv = g.trainable(x.clone());
    let loss = build(&mut g, xv);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap().clone();
    let f = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let l = build(&mut g, v);
        g.value(l).item()
    };
    let numeric = numeric_grad(&x, 1e-5, &f);
    assert_close_rel(&analytic, &numeric, 1e-4);
}

/// Weighted readout so every output coordinate matters.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.trainable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn frozen_weight_passes_gradient_to_input() {
    let mut r = rng(1);
    let w = Tensor::randn(&[3, 2], 1.0, &mut r);
    let xin = Tensor::randn(&[1, 3], 1.0, &mut r);
    let up = Tensor::randn(&[1, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let x = g.trainable(xin);
    let wv = g.constant(w.clone());
    let y = g.matmul(x, wv).unwrap();
    let upv = g.constant(up.clone());
    let p = g.mul(y, upv).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(wv).is_none());
    let expected = w
        .matmul(&up.transpose().unwrap())
        .unwrap()
        .transpose()
        .unwrap();
    assert!(grads.get(x).unwrap().max_abs_diff(&expected) < 1e-14);
}

#[test]
fn frozen_flag_does_not_change_other_gradients() {
    let mut r = rng(2);
    let a = Tensor::randn(&[2, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let run = |b_trainable: bool| {
        let mut g = Graph::new();
        let av = g.trainable(a.clone());
        let bv = g.leaf(b.clone(), b_trainable);
        let c = g.matmul(av, bv).unwrap();
        let c = g.gelu(c).unwrap();
        let l = readout(&mut g, c, 9);
        g.backward(l).unwrap().get(av).unwrap().clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.trainable(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn matmul_gradients() {
    let mut r = rng(3);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let bb = b.clone();
    check_unary(a.clone(), move |g, x| {
        let bv = g.constant(bb.clone());
        let y = g.matmul(x, bv).unwrap();
        readout(g, y, 4)
    });
    check_unary(b, move |g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, x).unwrap();
        readout(g, y, 5)
    });
}

#[test]
fn matmul_nt_gradients() {
    let mut r = rng(4);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[5, 4], 1.0, &mut r);
    let bb = b.clone();
    check_unary(a.clone(), move |g, x| {
        let bv = g.constant(bb.clone());
        let y = g.matmul_nt(x, bv).unwrap();
        readout(g, y, 6)
    });
    check_unary(b, move |g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul_nt(av, x).unwrap();
        readout(g, y, 7)
    });
}

#[test]
fn elementwise_and_row_gradients() {
    let mut r = rng(5);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let other = Tensor::randn(&[3, 4], 1.0, &mut r);
    let row = Tensor::randn(&[4], 1.0, &mut r);
    let (o1, o2) = (other.clone(), other.clone());
    check_unary(x.clone(), move |g, v| {
        let o = g.constant(o1.clone());
        let a = g.add(v, o).unwrap();
        let s = g.sub(a, v).unwrap();
        let m = g.mul(s, v).unwrap();
        let m = g.mul(m, v).unwrap();
        let y = g.scale(m, -0.7).unwrap();
        readout(g, y, 8)
    });
    let (r1, r2) = (row.clone(), row.clone());
    check_unary(x.clone(), move |g, v| {
        let rv = g.constant(r1.clone());
        let y = g.add_row(v, rv).unwrap();
        let y = g.mul_row(y, rv).unwrap();
        readout(g, y, 9)
    });
    check_unary(row, move |g, v| {
        let xv = g.constant(o2.clone());
        let y = g.mul_row(xv, v).unwrap();
        let y = g.add_row(y, v).unwrap();
        readout(g, y, 10)
    });
    let _ = r2;
}

#[test]
fn nonlinearity_gradients() {
    let mut r = rng(6);
    let x = Tensor::randn(&[3, 5], 1.5, &mut r);
    check_unary(x.clone(), |g, v| {
        let y = g.gelu(v).unwrap();
        readout(g, y, 11)
    });
    check_unary(x.clone(), |g, v| {
        let y = g.layer_norm(v, 1e-5).unwrap();
        readout(g, y, 12)
    });
    check_unary(x.clone(), |g, v| {
        let y = g.softmax_rows(v, None).unwrap();
        readout(g, y, 13)
    });
    let mask: Vec<bool> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
    check_unary(x, move |g, v| {
        let y = g.softmax_rows(v, Some(&mask)).unwrap();
        readout(g, y, 14)
    });
}

#[test]
fn structural_gradients() {
    let mut r = rng(7);
    let table = Tensor::randn(&[6, 3], 1.0, &mut r);
    check_unary(table.clone(), |g, v| {
        let y = g.gather_rows(v, &[4, 1, 4, 0]).unwrap();
        readout(g, y, 15)
    });
    check_unary(table.clone(), |g, v| {
        let a = g.slice_rows(v, 1, 3).unwrap();
        let b = g.slice_cols(v, 1, 2).unwrap();
        let b = g.slice_rows(b, 0, 3).unwrap();
        let c = g.concat_cols(&[a, b]).unwrap();
        let d = g.concat_rows(&[c, c]).unwrap();
        readout(g, d, 16)
    });
    check_unary(table, |g, v| {
        let a = g.sum_squares(v).unwrap();
        let b = g.mean(v).unwrap();
        let s = g.sum(v).unwrap();
        let ab = g.add(a, b).unwrap();
        g.mul(ab, s).unwrap()
    });
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(8);
    let logits = Tensor::randn(&[4, 7], 2.0, &mut r);
    check_unary(logits, |g, v| {
        g.softmax_cross_entropy(v, &[0, 6, 3, 3]).unwrap()
    });
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[3, 4]));
    let loss = g.softmax_cross_entropy(l, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_confident_limit() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[vec![-300.0, 400.0, -300.0]]).unwrap());
    let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
    assert!(g.value(loss).item() < 1e-300);
}

#[test]
fn cross_entropy_matches_high_precision_value() {
    // 50-digit evaluation of the direct formula for these logits.
    let expected = 0.221_971_105_992_254_73;
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.5], vec![1.7, 0.4, -0.6]]).unwrap());
    let loss = g.softmax_cross_entropy(l, &[2, 0]).unwrap();
    assert!((g.value(loss).item() - expected).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        g.softmax_cross_entropy(l, &[4]),
        Err(Error::Vocabulary { id: 4, size: 4 })
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(9);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[5, 9], 10.0, &mut r));
    let y = g.softmax_rows(x, None).unwrap();
    for row in 0..5 {
        let s: f64 = g.value(y).row(row).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fully_masked_row_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.softmax_rows(x, Some(&[false, false])).is_err());
}

#[test]
fn non_finite_results_raise() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1e300));
    let y = g.mul(x, x);
    assert!(matches!(y, Err(Error::NonFinite("mul"))));
}

#[test]
fn f32_precision_rounds_values() {
    let mut g = Graph::with_precision(Precision::F32);
    let x = g.constant(Tensor::scalar(0.1));
    assert_eq!(g.value(x).item(), 0.1f32 as f64);
    let y = g.scale(x, 3.0).unwrap();
    assert_eq!(g.value(y).item(), ((0.1f32 as f64) * 3.0) as f32 as f64);
}

#[test]
fn record_is_topologically_ordered() {
    let mut g = Graph::new();
    let a = g.trainable(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(2.0));
    let c = g.mul(a, b).unwrap();
    let d = g.add(c, a).unwrap();
    for v in [c, d] {
        assert!(g.inputs_of(v).iter().all(|i| i.index() < v.index()));
    }
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let before = p.clone();
    let g = Tensor::zeros(&[1, 2]);
    let mut st = AdamState::new(AdamConfig::default(), [&p]);
    st.step(&mut [&mut p], &[&g]).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut p = Tensor::scalar(0.0);
    let mut st = AdamState::new(cfg, [&p]);
    st.step(&mut [&mut p], &[&Tensor::scalar(1.0)]).unwrap();
    assert!((p.item() + 0.1).abs() < 1e-8);
}

#[test]
fn adam_two_steps_match_hand_unrolled_recurrence() {
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
    let (g1, g2): (f64, f64) = (0.5, -0.3);
    // Hand-unrolled.
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    let w1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g2;
    let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
    let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

    let cfg = AdamConfig {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
    };
    let mut p = Tensor::scalar(1.0);
    let mut st = AdamState::new(cfg, [&p]);
    st.step(&mut [&mut p], &[&Tensor::scalar(g1)]).unwrap();
    st.step(&mut [&mut p], &[&Tensor::scalar(g2)]).unwrap();
    assert!((p.item() - w2).abs() < 1e-12);
    assert_eq!(st.step_count(), 2);
}

#[test]
fn adam_shape_mismatch() {
    let mut p = Tensor::zeros(&[2]);
    let mut st = AdamState::new(AdamConfig::default(), [&p]);
    let g = Tensor::zeros(&[3]);
    assert!(matches!(
        st.step(&mut [&mut p], &[&g]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn recording_is_deterministic() {
    let run = || {
        let mut r = rng(10);
        let mut g = Graph::new();
        let x = g.trainable(Tensor::randn(&[4, 4], 1.0, &mut r));
        let y = g.matmul(x, x).unwrap();
        let y = g.layer_norm(y, 1e-5).unwrap();
        let y = g.softmax_rows(y, None).unwrap();
        let l = g.softmax_cross_entropy(y, &[0, 1, 2, 3]).unwrap();
        let gr = g.backward(l).unwrap();
        (g.value(l).item().to_bits(), gr.get(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}
