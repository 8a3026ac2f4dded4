use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layers::{ConvGeometry, ParamStore};
use crate::Shape;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(&Shape::new(dims.to_vec()).unwrap(), 1.0, &mut rng(seed))
}

/// `sum(v ⊙ probe)` for a fixed random probe, so every output coordinate
/// carries a distinct weight.
fn probe_loss(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let probe = randn(tape.value(v).dims(), seed);
    let p = tape.leaf(probe, false);
    let m = tape.mul(v, p)?;
    Ok(tape.sum(m))
}

fn check(params: Vec<Tensor>, f: impl FnMut(&mut Tape, &[Var]) -> Result<Var>) -> GradCheckReport {
    let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
    let mut f = f;
    let report = grad_check(&params, &names, &CheckOptions::default(), |tape, ps| {
        let vars = ParamStore::register(ps, tape);
        f(tape, &vars)
    })
    .unwrap();
    assert!(
        report.passed(),
        "max relative error {} (report {report:?})",
        report.max_rel_error()
    );
    report
}

#[test]
fn scalar_chain_matches_hand_derivative() {
    // L = (x·w)² → dL/dx = 2·x·w², dL/dw = 2·x²·w
    let (x0, w0) = (1.5, -0.75);
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::scalar(x0));
    let w = tape.param(ParamId(1), Tensor::scalar(w0));
    let a = tape.mul(x, w).unwrap();
    let b = tape.mul(a, a).unwrap();
    let l = tape.sum(b);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap().item(), 2.0 * x0 * w0 * w0);
    assert_eq!(g.param(ParamId(1)).unwrap().item(), 2.0 * x0 * x0 * w0);
}

#[test]
fn sum_of_product_gives_other_factor_exactly() {
    let u0 = randn(&[2, 3, 4], 1);
    let w0 = randn(&[2, 3, 4], 2);
    let mut tape = Tape::new();
    let u = tape.param(ParamId(0), u0.clone());
    let w = tape.param(ParamId(1), w0.clone());
    let m = tape.mul(u, w).unwrap();
    let l = tape.sum(m);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap(), &w0);
    assert_eq!(g.param(ParamId(1)).unwrap(), &u0);
}

#[test]
fn full_contraction_adjoint_is_axis_reversed_weight() {
    let u0 = randn(&[2, 3, 4], 3);
    let w0 = randn(&[4, 3, 2], 4);
    let mut tape = Tape::new();
    let u = tape.param(ParamId(0), u0.clone());
    let w = tape.param(ParamId(1), w0.clone());
    let l = tape.contract(u, w, 3).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap(), &w0.reverse_axes());
    assert_eq!(g.param(ParamId(1)).unwrap(), &u0.reverse_axes());
}

#[test]
fn contraction_gradients_match_finite_differences() {
    for (ud, wd, r) in [
        (vec![2, 3, 4], vec![4, 3, 2], 2),
        (vec![3, 2], vec![2, 4, 2], 1),
        (vec![2, 2, 2, 2], vec![2, 2, 2, 2], 2),
    ] {
        check(vec![randn(&ud, 5), randn(&wd, 6)], |t, v| {
            let y = t.contract(v[0], v[1], r)?;
            probe_loss(t, y, 7)
        });
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), randn(&[3], 1));
    assert!(matches!(tape.backward(x), Err(Error::NotScalarLoss(d)) if d == vec![3]));
}

#[test]
fn unrequested_leaves_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[3], 1), false);
    let y = tape.leaf(randn(&[3], 2), true);
    let m = tape.mul(x, y).unwrap();
    let l = tape.sum(m);
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(x).is_none());
    assert_eq!(g.wrt(y).unwrap(), tape.value(x));
    assert!(g.is_empty());
}

fn small_conv_tape() -> (Tape, Var) {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), randn(&[2, 2, 5, 5, 2, 2], 11));
    let w = tape.param(ParamId(1), randn(&[3, 2, 3, 3, 2, 2], 12));
    let slope = tape.param(ParamId(2), Tensor::full(&Shape::new([3]).unwrap(), 0.25));
    let y = tape.tensor_conv(x, w, ConvGeometry::new(3, 1, 1), 1).unwrap();
    let z = tape.prelu(y, slope).unwrap();
    let l = probe_loss(&mut tape, z, 13).unwrap();
    (tape, l)
}

#[test]
fn backward_is_deterministic() {
    let (tape, l) = small_conv_tape();
    let a = tape.backward(l).unwrap();
    let b = tape.backward(l).unwrap();
    for (id, g) in a.params() {
        assert_eq!(g, b.param(id).unwrap());
    }
}

#[test]
fn doubling_the_seed_doubles_every_gradient() {
    let (tape, l) = small_conv_tape();
    let a = tape.backward(l).unwrap();
    let b = tape.backward_with_seed(l, 2.0).unwrap();
    for (id, g) in a.params() {
        let doubled: Vec<Real> = g.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(b.param(id).unwrap().data(), doubled.as_slice());
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let a = randn(&[4, 3], 21);
    let b = randn(&[4, 3], 22).map(|v| v.abs() + 0.5);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let q = t.div(d, v[1])?;
        let m = t.mul(q, v[0])?;
        let sc = t.scale(m, -1.5);
        let r = t.reshape(sc, &[12])?;
        let c = t.linear_combine(&[r, r])?;
        probe_loss(t, c, 23)
    });
}

#[test]
fn gather_and_mean_match_finite_differences() {
    check(vec![randn(&[6], 31)], |t, v| {
        let g = t.gather(v[0], vec![5, 0, 0, 3, 2], &[5])?;
        let p = probe_loss(t, g, 32)?;
        let m = t.mean(g);
        t.add(p, m)
    });
}

#[test]
fn tensor_conv_matches_finite_differences() {
    for (geom, r, xd, wd) in [
        (ConvGeometry::new(3, 1, 1), 1, vec![2, 2, 5, 5, 2, 2], vec![2, 2, 3, 3, 2, 2]),
        (ConvGeometry::new(3, 2, 0), 2, vec![2, 1, 7, 7, 3, 1], vec![2, 1, 3, 3, 1, 3, 2]),
        (ConvGeometry::new(2, 1, 0), 0, vec![1, 3, 4, 4], vec![2, 3, 2, 2]),
    ] {
        check(vec![randn(&xd, 41), randn(&wd, 42)], |t, v| {
            let y = t.tensor_conv(v[0], v[1], geom, r)?;
            probe_loss(t, y, 43)
        });
    }
}

#[test]
fn subsample_and_bias_match_finite_differences() {
    check(vec![randn(&[2, 3, 7, 7, 2], 51), randn(&[3], 52)], |t, v| {
        let s = t.subsample(v[0], ConvGeometry::DOWNSAMPLE)?;
        let b = t.channel_bias(s, v[1])?;
        probe_loss(t, b, 53)
    });
}

#[test]
fn prelu_matches_finite_differences_away_from_kinks() {
    let report = check(vec![randn(&[3, 2, 4], 61), randn(&[2], 62)], |t, v| {
        let y = t.prelu(v[0], v[1])?;
        probe_loss(t, y, 63)
    });
    assert!(report.params.iter().all(|p| p.checked > 0));
}

#[test]
fn prelu_derivative_at_zero_uses_negative_slope() {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::from_vec(&[1, 1, 3], vec![0.0, 2.0, -1.0]).unwrap());
    let a = tape.param(ParamId(1), Tensor::from_vec(&[1], vec![0.25]).unwrap());
    let y = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0, -0.25]);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap().data(), &[0.25, 1.0, 0.25]);
    assert_eq!(g.param(ParamId(1)).unwrap().data(), &[-1.0]);
}

#[test]
fn kink_inputs_are_excluded_not_failed() {
    // every PReLU input sits exactly on the kink
    let x = Tensor::zeros(&Shape::new([2, 1, 3]).unwrap());
    let names = vec!["x".to_string(), "a".to_string()];
    let params = vec![x, Tensor::from_vec(&[1], vec![0.25]).unwrap()];
    let report = grad_check(&params, &names, &CheckOptions::default(), |t, ps| {
        let v = ParamStore::register(ps, t);
        let y = t.prelu(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert_eq!(report.params[0].excluded, 6);
    assert_eq!(report.params[0].checked, 0);
    assert!(report.passed());
}

#[test]
fn relu_matches_finite_differences() {
    check(vec![randn(&[5, 4], 71)], |t, v| {
        let y = t.relu(v[0]);
        probe_loss(t, y, 72)
    });
}

#[test]
fn batch_norm_train_matches_finite_differences() {
    let x = randn(&[4, 2, 3, 3, 2], 81);
    let gamma = randn(&[2, 2], 82);
    let beta = randn(&[2, 2], 83);
    check(vec![x, gamma, beta], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        probe_loss(t, y, 84)
    });
}

#[test]
fn batch_norm_eval_matches_finite_differences() {
    let x = randn(&[3, 2, 2, 2], 91);
    check(vec![x, randn(&[2], 92), randn(&[2], 93)], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
        probe_loss(t, y, 94)
    });
}

#[test]
fn dense_layout_batch_norm_matches_finite_differences() {
    check(vec![randn(&[5, 3], 95), randn(&[3], 96), randn(&[3], 97)], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        probe_loss(t, y, 98)
    });
}

#[test]
fn batch_norm_rejects_single_sample() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[1, 2, 3, 3], 1), false);
    let g = tape.leaf(Tensor::full(&Shape::new([2]).unwrap(), 1.0), false);
    let b = tape.leaf(Tensor::zeros(&Shape::new([2]).unwrap()), false);
    assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::BatchTooSmall)));
}

#[test]
fn cross_entropy_matches_finite_differences() {
    check(vec![randn(&[4, 5], 101)], |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]));
}

#[test]
fn linear_model_gradcheck_error_is_tiny() {
    let report = check(vec![randn(&[3, 4], 111), randn(&[4, 2], 112)], |t, v| {
        let y = t.contract(v[0], v[1], 1)?;
        Ok(t.sum(y))
    });
    assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
}

#[test]
fn finite_difference_of_quadratic() {
    let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
    let d = finite_difference(&x, 1, 1e-5, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
    assert!((d - -4.0).abs() < 1e-8);
}
