use super::*;
use crate::autodiff::{finite_difference, relative_error};
use crate::data::{make_synthetic, SyntheticConfig};
use crate::layers::{ConvGeometry, NormOrder};
use crate::models::{InputSpec, LayerSpec, ModelSpec};
use crate::Shape;

fn spec(name: &str, classes: usize, activation: bool) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        input: InputSpec {
            height: 6,
            width: 6,
            channels: 1,
            cell: vec![1, 1],
        },
        layers: vec![
            LayerSpec::Conv {
                channels: 2,
                cell: vec![2, 2],
                geometry: ConvGeometry::DOWNSAMPLE,
                batch_norm: true,
                activation,
            },
            LayerSpec::Compress {
                channels: classes,
                kernel: 2,
            },
        ],
        classes,
        norm_order: NormOrder::default(),
        batch_norm: true,
    }
}

fn data(n: usize) -> LabeledImageSet {
    make_synthetic(&SyntheticConfig {
        per_class: n,
        height: 6,
        width: 6,
        sigma: 0.3,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_epsilon_is_the_identity() {
    let set = data(4);
    let model = Model::build(&spec("m", 2, true), 0).unwrap();
    assert_eq!(&fgsm(&model, set.images(), set.labels(), 0.0).unwrap(), set.images());
    assert!(fgsm(&model, set.images(), set.labels(), -0.1).is_err());
}

#[test]
fn perturbation_respects_the_ball_and_the_box() {
    let set = data(10);
    let model = Model::build(&spec("m", 2, true), 1).unwrap();
    let g = input_gradient(&model, set.images(), set.labels()).unwrap();
    for eps in [0.01, 0.1, 0.3, 1.0] {
        let adv = perturb(set.images(), &g, eps).unwrap();
        for ((&y, &x), &gi) in adv.data().iter().zip(set.images().data()).zip(g.data()) {
            assert!((y - x).abs() <= eps);
            assert!((0.0..=1.0).contains(&y));
            if gi == 0.0 {
                assert_eq!(y, x);
            } else if gi > 0.0 {
                assert!(y >= x);
            } else {
                assert!(y <= x);
            }
        }
    }
}

#[test]
fn rounding_never_leaves_the_ball() {
    let x = Tensor::from_vec(&[4], vec![0.1, 0.7, 0.3333333333333333, 0.9]).unwrap();
    let g = Tensor::from_vec(&[4], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
    for eps in [0.2, 0.1, 1e-9, 0.30000000000000004] {
        let y = perturb(&x, &g, eps).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps, "{a} {b} {eps}");
        }
    }
    assert_eq!(perturb(&x, &g, 0.5).unwrap().data()[3], 1.0);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let set = data(3);
    let model = Model::build(&spec("m", 2, false), 2).unwrap();
    let g = input_gradient(&model, set.images(), set.labels()).unwrap();
    let loss = |x: &Tensor| -> Result<Real> {
        let logits = model.predict(x)?;
        let mut tape = Tape::new();
        let l = tape.leaf(logits, false);
        let ce = cross_entropy(&mut tape, l, set.labels())?;
        Ok(tape.value(ce).item())
    };
    for i in (0..set.images().len()).step_by(7) {
        let fd = finite_difference(set.images(), i, 1e-5, loss).unwrap();
        let err = relative_error(g.data()[i], fd);
        assert!(err < 1e-4 || (g.data()[i] - fd).abs() < 1e-9, "coordinate {i}: {} vs {fd}", g.data()[i]);
    }
}

#[test]
fn attack_does_not_help_the_model() {
    let set = data(30);
    let model = Model::build(&spec("m", 2, true), 3).unwrap();
    let cfg = AttackConfig {
        epsilons: vec![0.0, 0.1, 0.3],
        batch_size: 17,
    };
    let curve = sweep(&model, &set, &cfg).unwrap();
    assert_eq!(curve.points.len(), 3);
    assert_eq!(curve.source, None);
    let clean = evaluate_accuracy(&model, &set);
    assert_eq!(curve.accuracy_at(0.0), Some(clean));
    let at = |e| curve.accuracy_at(e).unwrap();
    assert!(at(0.3) <= clean);
    assert!(curve.to_csv().starts_with("epsilon,accuracy\n0.0,"));
}

fn evaluate_accuracy(model: &Model, set: &LabeledImageSet) -> Real {
    let logits = model.predict(set.images()).unwrap();
    count_correct(&logits, set.labels()) as Real / set.len() as Real
}

#[test]
fn transfer_uses_source_gradients() {
    let set = data(12);
    let source = Model::build(&spec("src", 2, true), 4).unwrap();
    let target = Model::build(&spec("dst", 2, true), 5).unwrap();
    let cfg = AttackConfig {
        epsilons: vec![0.0, 0.2],
        batch_size: 8,
    };
    let curve = transfer_attack(&source, &target, &set, &cfg).unwrap();
    assert_eq!(curve.source.as_deref(), Some("src"));
    assert_eq!(curve.model, "dst");
    // oracle: perturb with the source gradient, score the target
    let g = input_gradient(&source, set.images(), set.labels()).unwrap();
    let adv = perturb(set.images(), &g, 0.2).unwrap();
    let logits = target.predict(&adv).unwrap();
    let expect = count_correct(&logits, set.labels()) as Real / set.len() as Real;
    // batch statistics are frozen in eval mode, so batching does not matter
    let got = curve.accuracy_at(0.2).unwrap();
    assert!((got - expect).abs() <= 1.0 / set.len() as Real, "{got} vs {expect}");

    let same = transfer_attack(&source, &source, &set, &cfg).unwrap();
    assert_eq!(same.points, sweep(&source, &set, &cfg).unwrap().points);
}

#[test]
fn mismatched_classes_are_refused() {
    let set = data(2);
    let two = Model::build(&spec("a", 2, true), 0).unwrap();
    let three = Model::build(&spec("b", 3, true), 0).unwrap();
    let cfg = AttackConfig::default();
    assert!(matches!(
        transfer_attack(&two, &three, &set, &cfg),
        Err(Error::ClassCountMismatch { source_classes: 2, target_classes: 3 })
    ));
    assert!(matches!(sweep(&three, &set, &cfg), Err(Error::ClassCountMismatch { .. })));
}

#[test]
fn epsilon_grid_validation() {
    assert!(AttackConfig::default().validate().is_ok());
    for eps in [vec![], vec![0.2, 0.1], vec![-0.1], vec![1.5]] {
        let cfg = AttackConfig {
            epsilons: eps,
            batch_size: 10,
        };
        assert!(cfg.validate().is_err());
    }
    let shape = Shape::new([2]).unwrap();
    assert!(perturb(&Tensor::zeros(&shape), &Tensor::zeros(&Shape::new([3]).unwrap()), 0.1).is_err());
}

#[test]
fn recomputed_attack_is_bitwise_identical() {
    let set = data(5);
    let model = Model::build(&spec("m", 2, true), 6).unwrap();
    let a = fgsm(&model, set.images(), set.labels(), 0.15).unwrap();
    let b = fgsm(&model, set.images(), set.labels(), 0.15).unwrap();
    assert_eq!(a, b);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn perturb_stays_in_ball_and_box(
            xs in proptest::collection::vec(0.0..=1.0f64, 1..40),
            gs in proptest::collection::vec(-1.0..1.0f64, 40),
            eps in 0.0..=1.0f64,
        ) {
            let n = xs.len();
            let x = Tensor::from_vec(&[n], xs.iter().map(|&v| v as Real).collect()).unwrap();
            let g = Tensor::from_vec(&[n], gs[..n].iter().map(|&v| v as Real).collect()).unwrap();
            let eps = eps as Real;
            let y = perturb(&x, &g, eps).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= eps);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }
}
