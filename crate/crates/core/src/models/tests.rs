use rand::SeedableRng;

use super::*;
use crate::layers::ConvGeometry;
use crate::tensor::Shape;

fn sides(spec: &ModelSpec) -> Vec<(usize, usize)> {
    spec.trace()
        .unwrap()
        .iter()
        .map(|row| match &row.output {
            Geo::Map { height, channels, .. } => (*height, *channels),
            Geo::Flat(n) => (0, *n),
        })
        .collect()
}

#[test]
fn tcnn_traces_follow_the_structure_tables() {
    let t0 = builtin("tcnn0").unwrap();
    assert_eq!(
        sides(&t0),
        [(15, 1), (15, 1), (7, 1), (7, 1), (3, 1), (3, 1), (1, 10)]
    );
    let rows = t0.trace().unwrap();
    assert_eq!(rows[0].label, "Block#1");
    assert_eq!(rows[6].label, "3x3xWf");
    assert_eq!(rows[0].output.to_string(), "15×15×1 cells 6×6×6×6");
    assert_eq!(rows[6].output.to_string(), "1×1×10");

    let t1 = builtin("tcnn1").unwrap();
    assert_eq!(sides(&t1).last(), Some(&(1, 100)));

    let t2 = builtin("tcnn2").unwrap();
    assert_eq!(
        sides(&t2),
        [(31, 1), (31, 1), (15, 1), (15, 1), (7, 1), (7, 1), (3, 1), (3, 1), (1, 200)]
    );
    match &t2.trace().unwrap()[0].output {
        Geo::Map { cell, .. } => assert_eq!(cell, &[3; 6]),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn audit_matches_instantiated_parameters() {
    for name in builtin_names() {
        let spec = builtin(name).unwrap();
        let audit = audit_params(&spec).unwrap();
        let model = Model::build(&spec, 0).unwrap();
        assert_eq!(audit.total, model.param_count(), "{name}");
        assert_eq!(audit.rows.len(), spec.layers.len());
    }
}

#[test]
fn builtin_totals() {
    let expect = [
        ("tcnn0", 400_482),
        ("tcnn1", 1_450_242),
        ("tcnn2", 1_519_989),
        ("mnist-tcnn-small", 22_688),
        ("mnist-tcnn-47k", 47_082),
        ("mnist-tcnn-171k", 170_688),
        ("mnist-cnn-small", 22_124),
        ("mnist-cnn-1.2m", 1_190_606),
    ];
    for (name, total) in expect {
        assert_eq!(audit_params(&builtin(name).unwrap()).unwrap().total, total, "{name}");
    }
}

#[test]
fn tcnn0_itemized_count() {
    let audit = audit_params(&builtin("tcnn0").unwrap()).unwrap();
    let weights: usize = audit.rows.iter().map(|r| r.weights).sum();
    let bn: usize = audit.rows.iter().map(|r| r.batch_norm).sum();
    let prelu: usize = audit.rows.iter().map(|r| r.prelu).sum();
    // expand layer, 17 interior layers, stem projection, final compression
    let expand = 9 * 3 * 1296;
    let interior = 17 * 9 * 1296;
    let projection = 3 * 1296;
    let last = 10 * 9 * 1296;
    assert_eq!(weights, expand + interior + projection + last);
    assert_eq!(bn, 18 * 2 * 1296);
    assert_eq!(prelu, 18);
    assert_eq!(audit.total, 400_482);
    let delta = audit.delta().unwrap();
    assert!(delta.abs() < 0.10, "delta {delta}");
}

#[test]
fn cifar100_variant_only_grows_the_final_layer() {
    let a = audit_params(&builtin("tcnn0").unwrap()).unwrap().total;
    let b = audit_params(&builtin("tcnn1").unwrap()).unwrap().total;
    assert_eq!(b - a, 90 * 9 * 1296);
}

#[test]
fn counts_stay_near_quoted_totals() {
    for name in ["tcnn0", "tcnn1", "tcnn2", "mnist-tcnn-small", "mnist-tcnn-171k", "mnist-cnn-1.2m"] {
        let audit = audit_params(&builtin(name).unwrap()).unwrap();
        let d = audit.delta().unwrap();
        assert!(d.abs() <= 0.10, "{name}: {d}");
        assert!(audit.render().contains(name));
    }
}

#[test]
fn capsule_weights_shrink_sixteenfold() {
    let c = capsule_arithmetic().unwrap();
    assert_eq!(c.inputs, 1152);
    assert_eq!(c.vector_params, 1_474_560);
    assert_eq!(c.matrix_params, 92_160);
    assert_eq!(c.ratio, 16.0);
    assert_eq!(c.stated_factor, 15.0);
}

#[test]
fn weight_cells_for_each_transition() {
    assert_eq!(weight_for(&[3, 1], &[6; 4]).unwrap(), (vec![1, 3, 6, 6, 6, 6], 2));
    assert_eq!(weight_for(&[6; 4], &[6; 4]).unwrap(), (vec![6; 4], 2));
    assert_eq!(weight_for(&[6; 4], &[]).unwrap(), (vec![6; 4], 4));
    assert_eq!(weight_for(&[1, 1], &[2; 4]).unwrap(), (vec![1, 1, 2, 2, 2, 2], 2));
    assert!(weight_for(&[], &[]).is_ok());
}

fn single_layer_spec() -> ModelSpec {
    ModelSpec {
        name: "one".into(),
        input: InputSpec {
            height: 4,
            width: 4,
            channels: 3,
            cell: vec![3, 1],
        },
        layers: vec![LayerSpec::Compress {
            channels: 5,
            kernel: 4,
        }],
        classes: 5,
        norm_order: NormOrder::default(),
        batch_norm: true,
    }
}

#[test]
fn single_compression_layer_is_a_valid_model() {
    let spec = single_layer_spec();
    let model = Model::build(&spec, 3).unwrap();
    assert_eq!(model.param_count(), 5 * 16 * 3);
    let images = Tensor::full(&Shape::new([2, 3, 4, 4]).unwrap(), 0.5);
    let logits = model.predict(&images).unwrap();
    assert_eq!(logits.dims(), &[2, 5]);
    assert_eq!(logits.data()[..5], logits.data()[5..]);
}

#[test]
fn rgb_cells_gather_channels_per_pixel() {
    // logit = Σ_pixels Σ_channels w · x; a one-hot weight reads one channel
    let spec = single_layer_spec();
    let mut model = Model::build(&spec, 0).unwrap();
    let mut w = Tensor::zeros(model.params()[0].shape());
    // weight [5, 1, 4, 4, 1, 3]: class 0 reads the blue channel at pixel (1, 2)
    let off = w.offset(&[0, 0, 1, 2, 0, 2]).unwrap();
    w.data_mut()[off] = 1.0;
    model.params_mut()[0] = w;
    let mut images = Tensor::zeros(&Shape::new([1, 3, 4, 4]).unwrap());
    let off = images.offset(&[0, 2, 1, 2]).unwrap();
    images.data_mut()[off] = 0.75;
    let logits = model.predict(&images).unwrap();
    assert_eq!(logits.data()[0], 0.75);
}

#[test]
fn incompatible_specs_are_rejected() {
    let mut s = single_layer_spec();
    s.classes = 7;
    assert!(matches!(s.trace(), Err(Error::IncompatibleSpec(_))));

    let mut s = single_layer_spec();
    s.layers = vec![LayerSpec::Compress {
        channels: 5,
        kernel: 3,
    }];
    assert!(matches!(Model::build(&s, 0), Err(Error::IncompatibleSpec(_))));

    let mut s = single_layer_spec();
    s.input.channels = 2;
    assert!(matches!(s.trace(), Err(Error::IncompatibleSpec(_))));

    let mut s = single_layer_spec();
    s.layers.insert(0, LayerSpec::Dense { units: 3 });
    assert!(matches!(s.trace(), Err(Error::IncompatibleSpec(_))));

    // kernel larger than the map
    let mut s = single_layer_spec();
    s.layers.insert(
        0,
        LayerSpec::Conv {
            channels: 1,
            cell: vec![2, 2],
            geometry: ConvGeometry::new(5, 1, 0),
            batch_norm: true,
            activation: true,
        },
    );
    assert!(matches!(s.trace(), Err(Error::IncompatibleSpec(_))));

    assert!(matches!(builtin("resnet50"), Err(Error::IncompatibleSpec(_))));
    assert!(matches!(ModelSpec::from_json("{\"name\": 1}"), Err(Error::IncompatibleSpec(_))));
}

#[test]
fn spec_json_round_trip() {
    for name in builtin_names() {
        let spec = builtin(name).unwrap();
        assert_eq!(ModelSpec::from_json(&spec.to_json()).unwrap(), spec);
    }
}

#[test]
fn build_is_deterministic_in_the_seed() {
    let spec = builtin("mnist-tcnn-small").unwrap();
    let a = Model::build(&spec, 11).unwrap();
    let b = Model::build(&spec, 11).unwrap();
    let c = Model::build(&spec, 12).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn small_models_produce_logits() {
    for name in ["micro-tcnn0", "mnist-tcnn-small", "mnist-cnn-small"] {
        let model = Model::build(&builtin(name).unwrap(), 1).unwrap();
        let [c, h, w] = model.image_dims();
        let images = Tensor::randn(&Shape::new([3, c, h, w]).unwrap(), 0.3, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2))
            .map(|v| (v + 0.5).clamp(0.0, 1.0));
        let logits = model.predict(&images).unwrap();
        assert_eq!(logits.dims(), &[3, 10]);
        assert!(logits.is_finite());
        let wrong = Tensor::zeros(&Shape::new([1, c, h + 1, w]).unwrap());
        assert!(matches!(model.predict(&wrong), Err(Error::ShapeMismatch(_))));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::build(&builtin("mnist-tcnn-small").unwrap(), 5).unwrap();
    for s in model.store_mut().stats_mut() {
        s.mean = s.mean.map(|v| v + 0.125);
        s.var = s.var.map(|v| v * 1.5 + 1e-17);
    }
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.spec(), model.spec());
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.store().stats(), model.store().stats());

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), CHECKPOINT_VERSION);
    assert_eq!(&bytes[6..38], &spec_digest(model.spec()));

    let images = Tensor::full(&Shape::new([2, 1, 28, 28]).unwrap(), 0.3);
    assert_eq!(loaded.predict(&images).unwrap(), model.predict(&images).unwrap());
}

#[test]
fn damaged_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::build(&builtin("mnist-cnn-small").unwrap(), 0).unwrap();
    save_model(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let write = |b: &[u8]| {
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b).unwrap();
        load_model(&p)
    };
    for cut in [2, 10, 100, bytes.len() - 1] {
        assert!(matches!(write(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(write(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[10] ^= 1;
    assert!(matches!(write(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(write(&bad), Err(Error::Format(_))));
}
