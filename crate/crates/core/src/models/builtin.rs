//! Builtin architectures.

use super::{InputSpec, LayerSpec, ModelSpec};
use crate::layers::{BlockKind, ConvGeometry, NormOrder};
use crate::{Error, Result};

const RGB_CELL: [usize; 2] = [3, 1];

/// Residual tensor network for square RGB images: `blocks` Block#1 units,
/// every second one (starting with the first) halving the map, then a final
/// compression to `classes` logits.
pub fn tcnn_spec(name: &str, side: usize, blocks: usize, cell: &[usize], classes: usize) -> ModelSpec {
    let mut layers: Vec<LayerSpec> = (0..blocks)
        .map(|i| LayerSpec::Block {
            kind: BlockKind::Block1,
            channels: 1,
            cell: cell.to_vec(),
            downsample: i % 2 == 0,
        })
        .collect();
    let mut s = side;
    for _ in (0..blocks).step_by(2) {
        s = (s - 3) / 2 + 1;
    }
    layers.push(LayerSpec::Compress {
        channels: classes,
        kernel: s,
    });
    ModelSpec {
        name: name.into(),
        input: InputSpec {
            height: side,
            width: side,
            channels: 3,
            cell: RGB_CELL.to_vec(),
        },
        layers,
        classes,
        norm_order: NormOrder::default(),
        batch_norm: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistKind {
    Tcnn,
    Cnn,
}

/// Four-layer tensor network for 28×28 grayscale digits: three tensor
/// convolutions with `channels` maps and cells `[e, e, e, e]`, then a 4×4
/// compression to 10 logits.
pub fn mnist_tcnn(name: &str, extent: usize, channels: [usize; 3]) -> ModelSpec {
    let cell = vec![extent; 4];
    let conv = |ch: usize, geometry: ConvGeometry| LayerSpec::Conv {
        channels: ch,
        cell: cell.clone(),
        geometry,
        batch_norm: true,
        activation: true,
    };
    ModelSpec {
        name: name.into(),
        input: InputSpec {
            height: 28,
            width: 28,
            channels: 1,
            cell: vec![1, 1],
        },
        layers: vec![
            conv(channels[0], ConvGeometry::DOWNSAMPLE),
            conv(channels[1], ConvGeometry::DOWNSAMPLE),
            conv(channels[2], ConvGeometry::new(3, 1, 0)),
            LayerSpec::Compress {
                channels: 10,
                kernel: 4,
            },
        ],
        classes: 10,
        norm_order: NormOrder::default(),
        batch_norm: true,
    }
}

/// Two 5×5 stride-2 convolutions and two dense layers.
pub fn mnist_cnn(name: &str, maps: [usize; 2], hidden: usize) -> ModelSpec {
    let g = ConvGeometry::new(5, 2, 0);
    ModelSpec {
        name: name.into(),
        input: InputSpec {
            height: 28,
            width: 28,
            channels: 1,
            cell: vec![],
        },
        layers: vec![
            LayerSpec::Conv2d {
                channels: maps[0],
                geometry: g,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                channels: maps[1],
                geometry: g,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 10 },
        ],
        classes: 10,
        norm_order: NormOrder::default(),
        batch_norm: false,
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &[
        "tcnn0",
        "tcnn1",
        "tcnn2",
        "micro-tcnn0",
        "mnist-tcnn-small",
        "mnist-tcnn-47k",
        "mnist-tcnn-171k",
        "mnist-cnn-small",
        "mnist-cnn-1.2m",
    ]
}

pub fn builtin(name: &str) -> Result<ModelSpec> {
    Ok(match name {
        "tcnn0" => tcnn_spec("tcnn0", 32, 6, &[6; 4], 10),
        "tcnn1" => tcnn_spec("tcnn1", 32, 6, &[6; 4], 100),
        "tcnn2" => tcnn_spec("tcnn2", 64, 8, &[3; 6], 200),
        "micro-tcnn0" => tcnn_spec("micro-tcnn0", 8, 1, &[2; 4], 10),
        "mnist-tcnn-small" => mnist_tcnn(name, 2, [5, 6, 5]),
        "mnist-tcnn-47k" => mnist_tcnn(name, 2, [8, 9, 9]),
        "mnist-tcnn-171k" => mnist_tcnn(name, 3, [7, 7, 7]),
        "mnist-cnn-small" => mnist_cnn(name, [8, 16], 70),
        "mnist-cnn-1.2m" => mnist_cnn(name, [32, 64], 1100),
        other => {
            return Err(Error::IncompatibleSpec(format!(
                "unknown builtin model '{other}'; known: {}",
                builtin_names().join(", ")
            )))
        }
    })
}

/// Parameter counts quoted in the paper's tables.
pub fn paper_param_count(name: &str) -> Option<f64> {
    match name {
        "tcnn0" => Some(0.39e6),
        "tcnn1" => Some(1.4e6),
        "tcnn2" => Some(1.48e6),
        "mnist-tcnn-small" => Some(22.2e3),
        "mnist-tcnn-171k" => Some(171e3),
        "mnist-cnn-1.2m" => Some(1.2e6),
        _ => None,
    }
}
