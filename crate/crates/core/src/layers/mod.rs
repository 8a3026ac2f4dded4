//! Layers built from tape primitives: tensor convolution, PReLU, batch
//! normalization, residual blocks, and the scalar conv / dense layers used by
//! the CNN baselines.
//!
//! Layers do not own their tensors. Each one holds indices into a
//! [`ParamStore`], and a forward pass receives the store's tensors already
//! registered on a tape (see [`Pass`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::tensor::{Shape, TensorTransformSpec, TransformMode};
use crate::{Error, Real, Result, Tensor};

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;
pub const PRELU_INIT: Real = 0.25;

/// Spatial window geometry shared by convolutions and subsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Halving layer: 32 → 15, 15 → 7, 7 → 3.
    pub const DOWNSAMPLE: ConvGeometry = ConvGeometry::new(3, 2, 0);
    /// Shape-preserving layer.
    pub const SAME: ConvGeometry = ConvGeometry::new(3, 1, 1);

    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad,
        }
    }

    /// `floor((extent + 2p - k) / s) + 1`.
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::BadGeometry(format!(
                "kernel {} and stride {} must be positive",
                self.kernel, self.stride
            )));
        }
        let padded = extent + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::BadGeometry(format!(
                "kernel {} does not fit extent {extent} with padding {}",
                self.kernel, self.pad
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Offset of the first window centre in unpadded coordinates.
    pub fn centre_offset(&self) -> Result<usize> {
        let half = self.kernel / 2;
        if self.pad > half {
            return Err(Error::BadGeometry(format!(
                "padding {} puts window centres outside the map",
                self.pad
            )));
        }
        Ok(half - self.pad)
    }
}

/// A batch of feature maps: `[N, C, H, W] ⧺ cell_shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() < 4 {
            return Err(Error::ShapeMismatch(format!(
                "feature maps are [N, C, H, W, cell..], got {}",
                values.shape()
            )));
        }
        Ok(FeatureMap { values })
    }

    /// Wrap `[N, C, H, W]` images as maps whose cells have `cell` shape.
    pub fn from_images(images: &Tensor, cell: &[usize]) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "images are [N, C, H, W], got {}",
                images.shape()
            )));
        }
        let cell_len: usize = cell.iter().product();
        if !d[1].is_multiple_of(cell_len) {
            return Err(Error::ShapeMismatch(format!(
                "{} image channels cannot fill cells of shape {cell:?}",
                d[1]
            )));
        }
        // channel-major images become pixel-major cells
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let m = c / cell_len;
        let mut out = vec![0.0; images.len()];
        let src = images.data();
        for b in 0..n {
            for ch in 0..c {
                let (mi, ci) = (ch / cell_len, ch % cell_len);
                for p in 0..h * w {
                    out[((b * m + mi) * h * w + p) * cell_len + ci] = src[(b * c + ch) * h * w + p];
                }
            }
        }
        let mut dims = vec![n, m, h, w];
        dims.extend_from_slice(cell);
        FeatureMap::new(Tensor::from_vec(&dims, out)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[3]
    }

    pub fn cell_shape(&self) -> &[usize] {
        &self.values.dims()[4..]
    }
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Parameters and buffers of a model, in construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.tensors.push(value);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn push_stats(&mut self, name: impl Into<String>, shape: &Shape) -> usize {
        self.stats.push(RunningStats {
            mean: Tensor::zeros(shape),
            var: Tensor::full(shape, 1.0),
        });
        self.stat_names.push(name.into());
        self.stats.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    /// Total trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter on `tape` as `ParamId(index)`.
    pub fn register(tensors: &[Tensor], tape: &mut Tape) -> Vec<Var> {
        tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics, nothing updated.
    Eval,
}

/// State threaded through one forward pass.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    pub stats: &'a mut [RunningStats],
    pub phase: Phase,
}

/// Where normalization sits relative to the activation inside a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// conv → BatchNorm → PReLU
    #[default]
    BnThenPrelu,
    /// conv → PReLU → BatchNorm
    PreluThenBn,
}

/// Windowed tensor convolution without bias.
#[derive(Clone, Debug)]
pub struct TensorConvLayer {
    pub geom: ConvGeometry,
    pub contract_count: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_cell: Vec<usize>,
    pub weight_dims: Vec<usize>,
    weight: usize,
}

impl TensorConvLayer {
    /// Weight shape `[out, in, k, k] ⧺ weight_cell`.
    pub fn weight_dims(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        weight_cell: &[usize],
    ) -> Vec<usize> {
        let mut dims = vec![out_channels, in_channels, geom.kernel, geom.kernel];
        dims.extend_from_slice(weight_cell);
        dims
    }

    /// Kaiming-normal initialization with fan-in = contracted cell elements
    /// × k² × input channels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        in_cell: &[usize],
        weight_cell: &[usize],
        geom: ConvGeometry,
        r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if r > in_cell.len().min(weight_cell.len()) {
            return Err(Error::Rank(format!(
                "cannot contract {r} axes of cells {in_cell:?} and {weight_cell:?}"
            )));
        }
        let contracted: usize = in_cell[in_cell.len() - r..].iter().product();
        let fan_in = contracted * geom.kernel * geom.kernel * in_channels;
        let dims = Self::weight_dims(in_channels, out_channels, geom, weight_cell);
        let std = (2.0 / fan_in as Real).sqrt();
        let w = Tensor::randn(&Shape::new(dims.clone())?, std, rng);
        let weight = store.push(format!("{name}.weight"), w);
        Ok(TensorConvLayer {
            geom,
            contract_count: r,
            in_channels,
            out_channels,
            in_cell: in_cell.to_vec(),
            weight_dims: dims,
            weight,
        })
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn weight_cell(&self) -> &[usize] {
        &self.weight_dims[4..]
    }

    pub fn out_cell(&self) -> Vec<usize> {
        let keep = self.in_cell.len() - self.contract_count;
        let mut cell = self.in_cell[..keep].to_vec();
        cell.extend_from_slice(&self.weight_cell()[self.contract_count..]);
        cell
    }

    /// Rank mode of the per-cell transform, if it is a genuine contraction.
    pub fn mode(&self) -> Option<TransformMode> {
        TensorTransformSpec::new(self.in_cell.len(), self.weight_cell().len(), self.contract_count)
            .ok()
            .map(|s| s.mode())
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        pass.tape
            .tensor_conv(x, pass.params[self.weight], self.geom, self.contract_count)
    }
}

#[derive(Clone, Debug)]
pub struct PReLULayer {
    slope: usize,
}

impl PReLULayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let slope = store.push(
            format!("{name}.slope"),
            Tensor::full(&Shape::new([channels])?, PRELU_INIT),
        );
        Ok(PReLULayer { slope })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        pass.tape.prelu(x, pass.params[self.slope])
    }
}

/// Normalization per (channel, cell component) over batch and space.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
    pub eps: Real,
    pub momentum: Real,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cell: &[usize]) -> Result<Self> {
        let mut dims = vec![channels];
        dims.extend_from_slice(cell);
        let shape = Shape::new(dims)?;
        let gamma = store.push(format!("{name}.gamma"), Tensor::full(&shape, 1.0));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(&shape));
        let stats = store.push_stats(name, &shape);
        Ok(BatchNormLayer {
            gamma,
            beta,
            stats,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (pass.params[self.gamma], pass.params[self.beta]);
        match pass.phase {
            Phase::Train => {
                let (y, batch) = pass.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let running = &mut pass.stats[self.stats];
                // running variance tracks the unbiased estimate
                let correction = batch.count as Real / (batch.count as Real - 1.0).max(1.0);
                let m = self.momentum;
                for (r, b) in running.mean.data_mut().iter_mut().zip(&batch.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in running.var.data_mut().iter_mut().zip(&batch.var) {
                    *r = (1.0 - m) * *r + m * b * correction;
                }
                Ok(y)
            }
            Phase::Eval => {
                let running = &pass.stats[self.stats];
                let (mean, var) = (running.mean.data().to_vec(), running.var.data().to_vec());
                pass.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

/// One table "layer": a tensor convolution with optional normalization and
/// activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: TensorConvLayer,
    pub norm: Option<BatchNormLayer>,
    pub act: Option<PReLULayer>,
    pub order: NormOrder,
}

impl ConvUnit {
    /// Convolution followed by optional BatchNorm and PReLU in `order`.
    #[allow(clippy::too_many_arguments)]
    pub fn full<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        in_cell: &[usize],
        weight_cell: &[usize],
        geom: ConvGeometry,
        r: usize,
        order: NormOrder,
        batch_norm: bool,
        activation: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = TensorConvLayer::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            in_cell,
            weight_cell,
            geom,
            r,
            rng,
        )?;
        let out_cell = conv.out_cell();
        let norm = if batch_norm {
            Some(BatchNormLayer::new(store, &format!("{name}.bn"), out_channels, &out_cell)?)
        } else {
            None
        };
        let act = if activation {
            Some(PReLULayer::new(store, &format!("{name}.prelu"), out_channels)?)
        } else {
            None
        };
        Ok(ConvUnit {
            conv,
            norm,
            act,
            order,
        })
    }

    pub fn bare(conv: TensorConvLayer) -> Self {
        ConvUnit {
            conv,
            norm: None,
            act: None,
            order: NormOrder::default(),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(pass, x)?;
        match self.order {
            NormOrder::BnThenPrelu => {
                if let Some(bn) = &self.norm {
                    h = bn.forward(pass, h)?;
                }
                if let Some(act) = &self.act {
                    h = act.forward(pass, h)?;
                }
            }
            NormOrder::PreluThenBn => {
                if let Some(act) = &self.act {
                    h = act.forward(pass, h)?;
                }
                if let Some(bn) = &self.norm {
                    h = bn.forward(pass, h)?;
                }
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Three layers between the skip endpoints.
    Block1,
    /// Four layers between the skip endpoints.
    Block2,
}

impl BlockKind {
    pub fn depth(self) -> usize {
        match self {
            BlockKind::Block1 => 3,
            BlockKind::Block2 => 4,
        }
    }
}

/// Skip path of a residual block.
#[derive(Clone, Debug)]
pub enum Skip {
    Identity,
    /// Window-centre subsample matching a strided first layer.
    Subsample(ConvGeometry),
    /// Subsample, then a learned 1×1 tensor projection (changes cell shape).
    Project {
        geom: ConvGeometry,
        proj: TensorConvLayer,
    },
}

impl Skip {
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        match self {
            Skip::Identity => Ok(x),
            Skip::Subsample(g) => subsample_if_needed(pass.tape, x, *g),
            Skip::Project { geom, proj } => {
                let s = subsample_if_needed(pass.tape, x, *geom)?;
                proj.forward(pass, s)
            }
        }
    }
}

fn subsample_if_needed(tape: &mut Tape, x: Var, g: ConvGeometry) -> Result<Var> {
    if g.stride == 1 && g.centre_offset()? == 0 {
        Ok(x)
    } else {
        tape.subsample(x, g)
    }
}

/// Residual block: `skip(x) + chain(x)`, no activation after the sum.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    pub units: Vec<ConvUnit>,
    pub skip: Skip,
}

/// Shape-level description of a block, used by builders and audits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub channels: usize,
    pub in_cell: Vec<usize>,
    /// Weight cell of the first layer; later layers map `cell` to itself.
    pub first_weight_cell: Vec<usize>,
    pub first_r: usize,
    pub cell: Vec<usize>,
    pub downsample: bool,
}

impl BlockPlan {
    /// Weight cell and contraction count of a shape-preserving interior layer.
    pub fn interior_weight(cell: &[usize]) -> (Vec<usize>, usize) {
        // contracting the trailing half maps [a, b, c, d] to itself with a
        // [d, c, c, d]-style weight; scalar cells use plain rank-0 weights
        let r = cell.len() / 2;
        let mut w: Vec<usize> = cell[cell.len() - r..].iter().rev().copied().collect();
        w.extend_from_slice(&cell[cell.len() - r..]);
        (w, r)
    }

    pub fn first_geometry(&self) -> ConvGeometry {
        if self.downsample {
            ConvGeometry::DOWNSAMPLE
        } else {
            ConvGeometry::SAME
        }
    }

    pub fn projects(&self) -> bool {
        self.in_cell != self.cell || self.in_channels != self.channels
    }
}

impl ResidualBlock {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        plan: &BlockPlan,
        order: NormOrder,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(plan.kind.depth());
        let (inner_w, inner_r) = BlockPlan::interior_weight(&plan.cell);
        for i in 0..plan.kind.depth() {
            let (in_ch, in_cell, w_cell, r, geom) = if i == 0 {
                (
                    plan.in_channels,
                    plan.in_cell.as_slice(),
                    plan.first_weight_cell.as_slice(),
                    plan.first_r,
                    plan.first_geometry(),
                )
            } else {
                (plan.channels, plan.cell.as_slice(), inner_w.as_slice(), inner_r, ConvGeometry::SAME)
            };
            let unit = ConvUnit::full(
                store,
                &format!("{name}.l{i}"),
                in_ch,
                plan.channels,
                in_cell,
                w_cell,
                geom,
                r,
                order,
                batch_norm,
                true,
                rng,
            )?;
            if unit.conv.out_cell() != plan.cell {
                return Err(Error::IncompatibleSpec(format!(
                    "{name}.l{i} produces cells {:?}, block expects {:?}",
                    unit.conv.out_cell(),
                    plan.cell
                )));
            }
            units.push(unit);
        }
        let skip = if plan.projects() {
            let proj = TensorConvLayer::new(
                store,
                &format!("{name}.skip"),
                plan.in_channels,
                plan.channels,
                &plan.in_cell,
                &plan.first_weight_cell,
                ConvGeometry::new(1, 1, 0),
                plan.first_r,
                rng,
            )?;
            Skip::Project {
                geom: plan.first_geometry(),
                proj,
            }
        } else if plan.downsample {
            Skip::Subsample(plan.first_geometry())
        } else {
            Skip::Identity
        };
        Ok(ResidualBlock {
            kind: plan.kind,
            units,
            skip,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for unit in &self.units {
            h = unit.forward(pass, h)?;
        }
        let s = self.skip.forward(pass, x)?;
        pass.tape.add(h, s)
    }
}

/// Scalar 2-D convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub conv: TensorConvLayer,
    bias: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = TensorConvLayer::new(store, name, in_channels, out_channels, &[], &[], geom, 0, rng)?;
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&Shape::new([out_channels])?));
        Ok(Conv2d { conv, bias })
    }

    /// `x` is `[N, C, H, W]`.
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(pass, x)?;
        pass.tape.channel_bias(y, pass.params[self.bias])
    }
}

/// Fully connected layer: `[N, in] → [N, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    weight: usize,
    bias: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / in_features as Real).sqrt();
        let w = Tensor::randn(&Shape::new([in_features, out_features])?, std, rng);
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&Shape::new([out_features])?));
        Ok(Dense {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let y = pass.tape.contract(x, pass.params[self.weight], 1)?;
        pass.tape.channel_bias(y, pass.params[self.bias])
    }
}
