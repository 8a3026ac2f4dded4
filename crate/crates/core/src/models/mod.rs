//! Declarative model specs, builtin architectures, parameter audits and
//! checkpoints.

mod audit;
mod builtin;
mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audit::{audit_params, capsule_arithmetic, AuditRow, CapsuleArithmetic, ParamAudit};
pub use builtin::{builtin, builtin_names, mnist_cnn, mnist_tcnn, paper_param_count, tcnn_spec, MnistKind};
pub use checkpoint::{load_model, save_model, spec_digest, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Tape, Var};
use crate::layers::{
    BlockKind, BlockPlan, Conv2d, ConvGeometry, ConvUnit, Dense, NormOrder, ParamStore, Pass, Phase,
    ResidualBlock, RunningStats, TensorConvLayer,
};
use crate::{Error, Result, Tensor};

fn default_true() -> bool {
    true
}

/// Image geometry and the cell shape pixels are packed into.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    /// Image channels (3 for RGB, 1 for grayscale).
    pub channels: usize,
    /// Cell shape of the input map; its element count must divide `channels`.
    /// `[3, 1]` for RGB tensor models, `[1, 1]` for grayscale ones, `[]` for CNNs.
    #[serde(default)]
    pub cell: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Residual block; the first layer strides by 2 when `downsample`.
    Block {
        kind: BlockKind,
        channels: usize,
        cell: Vec<usize>,
        #[serde(default)]
        downsample: bool,
    },
    /// Plain tensor convolution followed by optional BatchNorm and PReLU.
    Conv {
        channels: usize,
        cell: Vec<usize>,
        geometry: ConvGeometry,
        #[serde(default = "default_true")]
        batch_norm: bool,
        #[serde(default = "default_true")]
        activation: bool,
    },
    /// Final layer: contracts every cell axis, producing scalar logits.
    Compress { channels: usize, kernel: usize },
    Conv2d { channels: usize, geometry: ConvGeometry },
    Relu,
    Flatten,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn label(&self) -> String {
        match self {
            LayerSpec::Block { kind, .. } => match kind {
                BlockKind::Block1 => "Block#1".into(),
                BlockKind::Block2 => "Block#2".into(),
            },
            LayerSpec::Conv { geometry, .. } => format!("conv{}x{}", geometry.kernel, geometry.kernel),
            LayerSpec::Compress { kernel, .. } => format!("{kernel}x{kernel}xWf"),
            LayerSpec::Conv2d { geometry, .. } => format!("conv2d{}x{}", geometry.kernel, geometry.kernel),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { .. } => "dense".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    #[serde(default)]
    pub norm_order: NormOrder,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::IncompatibleSpec(format!("spec JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Per-layer output shapes, computed without instantiating weights.
    pub fn trace(&self) -> Result<Vec<TraceRow>> {
        let mut geo = Geo::input(&self.input)?;
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            geo = geo.after(layer).map_err(|e| {
                Error::IncompatibleSpec(format!("layer {i} ({}) after {geo}: {e}", layer.label()))
            })?;
            rows.push(TraceRow {
                index: i,
                label: layer.label(),
                output: geo.clone(),
            });
        }
        match &geo {
            Geo::Flat(n) | Geo::Map { channels: n, height: 1, width: 1, .. } if *n == self.classes => {}
            _ => {
                return Err(Error::IncompatibleSpec(format!(
                    "final output {geo} does not yield {} class logits",
                    self.classes
                )))
            }
        }
        if let Geo::Map { cell, .. } = &geo {
            if !cell.is_empty() {
                return Err(Error::IncompatibleSpec(format!(
                    "final cells {cell:?} are not scalars"
                )));
            }
        }
        Ok(rows)
    }
}

/// Shape of the activation between two layers (batch axis omitted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Geo {
    Map {
        channels: usize,
        height: usize,
        width: usize,
        cell: Vec<usize>,
    },
    Flat(usize),
}

impl fmt::Display for Geo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geo::Map {
                channels,
                height,
                width,
                cell,
            } => {
                write!(f, "{height}×{width}×{channels}")?;
                if !cell.is_empty() {
                    let c: Vec<String> = cell.iter().map(|d| d.to_string()).collect();
                    write!(f, " cells {}", c.join("×"))?;
                }
                Ok(())
            }
            Geo::Flat(n) => write!(f, "{n}"),
        }
    }
}

impl Geo {
    fn input(input: &InputSpec) -> Result<Self> {
        let cell_len: usize = input.cell.iter().product();
        if input.height == 0 || input.width == 0 || input.channels == 0 || cell_len == 0 {
            return Err(Error::IncompatibleSpec("empty input geometry".into()));
        }
        if !input.channels.is_multiple_of(cell_len) {
            return Err(Error::IncompatibleSpec(format!(
                "{} image channels cannot fill cells {:?}",
                input.channels, input.cell
            )));
        }
        Ok(Geo::Map {
            channels: input.channels / cell_len,
            height: input.height,
            width: input.width,
            cell: input.cell.clone(),
        })
    }

    fn map(&self) -> Result<(usize, usize, usize, &[usize])> {
        match self {
            Geo::Map {
                channels,
                height,
                width,
                cell,
            } => Ok((*channels, *height, *width, cell)),
            Geo::Flat(_) => Err(Error::IncompatibleSpec("spatial layer after flatten".into())),
        }
    }

    fn after(&self, layer: &LayerSpec) -> Result<Geo> {
        match layer {
            LayerSpec::Block {
                channels,
                cell,
                downsample,
                ..
            } => {
                let (_, h, w, in_cell) = self.map()?;
                weight_for(in_cell, cell)?;
                let g = if *downsample {
                    ConvGeometry::DOWNSAMPLE
                } else {
                    ConvGeometry::SAME
                };
                Ok(Geo::Map {
                    channels: *channels,
                    height: g.output_extent(h)?,
                    width: g.output_extent(w)?,
                    cell: cell.clone(),
                })
            }
            LayerSpec::Conv {
                channels,
                cell,
                geometry,
                ..
            } => {
                let (_, h, w, in_cell) = self.map()?;
                weight_for(in_cell, cell)?;
                Ok(Geo::Map {
                    channels: *channels,
                    height: geometry.output_extent(h)?,
                    width: geometry.output_extent(w)?,
                    cell: cell.clone(),
                })
            }
            LayerSpec::Compress { channels, kernel } => {
                let (_, h, w, _) = self.map()?;
                let g = ConvGeometry::new(*kernel, 1, 0);
                Ok(Geo::Map {
                    channels: *channels,
                    height: g.output_extent(h)?,
                    width: g.output_extent(w)?,
                    cell: vec![],
                })
            }
            LayerSpec::Conv2d { channels, geometry } => {
                let (_, h, w, cell) = self.map()?;
                if !cell.is_empty() {
                    return Err(Error::IncompatibleSpec(format!(
                        "scalar convolution on tensor cells {cell:?}"
                    )));
                }
                Ok(Geo::Map {
                    channels: *channels,
                    height: geometry.output_extent(h)?,
                    width: geometry.output_extent(w)?,
                    cell: vec![],
                })
            }
            LayerSpec::Relu => Ok(self.clone()),
            LayerSpec::Flatten => Ok(Geo::Flat(self.features())),
            LayerSpec::Dense { units } => match self {
                Geo::Flat(_) => Ok(Geo::Flat(*units)),
                Geo::Map { .. } => Err(Error::IncompatibleSpec("dense layer before flatten".into())),
            },
        }
    }

    pub fn features(&self) -> usize {
        match self {
            Geo::Map {
                channels,
                height,
                width,
                cell,
            } => channels * height * width * cell.iter().product::<usize>(),
            Geo::Flat(n) => *n,
        }
    }
}

/// Weight cell and contraction count mapping `in_cell` to `out_cell`:
/// equal cells use the interior half contraction, scalar output contracts
/// everything, anything else expands through the reversed input cell.
pub fn weight_for(in_cell: &[usize], out_cell: &[usize]) -> Result<(Vec<usize>, usize)> {
    if in_cell == out_cell {
        return Ok(BlockPlan::interior_weight(in_cell));
    }
    let mut w: Vec<usize> = in_cell.iter().rev().copied().collect();
    w.extend_from_slice(out_cell);
    if w.is_empty() {
        return Err(Error::IncompatibleSpec("empty weight cell".into()));
    }
    Ok((w, in_cell.len()))
}

/// One row of a shape trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub index: usize,
    pub label: String,
    pub output: Geo,
}

#[derive(Clone, Debug)]
enum Stage {
    Block(ResidualBlock),
    Unit(ConvUnit),
    Conv2d(Conv2d),
    Relu,
    Flatten,
    Dense(Dense),
}

/// An instantiated model: spec, parameters, running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    stages: Vec<Stage>,
    /// Pixel gather turning `[N, C, H, W]` images into input cells, per image.
    cell_index: Option<Vec<usize>>,
}

impl Model {
    /// Validate `spec` and initialize parameters from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let trace = spec.trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(spec.layers.len());
        let mut geo = Geo::input(&spec.input)?;
        for (i, layer) in spec.layers.iter().enumerate() {
            let name = format!("layer{i}");
            let stage = match layer {
                LayerSpec::Block {
                    kind,
                    channels,
                    cell,
                    downsample,
                } => {
                    let (in_ch, _, _, in_cell) = geo.map()?;
                    let (first_weight_cell, first_r) = weight_for(in_cell, cell)?;
                    let plan = BlockPlan {
                        kind: *kind,
                        in_channels: in_ch,
                        channels: *channels,
                        in_cell: in_cell.to_vec(),
                        first_weight_cell,
                        first_r,
                        cell: cell.clone(),
                        downsample: *downsample,
                    };
                    Stage::Block(ResidualBlock::build(
                        &mut store,
                        &name,
                        &plan,
                        spec.norm_order,
                        spec.batch_norm,
                        &mut rng,
                    )?)
                }
                LayerSpec::Conv {
                    channels,
                    cell,
                    geometry,
                    batch_norm,
                    activation,
                } => {
                    let (in_ch, _, _, in_cell) = geo.map()?;
                    let (wc, r) = weight_for(in_cell, cell)?;
                    let unit = ConvUnit::full(
                        &mut store,
                        &name,
                        in_ch,
                        *channels,
                        in_cell,
                        &wc,
                        *geometry,
                        r,
                        spec.norm_order,
                        *batch_norm && spec.batch_norm,
                        *activation,
                        &mut rng,
                    )?;
                    Stage::Unit(unit)
                }
                LayerSpec::Compress { channels, kernel } => {
                    let (in_ch, _, _, in_cell) = geo.map()?;
                    let (wc, r) = weight_for(in_cell, &[])?;
                    let conv = TensorConvLayer::new(
                        &mut store,
                        &format!("{name}.conv"),
                        in_ch,
                        *channels,
                        in_cell,
                        &wc,
                        ConvGeometry::new(*kernel, 1, 0),
                        r,
                        &mut rng,
                    )?;
                    Stage::Unit(ConvUnit::bare(conv))
                }
                LayerSpec::Conv2d { channels, geometry } => {
                    let (in_ch, ..) = geo.map()?;
                    Stage::Conv2d(Conv2d::new(&mut store, &name, in_ch, *channels, *geometry, &mut rng)?)
                }
                LayerSpec::Relu => Stage::Relu,
                LayerSpec::Flatten => Stage::Flatten,
                LayerSpec::Dense { units } => {
                    Stage::Dense(Dense::new(&mut store, &name, geo.features(), *units, &mut rng)?)
                }
            };
            stages.push(stage);
            geo = trace[i].output.clone();
        }
        let cell_index = input_gather(&spec.input);
        Ok(Model {
            spec: spec.clone(),
            store,
            stages,
            cell_index,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &[Tensor] {
        self.store.tensors()
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.store.tensors_mut()
    }

    pub fn param_names(&self) -> &[String] {
        self.store.names()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Expected image shape `[C, H, W]`.
    pub fn image_dims(&self) -> [usize; 3] {
        let i = &self.spec.input;
        [i.channels, i.height, i.width]
    }

    /// Record the forward pass of `images` (`[N, C, H, W]`) on `pass.tape`,
    /// returning `[N, classes]` logits.
    pub fn forward(&self, pass: &mut Pass<'_>, images: Var) -> Result<Var> {
        let dims = pass.tape.value(images).dims().to_vec();
        let [c, h, w] = self.image_dims();
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "model expects [N, {c}, {h}, {w}] images, got {dims:?}"
            )));
        }
        let n = dims[0];
        let mut x = self.input_cells(pass.tape, images, n)?;
        for stage in &self.stages {
            x = match stage {
                Stage::Block(b) => b.forward(pass, x)?,
                Stage::Unit(u) => u.forward(pass, x)?,
                Stage::Conv2d(c) => c.forward(pass, x)?,
                Stage::Relu => pass.tape.relu(x),
                Stage::Flatten => {
                    let len = pass.tape.value(x).len();
                    pass.tape.reshape(x, &[n, len / n])?
                }
                Stage::Dense(d) => d.forward(pass, x)?,
            };
        }
        pass.tape.reshape(x, &[n, self.spec.classes])
    }

    fn input_cells(&self, tape: &mut Tape, images: Var, n: usize) -> Result<Var> {
        let i = &self.spec.input;
        let cell_len: usize = i.cell.iter().product();
        let mut dims = vec![n, i.channels / cell_len, i.height, i.width];
        dims.extend_from_slice(&i.cell);
        match &self.cell_index {
            None => tape.reshape(images, &dims),
            Some(per_image) => {
                let stride = per_image.len();
                let index = (0..n)
                    .flat_map(|b| per_image.iter().map(move |&j| b * stride + j))
                    .collect();
                tape.gather(images, index, &dims)
            }
        }
    }

    /// Logits for `images` in evaluation mode.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = ParamStore::register(self.params(), &mut tape);
        let mut stats: Vec<RunningStats> = self.store.stats().to_vec();
        let x = tape.leaf(images.clone(), false);
        let mut pass = Pass {
            tape: &mut tape,
            params: &params,
            stats: &mut stats,
            phase: Phase::Eval,
        };
        let logits = self.forward(&mut pass, x)?;
        Ok(tape.value(logits).clone())
    }
}

/// Pixel order for input cells when it differs from a plain reshape.
fn input_gather(input: &InputSpec) -> Option<Vec<usize>> {
    let cell_len: usize = input.cell.iter().product();
    if cell_len == 1 {
        return None;
    }
    let (c, hw) = (input.channels, input.height * input.width);
    let mut index = vec![0; c * hw];
    for ch in 0..c {
        let (mi, ci) = (ch / cell_len, ch % cell_len);
        for p in 0..hw {
            index[(mi * hw + p) * cell_len + ci] = ch * hw + p;
        }
    }
    Some(index)
}

#[cfg(test)]
mod tests;
