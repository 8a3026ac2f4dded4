//! Closed-form parameter counts computed from a spec alone.

use serde::Serialize;

use super::{builtin::paper_param_count, weight_for, Geo, LayerSpec, ModelSpec};
use crate::layers::BlockPlan;
use crate::tensor::contract;
use crate::{Result, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub index: usize,
    pub layer: String,
    /// Convolution / dense weights, including skip projections.
    pub weights: usize,
    pub batch_norm: usize,
    pub prelu: usize,
    pub bias: usize,
}

impl AuditRow {
    pub fn total(&self) -> usize {
        self.weights + self.batch_norm + self.prelu + self.bias
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamAudit {
    pub model: String,
    pub rows: Vec<AuditRow>,
    pub total: usize,
    /// Count the paper reports for this model, if any.
    pub paper: Option<f64>,
}

impl ParamAudit {
    /// Relative difference to the paper's figure.
    pub fn delta(&self) -> Option<f64> {
        self.paper.map(|p| (self.total as f64 - p) / p)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.model);
        out.push_str(&format!(
            "{:<4} {:<10} {:>10} {:>8} {:>6} {:>6} {:>10}\n",
            "#", "layer", "weights", "bn", "prelu", "bias", "total"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<4} {:<10} {:>10} {:>8} {:>6} {:>6} {:>10}\n",
                r.index,
                r.layer,
                r.weights,
                r.batch_norm,
                r.prelu,
                r.bias,
                r.total()
            ));
        }
        out.push_str(&format!("total {}", self.total));
        if let (Some(p), Some(d)) = (self.paper, self.delta()) {
            out.push_str(&format!("  paper {p}  delta {:+.2}%", d * 100.0));
        }
        out.push('\n');
        out
    }
}

fn prod(d: &[usize]) -> usize {
    d.iter().product()
}

/// Exact trainable-parameter count per layer.
pub fn audit_params(spec: &ModelSpec) -> Result<ParamAudit> {
    let trace = spec.trace()?;
    let mut geo = Geo::input(&spec.input)?;
    let mut rows = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let mut row = AuditRow {
            index: i,
            layer: layer.label(),
            weights: 0,
            batch_norm: 0,
            prelu: 0,
            bias: 0,
        };
        let bn = |ch: usize, cell: &[usize]| if spec.batch_norm { 2 * ch * prod(cell) } else { 0 };
        match layer {
            LayerSpec::Block {
                kind,
                channels,
                cell,
                ..
            } => {
                let (in_ch, _, _, in_cell) = geo.map()?;
                let (first_w, _) = weight_for(in_cell, cell)?;
                let (inner_w, _) = BlockPlan::interior_weight(cell);
                let depth = kind.depth();
                row.weights = channels * in_ch * 9 * prod(&first_w)
                    + (depth - 1) * channels * channels * 9 * prod(&inner_w);
                if in_cell != cell.as_slice() || in_ch != *channels {
                    row.weights += channels * in_ch * prod(&first_w);
                }
                row.batch_norm = depth * bn(*channels, cell);
                row.prelu = depth * channels;
            }
            LayerSpec::Conv {
                channels,
                cell,
                geometry,
                batch_norm,
                activation,
            } => {
                let (in_ch, _, _, in_cell) = geo.map()?;
                let (w, _) = weight_for(in_cell, cell)?;
                row.weights = channels * in_ch * geometry.kernel * geometry.kernel * prod(&w);
                if *batch_norm {
                    row.batch_norm = bn(*channels, cell);
                }
                if *activation {
                    row.prelu = *channels;
                }
            }
            LayerSpec::Compress { channels, kernel } => {
                let (in_ch, _, _, in_cell) = geo.map()?;
                row.weights = channels * in_ch * kernel * kernel * prod(in_cell);
            }
            LayerSpec::Conv2d { channels, geometry } => {
                let (in_ch, ..) = geo.map()?;
                row.weights = channels * in_ch * geometry.kernel * geometry.kernel;
                row.bias = *channels;
            }
            LayerSpec::Dense { units } => {
                row.weights = geo.features() * units;
                row.bias = *units;
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        rows.push(row);
        geo = trace[i].output.clone();
    }
    let total = rows.iter().map(AuditRow::total).sum();
    Ok(ParamAudit {
        model: spec.name.clone(),
        rows,
        total,
        paper: paper_param_count(&spec.name),
    })
}

/// Weight counts of a capsule-style layer with vector versus matrix poses.
#[derive(Clone, Debug, Serialize)]
pub struct CapsuleArithmetic {
    pub inputs: usize,
    pub outputs: usize,
    pub vector_params: usize,
    pub matrix_params: usize,
    /// `vector_params / matrix_params`.
    pub ratio: f64,
    /// The reduction factor quoted in the text, which disagrees with `ratio`.
    pub stated_factor: f64,
}

/// 1152 inputs × 10 outputs: 8→16 vector transforms versus 4×2 → 4×4 matrix
/// transforms. The matrix weight shape is confirmed by a real contraction.
pub fn capsule_arithmetic() -> Result<CapsuleArithmetic> {
    let (inputs, outputs) = (32 * 6 * 6, 10);
    let vector_params = inputs * outputs * 8 * 16;
    let pose = Tensor::zeros(&Shape::new([4, 2])?);
    let w = Tensor::zeros(&Shape::new([2, 4])?);
    let out = contract(&pose, &w, 1)?;
    debug_assert_eq!(out.dims(), &[4, 4]);
    let matrix_params = inputs * outputs * w.len();
    Ok(CapsuleArithmetic {
        inputs,
        outputs,
        vector_params,
        matrix_params,
        ratio: vector_params as f64 / matrix_params as f64,
        stated_factor: 15.0,
    })
}
