//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamId, Tape, Var};
use crate::{Real, Result, Tensor};

/// Result for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation flipped the side of some rectifier kink.
    pub excluded: usize,
    pub max_rel_error: Real,
    pub worst_coordinate: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: Real,
    pub step: Real,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> Real {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, Real::max)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Relative error used throughout: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of a scalar function at coordinate `i` of `x`.
pub fn finite_difference(
    x: &Tensor,
    i: usize,
    step: Real,
    mut f: impl FnMut(&Tensor) -> Result<Real>,
) -> Result<Real> {
    let mut probe = x.clone();
    probe.data_mut()[i] = x.data()[i] + step;
    let plus = f(&probe)?;
    probe.data_mut()[i] = x.data()[i] - step;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: Real,
    pub tolerance: Real,
    /// Coordinate budget shared by all parameter tensors.
    pub max_coordinates: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coordinates: 200,
            seed: 0,
        }
    }
}

/// Compare tape gradients of `objective` against central differences.
///
/// `objective` must register `params[i]` on the tape as `ParamId(i)` and
/// return a rank-0 loss. Coordinates are sampled evenly across tensors.
pub fn grad_check<F>(
    params: &[Tensor],
    names: &[String],
    opts: &CheckOptions,
    mut objective: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = objective(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let base_kinks = tape.kink_signature();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let per_param = (opts.max_coordinates / params.len().max(1)).max(1);
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        params: Vec::with_capacity(params.len()),
    };
    let mut work = params.to_vec();

    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .param(ParamId(pi))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        let take = per_param.min(p.len());
        let mut coords: Vec<usize> = sample(&mut rng, p.len(), take).into_vec();
        coords.sort_unstable();

        let mut check = ParamCheck {
            name: names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            worst_coordinate: None,
        };
        for i in coords {
            let orig = p.data()[i];
            let mut eval = |v: Real, work: &mut Vec<Tensor>| -> Result<(Real, Vec<bool>)> {
                work[pi].data_mut()[i] = v;
                let mut t = Tape::new();
                let l = objective(&mut t, work)?;
                Ok((t.value(l).item(), t.kink_signature()))
            };
            let (plus, sig_plus) = eval(orig + opts.step, &mut work)?;
            let (minus, sig_minus) = eval(orig - opts.step, &mut work)?;
            work[pi].data_mut()[i] = orig;
            if sig_plus != base_kinks || sig_minus != base_kinks {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[i], numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst_coordinate.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_coordinate = Some(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
