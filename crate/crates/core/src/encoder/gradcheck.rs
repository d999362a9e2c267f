//! Central finite-difference check of the analytic gradients.

use serde::Serialize;

use super::{EncoderModel, Mode};
use crate::autodiff::Tape;
use crate::downstream::{ccc_loss_on_tape, LabeledItem};
use crate::error::{Error, Result};
use crate::pretrain::{papt_loss_on_tape, MaskedItem};
use crate::tensor::Matrix;

/// Perturbation used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Groups whose largest gradient is below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

const DROPOUT_SEED: u64 = 0x5eed;

#[derive(Clone, Debug)]
pub struct GradcheckItem {
    pub samples: Vec<f32>,
    pub speaker: Option<usize>,
    pub pseudo_labels: Vec<usize>,
    pub mask: Vec<usize>,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckBatch {
    pub items: Vec<GradcheckItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPath {
    /// Masked pseudo-label cross-entropy.
    Pretrain,
    /// `1 - CCC` through the interpreter.
    Ccc,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub loss: LossPath,
    pub param: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
    /// Parameters whose analytic or numeric gradient was not finite.
    pub non_finite: Vec<String>,
    pub passed: bool,
}

fn loss_value(model: &EncoderModel<f64>, batch: &GradcheckBatch, path: LossPath) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let id = record(model, batch, path, &mut tape, &bound)?;
    Ok(tape.scalar(id))
}

fn record(
    model: &EncoderModel<f64>,
    batch: &GradcheckBatch,
    path: LossPath,
    tape: &mut Tape<f64>,
    bound: &super::Bound,
) -> Result<crate::autodiff::NodeId> {
    match path {
        LossPath::Pretrain => {
            let items: Vec<MaskedItem<'_>> = batch
                .items
                .iter()
                .map(|i| MaskedItem {
                    samples: &i.samples,
                    speaker: i.speaker,
                    pseudo_labels: &i.pseudo_labels,
                    mask: &i.mask,
                })
                .collect();
            papt_loss_on_tape(model, tape, bound, &items)
        }
        LossPath::Ccc => {
            let items: Vec<LabeledItem<'_>> = batch
                .items
                .iter()
                .map(|i| LabeledItem {
                    samples: &i.samples,
                    speaker: i.speaker,
                    label: i.label,
                })
                .collect();
            let mode = Mode::Train {
                dropout_seed: DROPOUT_SEED,
            };
            Ok(ccc_loss_on_tape(model, tape, bound, &items, mode)?.0)
        }
    }
}

/// Compares analytic gradients of both losses with central differences.
///
/// The relative error of a parameter group is its largest elementwise
/// discrepancy `|a - n|` divided by the group's largest gradient magnitude
/// (analytic or numeric, at least `REL_FLOOR`).
pub fn gradcheck(model: &EncoderModel<f64>, batch: &GradcheckBatch, tolerance: f64) -> Result<GradcheckReport> {
    if batch.items.len() < 2 {
        return Err(Error::Degenerate("gradient check needs a batch of at least 2".into()));
    }
    let mut entries = Vec::new();
    let mut non_finite = Vec::new();
    for path in [LossPath::Pretrain, LossPath::Ccc] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let loss = record(model, batch, path, &mut tape, &bound)?;
        let mut grads = tape.backward(loss);
        let analytic: Vec<Matrix<f64>> = bound
            .ids
            .iter()
            .zip(model.params())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        let mut probe = model.clone();
        for (i, name) in model.param_names().iter().enumerate() {
            let mut max_abs = 0.0f64;
            let mut scale = REL_FLOOR;
            let mut finite = true;
            for j in 0..model.params()[i].len() {
                let orig = model.params()[i].as_slice()[j];
                probe.params_mut()[i].as_mut_slice()[j] = orig + FD_STEP;
                let up = loss_value(&probe, batch, path)?;
                probe.params_mut()[i].as_mut_slice()[j] = orig - FD_STEP;
                let down = loss_value(&probe, batch, path)?;
                probe.params_mut()[i].as_mut_slice()[j] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[i].as_slice()[j];
                if !(a.is_finite() && numeric.is_finite()) {
                    finite = false;
                    continue;
                }
                let abs = (a - numeric).abs();
                max_abs = max_abs.max(abs);
                scale = scale.max(a.abs()).max(numeric.abs());
            }
            let max_rel = max_abs / scale;
            if !finite {
                non_finite.push(format!("{name} ({path:?})"));
            }
            entries.push(GradcheckEntry {
                loss: path,
                param: name.clone(),
                max_rel_err: max_rel,
                max_abs_err: max_abs,
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: non_finite.is_empty() && max_rel_err < tolerance,
        entries,
        max_rel_err,
        non_finite,
    })
}

/// Loss of `path` at the model's current parameters.
pub fn loss_at(model: &EncoderModel<f64>, batch: &GradcheckBatch, path: LossPath) -> Result<f64> {
    loss_value(model, batch, path)
}
