//! Emotion regression: CCC fine-tuning with early stopping, and batch prediction.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{Corpus, Split, UtteranceRecord};
use crate::encoder::{BatchStats, Bound, EncoderInput, EncoderModel, Fusion, Mode};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::Adam;
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Fine-tuning rate used for full-size encoders.
pub const REFERENCE_LR: f64 = 5e-5;

const HEAD_BIAS: &str = "interp.out.bias";

const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs_max: usize,
    /// Toy-scale default 1e-3; see [`REFERENCE_LR`].
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs_max: 10,
            lr: 1e-3,
            patience: 2,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 {
            return Err(Error::Config("epochs_max must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a non-negative finite number".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for a CCC loss".into()));
        }
        Ok(())
    }
}

/// Verdict after observing one epoch's validation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b || metric.is_nan() => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// Epoch and value of the best metric so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// A labeled utterance for the CCC loss.
#[derive(Clone, Copy, Debug)]
pub struct LabeledItem<'a> {
    pub samples: &'a [f32],
    pub speaker: Option<usize>,
    pub label: f64,
}

/// Batch-level `1 - CCC` between interpreter outputs and labels, recorded on `tape`.
pub fn ccc_loss_on_tape<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    items: &[LabeledItem<'_>],
    mode: Mode,
) -> Result<(NodeId, BatchStats<T>)> {
    if items.len() < 2 {
        return Err(Error::Degenerate(format!("CCC needs at least 2 items, got {}", items.len())));
    }
    let mut pooled = Vec::with_capacity(items.len());
    for item in items {
        let f = model.encode(
            tape,
            bound,
            &EncoderInput {
                samples: item.samples,
                speaker: item.speaker,
                masked: None,
            },
        )?;
        pooled.push(tape.mean_rows(f));
    }
    let stacked = tape.concat_rows(&pooled);
    let (pred, stats) = model.interpret(tape, bound, stacked, mode);
    let truth: Vec<T> = items.iter().map(|i| T::of(i.label)).collect();
    Ok((tape.ccc_loss(pred, &truth)?, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// O-CCC on the validation split.
    pub val_ccc: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub model: EncoderModel<T>,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn speaker_for<T: Scalar>(model: &EncoderModel<T>, r: &UtteranceRecord) -> Result<Option<usize>> {
    match model.speaker_ordinal(&r.speaker_id) {
        Some(s) => Ok(Some(s)),
        None if model.fusion() == Fusion::None => Ok(None),
        None => Err(Error::Lookup(format!(
            "speaker {:?} is not in the speaker table",
            r.speaker_id
        ))),
    }
}

fn labeled<'a, T: Scalar>(
    model: &EncoderModel<T>,
    records: impl Iterator<Item = &'a UtteranceRecord>,
) -> Result<Vec<LabeledItem<'a>>> {
    records
        .filter_map(|r| r.label.map(|label| (r, label)))
        .map(|(r, label)| {
            Ok(LabeledItem {
                samples: &r.samples,
                speaker: speaker_for(model, r)?,
                label,
            })
        })
        .collect()
}

/// Splits `order` into batches of `size`, folding a trailing singleton into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn validation_ccc<T: Scalar>(model: &EncoderModel<T>, items: &[LabeledItem<'_>]) -> Result<f64> {
    let mut preds = Vec::with_capacity(items.len());
    for chunk in items.chunks(PREDICT_CHUNK) {
        let inputs: Vec<(&[f32], Option<usize>)> = chunk.iter().map(|i| (i.samples, i.speaker)).collect();
        preds.extend(model.predict_batch(&inputs)?.into_iter().map(|p| p.as_f64()));
    }
    let truth: Vec<f64> = items.iter().map(|i| i.label).collect();
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("non-finite validation prediction".into()));
    }
    metrics::ccc(&preds, &truth)
}

/// Sets the regression head's output bias to the mean training label.
pub fn init_head<T: Scalar>(model: &mut EncoderModel<T>, corpus: &Corpus) -> Result<()> {
    let labels: Vec<f64> = corpus.split(Split::Train).filter_map(|r| r.label).collect();
    if labels.is_empty() {
        return Err(Error::Validation("no labeled training data to fine-tune on".into()));
    }
    let bias = model
        .param_mut(HEAD_BIAS)
        .ok_or_else(|| Error::Lookup(format!("model has no parameter {HEAD_BIAS}")))?;
    bias.set(0, 0, T::of(metrics::mean(&labels)));
    Ok(())
}

/// Full fine-tuning on the labeled train split with the CCC loss.
///
/// Early stopping watches validation O-CCC; the returned model is the best
/// epoch's checkpoint.
pub fn finetune<T: Scalar>(mut model: EncoderModel<T>, corpus: &Corpus, config: &FinetuneConfig) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    let train = labeled(&model, corpus.split(Split::Train))?;
    if train.len() < 2 {
        return Err(Error::Validation("no labeled training data to fine-tune on".into()));
    }
    let val = labeled(&model, corpus.split(Split::Validation))?;
    if val.len() < 2 {
        return Err(Error::Validation("validation split needs at least 2 labeled utterances".into()));
    }
    let mut adam = Adam::new(model.params());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_model = model.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs_max {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::indexed_stream(config.seed, stream::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut counted = 0;
        for batch in batches(&order, config.batch_size) {
            let items: Vec<LabeledItem<'_>> = batch.iter().map(|&i| train[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mode = Mode::Train {
                dropout_seed: config.seed.wrapping_mul(0x100_0000_01b3).wrapping_add(step),
            };
            step += 1;
            let (loss, stats) = match ccc_loss_on_tape(&model, &mut tape, &bound, &items, mode) {
                Ok(v) => v,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("CCC loss became {value} at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss);
            let grads: Vec<Option<Matrix<T>>> = bound.ids.iter().map(|&id| grads.take(id)).collect();
            adam.step(model.params_mut(), &grads, config.lr);
            // A zero rate freezes the model, normalization statistics included.
            if config.lr > 0.0 {
                model.update_running_stats(&stats);
            }
            total += value;
            counted += 1;
        }
        if !model.is_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
        let val_ccc = validation_ccc(&model, &val)?;
        history.push(FinetuneEpoch {
            epoch,
            train_loss: total / counted.max(1) as f64,
            val_ccc,
        });
        match stopper.observe(epoch, val_ccc) {
            StopDecision::Improved => best_model = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < config.epochs_max;
                break;
            }
        }
    }
    let best_epoch = stopper.best().map_or(1, |(e, _)| e);
    Ok(FinetuneOutcome {
        model: best_model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// One utterance-level prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub speaker_id: String,
    pub pred: f64,
    pub truth: Option<f64>,
}

/// Predictions for a set of utterances with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(entries: Vec<Prediction>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.as_str())) {
            return Err(Error::Validation(format!("duplicate prediction id {:?}", dup.id)));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Prediction] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Prediction] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices grouped by speaker, in order of appearance.
    pub fn by_speaker(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            groups.entry(e.speaker_id.clone()).or_default().push(i);
        }
        groups
    }

    pub fn preds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.pred).collect()
    }

    /// Fills `truth` from the corpus labels (entries without a record are left alone).
    pub fn attach_truth(&mut self, corpus: &Corpus) {
        let labels: BTreeMap<&str, Option<f64>> = corpus.records().iter().map(|r| (r.id.as_str(), r.label)).collect();
        for e in &mut self.entries {
            if let Some(&l) = labels.get(e.id.as_str()) {
                e.truth = l;
            }
        }
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("prediction serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ndjson(&text)
    }
}

/// How test utterances reach the speaker table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpeakerAssignment {
    /// Each utterance uses its own speaker's row.
    Own,
    /// Speakers in the map use the row of the mapped training speaker.
    Proxy(BTreeMap<String, String>),
    /// No speaker embedding.
    Anonymous,
}

/// Inference-mode predictions for every utterance of `split`.
pub fn predict_all<T: Scalar>(
    model: &EncoderModel<T>,
    corpus: &Corpus,
    split: Split,
    assignment: &SpeakerAssignment,
) -> Result<PredictionSet> {
    let records: Vec<&UtteranceRecord> = corpus.split(split).collect();
    let mut inputs = Vec::with_capacity(records.len());
    for r in &records {
        let speaker = match assignment {
            SpeakerAssignment::Anonymous => None,
            SpeakerAssignment::Own | SpeakerAssignment::Proxy(_) => {
                let row_owner = match assignment {
                    SpeakerAssignment::Proxy(map) => map.get(&r.speaker_id).unwrap_or(&r.speaker_id),
                    _ => &r.speaker_id,
                };
                match model.speaker_ordinal(row_owner) {
                    Some(s) => Some(s),
                    None if model.fusion() == Fusion::None => None,
                    None => {
                        return Err(Error::Lookup(format!(
                            "speaker {row_owner:?} has no embedding; pick a proxy training speaker first"
                        )))
                    }
                }
            }
        };
        inputs.push((r.samples.as_slice(), speaker));
    }
    let mut entries = Vec::with_capacity(records.len());
    for (chunk_records, chunk_inputs) in records.chunks(PREDICT_CHUNK).zip(inputs.chunks(PREDICT_CHUNK)) {
        let preds = model.predict_batch(chunk_inputs)?;
        for (r, p) in chunk_records.iter().zip(preds) {
            entries.push(Prediction {
                id: r.id.clone(),
                speaker_id: r.speaker_id.clone(),
                pred: p.as_f64(),
                truth: r.label,
            });
        }
    }
    PredictionSet::new(entries)
}
