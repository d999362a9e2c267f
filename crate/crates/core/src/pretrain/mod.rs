//! Personalized adaptive pre-training.
//!
//! Frames of every utterance get a K-means cluster id computed on the frozen
//! front-end of an untrained encoder. The encoder then learns to predict
//! those ids at masked frames, with the speaker embedding fused in. The loss
//! is the cross-entropy summed over utterances and masked frames:
//!
//! `L_pt = -Σ_i Σ_{t ∈ M_i} log P(l_it | f^p_it)`
//!
//! Emotion labels never enter this module: training inputs are
//! [`PretrainUtterance`]s, which carry no label field.

mod kmeans;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{Corpus, Split};
use crate::encoder::{Bound, EncoderConfig, EncoderInput, EncoderModel};
use crate::error::{Error, Result};
use crate::optim::{Adam, LinearSchedule};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

pub use kmeans::{kmeans, nearest, KMeansFit};

/// Lloyd iterations allowed before K-means gives up on convergence.
pub const KMEANS_MAX_ITER: usize = 100;

/// Peak learning rate used for full-size encoders.
pub const REFERENCE_LR_MAX: f64 = 1e-5;

/// Splits used for pre-training and for its validation.
pub const TRAIN_SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::TestB];
pub const VALIDATION_SPLIT: Split = Split::TestA;

/// Cluster ids per frame for every utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub k: usize,
    pub labels: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct LabelIndex {
    format: String,
    version: u32,
    k: usize,
    utterances: Vec<LabelEntry>,
}

#[derive(Serialize, Deserialize)]
struct LabelEntry {
    id: String,
    path: String,
}

const LABEL_FORMAT: &str = "perser-pseudo-labels";

impl PseudoLabelSet {
    pub fn get(&self, id: &str) -> Result<&[usize]> {
        self.labels
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no pseudo-labels for utterance {id:?}")))
    }

    /// Writes `index.json` plus one PSER vector per utterance into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut utterances = Vec::with_capacity(self.labels.len());
        for (id, labels) in &self.labels {
            let file = format!("{id}.pser");
            Tensor::vector(labels.iter().map(|&l| l as f32).collect()).save(&dir.join(&file))?;
            utterances.push(LabelEntry {
                id: id.clone(),
                path: file,
            });
        }
        let index = LabelIndex {
            format: LABEL_FORMAT.into(),
            version: 1,
            k: self.k,
            utterances,
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: LabelIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if index.format != LABEL_FORMAT || index.version != 1 {
            return Err(Error::Format {
                path,
                message: format!("unsupported format {:?} version {}", index.format, index.version),
            });
        }
        let mut labels = BTreeMap::new();
        for entry in index.utterances {
            let file = dir.join(&entry.path);
            let t = Tensor::load(&file)?;
            let ids: Vec<usize> = t.data.iter().map(|&v| v as usize).collect();
            if t.dims.len() != 1 || ids.iter().any(|&l| l >= index.k) {
                return Err(Error::Format {
                    path: file,
                    message: format!("expected a vector of cluster ids below {}", index.k),
                });
            }
            labels.insert(entry.id, ids);
        }
        Ok(Self { k: index.k, labels })
    }
}

/// Clusters front-end frames of all utterances of `corpus` into `k` groups.
///
/// Features come from the convolutional front-end of a fresh encoder built
/// from `config` and `seed`, which stays frozen.
pub fn make_pseudo_labels(corpus: &Corpus, config: &EncoderConfig, k: usize, seed: u64) -> Result<PseudoLabelSet> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("cannot cluster an empty corpus".into()));
    }
    let frozen = EncoderModel::<f64>::new(config.clone(), vec!["frozen".into()], seed)?;
    let mut per_utt = Vec::with_capacity(corpus.len());
    let mut data = Vec::new();
    let mut width = 0;
    for r in corpus.records() {
        let f = frozen.front_end(&r.samples)?;
        width = f.cols();
        per_utt.push((r.id.clone(), f.rows()));
        data.extend(f.into_vec());
    }
    let frames = data.len() / width.max(1);
    if k > frames {
        return Err(Error::Config(format!("k_pseudo {k} exceeds the {frames} available frames")));
    }
    let data = Matrix::from_vec(frames, width, data)?;
    let fit = kmeans(&data, k, KMEANS_MAX_ITER, seed)?;
    let mut labels = BTreeMap::new();
    let mut offset = 0;
    for (id, n) in per_utt {
        labels.insert(id, fit.assignments[offset..offset + n].to_vec());
        offset += n;
    }
    Ok(PseudoLabelSet { k, labels })
}

/// Masked frame indices per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask_prob: f64,
    pub span: usize,
    pub masks: Vec<Vec<usize>>,
}

/// Span masking: each frame starts a span with probability `mask_prob`;
/// spans are clipped at the end and merged. An empty result is replaced by
/// one random span.
pub fn plan_masks(lengths: &[usize], mask_prob: f64, span: usize, seed: u64) -> Result<MaskPlan> {
    let mut r = rng::sub_stream(seed, stream::MASKING);
    plan_masks_with(&mut r, lengths, mask_prob, span)
}

pub fn plan_masks_with(r: &mut rng::Rng, lengths: &[usize], mask_prob: f64, span: usize) -> Result<MaskPlan> {
    if span == 0 || !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!(
            "mask span {span} must be positive and probability {mask_prob} within [0, 1]"
        )));
    }
    let mut masks = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len < span {
            return Err(Error::Shape(format!("{len} frames is shorter than the mask span {span}")));
        }
        let mut hit = vec![false; len];
        for start in 0..len {
            if r.random::<f64>() < mask_prob {
                hit[start..(start + span).min(len)].iter_mut().for_each(|h| *h = true);
            }
        }
        if !hit.contains(&true) {
            let start = r.random_range(0..=len - span);
            hit[start..start + span].iter_mut().for_each(|h| *h = true);
        }
        masks.push((0..len).filter(|&t| hit[t]).collect());
    }
    Ok(MaskPlan {
        mask_prob,
        span,
        masks,
    })
}

/// An unlabeled utterance with its speaker-table row.
#[derive(Clone, Copy, Debug)]
pub struct PretrainUtterance<'a> {
    pub id: &'a str,
    pub samples: &'a [f32],
    pub speaker: usize,
}

/// Pre-training view of the given splits; every speaker must be in the model's table.
pub fn pretrain_utterances<'a, T: Scalar>(
    corpus: &'a Corpus,
    splits: &'a [Split],
    model: &EncoderModel<T>,
) -> Result<Vec<PretrainUtterance<'a>>> {
    corpus
        .in_splits(splits)
        .map(|r| {
            let speaker = model.speaker_ordinal(&r.speaker_id).ok_or_else(|| {
                Error::Lookup(format!("speaker {:?} has no row in the speaker table", r.speaker_id))
            })?;
            Ok(PretrainUtterance {
                id: &r.id,
                samples: &r.samples,
                speaker,
            })
        })
        .collect()
}

/// One utterance of a loss batch with its masked frames and their targets.
#[derive(Clone, Copy, Debug)]
pub struct MaskedItem<'a> {
    pub samples: &'a [f32],
    pub speaker: Option<usize>,
    /// Cluster id of every frame.
    pub pseudo_labels: &'a [usize],
    pub mask: &'a [usize],
}

/// Summed masked-frame cross-entropy of a batch, recorded on `tape`.
pub fn papt_loss_on_tape<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    items: &[MaskedItem<'_>],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::Degenerate("empty pre-training batch".into()));
    }
    let mut parts = Vec::with_capacity(items.len());
    for item in items {
        if item.mask.is_empty() {
            return Err(Error::Degenerate("every utterance needs at least one masked frame".into()));
        }
        let frames = model.config().frame_count(item.samples.len());
        if item.pseudo_labels.len() != frames {
            return Err(Error::Shape(format!(
                "{} pseudo-labels for {frames} frames",
                item.pseudo_labels.len()
            )));
        }
        let features = model.encode(
            tape,
            bound,
            &EncoderInput {
                samples: item.samples,
                speaker: item.speaker,
                masked: Some(item.mask),
            },
        )?;
        let logits = model.pseudo_head(tape, bound, features);
        let picked = tape.gather_rows(logits, item.mask);
        let targets: Vec<usize> = item.mask.iter().map(|&t| item.pseudo_labels[t]).collect();
        parts.push(tape.softmax_cross_entropy(picked, &targets)?);
    }
    Ok(if parts.len() == 1 { parts[0] } else { tape.sum(&parts) })
}

/// Loss value and per-parameter gradients (`None` where a parameter is unused).
pub fn papt_loss<T: Scalar>(model: &EncoderModel<T>, items: &[MaskedItem<'_>]) -> Result<(T, Vec<Option<Matrix<T>>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = papt_loss_on_tape(model, &mut tape, &bound, items)?;
    let mut grads = tape.backward(loss);
    let value = tape.scalar(loss);
    Ok((value, bound.ids.iter().map(|&id| grads.take(id)).collect()))
}

fn papt_value<T: Scalar>(model: &EncoderModel<T>, items: &[MaskedItem<'_>]) -> Result<T> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let loss = papt_loss_on_tape(model, &mut tape, &bound, items)?;
    Ok(tape.scalar(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub warmup_fraction: f64,
    /// Toy-scale default 1e-3; see [`REFERENCE_LR_MAX`] for large encoders.
    pub lr_max: f64,
    pub batch_size: usize,
    /// Probability that a frame starts a masked span.
    pub mask_prob: f64,
    pub span: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_fraction: 0.05,
            lr_max: 1e-3,
            batch_size: 8,
            mask_prob: 0.08,
            span: 10,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config("lr_max must be a non-negative finite number".into()));
        }
        if self.batch_size == 0 || self.span == 0 {
            return Err(Error::Config("batch_size and span must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean loss per masked frame after each epoch; epoch 0 is the starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PaptOutcome<T> {
    /// Parameters with the lowest validation loss.
    pub model: EncoderModel<T>,
    pub history: Vec<PaptEpoch>,
    pub best_epoch: usize,
}

impl<T> PaptOutcome<T> {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }
}

struct Prepared<'a> {
    samples: &'a [f32],
    speaker: usize,
    labels: &'a [usize],
}

fn prepare<'a>(utts: &[PretrainUtterance<'a>], labels: &'a PseudoLabelSet) -> Result<Vec<Prepared<'a>>> {
    utts.iter()
        .map(|u| {
            Ok(Prepared {
                samples: u.samples,
                speaker: u.speaker,
                labels: labels.get(u.id)?,
            })
        })
        .collect()
}

fn mean_masked_loss<T: Scalar>(model: &EncoderModel<T>, set: &[Prepared<'_>], plan: &MaskPlan, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0;
    for (chunk, masks) in set.chunks(batch).zip(plan.masks.chunks(batch)) {
        let items: Vec<MaskedItem<'_>> = chunk
            .iter()
            .zip(masks)
            .map(|(p, m)| MaskedItem {
                samples: p.samples,
                speaker: Some(p.speaker),
                pseudo_labels: p.labels,
                mask: m,
            })
            .collect();
        total += papt_value(model, &items)?.as_f64();
        frames += masks.iter().map(Vec::len).sum::<usize>();
    }
    Ok(total / frames.max(1) as f64)
}

/// Adam on the summed masked-frame loss with a warm-up / linear-decay schedule.
///
/// Validation uses one fixed mask plan so epochs are comparable. The returned
/// model is the one with the lowest validation loss, the starting point included.
pub fn run_papt<T: Scalar>(
    mut model: EncoderModel<T>,
    train: &[PretrainUtterance<'_>],
    val: &[PretrainUtterance<'_>],
    labels: &PseudoLabelSet,
    config: &PretrainConfig,
) -> Result<PaptOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Degenerate("pre-training needs training and validation utterances".into()));
    }
    if labels.k != model.config().k_pseudo {
        return Err(Error::Config(format!(
            "pseudo-labels use {} clusters but the head predicts {}",
            labels.k,
            model.config().k_pseudo
        )));
    }
    let train_set = prepare(train, labels)?;
    let val_set = prepare(val, labels)?;
    let frames = |set: &[Prepared<'_>]| -> Vec<usize> {
        set.iter().map(|p| model.config().frame_count(p.samples.len())).collect()
    };
    let train_frames = frames(&train_set);
    let mut fixed = rng::sub_stream(config.seed, "validation-masks");
    let val_plan = plan_masks_with(&mut fixed, &frames(&val_set), config.mask_prob, config.span)?;
    let train_probe = plan_masks_with(&mut fixed, &train_frames, config.mask_prob, config.span)?;

    let batch = config.batch_size;
    let steps_per_epoch = train_set.len().div_ceil(batch);
    let schedule = LinearSchedule::new(config.lr_max, config.warmup_fraction, steps_per_epoch * config.epochs);
    let mut adam = Adam::new(model.params());

    let initial_val = mean_masked_loss(&model, &val_set, &val_plan, batch)?;
    let initial_train = mean_masked_loss(&model, &train_set, &train_probe, batch)?;
    let mut history = vec![PaptEpoch {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    let mut best = (0, initial_val, model.clone());
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::indexed_stream(config.seed, stream::SHUFFLE, epoch as u64));
        let lengths: Vec<usize> = order.iter().map(|&i| train_frames[i]).collect();
        let plan = plan_masks_with(
            &mut rng::indexed_stream(config.seed, stream::MASKING, epoch as u64),
            &lengths,
            config.mask_prob,
            config.span,
        )?;
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0;
        for (idx, masks) in order.chunks(batch).zip(plan.masks.chunks(batch)) {
            let items: Vec<MaskedItem<'_>> = idx
                .iter()
                .zip(masks)
                .map(|(&i, m)| MaskedItem {
                    samples: train_set[i].samples,
                    speaker: Some(train_set[i].speaker),
                    pseudo_labels: train_set[i].labels,
                    mask: m,
                })
                .collect();
            let (loss, grads) = papt_loss(&model, &items)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "pre-training loss became {loss} at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss.as_f64();
            epoch_frames += masks.iter().map(Vec::len).sum::<usize>();
            adam.step(model.params_mut(), &grads, schedule.lr(step));
            step += 1;
        }
        if !model.is_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
        let val_loss = mean_masked_loss(&model, &val_set, &val_plan, batch)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        history.push(PaptEpoch {
            epoch,
            train_loss: epoch_loss / epoch_frames.max(1) as f64,
            val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.clone());
        }
    }
    Ok(PaptOutcome {
        model: best.2,
        history,
        best_epoch: best.0,
    })
}

/// Pre-trains on the train, validation and test_b splits, validating on test_a.
pub fn run_papt_on_corpus<T: Scalar>(
    model: EncoderModel<T>,
    corpus: &Corpus,
    labels: &PseudoLabelSet,
    config: &PretrainConfig,
) -> Result<PaptOutcome<T>> {
    let train = pretrain_utterances(corpus, &TRAIN_SPLITS, &model)?;
    let val = pretrain_utterances(corpus, &[VALIDATION_SPLIT], &model)?;
    run_papt(model, &train, &val, labels, config)
}
