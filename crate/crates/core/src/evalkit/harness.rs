use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport};
use crate::calibrate::{build_profiles, calibrate_prediction_set, proxy_map, CalibrationConfig, ShiftMode};
use crate::corpus::{Corpus, Split, UtteranceRecord};
use crate::downstream::{finetune, init_head, predict_all, FinetuneConfig, FinetuneOutcome, PredictionSet, SpeakerAssignment};
use crate::encoder::{EncoderConfig, EncoderModel, Fusion};
use crate::error::{Error, Result};
use crate::pretrain::{make_pseudo_labels, run_papt_on_corpus, PaptOutcome, PretrainConfig, PseudoLabelSet, TRAIN_SPLITS, VALIDATION_SPLIT};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

const TEST_SPLITS: [Split; 3] = [Split::TestA, Split::TestB, Split::TestC];

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<I: Sync, R: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    (j..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("harness worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Speakers whose utterances are seen during pre-training, in corpus order.
pub fn pretraining_speakers(corpus: &Corpus) -> Vec<String> {
    let mut splits = TRAIN_SPLITS.to_vec();
    splits.push(VALIDATION_SPLIT);
    let present: BTreeSet<&str> = corpus.in_splits(&splits).map(|r| r.speaker_id.as_str()).collect();
    corpus
        .speakers()
        .iter()
        .filter(|s| present.contains(s.as_str()))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Seeds model initialization and pseudo-labelling.
    pub seed: u64,
}

pub struct TrainedPipeline<T> {
    /// Untrained encoder; also used to pick proxy speakers.
    pub base: EncoderModel<T>,
    pub pseudo_labels: PseudoLabelSet,
    pub papt: PaptOutcome<T>,
    pub finetuned: FinetuneOutcome<T>,
}

/// Pseudo-labels, PAPT and fine-tuning. Test labels are never read.
pub fn train_pipeline<T: Scalar>(corpus: &Corpus, config: &PipelineConfig) -> Result<TrainedPipeline<T>> {
    let blind = corpus.without_labels(&TEST_SPLITS);
    let base = EncoderModel::<T>::new(config.encoder.clone(), pretraining_speakers(&blind), config.seed)?;
    let mut splits = TRAIN_SPLITS.to_vec();
    splits.push(VALIDATION_SPLIT);
    let pool = blind.filter(|r| splits.contains(&r.split));
    let pseudo_labels = make_pseudo_labels(&pool, &config.encoder, config.encoder.k_pseudo, config.seed)?;
    let papt = run_papt_on_corpus(base.clone(), &blind, &pseudo_labels, &config.pretrain)?;
    let mut start = papt.model.clone();
    init_head(&mut start, &blind)?;
    let finetuned = finetune(start, &blind, &config.finetune)?;
    Ok(TrainedPipeline {
        base,
        pseudo_labels,
        papt,
        finetuned,
    })
}

/// One row of a seen or unseen speaker results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub o_ccc: f64,
    pub a_ccc: f64,
    pub a_ccc_std: f64,
}

impl MethodRow {
    fn new(method: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            method: method.into(),
            o_ccc: r.o_ccc,
            a_ccc: r.a_ccc,
            a_ccc_std: r.a_ccc_std,
        }
    }
}

fn scored(mut preds: PredictionSet, corpus: &Corpus) -> Result<EvalReport> {
    preds.attach_truth(corpus);
    evaluate(&preds)
}

/// Seen speakers (test_b): the fine-tuned model, then each PLDC mode.
pub fn evaluate_seen<T: Scalar>(
    pipeline: &TrainedPipeline<T>,
    corpus: &Corpus,
    calibration: &CalibrationConfig,
) -> Result<Vec<MethodRow>> {
    let model = &pipeline.finetuned.model;
    let blind = corpus.without_labels(&TEST_SPLITS);
    let preds = predict_all(model, &blind, Split::TestB, &SpeakerAssignment::Own)?;
    let train_profiles = build_profiles(model, corpus, Split::Train, &SpeakerAssignment::Own, true)?;
    let targets = build_profiles(model, &blind, Split::TestB, &SpeakerAssignment::Own, false)?;
    let mut rows = vec![MethodRow::new("finetuned", &scored(preds.clone(), corpus)?)];
    for (name, mode) in [("+ mu shift", ShiftMode::Mu), ("+ sigma shift", ShiftMode::Sigma), ("+ (mu, sigma) shift", ShiftMode::Both)] {
        let config = CalibrationConfig { mode, ..*calibration };
        let (out, _) = calibrate_prediction_set(&preds, &targets, &train_profiles, &config)?;
        rows.push(MethodRow::new(name, &scored(out, corpus)?));
    }
    Ok(rows)
}

/// Unseen speakers (test_c): no embedding, proxy embedding, proxy plus PLDC
/// in `calibration.mode`. Also returns the chosen proxies.
pub fn evaluate_unseen<T: Scalar>(
    pipeline: &TrainedPipeline<T>,
    corpus: &Corpus,
    calibration: &CalibrationConfig,
) -> Result<(Vec<MethodRow>, BTreeMap<String, String>)> {
    let model = &pipeline.finetuned.model;
    let blind = corpus.without_labels(&TEST_SPLITS);
    let base_profiles = build_profiles(&pipeline.base, &blind, Split::Train, &SpeakerAssignment::Anonymous, false)?;
    let proxies = proxy_map(&pipeline.base, &blind, Split::TestC, &base_profiles)?;
    let assignment = SpeakerAssignment::Proxy(proxies.clone());
    let anonymous = predict_all(model, &blind, Split::TestC, &SpeakerAssignment::Anonymous)?;
    let proxied = predict_all(model, &blind, Split::TestC, &assignment)?;
    let train_profiles = build_profiles(model, corpus, Split::Train, &SpeakerAssignment::Own, true)?;
    let targets = build_profiles(model, &blind, Split::TestC, &assignment, false)?;
    let (calibrated, _) = calibrate_prediction_set(&proxied, &targets, &train_profiles, calibration)?;
    let rows = vec![
        MethodRow::new("no proxy", &scored(anonymous, corpus)?),
        MethodRow::new("proxy", &scored(proxied, corpus)?),
        MethodRow::new(format!("proxy + PLDC ({})", calibration.mode), &scored(calibrated, corpus)?),
    ];
    Ok((rows, proxies))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Fusion is forced to `None`; both models are speaker-agnostic.
    pub encoder: EncoderConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
    /// When false the dependent model is trained exactly like the independent one.
    pub personalize: bool,
    /// Training runs per cell with consecutive seeds; scores are averaged.
    pub repeats: usize,
    pub jobs: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
            personalize: true,
            repeats: 1,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    pub dependent_o_ccc: f64,
    pub independent_o_ccc: f64,
    pub dependent_a_ccc: f64,
    pub independent_a_ccc: f64,
    /// `dependent_o_ccc - independent_o_ccc`.
    pub gap: f64,
    pub speakers: Vec<String>,
}

fn subset_corpus(corpus: &Corpus, train: &BTreeSet<&str>, test_a_as_train: bool) -> Result<Corpus> {
    let records: Vec<UtteranceRecord> = corpus
        .records()
        .iter()
        .filter_map(|r| match r.split {
            Split::Train if train.contains(r.speaker_id.as_str()) => Some(r.clone()),
            Split::TestA if test_a_as_train => Some(UtteranceRecord {
                split: Split::Train,
                ..r.clone()
            }),
            Split::Validation | Split::TestB => Some(r.clone()),
            _ => None,
        })
        .collect();
    Corpus::new(corpus.target(), records)
}

fn gap_cell(corpus: &Corpus, config: &GapConfig, encoder: &EncoderConfig, train: &BTreeSet<&str>, test_a: bool) -> Result<(f64, f64)> {
    let data = subset_corpus(corpus, train, test_a)?;
    let blind = data.without_labels(&[Split::TestB]);
    let (mut o, mut a) = (0.0, 0.0);
    for r in 0..config.repeats as u64 {
        let mut model = EncoderModel::<f64>::new(encoder.clone(), data.speakers().to_vec(), config.seed.wrapping_add(r))?;
        init_head(&mut model, &blind)?;
        let finetune_config = FinetuneConfig {
            seed: config.finetune.seed.wrapping_add(r),
            ..config.finetune.clone()
        };
        let out = finetune(model, &blind, &finetune_config)?;
        let report = scored(predict_all(&out.model, &blind, Split::TestB, &SpeakerAssignment::Anonymous)?, corpus)?;
        o += report.o_ccc;
        a += report.a_ccc;
    }
    let n = config.repeats as f64;
    Ok((o / n, a / n))
}

/// Speaker-dependent vs speaker-independent fine-tuning as the number of
/// training speakers grows. Subsets are nested across `k_values`.
///
/// The independent model trains on the first `k` speakers of a seeded
/// permutation; the dependent model swaps the last `|test_a speakers|` of
/// those for the test_a data. Both are scored on test_b.
pub fn personalization_gap(corpus: &Corpus, k_values: &[usize], config: &GapConfig) -> Result<Vec<GapRow>> {
    if k_values.is_empty() {
        return Err(Error::Config("k_values is empty".into()));
    }
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("k_values must be strictly ascending, got {k_values:?}")));
    }
    let mut order = corpus.speakers_in(Split::Train);
    let n_a = corpus.speakers_in(Split::TestA).len();
    if n_a == 0 || corpus.split(Split::TestB).next().is_none() {
        return Err(Error::Validation("the gap harness needs test_a and test_b speakers".into()));
    }
    for &k in k_values {
        if k > order.len() {
            return Err(Error::Config(format!("k = {k} exceeds the {} available training speakers", order.len())));
        }
        if config.personalize && k < n_a {
            return Err(Error::Config(format!("k = {k} is smaller than the {n_a} test_a speakers it must make room for")));
        }
    }
    order.shuffle(&mut rng::sub_stream(config.seed, stream::SUBSET));
    let encoder = EncoderConfig {
        fusion: Fusion::None,
        ..config.encoder.clone()
    };
    let mut cells = Vec::new();
    for &k in k_values {
        let full: BTreeSet<&str> = order[..k].iter().map(String::as_str).collect();
        let reduced: BTreeSet<&str> = order[..k - n_a].iter().map(String::as_str).collect();
        cells.push((k, full.clone(), false));
        if config.personalize {
            cells.push((k, reduced, true));
        } else {
            cells.push((k, full, false));
        }
    }
    let results = par_map(&cells, config.jobs, |(_, train, test_a)| gap_cell(corpus, config, &encoder, train, *test_a));
    let mut rows = Vec::new();
    let mut results = results.into_iter();
    for &k in k_values {
        let independent = results.next().expect("two cells per k")?;
        let dependent = results.next().expect("two cells per k")?;
        rows.push(GapRow {
            k,
            dependent_o_ccc: dependent.0,
            independent_o_ccc: independent.0,
            dependent_a_ccc: dependent.1,
            independent_a_ccc: independent.1,
            gap: dependent.0 - independent.0,
            speakers: order[..k].to_vec(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub pipeline: PipelineConfig,
    pub modes: Vec<Fusion>,
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            modes: Fusion::ALL.to_vec(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub fusion: Fusion,
    /// Best validation loss per masked frame.
    pub val_loss: f64,
    pub a_ccc: f64,
}

/// PAPT and fine-tuning once per fusion position, sharing pseudo-labels and
/// seeds. A-CCC is measured on test_b.
pub fn ablate_fusion(corpus: &Corpus, config: &AblationConfig) -> Result<Vec<FusionRow>> {
    if config.modes.is_empty() {
        return Err(Error::Config("no fusion modes to compare".into()));
    }
    let p = &config.pipeline;
    let blind = corpus.without_labels(&TEST_SPLITS);
    let mut splits = TRAIN_SPLITS.to_vec();
    splits.push(VALIDATION_SPLIT);
    let labels = make_pseudo_labels(&blind.filter(|r| splits.contains(&r.split)), &p.encoder, p.encoder.k_pseudo, p.seed)?;
    let speakers = pretraining_speakers(&blind);
    let results = par_map(&config.modes, config.jobs, |&fusion| -> Result<FusionRow> {
        let encoder = EncoderConfig { fusion, ..p.encoder.clone() };
        let model = EncoderModel::<f64>::new(encoder, speakers.clone(), p.seed)?;
        let papt = run_papt_on_corpus(model, &blind, &labels, &p.pretrain)?;
        let val_loss = papt.best_val_loss();
        let mut start = papt.model;
        init_head(&mut start, &blind)?;
        let ft = finetune(start, &blind, &p.finetune)?;
        let report = scored(predict_all(&ft.model, &blind, Split::TestB, &SpeakerAssignment::Own)?, corpus)?;
        Ok(FusionRow {
            fusion,
            val_loss,
            a_ccc: report.a_ccc,
        })
    });
    results.into_iter().collect()
}
