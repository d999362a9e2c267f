//! Per-speaker label distribution calibration.
//!
//! Each speaker is summarized by a speaker vector, the mean of its mean-pooled
//! utterance representations. A test speaker's predictions are standardized
//! with their own mean and spread, then mapped onto the average label
//! statistics of the `k` most similar training speakers:
//!
//! `ỹ = (y − μ) / σ · σ̄ + μ̄`

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::downstream::{PredictionSet, SpeakerAssignment};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::metrics;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which moments of the predicted distribution are replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    None,
    Mu,
    Sigma,
    Both,
}

impl ShiftMode {
    pub const ALL: [ShiftMode; 4] = [ShiftMode::None, ShiftMode::Mu, ShiftMode::Sigma, ShiftMode::Both];
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftMode::None => "none",
            ShiftMode::Mu => "mu",
            ShiftMode::Sigma => "sigma",
            ShiftMode::Both => "both",
        })
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShiftMode::None),
            "mu" | "mu_only" => Ok(ShiftMode::Mu),
            "sigma" | "sigma_only" => Ok(ShiftMode::Sigma),
            "both" => Ok(ShiftMode::Both),
            other => Err(Error::Config(format!("unknown shift mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub top_k: usize,
    pub mode: ShiftMode,
    pub sigma_floor: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            mode: ShiftMode::Both,
            sigma_floor: 1e-6,
        }
    }
}

/// Speaker vector plus, for training speakers, label statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub vector: Vec<f64>,
    pub n_utterances: usize,
    pub label_mu: Option<f64>,
    pub label_sigma: Option<f64>,
}

/// Mean of the pooled representations of one speaker's utterances.
pub fn speaker_vector<T: Scalar>(model: &EncoderModel<T>, utterances: &[(&[f32], Option<usize>)]) -> Result<Vec<f64>> {
    if utterances.is_empty() {
        return Err(Error::Degenerate("a speaker vector needs at least one utterance".into()));
    }
    let d = model.config().d_model;
    let mut sum = vec![0.0; d];
    for &(samples, speaker) in utterances {
        for (s, v) in sum.iter_mut().zip(model.pooled(samples, speaker)?) {
            *s += v.as_f64();
        }
    }
    let n = utterances.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn resolve_row<T: Scalar>(model: &EncoderModel<T>, speaker_id: &str, assignment: &SpeakerAssignment) -> Result<Option<usize>> {
    let owner = match assignment {
        SpeakerAssignment::Anonymous => return Ok(None),
        SpeakerAssignment::Own => speaker_id,
        SpeakerAssignment::Proxy(map) => map.get(speaker_id).map_or(speaker_id, String::as_str),
    };
    match model.speaker_ordinal(owner) {
        Some(s) => Ok(Some(s)),
        None if model.fusion() == crate::encoder::Fusion::None => Ok(None),
        None => Err(Error::Lookup(format!("speaker {owner:?} has no embedding"))),
    }
}

/// Profiles for every speaker of `split`.
///
/// Label statistics (mean and population standard deviation) are attached
/// only when `with_labels` is set and every utterance of the speaker is labeled.
pub fn build_profiles<T: Scalar>(
    model: &EncoderModel<T>,
    corpus: &Corpus,
    split: Split,
    assignment: &SpeakerAssignment,
    with_labels: bool,
) -> Result<Vec<SpeakerProfile>> {
    let mut groups: BTreeMap<&str, Vec<&crate::corpus::UtteranceRecord>> = BTreeMap::new();
    for r in corpus.split(split) {
        groups.entry(r.speaker_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (speaker_id, records) in groups {
        let row = resolve_row(model, speaker_id, assignment)?;
        let inputs: Vec<(&[f32], Option<usize>)> = records.iter().map(|r| (r.samples.as_slice(), row)).collect();
        let vector = speaker_vector(model, &inputs)?;
        let labels: Option<Vec<f64>> = records.iter().map(|r| r.label).collect();
        let (label_mu, label_sigma) = match labels {
            Some(l) if with_labels => (Some(metrics::mean(&l)), Some(metrics::population_std(&l))),
            _ => (None, None),
        };
        out.push(SpeakerProfile {
            speaker_id: speaker_id.to_string(),
            vector,
            n_utterances: records.len(),
            label_mu,
            label_sigma,
        });
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The `k` profiles most similar to `target`, most similar first.
///
/// Equal similarities are ordered by ascending speaker id.
pub fn topk_similar<'p>(target: &[f64], profiles: &'p [SpeakerProfile], k: usize) -> Result<Vec<(&'p SpeakerProfile, f64)>> {
    if k == 0 || k > profiles.len() {
        return Err(Error::Config(format!(
            "top-k of {k} needs between 1 and {} candidate speakers",
            profiles.len()
        )));
    }
    let mut scored = profiles
        .iter()
        .map(|p| Ok((p, cosine(target, &p.vector)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.speaker_id.cmp(&b.0.speaker_id)));
    scored.truncate(k);
    Ok(scored)
}

/// Unweighted means of the label statistics of `retrieved`.
pub fn estimate_stats(retrieved: &[&SpeakerProfile]) -> Result<(f64, f64)> {
    if retrieved.is_empty() {
        return Err(Error::Degenerate("no profiles to estimate label statistics from".into()));
    }
    let mut mu = 0.0;
    let mut sigma = 0.0;
    for p in retrieved {
        match (p.label_mu, p.label_sigma) {
            (Some(m), Some(s)) => {
                mu += m;
                sigma += s;
            }
            _ => {
                return Err(Error::Validation(format!(
                    "speaker {:?} has no label statistics",
                    p.speaker_id
                )))
            }
        }
    }
    let n = retrieved.len() as f64;
    Ok((mu / n, sigma / n))
}

/// Shifts one speaker's predictions toward `(mu_bar, sigma_bar)`.
///
/// When the predictions' own spread is below `sigma_floor`, only the mean is
/// moved (and `Sigma` mode leaves them unchanged).
pub fn calibrate(preds: &[f64], mu_bar: f64, sigma_bar: f64, mode: ShiftMode, sigma_floor: f64) -> Result<Vec<f64>> {
    if preds.len() < 2 {
        return Err(Error::Degenerate(format!(
            "calibration needs at least 2 predictions, got {}",
            preds.len()
        )));
    }
    let mu = metrics::mean(preds);
    let sigma = metrics::population_std(preds);
    if sigma < sigma_floor {
        return Ok(match mode {
            ShiftMode::Mu | ShiftMode::Both => preds.iter().map(|y| y - mu + mu_bar).collect(),
            ShiftMode::None | ShiftMode::Sigma => preds.to_vec(),
        });
    }
    Ok(match mode {
        ShiftMode::None => preds.to_vec(),
        ShiftMode::Mu => preds.iter().map(|y| y - mu + mu_bar).collect(),
        ShiftMode::Sigma => preds.iter().map(|y| (y - mu) / sigma * sigma_bar + mu).collect(),
        ShiftMode::Both => preds.iter().map(|y| (y - mu) / sigma * sigma_bar + mu_bar).collect(),
    })
}

/// Highest-cosine training speaker for an unseen speaker.
///
/// `base` must be the same encoder that produced `train_profiles`; it is
/// queried without a speaker embedding.
pub fn proxy_speaker<T: Scalar>(
    base: &EncoderModel<T>,
    unseen: &[&[f32]],
    train_profiles: &[SpeakerProfile],
) -> Result<(String, f64)> {
    if train_profiles.is_empty() {
        return Err(Error::Degenerate("no training profiles to choose a proxy from".into()));
    }
    let inputs: Vec<(&[f32], Option<usize>)> = unseen.iter().map(|s| (*s, None)).collect();
    let v = speaker_vector(base, &inputs)?;
    let (best, sim) = topk_similar(&v, train_profiles, 1)?[0];
    Ok((best.speaker_id.clone(), sim))
}

/// Proxy for every speaker of `split`, keyed by the unseen speaker id.
pub fn proxy_map<T: Scalar>(
    base: &EncoderModel<T>,
    corpus: &Corpus,
    split: Split,
    train_profiles_base: &[SpeakerProfile],
) -> Result<BTreeMap<String, String>> {
    let mut groups: BTreeMap<&str, Vec<&[f32]>> = BTreeMap::new();
    for r in corpus.split(split) {
        groups.entry(r.speaker_id.as_str()).or_default().push(r.samples.as_slice());
    }
    groups
        .into_iter()
        .map(|(s, utts)| Ok((s.to_string(), proxy_speaker(base, &utts, train_profiles_base)?.0)))
        .collect()
}

/// Outcome for one test speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Calibrated,
    /// Predictions were nearly constant; only the mean moved.
    MeanShiftOnly,
    /// A single prediction has no spread; left unchanged.
    SkippedSingle,
    /// No target profile for the speaker; left unchanged.
    SkippedNoProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerCalibration {
    pub speaker_id: String,
    pub status: CalibrationStatus,
    pub n_predictions: usize,
    pub retrieved: Vec<String>,
    pub pred_mu: f64,
    pub pred_sigma: f64,
    pub mu_bar: Option<f64>,
    pub sigma_bar: Option<f64>,
}

/// Applies retrieval, estimation and calibration independently per speaker.
///
/// `targets` holds one profile per test speaker (only the vector is used).
/// Truth values are carried over untouched.
pub fn calibrate_prediction_set(
    preds: &PredictionSet,
    targets: &[SpeakerProfile],
    train_profiles: &[SpeakerProfile],
    config: &CalibrationConfig,
) -> Result<(PredictionSet, Vec<SpeakerCalibration>)> {
    let by_id: BTreeMap<&str, &SpeakerProfile> = targets.iter().map(|p| (p.speaker_id.as_str(), p)).collect();
    let mut out = preds.clone();
    let mut report = Vec::new();
    for (speaker, idx) in preds.by_speaker() {
        let values: Vec<f64> = idx.iter().map(|&i| preds.entries()[i].pred).collect();
        let (pred_mu, pred_sigma) = (metrics::mean(&values), metrics::population_std(&values));
        let mut entry = SpeakerCalibration {
            speaker_id: speaker.clone(),
            status: CalibrationStatus::Calibrated,
            n_predictions: values.len(),
            retrieved: Vec::new(),
            pred_mu,
            pred_sigma,
            mu_bar: None,
            sigma_bar: None,
        };
        if values.len() < 2 {
            entry.status = CalibrationStatus::SkippedSingle;
            report.push(entry);
            continue;
        }
        let Some(target) = by_id.get(speaker.as_str()) else {
            entry.status = CalibrationStatus::SkippedNoProfile;
            report.push(entry);
            continue;
        };
        let retrieved = topk_similar(&target.vector, train_profiles, config.top_k)?;
        let profiles: Vec<&SpeakerProfile> = retrieved.iter().map(|(p, _)| *p).collect();
        let (mu_bar, sigma_bar) = estimate_stats(&profiles)?;
        let shifted = calibrate(&values, mu_bar, sigma_bar, config.mode, config.sigma_floor)?;
        for (&i, v) in idx.iter().zip(shifted) {
            out.entries_mut()[i].pred = v;
        }
        if pred_sigma < config.sigma_floor {
            entry.status = CalibrationStatus::MeanShiftOnly;
        }
        entry.retrieved = profiles.iter().map(|p| p.speaker_id.clone()).collect();
        entry.mu_bar = Some(mu_bar);
        entry.sigma_bar = Some(sigma_bar);
        report.push(entry);
    }
    Ok((out, report))
}

#[derive(Serialize, Deserialize)]
struct ProfileLine {
    speaker_id: String,
    n_utterances: usize,
    mu: Option<f64>,
    sigma: Option<f64>,
    vector_path: String,
}

/// Writes `profiles.ndjson` and one PSER vector per speaker under `dir`.
pub fn save_profiles(profiles: &[SpeakerProfile], dir: &Path) -> Result<()> {
    let vectors = dir.join("vectors");
    fs::create_dir_all(&vectors).map_err(|e| Error::io(&vectors, e))?;
    let mut text = String::new();
    for p in profiles {
        let rel = format!("vectors/{}.pser", p.speaker_id);
        Tensor::vector(p.vector.iter().map(|&v| v as f32).collect()).save(&dir.join(&rel))?;
        let line = ProfileLine {
            speaker_id: p.speaker_id.clone(),
            n_utterances: p.n_utterances,
            mu: p.label_mu,
            sigma: p.label_sigma,
            vector_path: rel,
        };
        text.push_str(&serde_json::to_string(&line).expect("profile serializes"));
        text.push('\n');
    }
    let path = dir.join("profiles.ndjson");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_profiles(dir: &Path) -> Result<Vec<SpeakerProfile>> {
    let path = dir.join("profiles.ndjson");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: ProfileLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let t = Tensor::load(&dir.join(&l.vector_path))?;
        out.push(SpeakerProfile {
            speaker_id: l.speaker_id,
            vector: t.data.iter().map(|&v| f64::from(v)).collect(),
            n_utterances: l.n_utterances,
            label_mu: l.mu,
            label_sigma: l.sigma,
        });
    }
    Ok(out)
}
