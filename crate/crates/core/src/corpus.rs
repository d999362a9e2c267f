//! Utterance records, corpus persistence and the synthetic corpus generator.
//!
//! A manifest is newline-delimited JSON: one header object followed by one
//! object per utterance. Waveforms live next to the manifest as `PSER`
//! tensor files referenced through `samples_path`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const LABEL_MIN: f64 = 1.0;
pub const LABEL_MAX: f64 = 7.0;

/// Corpus partition. `TestA` and `TestB` share speakers; `TestC` speakers are unseen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    TestA,
    TestB,
    TestC,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Validation,
        Split::TestA,
        Split::TestB,
        Split::TestC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestA => "test_a",
            Split::TestB => "test_b",
            Split::TestC => "test_c",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split tag {s:?}")))
    }
}

/// Emotion dimension carried by the corpus labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Arousal,
    Valence,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arousal" => Ok(Target::Arousal),
            "valence" => Ok(Target::Valence),
            other => Err(Error::Config(format!("unknown target {other:?}"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Arousal => "arousal",
            Target::Valence => "valence",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub samples: Vec<f32>,
    pub label: Option<f64>,
}

/// Immutable collection of utterances with a stable speaker ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    target: Target,
    records: Vec<UtteranceRecord>,
    speakers: Vec<String>,
    speaker_index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus; speaker ordinals follow first appearance in `records`.
    pub fn new(target: Target, records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut speakers = Vec::new();
        for r in &records {
            if !speakers.contains(&r.speaker_id) {
                speakers.push(r.speaker_id.clone());
            }
        }
        Self::with_speakers(target, speakers, records)
    }

    /// Builds a corpus with an explicit speaker ordering.
    pub fn with_speakers(
        target: Target,
        speakers: Vec<String>,
        records: Vec<UtteranceRecord>,
    ) -> Result<Self> {
        let mut speaker_index = HashMap::with_capacity(speakers.len());
        for (i, s) in speakers.iter().enumerate() {
            if speaker_index.insert(s.clone(), i).is_some() {
                return Err(Error::Validation(format!("speaker {s:?} listed twice")));
            }
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id {:?}", r.id)));
            }
            if !speaker_index.contains_key(&r.speaker_id) {
                return Err(Error::Validation(format!(
                    "utterance {:?} has unindexed speaker {:?}",
                    r.id, r.speaker_id
                )));
            }
            if let Some(y) = r.label {
                if !(LABEL_MIN..=LABEL_MAX).contains(&y) {
                    return Err(Error::Validation(format!(
                        "utterance {:?} label {y} outside [1, 7]",
                        r.id
                    )));
                }
            }
        }
        Ok(Self {
            target,
            records,
            speakers,
            speaker_index,
        })
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Speaker ids in ordinal order.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn speaker_ordinal(&self, speaker_id: &str) -> Option<usize> {
        self.speaker_index.get(speaker_id).copied()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn in_splits<'a>(&'a self, splits: &'a [Split]) -> impl Iterator<Item = &'a UtteranceRecord> {
        self.records.iter().filter(move |r| splits.contains(&r.split))
    }

    /// Distinct speakers of a split, in ordinal order.
    pub fn speakers_in(&self, split: Split) -> Vec<String> {
        let present: HashSet<&str> = self.split(split).map(|r| r.speaker_id.as_str()).collect();
        self.speakers
            .iter()
            .filter(|s| present.contains(s.as_str()))
            .cloned()
            .collect()
    }

    /// New corpus restricted to the records accepted by `keep` (speaker order preserved).
    pub fn filter(&self, mut keep: impl FnMut(&UtteranceRecord) -> bool) -> Corpus {
        let records: Vec<UtteranceRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let used: HashSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
        let speakers = self
            .speakers
            .iter()
            .filter(|s| used.contains(s.as_str()))
            .cloned()
            .collect();
        Corpus::with_speakers(self.target, speakers, records).expect("subset of a valid corpus")
    }

    /// Copy of the corpus with labels removed from the given splits.
    pub fn without_labels(&self, splits: &[Split]) -> Corpus {
        let mut c = self.clone();
        for r in &mut c.records {
            if splits.contains(&r.split) {
                r.label = None;
            }
        }
        c
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    target: Target,
    speakers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    speaker_id: String,
    split: String,
    label: Option<f64>,
    samples_path: String,
}

const MANIFEST_FORMAT: &str = "perser-manifest";

fn sample_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("samples/{safe}.pser")
}

/// Writes the manifest at `path` and the waveforms under `<dir of path>/samples/`.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        target: corpus.target,
        speakers: corpus.speakers.clone(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    let mut used_names = HashSet::new();
    for r in &corpus.records {
        let mut rel = sample_file_name(&r.id);
        let mut n = 1;
        while !used_names.insert(rel.clone()) {
            rel = format!("{}-{n}.pser", sample_file_name(&r.id).trim_end_matches(".pser"));
            n += 1;
        }
        Tensor::vector(r.samples.clone()).save(&dir.join(&rel))?;
        let line = ManifestLine {
            id: r.id.clone(),
            speaker_id: r.speaker_id.clone(),
            split: r.split.as_str().into(),
            label: r.label,
            samples_path: rel,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Corpus> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing manifest header".into(),
            })
        }
    };
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != MANIFEST_FORMAT || header.version != 1 {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported manifest {} v{}", header.format, header.version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let split: Split = entry
            .split
            .parse()
            .map_err(|e: Error| Error::Validation(format!("line {lineno}: {e}")))?;
        let samples_path: PathBuf = dir.join(&entry.samples_path);
        let tensor = Tensor::load(&samples_path)?;
        if tensor.dims.len() != 1 {
            return Err(Error::Format {
                path: samples_path,
                message: format!("expected a rank-1 waveform, got dims {:?}", tensor.dims),
            });
        }
        records.push(UtteranceRecord {
            id: entry.id,
            speaker_id: entry.speaker_id,
            split,
            samples: tensor.data,
            label: entry.label,
        });
    }
    Corpus::with_speakers(header.target, header.speakers, records)
}

/// Generator settings for a synthetic corpus with planted speaker effects.
///
/// Each speaker draws a shift latent `u ∈ [-1, 1]`. The latent sets the label
/// mean (`label_mu_range` mapped linearly), the label spread (`label_sigma_range`
/// low end at `u = 0`, growing with `|u|`) and the direction of a waveform bias
/// of size `feature_shift_scale`. A random per-speaker component
/// (`identity_scale`) makes every speaker's bias unique. Test speakers draw
/// their latent scaled by `test_shift_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_speakers_per_split: BTreeMap<Split, usize>,
    pub utterances_per_speaker: usize,
    /// Per-split overrides of `utterances_per_speaker`.
    pub utterances_per_split: BTreeMap<Split, usize>,
    pub t_raw: usize,
    pub feature_shift_scale: f64,
    pub identity_scale: f64,
    pub label_mu_range: (f64, f64),
    pub label_sigma_range: (f64, f64),
    pub target: Target,
    /// Samples per frame of the planted structure; match the encoder hop.
    pub frame_hop: usize,
    pub n_phones: usize,
    /// Sharpness of each speaker's preference over phones.
    pub phone_concentration: f64,
    /// Probability that a frame repeats the previous phone.
    pub phone_persistence: f64,
    pub label_signal: f64,
    pub noise_scale: f64,
    /// Speakers with wide label spread express emotion proportionally less,
    /// so the acoustic spread of every speaker matches the lowest sigma.
    pub expressivity_normalized: bool,
    /// Each unseen (test_c) speaker copies the latents of one distinct training speaker.
    pub twin_unseen: bool,
    /// Multiplier on the shift latent of test speakers; above 1 they leave the training range.
    pub test_shift_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_speakers_per_split: BTreeMap::from([
                (Split::Train, 24),
                (Split::Validation, 4),
                (Split::TestA, 6),
                (Split::TestB, 6),
                (Split::TestC, 6),
            ]),
            utterances_per_speaker: 12,
            utterances_per_split: BTreeMap::from([(Split::TestA, 4)]),
            t_raw: 384,
            feature_shift_scale: 0.8,
            identity_scale: 0.6,
            label_mu_range: (3.0, 5.0),
            label_sigma_range: (0.4, 1.4),
            target: Target::Arousal,
            frame_hop: 16,
            n_phones: 8,
            phone_concentration: 1.5,
            phone_persistence: 0.5,
            label_signal: 0.6,
            noise_scale: 0.3,
            expressivity_normalized: true,
            twin_unseen: false,
            test_shift_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Podcast-corpus speaker counts (987/41/50/50/62) scaled down by ten.
    pub fn podcast_scaled() -> Self {
        Self {
            n_speakers_per_split: BTreeMap::from([
                (Split::Train, 99),
                (Split::Validation, 4),
                (Split::TestA, 5),
                (Split::TestB, 5),
                (Split::TestC, 6),
            ]),
            ..Self::default()
        }
    }

    pub fn speakers(&self, split: Split) -> usize {
        self.n_speakers_per_split.get(&split).copied().unwrap_or(0)
    }

    pub fn utterances(&self, split: Split) -> usize {
        self.utterances_per_split
            .get(&split)
            .copied()
            .unwrap_or(self.utterances_per_speaker)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (mlo, mhi) = self.label_mu_range;
        let (slo, shi) = self.label_sigma_range;
        if !(mlo <= mhi && mlo >= LABEL_MIN && mhi <= LABEL_MAX) {
            return bad(format!("label_mu_range {mlo}..{mhi} must be a non-empty interval within [1, 7]"));
        }
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad(format!("label_sigma_range {slo}..{shi} must be a non-empty positive interval"));
        }
        if !(self.feature_shift_scale >= 0.0 && self.identity_scale >= 0.0 && self.noise_scale >= 0.0) {
            return bad("feature_shift_scale, identity_scale and noise_scale must be non-negative".into());
        }
        if self.frame_hop == 0 || self.t_raw < self.frame_hop {
            return bad(format!(
                "t_raw {} must be at least one frame hop ({})",
                self.t_raw, self.frame_hop
            ));
        }
        if self.n_phones == 0 {
            return bad("n_phones must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.phone_persistence) {
            return bad("phone_persistence must lie in [0, 1]".into());
        }
        if self.speakers(Split::TestA) != self.speakers(Split::TestB) {
            return bad("test_a and test_b share speakers, so their speaker counts must match".into());
        }
        if !(self.test_shift_scale >= 0.0 && self.test_shift_scale.is_finite()) {
            return bad("test_shift_scale must be finite and non-negative".into());
        }
        if self.twin_unseen && self.speakers(Split::TestC) > self.speakers(Split::Train) {
            return bad("twin_unseen needs at least as many training as unseen speakers".into());
        }
        Ok(())
    }
}

/// Latent parameters planted for one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerLatent {
    pub speaker_id: String,
    pub shift: f64,
    pub bias: Vec<f64>,
    pub phone_weights: Vec<f64>,
    pub label_mu: f64,
    pub label_sigma: f64,
    /// For twinned unseen speakers, the training speaker whose latents were copied.
    pub twin_of: Option<String>,
}

/// Synthetic corpus together with the latents used to plant it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub latents: Vec<SpeakerLatent>,
}

fn unit_pattern(rng: &mut rng::Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm * (len as f64).sqrt()).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    Ok(generate_synthetic_with_latents(spec)?.corpus)
}

/// Generates the corpus and returns the planted per-speaker latents.
pub fn generate_synthetic_with_latents(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::sub_stream(spec.seed, stream::DATA);
    let hop = spec.frame_hop;
    let shift_dir = unit_pattern(&mut rng, hop);
    let label_dir = unit_pattern(&mut rng, hop);
    let phones: Vec<Vec<f64>> = (0..spec.n_phones).map(|_| unit_pattern(&mut rng, hop)).collect();
    let (mlo, mhi) = spec.label_mu_range;
    let (slo, shi) = spec.label_sigma_range;
    let mu_mid = 0.5 * (mlo + mhi);
    let signal = match spec.target {
        Target::Arousal => spec.label_signal,
        Target::Valence => 0.6 * spec.label_signal,
    };

    let draw_latent = |rng: &mut rng::Rng, speaker_id: String, scale: f64| {
        let shift: f64 = scale * rng.random_range(-1.0..=1.0);
        let ident: Vec<f64> = (0..hop)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = shift_dir
            .iter()
            .zip(&ident)
            .map(|(&d, &r)| spec.feature_shift_scale * (shift * d + spec.identity_scale * r))
            .collect();
        let logits: Vec<f64> = (0..spec.n_phones)
            .map(|_| spec.phone_concentration * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        SpeakerLatent {
            speaker_id,
            shift,
            bias,
            phone_weights: exp.into_iter().map(|e| e / total).collect(),
            label_mu: (mu_mid + shift * 0.5 * (mhi - mlo)).clamp(LABEL_MIN, LABEL_MAX),
            label_sigma: slo + shift.abs() * (shi - slo),
            twin_of: None,
        }
    };

    let groups: [(&str, &[Split]); 4] = [
        ("train", &[Split::Train]),
        ("val", &[Split::Validation]),
        ("test", &[Split::TestA, Split::TestB]),
        ("unseen", &[Split::TestC]),
    ];
    let mut latents: Vec<(SpeakerLatent, &[Split])> = Vec::new();
    for (prefix, splits) in groups {
        let n = spec.speakers(splits[0]);
        let twin_pool: Vec<usize> = if prefix == "unseen" && spec.twin_unseen {
            let mut idx: Vec<usize> = (0..spec.speakers(Split::Train)).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx
        } else {
            Vec::new()
        };
        for i in 0..n {
            let id = format!("spk-{prefix}-{i:04}");
            let latent = if let Some(&src) = twin_pool.get(i) {
                let mut copy = latents[src].0.clone();
                copy.twin_of = Some(copy.speaker_id.clone());
                copy.speaker_id = id;
                copy
            } else {
                let scale = if matches!(prefix, "test" | "unseen") { spec.test_shift_scale } else { 1.0 };
                draw_latent(&mut rng, id, scale)
            };
            latents.push((latent, splits));
        }
    }

    let mut records = Vec::new();
    for (latent, splits) in &latents {
        let gain = if spec.expressivity_normalized {
            slo / latent.label_sigma
        } else {
            1.0
        };
        for &split in *splits {
            for k in 0..spec.utterances(split) {
                let z: f64 = rng.sample(StandardNormal);
                let y = (latent.label_mu + latent.label_sigma * z).clamp(LABEL_MIN, LABEL_MAX);
                let expression = (latent.label_mu - mu_mid) + (y - latent.label_mu) * gain;
                let samples = synth_waveform(
                    &mut rng,
                    spec,
                    latent,
                    &phones,
                    &label_dir,
                    signal * expression,
                );
                records.push(UtteranceRecord {
                    id: format!("{}-{}-{k:03}", latent.speaker_id, split.as_str()),
                    speaker_id: latent.speaker_id.clone(),
                    split,
                    samples,
                    label: Some(round_label(y)),
                });
            }
        }
    }
    let corpus = Corpus::new(spec.target, records)?;
    Ok(SyntheticCorpus {
        corpus,
        latents: latents.into_iter().map(|(l, _)| l).collect(),
    })
}

/// Labels are stored at f32 precision, like the waveforms.
fn round_label(y: f64) -> f64 {
    f64::from(y as f32).clamp(LABEL_MIN, LABEL_MAX)
}

fn synth_waveform(
    rng: &mut rng::Rng,
    spec: &SyntheticSpec,
    latent: &SpeakerLatent,
    phones: &[Vec<f64>],
    label_dir: &[f64],
    label_amp: f64,
) -> Vec<f32> {
    let hop = spec.frame_hop;
    let n_frames = spec.t_raw.div_ceil(hop);
    let mut out = Vec::with_capacity(n_frames * hop);
    let mut phone = sample_phone(rng, &latent.phone_weights);
    for t in 0..n_frames {
        if t > 0 && rng.random::<f64>() >= spec.phone_persistence {
            phone = sample_phone(rng, &latent.phone_weights);
        }
        for j in 0..hop {
            let noise: f64 = rng.sample(StandardNormal);
            let v = phones[phone][j] + latent.bias[j] + label_amp * label_dir[j] + spec.noise_scale * noise;
            out.push(v as f32);
        }
    }
    out.truncate(spec.t_raw);
    out
}

fn sample_phone(rng: &mut rng::Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Mean over frames of the raw waveform cut into `hop`-sample frames.
pub fn mean_frame(samples: &[f32], hop: usize) -> Vec<f64> {
    let n = samples.len() / hop;
    let mut acc = vec![0.0; hop];
    for frame in samples.chunks_exact(hop) {
        for (a, &s) in acc.iter_mut().zip(frame) {
            *a += f64::from(s);
        }
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_speakers_per_split: BTreeMap::from([(Split::Train, 2), (Split::TestA, 1), (Split::TestB, 1)]),
            utterances_per_speaker: 3,
            utterances_per_split: BTreeMap::new(),
            t_raw: 64,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn labels_follow_planted_statistics() {
        let spec = SyntheticSpec {
            n_speakers_per_split: BTreeMap::from([(Split::Train, 1)]),
            utterances_per_speaker: 20_000,
            utterances_per_split: BTreeMap::new(),
            t_raw: 16,
            label_mu_range: (4.0, 4.0),
            label_sigma_range: (0.5, 0.5),
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let y: Vec<f64> = c.records().iter().map(|r| r.label.unwrap()).collect();
        assert!((crate::metrics::mean(&y) - 4.0).abs() < 0.02);
        assert!((crate::metrics::population_std(&y) - 0.5).abs() < 0.02);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&tiny_spec()).unwrap();
        let b = generate_synthetic(&tiny_spec()).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..tiny_spec() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn podcast_scaled_speaker_counts() {
        let spec = SyntheticSpec {
            utterances_per_speaker: 1,
            utterances_per_split: BTreeMap::new(),
            t_raw: 16,
            ..SyntheticSpec::podcast_scaled()
        };
        let c = generate_synthetic(&spec).unwrap();
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| c.speakers_in(s).len()).collect();
        assert_eq!(counts, vec![99, 4, 5, 5, 6]);
        assert_eq!(c.speakers_in(Split::TestA), c.speakers_in(Split::TestB));
        let train: HashSet<String> = c.speakers_in(Split::Train).into_iter().collect();
        assert!(c.speakers_in(Split::TestC).iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_sigma = SyntheticSpec { label_sigma_range: (0.0, 1.0), ..tiny_spec() };
        assert!(matches!(generate_synthetic(&bad_sigma), Err(Error::Config(_))));
        let bad_mu = SyntheticSpec { label_mu_range: (5.0, 4.0), ..tiny_spec() };
        assert!(matches!(generate_synthetic(&bad_mu), Err(Error::Config(_))));
        let mut unequal = tiny_spec();
        unequal.n_speakers_per_split.insert(Split::TestB, 2);
        assert!(matches!(generate_synthetic(&unequal), Err(Error::Config(_))));
    }

    #[test]
    fn test_shift_scale_widens_only_test_latents() {
        let spec = SyntheticSpec {
            n_speakers_per_split: BTreeMap::from([(Split::Train, 8), (Split::TestA, 8), (Split::TestB, 8)]),
            ..tiny_spec()
        };
        let base = generate_synthetic_with_latents(&spec).unwrap();
        let wide = generate_synthetic_with_latents(&SyntheticSpec { test_shift_scale: 3.0, ..spec.clone() }).unwrap();
        for (a, b) in base.latents.iter().zip(&wide.latents) {
            if a.speaker_id.starts_with("spk-test") {
                assert!((b.shift - 3.0 * a.shift).abs() < 1e-12, "{}", a.speaker_id);
                assert!((1.0..=7.0).contains(&b.label_mu));
            } else {
                assert_eq!(a.shift, b.shift);
            }
        }
        let bad = SyntheticSpec { test_shift_scale: f64::NAN, ..spec };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn twins_copy_training_latents() {
        let spec = SyntheticSpec {
            twin_unseen: true,
            n_speakers_per_split: BTreeMap::from([(Split::Train, 5), (Split::TestC, 3)]),
            ..tiny_spec()
        };
        let s = generate_synthetic_with_latents(&spec).unwrap();
        let twins: Vec<&SpeakerLatent> = s.latents.iter().filter(|l| l.twin_of.is_some()).collect();
        assert_eq!(twins.len(), 3);
        for t in twins {
            let src = s
                .latents
                .iter()
                .find(|l| Some(&l.speaker_id) == t.twin_of.as_ref())
                .unwrap();
            assert_eq!(src.bias, t.bias);
            assert_eq!(src.label_sigma, t.label_sigma);
        }
    }

    #[test]
    fn planted_shift_identifies_speakers() {
        let spec = SyntheticSpec {
            n_speakers_per_split: BTreeMap::from([(Split::Train, 5)]),
            utterances_per_speaker: 50,
            utterances_per_split: BTreeMap::new(),
            t_raw: 256,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let speakers = c.speakers().to_vec();
        // Fit centroids on even utterances, classify odd ones.
        let mut sums = vec![vec![0.0; 16]; speakers.len()];
        let mut counts = vec![0usize; speakers.len()];
        let mut held_out = Vec::new();
        for (i, r) in c.records().iter().enumerate() {
            let s = c.speaker_ordinal(&r.speaker_id).unwrap();
            let f = mean_frame(&r.samples, 16);
            if i % 2 == 0 {
                sums[s].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
                counts[s] += 1;
            } else {
                held_out.push((s, f));
            }
        }
        let centroids: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(v, &n)| v.iter().map(|x| x / n as f64).collect())
            .collect();
        let correct = held_out
            .iter()
            .filter(|(s, f)| {
                let best = (0..centroids.len())
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == *s
            })
            .count();
        let accuracy = correct as f64 / held_out.len() as f64;
        assert!(accuracy > 0.2, "accuracy {accuracy}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ndjson");
        let mut c = generate_synthetic(&tiny_spec()).unwrap();
        c.records[0].label = None;
        write_manifest(&c, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), c.len() + 1);
        assert!(text.lines().nth(1).unwrap().contains("\"label\":null"));
        assert_eq!(read_manifest(&path).unwrap(), c);
    }

    #[test]
    fn empty_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ndjson");
        let c = Corpus::new(Target::Valence, Vec::new()).unwrap();
        write_manifest(&c, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert_eq!(read_manifest(&path).unwrap(), c);
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ndjson");
        let mut c = generate_synthetic(&tiny_spec()).unwrap();
        c.records.truncate(3);
        write_manifest(&c, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();

        lines[2] = "{not json".into();
        fs::write(&path, lines.join("\n")).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replace("\"split\":\"train\"", "\"split\":\"holdout\"");
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Validation(_))));
    }
}
