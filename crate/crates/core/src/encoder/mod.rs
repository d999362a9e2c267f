//! Toy speech encoder with a fusable speaker-embedding table.
//!
//! Waveform → strided 1-D convolutions (GELU) → linear projection to
//! `d_model` → optional masking → speaker fusion → sinusoidal positions →
//! pre-norm transformer layers → final layer norm. The frame features feed
//! either the pseudo-label head (pre-training) or mean pooling and the
//! interpreter MLP (emotion regression).

mod checkpoint;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{gradcheck, loss_at, GradcheckBatch, GradcheckEntry, GradcheckItem, GradcheckReport, LossPath};

/// Where the speaker embedding enters the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Added to every frame after the last transformer layer.
    Last,
    /// Added to every frame before the first transformer layer.
    First,
    /// Prepended as an extra frame before the first layer; dropped from the output.
    Prefix,
    /// No speaker conditioning.
    None,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Last, Fusion::First, Fusion::Prefix, Fusion::None];
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Last => "last",
            Fusion::First => "first",
            Fusion::Prefix => "prefix",
            Fusion::None => "none",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion position {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    /// Zero disables attention entirely (linear-only encoder).
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub fusion: Fusion,
    pub k_pseudo: usize,
    pub interpreter_hidden: Vec<usize>,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            conv_channels: vec![16, 32],
            conv_kernels: vec![8, 4],
            conv_strides: vec![4, 4],
            fusion: Fusion::Last,
            k_pseudo: 16,
            interpreter_hidden: vec![128, 32],
            dropout: 0.1,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers > 0 && self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        if self.conv_channels.len() != self.conv_kernels.len()
            || self.conv_channels.len() != self.conv_strides.len()
        {
            return bad("conv_channels, conv_kernels and conv_strides must have equal lengths");
        }
        if self.conv_channels.iter().chain(&self.conv_kernels).chain(&self.conv_strides).any(|&v| v == 0) {
            return bad("convolution sizes must be positive");
        }
        if self.k_pseudo < 2 {
            return bad("k_pseudo must be at least 2");
        }
        if self.interpreter_hidden.contains(&0) {
            return bad("interpreter layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }

    /// Samples per output frame (product of strides).
    pub fn frame_hop(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Shortest waveform that yields one frame.
    pub fn min_samples(&self) -> usize {
        let mut need = 1;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides).rev() {
            need = (need - 1) * s + k;
        }
        need
    }

    /// Frames produced from `n` samples (0 when too short).
    pub fn frame_count(&self, n: usize) -> usize {
        let mut len = n;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }
}

/// Indices into the flat parameter list.
#[derive(Clone, Debug)]
struct Layout {
    conv: Vec<(usize, usize)>,
    proj: (usize, usize),
    mask_emb: usize,
    layers: Vec<LayerLayout>,
    final_norm: Option<(usize, usize)>,
    speaker_table: usize,
    pseudo: (usize, usize),
    interpreter: Vec<HiddenLayout>,
    output: (usize, usize),
}

#[derive(Clone, Debug)]
struct LayerLayout {
    norm1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    norm2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Clone, Debug)]
struct HiddenLayout {
    linear: (usize, usize),
    norm: (usize, usize),
}

enum Init {
    Fan(usize),
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder<'a, T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    rng: &'a mut rng::Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Fan(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt();
                Matrix::from_fn(rows, cols, |_, _| T::of(std * self.rng.sample::<f64, _>(StandardNormal)))
            }
            Init::Normal(std) => {
                Matrix::from_fn(rows, cols, |_, _| T::of(std * self.rng.sample::<f64, _>(StandardNormal)))
            }
        };
        self.names.push(name);
        self.values.push(m);
        self.values.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.weight"), fan_in, fan_out, Init::Fan(fan_in)),
            self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        )
    }

    fn norm(&mut self, name: &str, width: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.gamma"), 1, width, Init::Ones),
            self.add(format!("{name}.beta"), 1, width, Init::Zeros),
        )
    }
}

/// Running batch-norm statistics of one interpreter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Encoder parameters plus the speaker table and both heads.
#[derive(Clone, Debug)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    speakers: Vec<String>,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

/// Forward-pass mode for the interpreter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics; dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
}

/// Parameters of a model placed on a tape.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// Batch statistics observed by a training-mode interpreter pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
}

/// One utterance as seen by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub samples: &'a [f32],
    pub speaker: Option<usize>,
    /// Frames whose projected features are replaced by the mask embedding.
    pub masked: Option<&'a [usize]>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Fresh model; `speakers` fixes the rows of the speaker table.
    pub fn new(config: EncoderConfig, speakers: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if speakers.is_empty() {
            return Err(Error::Config("the speaker table needs at least one speaker".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = speakers.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!("speaker {dup:?} listed twice")));
        }
        let mut init_rng = rng::sub_stream(seed, stream::INIT);
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: &mut init_rng,
        };
        let d = config.d_model;
        let mut conv = Vec::new();
        let mut channels = 1;
        for (i, (&c, &k)) in config.conv_channels.iter().zip(&config.conv_kernels).enumerate() {
            conv.push(b.linear(&format!("conv.{i}"), k * channels, c));
            channels = c;
        }
        let proj = b.linear("proj", channels, d);
        let mask_emb = b.add("mask_emb".into(), 1, d, Init::Normal(0.5));
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let p = format!("layer.{l}");
            layers.push(LayerLayout {
                norm1: b.norm(&format!("{p}.norm1"), d),
                q: b.linear(&format!("{p}.attn.q"), d, d),
                k: b.linear(&format!("{p}.attn.k"), d, d),
                v: b.linear(&format!("{p}.attn.v"), d, d),
                o: b.linear(&format!("{p}.attn.o"), d, d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, config.ffn_dim),
                ff2: b.linear(&format!("{p}.ff2"), config.ffn_dim, d),
            });
        }
        let final_norm = (config.n_layers > 0).then(|| b.norm("final_norm", d));
        let speaker_table = b.add("speaker_table".into(), speakers.len(), d, Init::Normal(0.02));
        let pseudo = b.linear("pseudo_head", d, config.k_pseudo);
        let mut interpreter = Vec::new();
        let mut width = d;
        for (i, &h) in config.interpreter_hidden.iter().enumerate() {
            interpreter.push(HiddenLayout {
                linear: b.linear(&format!("interp.{i}"), width, h),
                norm: b.norm(&format!("interp.{i}.bn"), h),
            });
            width = h;
        }
        let output = b.linear("interp.out", width, 1);
        let running = config
            .interpreter_hidden
            .iter()
            .map(|&h| RunningStats {
                mean: vec![T::zero(); h],
                var: vec![T::one(); h],
            })
            .collect();
        let Builder { names, values, .. } = b;
        Ok(Self {
            config,
            speakers,
            names,
            params: values,
            running,
            layout: Layout {
                conv,
                proj,
                mask_emb,
                layers,
                final_norm,
                speaker_table,
                pseudo,
                interpreter,
                output,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fusion(&self) -> Fusion {
        self.config.fusion
    }

    /// Speaker ids in table-row order.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn speaker_ordinal(&self, speaker_id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker_id)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn speaker_table(&self) -> &Matrix<T> {
        &self.params[self.layout.speaker_table]
    }

    pub fn speaker_table_mut(&mut self) -> &mut Matrix<T> {
        &mut self.params[self.layout.speaker_table]
    }

    /// Same weights with a different fusion position.
    pub fn with_fusion(&self, fusion: Fusion) -> Self {
        let mut m = self.clone();
        m.config.fusion = fusion;
        m
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        Bound { ids }
    }

    fn check_input(&self, input: &EncoderInput<'_>) -> Result<usize> {
        let frames = self.config.frame_count(input.samples.len());
        if frames == 0 {
            return Err(Error::Shape(format!(
                "{} samples is shorter than the {}-sample minimum",
                input.samples.len(),
                self.config.min_samples()
            )));
        }
        if let Some(s) = input.speaker {
            if s >= self.speakers.len() {
                return Err(Error::Lookup(format!(
                    "speaker ordinal {s} outside a table of {} speakers",
                    self.speakers.len()
                )));
            }
        }
        if let Some(mask) = input.masked {
            if let Some(bad) = mask.iter().find(|&&t| t >= frames) {
                return Err(Error::Shape(format!("masked frame {bad} outside {frames} frames")));
            }
        }
        Ok(frames)
    }

    /// Output of the convolutional front-end alone (`T x channels`), no projection.
    pub fn front_end(&self, samples: &[f32]) -> Result<Matrix<T>> {
        self.check_input(&EncoderInput {
            samples,
            speaker: None,
            masked: None,
        })?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut x = tape.constant(Matrix::column_vector(
            samples.iter().map(|&v| T::of(f64::from(v))).collect(),
        ));
        for (i, &(w, b)) in self.layout.conv.iter().enumerate() {
            let cols = tape.im2col(x, self.config.conv_kernels[i], self.config.conv_strides[i])?;
            let y = tape.matmul(cols, bound.ids[w]);
            let y = tape.add_row(y, bound.ids[b]);
            x = tape.gelu(y);
        }
        Ok(tape.value(x).clone())
    }

    /// Frame features `f^p` (`T x d_model`) for one utterance on a tape.
    pub fn encode(&self, tape: &mut Tape<T>, bound: &Bound, input: &EncoderInput<'_>) -> Result<NodeId> {
        let frames = self.check_input(input)?;
        let p = &bound.ids;
        let lay = &self.layout;
        let wave = Matrix::column_vector(input.samples.iter().map(|&v| T::of(f64::from(v))).collect());
        let mut x = tape.constant(wave);
        for (i, &(w, b)) in lay.conv.iter().enumerate() {
            let cols = tape.im2col(x, self.config.conv_kernels[i], self.config.conv_strides[i])?;
            let y = tape.matmul(cols, p[w]);
            let y = tape.add_row(y, p[b]);
            x = tape.gelu(y);
        }
        let y = tape.matmul(x, p[lay.proj.0]);
        x = tape.add_row(y, p[lay.proj.1]);
        debug_assert_eq!(tape.value(x).rows(), frames);
        if let Some(mask) = input.masked {
            if !mask.is_empty() {
                x = tape.replace_rows(x, p[lay.mask_emb], mask);
            }
        }
        let fusion = self.config.fusion;
        let emb = match (fusion, input.speaker) {
            (Fusion::None, _) | (_, None) => None,
            (_, Some(s)) => Some(tape.gather_rows(p[lay.speaker_table], &[s])),
        };
        let mut prefixed = false;
        match (fusion, emb) {
            (Fusion::First, Some(e)) => x = tape.add_row(x, e),
            (Fusion::Prefix, Some(e)) => {
                x = tape.concat_rows(&[e, x]);
                prefixed = true;
            }
            _ => {}
        }
        if !lay.layers.is_empty() {
            let pos = tape.constant(positions(tape.value(x).rows(), self.config.d_model));
            x = tape.add(x, pos);
            for layer in &lay.layers {
                x = self.transformer_layer(tape, p, layer, x);
            }
            if let Some((g, b)) = lay.final_norm {
                x = tape.layer_norm(x, p[g], p[b]);
            }
        }
        if prefixed {
            x = tape.slice_rows(x, 1, frames);
        }
        if let (Fusion::Last, Some(e)) = (fusion, emb) {
            x = tape.add_row(x, e);
        }
        Ok(x)
    }

    fn transformer_layer(&self, tape: &mut Tape<T>, p: &[NodeId], l: &LayerLayout, x: NodeId) -> NodeId {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let h = tape.layer_norm(x, p[l.norm1.0], p[l.norm1.1]);
        let lin = |tape: &mut Tape<T>, input: NodeId, (w, b): (usize, usize)| {
            let y = tape.matmul(input, p[w]);
            tape.add_row(y, p[b])
        };
        let q = lin(tape, h, l.q);
        let k = lin(tape, h, l.k);
        let v = lin(tape, h, l.v);
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = tape.slice_cols(q, i * dh, dh);
            let kh = tape.slice_cols(k, i * dh, dh);
            let vh = tape.slice_cols(v, i * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let att = lin(tape, cat, l.o);
        let x = tape.add(x, att);
        let h = tape.layer_norm(x, p[l.norm2.0], p[l.norm2.1]);
        let f = lin(tape, h, l.ff1);
        let f = tape.gelu(f);
        let f = lin(tape, f, l.ff2);
        tape.add(x, f)
    }

    /// Pseudo-label logits (`T x k_pseudo`) for frame features on a tape.
    pub fn pseudo_head(&self, tape: &mut Tape<T>, bound: &Bound, features: NodeId) -> NodeId {
        let (w, b) = self.layout.pseudo;
        let y = tape.matmul(features, bound.ids[w]);
        tape.add_row(y, bound.ids[b])
    }

    /// Interpreter over a stack of pooled rows (`N x d_model` → `N x 1`).
    pub fn interpret(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        pooled: NodeId,
        mode: Mode,
    ) -> (NodeId, BatchStats<T>) {
        let p = &bound.ids;
        let mut h = pooled;
        let mut stats = Vec::new();
        let mut dropout_rng = match mode {
            Mode::Train { dropout_seed } => Some(rng::sub_stream(dropout_seed, stream::DROPOUT)),
            Mode::Eval => None,
        };
        let keep = 1.0 - self.config.dropout;
        for (i, layer) in self.layout.interpreter.iter().enumerate() {
            let y = tape.matmul(h, p[layer.linear.0]);
            let y = tape.add_row(y, p[layer.linear.1]);
            let y = tape.relu(y);
            let (gamma, beta) = (p[layer.norm.0], p[layer.norm.1]);
            h = match mode {
                Mode::Train { .. } => {
                    let (n, mean, var) = tape.batch_norm(y, gamma, beta);
                    stats.push((mean, var));
                    n
                }
                Mode::Eval => {
                    let rs = &self.running[i];
                    let shift = tape.constant(Matrix::row_vector(rs.mean.iter().map(|&m| -m).collect()));
                    let centered = tape.add_row(y, shift);
                    let (n, w) = tape.value(centered).shape();
                    let inv = Matrix::from_fn(n, w, |_, c| T::one() / (rs.var[c] + T::of(1e-5)).sqrt());
                    let xhat = tape.mul_const(centered, inv);
                    let scaled = tape.mul_row(xhat, gamma);
                    tape.add_row(scaled, beta)
                }
            };
            if let Some(r) = dropout_rng.as_mut() {
                if self.config.dropout > 0.0 {
                    let (n, w) = tape.value(h).shape();
                    let mask = Matrix::from_fn(n, w, |_, _| {
                        if r.random::<f64>() < keep {
                            T::of(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    });
                    h = tape.mul_const(h, mask);
                }
            }
        }
        let y = tape.matmul(h, p[self.layout.output.0]);
        (tape.add_row(y, p[self.layout.output.1]), BatchStats { layers: stats })
    }

    /// Folds training batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.config.bn_momentum);
        for (rs, (mean, var)) in self.running.iter_mut().zip(&stats.layers) {
            for (r, &v) in rs.mean.iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in rs.var.iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }

    /// Personalized frame features for one utterance (inference).
    pub fn forward_features(&self, samples: &[f32], speaker: Option<usize>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.encode(
            &mut tape,
            &bound,
            &EncoderInput {
                samples,
                speaker,
                masked: None,
            },
        )?;
        Ok(tape.value(x).clone())
    }

    /// Unnormalized pseudo-label scores for precomputed frame features.
    pub fn pseudo_logits(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.cols() != self.config.d_model || features.rows() == 0 {
            return Err(Error::Shape(format!(
                "features of shape {:?} do not match d_model {}",
                features.shape(),
                self.config.d_model
            )));
        }
        let (w, b) = self.layout.pseudo;
        let mut out = features.matmul(&self.params[w]);
        let bias = self.params[b].as_slice();
        for r in 0..out.rows() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(bias) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Mean-pooled personalized representation of one utterance.
    pub fn pooled(&self, samples: &[f32], speaker: Option<usize>) -> Result<Vec<T>> {
        Ok(self.forward_features(samples, speaker)?.mean_rows().into_vec())
    }

    /// Emotion prediction for one utterance (inference mode).
    pub fn predict_emotion(&self, samples: &[f32], speaker: Option<usize>) -> Result<T> {
        Ok(self.predict_batch(&[(samples, speaker)])?[0])
    }

    /// Emotion predictions for several utterances (inference mode).
    pub fn predict_batch(&self, items: &[(&[f32], Option<usize>)]) -> Result<Vec<T>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut pooled = Vec::with_capacity(items.len());
        for &(samples, speaker) in items {
            let f = self.encode(
                &mut tape,
                &bound,
                &EncoderInput {
                    samples,
                    speaker,
                    masked: None,
                },
            )?;
            pooled.push(tape.mean_rows(f));
        }
        let stacked = tape.concat_rows(&pooled);
        let (out, _) = self.interpret(&mut tape, &bound, stacked, Mode::Eval);
        Ok(tape.value(out).as_slice().to_vec())
    }
}

/// Sinusoidal position table (`len x d`).
pub fn positions<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(len, d, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
