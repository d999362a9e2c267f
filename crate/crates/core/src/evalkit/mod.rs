//! Evaluation: overall and per-speaker CCC, distribution-shift analysis and
//! the experiment harnesses built on the training pipeline.

mod harness;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::downstream::PredictionSet;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::metrics;
use crate::scalar::Scalar;

pub use harness::{
    ablate_fusion, evaluate_seen, evaluate_unseen, personalization_gap, pretraining_speakers, train_pipeline,
    AblationConfig, FusionRow, GapConfig, GapRow, MethodRow, PipelineConfig, TrainedPipeline,
};
pub use table::{render_table, to_ndjson};

/// Standard deviations below this are floored when fitting Gaussians.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub o_ccc: f64,
    pub a_ccc: f64,
    /// Population standard deviation of the per-speaker values.
    pub a_ccc_std: f64,
    pub per_speaker_ccc: BTreeMap<String, f64>,
    /// Speakers whose truth and predictions were both constant.
    pub excluded: Vec<String>,
}

fn labeled(preds: &PredictionSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::with_capacity(preds.len());
    let mut t = Vec::with_capacity(preds.len());
    for e in preds.entries() {
        let truth = e
            .truth
            .ok_or_else(|| Error::Validation(format!("prediction {:?} has no ground truth", e.id)))?;
        p.push(e.pred);
        t.push(truth);
    }
    Ok((p, t))
}

/// O-CCC over all predictions and A-CCC over speakers.
pub fn evaluate(preds: &PredictionSet) -> Result<EvalReport> {
    let (p, t) = labeled(preds)?;
    let o_ccc = metrics::ccc(&p, &t)?;
    let mut per_speaker_ccc = BTreeMap::new();
    let mut excluded = Vec::new();
    for (speaker, idx) in preds.by_speaker() {
        let sp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let st: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        if sp.len() < 2 {
            return Err(Error::Degenerate(format!(
                "speaker {speaker:?} has {} prediction; per-speaker CCC needs 2",
                sp.len()
            )));
        }
        match metrics::ccc(&sp, &st) {
            Ok(v) => {
                per_speaker_ccc.insert(speaker, v);
            }
            Err(Error::Degenerate(_)) => excluded.push(speaker),
            Err(e) => return Err(e),
        }
    }
    if per_speaker_ccc.is_empty() {
        return Err(Error::Degenerate("no speaker has a defined CCC".into()));
    }
    let values: Vec<f64> = per_speaker_ccc.values().copied().collect();
    Ok(EvalReport {
        o_ccc,
        a_ccc: metrics::mean(&values),
        a_ccc_std: metrics::population_std(&values),
        per_speaker_ccc,
        excluded,
    })
}

/// Mean and population standard deviation of each column (σ floored).
///
/// Returns the fit and the number of floored dimensions.
pub fn fit_diagonal(rows: &[Vec<f64>]) -> Result<(Vec<(f64, f64)>, usize)> {
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!("a Gaussian fit needs 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let mut floored = 0;
    let fit = (0..d)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let s = metrics::population_std(&col);
            if s < SIGMA_FLOOR {
                floored += 1;
            }
            (metrics::mean(&col), s.max(SIGMA_FLOOR))
        })
        .collect();
    Ok((fit, floored))
}

/// `Σ_d KL(N(speaker_d) ‖ N(train_d))` for diagonal Gaussian fits.
///
/// Returns the divergence and the number of dimensions whose σ was floored.
pub fn feature_kl(speaker: &[Vec<f64>], train: &[Vec<f64>]) -> Result<(f64, usize)> {
    let (sp, f1) = fit_diagonal(speaker)?;
    let (tr, f2) = fit_diagonal(train)?;
    if sp.len() != tr.len() {
        return Err(Error::Shape(format!("{} vs {} feature dimensions", sp.len(), tr.len())));
    }
    let mut total = 0.0;
    for (&(m0, s0), &(m1, s1)) in sp.iter().zip(&tr) {
        total += metrics::kl_gaussian(m0, s0, m1, s1)?;
    }
    Ok((total, f1 + f2))
}

/// `KL(N(speaker) ‖ N(train))` for 1-D label samples.
pub fn label_kl(speaker: &[f64], train: &[f64]) -> Result<f64> {
    let rows = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    Ok(feature_kl(&rows(speaker), &rows(train))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerShift {
    pub speaker_id: String,
    pub feature_kl: f64,
    pub label_kl: f64,
    pub ccc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub speakers: Vec<SpeakerShift>,
    pub pcc_feature_perf: f64,
    pub pcc_label_perf: f64,
    pub pcc_feature_label: f64,
    /// Feature dimensions whose σ hit the floor, summed over speakers.
    pub floored_dims: usize,
}

/// Per-speaker feature and label shift against the training set, and how
/// both relate to per-speaker CCC.
///
/// Features are pooled outputs of `model` without a speaker embedding.
/// Label statistics of test speakers come from the truth values in `preds`.
pub fn shift_analysis<T: Scalar>(preds: &PredictionSet, corpus: &Corpus, model: &EncoderModel<T>) -> Result<ShiftReport> {
    let pooled = |samples: &[f32]| -> Result<Vec<f64>> {
        Ok(model.pooled(samples, None)?.into_iter().map(|v| v.as_f64()).collect())
    };
    let mut train_feats = Vec::new();
    let mut train_labels = Vec::new();
    for r in corpus.split(Split::Train) {
        train_feats.push(pooled(&r.samples)?);
        if let Some(l) = r.label {
            train_labels.push(l);
        }
    }
    let report = evaluate(preds)?;
    let samples: BTreeMap<&str, &[f32]> = corpus.records().iter().map(|r| (r.id.as_str(), r.samples.as_slice())).collect();
    let mut speakers = Vec::new();
    let mut floored_dims = 0;
    for (speaker, idx) in preds.by_speaker() {
        let Some(&ccc) = report.per_speaker_ccc.get(&speaker) else { continue };
        let mut feats = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let e = &preds.entries()[i];
            let s = samples
                .get(e.id.as_str())
                .ok_or_else(|| Error::Lookup(format!("utterance {:?} is not in the corpus", e.id)))?;
            feats.push(pooled(s)?);
            labels.push(e.truth.expect("evaluate checked truth"));
        }
        let (fkl, floored) = feature_kl(&feats, &train_feats)?;
        floored_dims += floored;
        speakers.push(SpeakerShift {
            speaker_id: speaker,
            feature_kl: fkl,
            label_kl: label_kl(&labels, &train_labels)?,
            ccc,
        });
    }
    let col = |f: fn(&SpeakerShift) -> f64| speakers.iter().map(f).collect::<Vec<f64>>();
    let (fk, lk, perf) = (col(|s| s.feature_kl), col(|s| s.label_kl), col(|s| s.ccc));
    Ok(ShiftReport {
        pcc_feature_perf: metrics::pearson(&fk, &perf)?,
        pcc_label_perf: metrics::pearson(&lk, &perf)?,
        pcc_feature_label: metrics::pearson(&fk, &lk)?,
        speakers,
        floored_dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::Prediction;
    use rand::Rng as _;

    fn set(rows: &[(&str, f64, f64)]) -> PredictionSet {
        PredictionSet::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(s, p, t))| Prediction {
                    id: format!("u{i}"),
                    speaker_id: s.into(),
                    pred: p,
                    truth: Some(t),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let r = evaluate(&set(&[("a", 1.0, 1.0), ("a", 2.0, 2.0), ("b", 3.0, 3.0), ("b", 5.0, 5.0)])).unwrap();
        assert_eq!((r.o_ccc, r.a_ccc, r.a_ccc_std), (1.0, 1.0, 0.0));
    }

    #[test]
    fn disjoint_ranges_still_concordant() {
        let r = evaluate(&set(&[("a", 1.0, 1.0), ("a", 2.0, 2.0), ("b", 6.0, 6.0), ("b", 7.0, 7.0)])).unwrap();
        assert_eq!(r.a_ccc, 1.0);
        assert_eq!(r.o_ccc, 1.0);
    }

    #[test]
    fn mean_shifted_speakers_match_hand_oracle() {
        // Speaker a predicted +1 too high, speaker b exact.
        let rows = [("a", 3.0, 2.0), ("a", 4.0, 3.0), ("a", 5.0, 4.0), ("b", 5.0, 5.0), ("b", 6.0, 6.0)];
        let r = evaluate(&set(&rows)).unwrap();
        // a: var 2/3 each, cov 2/3, mean gap 1 -> (4/3)/(4/3 + 1) = 4/7.
        assert!((r.per_speaker_ccc["a"] - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.per_speaker_ccc["b"], 1.0);
        assert!((r.a_ccc - (4.0 / 7.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((r.a_ccc_std - (1.0 - 4.0 / 7.0) / 2.0).abs() < 1e-12);
        let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let t: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let n = 5.0;
        let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
        let vp = p.iter().map(|x| (x - mp) * (x - mp)).sum::<f64>() / n;
        let vt = t.iter().map(|x| (x - mt) * (x - mt)).sum::<f64>() / n;
        let cov = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum::<f64>() / n;
        let oracle = 2.0 * cov / (vp + vt + (mp - mt) * (mp - mt));
        assert!((r.o_ccc - oracle).abs() < 1e-12);
    }

    #[test]
    fn constant_speakers_are_excluded() {
        let r = evaluate(&set(&[("a", 2.0, 4.0), ("a", 2.0, 4.0), ("b", 3.0, 3.0), ("b", 5.0, 5.0)])).unwrap();
        assert_eq!(r.excluded, vec!["a".to_string()]);
        assert_eq!(r.per_speaker_ccc.len(), 1);
    }

    #[test]
    fn missing_truth_is_rejected() {
        let mut s = set(&[("a", 1.0, 1.0), ("a", 2.0, 2.0)]);
        s.entries_mut()[0].truth = None;
        assert!(matches!(evaluate(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn feature_kl_reduces_to_scalar_kl() {
        let a = vec![vec![1.0], vec![2.0], vec![4.0]];
        let b = vec![vec![0.0], vec![3.0], vec![3.5], vec![7.0]];
        let (kl, _) = feature_kl(&a, &b).unwrap();
        let fa: Vec<f64> = a.iter().map(|r| r[0]).collect();
        let fb: Vec<f64> = b.iter().map(|r| r[0]).collect();
        let want = metrics::kl_gaussian(
            metrics::mean(&fa),
            metrics::population_std(&fa),
            metrics::mean(&fb),
            metrics::population_std(&fb),
        )
        .unwrap();
        assert_eq!(kl, want);
        assert_eq!(feature_kl(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn feature_kl_matches_per_dimension_loop() {
        let mut r = crate::rng::sub_stream(5, "kl");
        let mut draw = |n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..3).map(|d| shift * d as f64 + r.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = draw(6, 0.5);
        let b = draw(20, 0.0);
        let mut oracle = 0.0;
        for d in 0..3 {
            let fit = |rows: &[Vec<f64>]| {
                let n = rows.len() as f64;
                let m = rows.iter().map(|x| x[d]).sum::<f64>() / n;
                let v = rows.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / n;
                (m, v.sqrt())
            };
            let ((m0, s0), (m1, s1)) = (fit(&a), fit(&b));
            oracle += (s1 / s0).ln() + (s0 * s0 + (m0 - m1).powi(2)) / (2.0 * s1 * s1) - 0.5;
        }
        assert!((feature_kl(&a, &b).unwrap().0 - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_dimensions_are_floored_and_counted() {
        let a = vec![vec![1.0, 2.0], vec![1.0, 3.0]];
        let b = vec![vec![0.0, 2.0], vec![2.0, 3.0]];
        let (kl, floored) = feature_kl(&a, &b).unwrap();
        assert!(kl.is_finite());
        assert_eq!(floored, 1);
        assert!(feature_kl(&a[..1], &b).is_err());
    }
}
