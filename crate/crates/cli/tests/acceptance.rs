//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use perser_core::calibrate::{calibrate, proxy_map, build_profiles, topk_similar, CalibrationConfig, ShiftMode, SpeakerProfile};
use perser_core::corpus::{generate_synthetic, generate_synthetic_with_latents, Split, SyntheticSpec, Target};
use perser_core::downstream::{predict_all, FinetuneConfig, SpeakerAssignment};
use perser_core::encoder::{gradcheck, EncoderConfig, EncoderModel, Fusion, GradcheckBatch, GradcheckItem, LossPath};
use perser_core::evalkit::{
    ablate_fusion, evaluate_seen, evaluate_unseen, personalization_gap, pretraining_speakers, shift_analysis,
    train_pipeline, AblationConfig, GapConfig, MethodRow, PipelineConfig,
};
use perser_core::metrics::{ccc, mean, population_std};
use perser_core::pretrain::PretrainConfig;
use perser_core::rng::sub_stream;
use rand::Rng;

type Outcome = Result<String, String>;

const SEEDS: u64 = 5;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Outcome {
    if elapsed.as_secs() >= limit_secs {
        Err(format!("{detail}; took {elapsed:.1?}, limit {limit_secs} s"))
    } else {
        Ok(detail)
    }
}

fn majority(wins: u64, detail: String) -> Outcome {
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pipeline_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        encoder: EncoderConfig::default(),
        pretrain: PretrainConfig { seed, ..PretrainConfig::default() },
        finetune: FinetuneConfig { seed, ..FinetuneConfig::default() },
        seed,
    }
}

fn row<'a>(rows: &'a [MethodRow], name: &str) -> Result<&'a MethodRow, String> {
    rows.iter().find(|r| r.method == name).ok_or_else(|| format!("no row {name:?}"))
}

/// Direct two-pass population formula.
fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    2.0 * sxy / n / (sxx / n + syy / n + (mx - my) * (mx - my))
}

fn c1() -> Outcome {
    let t = Instant::now();
    let mut r = sub_stream(1, "acceptance");
    let x: Vec<f64> = (0..50).map(|_| r.random_range(1.0..7.0)).collect();
    let self_ccc = ccc(&x, &x).map_err(fail)?;
    if self_ccc != 1.0 {
        return Err(format!("ccc(x, x) = {self_ccc}"));
    }
    let constant = ccc(&x, &vec![4.0; x.len()]).map_err(fail)?;
    if constant != 0.0 {
        return Err(format!("constant prediction ccc = {constant}"));
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(2..200);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let shift = r.random_range(-2.0..2.0);
        let b: Vec<f64> = a.iter().map(|v| 0.6 * v + shift + r.random_range(-3.0..3.0)).collect();
        worst = worst.max((ccc(&a, &b).map_err(fail)? - ccc_oracle(&a, &b)).abs());
    }
    let detail = format!("max |ccc - oracle| = {worst:.2e} over 200 pairs");
    if worst > 1e-12 {
        return Err(detail);
    }
    within(t.elapsed(), 1, detail)
}

fn c2() -> Outcome {
    let t = Instant::now();
    let config = EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        conv_channels: vec![4, 8],
        k_pseudo: 4,
        interpreter_hidden: vec![16, 8],
        fusion: Fusion::Last,
        ..EncoderConfig::default()
    };
    let model = EncoderModel::<f64>::new(config, vec!["a".into(), "b".into()], 11).map_err(fail)?;
    if model.param_count() > 5000 {
        return Err(format!("{} parameters", model.param_count()));
    }
    let mut r = sub_stream(2, "acceptance");
    let items = (0..3)
        .map(|i| GradcheckItem {
            samples: (0..100).map(|_| r.random_range(-1.0f32..1.0)).collect(),
            speaker: if i == 2 { None } else { Some(i) },
            pseudo_labels: (0..6).map(|_| r.random_range(0..4)).collect(),
            mask: vec![0, 2, 3],
            label: r.random_range(1.0..7.0),
        })
        .collect();
    let report = gradcheck(&model, &GradcheckBatch { items }, 1e-4).map_err(fail)?;
    let worst = |path: LossPath| {
        report
            .entries
            .iter()
            .filter(|e| e.loss == path)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    };
    let detail = format!(
        "{} parameters, max rel err L_pt {:.2e}, L_CCC {:.2e}",
        model.param_count(),
        worst(LossPath::Pretrain),
        worst(LossPath::Ccc)
    );
    if !report.passed || report.max_rel_err >= 1e-4 {
        return Err(format!("{detail}; non-finite {:?}", report.non_finite));
    }
    within(t.elapsed(), 60, detail)
}

fn c3() -> Outcome {
    let t = Instant::now();
    let mut r = sub_stream(3, "acceptance");
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(2..60);
        let center = r.random_range(1.0..7.0);
        let spread = r.random_range(0.05..3.0);
        let preds: Vec<f64> = (0..n).map(|_| center + spread * r.random_range(-1.0..1.0)).collect();
        let (mu, sigma) = (mean(&preds), population_std(&preds));
        let mu_bar = r.random_range(1.0..7.0);
        let sigma_bar = r.random_range(0.1..2.0);
        let run = |mode| calibrate(&preds, mu_bar, sigma_bar, mode, 1e-6).map_err(fail);
        let both = run(ShiftMode::Both)?;
        let mu_only = run(ShiftMode::Mu)?;
        let sigma_only = run(ShiftMode::Sigma)?;
        if run(ShiftMode::None)? != preds {
            return Err("mode none changed the predictions".into());
        }
        for err in [
            mean(&both) - mu_bar,
            population_std(&both) - sigma_bar,
            mean(&mu_only) - mu_bar,
            population_std(&mu_only) - sigma,
            mean(&sigma_only) - mu,
            population_std(&sigma_only) - sigma_bar,
        ] {
            worst = worst.max(err.abs());
        }
    }
    let detail = format!("max moment error {worst:.2e} over 500 sets");
    if worst > 1e-9 {
        return Err(detail);
    }
    within(t.elapsed(), 1, detail)
}

fn random_profiles(r: &mut impl Rng, n: usize, dim: usize) -> Vec<SpeakerProfile> {
    (0..n)
        .map(|i| SpeakerProfile {
            speaker_id: format!("spk-{i:03}"),
            vector: (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            n_utterances: 1,
            label_mu: Some(4.0),
            label_sigma: Some(1.0),
        })
        .collect()
}

fn c4() -> Outcome {
    let mut r = sub_stream(4, "acceptance");
    for trial in 0..100 {
        let n = r.random_range(2..40);
        let dim = r.random_range(2..16);
        let profiles = random_profiles(&mut r, n, dim);
        let target: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let k = r.random_range(1..=n);
        let got = topk_similar(&target, &profiles, k).map_err(fail)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(f64, &str)> = profiles
            .iter()
            .map(|p| {
                let dot: f64 = p.vector.iter().zip(&target).map(|(a, b)| a * b).sum();
                (dot / (norm(&p.vector) * norm(&target)), p.speaker_id.as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        for (i, (p, s)) in got.iter().enumerate() {
            if p.speaker_id != all[i].1 || (s - all[i].0).abs() > 1e-12 {
                return Err(format!("instance {trial}: rank {i} is {} but exhaustive sort gives {}", p.speaker_id, all[i].1));
            }
        }
        if got.len() != k {
            return Err(format!("instance {trial}: {} results for k = {k}", got.len()));
        }
    }
    let mut hits = 0;
    for _ in 0..100 {
        let profiles = random_profiles(&mut r, 30, 16);
        let planted = r.random_range(0..30);
        let scale = r.random_range(0.1..10.0);
        let target: Vec<f64> = profiles[planted].vector.iter().map(|v| v * scale).collect();
        let top = topk_similar(&target, &profiles, 1).map_err(fail)?;
        if top[0].0.speaker_id == profiles[planted].speaker_id {
            hits += 1;
        }
    }
    let detail = format!("100/100 instances match exhaustive sort; planted duplicate at rank 1 in {hits}/100");
    if hits == 100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c5() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut seen = Vec::new();
    for seed in 0..SEEDS {
        let corpus = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() }).map_err(fail)?;
        let config = AblationConfig {
            pipeline: pipeline_config(seed),
            modes: vec![Fusion::Last, Fusion::None],
            jobs: 1,
        };
        let rows = ablate_fusion(&corpus, &config).map_err(fail)?;
        let (last, none) = (rows[0].val_loss, rows[1].val_loss);
        if last < none {
            wins += 1;
        }
        seen.push(format!("{last:.3}/{none:.3}"));
    }
    let detail = format!("Last < None in {wins}/{SEEDS} seeds (Last/None: {})", seen.join(", "));
    majority(wins, within(t.elapsed(), 600, detail)?)
}

fn c6() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut deltas = Vec::new();
    for seed in 0..SEEDS {
        let mut spec = SyntheticSpec {
            seed,
            label_mu_range: (3.8, 4.2),
            label_sigma_range: (0.3, 1.5),
            identity_scale: 0.2,
            ..SyntheticSpec::default()
        };
        spec.n_speakers_per_split.insert(Split::Train, 48);
        let corpus = generate_synthetic(&spec).map_err(fail)?;
        let pipeline = train_pipeline::<f64>(&corpus, &pipeline_config(seed)).map_err(fail)?;
        let rows = evaluate_seen(&pipeline, &corpus, &CalibrationConfig::default()).map_err(fail)?;
        let delta = row(&rows, "+ sigma shift")?.a_ccc - row(&rows, "finetuned")?.a_ccc;
        if delta >= 0.02 {
            wins += 1;
        }
        deltas.push(format!("{delta:+.3}"));
    }
    let detail = format!("sigma shift gains >= 0.02 A-CCC in {wins}/{SEEDS} seeds ({})", deltas.join(", "));
    majority(wins, within(t.elapsed(), 600, detail)?)
}

fn twin_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { seed, twin_unseen: true, ..SyntheticSpec::default() }
}

fn c7() -> Outcome {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut n_train = 0usize;
    for seed in 0..20 {
        let synth = generate_synthetic_with_latents(&twin_spec(seed)).map_err(fail)?;
        let corpus = &synth.corpus;
        let base = EncoderModel::<f64>::new(EncoderConfig::default(), pretraining_speakers(corpus), seed).map_err(fail)?;
        let profiles = build_profiles(&base, corpus, Split::Train, &SpeakerAssignment::Anonymous, false).map_err(fail)?;
        n_train = profiles.len();
        let proxies = proxy_map(&base, corpus, Split::TestC, &profiles).map_err(fail)?;
        let twins: BTreeMap<&str, &str> = synth
            .latents
            .iter()
            .filter_map(|l| l.twin_of.as_deref().map(|t| (l.speaker_id.as_str(), t)))
            .collect();
        for (unseen, proxy) in &proxies {
            total += 1;
            if twins.get(unseen.as_str()) == Some(&proxy.as_str()) {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / total as f64;
    let chance = 1.0 / n_train as f64;
    let retrieval = format!("twin retrieved {hits}/{total} ({:.1}x chance)", rate / chance);
    if rate < 5.0 * chance {
        return Err(retrieval);
    }
    let calibration = CalibrationConfig { mode: ShiftMode::Sigma, ..CalibrationConfig::default() };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let corpus = generate_synthetic(&twin_spec(seed)).map_err(fail)?;
        let pipeline = train_pipeline::<f64>(&corpus, &pipeline_config(seed)).map_err(fail)?;
        let (rows, _) = evaluate_unseen(&pipeline, &corpus, &calibration).map_err(fail)?;
        let pldc = row(&rows, "proxy + PLDC (sigma)")?.a_ccc;
        let baseline = row(&rows, "no proxy")?.a_ccc;
        if pldc >= baseline {
            wins += 1;
        }
        pairs.push(format!("{pldc:.3}/{baseline:.3}"));
    }
    majority(
        wins,
        format!(
            "{retrieval}; proxy+PLDC >= no-proxy A-CCC in {wins}/{SEEDS} seeds ({})",
            pairs.join(", ")
        ),
    )
}

fn c8() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let mut spec = SyntheticSpec {
            seed,
            target: Target::Valence,
            utterances_per_speaker: 8,
            identity_scale: 0.2,
            ..SyntheticSpec::podcast_scaled()
        };
        spec.utterances_per_split.insert(Split::TestA, 24);
        spec.utterances_per_split.insert(Split::TestB, 16);
        spec.n_speakers_per_split.insert(Split::TestC, 0);
        spec.n_speakers_per_split.insert(Split::Validation, 10);
        let corpus = generate_synthetic(&spec).map_err(fail)?;
        let config = GapConfig {
            seed,
            finetune: FinetuneConfig { seed, epochs_max: 20, patience: 4, ..FinetuneConfig::default() },
            repeats: 3,
            ..GapConfig::default()
        };
        let rows = personalization_gap(&corpus, &[5, 80], &config).map_err(fail)?;
        if rows[0].gap > rows[1].gap {
            wins += 1;
        }
        pairs.push(format!("{:.3}/{:.3}", rows[0].gap, rows[1].gap));
    }
    let detail = format!("gap(5) > gap(80) in {wins}/{SEEDS} seeds ({})", pairs.join(", "));
    majority(wins, within(t.elapsed(), 900, detail)?)
}

fn c9() -> Outcome {
    let mut wins = 0;
    let mut seen = Vec::new();
    for seed in 0..SEEDS {
        let mut spec = SyntheticSpec {
            seed,
            label_sigma_range: (0.7, 0.7),
            identity_scale: 0.2,
            test_shift_scale: 2.0,
            ..SyntheticSpec::default()
        };
        spec.n_speakers_per_split.insert(Split::TestA, 16);
        spec.n_speakers_per_split.insert(Split::TestB, 16);
        let corpus = generate_synthetic(&spec).map_err(fail)?;
        let pipeline = train_pipeline::<f64>(&corpus, &pipeline_config(seed)).map_err(fail)?;
        let model = &pipeline.finetuned.model;
        let mut preds = predict_all(model, &corpus, Split::TestB, &SpeakerAssignment::Own).map_err(fail)?;
        preds.attach_truth(&corpus);
        let report = shift_analysis(&preds, &corpus, model).map_err(fail)?;
        let (fp, lp, fl) = (report.pcc_feature_perf, report.pcc_label_perf, report.pcc_feature_label);
        if fp < 0.0 && lp < 0.0 && fl > 0.0 {
            wins += 1;
        }
        seen.push(format!("({fp:+.2}, {lp:+.2}, {fl:+.2})"));
    }
    majority(
        wins,
        format!("signs (-, -, +) in {wins}/{SEEDS} seeds; (feat-perf, label-perf, feat-label): {}", seen.join(" ")),
    )
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    common::prepare(tmp.path());
    common::run_chain(tmp.path(), "first", "7")?;
    common::run_chain(tmp.path(), "second", "7")?;
    let a = common::artifacts(&tmp.path().join("first"));
    let b = common::artifacts(&tmp.path().join("second"));
    if a.keys().ne(b.keys()) {
        return Err("the two runs wrote different file sets".into());
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| &b[*k] != *v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    if !differing.is_empty() {
        return Err(format!("differing artifacts: {}", differing.join(", ")));
    }
    let reports = a.keys().filter(|k| k.starts_with("reports")).count();
    Ok(format!(
        "{} subcommands, {} artifacts ({reports} reports) byte-identical",
        common::CHAIN.len(),
        a.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [fn() -> Outcome; 10] = [c1, c2, c3, c4, c5, c6, c7, c8, c9, c10];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, criterion) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = criterion();
        let took = t.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {detail} [{took:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
