use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use perser_core::calibrate::{
    build_profiles, calibrate_prediction_set, proxy_map, save_profiles, CalibrationConfig, SpeakerCalibration,
};
use perser_core::corpus::{generate_synthetic, read_manifest, write_manifest, Corpus, Split, SyntheticSpec};
use perser_core::downstream::{finetune, init_head, predict_all, PredictionSet, SpeakerAssignment};
use perser_core::encoder::{load_checkpoint, save_checkpoint, EncoderConfig};
use perser_core::evalkit::{
    ablate_fusion, evaluate, personalization_gap, pretraining_speakers, render_table, shift_analysis, to_ndjson,
    AblationConfig, GapConfig, PipelineConfig,
};
use perser_core::pretrain::{make_pseudo_labels, run_papt_on_corpus, PseudoLabelSet, TRAIN_SPLITS, VALIDATION_SPLIT};
use perser_core::Encoder;
use serde::Serialize;
use serde_json::json;

use crate::args::{Command, GlobalArgs, Preset, StartFrom, UnseenMode};
use crate::run::{io_failure, CliResult, Failure, Run};

const CORPUS: &str = "corpus/manifest.ndjson";
const PSEUDO_LABELS: &str = "pseudo_labels";
const BASE_CKPT: &str = "papt/base.ckpt";
const PAPT_CKPT: &str = "papt/model.ckpt";
const FINETUNE_CKPT: &str = "finetune/model.ckpt";
const PROXIES: &str = "predictions/proxies.json";
const TEST_SPLITS: [Split; 3] = [Split::TestA, Split::TestB, Split::TestC];
const PREDICTED: [Split; 2] = [Split::TestB, Split::TestC];

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn ser<S: Serialize + ?Sized>(v: &S) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn corpus_path(run: &Run, global: &GlobalArgs) -> PathBuf {
    global.corpus.clone().unwrap_or_else(|| run.path(CORPUS))
}

fn load_corpus(run: &mut Run, global: &GlobalArgs) -> CliResult<Corpus> {
    let path = run.input(&corpus_path(run, global))?;
    Ok(read_manifest(&path)?)
}

/// Corpus with every test label removed.
fn blind_corpus(run: &mut Run, global: &GlobalArgs) -> CliResult<Corpus> {
    Ok(load_corpus(run, global)?.without_labels(&TEST_SPLITS))
}

fn load_model(run: &mut Run, rel: &str) -> CliResult<Encoder> {
    let path = run.input(&run.path(rel))?;
    Ok(load_checkpoint(&path)?)
}

fn save_model(run: &mut Run, rel: &str, model: &Encoder) -> CliResult<()> {
    let path = run.output(&run.path(rel))?;
    Ok(save_checkpoint(model, &path)?)
}

fn save_preds(run: &mut Run, rel: &str, preds: &PredictionSet) -> CliResult<()> {
    let path = run.output(&run.path(rel))?;
    Ok(preds.save(&path)?)
}

fn write_report<S: Serialize>(run: &mut Run, name: &str, headers: &[&str], rows: &[Vec<String>], records: &[S]) -> CliResult<()> {
    run.write(&format!("reports/{name}.txt"), &render_table(headers, rows))?;
    run.write(&format!("reports/{name}.ndjson"), &to_ndjson(records)?)?;
    Ok(())
}

pub fn execute(command: &Command, global: &GlobalArgs) -> CliResult<PathBuf> {
    let mut run = Run::new(global.run_dir.clone(), global.seed, global.jobs, global.config.clone(), command.name())?;
    let effective = match command {
        Command::GenData { spec, out, target, preset } => gen_data(&mut run, spec.as_deref(), out.clone(), *target, *preset)?,
        Command::PseudoLabel => pseudo_label(&mut run, global)?,
        Command::Papt { fusion } => {
            if let Some(f) = fusion {
                run.config.encoder.fusion = (*f).into();
            }
            papt(&mut run, global)?
        }
        Command::Finetune { from } => finetune_cmd(&mut run, global, *from)?,
        Command::Predict { unseen } => predict(&mut run, global, *unseen)?,
        Command::Calibrate { top_k, shift_mode } => {
            if let Some(k) = top_k {
                run.config.calibration.top_k = *k;
            }
            if let Some(m) = shift_mode {
                run.config.calibration.mode = (*m).into();
            }
            calibrate_cmd(&mut run, global)?
        }
        Command::Evaluate => evaluate_cmd(&mut run, global)?,
        Command::ShiftAnalysis => shift_cmd(&mut run, global)?,
        Command::Gap { k_values, repeats } => {
            if let Some(k) = k_values {
                run.config.gap.k_values = k.clone();
            }
            if let Some(r) = repeats {
                run.config.gap.repeats = *r;
            }
            gap_cmd(&mut run, global)?
        }
        Command::AblateFusion => ablate_cmd(&mut run, global)?,
    };
    run.finish(effective)
}

fn gen_data(
    run: &mut Run,
    spec_path: Option<&Path>,
    out: Option<PathBuf>,
    target: Option<crate::args::TargetArg>,
    preset: Preset,
) -> CliResult<serde_json::Value> {
    let mut spec = match spec_path {
        Some(p) => {
            let p = run.input(p)?;
            let text = fs::read_to_string(&p).map_err(|e| io_failure(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::User(format!("{}: invalid corpus spec: {e}", p.display())))?
        }
        None => match preset {
            Preset::Toy => SyntheticSpec::default(),
            Preset::Podcast => SyntheticSpec::podcast_scaled(),
        },
    };
    spec.seed = run.seed;
    if let Some(t) = target {
        spec.target = t.into();
    }
    let corpus = generate_synthetic(&spec)?;
    let dir = out.unwrap_or_else(|| run.path("corpus"));
    let manifest = run.output(&dir.join("manifest.ndjson"))?;
    write_manifest(&corpus, &manifest)?;
    run.output(&dir.join("samples"))?;
    let rows: Vec<Vec<String>> = Split::ALL
        .iter()
        .map(|&s| {
            let n = corpus.split(s).count();
            vec![s.to_string(), corpus.speakers_in(s).len().to_string(), n.to_string()]
        })
        .collect();
    run.write("reports/gen-data.txt", &render_table(&["split", "speakers", "utterances"], &rows))?;
    ser(&spec)
}

fn pretraining_pool(corpus: &Corpus) -> Corpus {
    let mut splits = TRAIN_SPLITS.to_vec();
    splits.push(VALIDATION_SPLIT);
    corpus.filter(|r| splits.contains(&r.split))
}

fn pseudo_label(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let corpus = blind_corpus(run, global)?;
    let enc = run.config.encoder.clone();
    let labels = make_pseudo_labels(&pretraining_pool(&corpus), &enc, enc.k_pseudo, run.seed)?;
    let dir = run.output(&run.path(PSEUDO_LABELS))?;
    labels.save(&dir)?;
    let frames: usize = labels.labels.values().map(Vec::len).sum();
    let mut counts = vec![0usize; labels.k];
    for l in labels.labels.values().flatten() {
        counts[*l] += 1;
    }
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| vec![c.to_string(), n.to_string(), num(n as f64 / frames.max(1) as f64)])
        .collect();
    run.write("reports/pseudo-label.txt", &render_table(&["cluster", "frames", "share"], &rows))?;
    ser(&enc)
}

fn papt(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let corpus = blind_corpus(run, global)?;
    let label_dir = run.input(&run.path(PSEUDO_LABELS))?;
    let labels = PseudoLabelSet::load(&label_dir)?;
    let enc = run.config.encoder.clone();
    if labels.k != enc.k_pseudo {
        return Err(Failure::User(format!(
            "pseudo-labels have k = {} but the encoder expects k_pseudo = {}; rerun pseudo-label with the same config",
            labels.k, enc.k_pseudo
        )));
    }
    let base = Encoder::new(enc.clone(), pretraining_speakers(&corpus), run.seed)?;
    save_model(run, BASE_CKPT, &base)?;
    let out = run_papt_on_corpus(base, &corpus, &labels, &run.config.pretrain)?;
    save_model(run, PAPT_CKPT, &out.model)?;
    let rows: Vec<Vec<String>> = out
        .history
        .iter()
        .map(|h| {
            let best = if h.epoch == out.best_epoch { "*" } else { "" };
            vec![h.epoch.to_string(), num(h.train_loss), num(h.val_loss), best.into()]
        })
        .collect();
    write_report(run, "papt", &["epoch", "train L_pt", "val L_pt", "best"], &rows, &out.history)?;
    Ok(json!({ "encoder": enc, "pretrain": run.config.pretrain }))
}

fn finetune_cmd(run: &mut Run, global: &GlobalArgs, from: StartFrom) -> CliResult<serde_json::Value> {
    let corpus = blind_corpus(run, global)?;
    let mut model = load_model(run, if matches!(from, StartFrom::Papt) { PAPT_CKPT } else { BASE_CKPT })?;
    init_head(&mut model, &corpus)?;
    let out = finetune(model, &corpus, &run.config.finetune)?;
    save_model(run, FINETUNE_CKPT, &out.model)?;
    let rows: Vec<Vec<String>> = out
        .history
        .iter()
        .map(|h| {
            let best = if h.epoch == out.best_epoch { "*" } else { "" };
            vec![h.epoch.to_string(), num(h.train_loss), num(h.val_ccc), best.into()]
        })
        .collect();
    write_report(run, "finetune", &["epoch", "train L_CCC", "val O-CCC", "best"], &rows, &out.history)?;
    Ok(json!({ "finetune": run.config.finetune, "from": format!("{from:?}").to_lowercase() }))
}

fn predict(run: &mut Run, global: &GlobalArgs, unseen: UnseenMode) -> CliResult<serde_json::Value> {
    let corpus = blind_corpus(run, global)?;
    let model = load_model(run, FINETUNE_CKPT)?;
    let seen = predict_all(&model, &corpus, Split::TestB, &SpeakerAssignment::Own)?;
    save_preds(run, "predictions/test_b.ndjson", &seen)?;
    if corpus.split(Split::TestC).next().is_some() {
        let assignment = match unseen {
            UnseenMode::Anonymous => SpeakerAssignment::Anonymous,
            UnseenMode::Proxy => {
                let base = load_model(run, BASE_CKPT)?;
                let profiles = build_profiles(&base, &corpus, Split::Train, &SpeakerAssignment::Anonymous, false)?;
                let proxies = proxy_map(&base, &corpus, Split::TestC, &profiles)?;
                let text = serde_json::to_string_pretty(&proxies).map_err(|e| Failure::Internal(e.to_string()))?;
                run.write(PROXIES, &(text + "\n"))?;
                SpeakerAssignment::Proxy(proxies)
            }
        };
        let preds = predict_all(&model, &corpus, Split::TestC, &assignment)?;
        save_preds(run, "predictions/test_c.ndjson", &preds)?;
    }
    Ok(json!({ "unseen": format!("{unseen:?}").to_lowercase() }))
}

fn read_proxies(run: &mut Run) -> CliResult<Option<BTreeMap<String, String>>> {
    let path = run.path(PROXIES);
    if !path.exists() {
        return Ok(None);
    }
    run.input(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn calibrate_cmd(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let corpus = blind_corpus(run, global)?;
    let model = load_model(run, FINETUNE_CKPT)?;
    let config: CalibrationConfig = run.config.calibration.clone();
    let train = build_profiles(&model, &corpus, Split::Train, &SpeakerAssignment::Own, true)?;
    let dir = run.output(&run.path("calibration/profiles"))?;
    save_profiles(&train, &dir)?;
    let proxies = read_proxies(run)?;
    let mut report: Vec<SpeakerCalibration> = Vec::new();
    let mut any = false;
    for split in PREDICTED {
        let path = run.path(&format!("predictions/{}.ndjson", split.as_str()));
        if !path.exists() {
            continue;
        }
        any = true;
        run.input(&path)?;
        let preds = PredictionSet::load(&path)?;
        let assignment = match (split, &proxies) {
            (Split::TestC, Some(p)) => SpeakerAssignment::Proxy(p.clone()),
            (Split::TestC, None) => SpeakerAssignment::Anonymous,
            _ => SpeakerAssignment::Own,
        };
        let targets = build_profiles(&model, &corpus, split, &assignment, false)?;
        let (out, speakers) = calibrate_prediction_set(&preds, &targets, &train, &config)?;
        save_preds(run, &format!("calibration/{}.ndjson", split.as_str()), &out)?;
        report.extend(speakers);
    }
    if !any {
        return Err(Failure::User(format!(
            "no predictions found under {}; run predict first",
            run.path("predictions").display()
        )));
    }
    let rows: Vec<Vec<String>> = report
        .iter()
        .map(|s| {
            vec![
                s.speaker_id.clone(),
                format!("{:?}", s.status),
                s.n_predictions.to_string(),
                num(s.pred_mu),
                num(s.pred_sigma),
                s.mu_bar.map_or("-".into(), num),
                s.sigma_bar.map_or("-".into(), num),
            ]
        })
        .collect();
    run.write(
        "calibration/speakers.txt",
        &render_table(&["speaker", "status", "n", "pred mu", "pred sigma", "mu bar", "sigma bar"], &rows),
    )?;
    run.write("calibration/speakers.ndjson", &to_ndjson(&report)?)?;
    ser(&config)
}

#[derive(Serialize)]
struct EvalRow {
    source: String,
    split: String,
    #[serde(flatten)]
    report: perser_core::evalkit::EvalReport,
}

fn evaluate_cmd(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let mut candidates = Vec::new();
    for source in ["predictions", "calibration"] {
        for split in PREDICTED {
            let path = run.path(&format!("{source}/{}.ndjson", split.as_str()));
            if path.exists() {
                candidates.push((source, split, path));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Failure::User(format!(
            "no predictions found under {}",
            run.root.display()
        )));
    }
    let corpus = load_corpus(run, global)?;
    let mut records = Vec::new();
    for (source, split, path) in candidates {
        run.input(&path)?;
        let mut preds = PredictionSet::load(&path)?;
        preds.attach_truth(&corpus);
        records.push(EvalRow {
            source: source.into(),
            split: split.to_string(),
            report: evaluate(&preds)?,
        });
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.source.clone(),
                r.split.clone(),
                num(r.report.o_ccc),
                format!("{} ({})", num(r.report.a_ccc), num(r.report.a_ccc_std)),
                r.report.excluded.len().to_string(),
            ]
        })
        .collect();
    write_report(run, "evaluate", &["source", "split", "O-CCC", "A-CCC (std)", "excluded"], &rows, &records)?;
    Ok(json!({}))
}

fn shift_cmd(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let path = run.path("predictions/test_b.ndjson");
    if !path.exists() {
        return Err(Failure::User(format!("no predictions found at {}", path.display())));
    }
    let corpus = load_corpus(run, global)?;
    let model = load_model(run, FINETUNE_CKPT)?;
    run.input(&path)?;
    let mut preds = PredictionSet::load(&path)?;
    preds.attach_truth(&corpus);
    let report = shift_analysis(&preds, &corpus, &model)?;
    let mut rows: Vec<Vec<String>> = report
        .speakers
        .iter()
        .map(|s| vec![s.speaker_id.clone(), num(s.feature_kl), num(s.label_kl), num(s.ccc)])
        .collect();
    rows.push(vec![String::new(); 4]);
    rows.push(vec!["PCC(feature, CCC)".into(), num(report.pcc_feature_perf), String::new(), String::new()]);
    rows.push(vec!["PCC(label, CCC)".into(), num(report.pcc_label_perf), String::new(), String::new()]);
    rows.push(vec!["PCC(feature, label)".into(), num(report.pcc_feature_label), String::new(), String::new()]);
    write_report(run, "shift-analysis", &["speaker", "feature KL", "label KL", "CCC"], &rows, std::slice::from_ref(&report))?;
    Ok(json!({}))
}

fn gap_cmd(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let corpus = load_corpus(run, global)?;
    let settings = run.config.gap.clone();
    let config = GapConfig {
        encoder: run.config.encoder.clone(),
        finetune: run.config.finetune.clone(),
        seed: run.seed,
        personalize: settings.personalize,
        repeats: settings.repeats,
        jobs: run.jobs,
    };
    let out = personalization_gap(&corpus, &settings.k_values, &config)?;
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|r| vec![r.k.to_string(), num(r.dependent_o_ccc), num(r.independent_o_ccc), num(r.gap)])
        .collect();
    write_report(run, "gap", &["k", "dependent", "independent", "gap"], &rows, &out)?;
    Ok(json!({ "gap": config, "k_values": settings.k_values, "target": corpus.target() }))
}

fn ablate_cmd(run: &mut Run, global: &GlobalArgs) -> CliResult<serde_json::Value> {
    let corpus = load_corpus(run, global)?;
    let config = AblationConfig {
        pipeline: PipelineConfig {
            encoder: EncoderConfig { ..run.config.encoder.clone() },
            pretrain: run.config.pretrain.clone(),
            finetune: run.config.finetune.clone(),
            seed: run.seed,
        },
        jobs: run.jobs,
        ..AblationConfig::default()
    };
    let out = ablate_fusion(&corpus, &config)?;
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|r| vec![r.fusion.to_string(), num(r.val_loss), num(r.a_ccc)])
        .collect();
    write_report(run, "ablate-fusion", &["fusion", "val L_pt", "A-CCC"], &rows, &out)?;
    ser(&config)
}
