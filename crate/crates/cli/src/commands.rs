use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use covct_core::aggregate::{assemble_features, format_features, parse_features, pool_ensemble};
use covct_core::eval::{confusion, macro_f1, report, stratified_folds};
use covct_core::heads::train_head as fit_head;
use covct_core::ingest::{
    format_labels, format_predictions, list_slices, load_volume, patient_dirs, read_labels, read_predictions,
    write_volume,
};
use covct_core::predictor::synthetic_cohort;
use covct_core::sampling::{format_plan_line, inference_subvolumes, train_sample, SubVolumePlan, INFER_LEN, TRAIN_LEN};
use covct_core::{
    Error, FeatureMatrix, FilePredictor, HeadKind, HeadModel, Image, Label, Predictor, SyntheticPredictor,
    SyntheticPredictorConfig, TrainConfig, Volume, VolumeKey, VoteThresholds,
};
use rayon::prelude::*;
use tracing::{info, warn};

use crate::config::FileConfig;
use crate::failure::{usage, Internal, Partial};
use crate::{
    EvalArgs, FeaturesArgs, FoldFlags, FoldsArgs, HeadArg, HeadFlags, IngestArgs, Output, PlanArgs, PlanMode,
    PredictHeadArgs, SynthArgs, ThresholdFlags, TrainHeadArgs, VoteArgs,
};

const DEFAULT_FOLDS: usize = 5;
const DEFAULT_SEED: u64 = 0;

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| usage(format!("--{name} is required")))
}

fn write_output(output: &Output, file: &FileConfig, text: &str) -> Result<()> {
    match output.out.as_ref().or(file.out.as_ref()) {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

/// Logs and counts per-patient failures; the caller fails the run with
/// `Partial` once the surviving output is written.
fn split_failures<T>(results: Vec<(String, covct_core::Result<T>)>) -> (BTreeMap<String, T>, usize) {
    let mut ok = BTreeMap::new();
    let mut failed = 0;
    for (patient, r) in results {
        match r {
            Ok(v) => {
                ok.insert(patient, v);
            }
            Err(e) => {
                warn!("skipping patient {patient}: {e}");
                failed += 1;
            }
        }
    }
    (ok, failed)
}

fn finish(failed: usize, total: usize) -> Result<()> {
    if failed > 0 {
        Err(Partial { failed, total }.into())
    } else {
        Ok(())
    }
}

fn patient_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn patients(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let dirs = patient_dirs(data_dir).context("listing patients")?;
    if dirs.is_empty() {
        return Err(Error::EmptyDirectory(data_dir.to_path_buf())).context("listing patients");
    }
    Ok(dirs)
}

fn thresholds(flags: &ThresholdFlags, file: &FileConfig) -> Result<VoteThresholds> {
    let d = VoteThresholds::default();
    let t_noncovid = flags.t_noncovid.or(file.t_noncovid).unwrap_or(d.t_noncovid);
    let t_all = flags.t_all.or(file.t_all).unwrap_or(d.t_all);
    VoteThresholds::new(t_noncovid, t_all).map_err(|e| usage(e.to_string()))
}

fn fold_count(flags: &FoldFlags, file: &FileConfig) -> Result<usize> {
    let k = flags.folds.or(file.folds).unwrap_or(DEFAULT_FOLDS);
    if k < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    if let Some(i) = flags.holdout_fold {
        if i >= k {
            return Err(usage(format!("--holdout-fold {i} is not below --folds {k}")));
        }
    }
    Ok(k)
}

fn head_config(flags: &HeadFlags, file: &FileConfig, seed: u64) -> Result<(HeadKind, TrainConfig)> {
    let kind = match (flags.head, &file.head) {
        (Some(HeadArg::Logreg), _) => HeadKind::LogReg,
        (Some(HeadArg::Mlp), _) => HeadKind::Mlp,
        (None, Some(s)) => s.parse().map_err(|e: String| usage(e))?,
        (None, None) => HeadKind::LogReg,
    };
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
        lr_init: flags.lr.or(file.lr).unwrap_or(d.lr_init),
        warmup_epochs: flags.warmup.or(file.warmup).unwrap_or(d.warmup_epochs),
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        label_smoothing: flags
            .label_smoothing
            .or(file.label_smoothing)
            .unwrap_or(d.label_smoothing),
        sam_rho: flags.sam_rho.or(file.sam_rho).unwrap_or(d.sam_rho),
        hidden: flags.hidden.or(file.hidden).unwrap_or(d.hidden),
        seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((kind, cfg))
}

fn read_file_predictor(path: &Path) -> Result<FilePredictor> {
    let records = read_predictions(path).with_context(|| format!("reading predictions {}", path.display()))?;
    FilePredictor::from_records(&records).with_context(|| format!("indexing predictions {}", path.display()))
}

fn read_features(path: &Path) -> Result<BTreeMap<String, FeatureMatrix>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_features(&text).with_context(|| format!("parsing features {}", path.display()))
}

fn labels_at(path: &Path) -> Result<BTreeMap<String, Label>> {
    read_labels(path).with_context(|| format!("reading labels {}", path.display()))
}

pub fn ingest(args: IngestArgs, file: &FileConfig) -> Result<()> {
    let data_dir = required(args.data_dir, &file.data_dir, "data-dir")?;
    let labels = match args.labels.or_else(|| file.labels.clone()) {
        Some(p) => Some(labels_at(&p)?),
        None => None,
    };
    let dirs = patients(&data_dir)?;
    let results: Vec<_> = dirs
        .iter()
        .map(|dir| {
            info!("loading {}", dir.display());
            (patient_id(dir), load_volume(dir, labels.as_ref()))
        })
        .collect();
    let (volumes, failed) = split_failures(results);
    let mut out = String::new();
    for (id, v) in &volumes {
        let label = v.label().map_or("-", Label::as_str);
        writeln!(out, "{id},{},{},{},{label}", v.len(), v.width(), v.height())?;
    }
    write_output(&args.output, file, &out)?;
    finish(failed, dirs.len())
}

fn check_plan(id: &str, plan: &SubVolumePlan, n: usize) -> Result<()> {
    let entries = plan.entries();
    if entries.len() != plan.target_len || entries.iter().any(|&i| i >= n) {
        return Err(Internal(format!("plan for {id} has {} entries for {n} slices", entries.len())).into());
    }
    Ok(())
}

pub fn plan(args: PlanArgs, file: &FileConfig) -> Result<()> {
    let data_dir = required(args.data_dir, &file.data_dir, "data-dir")?;
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let dirs = patients(&data_dir)?;
    let results: Vec<_> = dirs
        .par_iter()
        .map(|dir| {
            let plans = list_slices(dir).and_then(|files| {
                if files.is_empty() {
                    return Err(Error::EmptyDirectory(dir.clone()));
                }
                let n = files.len();
                match args.mode {
                    PlanMode::Train => Ok((n, vec![train_sample(n, seed)?])),
                    PlanMode::Infer => Ok((n, inference_subvolumes(n)?)),
                }
            });
            (patient_id(dir), plans)
        })
        .collect();
    let (plans, failed) = split_failures(results);
    let mut out = String::new();
    for (id, (n, list)) in &plans {
        for p in list {
            check_plan(id, p, *n)?;
            out.push_str(&format_plan_line(id, p));
            out.push('\n');
        }
    }
    debug_assert!(plans
        .values()
        .flat_map(|p| &p.1)
        .all(|p| [TRAIN_LEN, INFER_LEN].contains(&p.target_len)));
    write_output(&args.output, file, &out)?;
    finish(failed, dirs.len())
}

/// Pooled diagnosis for every patient with at least one record; patients
/// with only SLICE records count as failures.
fn pooled_votes(predictor: &FilePredictor, t: &VoteThresholds) -> (BTreeMap<String, Label>, usize, usize) {
    let votes = predictor.subvolume_votes();
    let mut all: Vec<String> = predictor.slice_keys().map(|k| k.patient_id.clone()).collect();
    all.extend(votes.keys().cloned());
    all.sort();
    all.dedup();
    let results: Vec<_> = all
        .iter()
        .map(|id| {
            let r = match votes.get(id) {
                Some(per_model) => pool_ensemble(per_model, t),
                None => Err(Error::EmptyPredictions),
            };
            (id.clone(), r)
        })
        .collect();
    let (pred, failed) = split_failures(results);
    (pred, failed, all.len())
}

pub fn vote(args: VoteArgs, file: &FileConfig) -> Result<()> {
    let path = required(args.predictions, &file.predictions, "predictions")?;
    let t = thresholds(&args.thresholds, file)?;
    let predictor = read_file_predictor(&path)?;
    let (pred, failed, total) = pooled_votes(&predictor, &t);
    write_output(&args.output, file, &format_labels(&pred)?)?;
    finish(failed, total)
}

fn patient_features(predictor: &FilePredictor, patient: &str, models: &[String]) -> covct_core::Result<FeatureMatrix> {
    let mut sum: Vec<[f64; 3]> = Vec::new();
    for model in models {
        let probs = predictor.predict_slices(&VolumeKey::new(patient, model))?;
        if sum.is_empty() {
            sum = probs;
        } else if sum.len() != probs.len() {
            return Err(Error::InvariantViolation(format!(
                "patient {patient}: model {model} has {} slices, expected {}",
                probs.len(),
                sum.len()
            )));
        } else {
            for (acc, p) in sum.iter_mut().zip(probs) {
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
    }
    let k = models.len() as f64;
    let mean: Vec<[f64; 3]> = sum.into_iter().map(|r| r.map(|v| v / k)).collect();
    assemble_features(&mean)
}

pub fn features(args: FeaturesArgs, file: &FileConfig) -> Result<()> {
    let path = required(args.predictions, &file.predictions, "predictions")?;
    let predictor = read_file_predictor(&path)?;
    let mut models: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for key in predictor.slice_keys() {
        if args.model_id.as_ref().is_none_or(|m| *m == key.model_id) {
            models
                .entry(key.patient_id.clone())
                .or_default()
                .push(key.model_id.clone());
        }
    }
    if models.is_empty() {
        return Err(Error::EmptyPredictions).context(format!("no SLICE records in {}", path.display()));
    }
    let total = models.len();
    let results: Vec<_> = models
        .into_par_iter()
        .map(|(id, m)| {
            let f = patient_features(&predictor, &id, &m);
            (id, f)
        })
        .collect();
    let (features, failed) = split_failures(results);
    write_output(&args.output, file, &format_features(&features))?;
    finish(failed, total)
}

pub fn train_head(args: TrainHeadArgs, file: &FileConfig) -> Result<()> {
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let (kind, cfg) = head_config(&args.head, file, seed)?;
    let k = fold_count(&args.folds, file)?;
    let features = read_features(&required(args.features, &file.features, "features")?)?;
    let labels = labels_at(&required(args.labels, &file.labels, "labels")?)?;
    let holdout = match args.folds.holdout_fold {
        Some(i) => Some((stratified_folds(&labels, k, seed).context("assigning folds")?, i)),
        None => None,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (id, fm) in features {
        let Some(&label) = labels.get(&id) else {
            warn!("no label for {id}; not used for training");
            continue;
        };
        if holdout.as_ref().is_some_and(|(f, i)| f.fold_of(&id) == Some(*i)) {
            continue;
        }
        xs.push(fm);
        ys.push(label);
    }
    info!("training {} head on {} patients", kind.as_str(), xs.len());
    let model = fit_head(&xs, &ys, kind, &cfg).context("training head")?;
    write_output(&args.output, file, &model.to_text())
}

fn head_diagnoses(model: &HeadModel, features: &BTreeMap<String, FeatureMatrix>) -> Result<BTreeMap<String, Label>> {
    features
        .iter()
        .map(|(id, fm)| {
            Ok((
                id.clone(),
                model
                    .predict_label(&fm.flatten())
                    .with_context(|| format!("patient {id}"))?,
            ))
        })
        .collect()
}

pub fn predict_head(args: PredictHeadArgs, file: &FileConfig) -> Result<()> {
    let model_path = required(args.model, &file.model, "model")?;
    let model = HeadModel::load(&model_path).with_context(|| format!("loading head {}", model_path.display()))?;
    let features = read_features(&required(args.features, &file.features, "features")?)?;
    write_output(&args.output, file, &format_labels(&head_diagnoses(&model, &features)?)?)
}

pub fn folds(args: FoldsArgs, file: &FileConfig) -> Result<()> {
    let k = fold_count(
        &FoldFlags {
            folds: args.folds,
            holdout_fold: None,
        },
        file,
    )?;
    let labels = labels_at(&required(args.labels, &file.labels, "labels")?)?;
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let assignment = stratified_folds(&labels, k, seed).context("assigning folds")?;
    write_output(&args.output, file, &assignment.to_text())
}

pub fn eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    let k = fold_count(&args.folds, file)?;
    let t = thresholds(&args.thresholds, file)?;
    let mut truth = labels_at(&required(args.labels, &file.labels, "labels")?)?;
    let mut meta: Vec<(&str, String)> = Vec::new();
    let mut failed = 0;
    let mut total = 0;
    let mut pred = if let Some(path) = args.diagnosis {
        meta.push(("source", "diagnosis".into()));
        labels_at(&path).context("stage diagnosis")?
    } else if let Some(model_path) = args.model.or_else(|| file.model.clone()) {
        let model = HeadModel::load(&model_path).with_context(|| format!("loading head {}", model_path.display()))?;
        let features = read_features(&required(args.features, &file.features, "features")?)?;
        meta.push(("source", "head".into()));
        meta.push(("head", model.kind().as_str().into()));
        head_diagnoses(&model, &features).context("stage predict-head")?
    } else {
        let path = required(args.predictions, &file.predictions, "predictions")?;
        let predictor = read_file_predictor(&path).context("stage vote")?;
        meta.push(("source", "vote".into()));
        meta.push(("t_noncovid", t.t_noncovid.to_string()));
        meta.push(("t_all", t.t_all.to_string()));
        let (p, f, n) = pooled_votes(&predictor, &t);
        failed = f;
        total = n;
        p
    };
    if let Some(i) = args.folds.holdout_fold {
        let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let assignment = stratified_folds(&truth, k, seed).context("assigning folds")?;
        truth.retain(|id, _| assignment.fold_of(id) == Some(i));
        pred.retain(|id, _| assignment.fold_of(id) == Some(i));
        meta.push(("folds", k.to_string()));
        meta.push(("fold", i.to_string()));
        meta.push(("seed", seed.to_string()));
    }
    let cm = confusion(&pred, &truth).context("stage eval")?;
    meta.push(("patients", cm.total().to_string()));
    let text = report(&cm, &meta).context("stage report")?;
    info!("macro_f1 {:.6}", macro_f1(&cm)?.macro_f1);
    write_output(&args.output, file, &text)?;
    finish(failed, total)
}

fn synthetic_volume(id: &str, n: usize, side: usize, lesion: impl Fn(usize) -> bool) -> covct_core::Result<Volume> {
    let slices = (0..n)
        .map(|i| {
            let level = if lesion(i) { 0.8 } else { 0.3 };
            Image::from_fn(side, side, |r, c| {
                let ramp = (r + c) as f32 / (2 * side) as f32;
                (level * 0.75 + 0.25 * ramp).clamp(0.0, 1.0)
            })
        })
        .collect::<covct_core::Result<Vec<_>>>()?;
    Volume::new(id, slices, None)
}

pub fn synth(args: SynthArgs, file: &FileConfig) -> Result<()> {
    if args.min_slices == 0 || args.min_slices > args.max_slices {
        return Err(usage("need 1 <= --min-slices <= --max-slices"));
    }
    if args.models == 0 || args.image_size == 0 {
        return Err(usage("--models and --image-size must be positive"));
    }
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let cfg = SyntheticPredictorConfig::new(args.lesion_covid, args.lesion_noncovid, args.noise, seed)
        .map_err(|e| usage(e.to_string()))?;
    let cohort = synthetic_cohort(args.covid, args.noncovid, args.min_slices..=args.max_slices, seed)
        .map_err(|e| usage(e.to_string()))?;
    let synth = SyntheticPredictor::new(cfg, cohort)?;
    let models: Vec<String> = (0..args.models).map(|m| format!("model{m}")).collect();

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let labels: BTreeMap<String, Label> = synth.cohort().iter().map(|(k, v)| (k.clone(), v.0)).collect();
    let records = synth.records(&models, INFER_LEN)?;
    std::fs::write(args.out.join("labels.csv"), format_labels(&labels)?)?;
    std::fs::write(args.out.join("predictions.csv"), format_predictions(&records)?)?;

    if let Some(data_dir) = &args.data_dir {
        synth
            .cohort()
            .par_iter()
            .try_for_each(|(id, &(label, n))| -> Result<()> {
                let vol = synthetic_volume(id, n, args.image_size, |i| synth.has_lesion(id, label, i, n))?;
                write_volume(&vol, &data_dir.join(id)).with_context(|| format!("writing volume {id}"))?;
                Ok(())
            })?;
    }
    info!("wrote {} patients, {} records", labels.len(), records.len());
    Ok(())
}
