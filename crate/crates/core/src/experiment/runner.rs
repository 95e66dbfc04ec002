use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use crate::data::{
    load_manifest, load_samples, loso_folds, select_task, synthesize_dataset, DatasetManifest, Fold, FoldPlan, Sample,
    SynthConfig, Task, TaskSubset,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_samples, predict_center, predicted_label, render_table, ConfusionCounts, FoldRecord, MetricsReport,
    RenderedTable,
};
use crate::nn::{build_model, Model};
use crate::scalar::Scalar;
use crate::train::{train_with, SeedStreams, TrainMode};
use crate::weights::{export_weights, import_pretrained, ImportPolicy, WeightContainer};

pub const MODEL_FILE: &str = "model.ntwc";
pub const FOLD_FILE: &str = "fold.json";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad config, arguments or inputs; nothing was run.
    Validation,
    /// Work started and failed.
    Runtime,
}

/// An error tagged with the phase it occurred in.
#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub error: Error,
}

impl Failure {
    pub fn validation(error: Error) -> Self {
        Self {
            kind: FailureKind::Validation,
            error,
        }
    }

    pub fn runtime(error: Error) -> Self {
        Self {
            kind: FailureKind::Runtime,
            error,
        }
    }

    /// 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => 1,
            FailureKind::Runtime => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for Failure {}

/// Per-image outcome stored in `fold.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub label: usize,
    pub probability: f64,
    pub predicted: usize,
}

/// Description of one trained fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifact {
    pub task: Task,
    pub preset: String,
    pub mode: TrainMode,
    pub validation_subject: String,
    pub training_subjects: Vec<String>,
    pub train_images: usize,
    pub steps: usize,
    pub predictions: Vec<Prediction>,
}

/// A validated run: config, dataset and fold plan loaded, weights checked.
pub struct Prepared {
    pub cfg: RunConfig,
    pub manifest: DatasetManifest,
    pub subset: TaskSubset,
    pub plan: FoldPlan,
    pub pretrained: Option<WeightContainer>,
}

impl Prepared {
    pub fn fold_dir(&self, subject: &str) -> PathBuf {
        self.cfg.out.join("folds").join(subject)
    }

    fn fold(&self, subject: Option<&str>) -> Result<&Fold> {
        match subject {
            None => Ok(&self.plan.folds[0]),
            Some(s) => self.plan.fold(s).ok_or_else(|| {
                Error::Config(format!(
                    "{s} is not a validation subject for task {} (eligible: {})",
                    self.plan.task,
                    self.plan.folds.iter().map(|f| f.validation_subject.as_str()).collect::<Vec<_>>().join(", ")
                ))
            }),
        }
    }
}

/// Resolves and checks everything a run needs before any training starts.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    if !cfg.manifest.exists() {
        return Err(Error::MissingArtifact(cfg.manifest.clone()));
    }
    let manifest = load_manifest(&cfg.manifest)?;
    manifest.verify_images()?;
    cfg.augment.validate(manifest.geometry())?;
    let subset = select_task(&manifest, cfg.task)?;
    let plan = loso_folds(&subset)?;
    let pretrained = match &cfg.weights {
        Some(path) => {
            let c = WeightContainer::load(path)?;
            let mut probe = build_model::<f32>(&cfg.model_spec()?, 0)?;
            import_pretrained(&mut probe, &c, &cfg.import)
                .map_err(|e| Error::Import(format!("{}: {e}", path.display())))?;
            Some(c)
        }
        None => None,
    };
    Ok(Prepared {
        cfg,
        manifest,
        subset,
        plan,
        pretrained,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Confusion counts and positive-class probabilities with the configured
/// crop count.
fn evaluate_set<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<(ConfusionCounts, Vec<[f64; 2]>)> {
    if cfg.evaluate.crops == 9 {
        return evaluate_samples(model, samples, &cfg.augment);
    }
    let probs = predict_center(model, samples.iter().map(|s| &s.image), &cfg.augment)?;
    let predicted: Vec<usize> = probs.iter().map(|p| predicted_label(*p)).collect();
    let actual: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok((ConfusionCounts::from_labels(&predicted, &actual)?, probs))
}

fn run_fold<T: Scalar>(prep: &Prepared, fold: &Fold) -> Result<FoldRecord> {
    let cfg = &prep.cfg;
    let subject = &fold.validation_subject;
    let dir = prep.fold_dir(subject);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let streams = SeedStreams::new(cfg.seed).for_fold(subject);

    let mut model = build_model::<T>(&cfg.model_spec()?, streams.seed("init"))?;
    if let Some(c) = &prep.pretrained {
        import_pretrained(&mut model, c, &cfg.import)?;
        if cfg.import.skip_head {
            model.replace_head(2, streams.seed("head"))?;
        }
    }
    let train_records = fold.training_records(&prep.subset);
    let val_records = fold.validation_records(&prep.subset);
    let train_set = load_samples(&prep.manifest, &train_records)?;
    let val_set = load_samples(&prep.manifest, &val_records)?;
    log::info!(
        "fold {subject}: {} training, {} validation images",
        train_set.len(),
        val_set.len()
    );

    let epochs_path = dir.join(EPOCHS_FILE);
    let mut epochs = BufWriter::new(File::create(&epochs_path).map_err(|e| Error::io(&epochs_path, e))?);
    let outcome = train_with(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train_config(),
        &cfg.augment,
        &streams,
        |rec| {
            let line = serde_json::to_string(rec)?;
            writeln!(epochs, "{line}")
                .and_then(|_| epochs.flush())
                .map_err(|e| Error::io(&epochs_path, e))
        },
    )?;
    drop(epochs);
    export_weights(&model)?.save(&dir.join(MODEL_FILE))?;

    let (counts, probs) = evaluate_set(&mut model, &val_set, cfg)?;
    let record = FoldRecord::new(subject.clone(), counts)?;
    let artifact = FoldArtifact {
        task: cfg.task,
        preset: cfg.preset.clone(),
        mode: cfg.mode,
        validation_subject: subject.clone(),
        training_subjects: fold.training_subjects.clone(),
        train_images: train_set.len(),
        steps: outcome.steps,
        predictions: val_records
            .iter()
            .zip(&probs)
            .map(|(r, p)| Prediction {
                path: r.record.path.clone(),
                label: r.label,
                probability: p[1],
                predicted: predicted_label(*p),
            })
            .collect(),
    };
    write_json(&dir.join(FOLD_FILE), &artifact)?;
    write_json(&dir.join(REPORT_FILE), &record)?;
    log::info!("fold {subject}: accuracy {:?}", record.metrics.accuracy);
    Ok(record)
}

fn run_fold_as(prep: &Prepared, fold: &Fold) -> Result<FoldRecord> {
    let r = match prep.cfg.precision {
        Precision::F32 => run_fold::<f32>(prep, fold),
        Precision::F64 => run_fold::<f64>(prep, fold),
    };
    r.map_err(|e| Error::Fold {
        fold: fold.validation_subject.clone(),
        source: Box::new(e),
    })
}

/// Aggregate report and rendered table of a finished cross-validation.
pub struct CrossvalOutcome {
    pub report: MetricsReport,
    pub table: RenderedTable,
    pub out: PathBuf,
}

/// Trains and evaluates every fold (up to `jobs` at once), then writes
/// the aggregate report and table under the run's output directory.
pub fn crossval(cfg: &RunConfig, jobs: usize) -> Result<CrossvalOutcome, Failure> {
    let prep = prepare(cfg).map_err(Failure::validation)?;
    prep.cfg.write_echo(&prep.cfg.out).map_err(Failure::runtime)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::runtime(Error::Config(format!("thread pool: {e}"))))?;
    let results: Vec<Result<FoldRecord>> =
        pool.install(|| prep.plan.folds.par_iter().map(|f| run_fold_as(&prep, f)).collect());
    let records = results.into_iter().collect::<Result<Vec<_>>>().map_err(Failure::runtime)?;

    let report = MetricsReport::from_folds(prep.cfg.task, prep.cfg.variant(), prep.cfg.preset.clone(), records)
        .map_err(Failure::runtime)?;
    let out = prep.cfg.out.clone();
    report.save(&out.join(REPORT_FILE)).map_err(Failure::runtime)?;
    let table = render_table(std::slice::from_ref(&report));
    let table_path = out.join(TABLE_FILE);
    std::fs::write(&table_path, &table.text)
        .map_err(|e| Failure::runtime(Error::io(&table_path, e)))?;
    Ok(CrossvalOutcome { report, table, out })
}

/// Trains a single fold (the first one unless `subject` is given).
pub fn train_fold(cfg: &RunConfig, subject: Option<&str>) -> Result<FoldRecord, Failure> {
    let prep = prepare(cfg).map_err(Failure::validation)?;
    let fold = prep.fold(subject).map_err(Failure::validation)?;
    prep.cfg.write_echo(&prep.cfg.out).map_err(Failure::runtime)?;
    run_fold_as(&prep, fold).map_err(Failure::runtime)
}

fn evaluate_stored<T: Scalar>(prep: &Prepared, fold: &Fold, container: &WeightContainer) -> Result<FoldRecord> {
    let mut model = build_model::<T>(&prep.cfg.model_spec()?, 0)?;
    import_pretrained(&mut model, container, &ImportPolicy::exact())?;
    let records = fold.validation_records(&prep.subset);
    let samples = load_samples(&prep.manifest, &records)?;
    let (counts, _) = evaluate_set(&mut model, &samples, &prep.cfg)?;
    FoldRecord::new(fold.validation_subject.clone(), counts)
}

/// Applies a stored fold model to that fold's validation images.
///
/// `model` defaults to the fold's `model.ntwc`; the `fold.json` beside it
/// must name the same task and preset as `cfg`.
pub fn evaluate(cfg: &RunConfig, subject: Option<&str>, model: Option<&Path>) -> Result<FoldRecord, Failure> {
    let prep = prepare(cfg).map_err(Failure::validation)?;
    let fold = prep.fold(subject).map_err(Failure::validation)?;
    let model_path = match model {
        Some(p) => p.to_path_buf(),
        None => prep.fold_dir(&fold.validation_subject).join(MODEL_FILE),
    };
    let dir = model_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let artifact: FoldArtifact = read_json(&dir.join(FOLD_FILE)).map_err(Failure::validation)?;
    if artifact.task != prep.cfg.task || artifact.preset != prep.cfg.preset {
        return Err(Failure::validation(Error::Config(format!(
            "{} was trained for task {} with {}, config asks for task {} with {}",
            model_path.display(),
            artifact.task,
            artifact.preset,
            prep.cfg.task,
            prep.cfg.preset
        ))));
    }
    if artifact.validation_subject != fold.validation_subject {
        return Err(Failure::validation(Error::Config(format!(
            "{} belongs to fold {}, not {}",
            model_path.display(),
            artifact.validation_subject,
            fold.validation_subject
        ))));
    }
    let container = WeightContainer::load(&model_path).map_err(Failure::validation)?;
    let record = match prep.cfg.precision {
        Precision::F32 => evaluate_stored::<f32>(&prep, fold, &container),
        Precision::F64 => evaluate_stored::<f64>(&prep, fold, &container),
    }
    .map_err(Failure::runtime)?;
    write_json(&dir.join(EVALUATION_FILE), &record).map_err(Failure::runtime)?;
    Ok(record)
}

/// Re-renders stored aggregate reports. A directory stands for its
/// `report.json`.
pub fn report(paths: &[PathBuf]) -> Result<RenderedTable, Failure> {
    let reports = paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
            MetricsReport::load(&file)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(Failure::validation)?;
    Ok(render_table(&reports))
}

/// Fold plan for one task of a manifest.
pub fn split(manifest: &Path, task: Task) -> Result<FoldPlan, Failure> {
    let m = load_manifest(manifest).map_err(Failure::validation)?;
    let subset = select_task(&m, task).map_err(Failure::validation)?;
    loso_folds(&subset).map_err(Failure::validation)
}

/// Writes a synthetic dataset.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest, Failure> {
    if cfg.subjects < 2 {
        return Err(Failure::validation(Error::Config(format!(
            "{} subject(s) requested; leave-one-subject-out needs at least 2",
            cfg.subjects
        ))));
    }
    synthesize_dataset(cfg, out).map_err(|e| match e {
        Error::Io { .. } => Failure::runtime(e),
        other => Failure::validation(other),
    })
}
