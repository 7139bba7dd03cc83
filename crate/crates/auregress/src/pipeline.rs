//! The staged run: datasets, extractor, identity embedder, generator,
//! regressor, evaluation. A stage is skipped when its output already exists
//! with the fingerprint the configuration expects.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use auregress_core::metrics::{ablation_variants, EvalReport};
use auregress_core::training::RegressorTraining;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{speed_bench, BenchNets, BenchReport};
use crate::checkpoint::{self, ModelKind};
use crate::config::{digest, Fingerprints, RunConfig, Split};
use crate::dataset;
use crate::error::{AppError, Result};
use crate::fsutil::{read_json, write_csv, write_json};
use crate::models;
use crate::stages::{self, progress, RunReport};

/// Directory layout of a run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split.dir_name())
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub executed: bool,
    pub seconds: f64,
    /// Time spent producing the stage's current output, carried over from
    /// the run that built it when the stage is skipped.
    #[serde(default)]
    pub build_seconds: f64,
}

/// Evaluation plus speed benchmark, as written to `eval/report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub fingerprint: String,
    pub eval: EvalReport,
    pub bench: BenchReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub fingerprints: Fingerprints,
    pub stages: Vec<StageRecord>,
    /// SHA-256 of each checkpoint file's bytes.
    pub checkpoint_digests: BTreeMap<String, String>,
    pub eval: EvalReport,
    pub bench: BenchReport,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn checkpoint_matches(dir: &Path, kind: ModelKind, fingerprint: &str) -> bool {
    checkpoint::read_meta(&models::path(dir, kind)).is_ok_and(|m| m.fingerprint == fingerprint)
}

fn dataset_matches(dir: &Path, fingerprint: &str) -> bool {
    dataset::descriptor(dir).is_ok_and(|d| d.fingerprint == fingerprint)
}

/// Removes a stale generated dataset; refuses to touch directories it did not create.
fn clear_dataset(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    let ours = dir.join("dataset.json").exists() || dir.join("images").exists();
    let empty = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?.next().is_none();
    if !ours && !empty {
        return Err(AppError::Invalid(format!(
            "{} exists and is not a generated dataset; refusing to overwrite it",
            dir.display()
        )));
    }
    fs::remove_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

struct Runner {
    stages: Vec<StageRecord>,
    previous: Vec<StageRecord>,
}

impl Runner {
    fn run(&mut self, name: &str, fresh: bool, f: impl FnOnce() -> Result<()>) -> Result<()> {
        let started = Instant::now();
        if fresh {
            progress(format!("{name}: up to date, skipped"));
        } else {
            progress(format!("{name}: running"));
            f()?;
        }
        let seconds = started.elapsed().as_secs_f64();
        let build_seconds = if fresh {
            self.previous.iter().find(|r| r.stage == name).map_or(0.0, |r| {
                if r.executed {
                    r.seconds
                } else {
                    r.build_seconds
                }
            })
        } else {
            seconds
        };
        self.stages.push(StageRecord {
            stage: name.to_string(),
            executed: !fresh,
            seconds,
            build_seconds,
        });
        Ok(())
    }
}

pub fn eval_fingerprint(cfg: &RunConfig, fp: &Fingerprints) -> String {
    digest("eval", &(&fp.regressor, &fp.eval, cfg.bench, cfg.region_weights))
}

/// Evaluation and speed benchmark of the regressor in `models_dir`.
pub fn evaluate_and_bench(
    cfg: &RunConfig,
    eval_dir: &Path,
    models_dir: &Path,
    fingerprint: &str,
) -> Result<EvalBundle> {
    let mut eval = stages::eval_stage(cfg, eval_dir, models_dir, models_dir)?;
    let (regressor, segmenter) = stages::load_predictor(cfg, models_dir, models_dir, "bench")?;
    let generator = models::load_generator(models_dir, "bench")?;
    stages::check_upstream(&regressor.meta, "generator", &generator.meta.fingerprint)?;
    let images = dataset::load_images(eval_dir, 0..cfg.bench.images)?;
    let nets = BenchNets {
        segmenter: &segmenter.model,
        generator: &generator.model,
        regressor: &regressor.model,
        region_weights: cfg.region_weights,
    };
    progress(format!(
        "bench: {} images, {} iterative steps",
        images.len(),
        cfg.bench.iterative_steps
    ));
    let bench = speed_bench(
        &cfg.space,
        &nets,
        &images,
        cfg.bench.iterative_steps,
        cfg.bench.step_size,
        cfg.bench.warmup,
    )?;
    eval.timing = Some(bench.timing.clone());
    Ok(EvalBundle {
        fingerprint: fingerprint.to_string(),
        eval,
        bench,
    })
}

pub fn write_eval_bundle(dir: &Path, bundle: &EvalBundle) -> Result<()> {
    stages::write_eval_csv(&dir.join("eval.csv"), &bundle.eval)?;
    write_json(&dir.join("bench.json"), &bundle.bench)?;
    write_json(&dir.join("report.json"), bundle)
}

/// Runs every stage whose output is missing or stale.
pub fn pipeline(cfg: &RunConfig, layout: &Layout) -> Result<PipelineSummary> {
    cfg.validate()?;
    let fp = cfg.fingerprints();
    let summary_path = layout.root.join("summary.json");
    let previous = read_json::<PipelineSummary>(&summary_path)
        .map(|s| s.stages)
        .unwrap_or_default();
    write_json(&layout.root.join("config.json"), cfg)?;
    let mut runner = Runner {
        stages: Vec::new(),
        previous,
    };
    for split in Split::ALL {
        let dir = layout.data(split);
        let expected = cfg.dataset_fingerprint(split);
        runner.run(
            &format!("dataset-{}", split.dir_name()),
            dataset_matches(&dir, &expected),
            || {
                clear_dataset(&dir)?;
                stages::gen_dataset(cfg, split, &dir).map(|_| ())
            },
        )?;
    }
    let models_dir = layout.models();
    let clean = layout.data(Split::Clean);
    runner.run(
        "pretrain-extractor",
        checkpoint_matches(&models_dir, ModelKind::Segmenter, &fp.segmenter),
        || stages::pretrain_extractor(cfg, &clean, &models_dir).map(|_| ()),
    )?;
    runner.run(
        "pretrain-identity",
        checkpoint_matches(&models_dir, ModelKind::Identity, &fp.identity),
        || stages::pretrain_identity_stage(cfg, &models_dir).map(|_| ()),
    )?;
    runner.run(
        "train-generator",
        checkpoint_matches(&models_dir, ModelKind::Generator, &fp.generator),
        || stages::train_generator_stage(cfg, &clean, &models_dir, &models_dir).map(|_| ()),
    )?;
    runner.run(
        "train-regressor",
        checkpoint_matches(&models_dir, ModelKind::Regressor, &fp.regressor),
        || {
            stages::train_regressor_stage(
                cfg,
                &cfg.regressor,
                None,
                &layout.data(Split::Real),
                &models_dir,
                &models_dir,
            )
            .map(|_| ())
        },
    )?;
    let eval_dir = layout.eval();
    let eval_fp = eval_fingerprint(cfg, &fp);
    let report_path = eval_dir.join("report.json");
    let cached: Option<EvalBundle> = read_json(&report_path)
        .ok()
        .filter(|b: &EvalBundle| b.fingerprint == eval_fp);
    let mut bundle = cached.clone();
    runner.run("eval", cached.is_some(), || {
        let b = evaluate_and_bench(cfg, &layout.data(Split::Eval), &models_dir, &eval_fp)?;
        write_eval_bundle(&eval_dir, &b)?;
        bundle = Some(b);
        Ok(())
    })?;
    let bundle = bundle.expect("evaluated or cached");
    let mut checkpoint_digests = BTreeMap::new();
    for kind in [
        ModelKind::Segmenter,
        ModelKind::Identity,
        ModelKind::Generator,
        ModelKind::Regressor,
    ] {
        checkpoint_digests.insert(
            kind.file_name().to_string(),
            file_digest(&models::path(&models_dir, kind))?,
        );
    }
    let summary = PipelineSummary {
        fingerprints: fp,
        stages: runner.stages,
        checkpoint_digests,
        eval: bundle.eval,
        bench: bundle.bench,
    };
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub w_id: f64,
    pub w_pr: f64,
    pub w_lp: f64,
    pub w_adv: f64,
    pub icc: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_fingerprint: String,
    pub images: usize,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains the full regressor and one per removed auxiliary loss with the same
/// seed, data and budget, and scores each on the evaluation set. Variants
/// whose checkpoint is current are not retrained.
pub fn ablate(cfg: &RunConfig, layout: &Layout, out: &Path) -> Result<AblationReport> {
    let models_dir = layout.models();
    let real = layout.data(Split::Real);
    let up = stages::regressor_upstream(cfg, &real, &models_dir)?;
    let mut rows = Vec::new();
    for (name, weights) in ablation_variants(&cfg.regressor.weights) {
        let training = RegressorTraining {
            weights,
            epochs: cfg.ablation.epochs,
            ..cfg.regressor
        };
        let variant_dir = out.join(name);
        let mut vup = up.clone();
        vup.insert("images".into(), cfg.ablation.images.to_string());
        let expected = RunConfig {
            regressor: training,
            ..*cfg
        }
        .regressor_fingerprint(&vup);
        if checkpoint_matches(&variant_dir, ModelKind::Regressor, &expected) {
            progress(format!("ablation {name}: up to date, skipped"));
        } else {
            progress(format!("ablation {name}: training"));
            stages::train_regressor_stage(
                cfg,
                &training,
                Some(cfg.ablation.images),
                &real,
                &models_dir,
                &variant_dir,
            )?;
        }
        let report = stages::eval_stage(cfg, &layout.data(Split::Eval), &variant_dir, &models_dir)?;
        stages::write_eval_csv(&variant_dir.join("eval.csv"), &report)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            w_id: weights.w_id,
            w_pr: weights.w_pr,
            w_lp: weights.w_lp,
            w_adv: weights.w_adv,
            icc: report.avg_icc,
            mae: report.avg_mae,
        });
    }
    let report = AblationReport {
        config_fingerprint: cfg.fingerprint(),
        images: cfg.ablation.images,
        epochs: cfg.ablation.epochs,
        rows,
    };
    write_csv(&out.join("ablation.csv"), &report.rows)?;
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

impl PipelineSummary {
    /// End-to-end time to build every stage's current output.
    pub fn build_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.build_seconds).sum()
    }
}

/// Loads a previous stage's run report.
pub fn read_report<T: serde::de::DeserializeOwned>(path: &Path) -> Result<RunReport<T>> {
    read_json(path)
}
