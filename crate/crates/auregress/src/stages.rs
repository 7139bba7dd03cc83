//! One function per pipeline stage. Each reads its inputs from disk, checks
//! that they belong together, trains or evaluates, and writes a checkpoint
//! and a run report.

use std::path::Path;
use std::time::Instant;

use auregress_core::extractor::{pretrain_segmenter, SegmenterReport};
use auregress_core::generator::{train_generator, GeneratorReport, PairedSample};
use auregress_core::identity::{pretrain_identity, IdentityReport};
use auregress_core::metrics::{evaluate, EvalReport};
use auregress_core::regressor::Regressor;
use auregress_core::training::{train_regressor, FrozenNets, RegressorReport, RegressorTraining};
use auregress_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Meta, ModelKind};
use crate::config::{RunConfig, Split, Upstream};
use crate::dataset::{self, DatasetKind, Descriptor};
use crate::error::{AppError, Result};
use crate::fsutil::{write_csv, write_json};
use crate::imageio;
use crate::models::{self, Loaded};

/// Envelope of every run-report JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport<T> {
    pub stage: String,
    /// Fingerprint of the resolved configuration.
    pub config_fingerprint: String,
    /// Fingerprint of this stage's output.
    pub fingerprint: String,
    pub upstream: Upstream,
    pub seconds: f64,
    pub config: RunConfig,
    pub result: T,
}

fn report<T: Serialize>(
    path: &Path,
    stage: &str,
    cfg: &RunConfig,
    fingerprint: &str,
    upstream: &Upstream,
    started: Instant,
    result: T,
) -> Result<RunReport<T>> {
    let r = RunReport {
        stage: stage.to_string(),
        config_fingerprint: cfg.fingerprint(),
        fingerprint: fingerprint.to_string(),
        upstream: upstream.clone(),
        seconds: started.elapsed().as_secs_f64(),
        config: *cfg,
        result,
    };
    write_json(path, &r)?;
    Ok(r)
}

pub fn progress(msg: impl AsRef<str>) {
    eprintln!("[auregress] {}", msg.as_ref());
}

fn same_space(cfg: &RunConfig, what: &str, space: &auregress_core::params::ParamSpaceConfig) -> Result<()> {
    if *space != cfg.space {
        return Err(AppError::Stale(format!(
            "{what} was built for parameter space {space:?}, the configuration uses {:?}",
            cfg.space
        )));
    }
    Ok(())
}

fn data_descriptor(cfg: &RunConfig, dir: &Path, needed: usize) -> Result<Descriptor> {
    let desc = dataset::descriptor(dir)?;
    same_space(cfg, &format!("dataset {}", dir.display()), &desc.space)?;
    if desc.spec.count < needed {
        return Err(AppError::Config(format!(
            "dataset {} holds {} images, {needed} needed",
            dir.display(),
            desc.spec.count
        )));
    }
    Ok(desc)
}

/// Fails when `meta` was built against a different upstream artifact than the one given.
pub fn check_upstream(meta: &Meta, key: &str, actual: &str) -> Result<()> {
    match meta.upstream.get(key) {
        Some(fp) if fp == actual => Ok(()),
        Some(_) => Err(AppError::Stale(format!(
            "the {} checkpoint was trained against a different {key}; retrain it",
            meta.kind.label()
        ))),
        None => Err(AppError::Stale(format!(
            "the {} checkpoint does not record its {key}",
            meta.kind.label()
        ))),
    }
}

pub fn gen_dataset(cfg: &RunConfig, split: Split, dir: &Path) -> Result<Descriptor> {
    let started = Instant::now();
    let desc = dataset::generate(
        dir,
        &cfg.space,
        &cfg.dataset_spec(split),
        &cfg.dataset_fingerprint(split),
    )?;
    progress(format!(
        "dataset {} ({} images) in {:.1}s",
        split.dir_name(),
        desc.spec.count,
        started.elapsed().as_secs_f64()
    ));
    Ok(desc)
}

pub fn segmenter_upstream(cfg: &RunConfig, data: &Path) -> Result<Upstream> {
    let seg = &cfg.segmenter;
    let desc = data_descriptor(cfg, data, seg.train_images + seg.held_out_images)?;
    Ok(cfg.segmenter_upstream(&desc.fingerprint))
}

pub fn pretrain_extractor(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RunReport<SegmenterReport>> {
    let started = Instant::now();
    let seg = &cfg.segmenter;
    let desc = data_descriptor(cfg, data, seg.train_images + seg.held_out_images)?;
    let upstream = cfg.segmenter_upstream(&desc.fingerprint);
    let fingerprint = cfg.segmenter_fingerprint(&upstream);
    let train = dataset::load_labelled(data, 0..seg.train_images)?;
    let held_out = dataset::load_labelled(data, desc.spec.count - seg.held_out_images..desc.spec.count)?;
    progress(format!(
        "feature extractor: {} images, {} epochs",
        train.len(),
        seg.training.epochs
    ));
    let (model, result) = pretrain_segmenter(&cfg.space, &train, &held_out, &seg.training)?;
    if let Some(w) = &result.warning {
        progress(format!("warning: {w}"));
    }
    models::save(
        out,
        ModelKind::Segmenter,
        &model.store,
        &cfg.space,
        &fingerprint,
        &upstream,
        serde_json::Value::Null,
    )?;
    progress(format!(
        "feature extractor held-out pixel accuracy {:.4}",
        result.held_out_accuracy
    ));
    report(
        &out.join("segmenter_report.json"),
        "pretrain-extractor",
        cfg,
        &fingerprint,
        &upstream,
        started,
        result,
    )
}

pub fn pretrain_identity_stage(cfg: &RunConfig, out: &Path) -> Result<RunReport<IdentityReport>> {
    let started = Instant::now();
    let stage = &cfg.identity;
    let fingerprint = cfg.identity_fingerprint();
    let upstream = Upstream::new();
    progress(format!(
        "identity embedder: {} identities x {} renders, {} epochs",
        stage.training.n_identities, stage.training.renders_per_identity, stage.training.epochs
    ));
    let (model, result) = pretrain_identity(&cfg.space, stage.embedding_dim, &stage.training)?;
    if let Some(w) = &result.warning {
        progress(format!("warning: {w}"));
    }
    models::save(
        out,
        ModelKind::Identity,
        &model.store,
        &cfg.space,
        &fingerprint,
        &upstream,
        models::identity_detail(&model),
    )?;
    progress(format!("identity verification margin {:.4}", result.margin));
    report(
        &out.join("identity_report.json"),
        "pretrain-identity",
        cfg,
        &fingerprint,
        &upstream,
        started,
        result,
    )
}

fn pairs(data: &Path, cfg: &RunConfig, range: std::ops::Range<usize>) -> Result<Vec<PairedSample>> {
    let params = dataset::load_params(data, &cfg.space)?;
    let images = dataset::load_images(data, range.clone())?;
    Ok(params[range]
        .iter()
        .cloned()
        .zip(images)
        .map(|(params, image)| PairedSample { params, image })
        .collect())
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    epoch: usize,
    objective: f64,
    appearance: f64,
    perceptual: f64,
}

/// Upstream of the generator as found on disk: the clean dataset and, when
/// the perceptual term is on, the extractor checkpoint.
pub fn generator_upstream(cfg: &RunConfig, data: &Path, models_dir: &Path) -> Result<Upstream> {
    let desc = data_descriptor(cfg, data, cfg.generator.pairs + 1)?;
    let seg = if cfg.generator.training.lambda_per > 0.0 {
        models::require_meta(models_dir, ModelKind::Segmenter, "train-generator")?.fingerprint
    } else {
        String::new()
    };
    Ok(cfg.generator_upstream(&desc.fingerprint, &seg))
}

pub fn train_generator_stage(
    cfg: &RunConfig,
    data: &Path,
    models_dir: &Path,
    out: &Path,
) -> Result<RunReport<GeneratorReport>> {
    let started = Instant::now();
    let stage = &cfg.generator;
    let desc = data_descriptor(cfg, data, stage.pairs + 1)?;
    if desc.spec.kind != DatasetKind::Clean {
        return Err(AppError::Config(
            "the generator imitates clean renders; pass a clean dataset".into(),
        ));
    }
    let upstream = generator_upstream(cfg, data, models_dir)?;
    let fingerprint = cfg.generator_fingerprint(&upstream);
    let seg = if stage.training.lambda_per > 0.0 {
        let Loaded { model, meta } = models::load_segmenter(models_dir, "train-generator")?;
        same_space(cfg, "feature extractor", &meta.space)?;
        Some(model)
    } else {
        None
    };
    let held_start = desc.spec.count - cfg.data.clean_held_out.clamp(1, desc.spec.count - stage.pairs);
    let train = pairs(data, cfg, 0..stage.pairs)?;
    let held_out = pairs(data, cfg, held_start..desc.spec.count)?;
    progress(format!(
        "generator: {} pairs, {} epochs, perceptual weight {}",
        train.len(),
        stage.training.epochs,
        stage.training.lambda_per
    ));
    let (model, result) = train_generator(&cfg.space, &train, &held_out, seg.as_ref(), &stage.training)?;
    models::save(
        out,
        ModelKind::Generator,
        &model.store,
        &cfg.space,
        &fingerprint,
        &upstream,
        serde_json::Value::Null,
    )?;
    let curve: Vec<CurveRow> = result
        .steps
        .iter()
        .map(|s| CurveRow {
            step: s.step,
            epoch: s.epoch,
            objective: s.objective,
            appearance: s.appearance,
            perceptual: s.perceptual,
        })
        .collect();
    write_csv(&out.join("generator_curve.csv"), &curve)?;
    let shown = &held_out[..held_out.len().min(8)];
    let mut tiles = Vec::with_capacity(2 * shown.len());
    for s in shown {
        tiles.push(s.image.clone());
        tiles.push(
            model
                .generate(&s.params)?
                .reshape(&[3, cfg.space.image_size, cfg.space.image_size])?,
        );
    }
    imageio::save_image(&out.join("generator_samples.png"), &imageio::grid(&tiles, 4)?)?;
    progress(format!("generator held-out L1 {:.4}", result.held_out_l1));
    report(
        &out.join("generator_report.json"),
        "train-generator",
        cfg,
        &fingerprint,
        &upstream,
        started,
        result,
    )
}

/// The three frozen networks, checked against each other and the configuration.
pub struct Frozen {
    pub segmenter: Loaded<auregress_core::extractor::Segmenter>,
    pub identity: Loaded<auregress_core::identity::IdentityModel>,
    pub generator: Loaded<auregress_core::generator::Generator>,
}

impl Frozen {
    pub fn load(cfg: &RunConfig, models_dir: &Path, needed_by: &str) -> Result<Self> {
        let segmenter = models::load_segmenter(models_dir, needed_by)?;
        let identity = models::load_identity(models_dir, needed_by)?;
        let generator = models::load_generator(models_dir, needed_by)?;
        same_space(cfg, "feature extractor", &segmenter.meta.space)?;
        same_space(cfg, "identity embedder", &identity.meta.space)?;
        same_space(cfg, "generator", &generator.meta.space)?;
        if generator.meta.upstream.contains_key("segmenter") {
            check_upstream(&generator.meta, "segmenter", &segmenter.meta.fingerprint)?;
        }
        Ok(Self {
            segmenter,
            identity,
            generator,
        })
    }

    pub fn nets(&self, cfg: &RunConfig) -> FrozenNets<'_> {
        FrozenNets {
            segmenter: &self.segmenter.model,
            identity: &self.identity.model,
            generator: &self.generator.model,
            region_weights: cfg.region_weights,
        }
    }

    pub fn upstream(&self, cfg: &RunConfig, real: &str) -> Upstream {
        cfg.regressor_upstream(
            real,
            &self.segmenter.meta.fingerprint,
            &self.identity.meta.fingerprint,
            &self.generator.meta.fingerprint,
        )
    }
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    content: f64,
    identity: f64,
    parameter: f64,
    loopback: f64,
    adversarial: f64,
    total: f64,
}

/// Regressor upstream as found on disk.
pub fn regressor_upstream(cfg: &RunConfig, data: &Path, models_dir: &Path) -> Result<Upstream> {
    let desc = data_descriptor(cfg, data, 2)?;
    let meta = |k| models::require_meta(models_dir, k, "train-regressor").map(|m| m.fingerprint);
    Ok(cfg.regressor_upstream(
        &desc.fingerprint,
        &meta(ModelKind::Segmenter)?,
        &meta(ModelKind::Identity)?,
        &meta(ModelKind::Generator)?,
    ))
}

/// Trains a regressor on the first `limit` images of an unlabelled dataset
/// (all of them when `None`). The trainer sees pixels only.
pub fn train_regressor_stage(
    cfg: &RunConfig,
    training: &RegressorTraining,
    limit: Option<usize>,
    data: &Path,
    models_dir: &Path,
    out: &Path,
) -> Result<RunReport<RegressorReport>> {
    let started = Instant::now();
    let desc = data_descriptor(cfg, data, limit.unwrap_or(2).max(2))?;
    let frozen = Frozen::load(cfg, models_dir, "train-regressor")?;
    let mut upstream = frozen.upstream(cfg, &desc.fingerprint);
    let count = limit.unwrap_or(desc.spec.count);
    if limit.is_some() {
        upstream.insert("images".into(), count.to_string());
    }
    let run_cfg = RunConfig {
        regressor: *training,
        ..*cfg
    };
    let fingerprint = run_cfg.regressor_fingerprint(&upstream);
    let real: Vec<Tensor> = dataset::load_images(data, 0..count)?;
    progress(format!(
        "regressor: {} unlabelled images, {} epochs, weights {:?}",
        real.len(),
        training.epochs,
        training.weights
    ));
    let (mut model, result) = train_regressor(&cfg.space, &frozen.nets(cfg), &real, training)?;
    model.store.freeze();
    models::save(
        out,
        ModelKind::Regressor,
        &model.store,
        &cfg.space,
        &fingerprint,
        &upstream,
        models::regressor_detail(&model),
    )?;
    let rows: Vec<EpochRow> = result
        .epochs
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            content: e.terms.content,
            identity: e.terms.identity,
            parameter: e.terms.parameter,
            loopback: e.terms.loopback,
            adversarial: e.terms.adversarial,
            total: e.terms.total,
        })
        .collect();
    write_csv(&out.join("regressor_epochs.csv"), &rows)?;
    if let (Some(first), Some(last)) = (result.epochs.first(), result.epochs.last()) {
        progress(format!(
            "regressor content loss {:.4} -> {:.4}",
            first.terms.content, last.terms.content
        ));
    }
    report(
        &out.join("regressor_report.json"),
        "train-regressor",
        &run_cfg,
        &fingerprint,
        &upstream,
        started,
        result,
    )
}

/// Regressor (from `regressor_dir`) and extractor (from `models_dir`) for
/// inference, checked to belong together.
pub fn load_predictor(
    cfg: &RunConfig,
    regressor_dir: &Path,
    models_dir: &Path,
    needed_by: &str,
) -> Result<(Loaded<Regressor>, Loaded<auregress_core::extractor::Segmenter>)> {
    let regressor = models::load_regressor(regressor_dir, needed_by)?;
    let segmenter = models::load_segmenter(models_dir, needed_by)?;
    same_space(cfg, "regressor", &regressor.meta.space)?;
    check_upstream(&regressor.meta, "segmenter", &segmenter.meta.fingerprint)?;
    Ok((regressor, segmenter))
}

/// Predictions for images `[3, s, s]`, in batches.
pub fn predict_all(
    cfg: &RunConfig,
    regressor: &Regressor,
    segmenter: &auregress_core::extractor::Segmenter,
    images: &[Tensor],
) -> Result<Vec<auregress_core::params::SoftParams>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(50) {
        let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        out.extend(regressor.predict(segmenter, &batch, &cfg.region_weights)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ChannelRow<'a> {
    au_channel: &'a str,
    icc: Option<f64>,
    mae: f64,
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let rows: Vec<ChannelRow> = report
        .channels
        .iter()
        .map(|c| ChannelRow {
            au_channel: &c.channel,
            icc: c.icc,
            mae: c.mae,
        })
        .collect();
    write_csv(path, &rows)
}

/// Scores the regressor in `regressor_dir` on a labelled perturbed dataset.
/// Ground truth is read here, and only here.
pub fn eval_stage(cfg: &RunConfig, data: &Path, regressor_dir: &Path, models_dir: &Path) -> Result<EvalReport> {
    let desc = data_descriptor(cfg, data, 3)?;
    let (regressor, segmenter) = load_predictor(cfg, regressor_dir, models_dir, "eval")?;
    let images = dataset::load_images(data, 0..desc.spec.count)?;
    let truth = dataset::load_params(data, &cfg.space)?;
    let predicted = predict_all(cfg, &regressor.model, &segmenter.model, &images)?;
    let mut report = evaluate(&cfg.space, &predicted, &truth)?;
    report.fingerprint = cfg.fingerprint();
    Ok(report)
}
