//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! The desk-scale run is cached under `CARGO_TARGET_TMPDIR/acceptance-desk`
//! (or `AUREGRESS_ACCEPTANCE_ROOT`); the first invocation builds it, later ones
//! reuse every stage whose fingerprint still matches. Failures are reported
//! but only fail the process when `AUREGRESS_ACCEPTANCE_STRICT` is set.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use auregress::config::{RunConfig, Split};
use auregress::dataset;
use auregress::pipeline::{self, Layout, PipelineSummary};
use auregress::stages::{self, RunReport};
use auregress_core::autodiff::gradcheck::grad_check_all;
use auregress_core::extractor::{RegionWeights, Segmenter};
use auregress_core::generator::{train_generator, Generator, GeneratorReport, GeneratorTraining, PairedSample};
use auregress_core::identity::IdentityModel;
use auregress_core::metrics::{icc31, EvalReport};
use auregress_core::params::{FacialParams, ParamSpaceConfig, SoftParams};
use auregress_core::regressor::Prediction;
use auregress_core::render;
use auregress_core::training::{
    facial_content_loss, identity_loss, loopback_loss, parameter_loss, LoopbackPair, LossWeights,
};
use auregress_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, outcome: Outcome) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn desk_root() -> PathBuf {
    std::env::var_os("AUREGRESS_ACCEPTANCE_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let table = grad_check_all(10, 1e-3);
    let secs = started.elapsed().as_secs_f64();
    let (worst_kind, worst) =
        table.iter().copied().fold(
            (None, 0.0f64),
            |acc, (k, e)| if !(e <= acc.1) { (Some(k), e) } else { acc },
        );
    let worst_kind = worst_kind.map_or("none".to_string(), |k| format!("{k:?}"));
    let pass = table.iter().all(|(_, e)| *e < 1e-4) && secs < 120.0;
    Ok((
        pass,
        format!(
            "{} op kinds, max rel err {worst:.2e} ({worst_kind}), {secs:.1}s (< 1e-4, < 120s)",
            table.len()
        ),
    ))
}

fn generator_fidelity(root: &Path) -> Outcome {
    let report: RunReport<GeneratorReport> =
        pipeline::read_report(&root.join("models/generator_report.json")).map_err(err)?;
    let l1 = report.result.held_out_l1;
    let pass = l1 < 0.05 && report.seconds < 1800.0;
    Ok((
        pass,
        format!(
            "held-out L1 {l1:.4} (< 0.05), trained in {:.0}s (< 1800s)",
            report.seconds
        ),
    ))
}

fn appearance_only_objective() -> Outcome {
    let cfg = ParamSpaceConfig {
        image_size: 32,
        ..ParamSpaceConfig::desk()
    };
    let pairs: Vec<PairedSample> = (0..24)
        .map(|s| {
            let params = FacialParams::sample(s, &cfg);
            let image = render::render(&cfg, &params, 0).map(|r| r.image).map_err(err)?;
            Ok(PairedSample { params, image })
        })
        .collect::<Result<_, String>>()?;
    let opts = GeneratorTraining {
        lambda_per: 0.0,
        epochs: 2,
        batch: 8,
        ..GeneratorTraining::default()
    };
    let (_, report) = train_generator(&cfg, &pairs[..16], &pairs[16..], None, &opts).map_err(err)?;
    let worst = report
        .steps
        .iter()
        .map(|s| (s.objective - s.appearance).abs())
        .fold(0.0, f64::max);
    Ok((
        worst <= 1e-12 && !report.steps.is_empty(),
        format!(
            "{} steps, max |objective - appearance| {worst:.1e} (<= 1e-12)",
            report.steps.len()
        ),
    ))
}

fn regression_icc(summary: &PipelineSummary) -> Outcome {
    let e = &summary.eval;
    let total = summary.build_seconds();
    Ok((
        e.avg_icc >= 0.5 && total < 3600.0,
        format!(
            "{} images, avg ICC {:.3} (>= 0.5), pipeline {total:.0}s (< 3600s)",
            e.samples, e.avg_icc
        ),
    ))
}

fn regression_mae(summary: &PipelineSummary) -> Outcome {
    let e = &summary.eval;
    Ok((
        e.avg_mae <= 0.5,
        format!(
            "{} images, avg MAE {:.3} on the 0-5 scale (<= 0.5)",
            e.samples, e.avg_mae
        ),
    ))
}

fn trainer_ignores_labels() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = RunConfig::smoke();
    let layout = Layout::new(dir.path());
    pipeline::pipeline(&cfg, &layout).map_err(err)?;
    let real = layout.data(Split::Real);
    std::fs::remove_file(real.join("params.csv")).map_err(err)?;
    let out = dir.path().join("unlabelled");
    let report =
        stages::train_regressor_stage(&cfg, &cfg.regressor, None, &real, &layout.models(), &out).map_err(err)?;
    Ok((
        report.result.epochs.len() == cfg.regressor.epochs,
        "regressor trains with the real set's parameter file deleted".to_string(),
    ))
}

fn speedup(summary: &PipelineSummary) -> Outcome {
    let b = &summary.bench;
    Ok((
        b.timing.speedup >= 50.0 && b.iterative_steps == 100,
        format!(
            "{} images, {} steps: regressor {:.2}ms vs iterative {:.0}ms, speedup {:.0}x (>= 50)",
            b.images, b.iterative_steps, b.timing.regressor_ms, b.timing.iterative_ms, b.timing.speedup
        ),
    ))
}

fn reconstruction_parity(summary: &PipelineSummary) -> Outcome {
    let b = &summary.bench;
    Ok((
        b.content_ratio <= 1.2,
        format!(
            "content loss regressor {:.4} vs iterative {:.4}, ratio {:.3} (<= 1.2)",
            b.regressor_content, b.iterative_content, b.content_ratio
        ),
    ))
}

fn constant_prediction(g: &mut Graph, p: &SoftParams) -> Result<Prediction, String> {
    let row = |g: &mut Graph, v: &[f64]| {
        Tensor::new(&[1, v.len()], v.to_vec())
            .map(|t| g.constant(t))
            .map_err(err)
    };
    Ok(Prediction {
        pose: row(g, &p.pose)?,
        au: row(g, &p.au)?,
        id: row(g, &p.id)?,
        brow: row(g, &p.brow)?,
    })
}

/// A regressor that inverts the generator exactly, by looking up the
/// parameters each image was generated from.
struct LookupRegressor {
    table: HashMap<Vec<u64>, Vec<f64>>,
}

impl LookupRegressor {
    fn key(image: &[f64]) -> Vec<u64> {
        image.iter().map(|v| v.to_bits()).collect()
    }

    fn regress(&self, images: &Tensor) -> Result<Vec<Vec<f64>>, String> {
        let n = images.shape()[0];
        let per = images.len() / n;
        images
            .data()
            .chunks(per)
            .map(|img| {
                self.table
                    .get(&Self::key(img))
                    .cloned()
                    .ok_or_else(|| "unknown image".to_string())
            })
            .collect()
    }
}

fn rows_var(g: &mut Graph, rows: &[Vec<f64>]) -> Result<auregress_core::Var, String> {
    let data: Vec<f64> = rows.concat();
    Tensor::new(&[rows.len(), rows[0].len()], data)
        .map(|t| g.constant(t))
        .map_err(err)
}

fn loss_identities() -> Outcome {
    let cfg = ParamSpaceConfig {
        image_size: 32,
        ..ParamSpaceConfig::desk()
    };
    let mut g = Graph::new();

    let base = SoftParams::from_hard(&FacialParams::base(&cfg), &cfg);
    let pred = constant_prediction(&mut g, &base)?;
    let l_pr = parameter_loss(&mut g, &pred, &LossWeights::default()).map_err(err)?;
    let l_pr = g.value(l_pr).item();

    let images: Vec<Tensor> = (0..3)
        .map(|s| render::render(&cfg, &FacialParams::sample(s, &cfg), 0).map(|r| r.image))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let batch = Tensor::stack(&images.iter().collect::<Vec<_>>()).map_err(err)?;
    let mut seg = Segmenter::new(cfg.image_size, 11).map_err(err)?;
    seg.store.freeze();
    let rep = seg.extract_values(&batch, &RegionWeights::default()).map_err(err)?;
    let t1 = rep.constant(&mut g);
    let t2 = rep.constant(&mut g);
    let l_ct = facial_content_loss(&mut g, &t1, &t2).map_err(err)?;
    let l_ct = g.value(l_ct).item();

    let mut embedder = IdentityModel::new(cfg.image_size, 16, 12).map_err(err)?;
    embedder.store.freeze();
    let emb = embedder.embed_values(&batch).map_err(err)?;
    let (e1, e2) = (g.constant(emb.clone()), g.constant(emb));
    let l_id = identity_loss(&mut g, e1, e2).map_err(err)?;
    let l_id = g.value(l_id).item();

    let generator = Generator::new(&cfg, 13).map_err(err)?;
    let predictions: Vec<SoftParams> = (20..24)
        .map(|s| SoftParams::from_hard(&FacialParams::sample(s, &cfg), &cfg))
        .collect();
    let pairs: Vec<LoopbackPair> = predictions
        .iter()
        .map(|p| LoopbackPair::new(&cfg, p, true))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let gbe: Vec<Vec<f64>> = pairs.iter().map(|p| p.expressionless.clone()).collect();
    let gbi: Vec<Vec<f64>> = pairs.iter().map(|p| p.base_identity.clone()).collect();
    let img_gbe = generator.generate_encoded(&gbe).map_err(err)?;
    let img_gbi = generator.generate_encoded(&gbi).map_err(err)?;
    let per = img_gbe.len() / gbe.len();
    let mut table = HashMap::new();
    for (imgs, rows) in [(&img_gbe, &gbe), (&img_gbi, &gbi)] {
        for (img, row) in imgs.data().chunks(per).zip(rows.iter()) {
            table.insert(LookupRegressor::key(img), row.clone());
        }
    }
    let mock = LookupRegressor { table };
    let (re_gbe, re_gbi) = (mock.regress(&img_gbe)?, mock.regress(&img_gbi)?);
    let vars = [&gbe, &re_gbe, &gbi, &re_gbi]
        .iter()
        .map(|r| rows_var(&mut g, r))
        .collect::<Result<Vec<_>, _>>()?;
    let l_lp = loopback_loss(&mut g, vars[0], vars[1], vars[2], vars[3], 1.0).map_err(err)?;
    let l_lp = g.value(l_lp).item();

    let worst = [l_pr, l_ct, l_id, l_lp].iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok((
        worst <= 1e-12,
        format!("parameter {l_pr:.1e}, content {l_ct:.1e}, identity {l_id:.1e}, loopback {l_lp:.1e} (<= 1e-12)"),
    ))
}

/// ICC(3,1) from explicit two-way ANOVA sums of squares, two raters.
fn anova_icc(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let k = 2usize;
    let table: Vec<[f64; 2]> = pred.iter().zip(gt).map(|(&p, &g)| [p, g]).collect();
    let grand = table.iter().flatten().sum::<f64>() / (n * k) as f64;
    let mut ss_rows = 0.0;
    for row in &table {
        let m = (row[0] + row[1]) / k as f64;
        ss_rows += k as f64 * (m - grand).powi(2);
    }
    let mut ss_cols = 0.0;
    for j in 0..k {
        let m = table.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        ss_cols += n as f64 * (m - grand).powi(2);
    }
    let ss_total: f64 = table.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_err = ss_total - ss_rows - ss_cols;
    let bms = ss_rows / (n - 1) as f64;
    let ems = ss_err / ((n - 1) * (k - 1)) as f64;
    (bms - ems) / (bms + (k - 1) as f64 * ems)
}

fn icc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut oracle_gap, mut shift_gap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(3..=20);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let noise = rng.random_range(0.0..2.0);
        let pred: Vec<f64> = gt
            .iter()
            .map(|g| g * 0.8 + noise * rng.random_range(-1.0..1.0))
            .collect();
        let icc = icc31(&pred, &gt).map_err(err)?;
        oracle_gap = oracle_gap.max((icc - anova_icc(&pred, &gt)).abs());
        let c = rng.random_range(-3.0..3.0);
        let shifted: Vec<f64> = pred.iter().map(|p| p + c).collect();
        shift_gap = shift_gap.max((icc31(&shifted, &gt).map_err(err)? - icc).abs());
    }
    Ok((
        oracle_gap <= 1e-10 && shift_gap <= 1e-10,
        format!("100 instances, max oracle gap {oracle_gap:.1e}, max shift gap {shift_gap:.1e} (<= 1e-10)"),
    ))
}

fn ablation(cfg: &RunConfig, layout: &Layout) -> Outcome {
    let report = pipeline::ablate(cfg, layout, &layout.ablation()).map_err(err)?;
    let full = report
        .rows
        .iter()
        .find(|r| r.variant == "full")
        .ok_or("no full variant")?;
    let best_removed = report
        .rows
        .iter()
        .filter(|r| r.variant != "full")
        .map(|r| r.icc)
        .fold(f64::NEG_INFINITY, f64::max);
    let listing: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.variant, r.icc))
        .collect();
    Ok((
        full.icc >= best_removed - 0.02,
        format!(
            "{} ({} images x {} epochs; full >= best removed - 0.02)",
            listing.join(", "),
            report.images,
            report.epochs
        ),
    ))
}

fn disentanglement(cfg: &RunConfig, layout: &Layout, eval: &EvalReport) -> Outcome {
    let models_dir = layout.models();
    let (regressor, segmenter) = stages::load_predictor(cfg, &models_dir, &models_dir, "acceptance").map_err(err)?;
    let images = dataset::load_images(&layout.data(Split::Eval), 0..20).map_err(err)?;
    let predictions = stages::predict_all(cfg, &regressor.model, &segmenter.model, &images).map_err(err)?;
    let mut invariant = true;
    for (k, p) in predictions.iter().enumerate() {
        let style = k % 3;
        let reference = render::retarget(&cfg.space, &p.hard(), style).map_err(err)?;
        let mut other = p.clone();
        other
            .id
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37 + k as f64 * 0.11) % 1.0);
        other.brow.rotate_left(1);
        let moved = render::retarget(&cfg.space, &other.hard(), style).map_err(err)?;
        let same = reference
            .image
            .data()
            .iter()
            .zip(moved.image.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        invariant &= same;
    }
    let overlap = eval.exclusive_overlap;
    Ok((
        overlap < 0.05 && invariant,
        format!(
            "jaw pair overlap {:.2}% of {} (< 5%), retarget bit-invariant to identity on {} predictions: {invariant}",
            overlap * 100.0,
            eval.samples,
            predictions.len()
        ),
    ))
}

fn determinism() -> Outcome {
    let cfg = RunConfig::smoke();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let mut s = pipeline::pipeline(&cfg, &Layout::new(dir.path())).map_err(err)?;
        s.eval.timing = None;
        runs.push(s);
    }
    let same_eval = runs[0].eval == runs[1].eval;
    let same_fp = runs[0].fingerprints == runs[1].fingerprints;
    let same_ckpt = runs[0].checkpoint_digests == runs[1].checkpoint_digests;
    Ok((
        same_eval && same_fp && same_ckpt,
        format!(
            "two fresh runs (reduced config): metrics equal {same_eval}, fingerprints equal {same_fp}, checkpoint bytes equal {same_ckpt}"
        ),
    ))
}

fn main() {
    let mut gate = Gate { failed: 0 };
    let cfg = RunConfig::default();
    let layout = Layout::new(desk_root());
    eprintln!("desk run cached at {}", layout.root.display());

    gate.report(1, "gradient correctness", gradients());
    let summary = pipeline::pipeline(&cfg, &layout).map_err(err);
    let with_summary = |f: &dyn Fn(&PipelineSummary) -> Outcome| summary.as_ref().map_err(|e| e.clone()).and_then(f);

    gate.report(
        2,
        "generator fidelity",
        with_summary(&|_| generator_fidelity(&layout.root)),
    );
    gate.report(2, "appearance-only objective log", appearance_only_objective());
    gate.report(3, "unsupervised regression ICC", with_summary(&regression_icc));
    gate.report(3, "unsupervised regression MAE", with_summary(&regression_mae));
    gate.report(3, "trainer never reads ground truth", trainer_ignores_labels());
    gate.report(4, "speedup over iterative fitting", with_summary(&speedup));
    gate.report(
        4,
        "reconstruction parity with iterative fitting",
        with_summary(&reconstruction_parity),
    );
    gate.report(5, "loss identities", loss_identities());
    gate.report(6, "ICC oracle equivalence", icc_oracle());
    gate.report(7, "ablation direction", with_summary(&|_| ablation(&cfg, &layout)));
    gate.report(
        8,
        "sparsity and disentanglement",
        with_summary(&|s| disentanglement(&cfg, &layout, &s.eval)),
    );
    gate.report(9, "determinism", determinism());

    if gate.failed == 0 {
        println!("all acceptance checks passed");
        return;
    }
    println!("{} acceptance check(s) failed", gate.failed);
    if std::env::var_os("AUREGRESS_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
