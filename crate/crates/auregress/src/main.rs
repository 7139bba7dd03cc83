use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auregress::config::{RunConfig, Split};
use auregress::error::{AppError, Result};
use auregress::fsutil::write_json;
use auregress::pipeline::{self, Layout};
use auregress::stages::{self, progress};
use auregress::{dataset, imageio, models};
use auregress_core::autodiff::gradcheck::grad_check_all;
use auregress_core::params::{FacialParams, SoftParams};
use auregress_core::render;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "auregress",
    version,
    about = "Unsupervised facial parameter regression through a learned renderer"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Overrides every seed of the configuration (and AUREGRESS_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Clean,
    Real,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Clean => Split::Clean,
            SplitArg::Real => Split::Real,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (images, class masks, params.csv).
    GenDataset {
        #[arg(long, value_enum, default_value = "clean")]
        split: SplitArg,
        /// Image count; defaults to the configured size of the split.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the segmentation feature extractor.
    PretrainExtractor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the identity embedder.
    PretrainIdentity {
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator to imitate the renderer.
    TrainGenerator {
        /// Clean dataset holding the training pairs and the held-out tail.
        #[arg(long)]
        data: PathBuf,
        /// Directory with the extractor checkpoint (defaults to --out).
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the parameter regressor on unlabelled images.
    TrainRegressor {
        #[arg(long)]
        data: PathBuf,
        /// Directory with the frozen network checkpoints (defaults to --out).
        #[arg(long)]
        models_dir: Option<PathBuf>,
        /// Comma-separated w_id,w_pr,w_lp,w_adv.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda_le: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the parameters of one image and print them as JSON.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        /// Also write input | generator | renderer reconstruction side by side.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// ICC and MAE per AU channel on a labelled dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the regressor with each auxiliary loss removed in turn.
    Ablate {
        /// Pipeline root holding data/ and models/.
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time regressor inference against iterative fitting.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        iterative_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render parameters with the procedural renderer.
    Render {
        /// `base`, `seed:N`, or a JSON file of parameters.
        #[arg(long)]
        params: String,
        #[arg(long, default_value_t = 0)]
        style: usize,
        /// Also write the class map as a grayscale PNG.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply pose and AU parameters to another character style.
    Retarget {
        /// `base`, `seed:N`, or a JSON file of parameters (hard or soft).
        #[arg(long)]
        params: String,
        #[arg(long)]
        style: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Run every stage whose output is missing or stale.
    Pipeline {
        #[arg(long)]
        root: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_env_seed()?;
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_params(spec: &str, cfg: &RunConfig) -> Result<FacialParams> {
    if spec == "base" {
        return Ok(FacialParams::base(&cfg.space));
    }
    if let Some(seed) = spec.strip_prefix("seed:") {
        let seed = seed
            .parse()
            .map_err(|_| AppError::Invalid(format!("bad seed in {spec}")))?;
        return Ok(FacialParams::sample(seed, &cfg.space));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let params = match serde_json::from_str::<FacialParams>(&text) {
        Ok(p) => p,
        Err(_) => serde_json::from_str::<SoftParams>(&text)
            .map_err(|e| AppError::format(path, e))?
            .hard(),
    };
    params.validate(&cfg.space)?;
    Ok(params)
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenDataset {
            split,
            count,
            seed,
            out,
        } => {
            let mut cfg = load_config(config, seed.seed)?;
            let split = Split::from(split);
            if let Some(n) = count {
                match split {
                    Split::Clean => {
                        cfg.data.clean_held_out = cfg.data.clean_held_out.min(n);
                        cfg.data.clean_train = n - cfg.data.clean_held_out;
                    }
                    Split::Real => cfg.data.real = n,
                    Split::Eval => cfg.data.eval = n,
                }
            }
            stages::gen_dataset(&cfg, split, &out)?;
        }
        Command::PretrainExtractor {
            data,
            epochs,
            seed,
            out,
        } => {
            let mut cfg = load_config(config, seed.seed)?;
            if let Some(e) = epochs {
                cfg.segmenter.training.epochs = e;
            }
            stages::pretrain_extractor(&cfg, &data, &out)?;
        }
        Command::PretrainIdentity { epochs, seed, out } => {
            let mut cfg = load_config(config, seed.seed)?;
            if let Some(e) = epochs {
                cfg.identity.training.epochs = e;
            }
            stages::pretrain_identity_stage(&cfg, &out)?;
        }
        Command::TrainGenerator {
            data,
            models_dir,
            pairs,
            lambda,
            epochs,
            seed,
            out,
        } => {
            let mut cfg = load_config(config, seed.seed)?;
            if let Some(p) = pairs {
                cfg.generator.pairs = p;
            }
            if let Some(l) = lambda {
                cfg.generator.training.lambda_per = l;
            }
            if let Some(e) = epochs {
                cfg.generator.training.epochs = e;
            }
            let models_dir = models_dir.unwrap_or_else(|| out.clone());
            stages::train_generator_stage(&cfg, &data, &models_dir, &out)?;
        }
        Command::TrainRegressor {
            data,
            models_dir,
            weights,
            alpha,
            beta,
            lambda_le,
            epochs,
            seed,
            out,
        } => {
            let mut cfg = load_config(config, seed.seed)?;
            let w = &mut cfg.regressor.weights;
            if let Some(v) = weights {
                [w.w_id, w.w_pr, w.w_lp, w.w_adv] = [v[0], v[1], v[2], v[3]];
            }
            w.alpha = alpha.unwrap_or(w.alpha);
            w.beta = beta.unwrap_or(w.beta);
            w.lambda_le = lambda_le.unwrap_or(w.lambda_le);
            if let Some(e) = epochs {
                cfg.regressor.epochs = e;
            }
            let models_dir = models_dir.unwrap_or_else(|| out.clone());
            stages::train_regressor_stage(&cfg, &cfg.regressor, None, &data, &models_dir, &out)?;
        }
        Command::Predict {
            image,
            model_dir,
            render,
        } => {
            let cfg = load_config(config, None)?;
            let (regressor, segmenter) = stages::load_predictor(&cfg, &model_dir, &model_dir, "predict")?;
            let s = cfg.space.image_size;
            let img = imageio::load_image(&image)?;
            if img.shape() != [3, s, s] {
                return Err(AppError::Invalid(format!(
                    "{} is {:?}, the model expects {s}x{s}",
                    image.display(),
                    &img.shape()[1..]
                )));
            }
            let pred = stages::predict_all(&cfg, &regressor.model, &segmenter.model, &[img.clone()])?.remove(0);
            let hard = pred.hard();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "soft": pred, "params": hard }))
                    .expect("params serialize")
            );
            if let Some(path) = render {
                let generator = models::load_generator(&model_dir, "predict --render")?;
                let row = auregress_core::params::encode_soft(&cfg.space, &pred.pose, &pred.au, &pred.id, &pred.brow)?;
                let generated = generator.model.generate_encoded(&[row])?.reshape(&[3, s, s])?;
                let rendered = render::render(&cfg.space, &hard, 0)?.image;
                imageio::save_image(&path, &imageio::grid(&[img, generated, rendered], 3)?)?;
            }
        }
        Command::Eval { data, models_dir, out } => {
            let cfg = load_config(config, None)?;
            let report = stages::eval_stage(&cfg, &data, &models_dir, &models_dir)?;
            stages::write_eval_csv(&out.join("eval.csv"), &report)?;
            write_json(&out.join("eval.json"), &report)?;
            for c in &report.channels {
                let icc = c.icc.map_or("undefined".to_string(), |v| format!("{v:.3}"));
                println!("{:<12} icc {icc:>9}  mae {:.3}", c.channel, c.mae);
            }
            println!("average      icc {:>9.3}  mae {:.3}", report.avg_icc, report.avg_mae);
        }
        Command::Ablate {
            root,
            epochs,
            images,
            out,
        } => {
            let mut cfg = load_config(config, None)?;
            if let Some(e) = epochs {
                cfg.ablation.epochs = e;
            }
            if let Some(n) = images {
                cfg.ablation.images = n;
            }
            let layout = Layout::new(root);
            let out = out.unwrap_or_else(|| layout.ablation());
            let report = pipeline::ablate(&cfg, &layout, &out)?;
            for r in &report.rows {
                println!("{:<16} icc {:.3}  mae {:.3}", r.variant, r.icc, r.mae);
            }
        }
        Command::Bench {
            data,
            models_dir,
            images,
            iterative_steps,
            out,
        } => {
            let mut cfg = load_config(config, None)?;
            if let Some(n) = images {
                cfg.bench.images = n;
            }
            if let Some(s) = iterative_steps {
                cfg.bench.iterative_steps = s;
            }
            let (regressor, segmenter) = stages::load_predictor(&cfg, &models_dir, &models_dir, "bench")?;
            let generator = models::load_generator(&models_dir, "bench")?;
            stages::check_upstream(&regressor.meta, "generator", &generator.meta.fingerprint)?;
            let imgs = dataset::load_images(&data, 0..cfg.bench.images)?;
            let nets = auregress::bench::BenchNets {
                segmenter: &segmenter.model,
                generator: &generator.model,
                regressor: &regressor.model,
                region_weights: cfg.region_weights,
            };
            let report = auregress::bench::speed_bench(
                &cfg.space,
                &nets,
                &imgs,
                cfg.bench.iterative_steps,
                cfg.bench.step_size,
                cfg.bench.warmup,
            )?;
            write_json(&out.join("bench.json"), &report)?;
            println!(
                "regressor {:.2} ms, iterative {:.2} ms, speedup {:.1}x, content loss ratio {:.3}",
                report.timing.regressor_ms, report.timing.iterative_ms, report.timing.speedup, report.content_ratio
            );
        }
        Command::Render {
            params,
            style,
            masks,
            out,
        } => {
            let cfg = load_config(config, None)?;
            let p = parse_params(&params, &cfg)?;
            let r = render::render(&cfg.space, &p, style)?;
            imageio::save_image(&out, &r.image)?;
            if let Some(m) = masks {
                imageio::save_classes(&m, &r.classes, r.size)?;
            }
        }
        Command::Retarget { params, style, out } => {
            let cfg = load_config(config, None)?;
            let p = parse_params(&params, &cfg)?;
            let r = render::retarget(&cfg.space, &p, style)?;
            imageio::save_image(&out, &r.image)?;
        }
        Command::Gradcheck { instances, eps } => {
            if !(eps > 0.0 && eps <= 1e-2) {
                return Err(AppError::Invalid("eps must lie in (0, 1e-2]".into()));
            }
            let rows = grad_check_all(instances, eps);
            println!("{:<20} max relative error", "op");
            for (kind, err) in &rows {
                println!("{:<20} {err:.3e}", format!("{kind:?}"));
            }
            let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
            if !(worst < 1e-4) {
                return Err(AppError::Invalid(format!(
                    "gradient check failed: worst relative error {worst:.3e}"
                )));
            }
        }
        Command::Pipeline { root } => {
            let cfg = load_config(config, None)?;
            let summary = pipeline::pipeline(&cfg, &Layout::new(&root))?;
            let executed = summary.stages.iter().filter(|s| s.executed).count();
            progress(format!("{executed} of {} stages executed", summary.stages.len()));
            println!(
                "avg ICC {:.3}  avg MAE {:.3}  speedup {:.1}x",
                summary.eval.avg_icc, summary.eval.avg_mae, summary.bench.timing.speedup
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
