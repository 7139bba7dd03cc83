use std::path::Path;
use std::process::{Command, Output};

use auregress::config::RunConfig;
use auregress::pipeline::PipelineSummary;

fn auregress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auregress"))
        .args(args)
        .env_remove("AUREGRESS_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn render_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for out in [&a, &b] {
        let o = auregress(&["render", "--params", "base", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn predict_without_regressor_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    assert!(
        auregress(&["render", "--params", "seed:3", "--out", img.to_str().unwrap()])
            .status
            .success()
    );
    let o = auregress(&[
        "predict",
        "--image",
        img.to_str().unwrap(),
        "--model-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("predict requires regressor checkpoint"), "{err}");
}

#[test]
fn train_regressor_without_generator_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke();
    let config = write_config(dir.path(), &cfg);
    let data = dir.path().join("real");
    let o = auregress(&[
        "--config",
        &config,
        "gen-dataset",
        "--split",
        "real",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = auregress(&[
        "--config",
        &config,
        "train-regressor",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("models").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train-regressor requires"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(RunConfig::default()).unwrap();
    v["regressor"]["learning_rate"] = serde_json::json!(0.1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = auregress(&[
        "--config",
        path.to_str().unwrap(),
        "render",
        "--params",
        "base",
        "--out",
        "x.png",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn retarget_ignores_identity_channels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let mut p = auregress_core::params::FacialParams::sample(5, &cfg.space);
    let mut outputs = Vec::new();
    for (k, v) in [0.1, 0.9].into_iter().enumerate() {
        p.id.iter_mut().for_each(|x| *x = v);
        let params = dir.path().join(format!("p{k}.json"));
        std::fs::write(&params, serde_json::to_string(&p).unwrap()).unwrap();
        let out = dir.path().join(format!("r{k}.png"));
        let o = auregress(&[
            "retarget",
            "--params",
            params.to_str().unwrap(),
            "--style",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn smoke_pipeline_runs_caches_and_invalidates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke();
    let config = write_config(dir.path(), &cfg);
    let root = dir.path().join("run");
    let root_s = root.to_str().unwrap();

    let o = auregress(&["--config", &config, "pipeline", "--root", root_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first: PipelineSummary = serde_json::from_slice(&std::fs::read(root.join("summary.json")).unwrap()).unwrap();
    assert_eq!(first.stages.len(), 8);
    assert!(first.stages.iter().all(|s| s.executed));
    let csv = std::fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    assert!(csv.starts_with("au_channel,icc,mae\n"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + cfg.space.au_dim);
    for report in ["segmenter", "identity", "generator", "regressor"] {
        let path = root.join("models").join(format!("{report}_report.json"));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(v["config_fingerprint"], first.fingerprints.config);
    }

    let o = auregress(&["--config", &config, "pipeline", "--root", root_s]);
    assert!(o.status.success());
    let second: PipelineSummary = serde_json::from_slice(&std::fs::read(root.join("summary.json")).unwrap()).unwrap();
    assert!(second.stages.iter().all(|s| !s.executed), "{:?}", second.stages);
    assert_eq!(second.eval, first.eval);
    assert_eq!(second.checkpoint_digests, first.checkpoint_digests);

    // a changed regressor setting reruns only the regressor and evaluation
    let mut changed = cfg;
    changed.regressor.weights.w_adv = 0.0;
    let config2 = write_config(dir.path(), &changed);
    let o = auregress(&["--config", &config2, "pipeline", "--root", root_s]);
    assert!(o.status.success());
    let third: PipelineSummary = serde_json::from_slice(&std::fs::read(root.join("summary.json")).unwrap()).unwrap();
    let ran: Vec<&str> = third
        .stages
        .iter()
        .filter(|s| s.executed)
        .map(|s| s.stage.as_str())
        .collect();
    assert_eq!(ran, ["train-regressor", "eval"]);

    // retraining the generator alone makes the existing regressor stale for evaluation
    let models = root.join("models");
    let o = auregress(&[
        "--config",
        &config2,
        "train-generator",
        "--data",
        root.join("data/clean").to_str().unwrap(),
        "--epochs",
        "2",
        "--out",
        models.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = auregress(&[
        "--config",
        &config2,
        "bench",
        "--data",
        root.join("data/eval").to_str().unwrap(),
        "--models-dir",
        models.to_str().unwrap(),
        "--out",
        dir.path().join("bench").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stale checkpoint"));
}
