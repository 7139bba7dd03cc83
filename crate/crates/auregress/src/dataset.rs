//! On-disk synthetic datasets: `images/NNNNNN.png`, `masks/NNNNNN.png`
//! (class indices), `params.csv` and a `dataset.json` descriptor.

use std::fs;
use std::path::{Path, PathBuf};

use auregress_core::extractor::LabelledImage;
use auregress_core::params::{FacialParams, ParamSpaceConfig, POSE_DIM};
use auregress_core::perturb::Photometric;
use auregress_core::render;
use auregress_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::fsutil::{ensure_dir, write_atomic, write_json};
use crate::imageio;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Uniform parameters rendered with the reference style on its own background.
    Clean,
    /// Parameters with at most one side of the exclusive AU pair active,
    /// rendered over a tinted background with photometric jitter.
    Perturbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    /// Random stream within the seed, so splits sharing a seed never overlap.
    pub stream: u64,
    pub photometric: Photometric,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub spec: DatasetSpec,
    pub space: ParamSpaceConfig,
    pub fingerprint: String,
}

pub struct Sample {
    pub params: FacialParams,
    pub image: Tensor,
    pub classes: Vec<u8>,
}

/// Deterministic sample stream for a dataset spec.
pub fn samples(cfg: &ParamSpaceConfig, spec: &DatasetSpec) -> impl Iterator<Item = Result<Sample>> {
    let cfg = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream);
    let spec = *spec;
    (0..spec.count).map(move |_| {
        let (params, out) = match spec.kind {
            DatasetKind::Clean => {
                let params = FacialParams::sample_with(&mut rng, &cfg);
                let out = render::render(&cfg, &params, 0)?;
                (params, out)
            }
            DatasetKind::Perturbed => {
                let params = FacialParams::sample_exclusive_with(&mut rng, &cfg);
                let out = spec.photometric.render(&cfg, &params, &mut rng)?;
                (params, out)
            }
        };
        Ok(Sample {
            params,
            image: out.image,
            classes: out.classes,
        })
    })
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:06}.png"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("masks").join(format!("{i:06}.png"))
}

pub fn params_header(cfg: &ParamSpaceConfig) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((1..=POSE_DIM).map(|i| format!("h{i}")));
    h.extend((1..=cfg.au_dim).map(|i| format!("au{i}")));
    h.extend((1..=cfg.id_cont_dim).map(|i| format!("idc{i}")));
    h.push("brow".into());
    h
}

/// Renders every sample of `spec` into `dir`. The descriptor is written last,
/// so a directory with a descriptor is complete.
pub fn generate(dir: &Path, cfg: &ParamSpaceConfig, spec: &DatasetSpec, fingerprint: &str) -> Result<Descriptor> {
    cfg.validate()?;
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("masks"))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_path = dir.join("params.csv");
    csv.write_record(params_header(cfg))
        .map_err(|e| AppError::format(&csv_path, e))?;
    for (i, sample) in samples(cfg, spec).enumerate() {
        let s = sample?;
        imageio::save_image(&image_path(dir, i), &s.image)?;
        imageio::save_classes(&mask_path(dir, i), &s.classes, cfg.image_size)?;
        let mut row = vec![i.to_string()];
        row.extend(s.params.continuous().map(|v| v.to_string()));
        row.push(s.params.brow.to_string());
        csv.write_record(&row).map_err(|e| AppError::format(&csv_path, e))?;
    }
    let bytes = csv.into_inner().map_err(|e| AppError::format(&csv_path, e.error()))?;
    write_atomic(&csv_path, &bytes)?;
    let desc = Descriptor {
        spec: *spec,
        space: *cfg,
        fingerprint: fingerprint.to_string(),
    };
    write_json(&dir.join("dataset.json"), &desc)?;
    Ok(desc)
}

pub fn descriptor(dir: &Path) -> Result<Descriptor> {
    let path = dir.join("dataset.json");
    if !path.exists() {
        return Err(AppError::Prerequisite(format!(
            "{} is not a generated dataset (no dataset.json)",
            dir.display()
        )));
    }
    crate::fsutil::read_json(&path)
}

/// Images `range` of the dataset, each `[3, s, s]`.
pub fn load_images(dir: &Path, range: std::ops::Range<usize>) -> Result<Vec<Tensor>> {
    range.map(|i| imageio::load_image(&image_path(dir, i))).collect()
}

pub fn load_labelled(dir: &Path, range: std::ops::Range<usize>) -> Result<Vec<LabelledImage>> {
    range
        .map(|i| {
            let mask = mask_path(dir, i);
            if !mask.exists() {
                return Err(AppError::Prerequisite(format!(
                    "dataset is missing mask {}",
                    mask.display()
                )));
            }
            let image = imageio::load_image(&image_path(dir, i))?;
            let (classes, _) = imageio::load_classes(&mask)?;
            Ok(LabelledImage { image, classes })
        })
        .collect()
}

/// Ground-truth parameters from `params.csv`, in row order.
pub fn load_params(dir: &Path, cfg: &ParamSpaceConfig) -> Result<Vec<FacialParams>> {
    let path = dir.join("params.csv");
    let text = fs::read(&path).map_err(|e| AppError::io(&path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| AppError::format(&path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != params_header(cfg) {
        return Err(AppError::format(&path, "header does not match the parameter space"));
    }
    let (a, i) = (1 + POSE_DIM, 1 + POSE_DIM + cfg.au_dim);
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| AppError::format(&path, e))?;
        let num = |k: usize| -> Result<f64> {
            r[k].parse()
                .map_err(|e| AppError::format(&path, format!("column {k}: {e}")))
        };
        let p = FacialParams {
            pose: [num(1)?, num(2)?],
            au: (a..i).map(num).collect::<Result<_>>()?,
            id: (i..i + cfg.id_cont_dim).map(num).collect::<Result<_>>()?,
            brow: r[i + cfg.id_cont_dim]
                .parse()
                .map_err(|e| AppError::format(&path, format!("brow: {e}")))?,
        };
        p.validate(cfg)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind, count: usize) -> DatasetSpec {
        DatasetSpec {
            kind,
            count,
            seed: 3,
            stream: 1,
            photometric: Photometric::default(),
        }
    }

    #[test]
    fn layout_and_params_round_trip() {
        let cfg = ParamSpaceConfig {
            image_size: 32,
            ..ParamSpaceConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        let s = spec(DatasetKind::Perturbed, 3);
        generate(dir.path(), &cfg, &s, "fp").unwrap();
        for name in [
            "images/000000.png",
            "images/000002.png",
            "masks/000001.png",
            "params.csv",
            "dataset.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let params = load_params(dir.path(), &cfg).unwrap();
        let expect: Vec<_> = samples(&cfg, &s).map(|x| x.unwrap().params).collect();
        assert_eq!(params, expect);
        let labelled = load_labelled(dir.path(), 0..3).unwrap();
        assert_eq!(labelled[1].classes.len(), 32 * 32);
        assert_eq!(descriptor(dir.path()).unwrap().fingerprint, "fp");
        let header = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
        assert!(header.starts_with("id,h1,h2,au1,"));
    }

    #[test]
    fn streams_differ_and_repeat() {
        let cfg = ParamSpaceConfig::desk();
        let a: Vec<_> = samples(&cfg, &spec(DatasetKind::Clean, 2))
            .map(|x| x.unwrap().params)
            .collect();
        let b: Vec<_> = samples(&cfg, &spec(DatasetKind::Clean, 2))
            .map(|x| x.unwrap().params)
            .collect();
        let mut other = spec(DatasetKind::Clean, 2);
        other.stream = 2;
        let c: Vec<_> = samples(&cfg, &other).map(|x| x.unwrap().params).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_masks_are_reported() {
        let cfg = ParamSpaceConfig {
            image_size: 32,
            ..ParamSpaceConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &cfg, &spec(DatasetKind::Clean, 1), "fp").unwrap();
        std::fs::remove_file(dir.path().join("masks/000000.png")).unwrap();
        let err = load_labelled(dir.path(), 0..1).err().unwrap();
        assert!(err.to_string().contains("missing mask"));
    }
}
