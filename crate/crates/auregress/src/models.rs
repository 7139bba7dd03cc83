//! Saving and restoring the four networks as checkpoints.

use std::path::{Path, PathBuf};

use auregress_core::extractor::Segmenter;
use auregress_core::generator::Generator;
use auregress_core::identity::IdentityModel;
use auregress_core::nn::ParamStore;
use auregress_core::params::ParamSpaceConfig;
use auregress_core::regressor::{Regressor, RegressorShape};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Meta, ModelKind};
use crate::config::Upstream;
use crate::error::{AppError, Result};

pub fn path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(kind.file_name())
}

#[derive(Serialize, Deserialize)]
struct IdentityDetail {
    embedding_dim: usize,
}

/// A restored network with the metadata it was saved with.
pub struct Loaded<M> {
    pub model: M,
    pub meta: Meta,
}

pub fn save(
    dir: &Path,
    kind: ModelKind,
    store: &ParamStore,
    space: &ParamSpaceConfig,
    fingerprint: &str,
    upstream: &Upstream,
    detail: serde_json::Value,
) -> Result<Meta> {
    let meta = Meta {
        kind,
        fingerprint: fingerprint.to_string(),
        upstream: upstream.clone(),
        space: *space,
        frozen: store.is_frozen(),
        detail,
    };
    checkpoint::save(&path(dir, kind), &meta, store)?;
    Ok(meta)
}

pub fn identity_detail(model: &IdentityModel) -> serde_json::Value {
    serde_json::to_value(IdentityDetail {
        embedding_dim: model.embedding_dim(),
    })
    .expect("detail serializes")
}

pub fn regressor_detail(model: &Regressor) -> serde_json::Value {
    serde_json::to_value(model.shape()).expect("detail serializes")
}

/// Metadata of a required checkpoint; a missing file is a prerequisite error naming `needed_by`.
pub fn require_meta(dir: &Path, kind: ModelKind, needed_by: &str) -> Result<Meta> {
    let p = path(dir, kind);
    if !p.exists() {
        return Err(AppError::Prerequisite(format!(
            "{needed_by} requires {} checkpoint {}",
            kind.label(),
            p.display()
        )));
    }
    let meta = checkpoint::read_meta(&p)?;
    if meta.kind != kind {
        return Err(AppError::format(
            &p,
            format!("holds a {:?} checkpoint, expected {kind:?}", meta.kind),
        ));
    }
    Ok(meta)
}

fn restore<M>(
    dir: &Path,
    kind: ModelKind,
    needed_by: &str,
    build: impl FnOnce(&Meta) -> Result<M>,
    store: fn(&mut M) -> &mut ParamStore,
) -> Result<Loaded<M>> {
    require_meta(dir, kind, needed_by)?;
    let p = path(dir, kind);
    let (meta, tensors) = checkpoint::load(&p)?;
    let mut model = build(&meta)?;
    let s = store(&mut model);
    s.load(&tensors)?;
    if s.len() != tensors.len() {
        return Err(AppError::format(&p, "checkpoint holds tensors the model does not use"));
    }
    if meta.frozen {
        s.freeze();
    }
    Ok(Loaded { model, meta })
}

fn detail<T: serde::de::DeserializeOwned>(dir: &Path, kind: ModelKind, meta: &Meta) -> Result<T> {
    serde_json::from_value(meta.detail.clone()).map_err(|e| AppError::format(path(dir, kind), e))
}

pub fn load_segmenter(dir: &Path, needed_by: &str) -> Result<Loaded<Segmenter>> {
    restore(
        dir,
        ModelKind::Segmenter,
        needed_by,
        |m| Ok(Segmenter::new(m.space.image_size, 0)?),
        |m| &mut m.store,
    )
}

pub fn load_identity(dir: &Path, needed_by: &str) -> Result<Loaded<IdentityModel>> {
    restore(
        dir,
        ModelKind::Identity,
        needed_by,
        |m| {
            let d: IdentityDetail = detail(dir, ModelKind::Identity, m)?;
            Ok(IdentityModel::new(m.space.image_size, d.embedding_dim, 0)?)
        },
        |m| &mut m.store,
    )
}

pub fn load_generator(dir: &Path, needed_by: &str) -> Result<Loaded<Generator>> {
    restore(
        dir,
        ModelKind::Generator,
        needed_by,
        |m| Ok(Generator::new(&m.space, 0)?),
        |m| &mut m.store,
    )
}

pub fn load_regressor(dir: &Path, needed_by: &str) -> Result<Loaded<Regressor>> {
    restore(
        dir,
        ModelKind::Regressor,
        needed_by,
        |m| {
            let shape: RegressorShape = detail(dir, ModelKind::Regressor, m)?;
            Ok(Regressor::new(&m.space, &shape, 0)?)
        },
        |m| &mut m.store,
    )
}
