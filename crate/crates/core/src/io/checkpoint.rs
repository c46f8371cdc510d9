//! Checkpoint directories: one PLY per cloud plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ply::{read_cloud, write_cloud};
use super::{read_json, write_json};
use crate::composite::{CloudId, SceneModel, ToneCurve, TransmissionMode};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Paired,
    HardLinear,
    Flashless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub gamma_exponent: f64,
    pub mode: ModeName,
    pub hard_linear: Option<f64>,
    pub sh_degree: usize,
    pub iteration: usize,
}

impl CheckpointManifest {
    pub fn of(scene: &SceneModel, iteration: usize) -> Self {
        let (mode, hard_linear) = match scene.mode {
            TransmissionMode::Paired => (ModeName::Paired, None),
            TransmissionMode::HardLinear { c } => (ModeName::HardLinear, Some(c)),
            TransmissionMode::Flashless => (ModeName::Flashless, None),
        };
        Self {
            gamma_exponent: scene.tone.exponent,
            mode,
            hard_linear,
            sh_degree: scene.t_noflash.sh_degree,
            iteration,
        }
    }

    pub fn transmission_mode(&self) -> Result<TransmissionMode> {
        match (self.mode, self.hard_linear) {
            (ModeName::Paired, None) => Ok(TransmissionMode::Paired),
            (ModeName::Flashless, None) => Ok(TransmissionMode::Flashless),
            (ModeName::HardLinear, Some(c)) => Ok(TransmissionMode::HardLinear { c }),
            (m, c) => Err(Error::Config(format!("inconsistent checkpoint mode {m:?} with hard_linear {c:?}"))),
        }
    }
}

fn cloud_file(id: CloudId) -> String {
    format!("{}.ply", id.name())
}

pub fn write_checkpoint(dir: &Path, scene: &SceneModel, iteration: usize) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for id in scene.cloud_ids() {
        write_cloud(&dir.join(cloud_file(id)), scene.cloud(id).expect("listed cloud"))?;
    }
    if scene.t_flash.is_none() {
        let stale = dir.join(cloud_file(CloudId::TransmissionFlash));
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }
    write_json(&dir.join(MANIFEST), &CheckpointManifest::of(scene, iteration))
}

pub fn read_checkpoint(dir: &Path) -> Result<(SceneModel, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    let mode = manifest.transmission_mode()?;
    let tone = ToneCurve::new(manifest.gamma_exponent)?;
    let t_flash = if mode == TransmissionMode::Paired {
        Some(read_cloud(&dir.join(cloud_file(CloudId::TransmissionFlash)))?)
    } else {
        None
    };
    let scene = SceneModel {
        t_flash,
        t_noflash: read_cloud(&dir.join(cloud_file(CloudId::TransmissionNoFlash)))?,
        reflection: read_cloud(&dir.join(cloud_file(CloudId::Reflection)))?,
        beta: read_cloud(&dir.join(cloud_file(CloudId::Beta)))?,
        tone,
        mode,
    };
    scene.validate()?;
    Ok((scene, manifest))
}
