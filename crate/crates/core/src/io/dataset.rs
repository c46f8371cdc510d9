//! Synthetic dataset directories.
//!
//! Layout: `manifest.json`, `poses.json`, `images/<id>.pfm` (raw-linear) with
//! `previews/<id>.png`, `points/{flash,noflash}.ply` and `truth/<id>_<layer>.pfm`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pfm::{read_pfm, write_pfm};
use super::ply::{read_points, write_points};
use super::{read_json, write_json, write_png_preview};
use crate::camera::{CameraRecord, CaptureSet};
use crate::error::{Error, Result};
use crate::map::ImageMap;
use crate::synth::{build_scene, Dataset, DatasetSpec, OracleView, ViewTruth};

pub const MANIFEST: &str = "manifest.json";
pub const POSES: &str = "poses.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub view_id: String,
    pub flash: bool,
    pub heldout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub views: Vec<ViewEntry>,
    pub has_flash_points: bool,
}

const LAYERS: [&str; 9] = ["T_N", "T_F", "R", "beta", "betaR", "depthT", "depthR", "mask", "paired"];

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.pfm"))
}

fn truth_path(dir: &Path, id: &str, layer: &str) -> PathBuf {
    dir.join("truth").join(format!("{id}_{layer}.pfm"))
}

fn mask_map(mask: &[u8], w: usize, h: usize) -> ImageMap {
    ImageMap::from_fn(w, h, 1, |x, y, _| mask[y * w + x] as f64)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "previews", "points", "truth"] {
        mkdir(&dir.join(sub))?;
    }
    let heldout_ids: Vec<&str> = ds.heldout.iter().map(|v| v.view_id.as_str()).collect();
    let mut entries = Vec::new();
    let mut records = Vec::new();
    for v in ds.captures.views.iter().chain(&ds.heldout) {
        let image = v.image.as_ref().ok_or_else(|| Error::InvalidParameter(format!("view {} has no image", v.view_id)))?;
        write_pfm(&image_path(dir, &v.view_id), image)?;
        write_png_preview(&dir.join("previews").join(format!("{}.png", v.view_id)), image)?;
        entries.push(ViewEntry {
            view_id: v.view_id.clone(),
            flash: v.flash,
            heldout: heldout_ids.contains(&v.view_id.as_str()),
        });
        records.push(v.record());
    }
    for t in &ds.truth {
        let l = &t.layers;
        let (w, h) = (l.image.width(), l.image.height());
        let maps = [
            &l.t_noflash,
            &l.t_flash,
            &l.reflection,
            &l.beta,
            &l.beta_r,
            &l.depth_t,
            &l.depth_r,
            &mask_map(&l.mask, w, h),
            &t.paired,
        ];
        for (name, m) in LAYERS.iter().zip(maps) {
            write_pfm(&truth_path(dir, &t.view_id, name), m)?;
        }
    }
    if let Some(f) = &ds.flash_points {
        write_points(&dir.join("points/flash.ply"), f)?;
    }
    write_points(&dir.join("points/noflash.ply"), &ds.noflash_points)?;
    write_json(&dir.join(POSES), &records)?;
    write_json(
        &dir.join(MANIFEST),
        &DatasetManifest {
            spec: ds.spec.clone(),
            seed: ds.spec.seed,
            views: entries,
            has_flash_points: ds.flash_points.is_some(),
        },
    )
}

pub fn read_poses(path: &Path) -> Result<Vec<CameraRecord>> {
    read_json(path)
}

/// Load a dataset directory. Ground-truth layers are optional; without them
/// `truth` is empty.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    manifest.spec.validate()?;
    let records = read_poses(&dir.join(POSES))?;
    let mut captures = Vec::new();
    let mut heldout = Vec::new();
    let mut truth = Vec::new();
    for entry in &manifest.views {
        let rec = records
            .iter()
            .find(|r| r.view_id == entry.view_id)
            .ok_or_else(|| Error::format("dataset", dir.join(POSES), format!("no pose for view {}", entry.view_id)))?;
        if rec.flash != entry.flash {
            return Err(Error::format("dataset", dir.join(MANIFEST), format!("flash flag of {} disagrees with poses", entry.view_id)));
        }
        let image = read_pfm(&image_path(dir, &entry.view_id))?;
        let view = rec.to_view()?.with_image(image.clone());
        view.validate()?;
        if truth_path(dir, &entry.view_id, "T_N").exists() {
            let get = |layer: &str| read_pfm(&truth_path(dir, &entry.view_id, layer));
            let mask = get("mask")?;
            truth.push(ViewTruth {
                view_id: entry.view_id.clone(),
                layers: OracleView {
                    image,
                    t_noflash: get("T_N")?,
                    t_flash: get("T_F")?,
                    reflection: get("R")?,
                    beta: get("beta")?,
                    beta_r: get("betaR")?,
                    depth_t: get("depthT")?,
                    depth_r: get("depthR")?,
                    mask: mask.data().iter().map(|&v| v as u8).collect(),
                },
                paired: get("paired")?,
            });
        }
        if entry.heldout {
            heldout.push(view);
        } else {
            captures.push(view);
        }
    }
    let captures = if manifest.spec.flashless {
        CaptureSet::new_unchecked_pools(captures)?
    } else {
        CaptureSet::new(captures)?
    };
    let flash_points = if manifest.has_flash_points {
        Some(read_points(&dir.join("points/flash.ply"))?)
    } else {
        None
    };
    Ok(Dataset {
        scene: build_scene(&manifest.spec, manifest.seed),
        spec: manifest.spec,
        captures,
        heldout,
        truth,
        flash_points,
        noflash_points: read_points(&dir.join("points/noflash.ply"))?,
    })
}
