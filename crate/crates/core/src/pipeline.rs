//! End-to-end fitting: camera alignment, point classification, seeding and training.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, CaptureSet, RigidTransform};
use crate::composite::{SceneModel, ToneCurve, TransmissionMode, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::init::{
    align_clouds, classify_points, init_random, init_scene, init_unlabeled, Alignment, ClassifyParams, InitConfig, SfMPoints,
    Similarity,
};
use crate::optim::{train, CheckpointHook, LogRow, TrainConfig};

/// Everything `fit` reads from the run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub gamma_exponent: f64,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub classify: ClassifyParams,
    /// Drop the flash cue: three clouds, no linearity term, unlabeled seeding.
    pub flashless: bool,
    /// Tie the flash transmission to `c` times the no-flash one.
    pub hard_linear: Option<f64>,
    /// Seed every cloud randomly instead of from the point clouds.
    pub no_init: bool,
    pub checkpoint_every: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gamma_exponent: DEFAULT_GAMMA,
            train: TrainConfig::default(),
            init: InitConfig {
                max_points: Some(2000),
                ..Default::default()
            },
            classify: ClassifyParams::default(),
            flashless: false,
            hard_linear: None,
            no_init: false,
            checkpoint_every: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        ToneCurve::new(self.gamma_exponent)?;
        self.train.validate()?;
        if self.flashless && self.hard_linear.is_some() {
            return Err(Error::Config("flashless and hard_linear are mutually exclusive".into()));
        }
        if let Some(c) = self.hard_linear {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("hard_linear gain must be positive, got {c}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> TransmissionMode {
        match (self.flashless, self.hard_linear) {
            (true, _) => TransmissionMode::Flashless,
            (false, Some(c)) => TransmissionMode::HardLinear { c },
            (false, None) => TransmissionMode::Paired,
        }
    }

    /// Training configuration with the linearity weight removed when the mode has no flash cue.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train;
        if self.flashless {
            t.weights.linearity = 0.0;
        }
        t
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub scene: SceneModel,
    pub log: Vec<LogRow>,
    pub alignment: Option<Alignment>,
    /// Whether the alignment was applied to the flash pool.
    pub alignment_applied: bool,
    /// Classification accuracy against retained ground-truth labels.
    pub init_accuracy: Option<f64>,
    pub warnings: Vec<String>,
    pub skipped_steps: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median distance from each `a` point to its nearest `b` point.
pub fn median_cross_nn(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    median(
        a.iter()
            .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .collect(),
    )
}

/// Move a flash view into the no-flash frame under `t`.
fn transform_view(view: &CameraView, t: &Similarity) -> CameraView {
    let r = view.world_to_cam.rotation * t.rotation.transpose();
    let c = t.apply(&view.world_to_cam.center());
    let mut out = view.clone();
    out.world_to_cam = RigidTransform {
        rotation: r,
        translation: -(r * c),
    };
    out
}

/// Estimate the flash-to-no-flash similarity from camera centers and keep it
/// only when it brings the flash points closer to the no-flash points.
pub fn align_pools(captures: &CaptureSet, flash: &SfMPoints, noflash: &SfMPoints) -> (Option<Alignment>, bool, Vec<String>) {
    let fc: Vec<_> = captures.views.iter().filter(|v| v.flash).map(|v| v.world_to_cam.center()).collect();
    let nc: Vec<_> = captures.views.iter().filter(|v| !v.flash).map(|v| v.world_to_cam.center()).collect();
    let mut warnings = Vec::new();
    match align_clouds(&fc, &nc) {
        Ok(a) => {
            if a.transform.distance_from_identity() < 1e-12 {
                return (Some(a), false, warnings);
            }
            let before = median_cross_nn(&flash.positions, &noflash.positions);
            let moved: Vec<_> = flash.positions.iter().map(|p| a.transform.apply(p)).collect();
            let after = median_cross_nn(&moved, &noflash.positions);
            let accept = after < before;
            if !accept {
                let msg = format!("camera alignment rejected: point spacing {after:.4e} not below {before:.4e}");
                log::info!("{msg}");
                warnings.push(msg);
            }
            (Some(a), accept, warnings)
        }
        Err(e) => {
            let msg = format!("{e}; using identity alignment");
            log::warn!("{msg}");
            warnings.push(msg);
            (None, false, warnings)
        }
    }
}

fn padded_box(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let pad = ((hi - lo).norm() * 0.05).max(1e-3);
    (lo.add_scalar(-pad), hi.add_scalar(pad))
}

/// Seed the scene model for `cfg` without training it.
pub fn initialize(
    captures: &mut CaptureSet,
    flash_points: Option<&SfMPoints>,
    noflash_points: &SfMPoints,
    cfg: &FitConfig,
) -> Result<(SceneModel, Option<Alignment>, bool, Option<f64>, Vec<String>)> {
    cfg.validate()?;
    let tone = ToneCurve::new(cfg.gamma_exponent)?;
    let mode = cfg.mode();
    noflash_points.validate()?;
    if cfg.no_init {
        let all: Vec<_> = noflash_points
            .positions
            .iter()
            .chain(flash_points.map(|f| f.positions.iter()).into_iter().flatten())
            .copied()
            .collect();
        let (lo, hi) = padded_box(&all);
        let count = cfg.init.max_points.unwrap_or(noflash_points.len()).min(noflash_points.len()).max(1);
        let out = init_random(&lo, &hi, count, mode, tone, &cfg.init)?;
        return Ok((out.scene, None, false, None, out.warnings));
    }
    if cfg.flashless {
        let out = init_unlabeled(noflash_points, mode, tone, &cfg.init)?;
        return Ok((out.scene, None, false, None, out.warnings));
    }
    let flash = flash_points.ok_or_else(|| Error::Config("flash point cloud required unless flashless".into()))?;
    let (alignment, applied, mut warnings) = align_pools(captures, flash, noflash_points);
    let flash = match (&alignment, applied) {
        (Some(a), true) => {
            for v in captures.views.iter_mut().filter(|v| v.flash) {
                *v = transform_view(v, &a.transform);
            }
            flash.transformed(&a.transform)
        }
        _ => flash.clone(),
    };
    let labels = classify_points(&flash, noflash_points, &cfg.classify)?;
    let accuracy = labels.accuracy();
    let out = init_scene(&labels, mode, tone, &cfg.init)?;
    warnings.extend(out.warnings);
    Ok((out.scene, alignment, applied, accuracy, warnings))
}

/// Initialize and train a scene model from unpaired captures and their point clouds.
pub fn fit(
    captures: &CaptureSet,
    flash_points: Option<&SfMPoints>,
    noflash_points: &SfMPoints,
    cfg: &FitConfig,
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<FitOutcome> {
    let mut captures = captures.clone();
    let (scene, alignment, alignment_applied, init_accuracy, warnings) =
        initialize(&mut captures, flash_points, noflash_points, cfg)?;
    let train_cfg = cfg.effective_train();
    let res = train(scene, &captures, &train_cfg, cfg.checkpoint_every, hook)?;
    Ok(FitOutcome {
        scene: res.scene,
        log: res.log,
        alignment,
        alignment_applied,
        init_accuracy,
        warnings,
        skipped_steps: res.skipped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{emit_dataset, DatasetSpec};

    fn small() -> DatasetSpec {
        DatasetSpec {
            width: 32,
            height: 24,
            points_transmitted: 200,
            points_reflected: 200,
            texture_res: 32,
            ..Default::default()
        }
    }

    #[test]
    fn modes_follow_flags() {
        let mut c = FitConfig::default();
        assert_eq!(c.mode(), TransmissionMode::Paired);
        c.hard_linear = Some(1.5);
        assert_eq!(c.mode(), TransmissionMode::HardLinear { c: 1.5 });
        c.flashless = true;
        assert!(c.validate().is_err());
        c.hard_linear = None;
        assert_eq!(c.mode(), TransmissionMode::Flashless);
        assert_eq!(c.effective_train().weights.linearity, 0.0);
    }

    #[test]
    fn initialize_classifies_synthetic_points() {
        let ds = emit_dataset(&small()).unwrap();
        let mut caps = ds.captures.clone();
        let (scene, _, applied, acc, _) =
            initialize(&mut caps, ds.flash_points.as_ref(), &ds.noflash_points, &FitConfig::default()).unwrap();
        assert!(!applied);
        assert!(acc.unwrap() >= 0.99);
        assert_eq!(scene.mode, TransmissionMode::Paired);
        for (a, b) in caps.views.iter().zip(&ds.captures.views) {
            assert_eq!(a.world_to_cam, b.world_to_cam);
        }
    }

    #[test]
    fn transformed_view_keeps_projections() {
        let ds = emit_dataset(&small()).unwrap();
        let t = Similarity {
            scale: 2.0,
            rotation: *nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix(),
            translation: Vector3::new(0.5, -1.0, 2.0),
        };
        let v = &ds.captures.views[0];
        let moved = transform_view(v, &t);
        let x = Vector3::new(0.2, -0.1, 4.0);
        let a = v.world_to_cam.apply(&x);
        let b = moved.world_to_cam.apply(&t.apply(&x));
        assert!((a / a.z - b / b.z).norm() < 1e-12);
    }

    #[test]
    fn flashless_needs_no_flash_points() {
        let spec = DatasetSpec {
            flashless: true,
            ..small()
        };
        let ds = emit_dataset(&spec).unwrap();
        let cfg = FitConfig {
            flashless: true,
            ..Default::default()
        };
        let mut caps = ds.captures.clone();
        let (scene, ..) = initialize(&mut caps, None, &ds.noflash_points, &cfg).unwrap();
        assert!(scene.t_flash.is_none());
        let cfg = FitConfig::default();
        assert!(initialize(&mut caps, None, &ds.noflash_points, &cfg).is_err());
    }
}
