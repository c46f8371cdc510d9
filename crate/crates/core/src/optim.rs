//! Alternating flash/no-flash optimization of the scene clouds with Adam,
//! plus clone/split densification and opacity pruning.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CaptureSet;
use crate::composite::{CloudId, SceneGradients, SceneModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with, LossReport, LossWeights, SsimParams};
use crate::raster::{ParamGradients, RenderSettings};
use crate::splat::{rotation_matrix, sigmoid, GaussianCloud, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, in units of the scene extent.
    pub position: f64,
    /// Final position rate (log-linear decay), in units of the scene extent.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
        }
    }
}

impl LearningRates {
    fn scaled(&self, k: f64) -> Self {
        Self {
            position: self.position * k,
            position_final: self.position_final * k,
            rotation: self.rotation * k,
            scale: self.scale * k,
            opacity: self.opacity * k,
            sh: self.sh * k,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.position_final,
            self.rotation,
            self.scale,
            self.opacity,
            self.sh,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("learning rates must be finite and >= 0: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    /// Threshold on the mean screen-space positional gradient norm.
    pub densify_grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split.
    pub percent_dense: f64,
    pub prune_opacity_threshold: f64,
    /// Per-cloud cap.
    pub max_gaussians: usize,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRates::default(),
            densify_from: 200,
            densify_until: 1500,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            percent_dense: 0.01,
            prune_opacity_threshold: 0.005,
            max_gaussians: 5000,
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            tile_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.weights.validate()?;
        self.ssim.validate()?;
        if self.densify_interval == 0 || self.tile_size == 0 {
            return Err(Error::Config("densify_interval and tile_size must be > 0".into()));
        }
        if !(self.densify_grad_threshold > 0.0) || !(self.percent_dense > 0.0) {
            return Err(Error::Config("densification thresholds must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity_threshold) {
            return Err(Error::Config("prune opacity threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            tile_size: Some(self.tile_size),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state for every cloud of a scene, in flat-parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub clouds: Vec<(CloudId, Moments)>,
}

impl AdamState {
    pub fn new(scene: &SceneModel) -> Self {
        let clouds = scene
            .cloud_ids()
            .into_iter()
            .map(|id| {
                let n = scene.cloud(id).map(|c| c.len() * c.params_per_gaussian()).unwrap_or(0);
                (
                    id,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self { step: 0, clouds }
    }

    pub fn moments(&self, id: CloudId) -> Option<&Moments> {
        self.clouds.iter().find(|(c, _)| *c == id).map(|(_, m)| m)
    }

    fn moments_mut(&mut self, id: CloudId) -> Option<&mut Moments> {
        self.clouds.iter_mut().find(|(c, _)| *c == id).map(|(_, m)| m)
    }

    /// True when every moment vector matches its cloud's parameter count.
    pub fn congruent_with(&self, scene: &SceneModel) -> bool {
        let ids = scene.cloud_ids();
        ids.len() == self.clouds.len()
            && ids.iter().all(|id| {
                let c = scene.cloud(*id).unwrap();
                let n = c.len() * c.params_per_gaussian();
                self.moments(*id).is_some_and(|m| m.m.len() == n && m.v.len() == n)
            })
    }

    pub fn is_finite(&self) -> bool {
        self.clouds.iter().all(|(_, m)| m.m.iter().chain(&m.v).all(|x| x.is_finite()))
    }
}

/// Learning rate of each group at `iteration`, positions scaled by `extent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl StepRates {
    pub fn at(lr: &LearningRates, extent: f64, iteration: usize, total: usize) -> Self {
        let t = if total > 1 {
            (iteration as f64 / (total - 1) as f64).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let position = if lr.position > 0.0 && lr.position_final > 0.0 {
            (lr.position.ln() * (1.0 - t) + lr.position_final.ln() * t).exp()
        } else {
            lr.position
        };
        Self {
            position: position * extent,
            rotation: lr.rotation,
            scale: lr.scale,
            opacity: lr.opacity,
            sh: lr.sh,
        }
    }

    fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Position => self.position,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
        }
    }
}

/// Apply one Adam update to every cloud and renormalize the quaternions.
pub fn adam_update(scene: &mut SceneModel, grads: &SceneGradients, adam: &mut AdamState, rates: &StepRates) -> Result<()> {
    if !adam.congruent_with(scene) {
        return Err(Error::ShapeMismatch("Adam state does not match the scene".into()));
    }
    adam.step += 1;
    let t = adam.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for id in scene.cloud_ids() {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::InvalidGradientShape(format!("no gradient for cloud {}", id.name())))?
            .flatten();
        let cloud = scene.cloud_mut(id).expect("listed cloud");
        let stride = cloud.params_per_gaussian();
        let mut p = cloud.flatten();
        if g.len() != p.len() {
            return Err(Error::InvalidGradientShape(format!(
                "cloud {}: {} gradients for {} parameters",
                id.name(),
                g.len(),
                p.len()
            )));
        }
        let lr_by_offset: Vec<f64> = (0..stride).map(|o| rates.of(cloud.group_of(o))).collect();
        let mom = adam.moments_mut(id).expect("congruent state");
        for i in 0..p.len() {
            let gi = g[i];
            let m = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * gi;
            let v = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            mom.m[i] = m;
            mom.v[i] = v;
            let lr = lr_by_offset[i % stride];
            if lr != 0.0 {
                p[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            }
        }
        cloud.unflatten(&p)?;
        for gs in &mut cloud.gaussians {
            let n2: f64 = gs.rotation.iter().map(|v| v * v).sum();
            if (n2 - 1.0).abs() > 1e-12 {
                gs.normalize_rotation();
            }
        }
    }
    Ok(())
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// The step was skipped because the loss or a gradient was not finite.
    pub skipped: bool,
    pub grads: Option<SceneGradients>,
}

/// Loss and Adam update at one view.
pub fn train_step(
    scene: &mut SceneModel,
    views: &CaptureSet,
    view_index: usize,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rates: &StepRates,
) -> Result<StepOutcome> {
    let view = views
        .views
        .get(view_index)
        .ok_or_else(|| Error::InvalidParameter(format!("view index {view_index} out of range")))?;
    let (report, grads) = total_loss_with(scene, view, &cfg.weights, &cfg.ssim, &cfg.render_settings())?;
    if !report.is_finite() || !grads.is_finite() {
        return Ok(StepOutcome {
            report,
            skipped: true,
            grads: None,
        });
    }
    adam_update(scene, &grads, adam, rates)?;
    Ok(StepOutcome {
        report,
        skipped: false,
        grads: Some(grads),
    })
}

/// Endless view order: each epoch shuffles both pools and alternates flash and
/// no-flash views, starting from the larger pool (flash on ties), then appends
/// whatever remains of the larger pool.
#[derive(Debug, Clone)]
pub struct ViewSchedule {
    flash: Vec<usize>,
    noflash: Vec<usize>,
    rng: ChaCha8Rng,
    pending: std::collections::VecDeque<usize>,
}

impl ViewSchedule {
    pub fn epoch(&mut self) -> Vec<usize> {
        let mut f = self.flash.clone();
        let mut n = self.noflash.clone();
        f.shuffle(&mut self.rng);
        n.shuffle(&mut self.rng);
        let (first, second) = if f.len() >= n.len() { (f, n) } else { (n, f) };
        let mut out = Vec::with_capacity(first.len() + second.len());
        for i in 0..first.len() {
            out.push(first[i]);
            if i < second.len() {
                out.push(second[i]);
            }
        }
        out
    }
}

impl Iterator for ViewSchedule {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.pending.is_empty() {
            let e = self.epoch();
            self.pending.extend(e);
        }
        self.pending.pop_front()
    }
}

pub fn schedule_views(captures: &CaptureSet, seed: u64) -> ViewSchedule {
    let (flash, noflash) = (0..captures.views.len()).partition(|&i| captures.views[i].flash);
    ViewSchedule {
        flash,
        noflash,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: Default::default(),
    }
}

/// Running screen-space gradient statistics of one cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, g: &ParamGradients) {
        for i in 0..self.accum.len().min(g.len()) {
            if g.visible[i] {
                self.accum[i] += g.viewspace[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneStats {
    pub clouds: Vec<(CloudId, GradStats)>,
}

impl SceneStats {
    pub fn new(scene: &SceneModel) -> Self {
        Self {
            clouds: scene
                .cloud_ids()
                .into_iter()
                .map(|id| (id, GradStats::new(scene.cloud(id).unwrap().len())))
                .collect(),
        }
    }

    pub fn add(&mut self, grads: &SceneGradients) {
        for (id, s) in &mut self.clouds {
            if let Some(g) = grads.get(*id) {
                s.add(g);
            }
        }
    }

    pub fn get(&self, id: CloudId) -> Option<&GradStats> {
        self.clouds.iter().find(|(c, _)| *c == id).map(|(_, s)| s)
    }

    pub fn get_mut(&mut self, id: CloudId) -> Option<&mut GradStats> {
        self.clouds.iter_mut().find(|(c, _)| *c == id).map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Absolute scale above which a Gaussian is split instead of cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl DensifyParams {
    pub fn from_config(cfg: &TrainConfig, extent: f64) -> Self {
        Self {
            grad_threshold: cfg.densify_grad_threshold,
            split_scale: cfg.percent_dense * extent,
            prune_opacity: cfg.prune_opacity_threshold,
            max_gaussians: cfg.max_gaussians,
        }
    }
}

/// Clone or split high-gradient Gaussians, prune transparent ones, and keep
/// the Adam moments aligned with the new parameter layout. New Gaussians start
/// with zero moments.
pub fn densify_cloud(
    cloud: &mut GaussianCloud,
    stats: &GradStats,
    moments: &mut Moments,
    params: &DensifyParams,
    rng: &mut ChaCha8Rng,
) -> DensifyReport {
    let n = cloud.len();
    let stride = cloud.params_per_gaussian();
    let mut report = DensifyReport::default();

    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) >= params.grad_threshold).collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let mut budget = params.max_gaussians.saturating_sub(n);
    let mut action = vec![0u8; n]; // 1 = clone, 2 = split
    for &i in &candidates {
        if budget == 0 {
            break;
        }
        let big = cloud.gaussians[i].scale().max() > params.split_scale;
        action[i] = if big { 2 } else { 1 };
        budget -= 1;
    }

    // (source index or None for fresh moments, gaussian)
    let mut next: Vec<(Option<usize>, crate::splat::Gaussian3D)> = Vec::with_capacity(n + candidates.len());
    let mut fresh = Vec::new();
    for i in 0..n {
        let g = &cloud.gaussians[i];
        match action[i] {
            1 => {
                next.push((Some(i), g.clone()));
                fresh.push(g.clone());
                report.cloned += 1;
            }
            2 => {
                let s = g.scale();
                let r = rotation_matrix(&g.rotation);
                for _ in 0..2 {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                    let mut child = g.clone();
                    child.position = g.position + r * s.component_mul(&z);
                    child.log_scale = g.log_scale.map(|v| v - 1.6f64.ln());
                    fresh.push(child);
                }
                report.split += 1;
            }
            _ => next.push((Some(i), g.clone())),
        }
    }
    next.extend(fresh.into_iter().map(|g| (None, g)));

    // Prune, never emptying the cloud.
    let keep: Vec<bool> = next.iter().map(|(_, g)| sigmoid(g.opacity_logit) >= params.prune_opacity).collect();
    let survivors = keep.iter().filter(|k| **k).count();
    let mut out = Vec::with_capacity(next.len());
    if survivors == 0 {
        let best = next
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.opacity_logit.total_cmp(&b.1 .1.opacity_logit).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        report.pruned = next.len().saturating_sub(1);
        out.push(next.swap_remove(best));
    } else {
        for (k, item) in keep.into_iter().zip(next) {
            if k {
                out.push(item);
            } else {
                report.pruned += 1;
            }
        }
    }

    let mut m = Vec::with_capacity(out.len() * stride);
    let mut v = Vec::with_capacity(out.len() * stride);
    for (src, _) in &out {
        match src {
            Some(i) => {
                m.extend_from_slice(&moments.m[i * stride..(i + 1) * stride]);
                v.extend_from_slice(&moments.v[i * stride..(i + 1) * stride]);
            }
            None => {
                m.extend(std::iter::repeat_n(0.0, stride));
                v.extend(std::iter::repeat_n(0.0, stride));
            }
        }
    }
    moments.m = m;
    moments.v = v;
    cloud.gaussians = out.into_iter().map(|(_, g)| g).collect();
    report
}

/// Densify and prune every cloud independently; statistics are reset.
pub fn densify_and_prune(
    scene: &mut SceneModel,
    stats: &mut SceneStats,
    adam: &mut AdamState,
    params: &DensifyParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(CloudId, DensifyReport)>> {
    let mut out = Vec::new();
    for id in scene.cloud_ids() {
        let st = stats
            .get(id)
            .cloned()
            .ok_or_else(|| Error::ShapeMismatch(format!("no statistics for cloud {}", id.name())))?;
        let cloud = scene.cloud_mut(id).unwrap();
        if st.accum.len() != cloud.len() {
            return Err(Error::ShapeMismatch(format!("statistics for cloud {} are stale", id.name())));
        }
        let mom = adam
            .moments_mut(id)
            .ok_or_else(|| Error::ShapeMismatch(format!("no Adam state for cloud {}", id.name())))?;
        let rep = densify_cloud(cloud, &st, mom, params, rng);
        *stats.get_mut(id).unwrap() = GradStats::new(cloud.len());
        out.push((id, rep));
    }
    Ok(out)
}

/// Half-diagonal of the bounding box of all Gaussian means.
pub fn scene_extent(scene: &SceneModel) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for id in scene.cloud_ids() {
        if let Some((a, b)) = scene.cloud(id).unwrap().bounds() {
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
    }
    let e = 0.5 * (hi - lo).norm();
    if e.is_finite() && e > 0.0 {
        e
    } else {
        1.0
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub view_id: String,
    pub l1: f64,
    pub dssim: f64,
    pub linearity: f64,
    pub depth: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub scene: SceneModel,
    pub log: Vec<LogRow>,
    pub skipped_steps: usize,
    pub densify_events: usize,
}

/// Called after `iteration` (1-based count of completed steps).
pub type CheckpointHook<'a> = dyn FnMut(usize, &SceneModel) -> Result<()> + 'a;

/// Run the full optimization.
pub fn train(
    scene: SceneModel,
    captures: &CaptureSet,
    cfg: &TrainConfig,
    checkpoint_every: Option<usize>,
    hook: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainResult> {
    cfg.validate()?;
    scene.validate()?;
    let mut hook = hook;
    let mut scene = scene;
    if cfg.iterations == 0 {
        return Ok(TrainResult {
            scene,
            log: Vec::new(),
            skipped_steps: 0,
            densify_events: 0,
        });
    }
    for v in &captures.views {
        if v.image.is_none() {
            return Err(Error::InvalidParameter(format!("view {} has no image", v.view_id)));
        }
    }
    let cap = cfg.max_gaussians.max(1);
    for id in scene.cloud_ids() {
        if scene.cloud(id).unwrap().len() > cap {
            return Err(Error::Config(format!(
                "cloud {} starts with {} gaussians, above max_gaussians {cap}",
                id.name(),
                scene.cloud(id).unwrap().len()
            )));
        }
    }
    let extent = scene_extent(&scene);
    let dparams = DensifyParams::from_config(cfg, extent);
    let mut adam = AdamState::new(&scene);
    let mut stats = SceneStats::new(&scene);
    let mut schedule = schedule_views(captures, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd3b5_17e5);
    let mut lr = cfg.lr;
    let mut halved = false;
    let mut skipped = 0;
    let mut densify_events = 0;
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let vi = schedule.next().expect("endless schedule");
        let rates = StepRates::at(&lr, extent, it, cfg.iterations);
        let out = train_step(&mut scene, captures, vi, cfg, &mut adam, &rates)?;
        let r = out.report;
        log.push(LogRow {
            iteration: it,
            view_id: captures.views[vi].view_id.clone(),
            l1: r.l1,
            dssim: r.dssim,
            linearity: r.linearity,
            depth: r.depth,
            total: r.total,
        });
        if out.skipped {
            skipped += 1;
            log::warn!("iteration {it}: non-finite loss at view {}, step skipped", captures.views[vi].view_id);
            if !halved {
                lr = lr.scaled(0.5);
                halved = true;
                log::warn!("learning rates halved");
            }
        } else if let Some(g) = &out.grads {
            if it < cfg.densify_until {
                stats.add(g);
            }
        }
        let done = it + 1;
        if done >= cfg.densify_from && done <= cfg.densify_until && done % cfg.densify_interval == 0 {
            let reps = densify_and_prune(&mut scene, &mut stats, &mut adam, &dparams, &mut rng)?;
            densify_events += 1;
            for (id, rep) in reps {
                log::debug!(
                    "iteration {done}: cloud {} cloned {} split {} pruned {} -> {}",
                    id.name(),
                    rep.cloned,
                    rep.split,
                    rep.pruned,
                    scene.cloud(id).unwrap().len()
                );
            }
        }
        if let (Some(every), Some(h)) = (checkpoint_every, hook.as_mut()) {
            if every > 0 && done % every == 0 && done != cfg.iterations {
                h(done, &scene)?;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} steps were skipped for non-finite losses", cfg.iterations);
    }
    Ok(TrainResult {
        scene,
        log,
        skipped_steps: skipped,
        densify_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraView;
    use crate::composite::TransmissionMode;
    use crate::map::ImageMap;
    use crate::synth::{origin_view, random_gaussian_scene};
    use rand::Rng;

    fn captures(nf: usize, nn: usize) -> CaptureSet {
        let mut views = Vec::new();
        for i in 0..nf {
            views.push(origin_view(&format!("f{i}"), 8, 8, true).with_image(ImageMap::filled(8, 8, 3, 0.2)));
        }
        for i in 0..nn {
            views.push(origin_view(&format!("n{i}"), 8, 8, false).with_image(ImageMap::filled(8, 8, 3, 0.2)));
        }
        CaptureSet::new(views).unwrap()
    }

    fn pattern(c: &CaptureSet, order: &[usize]) -> String {
        order.iter().map(|&i| if c.views[i].flash { 'F' } else { 'N' }).collect()
    }

    #[test]
    fn schedule_patterns() {
        let c = captures(2, 2);
        let mut s = schedule_views(&c, 1);
        assert_eq!(pattern(&c, &s.epoch()), "FNFN");
        let c = captures(3, 1);
        let mut s = schedule_views(&c, 1);
        let e = s.epoch();
        assert_eq!(pattern(&c, &e), "FNFF");
        let mut sorted = e.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let c = captures(1, 3);
        assert_eq!(pattern(&c, &schedule_views(&c, 2).epoch()), "NFNN");
    }

    #[test]
    fn schedule_is_deterministic_and_shuffles() {
        let c = captures(6, 6);
        let a: Vec<usize> = schedule_views(&c, 7).take(120).collect();
        let b: Vec<usize> = schedule_views(&c, 7).take(120).collect();
        assert_eq!(a, b);
        let other: Vec<usize> = schedule_views(&c, 8).take(120).collect();
        assert_ne!(a, other);
        let p = pattern(&c, &a);
        assert!(!p.contains("FFF") && !p.contains("NNN"));
        for epoch in a.chunks(12) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..12).collect::<Vec<_>>());
        }
    }

    fn fit_view(seed: u64) -> (SceneModel, CaptureSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_gaussian_scene(&mut rng, 8, 0, TransmissionMode::Paired);
        let mut views = Vec::new();
        for (id, flash) in [("f", true), ("n", false)] {
            let v: CameraView = origin_view(id, 16, 16, flash);
            let comp = crate::composite::render_composite(&truth, &v).unwrap().composite;
            views.push(v.with_image(comp.map(|x| truth.tone.inverse(x))));
        }
        let start = random_gaussian_scene(&mut rng, 8, 0, TransmissionMode::Paired);
        (start, CaptureSet::new(views).unwrap())
    }

    #[test]
    fn zero_rates_leave_parameters_unchanged() {
        let (scene, caps) = fit_view(1);
        let mut cfg = TrainConfig::default();
        cfg.lr = LearningRates {
            position: 0.0,
            position_final: 0.0,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
            sh: 0.0,
        };
        let mut s = scene.clone();
        // Rotations are renormalized after a step; start from unit quaternions.
        for id in s.cloud_ids() {
            for g in &mut s.cloud_mut(id).unwrap().gaussians {
                g.normalize_rotation();
            }
        }
        let before = s.clone();
        let mut adam = AdamState::new(&s);
        let rates = StepRates::at(&cfg.lr, 1.0, 0, 10);
        let out = train_step(&mut s, &caps, 0, &cfg, &mut adam, &rates).unwrap();
        assert!(out.report.total.is_finite());
        assert_eq!(s, before);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let (scene, caps) = fit_view(2);
        let cfg = TrainConfig::default();
        let run = || {
            let mut s = scene.clone();
            let mut adam = AdamState::new(&s);
            let rates = StepRates::at(&cfg.lr, 1.0, 0, 10);
            train_step(&mut s, &caps, 1, &cfg, &mut adam, &rates).unwrap();
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_view_overfit_decreases_loss() {
        let (scene, caps) = fit_view(3);
        let caps = CaptureSet::new_unchecked_pools(vec![caps.views[0].clone()]).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            densify_until: 0,
            ..Default::default()
        };
        let res = train(scene, &caps, &cfg, None, None).unwrap();
        let data: Vec<f64> = res.log.iter().map(|r| 0.8 * r.l1 + 0.2 * r.dssim).collect();
        for t in 0..data.len() - 50 {
            assert!(data[t + 50] <= 0.99 * data[t], "window at {t}: {} -> {}", data[t], data[t + 50]);
        }
    }

    #[test]
    fn zero_iterations_return_input() {
        let (scene, caps) = fit_view(4);
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let res = train(scene.clone(), &caps, &cfg, None, None).unwrap();
        assert_eq!(res.scene, scene);
        assert!(res.log.is_empty());
    }

    fn params() -> DensifyParams {
        DensifyParams {
            grad_threshold: 2e-4,
            split_scale: 0.05,
            prune_opacity: 0.005,
            max_gaussians: 100,
        }
    }

    #[test]
    fn densify_noop_and_clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_gaussian_scene(&mut rng, 6, 0, TransmissionMode::Paired);
        let mut cloud = scene.t_noflash.clone();
        let stride = cloud.params_per_gaussian();
        let mut mom = Moments {
            m: vec![1.0; 6 * stride],
            v: vec![2.0; 6 * stride],
        };
        let stats = GradStats::new(6);
        let before = cloud.clone();
        let rep = densify_cloud(&mut cloud, &stats, &mut mom, &params(), &mut rng);
        assert_eq!(rep, DensifyReport::default());
        assert_eq!(cloud, before);

        cloud.gaussians[2].log_scale = Vector3::repeat(0.01f64.ln());
        let mut stats = GradStats::new(6);
        stats.accum[2] = 1e-3;
        stats.count[2] = 1;
        let rep = densify_cloud(&mut cloud, &stats, &mut mom, &params(), &mut rng);
        assert_eq!(rep.cloned, 1);
        assert_eq!(cloud.len(), 7);
        assert_eq!(cloud.gaussians[6], cloud.gaussians[2]);
        assert_eq!(mom.m.len(), 7 * stride);
        assert!(mom.m[6 * stride..].iter().all(|v| *v == 0.0));
        assert!(mom.m[..6 * stride].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn densify_split_and_prune() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = random_gaussian_scene(&mut rng, 4, 0, TransmissionMode::Paired);
        let mut cloud = scene.t_noflash.clone();
        cloud.gaussians[0].log_scale = Vector3::repeat(0.2f64.ln());
        cloud.gaussians[3].opacity_logit = -10.0;
        let stride = cloud.params_per_gaussian();
        let mut mom = Moments {
            m: vec![0.5; 4 * stride],
            v: vec![0.5; 4 * stride],
        };
        let mut stats = GradStats::new(4);
        stats.accum[0] = 1.0;
        stats.count[0] = 2;
        let rep = densify_cloud(&mut cloud, &stats, &mut mom, &params(), &mut rng);
        assert_eq!(rep.split, 1);
        assert_eq!(rep.pruned, 1);
        assert_eq!(cloud.len(), 4);
        let child = &cloud.gaussians[2];
        assert!((child.log_scale.x - (0.2f64 / 1.6).ln()).abs() < 1e-12);
        assert_eq!(mom.m.len(), 4 * stride);
    }

    #[test]
    fn densify_invariant_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            let mut scene = random_gaussian_scene(&mut rng, 10, (trial % 2) as usize, TransmissionMode::Paired);
            for id in scene.cloud_ids() {
                for g in &mut scene.cloud_mut(id).unwrap().gaussians {
                    g.normalize_rotation();
                    g.opacity_logit = rng.random_range(-8.0..2.0);
                }
            }
            let mut adam = AdamState::new(&scene);
            let mut stats = SceneStats::new(&scene);
            for (_, s) in &mut stats.clouds {
                for i in 0..s.accum.len() {
                    s.accum[i] = rng.random_range(0.0..5e-4);
                    s.count[i] = rng.random_range(0..3);
                }
            }
            let p = DensifyParams {
                max_gaussians: 14,
                ..params()
            };
            densify_and_prune(&mut scene, &mut stats, &mut adam, &p, &mut rng).unwrap();
            scene.validate().unwrap();
            assert!(adam.congruent_with(&scene));
            for id in scene.cloud_ids() {
                let c = scene.cloud(id).unwrap();
                assert!(!c.is_empty() && c.len() <= 14);
                assert_eq!(stats.get(id).unwrap().accum.len(), c.len());
            }
        }
    }

    #[test]
    fn training_keeps_parameters_valid() {
        let (scene, caps) = fit_view(8);
        let cfg = TrainConfig {
            iterations: 60,
            densify_from: 20,
            densify_until: 50,
            densify_interval: 10,
            max_gaussians: 20,
            ..Default::default()
        };
        let mut calls = Vec::new();
        let mut hook = |it: usize, _: &SceneModel| {
            calls.push(it);
            Ok(())
        };
        let res = train(scene, &caps, &cfg, Some(25), Some(&mut hook)).unwrap();
        assert_eq!(calls, vec![25, 50]);
        assert_eq!(res.log.len(), 60);
        res.scene.validate().unwrap();
        for id in res.scene.cloud_ids() {
            for g in &res.scene.cloud(id).unwrap().gaussians {
                let n: f64 = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
