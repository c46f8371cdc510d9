//! Synthetic ground-truth world: a textured transmitted plane seen through a
//! partially reflective glass pane, with the reflected scene modeled as a
//! virtual plane behind the glass. A per-pixel ray oracle renders exact
//! flash/no-flash images and layers without touching the splat rasterizer.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, CaptureSet, Intrinsics, RigidTransform};
use crate::composite::{SceneModel, ToneCurve, TransmissionMode};
use crate::error::{Error, Result};
use crate::init::{PointLabel, PointSource, SfMPoints};
use crate::map::ImageMap;
use crate::splat::{logit, Gaussian3D, GaussianCloud, ShCoeffs, SH_C0};

/// Baked texture sampled bilinearly over `[0, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub map: ImageMap,
}

impl Texture {
    pub fn constant(channels: usize, value: f64) -> Self {
        Self {
            map: ImageMap::filled(2, 2, channels, value),
        }
    }

    pub fn channels(&self) -> usize {
        self.map.channels()
    }

    pub fn sample(&self, u: f64, v: f64) -> Vec<f64> {
        let (w, h) = (self.map.width(), self.map.height());
        let x = u.clamp(0.0, 1.0) * (w - 1) as f64;
        let y = v.clamp(0.0, 1.0) * (h - 1) as f64;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        (0..self.channels())
            .map(|c| {
                let a = self.map.get(x0, y0, c) * (1.0 - fx) + self.map.get(x1, y0, c) * fx;
                let b = self.map.get(x0, y1, c) * (1.0 - fx) + self.map.get(x1, y1, c) * fx;
                a * (1.0 - fy) + b * fy
            })
            .collect()
    }

    /// Smooth random pattern (soft checker, gradient and blobs) rescaled per
    /// channel into `[lo, hi]`.
    pub fn procedural(rng: &mut ChaCha8Rng, res: usize, channels: usize, lo: f64, hi: f64) -> Self {
        let res = res.max(2);
        let two_pi = std::f64::consts::TAU;
        let mut out = ImageMap::zeros(res, res, channels);
        for c in 0..channels {
            let f1 = rng.random_range(1.0..3.0);
            let f2 = rng.random_range(1.0..3.0);
            let p1 = rng.random_range(0.0..1.0);
            let p2 = rng.random_range(0.0..1.0);
            let gx = rng.random_range(-0.5..0.5);
            let gy = rng.random_range(-0.5..0.5);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.08..0.2),
                        rng.random_range(-0.8..0.8),
                    )
                })
                .collect();
            let mut vals = Vec::with_capacity(res * res);
            for y in 0..res {
                for x in 0..res {
                    let (s, t) = (x as f64 / (res - 1) as f64, y as f64 / (res - 1) as f64);
                    let mut v = 0.4 * (two_pi * (f1 * s + p1)).sin() * (two_pi * (f2 * t + p2)).sin() + gx * s + gy * t;
                    for (bx, by, br, ba) in &blobs {
                        let d2 = (s - bx).powi(2) + (t - by).powi(2);
                        v += ba * (-d2 / (2.0 * br * br)).exp();
                    }
                    vals.push(v);
                }
            }
            let mn = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (mx - mn).max(1e-12);
            for (i, v) in vals.iter().enumerate() {
                out.data_mut()[i * channels + c] = lo + (hi - lo) * (v - mn) / span;
            }
        }
        Self { map: out }
    }
}

/// Finite textured rectangle `center + a·u + b·v`, `|a| ≤ half_u`, `|b| ≤ half_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Plane {
    /// Plane through `(0, 0, z)` facing the cameras, rotated by `tilt` about the x axis.
    pub fn tilted(z: f64, tilt: f64, half_u: f64, half_v: f64, texture: Texture) -> Self {
        Self {
            v: Vector3::new(0.0, tilt.cos(), tilt.sin()),
            ..Self::fronto(z, half_u, half_v, texture)
        }
    }

    /// Axis-aligned plane `z = const` facing the cameras.
    pub fn fronto(z: f64, half_u: f64, half_v: f64, texture: Texture) -> Self {
        Self {
            center: Vector3::new(0.0, 0.0, z),
            u: Vector3::x(),
            v: Vector3::y(),
            half_u,
            half_v,
            texture,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    /// Ray parameter and texture coordinates of the hit, if inside the rectangle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let local = origin + dir * t - self.center;
        let (a, b) = (local.dot(&self.u), local.dot(&self.v));
        if a.abs() > self.half_u || b.abs() > self.half_v {
            return None;
        }
        Some((t, 0.5 + 0.5 * a / self.half_u, 0.5 + 0.5 * b / self.half_v))
    }

    pub fn point(&self, s: f64, t: f64) -> Vector3<f64> {
        self.center + self.u * ((2.0 * s - 1.0) * self.half_u) + self.v * ((2.0 * t - 1.0) * self.half_v)
    }

    pub fn color_at(&self, s: f64, t: f64) -> Vec<f64> {
        self.texture.sample(s, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub transmitted: Plane,
    /// Virtual plane standing in for the mirrored scene.
    pub reflected: Plane,
    /// Glass pane; its texture holds β.
    pub glass: Plane,
    pub alpha: f64,
    pub beta_f: f64,
    pub background: [f64; 3],
    /// Inverse-square flash falloff relative to `falloff_ref` distance.
    pub falloff: bool,
    pub falloff_ref: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta_f >= 0.0) || !(self.falloff_ref > 0.0) {
            return Err(Error::InvalidParameter("synthetic scene needs alpha > 0, beta_f >= 0".into()));
        }
        for p in [&self.transmitted, &self.reflected, &self.glass] {
            if !p.texture.map.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter("texture values outside [0, 1]".into()));
            }
        }
        if self.glass.texture.channels() != 1 {
            return Err(Error::InvalidParameter("beta texture must have one channel".into()));
        }
        Ok(())
    }
}

/// Layer decomposition of one oracle view.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub image: ImageMap,
    pub t_noflash: ImageMap,
    /// Flash transmission `(1 + α·f)·T_N`.
    pub t_flash: ImageMap,
    pub reflection: ImageMap,
    pub beta: ImageMap,
    pub beta_r: ImageMap,
    pub depth_t: ImageMap,
    pub depth_r: ImageMap,
    /// Bit 0: transmitted plane hit; bit 1: reflected plane hit; bit 2: glass hit.
    pub mask: Vec<u8>,
}

pub const MASK_TRANSMITTED: u8 = 1;
pub const MASK_REFLECTED: u8 = 2;
pub const MASK_GLASS: u8 = 4;

/// Render one view by casting a ray per pixel center.
pub fn render_oracle(scene: &SyntheticScene, k: &Intrinsics, pose: &RigidTransform, flash: bool) -> Result<OracleView> {
    scene.validate()?;
    k.validate()?;
    let (w, h) = (k.width, k.height);
    let rt = pose.rotation.transpose();
    let origin = -(rt * pose.translation);
    let fwd = rt * Vector3::z();
    let mut out = OracleView {
        image: ImageMap::zeros(w, h, 3),
        t_noflash: ImageMap::zeros(w, h, 3),
        t_flash: ImageMap::zeros(w, h, 3),
        reflection: ImageMap::zeros(w, h, 3),
        beta: ImageMap::zeros(w, h, 1),
        beta_r: ImageMap::zeros(w, h, 3),
        depth_t: ImageMap::zeros(w, h, 1),
        depth_r: ImageMap::zeros(w, h, 1),
        mask: vec![0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let d_cam = Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let dir = rt * d_cam;
            let mut m = 0u8;
            let (t_col, gain) = match scene.transmitted.intersect(&origin, &dir) {
                Some((t, s, v)) => {
                    m |= MASK_TRANSMITTED;
                    let hit = origin + dir * t;
                    out.depth_t.set(x, y, 0, (hit - origin).dot(&fwd));
                    let gain = if scene.falloff {
                        let d = (hit - origin).norm();
                        (scene.falloff_ref / d).powi(2)
                    } else {
                        1.0
                    };
                    (scene.transmitted.color_at(s, v), gain)
                }
                None => (scene.background.to_vec(), 1.0),
            };
            let r_col = match scene.reflected.intersect(&origin, &dir) {
                Some((t, s, v)) => {
                    m |= MASK_REFLECTED;
                    out.depth_r.set(x, y, 0, ((dir * t).dot(&fwd)).max(0.0));
                    scene.reflected.color_at(s, v)
                }
                None => vec![0.0; 3],
            };
            let beta = match scene.glass.intersect(&origin, &dir) {
                Some((_, s, v)) => {
                    m |= MASK_GLASS;
                    scene.glass.color_at(s, v)[0]
                }
                None => 0.0,
            };
            out.mask[y * w + x] = m;
            out.beta.set(x, y, 0, beta);
            let flash_gain = if flash { 1.0 + scene.alpha * gain } else { 1.0 };
            let refl_gain = beta + if flash { scene.beta_f } else { 0.0 };
            for c in 0..3 {
                out.t_noflash.set(x, y, c, t_col[c]);
                out.t_flash.set(x, y, c, (1.0 + scene.alpha * gain) * t_col[c]);
                out.reflection.set(x, y, c, r_col[c]);
                out.beta_r.set(x, y, c, beta * r_col[c]);
                out.image.set(x, y, c, flash_gain * t_col[c] + refl_gain * r_col[c]);
            }
        }
    }
    Ok(out)
}

/// `max(i_f − i_n, 0)` elementwise.
pub fn paired_subtract(i_f: &ImageMap, i_n: &ImageMap) -> Result<ImageMap> {
    i_f.zip_map(i_n, |a, b| (a - b).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub fov_x_deg: f64,
    pub flash_views: usize,
    pub noflash_views: usize,
    pub heldout_views: usize,
    /// Angular extent of the camera arc.
    pub arc_deg: f64,
    /// Camera distance to the look-at point.
    pub distance: f64,
    /// Uniform jitter of camera centers (world units).
    pub jitter: f64,
    pub alpha: f64,
    pub beta_f: f64,
    pub falloff: bool,
    /// Capture every view without flash.
    pub flashless: bool,
    /// Depth of the virtual reflected plane.
    pub reflected_depth: f64,
    /// Tilt of the transmitted plane about the horizontal axis.
    pub transmitted_tilt_deg: f64,
    /// Value range of the glass reflectance texture.
    pub beta_range: [f64; 2],
    pub points_transmitted: usize,
    pub points_reflected: usize,
    pub point_jitter: f64,
    /// Relative standard deviation of multiplicative point color noise.
    pub color_noise: f64,
    pub texture_res: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            fov_x_deg: 60.0,
            flash_views: 6,
            noflash_views: 6,
            heldout_views: 2,
            arc_deg: 30.0,
            distance: 4.0,
            jitter: 0.03,
            alpha: 0.5,
            beta_f: 0.0,
            falloff: false,
            flashless: false,
            reflected_depth: 5.0,
            transmitted_tilt_deg: 0.0,
            beta_range: [0.3, 0.45],
            points_transmitted: 2000,
            points_reflected: 2000,
            point_jitter: 0.002,
            color_noise: 0.0,
            texture_res: 256,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::Config("image size must be at least 4x4".into()));
        }
        if !(self.fov_x_deg > 1.0 && self.fov_x_deg < 170.0) {
            return Err(Error::Config(format!("fov {} out of range", self.fov_x_deg)));
        }
        if self.flash_views == 0 || self.noflash_views == 0 {
            return Err(Error::Config("need at least one view per pool".into()));
        }
        if !(self.arc_deg > 0.0) || !(self.distance > 0.0) {
            return Err(Error::Config("degenerate camera arc (zero extent)".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta_f >= 0.0) || !(self.jitter >= 0.0) || !(self.color_noise >= 0.0) {
            return Err(Error::Config("alpha > 0 and non-negative beta_f, jitter, noise required".into()));
        }
        if self.points_transmitted == 0 || self.points_reflected == 0 {
            return Err(Error::Config("point counts must be positive".into()));
        }
        if !(self.reflected_depth > GLASS_DEPTH) {
            return Err(Error::Config(format!("reflected depth must exceed the glass depth {GLASS_DEPTH}")));
        }
        let [b0, b1] = self.beta_range;
        if !(0.0 <= b0 && b0 <= b1 && b1 <= 1.0) {
            return Err(Error::Config("beta range must satisfy 0 <= lo <= hi <= 1".into()));
        }
        if !(self.transmitted_tilt_deg.abs() < 60.0) {
            return Err(Error::Config("transmitted tilt must lie within (-60, 60) degrees".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_x_deg.to_radians())
    }
}

/// Per-view ground truth; `paired` is the opposite-illumination image at the same pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTruth {
    pub view_id: String,
    pub layers: OracleView,
    pub paired: ImageMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scene: SyntheticScene,
    pub captures: CaptureSet,
    pub heldout: Vec<CameraView>,
    /// Ground truth for `captures.views` followed by `heldout`.
    pub truth: Vec<ViewTruth>,
    pub flash_points: Option<SfMPoints>,
    pub noflash_points: SfMPoints,
}

impl Dataset {
    pub fn truth_for(&self, view_id: &str) -> Option<&ViewTruth> {
        self.truth.iter().find(|t| t.view_id == view_id)
    }

    pub fn flash_centers(&self) -> Vec<Vector3<f64>> {
        self.captures.views.iter().filter(|v| v.flash).map(|v| v.world_to_cam.center()).collect()
    }

    pub fn noflash_centers(&self) -> Vec<Vector3<f64>> {
        self.captures.views.iter().filter(|v| !v.flash).map(|v| v.world_to_cam.center()).collect()
    }
}

pub const LOOK_AT: [f64; 3] = [0.0, 0.0, 4.0];
pub const GLASS_DEPTH: f64 = 2.0;

/// The fixed desk-scale world, with textures drawn from `seed`.
pub fn build_scene(spec: &DatasetSpec, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57);
    let res = spec.texture_res;
    let t_tex = Texture::procedural(&mut rng, res, 3, 0.03, 0.45);
    let r_tex = Texture::procedural(&mut rng, res, 3, 0.1, 0.6);
    let b_tex = Texture::procedural(&mut rng, res, 1, spec.beta_range[0], spec.beta_range[1]);
    let r_scale = spec.reflected_depth / 3.0;
    SyntheticScene {
        transmitted: Plane::tilted(LOOK_AT[2], spec.transmitted_tilt_deg.to_radians(), 3.5, 2.8, t_tex),
        reflected: Plane::fronto(spec.reflected_depth, 2.6 * r_scale, 2.1 * r_scale, r_tex),
        glass: Plane::fronto(GLASS_DEPTH, 1.6, 1.25, b_tex),
        alpha: spec.alpha,
        beta_f: spec.beta_f,
        background: [0.05; 3],
        falloff: spec.falloff,
        falloff_ref: spec.distance,
    }
}

/// Camera pose at fraction `f ∈ [0, 1]` along the arc.
fn arc_pose(spec: &DatasetSpec, f: f64, rng: &mut ChaCha8Rng) -> Result<RigidTransform> {
    let target = Vector3::from(LOOK_AT);
    let theta = (f - 0.5) * spec.arc_deg.to_radians();
    let lift = 0.15 * (2.0 * f - 1.0);
    let mut eye = target + spec.distance * Vector3::new(theta.sin(), lift, -theta.cos());
    if spec.jitter > 0.0 {
        eye += Vector3::from_fn(|_, _| rng.random_range(-spec.jitter..spec.jitter));
    }
    RigidTransform::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0))
}

/// Camera poses of the capture and held-out views; captures alternate flash
/// flags along the arc while counts allow.
pub fn capture_poses(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<(String, bool, RigidTransform)>, Vec<(String, RigidTransform)>)> {
    let n = spec.flash_views + spec.noflash_views;
    let mut flags = Vec::with_capacity(n);
    let (mut nf, mut nn) = (spec.flash_views, spec.noflash_views);
    let mut next_flash = true;
    while nf + nn > 0 {
        let flash = if nf == 0 {
            false
        } else if nn == 0 {
            true
        } else {
            next_flash
        };
        if flash {
            nf -= 1
        } else {
            nn -= 1
        }
        flags.push(flash);
        next_flash = !flash;
    }
    let mut views = Vec::with_capacity(n);
    for (i, flash) in flags.into_iter().enumerate() {
        let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let id = format!("view_{i:03}");
        views.push((id, flash && !spec.flashless, arc_pose(spec, f, rng)?));
    }
    let mut held = Vec::new();
    for j in 0..spec.heldout_views {
        // Midway between neighboring capture positions.
        let slot = (2 * j + 1) * (n - 1).max(1) / (2 * spec.heldout_views.max(1));
        let f = ((slot as f64 + 0.5) / (n - 1).max(1) as f64).clamp(0.0, 1.0);
        held.push((format!("heldout_{j:03}"), arc_pose(spec, f, rng)?));
    }
    Ok((views, held))
}

fn noisy(rng: &mut ChaCha8Rng, c: &[f64], sigma: f64) -> [f64; 3] {
    let n = Normal::new(0.0, sigma.max(1e-300)).expect("valid sigma");
    std::array::from_fn(|k| {
        let e = if sigma > 0.0 { n.sample(rng) } else { 0.0 };
        (c[k] * (1.0 + e)).clamp(0.0, 1.0)
    })
}

/// Region of a plane seen by the capture cameras, as texture-coordinate bounds.
fn visible_st(plane: &Plane, k: &Intrinsics, poses: &[RigidTransform]) -> (f64, f64, f64, f64) {
    let mut b = (1.0f64, 0.0f64, 1.0f64, 0.0f64);
    for pose in poses {
        let rt = pose.rotation.transpose();
        let origin = -(rt * pose.translation);
        for (px, py) in [(0.0, 0.0), (k.width as f64, 0.0), (0.0, k.height as f64), (k.width as f64, k.height as f64)] {
            let dir = rt * Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
            let n = plane.normal();
            let denom = n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = n.dot(&(plane.center - origin)) / denom;
            let local = origin + dir * t - plane.center;
            let s = (0.5 + 0.5 * local.dot(&plane.u) / plane.half_u).clamp(0.0, 1.0);
            let v = (0.5 + 0.5 * local.dot(&plane.v) / plane.half_v).clamp(0.0, 1.0);
            b = (b.0.min(s), b.1.max(s), b.2.min(v), b.3.max(v));
        }
    }
    if b.0 >= b.1 || b.2 >= b.3 {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        b
    }
}

/// Render the capture set, held-out views, ground truth and SfM-like points.
pub fn emit_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let scene = build_scene(spec, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics();
    let (poses, held) = capture_poses(spec, &mut rng)?;

    let mut views = Vec::new();
    let mut truth = Vec::new();
    for (id, flash, pose) in &poses {
        let layers = render_oracle(&scene, &k, pose, *flash)?;
        let paired = if spec.flashless {
            layers.image.clone()
        } else {
            render_oracle(&scene, &k, pose, !*flash)?.image
        };
        views.push(CameraView::new(id.clone(), k, *pose, *flash).with_image(layers.image.clone()));
        truth.push(ViewTruth {
            view_id: id.clone(),
            layers,
            paired,
        });
    }
    let mut heldout = Vec::new();
    for (id, pose) in &held {
        let layers = render_oracle(&scene, &k, pose, false)?;
        let paired = render_oracle(&scene, &k, pose, true)?.image;
        heldout.push(CameraView::new(id.clone(), k, *pose, false).with_image(layers.image.clone()));
        truth.push(ViewTruth {
            view_id: id.clone(),
            layers,
            paired,
        });
    }
    let captures = if spec.flashless {
        CaptureSet::new_unchecked_pools(views)?
    } else {
        CaptureSet::new(views)?
    };

    let all_poses: Vec<_> = poses.iter().map(|p| p.2).collect();
    let t_region = visible_st(&scene.transmitted, &k, &all_poses);
    let r_region = visible_st(&scene.reflected, &k, &all_poses);
    let jitter = |rng: &mut ChaCha8Rng, p: Vector3<f64>| {
        if spec.point_jitter > 0.0 {
            p + Vector3::from_fn(|_, _| rng.random_range(-spec.point_jitter..spec.point_jitter))
        } else {
            p
        }
    };
    let mut f_pos = Vec::new();
    let mut f_col = Vec::new();
    let mut f_lab = Vec::new();
    let mut n_pos = Vec::new();
    let mut n_col = Vec::new();
    let mut n_lab = Vec::new();
    for (plane, region, count, label) in [
        (&scene.transmitted, t_region, spec.points_transmitted, PointLabel::Transmitted),
        (&scene.reflected, r_region, spec.points_reflected, PointLabel::Reflected),
    ] {
        for _ in 0..count {
            let s = rng.random_range(region.0..=region.1);
            let t = rng.random_range(region.2..=region.3);
            let p = plane.point(s, t);
            let c = plane.color_at(s, t);
            let flash_c: Vec<f64> = match label {
                PointLabel::Transmitted => c.iter().map(|v| v * (1.0 + scene.alpha)).collect(),
                PointLabel::Reflected => c.iter().map(|v| v * (1.0 + scene.beta_f)).collect(),
            };
            let pn = jitter(&mut rng, p);
            let pf = jitter(&mut rng, p);
            n_pos.push(pn);
            n_col.push(noisy(&mut rng, &c, spec.color_noise));
            n_lab.push(label);
            f_pos.push(pf);
            f_col.push(noisy(&mut rng, &flash_c, spec.color_noise));
            f_lab.push(label);
        }
    }
    let mut noflash_points = SfMPoints::new(n_pos, n_col, PointSource::NoFlash)?;
    noflash_points.labels = Some(n_lab);
    let flash_points = if spec.flashless {
        None
    } else {
        let mut p = SfMPoints::new(f_pos, f_col, PointSource::Flash)?;
        p.labels = Some(f_lab);
        Some(p)
    };
    Ok(Dataset {
        spec: spec.clone(),
        scene,
        captures,
        heldout,
        truth,
        flash_points,
        noflash_points,
    })
}

/// Random four-cloud scene in front of a camera at the origin looking down +z,
/// with colors kept away from saturation. Used by gradient checks.
pub fn random_gaussian_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize, mode: TransmissionMode) -> SceneModel {
    let mut cloud = |channels: usize, z: f64, lo: f64, hi: f64| {
        let mut c = GaussianCloud::new(channels, degree);
        for _ in 0..n {
            let mut sh = ShCoeffs::zeros(degree, channels);
            for (k, v) in sh.coeffs.iter_mut().enumerate() {
                *v = if k < channels {
                    (rng.random_range(lo..hi) - 0.5) / SH_C0
                } else {
                    rng.random_range(-0.1..0.1)
                };
            }
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            c.gaussians.push(Gaussian3D {
                position: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), z + rng.random_range(-0.3..0.3)),
                rotation: q,
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-2.6..-1.6)),
                opacity_logit: logit(rng.random_range(0.2..0.8)),
                sh,
            });
        }
        c
    };
    let t_flash = cloud(3, 2.0, 0.3, 0.7);
    let t_noflash = cloud(3, 2.0, 0.25, 0.6);
    let reflection = cloud(3, 1.5, 0.25, 0.6);
    let beta = cloud(1, 1.2, 0.3, 0.9);
    SceneModel {
        t_flash: (mode == TransmissionMode::Paired).then_some(t_flash),
        t_noflash,
        reflection,
        beta,
        tone: ToneCurve::default(),
        mode,
    }
}

/// Camera at the origin looking down +z with a 60° horizontal field of view.
pub fn origin_view(id: &str, w: usize, h: usize, flash: bool) -> CameraView {
    CameraView::new(id, Intrinsics::from_fov(w, h, 60f64.to_radians()), RigidTransform::identity(), flash)
}
