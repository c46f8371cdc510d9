//! The four-cloud scene model and flash/no-flash image formation.
//!
//! Clouds render tone-mapped values. A view is formed in the raw domain and
//! mapped back: `composite = γ(γ⁻¹(T) + β · γ⁻¹(R))`, where `T` is the flash or
//! no-flash transmission render depending on the view, and
//! `β = v / (1 + v)` for the blended single-channel beta render `v`.

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::map::ImageMap;
use crate::raster::{render_backward, render_with, ParamGradients, RenderSettings, RenderTarget};
use crate::splat::GaussianCloud;

pub const DEFAULT_GAMMA: f64 = 0.22;

/// Power-law tone curve `γ(x) = x^e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneCurve {
    pub exponent: f64,
}

impl Default for ToneCurve {
    fn default() -> Self {
        Self {
            exponent: DEFAULT_GAMMA,
        }
    }
}

/// Result of tone-mapping a map that had to be clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneMapped {
    pub map: ImageMap,
    pub clamped: usize,
}

impl ToneCurve {
    pub fn new(exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma exponent {exponent} outside (0, 1]")));
        }
        Ok(Self { exponent })
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        x.powf(self.exponent)
    }

    #[inline]
    pub fn inverse(&self, x: f64) -> f64 {
        x.powf(1.0 / self.exponent)
    }

    fn apply_checked(&self, x: &ImageMap, f: impl Fn(f64) -> f64) -> Result<ToneMapped> {
        let mut clamped = 0;
        let mut out = Vec::with_capacity(x.len());
        for &v in x.data() {
            if v < 0.0 || v.is_nan() {
                return Err(Error::Domain(format!("tone curve input {v} is negative")));
            }
            let v = if v > 1.0 {
                clamped += 1;
                1.0
            } else {
                v
            };
            out.push(f(v));
        }
        if clamped > 0 {
            log::warn!("tone curve clamped {clamped} values above 1");
        }
        Ok(ToneMapped {
            map: ImageMap::from_vec(x.width(), x.height(), x.channels(), out)?,
            clamped,
        })
    }

    /// Raw-linear to tone-mapped; inputs above 1 are clamped and counted.
    pub fn map_forward(&self, x: &ImageMap) -> Result<ToneMapped> {
        self.apply_checked(x, |v| self.forward(v))
    }

    /// Tone-mapped to raw-linear; inputs above 1 are clamped and counted.
    pub fn map_inverse(&self, x: &ImageMap) -> Result<ToneMapped> {
        self.apply_checked(x, |v| self.inverse(v))
    }
}

/// `x^0.22` elementwise.
pub fn gamma(x: &ImageMap) -> Result<ImageMap> {
    Ok(ToneCurve::default().map_forward(x)?.map)
}

/// `x^(1/0.22)` elementwise.
pub fn gamma_inv(x: &ImageMap) -> Result<ImageMap> {
    Ok(ToneCurve::default().map_inverse(x)?.map)
}

/// How the flash transmission is represented.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransmissionMode {
    /// Independent flash and no-flash transmission clouds.
    Paired,
    /// No flash cloud; the flash transmission is `c · T_N` in the raw domain.
    HardLinear { c: f64 },
    /// One transmission cloud for every view and no flash cues at all.
    Flashless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CloudId {
    TransmissionFlash,
    TransmissionNoFlash,
    Reflection,
    Beta,
}

impl CloudId {
    pub const ALL: [CloudId; 4] = [
        CloudId::TransmissionFlash,
        CloudId::TransmissionNoFlash,
        CloudId::Reflection,
        CloudId::Beta,
    ];

    /// File stem used in checkpoints.
    pub fn name(self) -> &'static str {
        match self {
            CloudId::TransmissionFlash => "T_F",
            CloudId::TransmissionNoFlash => "T_N",
            CloudId::Reflection => "R",
            CloudId::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub t_flash: Option<GaussianCloud>,
    pub t_noflash: GaussianCloud,
    pub reflection: GaussianCloud,
    pub beta: GaussianCloud,
    pub tone: ToneCurve,
    pub mode: TransmissionMode,
}

impl SceneModel {
    pub fn hard_linear(&self) -> Option<f64> {
        match self.mode {
            TransmissionMode::HardLinear { c } => Some(c),
            _ => None,
        }
    }

    pub fn cloud(&self, id: CloudId) -> Option<&GaussianCloud> {
        match id {
            CloudId::TransmissionFlash => self.t_flash.as_ref(),
            CloudId::TransmissionNoFlash => Some(&self.t_noflash),
            CloudId::Reflection => Some(&self.reflection),
            CloudId::Beta => Some(&self.beta),
        }
    }

    pub fn cloud_mut(&mut self, id: CloudId) -> Option<&mut GaussianCloud> {
        match id {
            CloudId::TransmissionFlash => self.t_flash.as_mut(),
            CloudId::TransmissionNoFlash => Some(&mut self.t_noflash),
            CloudId::Reflection => Some(&mut self.reflection),
            CloudId::Beta => Some(&mut self.beta),
        }
    }

    /// The clouds that exist in this model, in fixed order.
    pub fn cloud_ids(&self) -> Vec<CloudId> {
        CloudId::ALL.into_iter().filter(|id| self.cloud(*id).is_some()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ToneCurve::new(self.tone.exponent)?;
        match (self.mode, &self.t_flash) {
            (TransmissionMode::Paired, None) => {
                return Err(Error::InvalidParameter("paired mode needs a flash transmission cloud".into()))
            }
            (TransmissionMode::HardLinear { .. } | TransmissionMode::Flashless, Some(_)) => {
                return Err(Error::InvalidParameter(
                    "flash transmission cloud present outside paired mode".into(),
                ))
            }
            (TransmissionMode::HardLinear { c }, None) if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::InvalidParameter(format!("hard-linear gain {c} must be positive")))
            }
            _ => {}
        }
        for id in self.cloud_ids() {
            let cloud = self.cloud(id).expect("listed cloud");
            let want = if id == CloudId::Beta { 1 } else { 3 };
            if cloud.channels != want {
                return Err(Error::InvalidParameter(format!(
                    "cloud {} has {} channels, expected {want}",
                    id.name(),
                    cloud.channels
                )));
            }
            if cloud.is_empty() {
                return Err(Error::InvalidParameter(format!("cloud {} is empty", id.name())));
            }
            cloud.validate()?;
        }
        Ok(())
    }

    pub fn total_gaussians(&self) -> usize {
        self.cloud_ids().iter().map(|id| self.cloud(*id).unwrap().len()).sum()
    }
}

/// Smooth clamp of the blended beta render into `[0, 1)`.
#[inline]
pub fn beta_activation(v: f64) -> f64 {
    let v = v.max(0.0);
    v / (1.0 + v)
}

/// One composite pixel channel: `γ(γ⁻¹(t) + b · γ⁻¹(r))`, before the final clamp.
#[inline]
pub fn composite_value(tone: &ToneCurve, t: f64, r: f64, b: f64) -> f64 {
    tone.forward(tone.inverse(t) + b * tone.inverse(r))
}

/// Partial derivatives of [`composite_value`] w.r.t. `(t, r, b)`.
#[inline]
pub fn composite_partials(tone: &ToneCurve, t: f64, r: f64, b: f64) -> (f64, f64, f64) {
    let e = tone.exponent;
    let g = 1.0 / e;
    let raw_t = tone.inverse(t);
    let raw_r = tone.inverse(r);
    let raw = raw_t + b * raw_r;
    if raw <= 0.0 {
        // Empty pixel: t = 0 and b·r = 0; use the one-sided limits.
        return (1.0, b.powf(e), 0.0);
    }
    let dgamma = e * raw.powf(e - 1.0);
    let dt = dgamma * g * t.powf(g - 1.0);
    let dr = dgamma * b * g * r.powf(g - 1.0);
    let db = dgamma * raw_r;
    (dt, dr, db)
}

/// All cloud renders needed at one view.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub flash: bool,
    pub mode: TransmissionMode,
    pub tone: ToneCurve,
    pub t_flash: Option<RenderTarget>,
    pub t_noflash: RenderTarget,
    pub reflection: RenderTarget,
    pub beta: RenderTarget,
}

/// Per-map upstream gradients for [`SceneRender::backward`].
#[derive(Debug, Clone, Default)]
pub struct MapGradients {
    /// Gradient w.r.t. the (possibly derived) flash transmission image.
    pub t_flash: Option<ImageMap>,
    pub t_noflash: Option<ImageMap>,
    pub reflection: Option<ImageMap>,
    pub reflection_depth: Option<ImageMap>,
    /// Gradient w.r.t. the activated beta map.
    pub beta: Option<ImageMap>,
}

/// Gradients for every cloud present in a [`SceneModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub t_flash: Option<ParamGradients>,
    pub t_noflash: ParamGradients,
    pub reflection: ParamGradients,
    pub beta: ParamGradients,
}

impl SceneGradients {
    pub fn zeros(scene: &SceneModel) -> Self {
        Self {
            t_flash: scene.t_flash.as_ref().map(ParamGradients::for_cloud),
            t_noflash: ParamGradients::for_cloud(&scene.t_noflash),
            reflection: ParamGradients::for_cloud(&scene.reflection),
            beta: ParamGradients::for_cloud(&scene.beta),
        }
    }

    pub fn get(&self, id: CloudId) -> Option<&ParamGradients> {
        match id {
            CloudId::TransmissionFlash => self.t_flash.as_ref(),
            CloudId::TransmissionNoFlash => Some(&self.t_noflash),
            CloudId::Reflection => Some(&self.reflection),
            CloudId::Beta => Some(&self.beta),
        }
    }

    /// Flattened gradients in [`CloudId::ALL`] order, matching
    /// [`flatten_scene`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for id in CloudId::ALL {
            if let Some(g) = self.get(id) {
                out.extend(g.flatten());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// All scene parameters in [`CloudId::ALL`] order.
pub fn flatten_scene(scene: &SceneModel) -> Vec<f64> {
    let mut out = Vec::new();
    for id in scene.cloud_ids() {
        out.extend(scene.cloud(id).unwrap().flatten());
    }
    out
}

pub fn unflatten_scene(scene: &mut SceneModel, flat: &[f64]) -> Result<()> {
    let mut offset = 0;
    for id in scene.cloud_ids() {
        let cloud = scene.cloud_mut(id).unwrap();
        let n = cloud.len() * cloud.params_per_gaussian();
        if offset + n > flat.len() {
            return Err(Error::ShapeMismatch("scene parameter vector too short".into()));
        }
        cloud.unflatten(&flat[offset..offset + n])?;
        offset += n;
    }
    if offset != flat.len() {
        return Err(Error::ShapeMismatch("scene parameter vector too long".into()));
    }
    Ok(())
}

impl SceneRender {
    /// Render every cloud the view's composite needs; with `pair` also both
    /// transmissions for the pseudo-pair.
    pub fn new(scene: &SceneModel, view: &CameraView, pair: bool, settings: &RenderSettings) -> Result<Self> {
        let t_flash = match (&scene.t_flash, scene.mode) {
            (Some(cloud), TransmissionMode::Paired) if view.flash || pair => Some(render_with(cloud, view, settings)?),
            _ => None,
        };
        Ok(Self {
            flash: view.flash,
            mode: scene.mode,
            tone: scene.tone,
            t_flash,
            t_noflash: render_with(&scene.t_noflash, view, settings)?,
            reflection: render_with(&scene.reflection, view, settings)?,
            beta: render_with(&scene.beta, view, settings)?,
        })
    }

    /// Flash transmission image, derived from `T_N` in hard-linear mode.
    pub fn flash_transmission(&self) -> Option<ImageMap> {
        match self.mode {
            TransmissionMode::Paired => self.t_flash.as_ref().map(|r| r.color.clone()),
            TransmissionMode::HardLinear { c } => {
                let tone = self.tone;
                Some(self.t_noflash.color.map(|t| tone.forward(c * tone.inverse(t))))
            }
            TransmissionMode::Flashless => None,
        }
    }

    /// The transmission image this view's composite uses.
    pub fn transmission(&self) -> ImageMap {
        if self.flash {
            self.flash_transmission().unwrap_or_else(|| self.t_noflash.color.clone())
        } else {
            self.t_noflash.color.clone()
        }
    }

    pub fn transmission_depth(&self) -> &ImageMap {
        match (&self.t_flash, self.flash) {
            (Some(r), true) => &r.depth,
            _ => &self.t_noflash.depth,
        }
    }

    pub fn beta_map(&self) -> ImageMap {
        self.beta.color.map(beta_activation)
    }

    /// Tone-mapped composite, clamped to `[0, 1]`.
    pub fn composite(&self) -> ImageMap {
        let t = self.transmission();
        let beta = self.beta_map();
        let r = &self.reflection.color;
        let (w, h) = (t.width(), t.height());
        ImageMap::from_fn(w, h, 3, |x, y, c| {
            composite_value(&self.tone, t.get(x, y, c), r.get(x, y, c), beta.get(x, y, 0)).clamp(0.0, 1.0)
        })
    }

    /// Gradients of a loss w.r.t. `(T, R, βmap)` given its gradient w.r.t. the
    /// composite. The final clamp passes gradients straight through.
    pub fn composite_map_gradients(&self, dl_dcomp: &ImageMap) -> Result<MapGradients> {
        let t = self.transmission();
        dl_dcomp.check_shape(&t, "composite gradient")?;
        let beta = self.beta_map();
        let r = &self.reflection.color;
        let (w, h) = (t.width(), t.height());
        let mut dt = ImageMap::zeros(w, h, 3);
        let mut dr = ImageMap::zeros(w, h, 3);
        let mut db = ImageMap::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let b = beta.get(x, y, 0);
                let mut acc_b = 0.0;
                for c in 0..3 {
                    let g = dl_dcomp.get(x, y, c);
                    if g == 0.0 {
                        continue;
                    }
                    let (pt, pr, pb) = composite_partials(&self.tone, t.get(x, y, c), r.get(x, y, c), b);
                    dt.set(x, y, c, g * pt);
                    dr.set(x, y, c, g * pr);
                    acc_b += g * pb;
                }
                db.set(x, y, 0, acc_b);
            }
        }
        let mut out = MapGradients {
            reflection: Some(dr),
            beta: Some(db),
            ..Default::default()
        };
        if self.flash && self.mode != TransmissionMode::Flashless {
            out.t_flash = Some(dt);
        } else {
            out.t_noflash = Some(dt);
        }
        Ok(out)
    }

    /// Chain map gradients into per-cloud parameter gradients.
    pub fn backward(&self, scene: &SceneModel, grads: &MapGradients) -> Result<SceneGradients> {
        let mut out = SceneGradients::zeros(scene);
        let mut dt_noflash = grads.t_noflash.clone();
        if let Some(dtf) = &grads.t_flash {
            match self.mode {
                TransmissionMode::Paired => {
                    let ctx = &self
                        .t_flash
                        .as_ref()
                        .ok_or_else(|| Error::InvalidParameter("flash transmission was not rendered".into()))?
                        .ctx;
                    out.t_flash = Some(render_backward(ctx, dtf, None)?);
                }
                TransmissionMode::HardLinear { c } => {
                    // γ(c · γ⁻¹(t)) = c^e · t for t ≥ 0.
                    let k = c.powf(self.tone.exponent);
                    let folded = dtf.map(|g| g * k);
                    dt_noflash = Some(match dt_noflash {
                        Some(d) => d.zip_map(&folded, |a, b| a + b)?,
                        None => folded,
                    });
                }
                TransmissionMode::Flashless => {
                    return Err(Error::InvalidParameter("flash transmission gradient in flashless mode".into()))
                }
            }
        }
        if let Some(d) = &dt_noflash {
            out.t_noflash = render_backward(&self.t_noflash.ctx, d, None)?;
        }
        if grads.reflection.is_some() || grads.reflection_depth.is_some() {
            let zero;
            let dcol = match &grads.reflection {
                Some(d) => d,
                None => {
                    zero = ImageMap::zeros(self.reflection.color.width(), self.reflection.color.height(), 3);
                    &zero
                }
            };
            out.reflection = render_backward(&self.reflection.ctx, dcol, grads.reflection_depth.as_ref())?;
        }
        if let Some(db) = &grads.beta {
            let v = &self.beta.color;
            let dv = v.zip_map(db, |v, g| if v > 0.0 { g / ((1.0 + v) * (1.0 + v)) } else { 0.0 })?;
            out.beta = render_backward(&self.beta.ctx, &dv, None)?;
        }
        Ok(out)
    }
}

/// Tone-mapped composite and its component maps at one view.
#[derive(Debug, Clone)]
pub struct CompositeRender {
    pub composite: ImageMap,
    pub transmission: ImageMap,
    pub beta: ImageMap,
    pub reflection: ImageMap,
    pub depth_t: ImageMap,
    pub depth_r: ImageMap,
    pub renders: SceneRender,
}

pub fn render_composite(scene: &SceneModel, view: &CameraView) -> Result<CompositeRender> {
    let renders = SceneRender::new(scene, view, false, &RenderSettings::default())?;
    Ok(CompositeRender {
        composite: renders.composite(),
        transmission: renders.transmission(),
        beta: renders.beta_map(),
        reflection: renders.reflection.color.clone(),
        depth_t: renders.transmission_depth().clone(),
        depth_r: renders.reflection.depth.clone(),
        renders,
    })
}

/// `(T_F image, T_N image)` rendered at the same view. `None` in flashless mode.
pub fn render_pseudo_pair(scene: &SceneModel, view: &CameraView) -> Result<Option<(ImageMap, ImageMap)>> {
    if scene.mode == TransmissionMode::Flashless {
        return Ok(None);
    }
    let r = SceneRender::new(scene, view, true, &RenderSettings::default())?;
    Ok(Some((
        r.flash_transmission().expect("non-flashless mode"),
        r.t_noflash.color.clone(),
    )))
}
