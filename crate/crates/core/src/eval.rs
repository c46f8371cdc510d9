//! Image metrics and evaluation of a fitted scene against synthetic ground truth.

use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::composite::{beta_activation, SceneModel, SceneRender, ToneCurve};
use crate::error::{Error, Result};
use crate::losses::{ssim, SsimParams};
use crate::map::ImageMap;
use crate::raster::RenderSettings;
use crate::synth::ViewTruth;

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageMap, b: &ImageMap, peak: f64) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::ShapeMismatch("psnr of empty maps".into()));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if !mse.is_finite() {
        return Err(Error::Numeric("non-finite MSE".into()));
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).clamp(0.0, PSNR_CAP))
}

/// Metrics of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEval {
    pub view_id: String,
    pub heldout: bool,
    pub transmission_psnr: f64,
    pub transmission_ssim: f64,
    pub reflection_psnr: f64,
    pub reflection_ssim: f64,
    /// Recovered flash difference vs the paired capture difference; absent without a flash transmission.
    pub paired_psnr: Option<f64>,
}

/// Means over a group of views.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMeans {
    pub count: usize,
    pub transmission_psnr: f64,
    pub transmission_ssim: f64,
    pub reflection_psnr: f64,
    pub reflection_ssim: f64,
    pub paired_psnr: Option<f64>,
}

impl EvalMeans {
    pub fn of<'a>(views: impl IntoIterator<Item = &'a ViewEval>) -> Self {
        let v: Vec<&ViewEval> = views.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = |f: &dyn Fn(&ViewEval) -> f64| v.iter().map(|e| f(e)).sum::<f64>() / n;
        let paired: Option<Vec<f64>> = v.iter().map(|e| e.paired_psnr).collect();
        Self {
            count: v.len(),
            transmission_psnr: mean(&|e| e.transmission_psnr),
            transmission_ssim: mean(&|e| e.transmission_ssim),
            reflection_psnr: mean(&|e| e.reflection_psnr),
            reflection_ssim: mean(&|e| e.reflection_ssim),
            paired_psnr: paired.map(|p| p.iter().sum::<f64>() / n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewEval>,
    pub heldin: EvalMeans,
    pub heldout: EvalMeans,
    pub all: EvalMeans,
}

impl EvalReport {
    pub fn from_views(views: Vec<ViewEval>) -> Self {
        Self {
            heldin: EvalMeans::of(views.iter().filter(|v| !v.heldout)),
            heldout: EvalMeans::of(views.iter().filter(|v| v.heldout)),
            all: EvalMeans::of(&views),
            views,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.views.iter().all(|v| {
            [v.transmission_psnr, v.transmission_ssim, v.reflection_psnr, v.reflection_ssim]
                .iter()
                .chain(v.paired_psnr.iter())
                .all(|x| x.is_finite())
        })
    }
}

fn tone_map(tone: &ToneCurve, raw: &ImageMap) -> ImageMap {
    raw.map(|v| tone.forward(v.clamp(0.0, 1.0)))
}

fn ssim_index(a: &ImageMap, b: &ImageMap) -> Result<f64> {
    Ok(ssim(a, b, &SsimParams::default())?.clamp(-1.0, 1.0))
}

/// Score one view. The view's flash flag is ignored; the no-flash transmission is always evaluated.
pub fn evaluate_view(scene: &SceneModel, view: &CameraView, truth: &ViewTruth, heldout: bool) -> Result<ViewEval> {
    let tone = scene.tone;
    let mut v = view.clone();
    v.flash = false;
    let r = SceneRender::new(scene, &v, true, &RenderSettings::default())?;
    let gt = &truth.layers;

    let t_hat = r.t_noflash.color.clone();
    let t_gt = tone_map(&tone, &gt.t_noflash);

    let beta_hat = r.beta.color.map(beta_activation);
    let r_hat = &r.reflection.color;
    let (w, h) = (t_hat.width(), t_hat.height());
    let br_hat = ImageMap::from_fn(w, h, 3, |x, y, c| {
        tone.forward((beta_hat.get(x, y, 0) * tone.inverse(r_hat.get(x, y, c))).clamp(0.0, 1.0))
    });
    let br_gt = tone_map(&tone, &gt.beta_r);

    let paired_psnr = match r.flash_transmission() {
        Some(tf) if scene.mode != crate::composite::TransmissionMode::Flashless => {
            let d_hat = tf.zip_map(&t_hat, |f, n| tone.forward((tone.inverse(f) - tone.inverse(n)).max(0.0).min(1.0)))?;
            let (i_f, i_n) = if view.flash {
                (&gt.image, &truth.paired)
            } else {
                (&truth.paired, &gt.image)
            };
            let d_gt = i_f.zip_map(i_n, |f, n| tone.forward((f - n).max(0.0).min(1.0)))?;
            Some(psnr(&d_hat, &d_gt, 1.0)?)
        }
        _ => None,
    };

    Ok(ViewEval {
        view_id: view.view_id.clone(),
        heldout,
        transmission_psnr: psnr(&t_hat, &t_gt, 1.0)?,
        transmission_ssim: ssim_index(&t_hat, &t_gt)?,
        reflection_psnr: psnr(&br_hat, &br_gt, 1.0)?,
        reflection_ssim: ssim_index(&br_hat, &br_gt)?,
        paired_psnr,
    })
}

/// Score every view; `views` pairs each camera with its ground truth and held-out flag.
pub fn evaluate(scene: &SceneModel, views: &[(&CameraView, &ViewTruth, bool)]) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(views.len());
    for (v, t, held) in views {
        if v.view_id != t.view_id {
            return Err(Error::InvalidParameter(format!("view {} paired with truth {}", v.view_id, t.view_id)));
        }
        out.push(evaluate_view(scene, v, t, *held)?);
    }
    Ok(EvalReport::from_views(out))
}
