//! Training objectives: L1 and DSSIM data terms in the tone-mapped domain,
//! the Pearson linearity term on the transmission pseudo-pair, and edge-aware
//! depth smoothness on the reflection layer.

use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::composite::{MapGradients, SceneGradients, SceneModel, SceneRender, TransmissionMode};
use crate::error::{Error, Result};
use crate::map::ImageMap;
use crate::raster::RenderSettings;

/// Variance below which the Pearson term is defined as 0.
pub const PEARSON_EPS: f64 = 1e-8;
/// Guide-gradient scale of the depth smoothness weight.
pub const DEPTH_GUIDE_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
    pub linearity: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            dssim: 0.2,
            linearity: 0.05,
            depth: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("dssim", self.dssim),
            ("linearity", self.linearity),
            ("depth", self.depth),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, l1: f64, dssim: f64, linearity: f64, depth: f64) -> LossReport {
        LossReport {
            l1,
            dssim,
            linearity,
            depth,
            total: self.l1 * l1 + self.dssim * dssim + self.linearity * linearity + self.depth * depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub dssim: f64,
    pub linearity: f64,
    pub depth: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.dssim, self.linearity, self.depth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 || !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::Config(format!("invalid SSIM parameters {self:?}")));
        }
        Ok(())
    }

    /// Window actually used on a `w × h` image: the largest odd size not
    /// exceeding the image, with sigma shrunk proportionally.
    pub fn fitted(&self, w: usize, h: usize) -> (usize, f64) {
        let m = w.min(h).max(1);
        if self.window <= m {
            return (self.window, self.sigma);
        }
        let win = if m % 2 == 1 { m } else { m - 1 };
        (win, self.sigma * win as f64 / self.window as f64)
    }
}

pub fn l1_loss(a: &ImageMap, b: &ImageMap) -> Result<f64> {
    a.check_shape(b, "l1 operands")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// L1 loss and its (sub)gradient w.r.t. `a`.
pub fn l1_with_grad(a: &ImageMap, b: &ImageMap) -> Result<(f64, ImageMap)> {
    let loss = l1_loss(a, b)?;
    let n = a.len().max(1) as f64;
    let grad = a.zip_map(b, |x, y| {
        if x > y {
            1.0 / n
        } else if x < y {
            -1.0 / n
        } else {
            0.0
        }
    })?;
    Ok((loss, grad))
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let r = (win / 2) as f64;
    let k: Vec<f64> = (0..win)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Zero-padded, same-size separable filtering of a `w × h` plane.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let yy = y as isize + i as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src_row = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += kv * src_row[x];
            }
        }
    }
    out
}

fn plane(m: &ImageMap, c: usize) -> Vec<f64> {
    m.data().iter().skip(c).step_by(m.channels()).copied().collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient w.r.t. `a`.
fn ssim_impl(a: &ImageMap, b: &ImageMap, params: &SsimParams, want_grad: bool) -> Result<(f64, Option<ImageMap>)> {
    a.check_shape(b, "ssim operands")?;
    params.validate()?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if a.is_empty() {
        return Ok((1.0, want_grad.then(|| a.clone())));
    }
    let (win, sigma) = params.fitted(w, h);
    let k = gaussian_kernel(win, sigma);
    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;
    let count = (w * h * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageMap::zeros(w, h, ch));
    for c in 0..ch {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = blur(&pa, w, h, &k);
        let mu_b = blur(&pb, w, h, &k);
        let e_aa = blur(&aa, w, h, &k);
        let e_bb = blur(&bb, w, h, &k);
        let e_ab = blur(&ab, w, h, &k);
        let n = w * h;
        let mut d_mu = vec![0.0; n];
        let mut d_saa = vec![0.0; n];
        let mut d_sab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let saa = e_aa[i] - ma * ma;
            let sbb = e_bb[i] - mb * mb;
            let sab = e_ab[i] - ma * mb;
            let num1 = 2.0 * ma * mb + c1;
            let num2 = 2.0 * sab + c2;
            let den1 = ma * ma + mb * mb + c1;
            let den2 = saa + sbb + c2;
            let s = num1 * num2 / (den1 * den2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * mb * num2 / (den1 * den2) - s * 2.0 * ma / den1;
                let ds_dsaa = -s / den2;
                let ds_dsab = 2.0 * num1 / (den1 * den2);
                d_mu[i] = ds_dmu - 2.0 * ma * ds_dsaa - mb * ds_dsab;
                d_saa[i] = ds_dsaa;
                d_sab[i] = ds_dsab;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The zero-padded symmetric filter is its own adjoint.
            let t_mu = blur(&d_mu, w, h, &k);
            let t_saa = blur(&d_saa, w, h, &k);
            let t_sab = blur(&d_sab, w, h, &k);
            for i in 0..n {
                let v = (t_mu[i] + 2.0 * pa[i] * t_saa[i] + pb[i] * t_sab[i]) / count;
                g.data_mut()[i * ch + c] = v;
            }
        }
    }
    Ok((total / count, grad))
}

pub fn ssim(a: &ImageMap, b: &ImageMap, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(a, b, params, false)?.0)
}

/// `(1 − SSIM) / 2` with the default window.
pub fn dssim_loss(a: &ImageMap, b: &ImageMap) -> Result<f64> {
    Ok(0.5 * (1.0 - ssim(a, b, &SsimParams::default())?))
}

/// DSSIM and its gradient w.r.t. `a`.
pub fn dssim_with_grad(a: &ImageMap, b: &ImageMap, params: &SsimParams) -> Result<(f64, ImageMap)> {
    let (s, g) = ssim_impl(a, b, params, true)?;
    Ok((0.5 * (1.0 - s), g.expect("gradient requested").map(|v| -0.5 * v)))
}

/// Negative Pearson correlation of all samples of `t_n` and `t_f`.
pub fn pearson_linearity_loss(t_n: &ImageMap, t_f: &ImageMap) -> Result<f64> {
    Ok(pearson_with_grad(t_n, t_f)?.0)
}

/// Pearson loss with gradients w.r.t. `t_n` and `t_f`.
pub fn pearson_with_grad(t_n: &ImageMap, t_f: &ImageMap) -> Result<(f64, ImageMap, ImageMap)> {
    t_n.check_shape(t_f, "pearson operands")?;
    let n = t_n.len();
    let zeros = || ImageMap::zeros(t_n.width(), t_n.height(), t_n.channels());
    if n < 2 {
        return Ok((0.0, zeros(), zeros()));
    }
    let nf = n as f64;
    let mx = t_n.data().iter().sum::<f64>() / nf;
    let my = t_f.data().iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in t_n.data().iter().zip(t_f.data()) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx / nf < PEARSON_EPS || syy / nf < PEARSON_EPS {
        return Ok((0.0, zeros(), zeros()));
    }
    let norm = (sxx * syy).sqrt();
    let r = sxy / norm;
    let gx = t_n.zip_map(t_f, |x, y| -((y - my) / norm - r * (x - mx) / sxx))?;
    let gy = t_n.zip_map(t_f, |x, y| -((x - mx) / norm - r * (y - my) / syy))?;
    Ok((-r, gx, gy))
}

/// Edge-aware total variation of a single-channel depth map.
pub fn depth_smoothness_loss(depth: &ImageMap, guide: &ImageMap) -> Result<f64> {
    Ok(depth_smoothness_with_grad(depth, guide)?.0)
}

/// Depth smoothness and its gradient w.r.t. `depth`. `guide` must share the
/// spatial size; it is averaged over channels.
pub fn depth_smoothness_with_grad(depth: &ImageMap, guide: &ImageMap) -> Result<(f64, ImageMap)> {
    if depth.channels() != 1 || depth.width() != guide.width() || depth.height() != guide.height() {
        return Err(Error::ShapeMismatch(format!(
            "depth {}x{}x{} vs guide {}x{}",
            depth.width(),
            depth.height(),
            depth.channels(),
            guide.width(),
            guide.height()
        )));
    }
    let g = guide.mean_channels();
    let (w, h) = (depth.width(), depth.height());
    let mut grad = ImageMap::zeros(w, h, 1);
    if w * h == 0 {
        return Ok((0.0, grad));
    }
    let norm = (w * h) as f64;
    let mut total = 0.0;
    let mut edge = |x0: usize, y0: usize, x1: usize, y1: usize, grad: &mut ImageMap| {
        let dd = depth.get(x1, y1, 0) - depth.get(x0, y0, 0);
        let wgt = (-(g.get(x1, y1, 0) - g.get(x0, y0, 0)).abs() / DEPTH_GUIDE_TAU).exp();
        total += wgt * dd.abs();
        let s = wgt * dd.signum() / norm;
        if dd != 0.0 {
            grad.set(x1, y1, 0, grad.get(x1, y1, 0) + s);
            grad.set(x0, y0, 0, grad.get(x0, y0, 0) - s);
        }
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                edge(x, y, x + 1, y, &mut grad);
            }
            if y + 1 < h {
                edge(x, y, x, y + 1, &mut grad);
            }
        }
    }
    Ok((total / norm, grad))
}

fn add_into(slot: &mut Option<ImageMap>, g: ImageMap) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
        None => g,
    });
    Ok(())
}

/// Tone-mapped training target of a view: `γ(clamp(I_raw, 0, 1))`.
pub fn view_target(scene: &SceneModel, view: &CameraView) -> Result<ImageMap> {
    let img = view
        .image
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("view {} carries no image", view.view_id)))?;
    let tone = scene.tone;
    Ok(img.map(|v| tone.forward(v.clamp(0.0, 1.0))))
}

/// Weighted objective at one view, with gradients for every cloud.
pub fn total_loss(scene: &SceneModel, view: &CameraView, weights: &LossWeights) -> Result<(LossReport, SceneGradients)> {
    total_loss_with(scene, view, weights, &SsimParams::default(), &RenderSettings::default())
}

pub fn total_loss_with(
    scene: &SceneModel,
    view: &CameraView,
    weights: &LossWeights,
    ssim_params: &SsimParams,
    settings: &RenderSettings,
) -> Result<(LossReport, SceneGradients)> {
    weights.validate()?;
    let target = view_target(scene, view)?;
    let use_linearity = weights.linearity != 0.0 && scene.mode != TransmissionMode::Flashless;
    let renders = SceneRender::new(scene, view, use_linearity, settings)?;
    let comp = renders.composite();
    comp.check_shape(&target, "render vs capture")?;

    let mut dcomp = ImageMap::zeros(comp.width(), comp.height(), comp.channels());
    let (l1, g1) = l1_with_grad(&comp, &target)?;
    if weights.l1 != 0.0 {
        dcomp = dcomp.zip_map(&g1, |a, b| a + weights.l1 * b)?;
    }
    let dssim = if weights.dssim != 0.0 {
        let (d, g) = dssim_with_grad(&comp, &target, ssim_params)?;
        dcomp = dcomp.zip_map(&g, |a, b| a + weights.dssim * b)?;
        d
    } else {
        0.5 * (1.0 - ssim(&comp, &target, ssim_params)?)
    };
    let mut maps: MapGradients = renders.composite_map_gradients(&dcomp)?;

    let mut linearity = 0.0;
    if use_linearity {
        let tf = renders.flash_transmission().expect("pair rendered");
        let (p, gn, gf) = pearson_with_grad(&renders.t_noflash.color, &tf)?;
        linearity = p;
        add_into(&mut maps.t_noflash, gn.map(|v| weights.linearity * v))?;
        add_into(&mut maps.t_flash, gf.map(|v| weights.linearity * v))?;
    }

    let mut depth = 0.0;
    if weights.depth != 0.0 {
        let (d, g) = depth_smoothness_with_grad(&renders.reflection.depth, &target)?;
        depth = d;
        maps.reflection_depth = Some(g.map(|v| weights.depth * v));
    }

    let report = weights.combine(l1, dssim, linearity, depth);
    let grads = renders.backward(scene, &maps)?;
    Ok((report, grads))
}
