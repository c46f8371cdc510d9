//! Differentiable front-to-back splatting of one [`GaussianCloud`].
//!
//! Forward: every Gaussian is projected with a first-order (EWA) covariance,
//! sorted globally by camera-space depth (ties by index), and blended per pixel
//! as `c = Σ cᵢ αᵢ Πⱼ<ᵢ (1 − αⱼ)`. The kernel is truncated at the 3σ ellipse
//! and renormalized so it reaches zero continuously there:
//!
//! ```text
//! k(m) = (exp(−m/2) − exp(−9/2)) / (1 − exp(−9/2)),   m = dᵀ Σ'⁻¹ d < 9
//! αᵢ   = min(0.999, σ(oᵢ) · k(m))
//! ```
//!
//! Blending stops once transmittance would fall below [`MIN_TRANSMITTANCE`].
//! Depth is the alpha-weighted mean camera-space depth of the blended means.
//!
//! Backward walks each pixel's contributors back to front, reconstructing the
//! transmittance by division, and then chains per-Gaussian screen-space
//! gradients to position, rotation, log-scale, opacity logit and SH.
//!
//! Work is binned into square tiles; the unbinned path visits the same
//! Gaussians in the same order and produces bit-identical output.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{project_covariance, projection_jacobian, CameraView, Intrinsics, RigidTransform, Z_NEAR};
use crate::error::{Error, Result};
use crate::map::ImageMap;
use crate::splat::{sh_basis, sigmoid, GaussianCloud, ShCoeffs, COLOR_OFFSET, SH_C1};

pub const MAX_ALPHA: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the kernel support (3σ).
pub const CUTOFF_M: f64 = 9.0;
const MAX_CHANNELS: usize = 3;
/// Below this accumulated alpha the depth map is reported as 0.
pub const DEPTH_ALPHA_EPS: f64 = 1e-8;

/// `exp(-CUTOFF_M / 2)`.
const KERNEL_FLOOR: f64 = 0.011108996538242306;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSettings {
    /// Tile edge in pixels; `None` visits every Gaussian at every pixel.
    pub tile_size: Option<usize>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { tile_size: Some(16) }
    }
}

/// Projected, activated state of one visible Gaussian.
#[derive(Debug, Clone)]
struct Projected {
    index: usize,
    p_cam: Vector3<f64>,
    mean2d: Vector2<f64>,
    /// Inverse projected covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; MAX_CHANNELS],
    color_active: [bool; MAX_CHANNELS],
    dir: Vector3<f64>,
    dir_len: f64,
    rot: Matrix3<f64>,
    qhat: [f64; 4],
    qnorm: f64,
    scale: Vector3<f64>,
    cov3d: Matrix3<f64>,
    j: Matrix2x3<f64>,
    bbox: [usize; 4],
}

/// Compact per-Gaussian state read in the per-pixel loops.
#[derive(Debug, Clone, Copy)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; MAX_CHANNELS],
    z: f64,
    bbox: [u32; 4],
}

impl Splat {
    fn of(p: &Projected) -> Self {
        Self {
            mean: [p.mean2d.x, p.mean2d.y],
            conic: p.conic,
            opacity: p.opacity,
            color: p.color,
            z: p.p_cam.z,
            bbox: p.bbox.map(|v| v as u32),
        }
    }

    #[inline]
    fn covers(&self, x: u32, y: u32) -> bool {
        let [x0, x1, y0, y1] = self.bbox;
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    #[inline]
    fn mahalanobis(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, dx, dy)
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct BackwardCtx {
    width: usize,
    height: usize,
    channels: usize,
    sh_degree: usize,
    cloud_len: usize,
    intrinsics: Intrinsics,
    pose: RigidTransform,
    projected: Vec<Projected>,
    splats: Vec<Splat>,
    /// Flat SH coefficients of the projected Gaussians, in `projected` order.
    sh: Vec<f64>,
    tile_size: usize,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
    depth: Vec<f64>,
}

impl BackwardCtx {
    pub fn visible_count(&self) -> usize {
        self.projected.len()
    }
}

#[derive(Debug, Clone)]
pub struct RenderTarget {
    pub color: ImageMap,
    pub depth: ImageMap,
    pub alpha: ImageMap,
    pub ctx: BackwardCtx,
}

/// Per-Gaussian gradients, congruent with the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub sh_len: usize,
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
    /// Norm of the screen-space mean gradient in NDC-like units.
    pub viewspace: Vec<f64>,
    pub visible: Vec<bool>,
}

impl ParamGradients {
    pub fn zeros(n: usize, sh_len: usize) -> Self {
        Self {
            sh_len,
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            sh: vec![0.0; n * sh_len],
            viewspace: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn for_cloud(cloud: &GaussianCloud) -> Self {
        Self::zeros(cloud.len(), cloud.sh_len())
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Accumulate another gradient of the same shape. Screen-space statistics
    /// add as well; visibility is or-ed.
    pub fn accumulate(&mut self, other: &ParamGradients) -> Result<()> {
        if other.len() != self.len() || other.sh_len != self.sh_len {
            return Err(Error::InvalidGradientShape(format!(
                "{}x{} vs {}x{}",
                self.len(),
                self.sh_len,
                other.len(),
                other.sh_len
            )));
        }
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.log_scale[i] += other.log_scale[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
            self.opacity[i] += other.opacity[i];
            self.viewspace[i] += other.viewspace[i];
            self.visible[i] |= other.visible[i];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
        Ok(())
    }

    /// Flat layout matching [`GaussianCloud::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (11 + self.sh_len));
        for i in 0..self.len() {
            out.extend(self.position[i].iter());
            out.extend(self.rotation[i].iter());
            out.extend(self.log_scale[i].iter());
            out.push(self.opacity[i]);
            out.extend(&self.sh[i * self.sh_len..(i + 1) * self.sh_len]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn quat_to_rot(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `quat_to_rot` contracted with `dr`, w.r.t. the unit quaternion.
fn rot_grad_to_quat(q: &[f64; 4], dr: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| dr[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
        + x * g(2, 0)
        + y * g(2, 1));
    [dw, dx, dy, dz]
}

fn project_cloud(cloud: &GaussianCloud, view: &CameraView) -> Result<(Vec<Projected>, Vec<f64>)> {
    let k = &view.intrinsics;
    let pose = &view.world_to_cam;
    let cam_center = pose.center();
    let (w, h) = (k.width as f64, k.height as f64);
    let sh_len = cloud.sh_len();
    let mut out = Vec::with_capacity(cloud.len());
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let p_cam = pose.apply(&g.position);
        if p_cam.z <= Z_NEAR {
            continue;
        }
        let qnorm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qnorm > 0.0) || !qnorm.is_finite() {
            return Err(Error::InvalidParameter(format!("gaussian {index} has a degenerate quaternion")));
        }
        let qhat = g.rotation.map(|v| v / qnorm);
        let rot = quat_to_rot(&qhat);
        let scale = g.log_scale.map(f64::exp);
        let rs = rot * Matrix3::from_diagonal(&scale);
        let cov3d = rs * rs.transpose();
        let j = projection_jacobian(k, &p_cam);
        let cov2d = project_covariance(&cov3d, &pose.rotation, &j);
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if !(det > 0.0) || !det.is_finite() {
            continue;
        }
        let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
        let mean2d = Vector2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy);
        let rx = 3.0 * cov2d[(0, 0)].sqrt();
        let ry = 3.0 * cov2d[(1, 1)].sqrt();
        // Pixel x covers [x, x+1) with its sample at x + 0.5.
        let x0 = (mean2d.x - rx - 0.5).ceil().max(0.0);
        let x1 = (mean2d.x + rx - 0.5).floor().min(w - 1.0);
        let y0 = (mean2d.y - ry - 0.5).ceil().max(0.0);
        let y1 = (mean2d.y + ry - 0.5).floor().min(h - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let v = g.position - cam_center;
        let dir_len = v.norm();
        let dir = if dir_len > 0.0 { v / dir_len } else { Vector3::z() };
        let basis = sh_basis(cloud.sh_degree, &dir);
        let nb = ShCoeffs::basis_count(cloud.sh_degree);
        let mut color = [0.0; MAX_CHANNELS];
        let mut color_active = [false; MAX_CHANNELS];
        for c in 0..cloud.channels {
            let mut s = COLOR_OFFSET;
            for (b, basis_k) in basis.iter().enumerate().take(nb) {
                s += basis_k * g.sh.coeffs[b * cloud.channels + c];
            }
            color_active[c] = s > 0.0;
            color[c] = s.max(0.0);
        }
        out.push(Projected {
            index,
            p_cam,
            mean2d,
            conic,
            opacity: sigmoid(g.opacity_logit),
            color,
            color_active,
            dir,
            dir_len,
            rot,
            qhat,
            qnorm,
            scale,
            cov3d,
            j,
            bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        });
    }
    out.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z).then(a.index.cmp(&b.index)));
    let mut sh = Vec::with_capacity(out.len() * sh_len);
    for p in &out {
        sh.extend(&cloud.gaussians[p.index].sh.coeffs);
    }
    Ok((out, sh))
}

/// Kernel value and its derivative w.r.t. `m`, or `None` outside the support.
#[inline]
fn kernel(m: f64) -> Option<(f64, f64)> {
    if !(m < CUTOFF_M) {
        return None;
    }
    let e = (-0.5 * m).exp();
    let norm = 1.0 / (1.0 - KERNEL_FLOOR);
    Some(((e - KERNEL_FLOOR) * norm, -0.5 * e * norm))
}

pub fn render(cloud: &GaussianCloud, view: &CameraView) -> Result<RenderTarget> {
    render_with(cloud, view, &RenderSettings::default())
}

pub fn render_with(cloud: &GaussianCloud, view: &CameraView, settings: &RenderSettings) -> Result<RenderTarget> {
    if cloud.is_empty() {
        return Err(Error::InvalidParameter("cannot render an empty cloud".into()));
    }
    if cloud.channels == 0 || cloud.channels > MAX_CHANNELS {
        return Err(Error::InvalidParameter(format!("{} channels unsupported", cloud.channels)));
    }
    view.intrinsics.validate()?;
    let (width, height) = (view.width(), view.height());
    let channels = cloud.channels;
    let (projected, sh) = project_cloud(cloud, view)?;

    let tile_size = settings.tile_size.unwrap_or(width.max(height)).max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, p) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = p.bbox;
        for ty in y0 / tile_size..=y1 / tile_size {
            for tx in x0 / tile_size..=x1 / tile_size {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let splats: Vec<Splat> = projected.iter().map(Splat::of).collect();
    let npx = width * height;
    let mut color = vec![0.0; npx * channels];
    let mut depth = vec![0.0; npx];
    let mut alpha = vec![0.0; npx];
    let mut final_t = vec![1.0; npx];
    let mut n_contrib = vec![0u32; npx];

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let list = &tile_lists[ty * tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * tile_size).min(height);
            let x_end = ((tx + 1) * tile_size).min(width);
            for y in ty * tile_size..y_end {
                let py = y as f64 + 0.5;
                for x in tx * tile_size..x_end {
                    let px = x as f64 + 0.5;
                    let pix = y * width + x;
                    let mut t = 1.0;
                    let mut acc = [0.0; MAX_CHANNELS];
                    let mut acc_depth = 0.0;
                    let mut last = 0u32;
                    for (pos, &si) in list.iter().enumerate() {
                        let p = &splats[si as usize];
                        if !p.covers(x as u32, y as u32) {
                            continue;
                        }
                        let (m, _, _) = p.mahalanobis(px, py);
                        let Some((k, _)) = kernel(m) else { continue };
                        let a = (p.opacity * k).min(MAX_ALPHA);
                        if !(a > 0.0) {
                            continue;
                        }
                        let t_next = t * (1.0 - a);
                        if t_next < MIN_TRANSMITTANCE {
                            break;
                        }
                        let w = a * t;
                        for c in 0..channels {
                            acc[c] += w * p.color[c];
                        }
                        acc_depth += w * p.z;
                        t = t_next;
                        last = pos as u32 + 1;
                    }
                    let a_tot = 1.0 - t;
                    color[pix * channels..(pix + 1) * channels].copy_from_slice(&acc[..channels]);
                    alpha[pix] = a_tot;
                    depth[pix] = if a_tot > DEPTH_ALPHA_EPS { acc_depth / a_tot } else { 0.0 };
                    final_t[pix] = t;
                    n_contrib[pix] = last;
                }
            }
        }
    }

    let ctx = BackwardCtx {
        width,
        height,
        channels,
        sh_degree: cloud.sh_degree,
        cloud_len: cloud.len(),
        intrinsics: view.intrinsics,
        pose: view.world_to_cam,
        projected,
        splats,
        sh,
        tile_size,
        tiles_x,
        tile_lists,
        final_t,
        n_contrib,
        depth: depth.clone(),
    };
    Ok(RenderTarget {
        color: ImageMap::from_vec(width, height, channels, color)?,
        depth: ImageMap::from_vec(width, height, 1, depth)?,
        alpha: ImageMap::from_vec(width, height, 1, alpha)?,
        ctx,
    })
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    color: [f64; MAX_CHANNELS],
    depth: f64,
    opacity: f64,
    mean2d: [f64; 2],
    /// Full-matrix gradient of the conic: `[d00, d01, d11]`.
    conic: [f64; 3],
}

/// Reverse-mode pass through the blend, projection and activations.
pub fn render_backward(
    ctx: &BackwardCtx,
    dl_dcolor: &ImageMap,
    dl_ddepth: Option<&ImageMap>,
) -> Result<ParamGradients> {
    if dl_dcolor.width() != ctx.width || dl_dcolor.height() != ctx.height || dl_dcolor.channels() != ctx.channels {
        return Err(Error::InvalidGradientShape(format!(
            "color gradient {}x{}x{} for a {}x{}x{} render",
            dl_dcolor.width(),
            dl_dcolor.height(),
            dl_dcolor.channels(),
            ctx.width,
            ctx.height,
            ctx.channels
        )));
    }
    if let Some(d) = dl_ddepth {
        if d.width() != ctx.width || d.height() != ctx.height || d.channels() != 1 {
            return Err(Error::InvalidGradientShape(format!(
                "depth gradient {}x{}x{} for a {}x{} render",
                d.width(),
                d.height(),
                d.channels(),
                ctx.width,
                ctx.height
            )));
        }
    }
    let channels = ctx.channels;
    let width = ctx.width;
    let mut screen = vec![ScreenGrad::default(); ctx.projected.len()];
    let tiles_y = ctx.height.div_ceil(ctx.tile_size);
    let gcol = dl_dcolor.data();
    let gdep = dl_ddepth.map(|d| d.data());

    for ty in 0..tiles_y {
        for tx in 0..ctx.tiles_x {
            let list = &ctx.tile_lists[ty * ctx.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * ctx.tile_size).min(ctx.height);
            let x_end = ((tx + 1) * ctx.tile_size).min(width);
            for y in ty * ctx.tile_size..y_end {
                let py = y as f64 + 0.5;
                for x in tx * ctx.tile_size..x_end {
                    let pix = y * width + x;
                    let last = ctx.n_contrib[pix] as usize;
                    if last == 0 {
                        continue;
                    }
                    let px = x as f64 + 0.5;
                    let gc = &gcol[pix * channels..(pix + 1) * channels];
                    let a_tot = 1.0 - ctx.final_t[pix];
                    let (gd, ga) = match gdep {
                        Some(g) if a_tot > DEPTH_ALPHA_EPS => {
                            let dd = ctx.depth[pix];
                            (g[pix] / a_tot, -g[pix] * dd / a_tot)
                        }
                        _ => (0.0, 0.0),
                    };
                    if gc.iter().all(|&v| v == 0.0) && gd == 0.0 && ga == 0.0 {
                        continue;
                    }
                    let mut t = ctx.final_t[pix];
                    let mut s_col = [0.0; MAX_CHANNELS];
                    let mut s_depth = 0.0;
                    let mut s_one = 0.0;
                    for &si in list[..last].iter().rev() {
                        let p = &ctx.splats[si as usize];
                        if !p.covers(x as u32, y as u32) {
                            continue;
                        }
                        let (m, dx, dy) = p.mahalanobis(px, py);
                        let Some((k, dk_dm)) = kernel(m) else { continue };
                        let raw = p.opacity * k;
                        let clipped = raw > MAX_ALPHA;
                        let a = raw.min(MAX_ALPHA);
                        if !(a > 0.0) {
                            continue;
                        }
                        t /= 1.0 - a;
                        let w = a * t;
                        let sg = &mut screen[si as usize];
                        let mut dl_da = 0.0;
                        for c in 0..channels {
                            sg.color[c] += w * gc[c];
                            dl_da += (p.color[c] - s_col[c]) * gc[c];
                            s_col[c] = a * p.color[c] + (1.0 - a) * s_col[c];
                        }
                        sg.depth += w * gd;
                        dl_da += (p.z - s_depth) * gd + (1.0 - s_one) * ga;
                        dl_da *= t;
                        s_depth = a * p.z + (1.0 - a) * s_depth;
                        s_one = a + (1.0 - a) * s_one;
                        if !clipped {
                            sg.opacity += dl_da * k;
                            let dl_dm = dl_da * p.opacity * dk_dm;
                            let [ca, cb, cc] = p.conic;
                            sg.mean2d[0] -= 2.0 * dl_dm * (ca * dx + cb * dy);
                            sg.mean2d[1] -= 2.0 * dl_dm * (cb * dx + cc * dy);
                            sg.conic[0] += dl_dm * dx * dx;
                            sg.conic[1] += dl_dm * dx * dy;
                            sg.conic[2] += dl_dm * dy * dy;
                        }
                    }
                }
            }
        }
    }

    let sh_len = ShCoeffs::basis_count(ctx.sh_degree) * channels;
    let nb = ShCoeffs::basis_count(ctx.sh_degree);
    let mut grads = ParamGradients::zeros(ctx.cloud_len, sh_len);
    let k = &ctx.intrinsics;
    let w_rot = &ctx.pose.rotation;
    for (si, (p, sg)) in ctx.projected.iter().zip(&screen).enumerate() {
        let gi = p.index;
        grads.visible[gi] = true;
        let mut dp = Vector3::zeros();
        let mut dmu = Vector3::zeros();

        // SH color.
        let basis = sh_basis(ctx.sh_degree, &p.dir);
        let coeffs = &ctx.sh[si * sh_len..(si + 1) * sh_len];
        let mut ddir = Vector3::zeros();
        for c in 0..channels {
            if !p.color_active[c] {
                continue;
            }
            let g = sg.color[c];
            for (b, basis_b) in basis.iter().enumerate().take(nb) {
                grads.sh[gi * sh_len + b * channels + c] = basis_b * g;
            }
            if ctx.sh_degree >= 1 {
                // basis = (C0, -C1 y, C1 z, -C1 x)
                ddir.y -= SH_C1 * coeffs[channels + c] * g;
                ddir.z += SH_C1 * coeffs[2 * channels + c] * g;
                ddir.x -= SH_C1 * coeffs[3 * channels + c] * g;
            }
        }
        if ctx.sh_degree >= 1 && p.dir_len > 0.0 {
            dmu += (ddir - p.dir * p.dir.dot(&ddir)) / p.dir_len;
        }

        grads.opacity[gi] = sg.opacity * p.opacity * (1.0 - p.opacity);

        // Conic -> projected covariance.
        let gconic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
        let conic = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let dcov2d = -(conic * gconic * conic);

        // Σ' = M Σ Mᵀ + 0.3 I with M = J W.
        let m = p.j * w_rot;
        let dcov3d = m.transpose() * dcov2d * m;
        let dm = 2.0 * dcov2d * m * p.cov3d;
        let dj = dm * w_rot.transpose();

        // Mean projection and the Jacobian's dependence on the camera-space mean.
        let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let gm = sg.mean2d;
        dp.x += k.fx * iz * gm[0];
        dp.y += k.fy * iz * gm[1];
        dp.z += -k.fx * x * iz2 * gm[0] - k.fy * y * iz2 * gm[1];
        dp.x += dj[(0, 2)] * (-k.fx * iz2);
        dp.y += dj[(1, 2)] * (-k.fy * iz2);
        dp.z += dj[(0, 0)] * (-k.fx * iz2)
            + dj[(0, 2)] * (2.0 * k.fx * x * iz3)
            + dj[(1, 1)] * (-k.fy * iz2)
            + dj[(1, 2)] * (2.0 * k.fy * y * iz3);
        dp.z += sg.depth;
        dmu += w_rot.transpose() * dp;
        grads.position[gi] = dmu;

        // Σ = (R S)(R S)ᵀ.
        let n = p.rot * Matrix3::from_diagonal(&p.scale);
        let dn = 2.0 * dcov3d * n;
        let mut dr = dn;
        let mut ds = Vector3::zeros();
        for col in 0..3 {
            let mut acc = 0.0;
            for row in 0..3 {
                acc += dn[(row, col)] * p.rot[(row, col)];
                dr[(row, col)] = dn[(row, col)] * p.scale[col];
            }
            ds[col] = acc * p.scale[col];
        }
        grads.log_scale[gi] = ds;
        let dqhat = rot_grad_to_quat(&p.qhat, &dr);
        let dot: f64 = dqhat.iter().zip(&p.qhat).map(|(a, b)| a * b).sum();
        grads.rotation[gi] = std::array::from_fn(|i| (dqhat[i] - p.qhat[i] * dot) / p.qnorm);

        grads.viewspace[gi] = (gm[0] * 0.5 * ctx.width as f64).hypot(gm[1] * 0.5 * ctx.height as f64);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_floor_matches_cutoff() {
        assert_eq!(KERNEL_FLOOR, (-0.5 * CUTOFF_M).exp());
    }
    use crate::camera::{Intrinsics, RigidTransform};
    use crate::splat::{logit, Gaussian3D, ShCoeffs, SH_C0};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(w: usize, h: usize) -> CameraView {
        CameraView::new(
            "t",
            Intrinsics {
                fx: w as f64,
                fy: w as f64,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
                width: w,
                height: h,
            },
            RigidTransform::identity(),
            false,
        )
    }

    fn gray(c: f64) -> ShCoeffs {
        ShCoeffs::from_color(0, &[c, c, c])
    }

    /// World point that projects onto the center of pixel (px, py) at depth z.
    fn at_pixel(v: &CameraView, px: usize, py: usize, z: f64) -> Vector3<f64> {
        let k = &v.intrinsics;
        Vector3::new((px as f64 + 0.5 - k.cx) / k.fx * z, (py as f64 + 0.5 - k.cy) / k.fy * z, z)
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let v = view(16, 16);
        let mut cloud = GaussianCloud::new(3, 0);
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(at_pixel(&v, 8, 8, 2.0), 0.05, 0.999, gray(0.6)));
        let out = render(&cloud, &v).unwrap();
        let a = 0.999f64.min(0.999);
        assert!((out.alpha.get(8, 8, 0) - a).abs() < 1e-9);
        for c in 0..3 {
            assert!((out.color.get(8, 8, c) - 0.6 * a).abs() < 1e-9);
        }
        assert!((out.depth.get(8, 8, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_layer_compositing() {
        let v = view(16, 16);
        let mut cloud = GaussianCloud::new(3, 0);
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(at_pixel(&v, 4, 4, 3.0), 0.1, 0.999, gray(0.2)));
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(at_pixel(&v, 4, 4, 1.0), 0.05, 0.5, gray(0.9)));
        let out = render(&cloud, &v).unwrap();
        let expect = 0.5 * 0.9 + 0.5 * 0.999 * 0.2;
        assert!((out.color.get(4, 4, 0) - expect).abs() < 1e-9, "{}", out.color.get(4, 4, 0));
    }

    #[test]
    fn empty_region_is_zero() {
        let v = view(32, 32);
        let mut cloud = GaussianCloud::new(3, 0);
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(at_pixel(&v, 3, 3, 2.0), 0.01, 0.9, gray(0.5)));
        let out = render(&cloud, &v).unwrap();
        assert_eq!(out.color.get(30, 30, 0), 0.0);
        assert_eq!(out.alpha.get(30, 30, 0), 0.0);
        assert_eq!(out.depth.get(30, 30, 0), 0.0);
    }

    #[test]
    fn all_culled_renders_zero() {
        let v = view(8, 8);
        let mut cloud = GaussianCloud::new(3, 0);
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.9, gray(0.5)));
        let out = render(&cloud, &v).unwrap();
        assert!(out.color.data().iter().all(|&c| c == 0.0));
        assert!(out.alpha.data().iter().all(|&c| c == 0.0));
        assert!(render(&GaussianCloud::new(3, 0), &v).is_err());
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, channels: usize, degree: usize, v: &CameraView) -> GaussianCloud {
        let mut cloud = GaussianCloud::new(channels, degree);
        for _ in 0..n {
            let px = rng.random_range(0..v.width());
            let py = rng.random_range(0..v.height());
            let z = rng.random_range(1.5..3.0);
            let mut pos = at_pixel(v, px, py, z);
            pos.x += rng.random_range(-0.05..0.05);
            pos.y += rng.random_range(-0.05..0.05);
            let mut sh = ShCoeffs::zeros(degree, channels);
            for c in sh.coeffs.iter_mut() {
                *c = rng.random_range(-0.4..0.4);
            }
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            cloud.gaussians.push(Gaussian3D {
                position: pos,
                rotation: q,
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-3.2..-2.0)),
                opacity_logit: logit(rng.random_range(0.2..0.8)),
                sh,
            });
        }
        cloud
    }

    #[test]
    fn tiled_and_global_paths_agree() {
        let v = view(40, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 60, 3, 1, &v);
        let a = render_with(&cloud, &v, &RenderSettings { tile_size: Some(16) }).unwrap();
        let b = render_with(&cloud, &v, &RenderSettings { tile_size: None }).unwrap();
        let c = render_with(&cloud, &v, &RenderSettings { tile_size: Some(7) }).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.color, c.color);
        let g = ImageMap::from_fn(40, 28, 3, |x, y, c| ((x * 3 + y * 7 + c) % 5) as f64 - 2.0);
        // Backward sums pixels in tile order, so only rounding may differ.
        let ga = render_backward(&a.ctx, &g, None).unwrap().flatten();
        let gb = render_backward(&b.ctx, &g, None).unwrap().flatten();
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let v = view(24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 30, 3, 1, &v);
        let a = render(&cloud, &v).unwrap();
        let b = render(&cloud, &v).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn alpha_bounded_and_colors_non_negative() {
        let v = view(24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cloud = random_cloud(&mut rng, 80, 3, 1, &v);
        let out = render(&cloud, &v).unwrap();
        assert!(out.alpha.data().iter().all(|&a| (0.0..=1.0 + 1e-6).contains(&a)));
        assert!(out.color.data().iter().all(|&c| c >= 0.0));
        for (d, a) in out.depth.data().iter().zip(out.alpha.data()) {
            if *a == 0.0 {
                assert_eq!(*d, 0.0);
            } else {
                assert!(*d >= 0.0);
            }
        }
    }

    #[test]
    fn opaque_front_gaussian_occludes() {
        let v = view(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut behind = random_cloud(&mut rng, 10, 3, 0, &v);
        for g in &mut behind.gaussians {
            g.position *= 2.0;
        }
        let mut front = Gaussian3D::isotropic(at_pixel(&v, 8, 8, 0.5), 0.2, 0.999, gray(0.3));
        front.opacity_logit = 30.0;
        let mut a = behind.clone();
        a.gaussians.push(front.clone());
        let mut b = random_cloud(&mut rng, 10, 3, 0, &v);
        for g in &mut b.gaussians {
            g.position *= 2.0;
        }
        b.gaussians.push(front);
        let ra = render(&a, &v).unwrap();
        let rb = render(&b, &v).unwrap();
        // Only the residual transmittance after the clipped alpha can leak through.
        for c in 0..3 {
            assert!((ra.color.get(8, 8, c) - rb.color.get(8, 8, c)).abs() <= (1.0 - MAX_ALPHA) * 2.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let v = view(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 10, 3, 1, &v);
        let out = render(&cloud, &v).unwrap();
        let g = render_backward(&out.ctx, &ImageMap::zeros(16, 16, 3), Some(&ImageMap::zeros(16, 16, 1))).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_shape_mismatch_is_error() {
        let v = view(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 3, 3, 0, &v);
        let out = render(&cloud, &v).unwrap();
        let r = render_backward(&out.ctx, &ImageMap::zeros(8, 16, 3), None);
        assert!(matches!(r, Err(Error::InvalidGradientShape(_))));
        let r = render_backward(&out.ctx, &ImageMap::zeros(16, 16, 3), Some(&ImageMap::zeros(16, 16, 2)));
        assert!(matches!(r, Err(Error::InvalidGradientShape(_))));
    }

    #[test]
    fn dc_gradient_at_mean_is_alpha_times_y00() {
        let v = view(16, 16);
        let mut cloud = GaussianCloud::new(3, 0);
        cloud
            .gaussians
            .push(Gaussian3D::isotropic(at_pixel(&v, 8, 8, 2.0), 0.05, 0.6, gray(0.4)));
        let out = render(&cloud, &v).unwrap();
        let a = out.alpha.get(8, 8, 0);
        let mut up = ImageMap::zeros(16, 16, 3);
        up.set(8, 8, 0, 1.0);
        let g = render_backward(&out.ctx, &up, None).unwrap();
        assert!((g.sh[0] - a * SH_C0).abs() < 1e-12);

        let h = 1e-4;
        let loss = |c: &GaussianCloud| render(c, &v).unwrap().color.get(8, 8, 0);
        let mut p = cloud.clone();
        p.gaussians[0].sh.coeffs[0] += h;
        let mut m = cloud.clone();
        m.gaussians[0].sh.coeffs[0] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        assert!((fd - g.sh[0]).abs() <= 1e-3 * fd.abs());
    }

    /// Central finite differences of `Σ upstream · render` over every parameter.
    fn fd_check(cloud: &GaussianCloud, v: &CameraView, up_c: &ImageMap, up_d: &ImageMap) -> (usize, usize, Vec<String>) {
        let loss = |c: &GaussianCloud| {
            let r = render(c, v).unwrap();
            let mut l = 0.0;
            for (a, b) in r.color.data().iter().zip(up_c.data()) {
                l += a * b;
            }
            for (a, b) in r.depth.data().iter().zip(up_d.data()) {
                l += a * b;
            }
            l
        };
        let out = render(cloud, v).unwrap();
        let analytic = render_backward(&out.ctx, up_c, Some(up_d)).unwrap().flatten();
        let base = cloud.flatten();
        let h = 1e-4;
        let mut ok = 0;
        let mut failures = Vec::new();
        for i in 0..base.len() {
            let mut p = cloud.clone();
            let mut m = cloud.clone();
            let mut fp = base.clone();
            fp[i] += h;
            p.unflatten(&fp).unwrap();
            let mut fm = base.clone();
            fm[i] -= h;
            m.unflatten(&fm).unwrap();
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = analytic[i];
            if (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-6 {
                ok += 1;
            } else {
                failures.push(format!("param {i}: fd {fd:.6e} analytic {an:.6e}"));
            }
        }
        (ok, base.len(), failures)
    }

    #[test]
    fn random_cloud_gradients_match_finite_differences() {
        let v = view(16, 16);
        let mut total = 0;
        let mut ok = 0;
        let mut all_failures = Vec::new();
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let channels = if seed % 2 == 0 { 3 } else { 1 };
            let cloud = random_cloud(&mut rng, 10, channels, 1, &v);
            let up_c = ImageMap::from_fn(16, 16, channels, |_, _, _| rng.random_range(-1.0..1.0));
            let up_d = ImageMap::from_fn(16, 16, 1, |_, _, _| rng.random_range(-0.2..0.2));
            let (o, t, f) = fd_check(&cloud, &v, &up_c, &up_d);
            ok += o;
            total += t;
            all_failures.extend(f);
        }
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.99, "{ok}/{total} passed; failures: {all_failures:#?}");
    }
}
