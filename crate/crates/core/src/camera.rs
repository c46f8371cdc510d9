//! Pinhole cameras, rigid poses and first-order (EWA) covariance projection.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::ImageMap;

/// Near clipping distance in world units.
pub const Z_NEAR: f64 = 0.01;
/// Screen-space low-pass dilation added to every projected covariance (px²).
pub const SCREEN_DILATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered principal point with the given horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// World-to-camera rigid transform `x_cam = W x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; camera +y points image-down.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidParameter("look_at with eye == target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidParameter("look_at up vector parallel to view".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("pose rotation is not a proper rotation".into()));
        }
        Ok(())
    }
}

/// One capture: pose, intrinsics, flash flag and (optionally empty) raw-linear image.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub view_id: String,
    pub intrinsics: Intrinsics,
    pub world_to_cam: RigidTransform,
    pub flash: bool,
    pub image: Option<ImageMap>,
}

impl CameraView {
    pub fn new(view_id: impl Into<String>, intrinsics: Intrinsics, world_to_cam: RigidTransform, flash: bool) -> Self {
        Self {
            view_id: view_id.into(),
            intrinsics,
            world_to_cam,
            flash,
            image: None,
        }
    }

    pub fn with_image(mut self, image: ImageMap) -> Self {
        self.image = Some(image);
        self
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.world_to_cam.validate()?;
        if let Some(img) = &self.image {
            if img.width() != self.width() || img.height() != self.height() || img.channels() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "view {}: image {}x{}x{} vs intrinsics {}x{}",
                    self.view_id,
                    img.width(),
                    img.height(),
                    img.channels(),
                    self.width(),
                    self.height()
                )));
            }
        }
        Ok(())
    }

    pub fn record(&self) -> CameraRecord {
        let r = &self.world_to_cam.rotation;
        CameraRecord {
            view_id: self.view_id.clone(),
            flash: self.flash,
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            width: self.intrinsics.width,
            height: self.intrinsics.height,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: self.world_to_cam.translation.into(),
        }
    }
}

/// JSON pose record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: String,
    pub flash: bool,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn to_view(&self) -> Result<CameraView> {
        let view = CameraView::new(
            self.view_id.clone(),
            Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
            RigidTransform {
                rotation: Matrix3::from_row_slice(&self.rotation),
                translation: Vector3::from(self.translation),
            },
            self.flash,
        );
        view.validate()?;
        Ok(view)
    }
}

/// Unpaired flash/no-flash capture collection.
#[derive(Debug, Clone)]
pub struct CaptureSet {
    pub views: Vec<CameraView>,
}

impl CaptureSet {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        let set = Self { views };
        set.validate()?;
        Ok(set)
    }

    /// A capture set that may lack one of the pools (flashless runs).
    pub fn new_unchecked_pools(views: Vec<CameraView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("capture set has no views".into()));
        }
        for v in &views {
            v.validate()?;
        }
        Ok(Self { views })
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.views {
            v.validate()?;
        }
        if self.flash_count() == 0 || self.noflash_count() == 0 {
            return Err(Error::Config(format!(
                "capture set needs flash and no-flash views (have {} / {})",
                self.flash_count(),
                self.noflash_count()
            )));
        }
        Ok(())
    }

    pub fn flash_count(&self) -> usize {
        self.views.iter().filter(|v| v.flash).count()
    }

    pub fn noflash_count(&self) -> usize {
        self.views.iter().filter(|v| !v.flash).count()
    }
}

/// Pinhole projection of a world point: `(pixel, camera-space depth)`.
pub fn project_point(view: &CameraView, x_world: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let p = view.world_to_cam.apply(x_world);
    if p.z <= Z_NEAR {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((camera_to_pixel(&view.intrinsics, &p), p.z))
}

#[inline]
pub fn camera_to_pixel(k: &Intrinsics, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Jacobian of the pinhole map at camera-space point `p`.
#[inline]
pub fn projection_jacobian(k: &Intrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

/// `Σ' = J W Σ Wᵀ Jᵀ + 0.3 I`.
#[inline]
pub fn project_covariance(cov: &Matrix3<f64>, w: &Matrix3<f64>, j: &Matrix2x3<f64>) -> Matrix2<f64> {
    let m = j * w;
    let s = m * cov * m.transpose();
    let s = 0.5 * (s + s.transpose());
    s + Matrix2::identity() * SCREEN_DILATION
}
