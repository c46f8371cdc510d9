//! Gaussian primitives: parameterization, activations, density and SH color.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Band-0 real spherical harmonic constant, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Band-1 real spherical harmonic constant, `sqrt(3) / (2 sqrt(pi))`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Offset added to the SH evaluation before the non-negativity clamp, so that
/// all-zero coefficients render mid-gray.
pub const COLOR_OFFSET: f64 = 0.5;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Real SH basis up to degree 1 with the `(Y00, -y, z, -x)` ordering.
#[inline]
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> [f64; 4] {
    if degree == 0 {
        [SH_C0, 0.0, 0.0, 0.0]
    } else {
        [SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
    }
}

/// Spherical-harmonic coefficients of one Gaussian, stored basis-major:
/// `coeffs[k * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    pub degree: usize,
    pub channels: usize,
    pub coeffs: Vec<f64>,
}

impl ShCoeffs {
    pub fn basis_count(degree: usize) -> usize {
        (degree + 1) * (degree + 1)
    }

    pub fn zeros(degree: usize, channels: usize) -> Self {
        Self {
            degree,
            channels,
            coeffs: vec![0.0; Self::basis_count(degree) * channels],
        }
    }

    /// Coefficients whose DC band reproduces `color` after the render offset,
    /// higher bands zero.
    pub fn from_color(degree: usize, color: &[f64]) -> Self {
        let mut sh = Self::zeros(degree, color.len());
        for (c, v) in color.iter().enumerate() {
            sh.coeffs[c] = (v - COLOR_OFFSET) / SH_C0;
        }
        sh
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 1 {
            return Err(Error::InvalidParameter(format!(
                "SH degree {} unsupported (max 1)",
                self.degree
            )));
        }
        if self.coeffs.len() != Self::basis_count(self.degree) * self.channels {
            return Err(Error::InvalidParameter(format!(
                "{} SH coefficients for degree {} with {} channels",
                self.coeffs.len(),
                self.degree,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Evaluate the SH expansion in direction `dir` (unit length).
pub fn eval_sh(sh: &ShCoeffs, dir: &Vector3<f64>) -> Result<Vec<f64>> {
    sh.validate()?;
    if !dir.iter().all(|v| v.is_finite()) || !sh.coeffs.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite SH input".into()));
    }
    let basis = sh_basis(sh.degree, dir);
    let k = ShCoeffs::basis_count(sh.degree);
    let mut out = vec![0.0; sh.channels];
    for (b, coeff_row) in basis.iter().take(k).zip(sh.coeffs.chunks_exact(sh.channels)) {
        for (o, c) in out.iter_mut().zip(coeff_row) {
            *o += b * c;
        }
    }
    Ok(out)
}

/// Rotation matrix of `q = (w, x, y, z)` after normalization.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// `Σ = R diag(exp(s))² Rᵀ`.
pub fn covariance_from_params(q: &[f64; 4], log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !q.iter().all(|v| v.is_finite()) || !log_scale.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    let r = rotation_matrix(q);
    let s = Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let m = r * s;
    Ok(m * m.transpose())
}

/// Normalized trivariate Gaussian density.
pub fn eval_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, x: &Vector3<f64>) -> Result<f64> {
    let det = cov.determinant();
    if !(det > 1e-300) || !det.is_finite() {
        return Err(Error::DegenerateCovariance(det));
    }
    let inv = cov
        .try_inverse()
        .ok_or(Error::DegenerateCovariance(det))?;
    let d = x - mean;
    let quad = d.dot(&(inv * d));
    let norm = (2.0 * std::f64::consts::PI).powf(-1.5) / det.sqrt();
    Ok(norm * (-0.5 * quad).exp())
}

/// One anisotropic Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`; kept at unit norm between optimizer steps.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
}

impl Gaussian3D {
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, sh: ShCoeffs) -> Self {
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_params(&self.rotation, &self.log_scale)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for v in &mut self.rotation {
                *v /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.coeffs.iter().all(|v| v.is_finite())
    }
}

/// A homogeneous set of Gaussians (shared channel count and SH degree).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub channels: usize,
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian3D>,
}

/// Per-Gaussian parameter layout used for flattening:
/// `[position(3), rotation(4), log_scale(3), opacity(1), sh(K·C)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Sh,
}

impl GaussianCloud {
    pub fn new(channels: usize, sh_degree: usize) -> Self {
        Self {
            channels,
            sh_degree,
            gaussians: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_len(&self) -> usize {
        ShCoeffs::basis_count(self.sh_degree) * self.channels
    }

    /// Scalars per Gaussian in the flat layout.
    pub fn params_per_gaussian(&self) -> usize {
        11 + self.sh_len()
    }

    pub fn group_of(&self, offset: usize) -> ParamGroup {
        match offset {
            0..=2 => ParamGroup::Position,
            3..=6 => ParamGroup::Rotation,
            7..=9 => ParamGroup::Scale,
            10 => ParamGroup::Opacity,
            _ => ParamGroup::Sh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 1 {
            return Err(Error::InvalidParameter(format!(
                "SH degree {} unsupported (max 1)",
                self.sh_degree
            )));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh.degree != self.sh_degree || g.sh.channels != self.channels {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {i} has SH degree {} / {} channels, cloud expects {} / {}",
                    g.sh.degree, g.sh.channels, self.sh_degree, self.channels
                )));
            }
            g.sh.validate()?;
            if !g.is_finite() {
                return Err(Error::InvalidParameter(format!("gaussian {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let p = self.params_per_gaussian();
        let mut out = Vec::with_capacity(p * self.len());
        for g in &self.gaussians {
            out.extend(g.position.iter());
            out.extend(g.rotation.iter());
            out.extend(g.log_scale.iter());
            out.push(g.opacity_logit);
            out.extend(g.sh.coeffs.iter());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let p = self.params_per_gaussian();
        if flat.len() != p * self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for {} gaussians of stride {p}",
                flat.len(),
                self.len()
            )));
        }
        for (g, chunk) in self.gaussians.iter_mut().zip(flat.chunks_exact(p)) {
            g.position = Vector3::new(chunk[0], chunk[1], chunk[2]);
            g.rotation = [chunk[3], chunk[4], chunk[5], chunk[6]];
            g.log_scale = Vector3::new(chunk[7], chunk[8], chunk[9]);
            g.opacity_logit = chunk[10];
            g.sh.coeffs.copy_from_slice(&chunk[11..]);
        }
        Ok(())
    }

    /// Axis-aligned bounds of the Gaussian means.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.position), hi.sup(&g.position))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
        let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= n);
        q
    }

    // Cofactor expansion, deliberately not nalgebra's LU path.
    fn det3(m: &Matrix3<f64>) -> f64 {
        m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
    }

    #[test]
    fn covariance_identity_cases() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let c = covariance_from_params(&id, &Vector3::zeros()).unwrap();
        assert!((c - Matrix3::identity()).abs().max() < 1e-15);
        let c = covariance_from_params(&id, &Vector3::new(2f64.ln(), 0.0, 0.0)).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_determinant_matches_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::from_fn(|_, _| rng.random_range(-2.0..1.0));
            let c = covariance_from_params(&q, &s).unwrap();
            let expected = (2.0 * s.sum()).exp();
            assert!(rel_close(det3(&c), expected, 1e-10), "{} vs {}", det3(&c), expected);
            assert!((c - c.transpose()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn covariance_rejects_non_finite() {
        let r = covariance_from_params(&[f64::NAN, 0.0, 0.0, 0.0], &Vector3::zeros());
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn gaussian_density_at_mean() {
        let mu = Vector3::new(0.3, -1.0, 2.0);
        let g = eval_gaussian(&mu, &Matrix3::identity(), &mu).unwrap();
        // (2π)^{-3/2}
        assert!((g - 0.063_493_635_934_240_97).abs() < 1e-15);
        let cov = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25));
        let g = eval_gaussian(&mu, &cov, &mu).unwrap();
        assert!((g - 0.063_493_635_934_240_97).abs() < 1e-15);
    }

    #[test]
    fn gaussian_density_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::from_fn(|_, _| rng.random_range(-1.0..0.5));
            let cov = covariance_from_params(&q, &s).unwrap();
            let mu = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let a = eval_gaussian(&mu, &cov, &(mu + d)).unwrap();
            let b = eval_gaussian(&mu, &cov, &(mu - d)).unwrap();
            assert!(a > 0.0);
            assert!(rel_close(a, b, 1e-12));
        }
    }

    #[test]
    fn gaussian_density_singular_is_error() {
        let cov = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        let r = eval_gaussian(&Vector3::zeros(), &cov, &Vector3::zeros());
        assert!(matches!(r, Err(Error::DegenerateCovariance(_))));
    }

    #[test]
    fn gaussian_integrates_to_one() {
        // Importance sampling from a wider isotropic normal.
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 1.5;
        let normal = Normal::new(0.0, sigma).unwrap();
        let q_norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-1.5);
        let n = 1_000_000;
        let mut acc = 0.0;
        let id = Matrix3::identity();
        let mu = Vector3::zeros();
        for _ in 0..n {
            let x = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            let q = q_norm * (-0.5 * x.norm_squared() / (sigma * sigma)).exp();
            acc += eval_gaussian(&mu, &id, &x).unwrap() / q;
        }
        let est = acc / n as f64;
        assert!((est - 1.0).abs() < 0.01, "integral estimate {est}");
    }

    #[test]
    fn sh_dc_constant() {
        let sh = ShCoeffs {
            degree: 0,
            channels: 3,
            coeffs: vec![1.0, 0.0, 0.0],
        };
        let out = eval_sh(&sh, &Vector3::new(0.0, 0.6, 0.8)).unwrap();
        assert!((out[0] - 0.282_094_8).abs() < 1e-7);
        assert_eq!(&out[1..], &[0.0, 0.0]);
        // 1 / (2 sqrt(pi))
        assert!((SH_C0 - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-16);
        assert!((SH_C1 - 3f64.sqrt() * 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-16);
    }

    #[test]
    fn sh_zero_and_odd_band() {
        let sh = ShCoeffs::zeros(1, 3);
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(eval_sh(&sh, &d).unwrap(), vec![0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sh = ShCoeffs::zeros(1, 3);
        sh.coeffs.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let dir = Vector3::new(0.3, -0.4, 0.5).normalize();
        let a = eval_sh(&sh, &dir).unwrap();
        let b = eval_sh(&sh, &-dir).unwrap();
        for c in 0..3 {
            assert!((a[c] + b[c] - 2.0 * SH_C0 * sh.coeffs[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let mut cloud = GaussianCloud::new(3, 1);
        for i in 0..4 {
            let mut sh = ShCoeffs::zeros(1, 3);
            sh.coeffs.iter_mut().enumerate().for_each(|(k, c)| *c = (i * 100 + k) as f64);
            cloud.gaussians.push(Gaussian3D::isotropic(Vector3::new(i as f64, 1.0, 2.0), 0.1, 0.3, sh));
        }
        let flat = cloud.flatten();
        assert_eq!(flat.len(), 4 * cloud.params_per_gaussian());
        let mut other = cloud.clone();
        other.unflatten(&flat).unwrap();
        assert_eq!(other, cloud);
        assert!(other.unflatten(&flat[1..]).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_positive_definite(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-4.0f64..2.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            let c = covariance_from_params(&q, &Vector3::from(s)).unwrap();
            prop_assert!(c.cholesky().is_some());
        }

        #[test]
        fn sh_is_linear(
            c1 in prop::collection::vec(-2.0f64..2.0, 12),
            c2 in prop::collection::vec(-2.0f64..2.0, 12),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            d in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let dir = Vector3::from(d);
            prop_assume!(dir.norm() > 1e-3);
            let dir = dir.normalize();
            let s1 = ShCoeffs { degree: 1, channels: 3, coeffs: c1.clone() };
            let s2 = ShCoeffs { degree: 1, channels: 3, coeffs: c2.clone() };
            let mix = ShCoeffs {
                degree: 1,
                channels: 3,
                coeffs: c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect(),
            };
            let e1 = eval_sh(&s1, &dir).unwrap();
            let e2 = eval_sh(&s2, &dir).unwrap();
            let em = eval_sh(&mix, &dir).unwrap();
            for c in 0..3 {
                prop_assert!((em[c] - (a * e1[c] + b * e2[c])).abs() < 1e-12);
            }
        }
    }
}
