//! Point-cloud initialization from the flash-only and no-flash-only
//! reconstructions: rough similarity alignment, transmitted/reflected
//! classification by brightening under flash, and cloud seeding.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composite::{SceneModel, ToneCurve, TransmissionMode};
use crate::error::{Error, Result};
use crate::splat::{logit, Gaussian3D, GaussianCloud, ShCoeffs};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(c: &[f64; 3]) -> f64 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Flash,
    NoFlash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Transmitted,
    Reflected,
}

/// Sparse reconstruction with raw-linear mean colors.
#[derive(Debug, Clone, PartialEq)]
pub struct SfMPoints {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub source: PointSource,
    /// Ground-truth layer membership, when known.
    pub labels: Option<Vec<PointLabel>>,
}

impl SfMPoints {
    pub fn new(positions: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>, source: PointSource) -> Result<Self> {
        let pts = Self {
            positions,
            colors,
            source,
            labels: None,
        };
        pts.validate()?;
        Ok(pts)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::InvalidParameter("point cloud is empty".into()));
        }
        if self.colors.len() != self.positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions vs {} colors",
                self.positions.len(),
                self.colors.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.positions.len() {
                return Err(Error::ShapeMismatch("label count differs from point count".into()));
            }
        }
        if !self.positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter("non-finite point position".into()));
        }
        if !self.colors.iter().flatten().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("point colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Similarity) -> Self {
        Self {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    /// No-flash raw-linear color.
    pub color: [f64; 3],
    /// Flash raw-linear color; present for transmitted points.
    pub flash_color: Option<[f64; 3]>,
    pub label: PointLabel,
    /// Ground-truth label carried over from the source cloud.
    pub truth: Option<PointLabel>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPoints {
    pub points: Vec<LabeledPoint>,
}

impl LabeledPoints {
    pub fn count(&self, label: PointLabel) -> usize {
        self.points.iter().filter(|p| p.label == label).count()
    }

    pub fn with_label(&self, label: PointLabel) -> impl Iterator<Item = &LabeledPoint> {
        self.points.iter().filter(move |p| p.label == label)
    }

    /// Fraction of points with a known ground truth that are labeled correctly.
    pub fn accuracy(&self) -> Option<f64> {
        let known: Vec<_> = self.points.iter().filter_map(|p| p.truth.map(|t| t == p.label)).collect();
        if known.is_empty() {
            return None;
        }
        Some(known.iter().filter(|&&ok| ok).count() as f64 / known.len() as f64)
    }
}

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// Largest deviation of any component from the identity transform.
    pub fn distance_from_identity(&self) -> f64 {
        let r = (self.rotation - Matrix3::identity()).abs().max();
        let t = self.translation.abs().max();
        r.max(t).max((self.scale - 1.0).abs())
    }
}

/// Least-squares similarity mapping `src[i]` onto `dst[i]`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::AlignmentUnreliable(format!(
            "need >= 3 correspondences, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-24 {
        return Err(Error::AlignmentUnreliable("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let mut d = Vector3::repeat(1.0);
    if (u * v_t).determinant() < 0.0 {
        d[sv.argmin().0] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = sv.dot(&d) / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

fn nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Symmetric nearest-neighbor residual of `t(src)` against `dst`, with the
/// `(src, dst)` index pairs matched in both directions. Matching both ways
/// keeps the fit from collapsing every source point onto one target.
fn rms_matched(t: &Similarity, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (f64, Vec<(usize, usize)>) {
    let moved: Vec<_> = src.iter().map(|s| t.apply(s)).collect();
    let mut sum = 0.0;
    let mut pairs = Vec::with_capacity(src.len() + dst.len());
    for (i, m) in moved.iter().enumerate() {
        let (j, d) = nearest(dst, m);
        sum += d * d;
        pairs.push((i, j));
    }
    for (j, q) in dst.iter().enumerate() {
        let (i, d) = nearest(&moved, q);
        sum += d * d;
        pairs.push((i, j));
    }
    ((sum / pairs.len() as f64).sqrt(), pairs)
}

fn principal_axes(points: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let n = points.len() as f64;
    let mu = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mu;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    // Sort axes by decreasing variance.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    let vals = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    (mu, axes, vals)
}

/// Outcome of [`align_clouds`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: Similarity,
    /// Symmetric nearest-neighbor RMS residual between the two center sets.
    pub rms_before: f64,
    pub rms_after: f64,
}

/// Similarity taking the flash camera centers onto the no-flash centers.
///
/// Correspondences come from nearest-neighbor matching, refined iteratively
/// from several starting rotations (identity and principal-axis pairings);
/// the lowest-residual fit wins.
pub fn align_clouds(flash_centers: &[Vector3<f64>], noflash_centers: &[Vector3<f64>]) -> Result<Alignment> {
    if flash_centers.len() < 3 || noflash_centers.len() < 3 {
        return Err(Error::AlignmentUnreliable(format!(
            "need >= 3 camera centers per pool, got {} and {}",
            flash_centers.len(),
            noflash_centers.len()
        )));
    }
    let (mu_f, axes_f, var_f) = principal_axes(flash_centers);
    let (mu_n, axes_n, var_n) = principal_axes(noflash_centers);
    for (name, v) in [("flash", var_f), ("no-flash", var_n)] {
        if v[1] <= 1e-12 * v[0].max(1e-300) {
            return Err(Error::AlignmentUnreliable(format!("{name} camera centers are collinear")));
        }
    }
    let identity = Similarity::identity();
    let (rms_before, _) = rms_matched(&identity, flash_centers, noflash_centers);

    let spread_f = var_f.sum().sqrt();
    let spread_n = var_n.sum().sqrt();
    let s0 = spread_n / spread_f;
    let mut starts = vec![identity];
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let d = Matrix3::from_diagonal(&Vector3::from(signs));
        let mut r = axes_n * d * axes_f.transpose();
        if r.determinant() < 0.0 {
            r = axes_n * d * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * axes_f.transpose();
        }
        starts.push(Similarity {
            scale: s0,
            rotation: r,
            translation: mu_n - s0 * r * mu_f,
        });
    }

    let mut best: Option<(f64, Similarity)> = None;
    for start in starts {
        let mut t = start;
        let (mut rms, mut idx) = rms_matched(&t, flash_centers, noflash_centers);
        for _ in 0..100 {
            let src: Vec<_> = idx.iter().map(|&(i, _)| flash_centers[i]).collect();
            let dst: Vec<_> = idx.iter().map(|&(_, j)| noflash_centers[j]).collect();
            let next = match umeyama(&src, &dst) {
                Ok(s) => s,
                Err(_) => break,
            };
            let (next_rms, next_idx) = rms_matched(&next, flash_centers, noflash_centers);
            if next_rms > rms {
                break;
            }
            let converged = next_idx == idx;
            t = next;
            rms = next_rms;
            idx = next_idx;
            if converged {
                break;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| rms < *b) {
            best = Some((rms, t));
        }
    }
    let (rms_after, transform) = best.expect("at least one start");
    if rms_after > rms_before {
        return Ok(Alignment {
            transform: identity,
            rms_before,
            rms_after: rms_before,
        });
    }
    Ok(Alignment {
        transform,
        rms_before,
        rms_after,
    })
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let grid = Grid::new(points, median_guess(points));
    let mut d: Vec<f64> = (0..points.len()).map(|i| grid.knn(points, &points[i], 1, Some(i))[0].1).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn median_guess(points: &[Vector3<f64>]) -> f64 {
    let (lo, hi) = bbox(points);
    let ext = hi - lo;
    let vol_dims: Vec<f64> = ext.iter().copied().filter(|v| *v > 1e-12).collect();
    if vol_dims.is_empty() {
        return 1.0;
    }
    let measure: f64 = vol_dims.iter().product();
    (measure / points.len() as f64).powf(1.0 / vol_dims.len() as f64).max(1e-9)
}

fn bbox(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Uniform hash grid for neighbor queries.
struct Grid {
    cell: f64,
    origin: Vector3<f64>,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        let (lo, hi) = bbox(points);
        let cell = cell.max(1e-12);
        let dims: [usize; 3] = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).min(1 << 10));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let mut keys = Vec::with_capacity(points.len());
        let mut g = Self {
            cell,
            origin: lo,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        for p in points {
            let k = g.key(&g.coords(p));
            keys.push(k);
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k]] = i;
            fill[k] += 1;
        }
        g.starts = counts;
        g.items = items;
        g
    }

    fn coords(&self, p: &Vector3<f64>) -> [isize; 3] {
        std::array::from_fn(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor() as isize;
            c.clamp(0, self.dims[k] as isize - 1)
        })
    }

    fn key(&self, c: &[isize; 3]) -> usize {
        (c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0] + c[0] as usize
    }

    /// Indices within `r` of `q`, ascending.
    fn within(&self, points: &[Vector3<f64>], q: &Vector3<f64>, r: f64) -> Vec<usize> {
        let span = (r / self.cell).ceil() as isize;
        let c = self.coords(q);
        let mut out = Vec::new();
        for dz in -span..=span {
            for dy in -span..=span {
                for dx in -span..=span {
                    let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).any(|k| cc[k] < 0 || cc[k] >= self.dims[k] as isize) {
                        continue;
                    }
                    let k = self.key(&cc);
                    for &i in &self.items[self.starts[k]..self.starts[k + 1]] {
                        if (points[i] - q).norm() <= r {
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// `k` nearest points to `q` as `(index, distance)`, nearest first, ties by index.
    fn knn(&self, points: &[Vector3<f64>], q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let available = points.len() - usize::from(exclude.is_some());
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let mut r = self.cell;
        loop {
            let mut found: Vec<(usize, f64)> = self
                .within(points, q, r)
                .into_iter()
                .filter(|&i| Some(i) != exclude)
                .map(|i| (i, (points[i] - q).norm()))
                .collect();
            let max_r = self.cell * (self.dims.iter().copied().max().unwrap_or(1) as f64 + 1.0) * 2.0;
            if found.len() >= k || r > max_r {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.truncate(k);
                if found.len() == k || r > max_r {
                    return found;
                }
            }
            r *= 2.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyParams {
    /// Neighborhood radius; `None` uses twice the median no-flash spacing.
    pub radius: Option<f64>,
    pub ratio: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self {
            radius: None,
            ratio: 1.25,
        }
    }
}

fn canonical_order(p: &SfMPoints) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&p.positions[a], &p.positions[b]);
        pa.x.total_cmp(&pb.x)
            .then(pa.y.total_cmp(&pb.y))
            .then(pa.z.total_cmp(&pb.z))
            .then_with(|| {
                let (ca, cb) = (&p.colors[a], &p.colors[b]);
                ca[0].total_cmp(&cb[0]).then(ca[1].total_cmp(&cb[1])).then(ca[2].total_cmp(&cb[2]))
            })
    });
    idx
}

fn sorted(p: &SfMPoints) -> SfMPoints {
    let idx = canonical_order(p);
    SfMPoints {
        positions: idx.iter().map(|&i| p.positions[i]).collect(),
        colors: idx.iter().map(|&i| p.colors[i]).collect(),
        source: p.source,
        labels: p.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
    }
}

/// Label flash points by their brightening relative to the no-flash cloud.
///
/// Both clouds are first put in a canonical (position-sorted) order, so the
/// result does not depend on the input order; nearest-neighbor ties go to the
/// lower sorted index.
pub fn classify_points(flash: &SfMPoints, noflash: &SfMPoints, params: &ClassifyParams) -> Result<LabeledPoints> {
    flash.validate()?;
    noflash.validate()?;
    if !(params.ratio > 0.0) {
        return Err(Error::InvalidParameter(format!("ratio threshold {} must be > 0", params.ratio)));
    }
    let f = sorted(flash);
    let n = sorted(noflash);
    let radius = match params.radius {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::InvalidParameter(format!("radius {r} must be > 0"))),
        None => {
            let s = median_nn_spacing(&n.positions);
            if s > 0.0 {
                2.0 * s
            } else {
                1e-6
            }
        }
    };
    let fgrid = Grid::new(&f.positions, radius);
    let ngrid = Grid::new(&n.positions, radius);
    let mut used = vec![false; n.len()];
    let mut out = Vec::with_capacity(f.len() + n.len());
    let mut unmatched = Vec::new();
    let mut ratios = Vec::new();
    for i in 0..f.len() {
        let p = f.positions[i];
        let truth = f.labels.as_ref().map(|l| l[i]);
        let near = ngrid.knn(&n.positions, &p, 1, None);
        let Some(&(j, d)) = near.first().filter(|(_, d)| *d <= radius) else {
            unmatched.push(out.len());
            out.push(LabeledPoint {
                position: p,
                color: f.colors[i],
                flash_color: Some(f.colors[i]),
                label: PointLabel::Transmitted,
                truth,
            });
            continue;
        };
        let _ = d;
        used[j] = true;
        let mean_lum = |grid: &Grid, pts: &SfMPoints| {
            let idx = grid.within(&pts.positions, &p, radius);
            idx.iter().map(|&k| luminance(&pts.colors[k])).sum::<f64>() / idx.len().max(1) as f64
        };
        let lf = mean_lum(&fgrid, &f);
        let ln = mean_lum(&ngrid, &n);
        let ratio = if ln > 0.0 { lf / ln } else { f64::INFINITY };
        if ratio >= params.ratio {
            let own = luminance(&n.colors[j]);
            if own > 0.0 {
                ratios.push(luminance(&f.colors[i]) / own);
            }
            out.push(LabeledPoint {
                position: p,
                color: n.colors[j],
                flash_color: Some(f.colors[i]),
                label: PointLabel::Transmitted,
                truth,
            });
        } else {
            out.push(LabeledPoint {
                position: p,
                color: n.colors[j],
                flash_color: None,
                label: PointLabel::Reflected,
                truth,
            });
        }
    }
    if !unmatched.is_empty() {
        let gain = if ratios.is_empty() {
            1.0
        } else {
            ratios.sort_by(f64::total_cmp);
            ratios[ratios.len() / 2].max(1e-6)
        };
        for k in unmatched {
            let c = out[k].color;
            out[k].color = c.map(|v| (v / gain).clamp(0.0, 1.0));
        }
    }
    for j in 0..n.len() {
        if !used[j] {
            out.push(LabeledPoint {
                position: n.positions[j],
                color: n.colors[j],
                flash_color: None,
                label: PointLabel::Reflected,
                truth: n.labels.as_ref().map(|l| l[j]),
            });
        }
    }
    Ok(LabeledPoints { points: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub sh_degree: usize,
    pub opacity: f64,
    /// Per-Gaussian activated beta value of the seed.
    pub beta: f64,
    /// Points seeded when a label set is empty or random init is requested.
    pub fallback_count: usize,
    /// Upper bound on seeded points per cloud; extra points are subsampled evenly.
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sh_degree: 0,
            opacity: 0.1,
            beta: 0.5,
            fallback_count: 500,
            max_points: None,
            seed: 0,
        }
    }
}

/// Seeded scene plus any warnings raised while building it.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub scene: SceneModel,
    pub warnings: Vec<String>,
}

fn log_scale_from_neighbors(points: &[Vector3<f64>]) -> Vec<f64> {
    if points.len() < 2 {
        return vec![(0.01f64).ln(); points.len()];
    }
    let grid = Grid::new(points, median_guess(points));
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = grid.knn(points, p, 3, Some(i));
            let mean = nn.iter().map(|x| x.1).sum::<f64>() / nn.len() as f64;
            mean.max(1e-4).ln()
        })
        .collect()
}

fn subsample<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if m > 0 && items.len() > m => (0..m).map(|k| items[k * items.len() / m].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Cloud of isotropic Gaussians storing the given (already tone-mapped) values.
fn seed_cloud(positions: &[Vector3<f64>], values: &[Vec<f64>], channels: usize, cfg: &InitConfig) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(channels, cfg.sh_degree);
    let scales = log_scale_from_neighbors(positions);
    for ((p, v), s) in positions.iter().zip(values).zip(scales) {
        cloud.gaussians.push(Gaussian3D {
            position: *p,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(s),
            opacity_logit: logit(cfg.opacity),
            sh: ShCoeffs::from_color(cfg.sh_degree, v),
        });
    }
    cloud
}

fn random_points(rng: &mut ChaCha8Rng, lo: &Vector3<f64>, hi: &Vector3<f64>, count: usize) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|_| Vector3::from_fn(|k, _| if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] }))
        .collect()
}

fn random_colors(rng: &mut ChaCha8Rng, count: usize, channels: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..channels).map(|_| rng.random_range(0.2..0.8)).collect()).collect()
}

fn padded_bbox(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let (lo, hi) = bbox(points);
    let pad = ((hi - lo).norm() * 0.05).max(1e-3);
    (lo.add_scalar(-pad), hi.add_scalar(pad))
}

/// Build the four (or fewer) clouds from labeled points.
pub fn init_scene(labels: &LabeledPoints, mode: TransmissionMode, tone: ToneCurve, cfg: &InitConfig) -> Result<InitOutcome> {
    if labels.points.is_empty() {
        return Err(Error::InvalidParameter("no points to initialize from".into()));
    }
    if !(cfg.opacity > 0.0 && cfg.opacity < 1.0) || !(cfg.beta > 0.0 && cfg.beta < 1.0) || cfg.sh_degree > 1 {
        return Err(Error::Config(format!("invalid init config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warnings = Vec::new();
    let all: Vec<_> = labels.points.iter().map(|p| p.position).collect();
    let (lo, hi) = padded_bbox(&all);
    let fallback = cfg.fallback_count.max(1);

    let trans: Vec<&LabeledPoint> = subsample(&labels.with_label(PointLabel::Transmitted).collect::<Vec<_>>(), cfg.max_points);
    let refl: Vec<&LabeledPoint> = subsample(&labels.with_label(PointLabel::Reflected).collect::<Vec<_>>(), cfg.max_points);
    let g = |c: &[f64; 3]| c.iter().map(|&v| tone.forward(v.clamp(0.0, 1.0))).collect::<Vec<f64>>();
    let beta_value = cfg.beta / (1.0 - cfg.beta);

    let (t_pos, t_flash_vals, t_noflash_vals) = if trans.is_empty() {
        let msg = format!("no transmitted points; seeding T and beta with {fallback} random points");
        log::warn!("{msg}");
        warnings.push(msg);
        let pos = random_points(&mut rng, &lo, &hi, fallback);
        let cols = random_colors(&mut rng, fallback, 3);
        (pos, cols.clone(), cols)
    } else {
        (
            trans.iter().map(|p| p.position).collect(),
            trans.iter().map(|p| g(&p.flash_color.unwrap_or(p.color))).collect(),
            trans.iter().map(|p| g(&p.color)).collect(),
        )
    };
    let (r_pos, r_vals) = if refl.is_empty() {
        let msg = format!("no reflected points; seeding R with {fallback} random points");
        log::warn!("{msg}");
        warnings.push(msg);
        let pos = random_points(&mut rng, &lo, &hi, fallback);
        (pos, random_colors(&mut rng, fallback, 3))
    } else {
        (refl.iter().map(|p| p.position).collect(), refl.iter().map(|p| g(&p.color)).collect())
    };
    let beta_vals = vec![vec![beta_value]; t_pos.len()];

    let t_flash = match mode {
        TransmissionMode::Paired => Some(seed_cloud(&t_pos, &t_flash_vals, 3, cfg)),
        _ => None,
    };
    let scene = SceneModel {
        t_flash,
        t_noflash: seed_cloud(&t_pos, &t_noflash_vals, 3, cfg),
        reflection: seed_cloud(&r_pos, &r_vals, 3, cfg),
        beta: seed_cloud(&t_pos, &beta_vals, 1, cfg),
        tone,
        mode,
    };
    scene.validate()?;
    Ok(InitOutcome { scene, warnings })
}

/// Seed every cloud at the same unlabeled points (no flash cue available).
pub fn init_unlabeled(points: &SfMPoints, mode: TransmissionMode, tone: ToneCurve, cfg: &InitConfig) -> Result<InitOutcome> {
    points.validate()?;
    let labels = LabeledPoints {
        points: points
            .positions
            .iter()
            .zip(&points.colors)
            .map(|(p, c)| LabeledPoint {
                position: *p,
                color: *c,
                flash_color: Some(*c),
                label: PointLabel::Transmitted,
                truth: None,
            })
            .collect(),
    };
    let mut out = init_scene(&labels, mode, tone, cfg)?;
    out.warnings.clear();
    let sub = subsample(&labels.points, cfg.max_points);
    let pos: Vec<_> = sub.iter().map(|p| p.position).collect();
    let vals: Vec<_> = sub.iter().map(|p| p.color.iter().map(|&v| tone.forward(v)).collect()).collect();
    out.scene.reflection = seed_cloud(&pos, &vals, 3, cfg);
    Ok(out)
}

/// Random seeding of every cloud inside the given box.
pub fn init_random(
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    count: usize,
    mode: TransmissionMode,
    tone: ToneCurve,
    cfg: &InitConfig,
) -> Result<InitOutcome> {
    if count == 0 || (0..3).any(|k| !(hi[k] >= lo[k])) {
        return Err(Error::Config("random init needs a non-empty box and count > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cloud = |channels: usize, value: Option<f64>| {
        let pos = random_points(&mut rng, lo, hi, count);
        let vals = match value {
            Some(v) => vec![vec![v; channels]; count],
            None => random_colors(&mut rng, count, channels),
        };
        seed_cloud(&pos, &vals, channels, cfg)
    };
    let beta_value = cfg.beta / (1.0 - cfg.beta);
    let t_flash = (mode == TransmissionMode::Paired).then(|| cloud(3, None));
    let t_noflash = cloud(3, None);
    let reflection = cloud(3, None);
    let beta = cloud(1, Some(beta_value));
    let scene = SceneModel {
        t_flash,
        t_noflash,
        reflection,
        beta,
        tone,
        mode,
    };
    scene.validate()?;
    Ok(InitOutcome { scene, warnings: Vec::new() })
}
