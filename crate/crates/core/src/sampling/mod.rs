//! Pose and focal length distributions for synthetic training data.
//!
//! Three families are available: a parametric one (Bingham rotations and two
//! 2D Gaussians over `(x, y)` and `(ln z, ln f)`), a uniform one, and a
//! nonparametric one that perturbs real annotations. [`sample_refiner_noise`]
//! perturbs a ground truth the way a refinement input is perturbed in training.

mod bingham;

pub use bingham::{
    fit_bingham, log_normalizer, sample_bingham, scatter_matrix, BinghamParams, BinghamSampler,
    MIN_CONCENTRATION, MIN_FIT_SAMPLES,
};

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, BBox, ParamState, Rotation};
use crate::SimRng;

/// Retry cap for draws that must land at positive depth and focal.
pub const MAX_RESAMPLE: usize = 100;

/// Haar-uniform rotation by the subgroup algorithm.
pub fn uniform_rotation(rng: &mut SimRng) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    Rotation::from_wxyz([b * c3, a * s2, a * c2, b * s3]).expect("unit quaternion")
}

fn unit_vector(rng: &mut SimRng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// One annotated training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationRepr", into = "AnnotationRepr")]
pub struct AnnotationRecord {
    pub state: ParamState,
    /// Image width and height in pixels.
    pub image_size: [f64; 2],
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRepr {
    quat_wxyz: [f64; 4],
    t_m: [f64; 3],
    f_px: f64,
    img_wh: [f64; 2],
    bbox: BBox,
}

impl TryFrom<AnnotationRepr> for AnnotationRecord {
    type Error = Error;

    fn try_from(r: AnnotationRepr) -> Result<Self> {
        let state = ParamState::new(Rotation::from_wxyz(r.quat_wxyz)?, r.t_m.into(), r.f_px)?;
        if !(r.img_wh[0] > 0.0 && r.img_wh[1] > 0.0) {
            return Err(Error::Invalid(format!("image size {:?} is not positive", r.img_wh)));
        }
        Ok(Self {
            state,
            image_size: r.img_wh,
            bbox: r.bbox,
        })
    }
}

impl From<AnnotationRecord> for AnnotationRepr {
    fn from(a: AnnotationRecord) -> Self {
        AnnotationRepr {
            quat_wxyz: a.state.rotation.wxyz(),
            t_m: a.state.translation.into(),
            f_px: a.state.focal,
            img_wh: a.image_size,
            bbox: a.bbox,
        }
    }
}

/// Bivariate normal with a positive-definite covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian2DParams {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    chol: Matrix2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRepr {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl TryFrom<GaussianRepr> for Gaussian2DParams {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        Gaussian2DParams::new(
            r.mean.into(),
            Matrix2::new(r.cov[0][0], r.cov[0][1], r.cov[1][0], r.cov[1][1]),
        )
    }
}

impl From<Gaussian2DParams> for GaussianRepr {
    fn from(g: Gaussian2DParams) -> Self {
        GaussianRepr {
            mean: g.mean.into(),
            cov: [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]],
        }
    }
}

impl Gaussian2DParams {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::DegenerateFit("covariance is not symmetric".into()));
        }
        let scale = cov[(0, 0)].abs() * cov[(1, 1)].abs();
        if !(cov.determinant() > 1e-12 * scale) {
            return Err(Error::DegenerateFit("covariance is singular".into()));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::DegenerateFit("covariance is not positive definite".into()))?
            .l();
        Ok(Self { mean, cov, chol })
    }

    pub fn sample(&self, rng: &mut SimRng) -> Vector2<f64> {
        let g = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        self.mean + self.chol * g
    }

    /// Sample mean and unbiased covariance of at least three points.
    pub fn fit(points: &[Vector2<f64>]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InsufficientData {
                needed: 3,
                got: points.len(),
            });
        }
        let n = points.len() as f64;
        let mean = points.iter().sum::<Vector2<f64>>() / n;
        let cov = points
            .iter()
            .map(|p| (p - mean) * (p - mean).transpose())
            .sum::<Matrix2<f64>>()
            / (n - 1.0);
        Self::new(mean, cov)
    }
}

/// Fitted parametric distribution: rotations, `(x, y)` and `(ln z, ln f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricDistribution {
    pub bingham: BinghamParams,
    pub xy: Gaussian2DParams,
    pub log_zf: Gaussian2DParams,
}

/// Gaussian fits over `(x, y)` and `(ln z, ln f)`.
pub fn fit_translation_focal(
    records: &[AnnotationRecord],
) -> Result<(Gaussian2DParams, Gaussian2DParams)> {
    let xy: Vec<Vector2<f64>> = records
        .iter()
        .map(|r| Vector2::new(r.state.translation.x, r.state.translation.y))
        .collect();
    let zf: Vec<Vector2<f64>> = records
        .iter()
        .map(|r| Vector2::new(r.state.translation.z.ln(), r.state.focal.ln()))
        .collect();
    Ok((Gaussian2DParams::fit(&xy)?, Gaussian2DParams::fit(&zf)?))
}

pub fn fit_parametric(records: &[AnnotationRecord]) -> Result<ParametricDistribution> {
    let (xy, log_zf) = fit_translation_focal(records)?;
    let rotations: Vec<Rotation> = records.iter().map(|r| r.state.rotation).collect();
    Ok(ParametricDistribution {
        bingham: fit_bingham(&rotations)?,
        xy,
        log_zf,
    })
}

pub fn sample_pose_parametric(
    bingham: &BinghamParams,
    xy: &Gaussian2DParams,
    log_zf: &Gaussian2DParams,
    n: usize,
    seed: u64,
) -> Vec<ParamState> {
    let mut rng = crate::rng_for(seed, 0);
    let sampler = BinghamSampler::new(bingham);
    (0..n)
        .map(|_| parametric_draw(&sampler, xy, log_zf, &mut rng))
        .collect()
}

fn parametric_draw(
    sampler: &BinghamSampler,
    xy: &Gaussian2DParams,
    log_zf: &Gaussian2DParams,
    rng: &mut SimRng,
) -> ParamState {
    let rotation = sampler.sample(rng);
    let p = xy.sample(rng);
    let zf = log_zf.sample(rng);
    ParamState {
        rotation,
        translation: Vector3::new(p.x, p.y, zf.x.exp()),
        focal: zf.y.exp(),
    }
}

/// Ranges of the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformConfig {
    /// Side of the `(x, y)` box centered on the optical axis, meters.
    pub xy_box_m: f64,
    pub z_range_m: (f64, f64),
    pub f_range_px: (f64, f64),
}

impl UniformConfig {
    pub fn pix3d() -> Self {
        Self {
            xy_box_m: 0.15,
            z_range_m: (0.8, 2.4),
            f_range_px: (200.0, 1000.0),
        }
    }

    pub fn cars() -> Self {
        Self {
            z_range_m: (0.8, 3.0),
            ..Self::pix3d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (z0, z1) = self.z_range_m;
        let (f0, f1) = self.f_range_px;
        if !(self.xy_box_m >= 0.0 && 0.0 < z0 && z0 < z1 && 0.0 < f0 && f0 < f1) {
            return Err(Error::Invalid(format!("invalid uniform ranges {self:?}")));
        }
        Ok(())
    }
}

impl Default for UniformConfig {
    fn default() -> Self {
        Self::pix3d()
    }
}

/// Uniform draw from the open interval `(lo, hi)`.
fn open_uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

pub fn sample_pose_uniform(config: &UniformConfig, n: usize, seed: u64) -> Result<Vec<ParamState>> {
    config.validate()?;
    let mut rng = crate::rng_for(seed, 0);
    Ok((0..n).map(|_| uniform_draw(config, &mut rng)).collect())
}

fn uniform_draw(config: &UniformConfig, rng: &mut SimRng) -> ParamState {
    let rotation = uniform_rotation(rng);
    let half = 0.5 * config.xy_box_m;
    let x = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let y = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let z = open_uniform(rng, config.z_range_m.0, config.z_range_m.1);
    let focal = open_uniform(rng, config.f_range_px.0, config.f_range_px.1);
    ParamState {
        rotation,
        translation: Vector3::new(x, y, z),
        focal,
    }
}

/// Perturbation bounds of the nonparametric distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonparamDeltas {
    pub rot_rad: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub f_px: f64,
}

impl NonparamDeltas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rot_rad", self.rot_rad),
            ("x_m", self.x_m),
            ("y_m", self.y_m),
            ("z_m", self.z_m),
            ("f_px", self.f_px),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("delta {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-axis offsets to each point's nearest neighbor in the 2D space.
///
/// Ties on distance are broken by the offsets themselves so the result does
/// not depend on record order.
fn nearest_neighbor_offsets(points: &[Vector2<f64>]) -> Vec<(f64, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Option<(f64, f64, f64)> = None;
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = p - q;
                let cand = (d.norm(), d.x.abs(), d.y.abs());
                let better = match best {
                    None => true,
                    Some(b) => {
                        cand.0
                            .total_cmp(&b.0)
                            .then(cand.1.total_cmp(&b.1))
                            .then(cand.2.total_cmp(&b.2))
                            .is_lt()
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
            let (_, dx, dy) = best.expect("at least two records");
            (dx, dy)
        })
        .collect()
}

/// Nonparametric perturbation bounds from 95th percentiles of
/// nearest-neighbor offsets in `(z, f)`, `(x, y)` and rotation angle.
pub fn select_deltas_95pct(records: &[AnnotationRecord]) -> Result<NonparamDeltas> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: records.len(),
        });
    }
    let zf: Vec<_> = records
        .iter()
        .map(|r| Vector2::new(r.state.translation.z, r.state.focal))
        .collect();
    let xy: Vec<_> = records
        .iter()
        .map(|r| Vector2::new(r.state.translation.x, r.state.translation.y))
        .collect();
    let zf_nn = nearest_neighbor_offsets(&zf);
    let xy_nn = nearest_neighbor_offsets(&xy);
    let rot_nn: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, a)| {
            records
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| geodesic_distance(&a.state.rotation, &b.state.rotation))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let pick = |v: Vec<f64>| percentile(&v, 95.0);
    Ok(NonparamDeltas {
        rot_rad: pick(rot_nn),
        x_m: pick(xy_nn.iter().map(|o| o.0).collect()),
        y_m: pick(xy_nn.iter().map(|o| o.1).collect()),
        z_m: pick(zf_nn.iter().map(|o| o.0).collect()),
        f_px: pick(zf_nn.iter().map(|o| o.1).collect()),
    })
}

/// Uniform point inside the axis-aligned ellipse with the given semi-axes.
pub fn sample_in_ellipse(rng: &mut SimRng, a: f64, b: f64) -> Vector2<f64> {
    loop {
        let u = rng.random_range(-1.0..=1.0f64);
        let v = rng.random_range(-1.0..=1.0f64);
        if u * u + v * v <= 1.0 {
            return Vector2::new(a * u, b * v);
        }
    }
}

/// Perturbation applied to one picked record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonparamDraw {
    pub record_index: usize,
    pub rotation_angle: f64,
    pub xy_offset: Vector2<f64>,
    pub zf_offset: Vector2<f64>,
    pub state: ParamState,
}

fn nonparametric_draw(
    records: &[AnnotationRecord],
    deltas: &NonparamDeltas,
    rng: &mut SimRng,
) -> Result<NonparamDraw> {
    for _ in 0..MAX_RESAMPLE {
        let record_index = rng.random_range(0..records.len());
        let base = &records[record_index].state;
        let axis = unit_vector(rng);
        let rotation_angle = rng.random::<f64>() * deltas.rot_rad;
        let zf_offset = sample_in_ellipse(rng, deltas.z_m, deltas.f_px);
        let xy_offset = sample_in_ellipse(rng, deltas.x_m, deltas.y_m);
        let z = base.translation.z + zf_offset.x;
        let focal = base.focal + zf_offset.y;
        if !(z > 0.0 && focal > 0.0) {
            continue;
        }
        let state = ParamState {
            rotation: Rotation::from_scaled_axis(axis * rotation_angle) * base.rotation,
            translation: Vector3::new(
                base.translation.x + xy_offset.x,
                base.translation.y + xy_offset.y,
                z,
            ),
            focal,
        };
        return Ok(NonparamDraw {
            record_index,
            rotation_angle,
            xy_offset,
            zf_offset,
            state,
        });
    }
    Err(Error::RetriesExhausted(MAX_RESAMPLE))
}

/// Draws with the perturbations that produced them.
pub fn sample_nonparametric_draws(
    records: &[AnnotationRecord],
    deltas: &NonparamDeltas,
    n: usize,
    seed: u64,
) -> Result<Vec<NonparamDraw>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no annotation records"));
    }
    deltas.validate()?;
    let mut rng = crate::rng_for(seed, 0);
    (0..n)
        .map(|_| nonparametric_draw(records, deltas, &mut rng))
        .collect()
}

pub fn sample_pose_nonparametric(
    records: &[AnnotationRecord],
    deltas: &NonparamDeltas,
    n: usize,
    seed: u64,
) -> Result<Vec<ParamState>> {
    Ok(sample_nonparametric_draws(records, deltas, n, seed)?
        .into_iter()
        .map(|d| d.state)
        .collect())
}

/// How the noise magnitudes of [`RefinerNoise`] are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReading {
    /// `focal_rel * f` and `euler_deg` are standard deviations.
    #[default]
    StdDev,
    /// `focal_rel * f` (px^2) and `euler_deg` (deg^2) are variances.
    Variance,
}

/// Input noise of the refinement stage around a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerNoise {
    pub focal_rel: f64,
    pub xy_m: f64,
    pub z_m: f64,
    pub euler_deg: f64,
    #[serde(default)]
    pub reading: NoiseReading,
}

impl Default for RefinerNoise {
    fn default() -> Self {
        Self {
            focal_rel: 0.15,
            xy_m: 0.01,
            z_m: 0.05,
            euler_deg: 15.0,
            reading: NoiseReading::StdDev,
        }
    }
}

impl RefinerNoise {
    pub fn zero() -> Self {
        Self {
            focal_rel: 0.0,
            xy_m: 0.0,
            z_m: 0.0,
            euler_deg: 0.0,
            reading: NoiseReading::StdDev,
        }
    }

    /// Standard deviation of the sampled focal length around `focal`.
    pub fn focal_sigma(&self, focal: f64) -> f64 {
        match self.reading {
            NoiseReading::StdDev => self.focal_rel * focal,
            NoiseReading::Variance => (self.focal_rel * focal).sqrt(),
        }
    }

    /// Standard deviation of each Euler angle, radians.
    pub fn euler_sigma(&self) -> f64 {
        match self.reading {
            NoiseReading::StdDev => self.euler_deg.to_radians(),
            NoiseReading::Variance => self.euler_deg.sqrt().to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("focal_rel", self.focal_rel),
            ("xy_m", self.xy_m),
            ("z_m", self.z_m),
            ("euler_deg", self.euler_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("noise {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut SimRng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    Normal::new(mean, sigma).expect("finite sigma").sample(rng)
}

/// Perturbs a ground truth: Gaussian focal and translation noise and three
/// Gaussian Euler angles composed on the left of the rotation. Draws with
/// non-positive focal or depth are repeated.
pub fn sample_refiner_noise(
    gt: &ParamState,
    noise: &RefinerNoise,
    rng: &mut SimRng,
) -> Result<ParamState> {
    noise.validate()?;
    let sigma_f = noise.focal_sigma(gt.focal);
    let sigma_e = noise.euler_sigma();
    for _ in 0..MAX_RESAMPLE {
        let focal = gaussian(rng, gt.focal, sigma_f);
        let x = gaussian(rng, gt.translation.x, noise.xy_m);
        let y = gaussian(rng, gt.translation.y, noise.xy_m);
        let z = gaussian(rng, gt.translation.z, noise.z_m);
        let roll = gaussian(rng, 0.0, sigma_e);
        let pitch = gaussian(rng, 0.0, sigma_e);
        let yaw = gaussian(rng, 0.0, sigma_e);
        if !(focal > 0.0 && z > 0.0) {
            continue;
        }
        let euler = nalgebra::UnitQuaternion::from_euler_angles(roll, pitch, yaw);
        return Ok(ParamState {
            rotation: Rotation::from_unit_quaternion(euler) * gt.rotation,
            translation: Vector3::new(x, y, z),
            focal,
        });
    }
    Err(Error::RetriesExhausted(MAX_RESAMPLE))
}

/// A fitted or configured distribution, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseDistribution {
    Parametric(Box<ParametricDistribution>),
    Nonparametric {
        deltas: NonparamDeltas,
        records: Vec<AnnotationRecord>,
    },
    Uniform(UniformConfig),
}

impl PoseDistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<ParamState>> {
        match self {
            PoseDistribution::Parametric(p) => {
                Ok(sample_pose_parametric(&p.bingham, &p.xy, &p.log_zf, n, seed))
            }
            PoseDistribution::Nonparametric { deltas, records } => {
                sample_pose_nonparametric(records, deltas, n, seed)
            }
            PoseDistribution::Uniform(c) => sample_pose_uniform(c, n, seed),
        }
    }
}
