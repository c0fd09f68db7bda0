//! Closed-loop refinement with a stand-in for the learned predictor.
//!
//! A [`Predictor`] sees the current estimate and the target and returns an
//! update. The built-in predictors are the exact oracle, a noisy oracle, and
//! clamped versions of both that limit each step in pixels, log-depth, angle
//! and log-focal.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CameraIntrinsics, ModelPoints, ParamState, Rotation};
use crate::metrics::{self, EvalPair, MetricRecord, Summary, Thresholds};
use crate::sampling::{sample_refiner_noise, PoseDistribution, RefinerNoise, UniformConfig};
use crate::update::{apply_update_with, init_state, oracle_delta, DeltaTheta, UpdateRule};
use crate::{rng_for, SimRng};

/// Smallest depth ratio the loop will apply.
pub const MIN_DEPTH_RATIO: f64 = 1e-6;

const PREDICTOR_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const TARGET_SALT: u64 = 0xd1b5_4a32_d192_ed03;

/// Stand-in for the network: maps `(current, target, iteration)` to an update.
pub trait Predictor: Sync {
    fn predict(
        &self,
        current: &ParamState,
        target: &ParamState,
        iteration: usize,
        rng: &mut SimRng,
    ) -> DeltaTheta;
}

impl<F> Predictor for F
where
    F: Fn(&ParamState, &ParamState, usize, &mut SimRng) -> DeltaTheta + Sync,
{
    fn predict(&self, c: &ParamState, t: &ParamState, k: usize, rng: &mut SimRng) -> DeltaTheta {
        self(c, t, k, rng)
    }
}

/// Standard deviations of the noisy oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleNoise {
    pub x_px: f64,
    pub y_px: f64,
    pub z_log: f64,
    pub rot_deg: f64,
    pub f_log: f64,
}

impl Default for OracleNoise {
    /// One centimeter at 600 px and 1 m, 5% depth, 15 degrees, 15% focal.
    fn default() -> Self {
        Self {
            x_px: 6.0,
            y_px: 6.0,
            z_log: 0.05,
            rot_deg: 15.0,
            f_log: 0.15,
        }
    }
}

impl OracleNoise {
    pub fn zero() -> Self {
        Self {
            x_px: 0.0,
            y_px: 0.0,
            z_log: 0.0,
            rot_deg: 0.0,
            f_log: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("noise x_px", self.x_px),
            ("noise y_px", self.y_px),
            ("noise z_log", self.z_log),
            ("noise rot_deg", self.rot_deg),
            ("noise f_log", self.f_log),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(what, v));
            }
        }
        Ok(())
    }
}

/// How [`StepClamp`] limits a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Shrink the whole step by one factor until every component is within
    /// its bound, so all parameters advance the same fraction of the way.
    #[default]
    Joint,
    /// Clip each component on its own.
    Independent,
}

/// Per-step limits of the clamped oracle, each in the natural space of its
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepClamp {
    /// Norm of `(v_x, v_y)`.
    pub pixel: f64,
    /// `|ln v_z|`.
    pub log_depth: f64,
    pub rot_deg: f64,
    /// `|v_f|`.
    pub log_focal: f64,
    #[serde(default)]
    pub mode: ClampMode,
}

impl Default for StepClamp {
    fn default() -> Self {
        Self {
            pixel: 20.0,
            log_depth: 0.1,
            rot_deg: 5.0,
            log_focal: 0.05,
            mode: ClampMode::Joint,
        }
    }
}

impl StepClamp {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("clamp pixel", self.pixel),
            ("clamp log_depth", self.log_depth),
            ("clamp rot_deg", self.rot_deg),
            ("clamp log_focal", self.log_focal),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(what, v));
            }
        }
        Ok(())
    }

    /// Fraction of the step that is kept under [`ClampMode::Joint`].
    pub fn joint_factor(&self, d: &DeltaTheta) -> f64 {
        let angle = d.rotation().map_or(0.0, |r| r.angle());
        [
            (d.v_x.hypot(d.v_y), self.pixel),
            (d.v_z.ln().abs(), self.log_depth),
            (angle, self.rot_deg.to_radians()),
            (d.v_f.abs(), self.log_focal),
        ]
        .iter()
        .map(|&(size, bound)| if size > bound { bound / size } else { 1.0 })
        .fold(1.0, f64::min)
    }

    pub fn apply(&self, d: &DeltaTheta) -> DeltaTheta {
        match self.mode {
            ClampMode::Joint => scale_step(d, self.joint_factor(d)),
            ClampMode::Independent => self.clip(d),
        }
    }

    fn clip(&self, d: &DeltaTheta) -> DeltaTheta {
        let mut out = *d;
        let n = d.v_x.hypot(d.v_y);
        if n > self.pixel {
            out.v_x *= self.pixel / n;
            out.v_y *= self.pixel / n;
        }
        out.v_z = d.v_z.ln().clamp(-self.log_depth, self.log_depth).exp();
        out.v_f = d.v_f.clamp(-self.log_focal, self.log_focal);
        if let Ok(r) = d.rotation() {
            let max = self.rot_deg.to_radians();
            if r.angle() > max {
                let axis = r.scaled_axis().normalize();
                set_rotation(&mut out, &Rotation::from_scaled_axis(axis * max));
            }
        }
        out
    }
}

/// The fraction `s` of a step: pixels, log depth, rotation angle and log
/// focal all scaled by `s`.
pub fn scale_step(d: &DeltaTheta, s: f64) -> DeltaTheta {
    if s >= 1.0 {
        return *d;
    }
    let mut out = *d;
    out.v_x *= s;
    out.v_y *= s;
    out.v_z = d.v_z.powf(s);
    out.v_f *= s;
    if let Ok(r) = d.rotation() {
        set_rotation(&mut out, &Rotation::from_scaled_axis(r.scaled_axis() * s));
    }
    out
}

fn set_rotation(d: &mut DeltaTheta, r: &Rotation) {
    let m: Matrix3<f64> = r.matrix();
    d.v_r1 = m.column(0).into_owned();
    d.v_r2 = m.column(1).into_owned();
}

fn gaussian(rng: &mut SimRng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

fn random_axis(rng: &mut SimRng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-12 {
            return v.normalize();
        }
    }
}

/// Adds independent noise to `d`: Gaussian on the pixel shift, log depth and
/// log focal, and a random-axis rotation with Gaussian angle composed on the
/// left of the encoded rotation.
pub fn perturb_delta(d: &DeltaTheta, noise: &OracleNoise, rng: &mut SimRng) -> DeltaTheta {
    let mut out = *d;
    out.v_x += gaussian(rng, noise.x_px);
    out.v_y += gaussian(rng, noise.y_px);
    out.v_z *= gaussian(rng, noise.z_log).exp();
    out.v_f += gaussian(rng, noise.f_log);
    let axis = random_axis(rng);
    let angle = gaussian(rng, noise.rot_deg.to_radians());
    if angle != 0.0 {
        if let Ok(r) = d.rotation() {
            set_rotation(&mut out, &(Rotation::from_scaled_axis(axis * angle) * r));
        }
    }
    out
}

/// The oracle with independent noise per component.
pub fn make_noisy_oracle(noise: OracleNoise) -> impl Predictor {
    move |c: &ParamState, t: &ParamState, _k: usize, rng: &mut SimRng| {
        perturb_delta(&oracle_delta(c, t), &noise, rng)
    }
}

/// Built-in predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorConfig {
    Oracle,
    Noisy { noise: OracleNoise },
    Clamped { clamp: StepClamp },
    /// Noise first, then the clamp.
    ClampedNoisy { noise: OracleNoise, clamp: StepClamp },
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            PredictorConfig::Oracle => Ok(()),
            PredictorConfig::Noisy { noise } => noise.validate(),
            PredictorConfig::Clamped { clamp } => clamp.validate(),
            PredictorConfig::ClampedNoisy { noise, clamp } => {
                noise.validate()?;
                clamp.validate()
            }
        }
    }
}

impl Predictor for PredictorConfig {
    fn predict(&self, c: &ParamState, t: &ParamState, _k: usize, rng: &mut SimRng) -> DeltaTheta {
        let oracle = oracle_delta(c, t);
        match self {
            PredictorConfig::Oracle => oracle,
            PredictorConfig::Noisy { noise } => perturb_delta(&oracle, noise, rng),
            PredictorConfig::Clamped { clamp } => clamp.apply(&oracle),
            PredictorConfig::ClampedNoisy { noise, clamp } => {
                clamp.apply(&perturb_delta(&oracle, noise, rng))
            }
        }
    }
}

/// Where the first estimate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSource {
    /// Identity rotation at unit depth behind the target's projected box
    /// center, with focal `f0_px`.
    Detection { f0_px: f64 },
    /// Ground truth perturbed by the refiner's input noise.
    RefinerNoise { noise: RefinerNoise },
}

impl Default for InitSource {
    fn default() -> Self {
        InitSource::Detection {
            f0_px: crate::update::INITIAL_FOCAL_PX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rot_rad: f64,
    pub trans: f64,
    pub focal: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rot_rad: 1e-6,
            trans: 1e-6,
            focal: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub iterations: usize,
    #[serde(default = "default_rule")]
    pub rule: UpdateRule,
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub init: InitSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_image_wh")]
    pub image_wh: [f64; 2],
}

fn default_rule() -> UpdateRule {
    UpdateRule::Exact
}

fn default_image_wh() -> [f64; 2] {
    [640.0, 480.0]
}

impl TrialConfig {
    pub fn new(iterations: usize, rule: UpdateRule, predictor: PredictorConfig) -> Self {
        Self {
            iterations,
            rule,
            predictor,
            init: InitSource::default(),
            seed: 0,
            tolerances: Tolerances::default(),
            image_wh: default_image_wh(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Invalid("iterations must be at least 1".into()));
        }
        if !(self.image_wh[0] > 0.0 && self.image_wh[1] > 0.0) {
            return Err(Error::Invalid(format!("image size {:?}", self.image_wh)));
        }
        if let InitSource::Detection { f0_px } = self.init {
            if !(f0_px > 0.0 && f0_px.is_finite()) {
                return Err(Error::invalid("initial focal", f0_px));
            }
        }
        self.predictor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Metrics of the initial state and after every step.
    pub trajectory: Vec<MetricRecord>,
    pub states: Vec<ParamState>,
    pub deltas: Vec<DeltaTheta>,
    pub final_state: ParamState,
    pub converged: bool,
}

fn record_for(
    state: &ParamState,
    target: &ParamState,
    gt_bbox: &BBox,
    points: &ModelPoints,
    image_diagonal: f64,
) -> Result<MetricRecord> {
    let pair = EvalPair {
        pred: *state,
        gt: *target,
        points: points.clone(),
        gt_bbox: *gt_bbox,
        image_diagonal,
        pred_bbox: state.projected_bbox(points).ok(),
    };
    metrics::evaluate_pair(&pair)
}

/// Starting estimate for `target` according to `init`.
pub fn initial_state(
    init: &InitSource,
    target: &ParamState,
    gt_bbox: &BBox,
    rng: &mut SimRng,
) -> Result<ParamState> {
    match init {
        InitSource::Detection { f0_px } => Ok(init_state(gt_bbox, &CameraIntrinsics::centered(*f0_px)?)),
        InitSource::RefinerNoise { noise } => sample_refiner_noise(target, noise, rng),
    }
}

/// Runs one trial with an arbitrary predictor. `init_rng` drives the
/// initialization and `pred_rng` the predictor, so two trials sharing both
/// streams differ only in what the configuration changes.
pub fn run_refinement_with<P: Predictor + ?Sized>(
    config: &TrialConfig,
    predictor: &P,
    target: &ParamState,
    points: &ModelPoints,
    init_rng: &mut SimRng,
    pred_rng: &mut SimRng,
) -> Result<TrialResult> {
    config.validate()?;
    target.validate()?;
    let gt_bbox = target.projected_bbox(points)?;
    let diag = config.image_wh[0].hypot(config.image_wh[1]);
    let mut state = initial_state(&config.init, target, &gt_bbox, init_rng)?;
    let mut states = vec![state];
    let mut deltas = Vec::with_capacity(config.iterations);
    let mut trajectory = vec![record_for(&state, target, &gt_bbox, points, diag)?];
    for k in 1..=config.iterations {
        let mut delta = predictor.predict(&state, target, k, pred_rng);
        if delta.v_z.is_finite() {
            delta.v_z = delta.v_z.max(MIN_DEPTH_RATIO);
        }
        let invalid = |e: Error| Error::InvalidPrediction {
            iteration: k,
            source: Box::new(e),
        };
        delta.validate().map_err(invalid)?;
        state = apply_update_with(config.rule, &state, &delta).map_err(invalid)?;
        states.push(state);
        deltas.push(delta);
        trajectory.push(record_for(&state, target, &gt_bbox, points, diag)?);
    }
    let last = trajectory.last().expect("non-empty");
    let tol = &config.tolerances;
    Ok(TrialResult {
        converged: last.e_r <= tol.rot_rad && last.e_t <= tol.trans && last.e_f <= tol.focal,
        trajectory,
        states,
        deltas,
        final_state: state,
    })
}

/// Runs one trial with the configured predictor and seed.
pub fn run_refinement(
    config: &TrialConfig,
    target: &ParamState,
    points: &ModelPoints,
) -> Result<TrialResult> {
    let mut init_rng = rng_for(config.seed, 0);
    let mut pred_rng = rng_for(config.seed ^ PREDICTOR_SALT, 0);
    run_refinement_with(config, &config.predictor, target, points, &mut init_rng, &mut pred_rng)
}

/// Synthetic model used when an experiment does not name one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxModel {
    pub size_m: [f64; 3],
    pub n_points: usize,
}

impl Default for BoxModel {
    fn default() -> Self {
        Self {
            size_m: [0.4, 0.3, 0.2],
            n_points: 500,
        }
    }
}

/// A paired campaign: every trial runs once per rule with the same target,
/// initialization and predictor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "default_rules")]
    pub rules: Vec<UpdateRule>,
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub init: InitSource,
    #[serde(default = "default_targets")]
    pub targets: PoseDistribution,
    #[serde(default)]
    pub model: BoxModel,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_image_wh")]
    pub image_wh: [f64; 2],
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Keep every trial's trajectory in the report.
    #[serde(default)]
    pub keep_trials: bool,
}

fn default_rules() -> Vec<UpdateRule> {
    vec![UpdateRule::Exact, UpdateRule::Legacy]
}

fn default_targets() -> PoseDistribution {
    PoseDistribution::Uniform(UniformConfig::pix3d())
}

impl ExperimentConfig {
    pub fn trial_config(&self, rule: UpdateRule) -> TrialConfig {
        TrialConfig {
            iterations: self.iterations,
            rule,
            predictor: self.predictor,
            init: self.init,
            seed: self.seed,
            tolerances: self.tolerances,
            image_wh: self.image_wh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMedians {
    pub iteration: usize,
    pub e_r: f64,
    pub e_t: f64,
    pub e_rt: f64,
    pub e_f: f64,
    pub e_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub rule: UpdateRule,
    pub final_summary: Summary,
    pub converged_fraction: f64,
    pub per_iteration: Vec<IterationMedians>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<Vec<TrialResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: ExperimentConfig,
    pub arms: Vec<ArmReport>,
}

impl CampaignReport {
    pub fn arm(&self, rule: UpdateRule) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.rule == rule)
    }

    /// Per-iteration medians of every arm as CSV.
    pub fn medians_csv(&self) -> String {
        let mut out = String::from("rule,iteration,median_e_r,median_e_t,median_e_rt,median_e_f,median_e_p\n");
        for arm in &self.arms {
            for m in &arm.per_iteration {
                let e_p = m.e_p.map_or("inf".to_string(), |v| v.to_string());
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    arm.rule.name(),
                    m.iteration,
                    m.e_r,
                    m.e_t,
                    m.e_rt,
                    m.e_f,
                    e_p
                )
                .unwrap();
            }
        }
        out
    }
}

fn arm_report(
    rule: UpdateRule,
    trials: Vec<TrialResult>,
    config: &ExperimentConfig,
) -> Result<ArmReport> {
    let finals: Vec<MetricRecord> = trials.iter().map(|t| *t.trajectory.last().unwrap()).collect();
    let per_iteration = (0..=config.iterations)
        .map(|k| {
            let recs: Vec<MetricRecord> = trials.iter().map(|t| t.trajectory[k]).collect();
            let s = metrics::aggregate(&recs, &config.thresholds)?;
            Ok(IterationMedians {
                iteration: k,
                e_r: s.median_e_r,
                e_t: s.median_e_t,
                e_rt: s.median_e_rt,
                e_f: s.median_e_f,
                e_p: s.median_e_p,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ArmReport {
        rule,
        final_summary: metrics::aggregate(&finals, &config.thresholds)?,
        converged_fraction: trials.iter().filter(|t| t.converged).count() as f64
            / trials.len() as f64,
        per_iteration,
        trials: config.keep_trials.then_some(trials),
    })
}

/// Runs the paired campaign on the current rayon pool. Results are gathered
/// in trial order, so the report does not depend on the number of workers.
pub fn run_experiment(config: &ExperimentConfig) -> Result<CampaignReport> {
    if config.n_trials < 1 {
        return Err(Error::Invalid("n_trials must be at least 1".into()));
    }
    if config.rules.is_empty() {
        return Err(Error::EmptyInput("no update rules"));
    }
    let b = config.model;
    let points = ModelPoints::box_surface(Vector3::from(b.size_m), b.n_points, config.seed)?;
    let targets = config.targets.sample(config.n_trials, config.seed ^ TARGET_SALT)?;
    let mut arms = Vec::with_capacity(config.rules.len());
    for &rule in &config.rules {
        let trial = config.trial_config(rule);
        let trials: Vec<TrialResult> = targets
            .par_iter()
            .enumerate()
            .map(|(i, target)| {
                let mut init_rng = rng_for(config.seed, i as u64);
                let mut pred_rng = rng_for(config.seed ^ PREDICTOR_SALT, i as u64);
                run_refinement_with(&trial, &trial.predictor, target, &points, &mut init_rng, &mut pred_rng)
            })
            .collect::<Result<_>>()?;
        arms.push(arm_report(rule, trials, config)?);
    }
    Ok(CampaignReport {
        config: config.clone(),
        arms,
    })
}
