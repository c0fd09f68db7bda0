//! Training losses for one refinement step, with analytic gradients with
//! respect to the ten prediction components.
//!
//! The full loss is `pose + alpha * (beta * huber + reprojection)`:
//!
//! - `pose` sums three point-matching distances, each reached by applying the
//!   update with one predicted group (center shift, depth, rotation) and the
//!   exact oracle values for everything else, including the focal update.
//! - `huber` penalizes `ln f - ln f_gt`.
//! - `reprojection` is the disentangled reprojection loss: half the pixel error
//!   of the predicted pose seen at the true focal, plus half the pixel error of
//!   the predicted focal seen at the true pose.
//!
//! L1 subgradients are taken as zero at zero. Reprojection sums are not
//! normalized by the point count; point-matching distances are averaged.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gram_schmidt, gram_schmidt_backward, ModelPoints, ParamState, Rotation};
use crate::sampling::uniform_rotation;
use crate::update::{apply_focal_update, oracle_delta, DeltaTheta};
use crate::SimRng;

/// Number of model points used for loss evaluation by default.
pub const DEFAULT_LOSS_POINTS: usize = 500;
/// Seed used when subsampling model vertices for the losses.
pub const LOSS_POINTS_SEED: u64 = 0x5eed;

const DIM: usize = DeltaTheta::DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the focal loss relative to the pose loss.
    pub alpha: f64,
    /// Weight of the Huber term inside the focal loss.
    pub beta: f64,
    /// Huber transition point, in log-focal units.
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1.0,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", self.alpha));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid("beta", self.beta));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber delta", self.huber_delta));
        }
        Ok(())
    }
}

/// Gradient with respect to the prediction, in [`DeltaTheta::to_array`] order.
pub type Gradient = [f64; DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pose: f64,
    /// `beta * huber + reprojection`.
    pub focal: f64,
    pub huber: f64,
    pub reprojection: f64,
    /// Pose half of the disentangled reprojection loss (already halved).
    pub reprojection_pose: f64,
    /// Focal half of the disentangled reprojection loss (already halved).
    pub reprojection_focal: f64,
    /// Center-shift, depth and rotation terms of the pose loss.
    pub pose_terms: [f64; 3],
    pub grad_total: Gradient,
    pub grad_pose: Gradient,
    pub grad_huber: Gradient,
    pub grad_reprojection: Gradient,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_code(x: f64) -> i8 {
    sgn(x) as i8
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * sgn(r)
    }
}

/// Huber penalty on `ln f - ln f_gt`.
pub fn huber_log_focal(f: f64, f_gt: f64, delta: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::invalid("focal length", f));
    }
    if !(f_gt > 0.0) {
        return Err(Error::invalid("ground-truth focal length", f_gt));
    }
    Ok(huber(f.ln() - f_gt.ln(), delta))
}

fn camera_point(r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector3<f64>, index: usize) -> Result<Vector3<f64>> {
    let pc = r * p + t;
    if pc.z > 0.0 {
        Ok(pc)
    } else {
        Err(Error::NonPositiveDepth { index, depth: pc.z })
    }
}

/// Sum over the model of the L1 pixel distance between the two projections.
pub fn reprojection_loss(pred: &ParamState, gt: &ParamState, points: &ModelPoints) -> Result<f64> {
    reprojection_with_grad(
        &pred.rotation.matrix(),
        &pred.translation,
        pred.focal,
        gt,
        points,
        1.0,
        None,
    )
    .map(|(value, _, _)| value)
}

/// Half the reprojection error of the predicted pose at the true focal plus
/// half the reprojection error of the predicted focal at the true pose.
pub fn disentangled_reprojection_loss(
    pred: &ParamState,
    gt: &ParamState,
    points: &ModelPoints,
) -> Result<f64> {
    let pose_part = ParamState {
        focal: gt.focal,
        ..*pred
    };
    let focal_part = ParamState {
        focal: pred.focal,
        ..*gt
    };
    Ok(0.5 * reprojection_loss(&pose_part, gt, points)?
        + 0.5 * reprojection_loss(&focal_part, gt, points)?)
}

/// Mean over the model of the L1 distance between the two rigid transforms.
pub fn point_matching_distance(
    a: (&Rotation, &Vector3<f64>),
    b: (&Rotation, &Vector3<f64>),
    points: &ModelPoints,
) -> f64 {
    point_matching_with_grad(&a.0.matrix(), a.1, &b.0.matrix(), b.1, points, None).0
}

/// Value, `dL/dR` and `dL/dt` of the L1 reprojection sum; `gt` is fixed.
fn reprojection_with_grad(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    focal: f64,
    gt: &ParamState,
    points: &ModelPoints,
    weight: f64,
    mut trace: Option<&mut Trace>,
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    let r_gt = gt.rotation.matrix();
    let mut value = 0.0;
    let mut g_r = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    for (i, p) in points.iter().enumerate() {
        let pc = camera_point(r, t, p, i)?;
        let pg = camera_point(&r_gt, &gt.translation, p, i)?;
        let du = focal * pc.x / pc.z - gt.focal * pg.x / pg.z;
        let dv = focal * pc.y / pc.z - gt.focal * pg.y / pg.z;
        value += du.abs() + dv.abs();
        let (su, sv) = (sgn(du), sgn(dv));
        if let Some(tr) = trace.as_deref_mut() {
            tr.signature.push(su as i8);
            tr.signature.push(sv as i8);
            tr.terms.push(weight * (du.abs() + dv.abs()));
        }
        let g_p = Vector3::new(
            focal * su / pc.z,
            focal * sv / pc.z,
            -focal * (su * pc.x + sv * pc.y) / (pc.z * pc.z),
        );
        g_t += g_p;
        g_r += g_p * p.transpose();
    }
    Ok((value, g_r, g_t))
}

fn point_matching_with_grad(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    r_gt: &Matrix3<f64>,
    t_gt: &Vector3<f64>,
    points: &ModelPoints,
    mut trace: Option<&mut Trace>,
) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = points.len() as f64;
    let mut value = 0.0;
    let mut g_r = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    for p in points {
        let d = (r * p + t) - (r_gt * p + t_gt);
        value += d.abs().sum();
        let s = d.map(sgn);
        if let Some(tr) = trace.as_deref_mut() {
            tr.signature.extend(d.iter().map(|&c| sign_code(c)));
            tr.terms.push(d.abs().sum() / n);
        }
        g_t += s;
        g_r += s * p.transpose();
    }
    (value / n, g_r / n, g_t / n)
}

/// Translation reached from `state` with the given center shift, depth ratio
/// and new focal, together with its derivatives in `v_x`, `v_y`, `v_z`.
fn translation_step(
    state: &ParamState,
    v_x: f64,
    v_y: f64,
    v_z: f64,
    f_new: f64,
) -> (Vector3<f64>, [Vector3<f64>; 3]) {
    let t = &state.translation;
    let cx = v_x + state.focal * t.x / t.z;
    let cy = v_y + state.focal * t.y / t.z;
    let z_new = v_z * t.z;
    let value = Vector3::new(cx * z_new / f_new, cy * z_new / f_new, z_new);
    let d_vx = Vector3::new(z_new / f_new, 0.0, 0.0);
    let d_vy = Vector3::new(0.0, z_new / f_new, 0.0);
    let d_vz = Vector3::new(cx * t.z / f_new, cy * t.z / f_new, t.z);
    (value, [d_vx, d_vy, d_vz])
}

/// Value, gradient and the sign pattern of every non-smooth residual.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Gradient,
    pub signature: Vec<i8>,
    /// Weighted per-residual contributions summing to `value`. May be empty.
    pub terms: Vec<f64>,
}

/// Sign pattern and weighted contributions collected during an evaluation.
#[derive(Debug, Clone, Default)]
struct Trace {
    signature: Vec<i8>,
    terms: Vec<f64>,
}

/// Everything fixed during one step: the current state, the ground truth and
/// the model points.
#[derive(Debug, Clone)]
pub struct LossProblem {
    pub state: ParamState,
    pub gt: ParamState,
    pub points: ModelPoints,
    pub weights: LossWeights,
    oracle: DeltaTheta,
    oracle_rotation: Matrix3<f64>,
    oracle_focal: f64,
}

impl LossProblem {
    pub fn new(
        state: ParamState,
        gt: ParamState,
        points: ModelPoints,
        weights: LossWeights,
    ) -> Result<Self> {
        state.validate()?;
        gt.validate()?;
        weights.validate()?;
        let oracle = oracle_delta(&state, &gt);
        let oracle_rotation = gram_schmidt(&oracle.v_r1, &oracle.v_r2)? * state.rotation.matrix();
        let oracle_focal = apply_focal_update(state.focal, oracle.v_f)?;
        Ok(Self {
            state,
            gt,
            points,
            weights,
            oracle,
            oracle_rotation,
            oracle_focal,
        })
    }

    /// The update that would reach the ground truth exactly.
    pub fn oracle(&self) -> &DeltaTheta {
        &self.oracle
    }

    /// Pose loss: three point-matching distances, one per predicted group.
    pub fn pose_loss(&self, delta: &DeltaTheta) -> Result<f64> {
        Ok(self.pose_terms(delta, None)?.0.iter().sum())
    }

    fn pose_terms(
        &self,
        delta: &DeltaTheta,
        mut trace: Option<&mut Trace>,
    ) -> Result<([f64; 3], Gradient)> {
        let o = &self.oracle;
        let r_gt = self.gt.rotation.matrix();
        let t_gt = &self.gt.translation;
        let f_new = self.oracle_focal;
        let mut grad = [0.0; DIM];

        // Center shift predicted, everything else exact.
        let (t1, dt1) = translation_step(&self.state, delta.v_x, delta.v_y, o.v_z, f_new);
        let (xy, _, g_t1) = point_matching_with_grad(
            &self.oracle_rotation,
            &t1,
            &r_gt,
            t_gt,
            &self.points,
            trace.as_deref_mut(),
        );
        grad[0] = g_t1.dot(&dt1[0]);
        grad[1] = g_t1.dot(&dt1[1]);

        // Depth predicted.
        let (t2, dt2) = translation_step(&self.state, o.v_x, o.v_y, delta.v_z, f_new);
        let (depth, _, g_t2) = point_matching_with_grad(
            &self.oracle_rotation,
            &t2,
            &r_gt,
            t_gt,
            &self.points,
            trace.as_deref_mut(),
        );
        grad[2] = g_t2.dot(&dt2[2]);

        // Rotation predicted.
        let g = gram_schmidt(&delta.v_r1, &delta.v_r2)?;
        let r0 = self.state.rotation.matrix();
        let (t3, _) = translation_step(&self.state, o.v_x, o.v_y, o.v_z, f_new);
        let (rot, g_r3, _) =
            point_matching_with_grad(&(g * r0), &t3, &r_gt, t_gt, &self.points, trace);
        let (g_v1, g_v2) = gram_schmidt_backward(&delta.v_r1, &delta.v_r2, &(g_r3 * r0.transpose()));
        grad[3..6].copy_from_slice(g_v1.as_slice());
        grad[6..9].copy_from_slice(g_v2.as_slice());

        Ok(([xy, depth, rot], grad))
    }

    /// Full breakdown with analytic gradients.
    pub fn evaluate(&self, delta: &DeltaTheta) -> Result<LossBreakdown> {
        self.evaluate_inner(delta, None)
    }

    fn evaluate_inner(
        &self,
        delta: &DeltaTheta,
        mut trace: Option<&mut Trace>,
    ) -> Result<LossBreakdown> {
        delta.validate()?;
        let w = &self.weights;
        let (pose_terms, grad_pose) = self.pose_terms(delta, trace.as_deref_mut())?;
        let pose: f64 = pose_terms.iter().sum();

        // Focal regression in log space.
        let focal = apply_focal_update(self.state.focal, delta.v_f)?;
        let r = focal.ln() - self.gt.focal.ln();
        let huber_value = huber(r, w.huber_delta);
        let mut grad_huber = [0.0; DIM];
        grad_huber[9] = huber_derivative(r, w.huber_delta);
        if let Some(tr) = trace.as_deref_mut() {
            tr.signature.push(if r.abs() <= w.huber_delta { 0 } else { 2 * sign_code(r) });
            tr.terms.push(w.alpha * w.beta * huber_value);
        }

        // Predicted pose at the true focal.
        let g = gram_schmidt(&delta.v_r1, &delta.v_r2)?;
        let r0 = self.state.rotation.matrix();
        let (t_pred, dt) =
            translation_step(&self.state, delta.v_x, delta.v_y, delta.v_z, self.oracle_focal);
        let (pose_px, g_r, g_t) = reprojection_with_grad(
            &(g * r0),
            &t_pred,
            self.gt.focal,
            &self.gt,
            &self.points,
            0.5 * w.alpha,
            trace.as_deref_mut(),
        )?;
        let mut grad_reprojection = [0.0; DIM];
        for k in 0..3 {
            grad_reprojection[k] = 0.5 * g_t.dot(&dt[k]);
        }
        let (g_v1, g_v2) = gram_schmidt_backward(&delta.v_r1, &delta.v_r2, &(g_r * r0.transpose()));
        for k in 0..3 {
            grad_reprojection[3 + k] = 0.5 * g_v1[k];
            grad_reprojection[6 + k] = 0.5 * g_v2[k];
        }

        // Predicted focal at the true pose: only the focal moves.
        let r_gt = self.gt.rotation.matrix();
        let mut focal_px = 0.0;
        let mut d_focal = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            let pg = camera_point(&r_gt, &self.gt.translation, p, i)?;
            let (a, b) = (pg.x / pg.z, pg.y / pg.z);
            let du = focal * a - self.gt.focal * a;
            let dv = focal * b - self.gt.focal * b;
            focal_px += du.abs() + dv.abs();
            d_focal += sgn(du) * a + sgn(dv) * b;
            if let Some(tr) = trace.as_deref_mut() {
                tr.signature.push(sign_code(du));
                tr.signature.push(sign_code(dv));
                tr.terms.push(0.5 * w.alpha * (du.abs() + dv.abs()));
            }
        }
        grad_reprojection[9] = 0.5 * d_focal * focal;

        let reprojection_pose = 0.5 * pose_px;
        let reprojection_focal = 0.5 * focal_px;
        let reprojection = reprojection_pose + reprojection_focal;
        let focal_loss = w.beta * huber_value + reprojection;
        let total = pose + w.alpha * focal_loss;
        let mut grad_total = [0.0; DIM];
        for k in 0..DIM {
            grad_total[k] =
                grad_pose[k] + w.alpha * (w.beta * grad_huber[k] + grad_reprojection[k]);
        }
        Ok(LossBreakdown {
            total,
            pose,
            focal: focal_loss,
            huber: huber_value,
            reprojection,
            reprojection_pose,
            reprojection_focal,
            pose_terms,
            grad_total,
            grad_pose,
            grad_huber,
            grad_reprojection,
        })
    }

    /// Total loss as an objective for [`gradient_check`].
    pub fn total_objective(&self, delta: &DeltaTheta) -> Result<Evaluation> {
        let mut trace = Trace::default();
        let b = self.evaluate_inner(delta, Some(&mut trace))?;
        Ok(Evaluation {
            value: b.total,
            gradient: b.grad_total,
            signature: trace.signature,
            terms: trace.terms,
        })
    }

    /// Huber term alone as an objective for [`gradient_check`].
    pub fn huber_objective(&self, delta: &DeltaTheta) -> Result<Evaluation> {
        let b = self.evaluate_inner(delta, None)?;
        let focal = apply_focal_update(self.state.focal, delta.v_f)?;
        let r = focal.ln() - self.gt.focal.ln();
        let branch = if r.abs() <= self.weights.huber_delta { 0 } else { 2 * sign_code(r) };
        Ok(Evaluation {
            value: b.huber,
            gradient: b.grad_huber,
            signature: vec![branch],
            terms: Vec::new(),
        })
    }
}

/// Pose loss for a prediction made at `state`, measured against `gt`.
pub fn disentangled_pose_loss(
    state: &ParamState,
    delta: &DeltaTheta,
    gt: &ParamState,
    points: &ModelPoints,
) -> Result<f64> {
    LossProblem::new(*state, *gt, points.clone(), LossWeights::default())?.pose_loss(delta)
}

/// Full loss of a prediction made at `state`, measured against `gt`.
pub fn total_loss(
    state: &ParamState,
    delta: &DeltaTheta,
    gt: &ParamState,
    points: &ModelPoints,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    LossProblem::new(*state, *gt, points.clone(), *weights)?.evaluate(delta)
}

/// Floor on the denominator of the relative gradient error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub value: f64,
    pub analytic: Gradient,
    pub numeric: Gradient,
    pub rel_error: Gradient,
    pub max_rel_error: f64,
    /// False when a perturbation of size `h` crosses an L1 or Huber kink.
    pub smooth: bool,
    /// Components whose perturbation crosses a kink.
    pub kinks: Vec<String>,
}

/// Compares analytic gradients with central differences of step `h`.
///
/// A point is reported non-smooth when perturbing any component by `±h`
/// changes the sign pattern of the objective's residuals. Non-smoothness is a
/// diagnostic; the comparison is still carried out.
pub fn gradient_check<F>(objective: F, at: &DeltaTheta, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&DeltaTheta) -> Result<Evaluation>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step", h));
    }
    let center = objective(at)?;
    let base = at.to_array();
    let mut numeric = [0.0; DIM];
    let mut rel_error = [0.0; DIM];
    let mut kinks = Vec::new();
    for k in 0..DIM {
        let mut plus = base;
        let mut minus = base;
        plus[k] += h;
        minus[k] -= h;
        let ep = objective(&DeltaTheta::from_array(plus))?;
        let em = objective(&DeltaTheta::from_array(minus))?;
        numeric[k] = difference(&ep, &em) / (2.0 * h);
        if ep.signature != center.signature || em.signature != center.signature {
            kinks.push(DeltaTheta::NAMES[k].to_string());
        }
        let a = center.gradient[k];
        let denom = a.abs().max(numeric[k].abs()).max(REL_ERROR_FLOOR);
        rel_error[k] = (a - numeric[k]).abs() / denom;
    }
    let max_rel_error = rel_error.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        value: center.value,
        analytic: center.gradient,
        numeric,
        rel_error,
        max_rel_error,
        smooth: kinks.is_empty(),
        kinks,
    })
}

/// `plus.value - minus.value`, taken term by term when both sides expose
/// matching contributions so that large shared terms cancel exactly.
fn difference(plus: &Evaluation, minus: &Evaluation) -> f64 {
    if plus.terms.is_empty() || plus.terms.len() != minus.terms.len() {
        return plus.value - minus.value;
    }
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for (a, b) in plus.terms.iter().zip(&minus.terms) {
        let x = a - b;
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// A random loss configuration: a ground truth, a nearby current state and a
/// prediction near the oracle update.
pub fn random_case(rng: &mut SimRng, n_points: usize) -> Result<(LossProblem, DeltaTheta)> {
    let normal = |rng: &mut SimRng, sigma: f64| -> f64 {
        Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
    };
    let gt = ParamState::new(
        uniform_rotation(rng),
        Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(1.0..3.0),
        ),
        rng.random_range(300.0..1000.0),
    )?;
    let tilt = Rotation::from_scaled_axis(Vector3::new(
        normal(rng, 0.2),
        normal(rng, 0.2),
        normal(rng, 0.2),
    ));
    let state = ParamState::new(
        tilt * gt.rotation,
        gt.translation
            + Vector3::new(normal(rng, 0.02), normal(rng, 0.02), normal(rng, 0.1)),
        gt.focal * normal(rng, 0.15).exp(),
    )?;
    let size = Vector3::new(
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
    );
    let points = ModelPoints::box_surface(size, n_points, rng.random())?;
    let problem = LossProblem::new(state, gt, points, LossWeights::default())?;

    let o = *problem.oracle();
    let wobble = Rotation::from_scaled_axis(Vector3::new(
        normal(rng, 0.08),
        normal(rng, 0.08),
        normal(rng, 0.08),
    ));
    let g = wobble.matrix() * gram_schmidt(&o.v_r1, &o.v_r2)?;
    let scale = rng.random_range(0.5..2.0);
    let shear = rng.random_range(-0.5..0.5);
    let delta = DeltaTheta {
        v_x: o.v_x + normal(rng, 5.0),
        v_y: o.v_y + normal(rng, 5.0),
        v_z: o.v_z * normal(rng, 0.05).exp(),
        v_r1: g.column(0) * scale,
        v_r2: g.column(1) + g.column(0) * shear,
        v_f: o.v_f + normal(rng, 0.1),
    };
    Ok((problem, delta))
}

/// Like [`random_case`] but retries until the point is smooth for step `h`.
pub fn random_smooth_case(
    rng: &mut SimRng,
    n_points: usize,
    h: f64,
) -> Result<(LossProblem, DeltaTheta, GradCheckReport)> {
    const MAX_TRIES: usize = 100;
    for _ in 0..MAX_TRIES {
        let (problem, delta) = random_case(rng, n_points)?;
        let report = gradient_check(|d| problem.total_objective(d), &delta, h)?;
        if report.smooth {
            return Ok((problem, delta, report));
        }
    }
    Err(Error::RetriesExhausted(MAX_TRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_for;

    fn single(p: Vector3<f64>) -> ModelPoints {
        ModelPoints::new(vec![p]).unwrap()
    }

    fn at(t: Vector3<f64>, f: f64) -> ParamState {
        ParamState::new(Rotation::identity(), t, f).unwrap()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_log_focal(600.0, 600.0, 1.0).unwrap(), 0.0);
        let quad = huber_log_focal(1200.0, 600.0, 1.0).unwrap();
        assert!((quad - 0.5 * 2f64.ln().powi(2)).abs() < 1e-15);
        assert!((quad - 0.240_226_5).abs() < 1e-6);
        let lin = huber_log_focal(600.0 * 3f64.exp(), 600.0, 1.0).unwrap();
        assert!((lin - 2.5).abs() < 1e-12);
        assert!(huber_log_focal(0.0, 600.0, 1.0).is_err());
    }

    #[test]
    fn reprojection_examples() {
        let t = Vector3::new(0.0, 0.0, 1.0);
        let gt = at(t, 660.0);
        let m = single(Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(reprojection_loss(&gt, &gt, &m).unwrap(), 0.0);
        assert_eq!(reprojection_loss(&at(t, 600.0), &gt, &single(Vector3::zeros())).unwrap(), 0.0);
        assert!((reprojection_loss(&at(t, 600.0), &gt, &m).unwrap() - 6.0).abs() < 1e-12);

        let behind = single(Vector3::new(0.0, 0.0, -2.0));
        assert!(matches!(
            reprojection_loss(&gt, &gt, &behind),
            Err(Error::NonPositiveDepth { index: 0, .. })
        ));
    }

    #[test]
    fn disentangled_reprojection_examples() {
        let m = ModelPoints::box_surface(Vector3::new(0.3, 0.2, 0.1), 50, 3).unwrap();
        let gt = ParamState::new(Rotation::rot_y(0.2), Vector3::new(0.05, -0.02, 1.4), 700.0)
            .unwrap();
        assert_eq!(disentangled_reprojection_loss(&gt, &gt, &m).unwrap(), 0.0);

        let pose_off = ParamState::new(Rotation::rot_y(0.3), Vector3::new(0.07, 0.0, 1.5), 700.0)
            .unwrap();
        let dr = disentangled_reprojection_loss(&pose_off, &gt, &m).unwrap();
        assert!((dr - 0.5 * reprojection_loss(&pose_off, &gt, &m).unwrap()).abs() < 1e-9);

        let focal_off = ParamState { focal: 800.0, ..gt };
        let dr = disentangled_reprojection_loss(&focal_off, &gt, &m).unwrap();
        assert!((dr - 0.5 * reprojection_loss(&focal_off, &gt, &m).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn point_matching_examples() {
        let m = ModelPoints::box_surface(Vector3::new(0.3, 0.2, 0.1), 40, 9).unwrap();
        let r = Rotation::rot_x(0.4);
        let t = Vector3::new(0.1, 0.2, 1.0);
        assert_eq!(point_matching_distance((&r, &t), (&r, &t), &m), 0.0);

        let id = Rotation::identity();
        let shifted = t + Vector3::new(0.1, 0.0, 0.0);
        assert!((point_matching_distance((&id, &shifted), (&id, &t), &m) - 0.1).abs() < 1e-12);

        let rz = Rotation::rot_z(std::f64::consts::FRAC_PI_2);
        let zero = Vector3::zeros();
        let d = point_matching_distance((&rz, &zero), (&id, &zero), &single(Vector3::x()));
        assert!((d - 2.0).abs() < 1e-12);
    }

    fn sample_problem() -> LossProblem {
        let gt = ParamState::new(Rotation::rot_z(0.2), Vector3::new(0.05, -0.03, 2.0), 650.0)
            .unwrap();
        let state = ParamState::new(Rotation::rot_x(0.1), Vector3::new(0.02, 0.01, 1.0), 600.0)
            .unwrap();
        let m = ModelPoints::box_surface(Vector3::new(0.3, 0.2, 0.2), 60, 11).unwrap();
        LossProblem::new(state, gt, m, LossWeights::default()).unwrap()
    }

    #[test]
    fn pose_loss_examples() {
        let p = sample_problem();
        let oracle = *p.oracle();
        assert!(p.pose_loss(&oracle).unwrap() < 1e-12);

        let wrong_depth = DeltaTheta {
            v_z: oracle.v_z * 1.3,
            ..oracle
        };
        let (terms, _) = p.pose_terms(&wrong_depth, None).unwrap();
        assert!(terms[0] < 1e-12 && terms[2] < 1e-12);
        assert!(terms[1] > 1e-3);
    }

    #[test]
    fn pose_loss_isolates_depth_from_initial_state() {
        let state = at(Vector3::new(0.04, -0.02, 1.0), 600.0);
        let gt = ParamState::new(Rotation::identity(), Vector3::new(0.1, 0.06, 2.0), 600.0)
            .unwrap();
        let m = ModelPoints::box_surface(Vector3::new(0.3, 0.2, 0.2), 30, 5).unwrap();
        let oracle = oracle_delta(&state, &gt);
        assert!((oracle.v_z - 2.0).abs() < 1e-15);
        let predicted = DeltaTheta { v_z: 1.0, ..oracle };
        let loss = disentangled_pose_loss(&state, &predicted, &gt, &m).unwrap();
        // Same projected center and rotation, depth 1 m instead of 2 m.
        let at_z1 = gt.translation / 2.0;
        let expected = point_matching_distance(
            (&gt.rotation, &at_z1),
            (&gt.rotation, &gt.translation),
            &m,
        );
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - (0.1 + 0.06 + 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_defaults_and_oracle() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.huber_delta), (1e-2, 1.0, 1.0));
        let p = sample_problem();
        let b = p.evaluate(p.oracle()).unwrap();
        assert!(b.total.abs() < 1e-9, "total at oracle = {}", b.total);
    }

    #[test]
    fn decomposition_identity() {
        let mut rng = rng_for(21, 0);
        for _ in 0..20 {
            let (p, d) = random_case(&mut rng, 80).unwrap();
            let b = p.evaluate(&d).unwrap();
            let w = p.weights;
            let rebuilt = b.pose + w.alpha * (w.beta * b.huber + b.reprojection);
            assert!((b.total - rebuilt).abs() < 1e-9);
            assert!(b.pose >= 0.0 && b.huber >= 0.0 && b.reprojection >= 0.0);
        }
    }

    #[test]
    fn focal_gradient_matches_central_difference() {
        let mut rng = rng_for(5, 0);
        let (p, d, _) = random_smooth_case(&mut rng, 100, 1e-6).unwrap();
        let analytic = p.evaluate(&d).unwrap().grad_total[9];
        let h = 1e-6;
        let plus = DeltaTheta { v_f: d.v_f + h, ..d };
        let minus = DeltaTheta { v_f: d.v_f - h, ..d };
        let numeric =
            (p.evaluate(&plus).unwrap().total - p.evaluate(&minus).unwrap().total) / (2.0 * h);
        assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()));
    }

    #[test]
    fn huber_only_gradient_check() {
        let p = sample_problem();
        let d = DeltaTheta {
            v_f: p.oracle().v_f + 0.3,
            ..*p.oracle()
        };
        let report = gradient_check(|d| p.huber_objective(d), &d, 1e-6).unwrap();
        assert!(report.smooth);
        assert!(report.rel_error[9] <= 1e-6, "{report:?}");
    }

    #[test]
    fn random_full_gradient_check() {
        let mut rng = rng_for(77, 0);
        for _ in 0..5 {
            let (_, _, report) = random_smooth_case(&mut rng, 100, 1e-6).unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn kink_is_flagged() {
        let p = sample_problem();
        let mut d = *p.oracle();
        d.v_y += 3.0;
        d.v_z *= 1.05;
        // v_x equals the oracle value, so the center-shift residual sits at zero.
        let report = gradient_check(|d| p.total_objective(d), &d, 1e-6).unwrap();
        assert!(!report.smooth);
        assert!(report.kinks.iter().any(|k| k == "v_x"));
    }

    #[test]
    fn perturbing_focal_leaves_pose_parts_alone() {
        let mut rng = rng_for(8, 0);
        let (p, d) = random_case(&mut rng, 60).unwrap();
        let a = p.evaluate(&d).unwrap();
        let b = p.evaluate(&DeltaTheta { v_f: d.v_f + 0.2, ..d }).unwrap();
        assert_eq!(a.pose_terms, b.pose_terms);
        assert_eq!(a.reprojection_pose, b.reprojection_pose);
        assert_ne!(a.huber, b.huber);
        assert_ne!(a.reprojection_focal, b.reprojection_focal);
    }
}
