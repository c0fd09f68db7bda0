//! The parameter update applied after each refinement prediction.
//!
//! A prediction [`DeltaTheta`] moves the projected object center by
//! `(v_x, v_y)` pixels, scales the depth by `v_z`, left-multiplies the rotation
//! by the Gram-Schmidt rotation of `(v_r1, v_r2)` and scales the focal length
//! by `exp(v_f)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gram_schmidt, BBox, CameraIntrinsics, ParamState, Rotation};

/// Initial focal length used when nothing else is known, in pixels.
pub const INITIAL_FOCAL_PX: f64 = 600.0;
/// Initial object depth, in meters.
pub const INITIAL_DEPTH_M: f64 = 1.0;

/// One predicted update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTheta {
    #[serde(rename = "v_x_px")]
    pub v_x: f64,
    #[serde(rename = "v_y_px")]
    pub v_y: f64,
    #[serde(rename = "v_z_ratio")]
    pub v_z: f64,
    pub v_r1: Vector3<f64>,
    pub v_r2: Vector3<f64>,
    #[serde(rename = "v_f_log")]
    pub v_f: f64,
}

impl Default for DeltaTheta {
    fn default() -> Self {
        Self::identity()
    }
}

impl DeltaTheta {
    /// Number of scalar components.
    pub const DIM: usize = 10;
    /// Component names in [`DeltaTheta::to_array`] order.
    pub const NAMES: [&'static str; Self::DIM] = [
        "v_x", "v_y", "v_z", "v_r1_x", "v_r1_y", "v_r1_z", "v_r2_x", "v_r2_y", "v_r2_z", "v_f",
    ];

    /// The update that leaves every state unchanged.
    pub fn identity() -> Self {
        Self {
            v_x: 0.0,
            v_y: 0.0,
            v_z: 1.0,
            v_r1: Vector3::x(),
            v_r2: Vector3::y(),
            v_f: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; Self::DIM] {
        [
            self.v_x, self.v_y, self.v_z, self.v_r1.x, self.v_r1.y, self.v_r1.z, self.v_r2.x,
            self.v_r2.y, self.v_r2.z, self.v_f,
        ]
    }

    pub fn from_array(a: [f64; Self::DIM]) -> Self {
        Self {
            v_x: a[0],
            v_y: a[1],
            v_z: a[2],
            v_r1: Vector3::new(a[3], a[4], a[5]),
            v_r2: Vector3::new(a[6], a[7], a[8]),
            v_f: a[9],
        }
    }

    /// Rotation encoded by `(v_r1, v_r2)`.
    pub fn rotation(&self) -> Result<Rotation> {
        Ok(Rotation::from_matrix(&gram_schmidt(&self.v_r1, &self.v_r2)?))
    }

    /// Checks finiteness, positive depth ratio and a usable rotation pair.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("{name} is not finite")));
            }
        }
        if !(self.v_z > 0.0) {
            return Err(Error::invalid("depth ratio v_z", self.v_z));
        }
        gram_schmidt(&self.v_r1, &self.v_r2)?;
        Ok(())
    }
}

/// Which translation rule turns `(v_x, v_y)` into a new translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Keeps the projected center displacement exact when the focal changes.
    Exact,
    /// Older rule that treats the focal length as constant within a step.
    Legacy,
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Exact => "exact",
            UpdateRule::Legacy => "legacy",
        }
    }
}

pub fn apply_focal_update(focal: f64, v_f: f64) -> Result<f64> {
    if !(focal.is_finite() && focal > 0.0) {
        return Err(Error::invalid("focal length", focal));
    }
    if !v_f.is_finite() {
        return Err(Error::invalid("focal update v_f", v_f));
    }
    Ok(v_f.exp() * focal)
}

fn check_translation_inputs(state: &ParamState, delta: &DeltaTheta, f_new: f64) -> Result<()> {
    if !(state.translation.z > 0.0) {
        return Err(Error::invalid("depth", state.translation.z));
    }
    if !(delta.v_z.is_finite() && delta.v_z > 0.0) {
        return Err(Error::invalid("depth ratio v_z", delta.v_z));
    }
    if !(f_new.is_finite() && f_new > 0.0) {
        return Err(Error::invalid("updated focal length", f_new));
    }
    if !(delta.v_x.is_finite() && delta.v_y.is_finite()) {
        return Err(Error::Invalid("non-finite pixel update".into()));
    }
    Ok(())
}

/// Translation whose projection under `f_new` sits `(v_x, v_y)` pixels away
/// from the current projected center.
pub fn apply_translation_update(
    state: &ParamState,
    delta: &DeltaTheta,
    f_new: f64,
) -> Result<Vector3<f64>> {
    check_translation_inputs(state, delta, f_new)?;
    let t = &state.translation;
    let f = state.focal;
    let z_new = delta.v_z * t.z;
    Ok(Vector3::new(
        (delta.v_x + f * t.x / t.z) * z_new / f_new,
        (delta.v_y + f * t.y / t.z) * z_new / f_new,
        z_new,
    ))
}

/// Translation update that ignores the focal change for the carried-over
/// center term. Agrees with [`apply_translation_update`] when `f_new` equals
/// the current focal.
pub fn apply_legacy_translation_update(
    state: &ParamState,
    delta: &DeltaTheta,
    f_new: f64,
) -> Result<Vector3<f64>> {
    check_translation_inputs(state, delta, f_new)?;
    let t = &state.translation;
    let z_new = delta.v_z * t.z;
    Ok(Vector3::new(
        (delta.v_x / f_new + t.x / t.z) * z_new,
        (delta.v_y / f_new + t.y / t.z) * z_new,
        z_new,
    ))
}

pub fn apply_rotation_update(
    rotation: &Rotation,
    v_r1: &Vector3<f64>,
    v_r2: &Vector3<f64>,
) -> Result<Rotation> {
    let g = gram_schmidt(v_r1, v_r2)?;
    Ok(Rotation::from_matrix(&(g * rotation.matrix())))
}

/// Applies a prediction with the exact rule.
pub fn apply_update(state: &ParamState, delta: &DeltaTheta) -> Result<ParamState> {
    apply_update_with(UpdateRule::Exact, state, delta)
}

/// Applies a prediction: focal first, then the translation using the new
/// focal, and the rotation independently.
pub fn apply_update_with(
    rule: UpdateRule,
    state: &ParamState,
    delta: &DeltaTheta,
) -> Result<ParamState> {
    let focal = apply_focal_update(state.focal, delta.v_f)?;
    let translation = match rule {
        UpdateRule::Exact => apply_translation_update(state, delta, focal)?,
        UpdateRule::Legacy => apply_legacy_translation_update(state, delta, focal)?,
    };
    let rotation = apply_rotation_update(&state.rotation, &delta.v_r1, &delta.v_r2)?;
    Ok(ParamState {
        rotation,
        translation,
        focal,
    })
}

/// The prediction that maps `state` onto `target` in one exact-rule step.
pub fn oracle_delta(state: &ParamState, target: &ParamState) -> DeltaTheta {
    let (t, tt) = (&state.translation, &target.translation);
    let relative: Matrix3<f64> = target.rotation.matrix() * state.rotation.matrix().transpose();
    DeltaTheta {
        v_x: target.focal * tt.x / tt.z - state.focal * t.x / t.z,
        v_y: target.focal * tt.y / tt.z - state.focal * t.y / t.z,
        v_z: tt.z / t.z,
        v_r1: relative.column(0).into(),
        v_r2: relative.column(1).into(),
        v_f: (target.focal / state.focal).ln(),
    }
}

/// Starting state for a detection: identity rotation at the initial depth,
/// placed so the object center projects onto the box center.
pub fn init_state(bbox: &BBox, intrinsics: &CameraIntrinsics) -> ParamState {
    let c = bbox.center();
    let z = INITIAL_DEPTH_M;
    ParamState {
        rotation: Rotation::identity(),
        translation: Vector3::new(
            (c.x - intrinsics.cx) * z / intrinsics.focal,
            (c.y - intrinsics.cy) * z / intrinsics.focal,
            z,
        ),
        focal: intrinsics.focal,
    }
}
