//! Pinhole camera, rotations, bounding boxes and the crop protocol.
//!
//! Pixel coordinates are continuous with no half-pixel offset. With the
//! principal point at `(0, 0)` the image origin sits on the optical axis, which
//! is the convention the update rules are written in.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted norm for Gram-Schmidt inputs.
pub const GRAM_SCHMIDT_EPS: f64 = 1e-12;

/// A 3D rotation stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from `[w, x, y, z]`, normalizing the input.
    pub fn from_wxyz(q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::invalid("quaternion norm", norm));
        }
        Ok(Self(UnitQuaternion::from_quaternion(quat)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self(UnitQuaternion::from_scaled_axis(axis.normalize() * angle))
    }

    /// Rotation from a rotation vector (axis times angle).
    pub fn from_scaled_axis(v: Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(v))
    }

    /// Converts an orthonormal matrix with positive determinant.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        let q = UnitQuaternion::from_rotation_matrix(&r).into_inner();
        Self(UnitQuaternion::new_normalize(q))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn compose(&self, rhs: &Rotation) -> Self {
        Self(UnitQuaternion::new_normalize((self.0 * rhs.0).into_inner()))
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// Rotation vector (axis times angle), angle in `[0, pi]`.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Rotation whose first two columns come from Gram-Schmidt on `(v1, v2)`.
pub fn rotation_from_6d(v1: &Vector3<f64>, v2: &Vector3<f64>) -> Result<Rotation> {
    Ok(Rotation::from_matrix(&gram_schmidt(v1, v2)?))
}

/// Orthonormal frame `[e1 e2 e1 x e2]` built from two 3-vectors.
pub fn gram_schmidt(v1: &Vector3<f64>, v2: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !(v1.iter().chain(v2.iter()).all(|c| c.is_finite())) {
        return Err(Error::DegenerateRotation("non-finite component"));
    }
    let n1 = v1.norm();
    if n1 < GRAM_SCHMIDT_EPS {
        return Err(Error::DegenerateRotation("first vector is zero"));
    }
    let e1 = v1 / n1;
    let u2 = v2 - e1 * e1.dot(v2);
    let n2 = u2.norm();
    if n2 < GRAM_SCHMIDT_EPS {
        return Err(Error::DegenerateRotation("vectors are parallel"));
    }
    let e2 = u2 / n2;
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Pulls a gradient with respect to the Gram-Schmidt frame back onto `(v1, v2)`.
///
/// `grad` holds `dL/dG` for `G = gram_schmidt(v1, v2)`.
pub fn gram_schmidt_backward(
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
    grad: &Matrix3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let n1 = v1.norm();
    let e1 = v1 / n1;
    let proj = e1.dot(v2);
    let u2 = v2 - e1 * proj;
    let n2 = u2.norm();
    let e2 = u2 / n2;

    let g3: Vector3<f64> = grad.column(2).into();
    let mut g_e1: Vector3<f64> = grad.column(0).into();
    let mut g_e2: Vector3<f64> = grad.column(1).into();
    // e3 = e1 x e2
    g_e1 += e2.cross(&g3);
    g_e2 += g3.cross(&e1);

    let g_u2 = (g_e2 - e2 * e2.dot(&g_e2)) / n2;
    let g_v2 = g_u2 - e1 * e1.dot(&g_u2);
    g_e1 -= g_u2 * proj + v2 * e1.dot(&g_u2);

    let g_v1 = (g_e1 - e1 * e1.dot(&g_e1)) / n1;
    (g_v1, g_v2)
}

/// Geodesic angle between two rotations, in `[0, pi]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.quaternion() * b.quaternion().inverse();
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Pinhole intrinsics with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    #[serde(rename = "focal_px")]
    pub focal: f64,
    #[serde(rename = "cx_px")]
    pub cx: f64,
    #[serde(rename = "cy_px")]
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::invalid("focal length", focal));
        }
        Ok(Self { focal, cx, cy })
    }

    /// Intrinsics with the principal point on the image origin.
    pub fn centered(focal: f64) -> Result<Self> {
        Self::new(focal, 0.0, 0.0)
    }

    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal * pc.x / pc.z + self.cx,
            self.focal * pc.y / pc.z + self.cy,
        )
    }
}

/// Projects an object-frame point through `(R, t)` and the camera.
pub fn project_point(
    intrinsics: &CameraIntrinsics,
    rotation: &Rotation,
    translation: &Vector3<f64>,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let pc = rotation.rotate(p) + translation;
    if !(pc.z > 0.0) {
        return Err(Error::NonPositiveDepth {
            index: 0,
            depth: pc.z,
        });
    }
    Ok(intrinsics.project_camera_point(&pc))
}

/// Rotation, translation (meters) and focal length (pixels) of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamStateRepr", into = "ParamStateRepr")]
pub struct ParamState {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub focal: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamStateRepr {
    quat_wxyz: [f64; 4],
    t_m: [f64; 3],
    focal_px: f64,
}

impl TryFrom<ParamStateRepr> for ParamState {
    type Error = Error;

    fn try_from(r: ParamStateRepr) -> Result<Self> {
        let state = ParamState {
            rotation: Rotation::from_wxyz(r.quat_wxyz)?,
            translation: Vector3::from(r.t_m),
            focal: r.focal_px,
        };
        state.validate()?;
        Ok(state)
    }
}

impl From<ParamState> for ParamStateRepr {
    fn from(s: ParamState) -> Self {
        ParamStateRepr {
            quat_wxyz: s.rotation.wxyz(),
            t_m: s.translation.into(),
            focal_px: s.focal,
        }
    }
}

impl ParamState {
    pub fn new(rotation: Rotation, translation: Vector3<f64>, focal: f64) -> Result<Self> {
        let s = Self {
            rotation,
            translation,
            focal,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid("focal length", self.focal));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::Invalid("non-finite translation".into()));
        }
        if !(self.translation.z > 0.0) {
            return Err(Error::invalid("depth", self.translation.z));
        }
        Ok(())
    }

    /// Intrinsics of this state with the principal point at the origin.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            focal: self.focal,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Projection of the object origin, principal point at `(0, 0)`.
    pub fn projected_center(&self) -> Vector2<f64> {
        let t = &self.translation;
        Vector2::new(self.focal * t.x / t.z, self.focal * t.y / t.z)
    }

    /// Projects every model point, reporting the first point behind the camera.
    pub fn project_points(&self, points: &ModelPoints) -> Result<Vec<Vector2<f64>>> {
        let k = self.intrinsics();
        points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let pc = self.transform(p);
                if pc.z > 0.0 {
                    Ok(k.project_camera_point(&pc))
                } else {
                    Err(Error::NonPositiveDepth {
                        index,
                        depth: pc.z,
                    })
                }
            })
            .collect()
    }

    /// Tight box around the projected model points.
    pub fn projected_bbox(&self, points: &ModelPoints) -> Result<BBox> {
        let projected = self.project_points(points)?;
        BBox::enclosing(&projected)
    }
}

/// Axis-aligned 2D box, `(x1, y1)` upper-left and `(x2, y2)` lower-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Invalid(format!(
                "bounding box [{x1}, {y1}, {x2}, {y2}] is empty or inverted"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn enclosing(points: &[Vector2<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("no points to enclose"));
        }
        let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
        let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x1 = x1.min(p.x);
            y1 = y1.min(p.y);
            x2 = x2.max(p.x);
            y2 = y2.max(p.y);
        }
        Self::new(x1, y1, x2, y2)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Default crop enlargement factor.
pub const CROP_ENLARGEMENT: f64 = 1.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSize {
    pub width: f64,
    pub height: f64,
}

/// Crop size around the projected object center that keeps the whole box
/// visible at the target aspect ratio `aspect` (width / height).
pub fn compute_crop(
    bbox: &BBox,
    projected_center: &Vector2<f64>,
    aspect: f64,
    enlargement: f64,
) -> Result<CropSize> {
    if !(aspect > 0.0) {
        return Err(Error::invalid("aspect ratio", aspect));
    }
    if !(enlargement > 0.0) {
        return Err(Error::invalid("crop enlargement", enlargement));
    }
    let (xc, yc) = (projected_center.x, projected_center.y);
    let x_dist = (bbox.x1 - xc).abs().max((bbox.x2 - xc).abs());
    let y_dist = (bbox.y1 - yc).abs().max((bbox.y2 - yc).abs());
    Ok(CropSize {
        width: x_dist.max(y_dist / aspect) * 2.0 * enlargement,
        height: (x_dist / aspect).max(y_dist) * 2.0 * enlargement,
    })
}

/// Intrinsics after cropping at `origin` and resizing by `scale`.
///
/// Cropping only moves the principal point; resizing scales both the
/// principal point and the focal length.
pub fn adjust_intrinsics_for_crop(
    intrinsics: &CameraIntrinsics,
    origin: &Vector2<f64>,
    scale: f64,
) -> Result<CameraIntrinsics> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("resize factor", scale));
    }
    CameraIntrinsics::new(
        intrinsics.focal * scale,
        (intrinsics.cx - origin.x) * scale,
        (intrinsics.cy - origin.y) * scale,
    )
}

/// Points sampled on an object model, in meters in the object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints(Vec<Vector3<f64>>);

impl ModelPoints {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("model has no points"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Invalid(format!("model point {i} is not finite")));
        }
        Ok(Self(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.0
    }

    /// Parses a JSON array of `[x, y, z]` triples.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: Vec<[f64; 3]> = serde_json::from_str(s)?;
        Self::new(raw.into_iter().map(Vector3::from).collect())
    }

    /// Parses the `v` records of a Wavefront OBJ file; everything else is ignored.
    pub fn from_obj_str(s: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in s.lines().enumerate() {
            let mut fields = line.split_whitespace();
            if fields.next() != Some("v") {
                continue;
            }
            let coords: Vec<f64> = fields
                .take(3)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad vertex coordinate: {e}"),
                })?;
            if coords.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "vertex needs three coordinates".into(),
                });
            }
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    /// Loads an `.obj` file or a JSON point array, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("obj") => Self::from_obj_str(&text),
            _ => Self::from_json_str(&text),
        }
    }

    /// Deterministic subset of at most `n` points, drawn without replacement.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if self.0.len() <= n {
            return self.clone();
        }
        let mut rng = crate::rng_for(seed, 0);
        let mut picked = index::sample(&mut rng, self.0.len(), n).into_vec();
        picked.sort_unstable();
        Self(picked.into_iter().map(|i| self.0[i]).collect())
    }

    /// Points spread over the surface of a box centered on the origin.
    pub fn box_surface(size: Vector3<f64>, n: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut rng = crate::rng_for(seed, 0);
        let half = size / 2.0;
        let faces = [
            size.y * size.z,
            size.y * size.z,
            size.x * size.z,
            size.x * size.z,
            size.x * size.y,
            size.x * size.y,
        ];
        let total: f64 = faces.iter().sum();
        let points = (0..n)
            .map(|_| {
                let mut pick = rng.random::<f64>() * total;
                let mut face = 0;
                while face < 5 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let mut p = Vector3::new(
                    rng.random_range(-half.x..=half.x),
                    rng.random_range(-half.y..=half.y),
                    rng.random_range(-half.z..=half.z),
                );
                let axis = face / 2;
                p[axis] = if face % 2 == 0 { -half[axis] } else { half[axis] };
                p
            })
            .collect();
        Self::new(points)
    }
}

impl<'a> IntoIterator for &'a ModelPoints {
    type Item = &'a Vector3<f64>;
    type IntoIter = std::slice::Iter<'a, Vector3<f64>>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}
