//! Bingham distribution on unit quaternions.
//!
//! Density is proportional to `exp(q^T M Z M^T q)` with `Z = diag(z1, z2, z3, 0)`
//! and `z1 <= z2 <= z3 <= 0`. Column `i` of `M` pairs with `z_i`, so the last
//! column is the mode. Quaternions are handled as `[w, x, y, z]` vectors.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rotation;
use crate::SimRng;

/// Concentrations are kept inside `[MIN_CONCENTRATION, 0]`.
pub const MIN_CONCENTRATION: f64 = -900.0;
/// Fewest quaternions accepted by [`fit_bingham`].
pub const MIN_FIT_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinghamRepr", into = "BinghamRepr")]
pub struct BinghamParams {
    orientation: Matrix4<f64>,
    concentration: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinghamRepr {
    /// Row-major orthogonal matrix; column `i` pairs with `z[i]`.
    m: [[f64; 4]; 4],
    z: [f64; 4],
}

impl TryFrom<BinghamRepr> for BinghamParams {
    type Error = Error;

    fn try_from(r: BinghamRepr) -> Result<Self> {
        if r.z[3] != 0.0 {
            return Err(Error::Invalid("last Bingham concentration must be 0".into()));
        }
        let m = Matrix4::from_fn(|i, j| r.m[i][j]);
        BinghamParams::new(m, [r.z[0], r.z[1], r.z[2]])
    }
}

impl From<BinghamParams> for BinghamRepr {
    fn from(p: BinghamParams) -> Self {
        let m = p.orientation;
        let [z1, z2, z3] = p.concentration;
        BinghamRepr {
            m: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            z: [z1, z2, z3, 0.0],
        }
    }
}

impl BinghamParams {
    pub fn new(orientation: Matrix4<f64>, concentration: [f64; 3]) -> Result<Self> {
        if (orientation.transpose() * orientation - Matrix4::identity()).amax() > 1e-9 {
            return Err(Error::Invalid("Bingham orientation is not orthogonal".into()));
        }
        let [z1, z2, z3] = concentration;
        if !(z1 <= z2 && z2 <= z3 && z3 <= 0.0 && z1 >= MIN_CONCENTRATION) {
            return Err(Error::Invalid(format!(
                "Bingham concentrations must satisfy {MIN_CONCENTRATION} <= z1 <= z2 <= z3 <= 0, got {concentration:?}"
            )));
        }
        Ok(Self {
            orientation,
            concentration,
        })
    }

    /// The uniform distribution on the sphere.
    pub fn uniform() -> Self {
        Self {
            orientation: Matrix4::identity(),
            concentration: [0.0; 3],
        }
    }

    pub fn orientation(&self) -> &Matrix4<f64> {
        &self.orientation
    }

    /// `(z1, z2, z3)`; the fourth concentration is always zero.
    pub fn concentration(&self) -> [f64; 3] {
        self.concentration
    }

    fn full_concentration(&self) -> [f64; 4] {
        let [z1, z2, z3] = self.concentration;
        [z1, z2, z3, 0.0]
    }

    /// Most likely quaternion (up to sign).
    pub fn mode(&self) -> Vector4<f64> {
        self.orientation.column(3).into()
    }

    /// `q^T M Z M^T q` for a `[w, x, y, z]` vector.
    pub fn exponent(&self, q: &Vector4<f64>) -> f64 {
        let local = self.orientation.transpose() * q;
        self.full_concentration()
            .iter()
            .zip(local.iter())
            .map(|(z, c)| z * c * c)
            .sum()
    }

    /// Normalized density with respect to the surface measure of the unit sphere.
    pub fn density(&self, q: &Vector4<f64>) -> f64 {
        (self.exponent(q) - log_normalizer(&self.full_concentration())).exp()
    }
}

/// `ln C(z)` with `C(z) = integral over S^3 of exp(sum z_i x_i^2)`.
///
/// Writing `x = (sqrt(u) cos b, sqrt(u) sin b, sqrt(1-u) cos c, sqrt(1-u) sin c)`
/// and integrating `b` and `c` in closed form leaves
///
/// `C(z) = 2 pi^2 * integral_0^1 e^{u m12 + (1-u) m34} I0e(u d12) I0e((1-u) d34) du`
///
/// with `m` the pair maxima, `d` the half pair gaps and `I0e` the scaled
/// modified Bessel function. The remaining integral is smooth and is computed
/// by Gauss-Legendre quadrature on a mesh graded towards `u = 0`.
pub fn log_normalizer(z: &[f64; 4]) -> f64 {
    let mut s = *z;
    s.sort_by(f64::total_cmp);
    let top = s[3];
    let s = s.map(|v| v - top);
    // The two smallest concentrations ride on u, so the integrand peaks at u = 0.
    let (m12, d12) = (s[1], 0.5 * (s[1] - s[0]));
    let (m34, d34) = (s[3], 0.5 * (s[3] - s[2]));
    let integrand =
        |u: f64| (u * m12 + (1.0 - u) * m34).exp() * i0e(u * d12) * i0e((1.0 - u) * d34);

    let (nodes, weights) = gauss_legendre();
    let mut total = 0.0;
    let mut lo = 0.0;
    for k in (0..=QUAD_LEVELS).rev() {
        let hi = 0.5f64.powi(k as i32);
        let (mid, half) = (0.5 * (hi + lo), 0.5 * (hi - lo));
        total += half
            * nodes
                .iter()
                .zip(weights)
                .map(|(x, w)| w * integrand(mid + half * x))
                .sum::<f64>();
        lo = hi;
    }
    top + (2.0 * std::f64::consts::PI.powi(2) * total).ln()
}

const QUAD_LEVELS: usize = 16;
const QUAD_POINTS: usize = 24;

/// `I0(x) e^{-x}` for `x >= 0`.
fn i0e(x: f64) -> f64 {
    puruspe::In(0, x) * (-x).exp()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre() -> &'static ([f64; QUAD_POINTS], [f64; QUAD_POINTS]) {
    static RULE: std::sync::OnceLock<([f64; QUAD_POINTS], [f64; QUAD_POINTS])> =
        std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        let n = QUAD_POINTS;
        let mut nodes = [0.0; QUAD_POINTS];
        let mut weights = [0.0; QUAD_POINTS];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// Sign-invariant average scatter `1/n sum q q^T`.
pub fn scatter_matrix(rotations: &[Rotation]) -> Matrix4<f64> {
    let mut s = Matrix4::zeros();
    for r in rotations {
        let q = Vector4::from(r.wxyz());
        s += q * q.transpose();
    }
    s / rotations.len().max(1) as f64
}

/// Maximum-likelihood Bingham fit.
///
/// The orientation comes from the eigenvectors of the scatter matrix; the
/// concentrations maximize `sum z_i s_i - ln C(z)` where `s_i` are the matching
/// scatter eigenvalues. Concentrated data saturates at [`MIN_CONCENTRATION`].
pub fn fit_bingham(rotations: &[Rotation]) -> Result<BinghamParams> {
    if rotations.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: rotations.len(),
        });
    }
    let scatter = scatter_matrix(rotations);
    if !scatter.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite scatter matrix".into()));
    }
    let eigen = SymmetricEigen::new(scatter);
    // Ascending eigenvalues: column i pairs with z_i, the largest with z = 0.
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));
    let mut m = Matrix4::zeros();
    for (col, &i) in order.iter().enumerate() {
        m.set_column(col, &eigen.eigenvectors.column(i));
    }
    if m.determinant() < 0.0 {
        m.set_column(0, &(-m.column(0)));
    }
    let s: [f64; 3] = std::array::from_fn(|i| eigen.eigenvalues[order[i]].max(0.0));
    let z = fit_concentration(&s);
    BinghamParams::new(m, z)
}

fn neg_log_likelihood(z: &[f64; 3], s: &[f64; 3]) -> f64 {
    log_normalizer(&[z[0], z[1], z[2], 0.0]) - (0..3).map(|i| z[i] * s[i]).sum::<f64>()
}

fn nll_gradient(z: &[f64; 3], s: &[f64; 3]) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let h = 1e-5 * (1.0 + z[i].abs());
        let mut hi = *z;
        let mut lo = *z;
        hi[i] += h;
        lo[i] -= h;
        (neg_log_likelihood(&hi, s) - neg_log_likelihood(&lo, s)) / (2.0 * h)
    })
}

fn clamp_concentration(z: Vector3<f64>) -> [f64; 3] {
    std::array::from_fn(|i| z[i].clamp(MIN_CONCENTRATION, 0.0))
}

/// Projected Newton iterations on the negative log-likelihood.
fn fit_concentration(s: &[f64; 3]) -> [f64; 3] {
    let mut z: [f64; 3] =
        std::array::from_fn(|i| (-0.5 / s[i].max(1e-12)).clamp(MIN_CONCENTRATION, -0.5));
    let mut f = neg_log_likelihood(&z, s);
    for _ in 0..200 {
        let g = nll_gradient(&z, s);
        let hess = Matrix3::from_fn(|i, j| {
            let h = 1e-4 * (1.0 + z[j].abs());
            let mut hi = z;
            let mut lo = z;
            hi[j] += h;
            lo[j] -= h;
            (nll_gradient(&hi, s)[i] - nll_gradient(&lo, s)[i]) / (2.0 * h)
        });
        let hess = 0.5 * (hess + hess.transpose());
        let newton = hess
            .cholesky()
            .map(|c| -c.solve(&g))
            .filter(|d| d.dot(&g) < 0.0)
            .unwrap_or(-g);

        let current = Vector3::from(z);
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-12 {
            let cand = clamp_concentration(current + newton * step);
            let fc = neg_log_likelihood(&cand, s);
            if fc < f - 1e-15 {
                let moved = (Vector3::from(cand) - current).amax();
                z = cand;
                f = fc;
                improved = moved > 1e-10 * (1.0 + current.amax());
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    // Enforce z1 <= z2 <= z3 against round-off.
    z.sort_by(f64::total_cmp);
    z
}

/// Draws `n` quaternions by rejection from an angular central Gaussian envelope.
pub fn sample_bingham(params: &BinghamParams, n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = crate::rng_for(seed, 0);
    let sampler = BinghamSampler::new(params);
    (0..n).map(|_| sampler.sample(&mut rng)).collect()
}

/// Precomputed envelope for repeated Bingham draws.
#[derive(Debug, Clone)]
pub struct BinghamSampler {
    orientation: Matrix4<f64>,
    /// Diagonal of `A = -Z` in the eigenbasis.
    a: [f64; 4],
    /// Diagonal of `Omega = I + 2A/b`.
    omega: [f64; 4],
    log_bound: f64,
}

impl BinghamSampler {
    pub fn new(params: &BinghamParams) -> Self {
        let a = params.full_concentration().map(|z| -z);
        let q = 4.0;
        let envelope_sum = |b: f64| a.iter().map(|ai| 1.0 / (b + 2.0 * ai)).sum::<f64>();
        let (mut lo, mut hi) = (0.0f64, q);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if envelope_sum(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        let omega = a.map(|ai| 1.0 + 2.0 * ai / b);
        let log_bound = -0.5 * (q - b) + 0.5 * q * (q / b).ln();
        Self {
            orientation: params.orientation,
            a,
            omega,
            log_bound,
        }
    }

    pub fn sample(&self, rng: &mut SimRng) -> Rotation {
        loop {
            let y = Vector4::from_fn(|i, _| {
                let g: f64 = rng.sample(StandardNormal);
                g / self.omega[i].sqrt()
            });
            let norm = y.norm();
            if norm == 0.0 {
                continue;
            }
            let x = y / norm;
            let quad_a: f64 = (0..4).map(|i| self.a[i] * x[i] * x[i]).sum();
            let quad_omega: f64 = (0..4).map(|i| self.omega[i] * x[i] * x[i]).sum();
            let log_accept = -quad_a - self.log_bound + 2.0 * quad_omega.ln();
            let u: f64 = rng.random();
            if u.ln() < log_accept {
                let q = self.orientation * x;
                return Rotation::from_wxyz([q[0], q[1], q[2], q[3]])
                    .expect("unit vector has non-zero norm");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_for;
    use crate::sampling::uniform_rotation;

    /// Integral of exp(sum z_i x_i^2) over S^3 by midpoint quadrature in
    /// hyperspherical coordinates, and the second moments E[x_i^2].
    fn quadrature(z: [f64; 4], n: usize) -> (f64, [f64; 4]) {
        use std::f64::consts::PI;
        let (ha, hb, hc) = (PI / n as f64, PI / n as f64, 2.0 * PI / n as f64);
        let mut total = 0.0;
        let mut moments = [0.0; 4];
        for i in 0..n {
            let a = (i as f64 + 0.5) * ha;
            let (sa, ca) = a.sin_cos();
            for j in 0..n {
                let b = (j as f64 + 0.5) * hb;
                let (sb, cb) = b.sin_cos();
                for k in 0..n {
                    let c = (k as f64 + 0.5) * hc;
                    let (sc, cc) = c.sin_cos();
                    let x = [ca, sa * cb, sa * sb * cc, sa * sb * sc];
                    let e: f64 = (0..4).map(|m| z[m] * x[m] * x[m]).sum();
                    let w = e.exp() * sa * sa * sb * ha * hb * hc;
                    total += w;
                    for m in 0..4 {
                        moments[m] += w * x[m] * x[m];
                    }
                }
            }
        }
        (total, moments.map(|m| m / total))
    }

    #[test]
    fn uniform_normalizer_is_sphere_area() {
        let area = 2.0 * std::f64::consts::PI.powi(2);
        assert!((log_normalizer(&[0.0; 4]) - area.ln()).abs() < 1e-9);
        let (q, _) = quadrature([0.0; 4], 60);
        assert!((q - area).abs() / area < 1e-3);
    }

    #[test]
    fn normalizer_matches_quadrature() {
        for z in [[-1.0, -0.5, -0.2, 0.0], [-10.0, -5.0, -2.0, 0.0], [-40.0, -20.0, -3.0, 0.0]] {
            let (exact, _) = quadrature(z, 120);
            let approx = log_normalizer(&z).exp();
            assert!((approx - exact).abs() / exact < 1e-3, "z = {z:?}: {approx} vs {exact}");
        }
    }

    #[test]
    fn normalizer_closed_form_for_paired_concentrations() {
        let area = 2.0 * std::f64::consts::PI.powi(2);
        for a in [-0.5f64, -3.0, -50.0, -900.0] {
            let exact = (area * (a.exp() - 1.0) / a).ln();
            for z in [[a, a, 0.0, 0.0], [0.0, a, 0.0, a]] {
                let got = log_normalizer(&z);
                assert!((got - exact).abs() < 1e-10, "a = {a}: {got} vs {exact}");
            }
            let shifted = log_normalizer(&[a + 2.0, a + 2.0, 2.0, 2.0]);
            assert!((shifted - exact - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn density_is_antipodal() {
        let m = Rotation::rot_x(0.7).matrix();
        let mut orient = Matrix4::identity();
        orient.fixed_view_mut::<3, 3>(1, 1).copy_from(&m);
        let p = BinghamParams::new(orient, [-8.0, -3.0, -1.0]).unwrap();
        let q = Vector4::new(0.3, -0.5, 0.1, 0.8).normalize();
        assert_eq!(p.density(&q), p.density(&-q));
    }

    #[test]
    fn point_mass_saturates() {
        let q0 = Rotation::from_wxyz([0.5, 0.5, -0.5, 0.5]).unwrap();
        let neg = Rotation::from_wxyz(q0.wxyz().map(|c| -c)).unwrap();
        let data: Vec<Rotation> = (0..10).map(|i| if i % 2 == 0 { q0 } else { neg }).collect();
        let p = fit_bingham(&data).unwrap();
        let mode = p.mode();
        assert!((mode.dot(&Vector4::from(q0.wxyz())).abs() - 1.0).abs() < 1e-9);
        assert_eq!(p.concentration(), [MIN_CONCENTRATION; 3]);
    }

    #[test]
    fn too_few_samples() {
        let data = vec![Rotation::identity(); 4];
        assert!(matches!(fit_bingham(&data), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn uniform_data_fits_near_zero() {
        let mut rng = rng_for(3, 0);
        let data: Vec<Rotation> = (0..100_000).map(|_| uniform_rotation(&mut rng)).collect();
        let p = fit_bingham(&data).unwrap();
        for z in p.concentration() {
            assert!((-0.2..=0.0).contains(&z), "{:?}", p.concentration());
        }
    }

    #[test]
    fn sampler_matches_quadrature_moments() {
        let z = [-10.0, -5.0, -2.0, 0.0];
        let p = BinghamParams::new(Matrix4::identity(), [z[0], z[1], z[2]]).unwrap();
        let samples = sample_bingham(&p, 100_000, 11);
        let s = scatter_matrix(&samples);
        let (_, moments) = quadrature(z, 120);
        for i in 0..4 {
            assert!((s[(i, i)] - moments[i]).abs() < 0.005, "{i}: {} vs {}", s[(i, i)], moments[i]);
        }
    }

    #[test]
    fn uniform_sampler_has_isotropic_scatter() {
        let samples = sample_bingham(&BinghamParams::uniform(), 100_000, 5);
        let s = scatter_matrix(&samples);
        for i in 0..4 {
            assert!((s[(i, i)] - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = BinghamParams::new(Matrix4::identity(), [-4.0, -2.0, -1.0]).unwrap();
        assert_eq!(sample_bingham(&p, 500, 9), sample_bingham(&p, 500, 9));
    }

    #[test]
    fn json_round_trip_keeps_parameters() {
        let p = BinghamParams::new(Matrix4::identity(), [-4.0, -2.0, -1.0]).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"z\":[-4.0,-2.0,-1.0,0.0]"));
        let back: BinghamParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let bad = text.replace("0.0]}", "-1.0]}");
        assert!(serde_json::from_str::<BinghamParams>(&bad).is_err());
    }
}
