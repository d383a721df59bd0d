//! Von Mises–Fisher distribution on the unit sphere S² and the uniform
//! clutter model over the camera field of view.
//!
//! Densities are taken with respect to the uniform distribution on S², so the
//! uniform distribution itself has density 1. For S² all Bessel quantities
//! have closed forms in terms of hyperbolic functions:
//!
//! * normalized density `κ exp(κ μᵀz) / sinh κ`,
//! * mean resultant length `A₃(κ) = I_{3/2}(κ)/I_{1/2}(κ) = coth κ − 1/κ`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::{angles_to_doa, doa_to_angles, UnitVector3};

/// Parameters of a VMF distribution on S².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfParams {
    pub mu: UnitVector3,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector3, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(invalid(format!("concentration must be finite and >= 0, got {kappa}")));
        }
        Ok(Self { mu, kappa })
    }
}

/// `ln(κ / sinh κ)`, the log normalizer of the VMF density on S².
pub fn vmf_log_normalizer(kappa: f64) -> f64 {
    if kappa < 1e-8 {
        // κ/sinh κ = 1 − κ²/6 + O(κ⁴)
        return -kappa * kappa / 6.0;
    }
    // ln κ − ln sinh κ with sinh κ = e^κ (1 − e^{−2κ}) / 2
    kappa.ln() - kappa - (-(-2.0 * kappa).exp()).ln_1p() + std::f64::consts::LN_2
}

/// Log-density of `z` with respect to the uniform distribution on S².
pub fn vmf_log_density(z: &UnitVector3, params: &VmfParams) -> f64 {
    vmf_log_normalizer(params.kappa) + params.kappa * params.mu.dot(z)
}

/// Density of `z` with respect to the uniform distribution on S².
pub fn vmf_density(z: &UnitVector3, params: &VmfParams) -> f64 {
    vmf_log_density(z, params).exp()
}

/// Mean resultant length `A₃(κ) = coth κ − 1/κ`, defined as 0 at κ = 0.
pub(crate) fn mean_resultant_length(kappa: f64) -> f64 {
    if kappa < 1e-3 {
        // κ/3 − κ³/45 + 2κ⁵/945
        let k2 = kappa * kappa;
        return kappa * (1.0 / 3.0 - k2 / 45.0 + 2.0 * k2 * k2 / 945.0);
    }
    if kappa > 20.0 {
        // coth κ = 1 + 2e^{−2κ}/(1 − e^{−2κ})
        let e = (-2.0 * kappa).exp();
        return 1.0 + 2.0 * e / (1.0 - e) - 1.0 / kappa;
    }
    1.0 / kappa.tanh() - 1.0 / kappa
}

/// Bessel ratio `I_{3/2}(κ)/I_{1/2}(κ)`.
pub fn bessel_ratio(kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(invalid(format!("bessel_ratio needs kappa > 0, got {kappa}")));
    }
    Ok(mean_resultant_length(kappa))
}

/// Solves `bessel_ratio(κ) = r` by bisection on `[1e-6, 1e7]` to a relative
/// tolerance of `1e-8`.
pub fn inverse_bessel_ratio(r: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid(format!("mean resultant length must lie in (0, 1), got {r}")));
    }
    let (mut lo, mut hi) = (1e-6_f64, 1e7_f64);
    if mean_resultant_length(lo) >= r {
        return Ok(lo);
    }
    if mean_resultant_length(hi) <= r {
        return Ok(hi);
    }
    while (hi - lo) > 1e-8 * lo {
        // Geometric midpoint: the bracket spans thirteen decades.
        let mid = if hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mean_resultant_length(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean vector and covariance matrix of a VMF distribution.
pub fn vmf_moments(params: &VmfParams) -> (Vector3<f64>, Matrix3<f64>) {
    let kappa = params.kappa;
    let mu = params.mu.as_vector();
    if kappa == 0.0 {
        return (Vector3::zeros(), Matrix3::identity() / 3.0);
    }
    let a = mean_resultant_length(kappa);
    let (tangential, radial) = moment_scales(kappa, a);
    let cov = Matrix3::identity() * tangential + mu * mu.transpose() * (radial - tangential);
    (mu * a, cov)
}

/// Tangential variance `A/κ` and radial variance `1 − 2A/κ − A²`.
pub(crate) fn moment_scales(kappa: f64, a: f64) -> (f64, f64) {
    if kappa < 1e-3 {
        let k2 = kappa * kappa;
        return (1.0 / 3.0 - k2 / 45.0, 1.0 / 3.0 - k2 / 15.0);
    }
    let tangential = a / kappa;
    let radial = if kappa > 50.0 {
        // The direct form cancels catastrophically; 1/κ² − 4e^{−2κ} is exact
        // to O(e^{−2κ}/κ).
        1.0 / (kappa * kappa) - 4.0 * (-2.0 * kappa).exp()
    } else {
        1.0 - 2.0 * a / kappa - a * a
    };
    (tangential, radial.max(0.0))
}

/// Orthonormal vectors completing `mu` to a basis.
pub(crate) fn tangent_basis(mu: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if mu.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - mu * mu.dot(&helper)).normalize();
    let e2 = mu.cross(&e1);
    (e1, e2)
}

/// Draws one VMF sample by exact inversion of the cosine distribution.
pub fn vmf_sample_one<R: Rng + ?Sized>(params: &VmfParams, rng: &mut R) -> UnitVector3 {
    let kappa = params.kappa;
    let u: f64 = rng.random();
    let angle: f64 = rng.random::<f64>() * 2.0 * PI;
    // 1 − w where w = μᵀz.
    let one_minus_w = if kappa == 0.0 {
        2.0 * (1.0 - u)
    } else {
        let s = -(-2.0 * kappa).exp_m1(); // 1 − e^{−2κ}
        (-(-(1.0 - u) * s).ln_1p() / kappa).min(2.0)
    };
    let w = 1.0 - one_minus_w;
    let sin_t = (one_minus_w * (2.0 - one_minus_w)).max(0.0).sqrt();
    let mu = params.mu.as_vector();
    let (e1, e2) = tangent_basis(mu);
    let v = mu * w + (e1 * angle.cos() + e2 * angle.sin()) * sin_t;
    UnitVector3::new(v).expect("sample has unit norm")
}

/// Draws `n` i.i.d. VMF samples.
pub fn vmf_sample<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Vec<UnitVector3> {
    (0..n).map(|_| vmf_sample_one(params, rng)).collect()
}

/// Rectangular camera field of view in azimuth/elevation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovSpec {
    pub fx: f64,
    pub fy: f64,
}

impl FovSpec {
    pub fn new(fx: f64, fy: f64) -> Result<Self> {
        if !(fx > 0.0 && fx <= 2.0 * PI) || !(fy > 0.0 && fy <= PI) {
            return Err(invalid(format!("field of view ({fx}, {fy}) rad out of range")));
        }
        Ok(Self { fx, fy })
    }

    pub fn from_degrees(fx_deg: f64, fy_deg: f64) -> Result<Self> {
        Self::new(fx_deg.to_radians(), fy_deg.to_radians())
    }

    /// FoV membership. The azimuth is taken in (-π, π], so for fx < π every
    /// member points in front of the camera (z_x > 0).
    pub fn contains(&self, z: &UnitVector3) -> bool {
        let (phi, theta) = doa_to_angles(z);
        phi.abs() <= self.fx / 2.0 && theta.abs() <= self.fy / 2.0
    }

    /// Draws a direction uniformly (w.r.t. area) from the FoV. The area
    /// element `cos θ dθ dφ` separates, so `φ` is uniform and `sin θ` is
    /// uniform.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> UnitVector3 {
        let phi = (rng.random::<f64>() - 0.5) * self.fx;
        let smax = (self.fy / 2.0).sin();
        let theta = ((2.0 * rng.random::<f64>() - 1.0) * smax).asin();
        angles_to_doa(phi, theta)
    }

    /// Same as [`FovSpec::sample_uniform`] restricted to the central
    /// `fraction` of both angular extents.
    pub fn sample_uniform_inner<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> UnitVector3 {
        let inner = FovSpec {
            fx: self.fx * fraction,
            fy: self.fy * fraction,
        };
        inner.sample_uniform(rng)
    }
}

/// Uniform-distribution mass of the FoV: `fx sin(fy/2) / (2π)`.
pub fn clutter_constant(fov: &FovSpec) -> f64 {
    fov.fx * (fov.fy / 2.0).sin() / (2.0 * PI)
}

/// Clutter intensity (w.r.t. the uniform distribution on S²) for an expected
/// `lambda_bar` false alarms per frame.
pub fn clutter_intensity(z: &UnitVector3, fov: &FovSpec, lambda_bar: f64) -> f64 {
    if fov.contains(z) {
        lambda_bar / clutter_constant(fov)
    } else {
        0.0
    }
}
