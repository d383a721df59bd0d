//! Dynamic, birth and measurement models.
//!
//! Object states are `[px, vx, py, vy]` on the ground plane (local frame,
//! metres and metres per second).

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::directional::{clutter_intensity, vmf_log_density, FovSpec, VmfParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{angles_to_doa, ground_to_doa, project_doa_to_ground, CameraPose, UnitVector3};
use crate::slr::{unscented_weights, DEFAULT_W0};

/// Single-object state `[px, vx, py, vy]`.
pub type ObjectState = Vector4<f64>;

/// Ground position of a state.
pub fn position(x: &ObjectState) -> Vector2<f64> {
    Vector2::new(x[0], x[2])
}

/// Nearly constant velocity motion with survival probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub tau: f64,
    pub sigma_q2: f64,
    pub ps: f64,
    pub f: Matrix4<f64>,
    pub q: Matrix4<f64>,
}

/// Builds the constant-velocity model for sampling period `tau`.
pub fn build_cv(tau: f64, sigma_q2: f64, ps: f64) -> Result<MotionModel> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("sampling period must be positive, got {tau}")));
    }
    if !(sigma_q2 >= 0.0) || !(0.0..=1.0).contains(&ps) {
        return Err(invalid(format!("bad motion parameters sigma_q2={sigma_q2}, ps={ps}")));
    }
    let fb = Matrix2::new(1.0, tau, 0.0, 1.0);
    let qb = Matrix2::new(tau.powi(3) / 3.0, tau * tau / 2.0, tau * tau / 2.0, tau) * sigma_q2;
    let mut f = Matrix4::zeros();
    let mut q = Matrix4::zeros();
    for b in 0..2 {
        f.fixed_view_mut::<2, 2>(2 * b, 2 * b).copy_from(&fb);
        q.fixed_view_mut::<2, 2>(2 * b, 2 * b).copy_from(&qb);
    }
    Ok(MotionModel {
        tau,
        sigma_q2,
        ps,
        f,
        q,
    })
}

impl MotionModel {
    /// Same model with a different sampling period.
    pub fn with_tau(&self, tau: f64) -> Result<MotionModel> {
        build_cv(tau, self.sigma_q2, self.ps)
    }
}

/// Birth intensity parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthModel {
    /// Expected births per step after the first.
    pub lambda_bar_b: f64,
    /// Expected objects at the first step.
    pub lambda_bar_b_initial: f64,
    /// Velocity prior variance (m²/s²).
    pub sigma_v2: f64,
}

impl BirthModel {
    pub fn new(lambda_bar_b: f64, lambda_bar_b_initial: f64, sigma_v2: f64) -> Result<Self> {
        if !(lambda_bar_b >= 0.0 && lambda_bar_b_initial >= 0.0 && sigma_v2 >= 0.0) {
            return Err(invalid("birth rates and velocity variance must be nonnegative"));
        }
        Ok(Self {
            lambda_bar_b,
            lambda_bar_b_initial,
            sigma_v2,
        })
    }

    /// Expected number of births at `step`.
    pub fn rate(&self, step: usize) -> f64 {
        if step == 0 {
            self.lambda_bar_b_initial
        } else {
            self.lambda_bar_b
        }
    }
}

/// DOA sensor: VMF detections, constant detection probability and uniform
/// clutter on the FoV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    pub kappa: f64,
    pub pd: f64,
    pub lambda_c: f64,
    pub fov: FovSpec,
}

impl MeasurementModel {
    pub fn new(kappa: f64, pd: f64, lambda_c: f64, fov: FovSpec) -> Result<Self> {
        if !(kappa >= 0.0) || !(0.0..=1.0).contains(&pd) || !(lambda_c >= 0.0) {
            return Err(invalid(format!(
                "bad measurement model kappa={kappa}, pd={pd}, lambda_c={lambda_c}"
            )));
        }
        Ok(Self {
            kappa,
            pd,
            lambda_c,
            fov,
        })
    }

    /// Clutter intensity at `z` w.r.t. the uniform distribution on the sphere.
    pub fn clutter_intensity(&self, z: &UnitVector3) -> f64 {
        clutter_intensity(z, &self.fov, self.lambda_c)
    }
}

/// Expected camera-frame DOA of an object: `R_q(p − s)/‖R_q(p − s)‖`.
pub fn doa_mean(x: &ObjectState, pose: &CameraPose) -> Result<UnitVector3> {
    ground_to_doa(x[0], x[2], pose)
}

/// `ln V(z; h(x), κ)`.
pub fn measurement_log_likelihood(
    z: &UnitVector3,
    x: &ObjectState,
    model: &MeasurementModel,
    pose: &CameraPose,
) -> Result<f64> {
    let mu = doa_mean(x, pose)?;
    Ok(vmf_log_density(z, &VmfParams { mu, kappa: model.kappa }))
}

/// Gaussian birth component.
#[derive(Debug, Clone, PartialEq)]
pub struct BirthComponent {
    pub weight: f64,
    pub mean: ObjectState,
    pub cov: Matrix4<f64>,
}

/// Gaussian birth density covering the camera footprint.
///
/// The angular variable is given the moments of a uniform distribution on the
/// FoV rectangle, `diag(fx², fy²)/12`. Its five unscented points (centre weight
/// `w0`) are mapped to DOAs and projected onto the ground; the weighted
/// moments of the ground points give the positional Gaussian. Velocity has
/// zero mean and variance `sigma_v2` per axis.
pub fn birth_components(pose: &CameraPose, birth: &BirthModel, step: usize, w0: f64) -> Result<BirthComponent> {
    let (fx, fy) = pose.fov;
    let d = 2usize;
    let (wc, wo) = unscented_weights(d, w0)?;
    let spread = (d as f64 / (1.0 - w0)).sqrt();
    let sd = [fx / 12f64.sqrt(), fy / 12f64.sqrt()];
    // Square root of the diagonal covariance rotated by 45°, which puts the
    // points on the diagonals of the FoV rectangle. The footprint is a
    // trapezoid, so azimuth and elevation interact in the projection and
    // axis-aligned points miss most of the positional cross-covariance.
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let columns = [(sd[0] * h, sd[1] * h), (-sd[0] * h, sd[1] * h)];
    let mut angles = vec![(0.0, 0.0)];
    for (a, b) in columns {
        for sign in [1.0, -1.0] {
            angles.push((sign * spread * a, sign * spread * b));
        }
    }
    let mut pts = Vec::with_capacity(angles.len());
    for (phi, theta) in angles {
        let p = project_doa_to_ground(&angles_to_doa(phi, theta), pose).map_err(|e| match e {
            Error::NoIntersection => Error::DegenerateGeometry(format!(
                "birth sigma point at azimuth {phi:.4} rad, elevation {theta:.4} rad does not reach the ground"
            )),
            other => other,
        })?;
        pts.push(p);
    }
    let weights: Vec<f64> = (0..pts.len()).map(|j| if j == 0 { wc } else { wo }).collect();
    let mean: Vector2<f64> = pts.iter().zip(&weights).map(|(p, w)| p * *w).sum();
    let pcov: Matrix2<f64> = pts
        .iter()
        .zip(&weights)
        .map(|(p, w)| (p - mean) * (p - mean).transpose() * *w)
        .sum();
    let mut cov = Matrix4::zeros();
    cov[(0, 0)] = pcov[(0, 0)];
    cov[(0, 2)] = pcov[(0, 1)];
    cov[(2, 0)] = pcov[(1, 0)];
    cov[(2, 2)] = pcov[(1, 1)];
    cov[(1, 1)] = birth.sigma_v2;
    cov[(3, 3)] = birth.sigma_v2;
    Ok(BirthComponent {
        weight: birth.rate(step),
        mean: Vector4::new(mean.x, 0.0, mean.y, 0.0),
        cov,
    })
}

/// Birth component with the default unscented centre weight.
pub fn default_birth(pose: &CameraPose, birth: &BirthModel, step: usize) -> Result<BirthComponent> {
    birth_components(pose, birth, step, DEFAULT_W0)
}
