//! Sigma points, statistical linear regression, the iterated posterior
//! linearisation filter (IPLF) and trajectory Gaussians.
//!
//! Single-state computations use fixed-size matrices ([`Gaussian`]); stacked
//! trajectory windows use dynamic ones ([`GaussianDensity`]).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::directional::{mean_resultant_length, moment_scales, tangent_basis, vmf_log_density, VmfParams};
use crate::error::{invalid, Result};
use crate::geometry::{CameraPose, UnitVector3};
use crate::linalg;
use crate::models::{doa_mean, MeasurementModel, MotionModel, ObjectState};

/// Default weight of the central unscented point.
pub const DEFAULT_W0: f64 = 1.0 / 3.0;

/// Single-object state dimension.
pub const NX: usize = 4;

/// Central and peripheral unscented weights for dimension `d`.
pub fn unscented_weights(d: usize, w0: f64) -> Result<(f64, f64)> {
    if d == 0 || !w0.is_finite() || w0 >= 1.0 {
        return Err(invalid(format!(
            "unscented weights need d >= 1 and w0 < 1, got d={d}, w0={w0}"
        )));
    }
    Ok((w0, (1.0 - w0) / (2 * d) as f64))
}

/// Fixed-size Gaussian density.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<const D: usize> {
    pub mean: SVector<f64, D>,
    pub cov: SMatrix<f64, D, D>,
}

/// Gaussian over a single object state.
pub type Gaussian4 = Gaussian<NX>;

impl<const D: usize> Gaussian<D> {
    pub fn new(mean: SVector<f64, D>, cov: SMatrix<f64, D, D>) -> Self {
        Self { mean, cov }
    }

    pub fn log_density(&self, x: &SVector<f64, D>) -> f64 {
        let (inv, logdet) = linalg::inv_logdet(&self.cov);
        let d = x - self.mean;
        -0.5 * (d.dot(&(inv * d)) + logdet + D as f64 * (2.0 * PI).ln())
    }

    /// Unscented points and their (central, peripheral) weights.
    pub fn sigma_points(&self, w0: f64) -> Result<(Vec<SVector<f64, D>>, f64, f64)> {
        let (wc, wo) = unscented_weights(D, w0)?;
        if !self.cov.iter().chain(self.mean.iter()).all(|v| v.is_finite()) {
            return Err(invalid("non-finite Gaussian"));
        }
        let s = linalg::sqrt(&self.cov) * (D as f64 / (1.0 - w0)).sqrt();
        let mut pts = Vec::with_capacity(2 * D + 1);
        pts.push(self.mean);
        for i in 0..D {
            let c = s.column(i);
            pts.push(self.mean + c);
            pts.push(self.mean - c);
        }
        Ok((pts, wc, wo))
    }

    pub fn to_dynamic(&self) -> GaussianDensity {
        GaussianDensity {
            mean: DVector::from_column_slice(self.mean.as_slice()),
            cov: DMatrix::from_column_slice(D, D, self.cov.as_slice()),
        }
    }
}

/// Gaussian density of arbitrary dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    /// Validates symmetry (1e-10) and eigenvalues (≥ −1e-9), then clamps.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(invalid(format!(
                "covariance is {}x{}, mean has {d} entries",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !cov.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(invalid("non-finite Gaussian"));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-10 {
            return Err(invalid("covariance is not symmetric"));
        }
        if d > 0 {
            let min = cov.clone().symmetric_eigenvalues().min();
            if min < -1e-9 {
                return Err(invalid(format!("covariance has eigenvalue {min}")));
            }
        }
        Ok(Self {
            cov: linalg::clamp_psd_dyn(&cov),
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fixed-size copy; fails if the dimension differs.
    pub fn to_static<const D: usize>(&self) -> Result<Gaussian<D>> {
        if self.dim() != D {
            return Err(invalid(format!("expected dimension {D}, got {}", self.dim())));
        }
        Ok(Gaussian {
            mean: SVector::from_column_slice(self.mean.as_slice()),
            cov: SMatrix::from_column_slice(self.cov.as_slice()),
        })
    }

    /// Marginal of state block `i` (4 entries each).
    pub fn block(&self, i: usize) -> Gaussian4 {
        let o = i * NX;
        Gaussian {
            mean: self.mean.fixed_rows::<NX>(o).into_owned(),
            cov: self.cov.fixed_view::<NX, NX>(o, o).into_owned(),
        }
    }
}

/// Unscented points `(points, weights)` of a Gaussian with centre weight `w0`.
pub fn unscented_points(g: &GaussianDensity, w0: f64) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let d = g.dim();
    let (wc, wo) = unscented_weights(d, w0)?;
    if !g.cov.iter().chain(g.mean.iter()).all(|v| v.is_finite()) {
        return Err(invalid("non-finite Gaussian"));
    }
    let s = linalg::sqrt_dyn(&g.cov) * (d as f64 / (1.0 - w0)).sqrt();
    let mut pts = vec![g.mean.clone()];
    let mut w = vec![wc];
    for i in 0..d {
        let c = s.column(i);
        pts.push(&g.mean + c);
        pts.push(&g.mean - c);
        w.extend([wo, wo]);
    }
    Ok((pts, w))
}

/// Conditional measurement moments `x ↦ (E[z|x], Cov[z|x])`, z ∈ R³.
pub trait MomentMap<const D: usize> {
    fn moments(&self, x: &SVector<f64, D>) -> Result<(Vector3<f64>, Matrix3<f64>)>;
}

/// Affine fit `z ≈ A x + b + e`, `e ~ N(0, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationResult<const D: usize> {
    pub a: SMatrix<f64, 3, D>,
    pub b: Vector3<f64>,
    pub omega: Matrix3<f64>,
}

impl<const D: usize> LinearizationResult<D> {
    /// Predicted measurement mean and covariance under `g`.
    pub fn predict(&self, g: &Gaussian<D>) -> (Vector3<f64>, Matrix3<f64>) {
        let z = self.a * g.mean + self.b;
        let s = self.a * g.cov * self.a.transpose() + self.omega;
        (z, linalg::symmetrize(&s))
    }
}

/// Statistical linear regression of `map` with respect to `prior`.
pub fn slr<const D: usize, M: MomentMap<D> + ?Sized>(
    map: &M,
    prior: &Gaussian<D>,
    w0: f64,
) -> Result<LinearizationResult<D>> {
    let (pts, wc, wo) = prior.sigma_points(w0)?;
    let mut zs = Vec::with_capacity(pts.len());
    let mut zbar = Vector3::zeros();
    let mut phi = Matrix3::zeros();
    for (j, x) in pts.iter().enumerate() {
        let w = if j == 0 { wc } else { wo };
        let (m, c) = map.moments(x)?;
        zbar += m * w;
        phi += c * w;
        zs.push(m);
    }
    let mut psi = SMatrix::<f64, D, 3>::zeros();
    for (j, (x, z)) in pts.iter().zip(&zs).enumerate() {
        let w = if j == 0 { wc } else { wo };
        let dz = z - zbar;
        psi += (x - prior.mean) * dz.transpose() * w;
        phi += dz * dz.transpose() * w;
    }
    let a = psi.transpose() * linalg::inverse(&prior.cov);
    let b = zbar - a * prior.mean;
    let omega = linalg::clamp_psd(&(phi - a * prior.cov * a.transpose()));
    Ok(LinearizationResult { a, b, omega })
}

/// Kalman update of `prior` with the affine model `lin` and measurement `z`.
pub fn linear_update<const D: usize>(
    prior: &Gaussian<D>,
    lin: &LinearizationResult<D>,
    z: &Vector3<f64>,
) -> Gaussian<D> {
    let (zhat, s) = lin.predict(prior);
    let pht = prior.cov * lin.a.transpose();
    let k = pht * linalg::inverse(&s);
    let mean = prior.mean + k * (z - zhat);
    let cov = prior.cov - k * pht.transpose();
    Gaussian {
        mean,
        cov: linalg::clamp_psd(&cov),
    }
}

/// `KL(a ‖ b)` for fixed-size Gaussians.
pub fn kld<const D: usize>(a: &Gaussian<D>, b: &Gaussian<D>) -> f64 {
    let (_, ld_a) = linalg::inv_logdet(&a.cov);
    let (ib, ld_b) = linalg::inv_logdet(&b.cov);
    let d = b.mean - a.mean;
    (0.5 * ((ib * a.cov).trace() + d.dot(&(ib * d)) - D as f64 + ld_b - ld_a)).max(0.0)
}

/// `KL(a ‖ b)`.
pub fn kld_gaussians(a: &GaussianDensity, b: &GaussianDensity) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("dimension mismatch {} vs {}", a.dim(), b.dim())));
    }
    let (_, ld_a) = linalg::inv_logdet_dyn(&a.cov);
    let (ib, ld_b) = linalg::inv_logdet_dyn(&b.cov);
    let d = &b.mean - &a.mean;
    let quad = d.dot(&(&ib * &d));
    Ok((0.5 * ((&ib * &a.cov).trace() + quad - a.dim() as f64 + ld_b - ld_a)).max(0.0))
}

/// Iteration controls shared by all IPLF variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IplfSettings {
    pub max_iters: usize,
    pub kld_threshold: f64,
    pub w0: f64,
}

impl Default for IplfSettings {
    fn default() -> Self {
        Self {
            max_iters: 5,
            kld_threshold: 1e-2,
            w0: DEFAULT_W0,
        }
    }
}

/// Result of the generic IPLF loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IplfIterate<const D: usize> {
    pub posterior: Gaussian<D>,
    /// Linearization that produced `posterior`.
    pub lin: LinearizationResult<D>,
    pub iters: usize,
    /// Set when the divergence guard returned an earlier iterate.
    pub diverged: bool,
}

fn gaussian3_log_density(z: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    let (inv, logdet) = linalg::inv_logdet(cov);
    let d = z - mean;
    -0.5 * (d.dot(&(inv * d)) + logdet + 3.0 * (2.0 * PI).ln())
}

/// IPLF: re-linearize at the current iterate and update the prior, until the
/// KLD between consecutive iterates drops below the threshold or
/// `max_iters` linearizations were used. `first` may supply the
/// linearization at the prior.
pub fn iplf<const D: usize, M: MomentMap<D> + ?Sized>(
    prior: &Gaussian<D>,
    z: &Vector3<f64>,
    map: &M,
    settings: &IplfSettings,
    first: Option<&LinearizationResult<D>>,
) -> Result<IplfIterate<D>> {
    if settings.max_iters == 0 {
        return Err(invalid("IPLF needs at least one iteration"));
    }
    let lin = match first {
        Some(l) => l.clone(),
        None => slr(map, prior, settings.w0)?,
    };
    let mut current = linear_update(prior, &lin, z);
    let mut current_lin = lin;
    let mut iters = 1;
    let mut history: Vec<(Gaussian<D>, LinearizationResult<D>)> = Vec::new();
    let mut last_kld = f64::INFINITY;
    let mut increases = 0;
    while iters < settings.max_iters {
        let lin = slr(map, &current, settings.w0)?;
        let next = linear_update(prior, &lin, z);
        let k = kld(&next, &current);
        iters += 1;
        history.push((current, current_lin));
        current = next;
        current_lin = lin;
        if k < settings.kld_threshold {
            break;
        }
        increases = if k > last_kld { increases + 1 } else { 0 };
        last_kld = k;
        if increases >= 3 {
            history.push((current, current_lin));
            let score = |l: &LinearizationResult<D>| {
                let (m, s) = l.predict(prior);
                gaussian3_log_density(z, &m, &s)
            };
            let best = history
                .into_iter()
                .max_by(|a, b| score(&a.1).total_cmp(&score(&b.1)))
                .expect("history is not empty");
            return Ok(IplfIterate {
                posterior: best.0,
                lin: best.1,
                iters,
                diverged: true,
            });
        }
    }
    Ok(IplfIterate {
        posterior: current,
        lin: current_lin,
        iters,
        diverged: false,
    })
}

/// VMF measurement moments for a camera pose: `E[z|x] = A₃(κ) h(x)` and the
/// VMF covariance around `h(x)`.
#[derive(Debug, Clone, Copy)]
pub struct VmfMomentMap<'a> {
    pose: &'a CameraPose,
    scale: f64,
    tangential: f64,
    radial: f64,
}

impl<'a> VmfMomentMap<'a> {
    pub fn new(kappa: f64, pose: &'a CameraPose) -> Self {
        let (scale, tangential, radial) = if kappa == 0.0 {
            (0.0, 1.0 / 3.0, 1.0 / 3.0)
        } else {
            let a = mean_resultant_length(kappa);
            let (t, r) = moment_scales(kappa, a);
            (a, t, r)
        };
        Self {
            pose,
            scale,
            tangential,
            radial,
        }
    }
}

impl MomentMap<NX> for VmfMomentMap<'_> {
    fn moments(&self, x: &ObjectState) -> Result<(Vector3<f64>, Matrix3<f64>)> {
        let h = doa_mean(x, self.pose)?;
        let h = h.as_vector();
        let cov = Matrix3::identity() * self.tangential + h * h.transpose() * (self.radial - self.tangential);
        Ok((h * self.scale, cov))
    }
}

/// Predicted measurement density of an SLR linearization, restricted to the
/// plane tangent to the sphere at the predicted direction.
///
/// Densities are w.r.t. the uniform distribution on the sphere (the
/// tangent-plane density times 4π), the same reference measure as the VMF
/// likelihood and the clutter intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMeasurement {
    pub zhat: Vector3<f64>,
    pub s: Matrix3<f64>,
    basis: SMatrix<f64, 3, 2>,
    s2_inv: Matrix2<f64>,
    s2_logdet: f64,
}

impl PredictedMeasurement {
    pub fn new<const D: usize>(lin: &LinearizationResult<D>, prior: &Gaussian<D>) -> Self {
        let (zhat, s) = lin.predict(prior);
        let n = zhat.norm();
        let dir = if n > 1e-12 { zhat / n } else { Vector3::x() };
        let (e1, e2) = tangent_basis(&dir);
        let basis = SMatrix::<f64, 3, 2>::from_columns(&[e1, e2]);
        let s2 = basis.transpose() * s * basis;
        let (s2_inv, s2_logdet) = linalg::inv_logdet(&s2);
        Self {
            zhat,
            s,
            basis,
            s2_inv,
            s2_logdet,
        }
    }

    fn residual(&self, z: &UnitVector3) -> Vector2<f64> {
        self.basis.transpose() * (z.as_vector() - self.zhat)
    }

    /// Squared Mahalanobis distance in the tangent plane.
    pub fn mahalanobis2(&self, z: &UnitVector3) -> f64 {
        let r = self.residual(z);
        r.dot(&(self.s2_inv * r))
    }

    /// Gaussian log-density of `z` w.r.t. the uniform distribution on S².
    pub fn log_density(&self, z: &UnitVector3) -> f64 {
        -0.5 * (self.mahalanobis2(z) + self.s2_logdet) - (2.0 * PI).ln() + (4.0 * PI).ln()
    }
}

/// Which approximation of the measurement marginal likelihood to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodMode {
    /// Gaussian predicted-measurement density under the final linearization.
    L0,
    /// Sigma-point importance quadrature of the exact VMF likelihood with the
    /// IPLF posterior as proposal.
    #[default]
    L1,
}

/// Settings of the VMF IPLF update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IplfConfig {
    pub settings: IplfSettings,
    pub likelihood: LikelihoodMode,
}

impl Default for IplfConfig {
    fn default() -> Self {
        Self {
            settings: IplfSettings::default(),
            likelihood: LikelihoodMode::L1,
        }
    }
}

/// Output of [`iplf_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct IplfOutcome {
    pub posterior: Gaussian4,
    /// Log marginal likelihood of `z` w.r.t. the uniform distribution on S².
    pub log_marginal: f64,
    pub iters_used: usize,
    pub diverged: bool,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sigma-point importance estimate of `ln ∫ V(z; h(x), κ) N(x; prior) dx`
/// with `posterior` as proposal.
pub fn importance_log_marginal(
    prior: &Gaussian4,
    posterior: &Gaussian4,
    z: &UnitVector3,
    kappa: f64,
    pose: &CameraPose,
    w0: f64,
) -> Result<f64> {
    let (pts, wc, wo) = posterior.sigma_points(w0)?;
    let (ip, ldp) = linalg::inv_logdet(&prior.cov);
    let (iq, ldq) = linalg::inv_logdet(&posterior.cov);
    let mut terms = Vec::with_capacity(pts.len());
    for (j, x) in pts.iter().enumerate() {
        let w: f64 = if j == 0 { wc } else { wo };
        if w <= 0.0 {
            continue;
        }
        let mu = doa_mean(x, pose)?;
        let ll = vmf_log_density(z, &VmfParams { mu, kappa });
        let dp = x - prior.mean;
        let dq = x - posterior.mean;
        let log_ratio = -0.5 * (dp.dot(&(ip * dp)) + ldp) + 0.5 * (dq.dot(&(iq * dq)) + ldq);
        terms.push(w.ln() + ll + log_ratio);
    }
    Ok(log_sum_exp(&terms))
}

/// IPLF update of a single-object prior with a VMF measurement.
pub fn iplf_update(
    prior: &Gaussian4,
    z: &UnitVector3,
    model: &MeasurementModel,
    pose: &CameraPose,
    cfg: &IplfConfig,
) -> Result<IplfOutcome> {
    let map = VmfMomentMap::new(model.kappa, pose);
    iplf_update_with(prior, z, &map, model.kappa, pose, cfg, None)
}

pub(crate) fn iplf_update_with(
    prior: &Gaussian4,
    z: &UnitVector3,
    map: &VmfMomentMap<'_>,
    kappa: f64,
    pose: &CameraPose,
    cfg: &IplfConfig,
    first: Option<(&LinearizationResult<NX>, &PredictedMeasurement)>,
) -> Result<IplfOutcome> {
    let it = iplf(prior, z.as_vector(), map, &cfg.settings, first.map(|f| f.0))?;
    let log_marginal = match cfg.likelihood {
        LikelihoodMode::L0 => match first {
            Some((l, pm)) if it.iters == 1 && !it.diverged && *l == it.lin => pm.log_density(z),
            _ => PredictedMeasurement::new(&it.lin, prior).log_density(z),
        },
        LikelihoodMode::L1 => importance_log_marginal(prior, &it.posterior, z, kappa, pose, cfg.settings.w0)?,
    };
    Ok(IplfOutcome {
        posterior: it.posterior,
        log_marginal,
        iters_used: it.iters,
        diverged: it.diverged,
    })
}

/// Squared tangent-plane Mahalanobis distance of `z` under the SLR predicted
/// measurement at `prior`.
pub fn gate_distance(
    prior: &Gaussian4,
    z: &UnitVector3,
    model: &MeasurementModel,
    pose: &CameraPose,
    w0: f64,
) -> Result<f64> {
    let map = VmfMomentMap::new(model.kappa, pose);
    let lin = slr(&map, prior, w0)?;
    Ok(PredictedMeasurement::new(&lin, prior).mahalanobis2(z))
}

/// Ellipsoidal gate.
pub fn gate(
    prior: &Gaussian4,
    z: &UnitVector3,
    model: &MeasurementModel,
    pose: &CameraPose,
    threshold: f64,
) -> Result<bool> {
    Ok(gate_distance(prior, z, model, pose, DEFAULT_W0)? <= threshold)
}

/// One end-time hypothesis of a trajectory: frozen marginals of old states
/// followed by a joint Gaussian over the most recent states.
#[derive(Debug, Clone, PartialEq)]
pub struct EndComponent {
    pub end_step: usize,
    /// Probability β that the trajectory ends at `end_step`.
    pub weight: f64,
    pub history: Vec<Gaussian4>,
    pub window: GaussianDensity,
}

impl EndComponent {
    /// Number of states in the joint window.
    pub fn window_len(&self) -> usize {
        self.window.dim() / NX
    }

    pub fn len(&self) -> usize {
        self.history.len() + self.window_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Marginal of the last state.
    pub fn last(&self) -> Gaussian4 {
        self.window.block(self.window_len() - 1)
    }

    /// Per-step marginals from the birth step to the end step.
    pub fn marginals(&self) -> Vec<Gaussian4> {
        let mut out = self.history.clone();
        out.extend((0..self.window_len()).map(|i| self.window.block(i)));
        out
    }

    /// Per-step mean states.
    pub fn mean_states(&self) -> Vec<ObjectState> {
        let mut out: Vec<ObjectState> = self.history.iter().map(|g| g.mean).collect();
        out.extend((0..self.window_len()).map(|i| self.window.mean.fixed_rows::<NX>(i * NX).into_owned()));
        out
    }
}

/// Gaussian mixture over the end time of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGaussian {
    pub birth_step: usize,
    pub components: Vec<EndComponent>,
}

impl TrajectoryGaussian {
    /// Trajectory with a single state at `birth_step`.
    pub fn new(birth_step: usize, state: &Gaussian4) -> Self {
        Self {
            birth_step,
            components: vec![EndComponent {
                end_step: birth_step,
                weight: 1.0,
                history: Vec::new(),
                window: state.to_dynamic(),
            }],
        }
    }

    pub fn alive_index(&self, k: usize) -> Option<usize> {
        self.components.iter().position(|c| c.end_step == k)
    }

    pub fn alive(&self, k: usize) -> Option<&EndComponent> {
        self.alive_index(k).map(|i| &self.components[i])
    }

    /// β of the component ending at `k` (0 if none).
    pub fn alive_weight(&self, k: usize) -> f64 {
        self.alive(k).map_or(0.0, |c| c.weight)
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn normalize(&mut self) {
        let s = self.weight_sum();
        if s > 0.0 {
            self.components.iter_mut().for_each(|c| c.weight /= s);
        }
    }

    /// Most probable end-time component; ties go to the later end time.
    pub fn map_component(&self) -> &EndComponent {
        self.components
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight).then(a.end_step.cmp(&b.end_step)))
            .expect("trajectory has at least one component")
    }

    /// Largest dense covariance dimension over components.
    pub fn max_window_dim(&self) -> usize {
        self.components.iter().map(|c| c.window.dim()).max().unwrap_or(0)
    }
}

/// Appends the predicted next state to the joint window.
pub(crate) fn extend(c: &EndComponent, motion: &MotionModel) -> EndComponent {
    let n = c.window.dim();
    let f = &motion.f;
    let last = n - NX;
    let m_l = c.window.mean.fixed_rows::<NX>(last);
    let p_ll = c.window.cov.fixed_view::<NX, NX>(last, last);
    let mut mean = DVector::zeros(n + NX);
    mean.rows_mut(0, n).copy_from(&c.window.mean);
    mean.fixed_rows_mut::<NX>(n).copy_from(&(f * m_l));
    let mut cov = DMatrix::zeros(n + NX, n + NX);
    cov.view_mut((0, 0), (n, n)).copy_from(&c.window.cov);
    // Cov(x_i, x_new) = Cov(x_i, x_last) Fᵀ.
    let cross = c.window.cov.columns(last, NX) * f.transpose();
    cov.view_mut((0, n), (n, NX)).copy_from(&cross);
    cov.view_mut((n, 0), (NX, n)).copy_from(&cross.transpose());
    let p_new = linalg::symmetrize(&(f * p_ll * f.transpose() + motion.q));
    cov.fixed_view_mut::<NX, NX>(n, n).copy_from(&p_new);
    EndComponent {
        end_step: c.end_step + 1,
        weight: c.weight,
        history: c.history.clone(),
        window: GaussianDensity { mean, cov },
    }
}

/// Prediction from step `k` to `k + 1`: the component ending at `k` splits
/// into a dead copy (weight ×(1−p^S)) and an extended alive component
/// (weight ×p^S). Components that ended earlier are unchanged.
pub fn trajectory_predict(tg: &TrajectoryGaussian, motion: &MotionModel, k: usize) -> TrajectoryGaussian {
    let mut components = Vec::with_capacity(tg.components.len() + 1);
    for c in &tg.components {
        if c.end_step == k {
            if motion.ps < 1.0 {
                let mut dead = c.clone();
                dead.weight *= 1.0 - motion.ps;
                components.push(dead);
            }
            let mut alive = extend(c, motion);
            alive.weight *= motion.ps;
            components.push(alive);
        } else {
            components.push(c.clone());
        }
    }
    TrajectoryGaussian {
        birth_step: tg.birth_step,
        components,
    }
}

/// Conditions the last `window` states of `c` on a new marginal for its last
/// state. Earlier window states keep their moments; their cross-covariances
/// with the conditioned states are left as stored (truncation drops them).
pub fn condition_window(c: &EndComponent, posterior_last: &Gaussian4, window: usize) -> EndComponent {
    let blocks = c.window_len();
    let w = window.clamp(1, blocks);
    let n = c.window.dim();
    let last = n - NX;
    let start = (blocks - w) * NX;
    let o = last - start;
    let mut out = c.clone();
    let m_l = c.window.mean.fixed_rows::<NX>(last).into_owned();
    let p_ll = c.window.cov.fixed_view::<NX, NX>(last, last).into_owned();
    let dm = posterior_last.mean - m_l;
    out.window
        .mean
        .fixed_rows_mut::<NX>(last)
        .copy_from(&posterior_last.mean);
    out.window
        .cov
        .fixed_view_mut::<NX, NX>(last, last)
        .copy_from(&posterior_last.cov);
    if o > 0 {
        let p_ol = c.window.cov.view((start, last), (o, NX)).into_owned();
        let g = &p_ol * linalg::inverse(&p_ll);
        let new_mean = c.window.mean.rows(start, o) + &g * dm;
        out.window.mean.rows_mut(start, o).copy_from(&new_mean);
        let dp = p_ll - posterior_last.cov;
        let p_oo = c.window.cov.view((start, start), (o, o)) - &g * dp * g.transpose();
        out.window
            .cov
            .view_mut((start, start), (o, o))
            .copy_from(&linalg::symmetrize_dyn(&p_oo));
        let p_ol_new = &g * posterior_last.cov;
        out.window.cov.view_mut((start, last), (o, NX)).copy_from(&p_ol_new);
        out.window
            .cov
            .view_mut((last, start), (NX, o))
            .copy_from(&p_ol_new.transpose());
    }
    out
}

/// Updates the component with the latest end time using the new marginal of
/// its last state, smoothing the previous `window − 1` states.
pub fn trajectory_update(tg: &TrajectoryGaussian, posterior_current: &Gaussian4, window: usize) -> TrajectoryGaussian {
    let mut out = tg.clone();
    if let Some(i) = (0..tg.components.len()).max_by_key(|&i| tg.components[i].end_step) {
        out.components[i] = condition_window(&tg.components[i], posterior_current, window);
    }
    out
}

/// Keeps joint correlations only among the last `l` states; older states
/// become frozen marginals.
pub fn l_scan_truncate(tg: &TrajectoryGaussian, l: usize) -> TrajectoryGaussian {
    let mut out = tg.clone();
    for c in &mut out.components {
        truncate_component(c, l, true);
    }
    out
}

pub(crate) fn truncate_component(c: &mut EndComponent, l: usize, keep_history: bool) {
    let l = l.max(1);
    let blocks = c.window_len();
    if blocks <= l {
        return;
    }
    let drop = blocks - l;
    if keep_history {
        c.history.extend((0..drop).map(|i| c.window.block(i)));
    }
    let s = drop * NX;
    let d = l * NX;
    c.window = GaussianDensity {
        mean: c.window.mean.rows(s, d).into_owned(),
        cov: c.window.cov.view((s, s), (d, d)).into_owned(),
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directional::{vmf_sample, FovSpec};
    use crate::models::build_cv;
    use nalgebra::{Matrix4, SymmetricEigen, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd<const D: usize>(rng: &mut impl Rng, scale: f64) -> SMatrix<f64, D, D> {
        let a = SMatrix::<f64, D, D>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() * scale + SMatrix::<f64, D, D>::identity() * 0.1 * scale
    }

    fn random_spd_dyn(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    fn reference_pose() -> CameraPose {
        CameraPose::looking_at(
            Vector3::new(0.0, 0.0, -25.0),
            Vector3::new(25.0, 25.0, 0.0),
            (69f64.to_radians(), 42.27f64.to_radians()),
            (1920, 1080),
        )
        .unwrap()
    }

    fn reference_model() -> MeasurementModel {
        MeasurementModel::new(700.0, 0.9, 5.0, FovSpec::from_degrees(69.0, 42.27).unwrap()).unwrap()
    }

    struct Affine {
        h: SMatrix<f64, 3, 4>,
        c: Vector3<f64>,
        r: Matrix3<f64>,
    }

    impl MomentMap<4> for Affine {
        fn moments(&self, x: &SVector<f64, 4>) -> Result<(Vector3<f64>, Matrix3<f64>)> {
            Ok((self.h * x + self.c, self.r))
        }
    }

    fn kalman(prior: &Gaussian4, a: &Affine, z: &Vector3<f64>) -> Gaussian4 {
        let s = a.h * prior.cov * a.h.transpose() + a.r;
        let k = prior.cov * a.h.transpose() * s.try_inverse().unwrap();
        Gaussian {
            mean: prior.mean + k * (z - a.h * prior.mean - a.c),
            cov: (Matrix4::identity() - k * a.h) * prior.cov,
        }
    }

    #[test]
    fn unscented_one_dimensional() {
        let g = GaussianDensity::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let (pts, w) = unscented_points(&g, 1.0 / 3.0).unwrap();
        assert_eq!(pts.len(), 3);
        assert!((pts[1][0] - 1.5f64.sqrt()).abs() < 1e-15);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let mean: f64 = pts.iter().zip(&w).map(|(p, w)| p[0] * w).sum();
        let var: f64 = pts.iter().zip(&w).map(|(p, w)| p[0] * p[0] * w).sum();
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unscented_reconstructs_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let cov = random_spd_dyn(&mut rng, 8);
            let mean = DVector::from_fn(8, |_, _| rng.random_range(-5.0..5.0));
            let g = GaussianDensity::new(mean.clone(), cov.clone()).unwrap();
            let (pts, w) = unscented_points(&g, 1.0 / 3.0).unwrap();
            assert_eq!(pts.len(), 17);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(w[1..].iter().all(|x| (x - 2.0 / 3.0 / 16.0).abs() < 1e-15));
            let m: DVector<f64> = pts.iter().zip(&w).map(|(p, w)| p * *w).sum();
            let c: DMatrix<f64> = pts
                .iter()
                .zip(&w)
                .map(|(p, w)| (p - &m) * (p - &m).transpose() * *w)
                .sum();
            assert!((&m - &mean).abs().max() < 1e-12);
            assert!((&c - &cov).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gaussian_density_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), neg).is_err());
        assert!(GaussianDensity::new(DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
        assert!(unscented_weights(2, 1.0).is_err());
    }

    #[test]
    fn slr_recovers_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let a = Affine {
                h: SMatrix::<f64, 3, 4>::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                c: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                r: random_spd::<3>(&mut rng, 1.0),
            };
            let prior = Gaussian {
                mean: Vector4::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                cov: random_spd::<4>(&mut rng, 2.0),
            };
            let lin = slr(&a, &prior, DEFAULT_W0).unwrap();
            assert!((lin.a - a.h).abs().max() < 1e-10);
            assert!((lin.b - a.c).abs().max() < 1e-10);
            assert!((lin.omega - a.r).abs().max() < 1e-10);
        }
    }

    #[test]
    fn iplf_is_exact_on_affine_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for n in 1..=6 {
            let a = Affine {
                h: SMatrix::<f64, 3, 4>::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                c: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                r: random_spd::<3>(&mut rng, 0.5),
            };
            let prior = Gaussian {
                mean: Vector4::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                cov: random_spd::<4>(&mut rng, 2.0),
            };
            let z = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let settings = IplfSettings {
                max_iters: n,
                kld_threshold: 0.0,
                w0: DEFAULT_W0,
            };
            let it = iplf(&prior, &z, &a, &settings, None).unwrap();
            let k = kalman(&prior, &a, &z);
            assert!((it.posterior.mean - k.mean).abs().max() < 1e-10);
            assert!((it.posterior.cov - k.cov).abs().max() < 1e-10);
            assert!(!it.diverged);
        }
    }

    #[test]
    fn kld_examples() {
        let a = GaussianDensity::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
        let b = GaussianDensity::new(DVector::from_element(1, 1.0), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(kld_gaussians(&a, &a).unwrap(), 0.0);
        assert!((kld_gaussians(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let c = GaussianDensity::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(kld_gaussians(&a, &c).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut asymmetric = false;
        for _ in 0..200 {
            let p =
                GaussianDensity::new(DVector::from_fn(3, |_, _| rng.random()), random_spd_dyn(&mut rng, 3)).unwrap();
            let q =
                GaussianDensity::new(DVector::from_fn(3, |_, _| rng.random()), random_spd_dyn(&mut rng, 3)).unwrap();
            let (pq, qp) = (kld_gaussians(&p, &q).unwrap(), kld_gaussians(&q, &p).unwrap());
            assert!(pq >= 0.0 && qp >= 0.0);
            asymmetric |= (pq - qp).abs() > 1e-6;
            assert!(kld_gaussians(&p, &p).unwrap() < 1e-12);
            let ps: Gaussian<3> = p.to_static().unwrap();
            let qs: Gaussian<3> = q.to_static().unwrap();
            assert!((kld(&ps, &qs) - pq).abs() < 1e-10);
        }
        assert!(asymmetric);
    }

    fn random_prior(rng: &mut impl Rng) -> Gaussian4 {
        let mut cov = Matrix4::zeros();
        let sp = rng.random_range(0.2..5.0);
        let sv = rng.random_range(0.5..20.0);
        cov[(0, 0)] = sp * sp;
        cov[(2, 2)] = sp * sp * rng.random_range(0.5..2.0);
        cov[(1, 1)] = sv * sv;
        cov[(3, 3)] = sv * sv;
        cov[(0, 1)] = 0.3 * sp * sv;
        cov[(1, 0)] = 0.3 * sp * sv;
        Gaussian {
            mean: Vector4::new(rng.random_range(10.0..40.0), 1.0, rng.random_range(10.0..40.0), -1.0),
            cov,
        }
    }

    #[test]
    fn slr_residual_is_psd() {
        let pose = reference_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..1000 {
            let kappa = [10.0, 700.0, 65000.0][rng.random_range(0..3)];
            let map = VmfMomentMap::new(kappa, &pose);
            let lin = slr(&map, &random_prior(&mut rng), DEFAULT_W0).unwrap();
            assert!((lin.omega - lin.omega.transpose()).abs().max() < 1e-15);
            let min = SymmetricEigen::new(lin.omega).eigenvalues.min();
            assert!(min >= -1e-15, "{min}");
        }
    }

    #[test]
    fn slr_matches_monte_carlo() {
        let pose = reference_pose();
        let kappa = 700.0;
        let map = VmfMomentMap::new(kappa, &pose);
        let mut cov = Matrix4::identity();
        cov[(0, 0)] = 1.0;
        cov[(2, 2)] = 1.5;
        cov[(0, 2)] = 0.3;
        cov[(2, 0)] = 0.3;
        let prior = Gaussian {
            mean: Vector4::new(25.0, 1.0, 25.0, 0.0),
            cov,
        };
        let lin = slr(&map, &prior, DEFAULT_W0).unwrap();
        // Monte-Carlo SLR: regress sampled z on sampled x.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let l = linalg::sqrt(&prior.cov);
        let n = 1_000_000;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let e = Vector4::from_fn(|_, _| {
                let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                v
            });
            let x = prior.mean + l * e;
            let mu = doa_mean(&x, &pose).unwrap();
            let z = vmf_sample(&VmfParams { mu, kappa }, 1, &mut rng)[0];
            xs.push(x);
            zs.push(*z.as_vector());
        }
        let xbar: Vector4<f64> = xs.iter().sum::<Vector4<f64>>() / n as f64;
        let zbar: Vector3<f64> = zs.iter().sum::<Vector3<f64>>() / n as f64;
        let mut pxx = Matrix4::zeros();
        let mut pxz = SMatrix::<f64, 4, 3>::zeros();
        let mut pzz = Matrix3::zeros();
        for (x, z) in xs.iter().zip(&zs) {
            let dx = x - xbar;
            let dz = z - zbar;
            pxx += dx * dx.transpose();
            pxz += dx * dz.transpose();
            pzz += dz * dz.transpose();
        }
        pxx /= n as f64;
        pxz /= n as f64;
        pzz /= n as f64;
        let a = pxz.transpose() * pxx.try_inverse().unwrap();
        let omega = pzz - a * pxx * a.transpose();
        let pos = |m: &SMatrix<f64, 3, 4>| {
            SMatrix::<f64, 3, 2>::from_columns(&[m.column(0).into_owned(), m.column(2).into_owned()])
        };
        let ea = (pos(&lin.a) - pos(&a)).norm() / pos(&a).norm();
        let eo = (lin.omega - omega).norm() / omega.norm();
        assert!(ea < 0.02, "A error {ea}");
        assert!(eo < 0.02, "Omega error {eo}");
    }

    #[test]
    fn iplf_matches_grid_posterior() {
        let pose = reference_pose();
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let truth = Vector4::new(25.0, 0.0, 25.0, 0.0);
        let z = vmf_sample(
            &VmfParams {
                mu: doa_mean(&truth, &pose).unwrap(),
                kappa: 700.0,
            },
            1,
            &mut rng,
        )[0];
        let mut cov = Matrix4::identity() * 100.0;
        cov[(0, 0)] = 4.0;
        cov[(2, 2)] = 4.0;
        let prior = Gaussian {
            mean: Vector4::new(26.0, 0.0, 23.5, 0.0),
            cov,
        };
        for (n, mode) in [
            (5, LikelihoodMode::L1),
            (5, LikelihoodMode::L0),
            (1, LikelihoodMode::L0),
        ] {
            let cfg = IplfConfig {
                settings: IplfSettings {
                    max_iters: n,
                    ..Default::default()
                },
                likelihood: mode,
            };
            let out = iplf_update(&prior, &z, &model, &pose, &cfg).unwrap();
            assert!(out.posterior.cov.trace() <= prior.cov.trace());
            // Dense grid over the position slice.
            let (mut wsum, mut mx, mut my) = (0.0, 0.0, 0.0);
            let mut logs = Vec::new();
            let h = 0.02;
            for i in 0..600 {
                for j in 0..600 {
                    let x = 20.0 + i as f64 * h;
                    let y = 17.5 + j as f64 * h;
                    let lp = -((x - 26.0).powi(2) + (y - 23.5).powi(2)) / 8.0;
                    let ll = measurement_ll(&z, x, y, &model, &pose);
                    logs.push((x, y, lp + ll));
                }
            }
            let m = logs.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
            for (x, y, l) in logs {
                let w = (l - m).exp();
                wsum += w;
                mx += w * x;
                my += w * y;
            }
            let (gx, gy) = (mx / wsum, my / wsum);
            let d = ((out.posterior.mean[0] - gx).powi(2) + (out.posterior.mean[2] - gy).powi(2)).sqrt();
            assert!(
                d < 0.1,
                "N={n} {mode:?}: iplf ({}, {}) grid ({gx}, {gy})",
                out.posterior.mean[0],
                out.posterior.mean[2]
            );
            // The update moves the prior mean towards the ray of z.
            let before = ray_distance(&prior.mean, &z, &pose);
            let after = ray_distance(&out.posterior.mean, &z, &pose);
            assert!(after < before);
        }
    }

    fn measurement_ll(z: &UnitVector3, x: f64, y: f64, model: &MeasurementModel, pose: &CameraPose) -> f64 {
        crate::models::measurement_log_likelihood(z, &Vector4::new(x, 0.0, y, 0.0), model, pose).unwrap()
    }

    fn ray_distance(x: &ObjectState, z: &UnitVector3, pose: &CameraPose) -> f64 {
        let h = doa_mean(x, pose).unwrap();
        h.dot(z).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn log_marginal_modes_agree_with_quadrature() {
        // Reference: Monte-Carlo average of the VMF likelihood over the prior.
        let pose = reference_pose();
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let truth = Vector4::new(28.0, 0.0, 22.0, 0.0);
        let z = vmf_sample(
            &VmfParams {
                mu: doa_mean(&truth, &pose).unwrap(),
                kappa: 700.0,
            },
            1,
            &mut rng,
        )[0];
        let mut cov = Matrix4::identity() * 100.0;
        cov[(0, 0)] = 2.0;
        cov[(2, 2)] = 2.0;
        let prior = Gaussian {
            mean: Vector4::new(27.0, 0.0, 23.0, 0.0),
            cov,
        };
        let l = linalg::sqrt(&prior.cov);
        let n = 400_000;
        let mut acc = Vec::with_capacity(n);
        for _ in 0..n {
            let e = Vector4::from_fn(|_, _| {
                let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                v
            });
            let x = prior.mean + l * e;
            acc.push(crate::models::measurement_log_likelihood(&z, &x, &model, &pose).unwrap());
        }
        let reference = log_sum_exp(&acc) - (n as f64).ln();
        for mode in [LikelihoodMode::L0, LikelihoodMode::L1] {
            let cfg = IplfConfig {
                likelihood: mode,
                ..Default::default()
            };
            let out = iplf_update(&prior, &z, &model, &pose, &cfg).unwrap();
            assert!(
                (out.log_marginal - reference).abs() < 0.3,
                "{mode:?}: {} vs {reference}",
                out.log_marginal
            );
        }
    }

    #[test]
    fn gate_examples() {
        let pose = reference_pose();
        let model = reference_model();
        let prior = Gaussian {
            mean: Vector4::new(25.0, 0.0, 25.0, 0.0),
            cov: Matrix4::identity(),
        };
        let map = VmfMomentMap::new(model.kappa, &pose);
        let lin = slr(&map, &prior, DEFAULT_W0).unwrap();
        let pm = PredictedMeasurement::new(&lin, &prior);
        let zhat = UnitVector3::new(pm.zhat).unwrap();
        assert!(pm.mahalanobis2(&zhat) < 1e-20);
        assert!(gate(&prior, &zhat, &model, &pose, 50.0).unwrap());
        let far = UnitVector3::from_xyz(0.0, 1.0, 0.0).unwrap();
        assert!(!gate(&prior, &far, &model, &pose, 50.0).unwrap());
        assert!(gate(&prior, &far, &model, &pose, f64::INFINITY).unwrap());
    }

    #[test]
    fn gate_accepts_true_detections() {
        let pose = reference_pose();
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let trials = 4000;
        let mut accepted = 0;
        for _ in 0..trials {
            let prior = random_prior(&mut rng);
            let l = linalg::sqrt(&prior.cov);
            let e = Vector4::from_fn(|_, _| {
                let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                v
            });
            let x = prior.mean + l * e;
            let z = vmf_sample(
                &VmfParams {
                    mu: doa_mean(&x, &pose).unwrap(),
                    kappa: 700.0,
                },
                1,
                &mut rng,
            )[0];
            if gate(&prior, &z, &model, &pose, 50.0).unwrap() {
                accepted += 1;
            }
        }
        assert!(accepted as f64 >= 0.99 * trials as f64, "{accepted}/{trials}");
    }

    fn two_block_component(rng: &mut impl Rng) -> EndComponent {
        let g = Gaussian {
            mean: Vector4::from_fn(|_, _| rng.random_range(-3.0..3.0)),
            cov: random_spd::<4>(rng, 1.0),
        };
        let motion = build_cv(0.5, 0.7, 1.0).unwrap();
        extend(&TrajectoryGaussian::new(0, &g).components[0], &motion)
    }

    #[test]
    fn predict_weights_and_blocks() {
        let g = Gaussian {
            mean: Vector4::new(1.0, 2.0, 3.0, 4.0),
            cov: Matrix4::identity(),
        };
        let tg = TrajectoryGaussian::new(3, &g);
        let certain = trajectory_predict(&tg, &build_cv(1.0, 1.0, 1.0).unwrap(), 3);
        assert_eq!(certain.components.len(), 1);
        assert_eq!(certain.components[0].end_step, 4);
        assert_eq!(certain.components[0].weight, 1.0);
        let m = build_cv(1.0 / 6.0, 0.5, 0.99).unwrap();
        let twice = trajectory_predict(&trajectory_predict(&tg, &m, 3), &m, 4);
        let dead: f64 = twice
            .components
            .iter()
            .filter(|c| c.end_step < 5)
            .map(|c| c.weight)
            .sum();
        assert!((dead - (1.0 - 0.99f64.powi(2))).abs() < 1e-12);
        assert!((twice.weight_sum() - 1.0).abs() < 1e-12);
        let alive = twice.alive(5).unwrap();
        assert_eq!(alive.window_len(), 3);
        // Joint covariance of (x3, x4, x5) from explicit state-space algebra.
        let (f, q) = (m.f, m.q);
        let p3 = Matrix4::identity();
        let p4 = f * p3 * f.transpose() + q;
        let p5 = f * p4 * f.transpose() + q;
        let c = &alive.window.cov;
        assert!((c.fixed_view::<4, 4>(4, 4) - p4).abs().max() < 1e-12);
        assert!((c.fixed_view::<4, 4>(8, 8) - p5).abs().max() < 1e-12);
        assert!((c.fixed_view::<4, 4>(0, 4) - p3 * f.transpose()).abs().max() < 1e-12);
        assert!((c.fixed_view::<4, 4>(0, 8) - p3 * (f * f).transpose()).abs().max() < 1e-12);
        assert!((c.fixed_view::<4, 4>(4, 8) - p4 * f.transpose()).abs().max() < 1e-12);
        assert!((alive.window.mean.fixed_rows::<4>(8) - f * f * g.mean).abs().max() < 1e-12);
    }

    #[test]
    fn update_window_one_changes_last_block_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let c = two_block_component(&mut rng);
        let post = Gaussian {
            mean: Vector4::new(0.1, 0.2, 0.3, 0.4),
            cov: Matrix4::identity() * 0.1,
        };
        let u = condition_window(&c, &post, 1);
        assert_eq!(u.window.mean.rows(0, 4), c.window.mean.rows(0, 4));
        assert_eq!(u.window.cov.view((0, 0), (4, 4)), c.window.cov.view((0, 0), (4, 4)));
        assert_eq!(u.last(), post);
    }

    #[test]
    fn update_with_own_marginal_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let c = two_block_component(&mut rng);
        let u = condition_window(&c, &c.last(), 5);
        assert!((&u.window.mean - &c.window.mean).abs().max() < 1e-12);
        assert!((&u.window.cov - &c.window.cov).abs().max() < 1e-12);
    }

    /// Linear system with position measurements; returns filter run through
    /// the trajectory machinery and an independent RTS smoother.
    fn linear_run(steps: usize, window: usize, seed: u64) -> (EndComponent, Vec<Gaussian4>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = build_cv(0.5, 0.8, 1.0).unwrap();
        let h = SMatrix::<f64, 2, 4>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let r = Matrix2::new(0.5, 0.1, 0.1, 0.3);
        let zs: Vec<Vector2<f64>> = (0..steps)
            .map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let kf = |g: &Gaussian4, z: &Vector2<f64>| {
            let s = h * g.cov * h.transpose() + r;
            let k = g.cov * h.transpose() * s.try_inverse().unwrap();
            Gaussian {
                mean: g.mean + k * (z - h * g.mean),
                cov: (Matrix4::identity() - k * h) * g.cov,
            }
        };
        let x0 = Gaussian {
            mean: Vector4::new(0.0, 1.0, 0.0, -1.0),
            cov: Matrix4::identity() * 4.0,
        };
        // Trajectory machinery.
        let first = kf(&x0, &zs[0]);
        let mut tg = TrajectoryGaussian::new(0, &first);
        for (k, z) in zs.iter().enumerate().skip(1) {
            tg = trajectory_predict(&tg, &motion, k - 1);
            let post = kf(&tg.alive(k).unwrap().last(), z);
            tg = trajectory_update(&tg, &post, window);
            tg = l_scan_truncate(&tg, window);
        }
        // Reference: Kalman filter + RTS.
        let mut filt = vec![first];
        let mut pred = vec![x0.clone()];
        for z in &zs[1..] {
            let last = filt.last().unwrap();
            let p = Gaussian {
                mean: motion.f * last.mean,
                cov: motion.f * last.cov * motion.f.transpose() + motion.q,
            };
            filt.push(kf(&p, z));
            pred.push(p);
        }
        let mut smooth = filt.clone();
        for k in (0..steps - 1).rev() {
            let g = filt[k].cov * motion.f.transpose() * pred[k + 1].cov.try_inverse().unwrap();
            smooth[k] = Gaussian {
                mean: filt[k].mean + g * (smooth[k + 1].mean - pred[k + 1].mean),
                cov: filt[k].cov + g * (smooth[k + 1].cov - pred[k + 1].cov) * g.transpose(),
            };
        }
        let comp = tg.alive(steps - 1).unwrap().clone();
        let _ = filt;
        (comp, smooth)
    }

    #[test]
    fn full_window_update_matches_rts() {
        let (comp, smooth) = linear_run(5, 5, 52);
        assert!(comp.history.is_empty());
        for (k, s) in smooth.iter().enumerate() {
            let b = comp.window.block(k);
            assert!((b.mean - s.mean).abs().max() < 1e-9, "step {k}");
            assert!((b.cov - s.cov).abs().max() < 1e-9, "step {k}");
        }
    }

    #[test]
    fn truncation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let c = two_block_component(&mut rng);
        let tg = TrajectoryGaussian {
            birth_step: 0,
            components: vec![c],
        };
        assert_eq!(l_scan_truncate(&tg, 2), tg);
        assert_eq!(l_scan_truncate(&tg, 10), tg);
        let t = l_scan_truncate(&tg, 1);
        let before = tg.components[0].marginals();
        let after = t.components[0].marginals();
        assert_eq!(before, after);
        assert_eq!(t.components[0].window.dim(), 4);
        assert_eq!(t.max_window_dim(), 4);
    }

    #[test]
    fn window_length_does_not_change_final_marginal() {
        let (c5, _) = linear_run(20, 5, 54);
        let (c100, smooth) = linear_run(20, 100, 54);
        assert!((c5.last().mean - c100.last().mean).abs().max() < 1e-9);
        assert!((c5.last().cov - c100.last().cov).abs().max() < 1e-9);
        assert!(c5.window.dim() <= 20);
        assert_eq!(c5.len(), 20);
        // The long window reproduces the full smoother; the short one only
        // smooths the last five states.
        let m100 = c100.marginals();
        let m5 = c5.marginals();
        for k in 0..20 {
            assert!((m100[k].mean - smooth[k].mean).abs().max() < 1e-9);
        }
        assert!((m5[19].mean - smooth[19].mean).abs().max() < 1e-9);
        assert!((m5[0].mean - smooth[0].mean).abs().max() > 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn kld_is_non_negative_and_zero_on_self(s1 in 0u64..1000, s2 in 0u64..1000) {
                let a = random_prior(&mut ChaCha8Rng::seed_from_u64(s1));
                let b = random_prior(&mut ChaCha8Rng::seed_from_u64(s2 + 1000));
                prop_assert!(kld(&a, &b) >= -1e-9);
                prop_assert!(kld(&a, &a).abs() < 1e-9);
            }
        }
    }
}
