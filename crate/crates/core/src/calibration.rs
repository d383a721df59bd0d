//! Estimation of the detection probability, VMF concentration and clutter
//! rate from annotated frames.
//!
//! Each measurement gets an auxiliary label (0 for clutter, `i` for the i-th
//! annotated object). For fixed labels the parameters have closed forms; for
//! fixed parameters the labels of each frame solve an assignment problem.
//! Alternating the two never decreases the labelled log-likelihood, which is
//! a lower bound of the true log-likelihood.

use serde::{Deserialize, Serialize};

use crate::assignment::{solve_optimal, CostMatrix};
use crate::directional::{
    clutter_constant, inverse_bessel_ratio, vmf_log_density, vmf_log_normalizer, FovSpec, VmfParams,
};
use crate::error::{invalid, Result};
use crate::geometry::UnitVector3;

pub const PD_MIN: f64 = 1e-4;
pub const PD_MAX: f64 = 1.0 - 1e-4;
pub const LAMBDA_C_MIN: f64 = 1e-6;

/// Truth DOAs and detector output of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame {
    pub truth_doas: Vec<UnitVector3>,
    pub measured_doas: Vec<UnitVector3>,
    pub fov: FovSpec,
}

/// One label per measurement: 0 is clutter, `i ≥ 1` is truth object `i − 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAssignment {
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub pd: f64,
    pub kappa: f64,
    pub lambda_c: f64,
}

impl CalibrationParams {
    /// Neutral starting point: p^D = 0.9, κ = 20 and the mean number of
    /// excess measurements per frame (at least 0.5) as clutter rate.
    pub fn initial(frames: &[AnnotatedFrame]) -> Self {
        let excess: f64 = frames
            .iter()
            .map(|f| f.measured_doas.len().saturating_sub(f.truth_doas.len()) as f64)
            .sum::<f64>()
            / frames.len().max(1) as f64;
        Self {
            pd: 0.9,
            kappa: 20.0,
            lambda_c: excess.max(0.5),
        }
    }
}

/// Closed-form maximizers for fixed labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub lambda_c: f64,
    pub pd: f64,
    pub r_bar: f64,
    pub kappa: f64,
    /// `1/(1 − r̄)`, accurate for r̄ ≥ 0.9.
    pub kappa_approx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub pd: f64,
    pub kappa: f64,
    pub lambda_c: f64,
    pub assignments: Vec<FrameAssignment>,
    pub lower_bound: f64,
    pub iterations: usize,
    /// Lower bound after each round.
    pub trace: Vec<f64>,
    pub diagnostic: Option<String>,
}

fn check_params(pd: f64, kappa: f64, lambda_c: f64) -> Result<()> {
    if !(pd > 0.0 && pd < 1.0) {
        return Err(invalid(format!("detection probability must lie in (0, 1), got {pd}")));
    }
    if !(kappa > 0.0) || !(lambda_c > 0.0) {
        return Err(invalid(format!(
            "kappa and clutter rate must be positive, got {kappa}, {lambda_c}"
        )));
    }
    Ok(())
}

/// Most likely labelling of one frame for fixed parameters.
pub fn associate_frame(frame: &AnnotatedFrame, pd: f64, kappa: f64, lambda_c: f64) -> Result<FrameAssignment> {
    check_params(pd, kappa, lambda_c)?;
    let (m, n) = (frame.measured_doas.len(), frame.truth_doas.len());
    let odds = (pd / (1.0 - pd)).ln();
    let clutter = (lambda_c / clutter_constant(&frame.fov)).ln();
    let mut cost = CostMatrix::forbidden(m, n + m);
    for (j, z) in frame.measured_doas.iter().enumerate() {
        for (i, y) in frame.truth_doas.iter().enumerate() {
            cost.set(j, i, -(odds + vmf_log_density(z, &VmfParams { mu: *y, kappa })));
        }
        cost.set(j, n + j, -clutter);
    }
    let a = solve_optimal(&cost)?;
    Ok(FrameAssignment {
        labels: a.cols.iter().map(|&c| if c < n { c + 1 } else { 0 }).collect(),
    })
}

struct Counts {
    clutter: usize,
    objects: usize,
    detections: usize,
    /// Sum of `1 − μᵀz` over detections, accumulated as `|μ − z|²/2` to keep
    /// precision when κ is large.
    deviation_sum: f64,
    /// Sum of `ln u_C` over clutter measurements.
    clutter_log_uc: f64,
}

fn counts(frames: &[AnnotatedFrame], assignments: &[FrameAssignment]) -> Result<Counts> {
    if frames.len() != assignments.len() {
        return Err(invalid("one assignment per frame is required"));
    }
    let mut c = Counts {
        clutter: 0,
        objects: 0,
        detections: 0,
        deviation_sum: 0.0,
        clutter_log_uc: 0.0,
    };
    for (f, a) in frames.iter().zip(assignments) {
        let log_uc = clutter_constant(&f.fov).ln();
        if a.labels.len() != f.measured_doas.len() {
            return Err(invalid("one label per measurement is required"));
        }
        let mut used = vec![false; f.truth_doas.len()];
        c.objects += f.truth_doas.len();
        for (z, &l) in f.measured_doas.iter().zip(&a.labels) {
            if l == 0 {
                c.clutter += 1;
                c.clutter_log_uc += log_uc;
                continue;
            }
            if l > f.truth_doas.len() || std::mem::replace(&mut used[l - 1], true) {
                return Err(invalid(format!("label {l} is out of range or repeated")));
            }
            c.detections += 1;
            c.deviation_sum += (f.truth_doas[l - 1].as_vector() - z.as_vector()).norm_squared() / 2.0;
        }
    }
    Ok(c)
}

/// Maximizers of the labelled likelihood: mean clutter count, empirical
/// detection rate and the κ matching the mean cosine of the detections.
/// The detection probability is clamped to `[PD_MIN, PD_MAX]` and the clutter
/// rate to at least `LAMBDA_C_MIN`.
pub fn closed_form_params(frames: &[AnnotatedFrame], assignments: &[FrameAssignment]) -> Result<ClosedForm> {
    if frames.is_empty() {
        return Err(invalid("at least one frame is required"));
    }
    let c = counts(frames, assignments)?;
    if c.detections == 0 {
        return Err(invalid("no detections are assigned to objects"));
    }
    let r_bar = 1.0 - c.deviation_sum / c.detections as f64;
    if !(r_bar > 0.0) {
        return Err(invalid(format!(
            "mean cosine {r_bar} <= 0: detector no better than random"
        )));
    }
    let kappa = inverse_bessel_ratio(r_bar.min(1.0 - f64::EPSILON))?;
    Ok(ClosedForm {
        lambda_c: (c.clutter as f64 / frames.len() as f64).max(LAMBDA_C_MIN),
        pd: (c.detections as f64 / c.objects as f64).clamp(PD_MIN, PD_MAX),
        r_bar,
        kappa,
        kappa_approx: 1.0 / (1.0 - r_bar),
    })
}

/// Labelled log-likelihood of all frames.
pub fn log_likelihood(
    frames: &[AnnotatedFrame],
    assignments: &[FrameAssignment],
    pd: f64,
    kappa: f64,
    lambda_c: f64,
) -> Result<f64> {
    let c = counts(frames, assignments)?;
    // x ln y with 0 ln 0 = 0.
    let xlny = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    let detections = c.detections as f64;
    let l = -(frames.len() as f64) * lambda_c
        + xlny(detections, pd)
        + xlny((c.objects - c.detections) as f64, 1.0 - pd)
        + xlny(c.clutter as f64, lambda_c)
        - c.clutter_log_uc
        + detections * (vmf_log_normalizer(kappa) + kappa)
        - kappa * c.deviation_sum;
    Ok(l)
}

/// Alternates labelling and closed-form parameter steps until the lower
/// bound improves by less than `tol`, the labels stop changing, or
/// `max_rounds` is reached.
pub fn coordinate_ascent(
    frames: &[AnnotatedFrame],
    init: CalibrationParams,
    max_rounds: usize,
    tol: f64,
) -> Result<CalibrationResult> {
    if frames.is_empty() {
        return Err(invalid("at least one frame is required"));
    }
    check_params(init.pd, init.kappa, init.lambda_c)?;
    let mut p = init;
    let mut prev: Option<Vec<FrameAssignment>> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut diagnostic = None;
    let mut rounds = 0;
    while rounds < max_rounds.max(1) {
        rounds += 1;
        let a: Vec<FrameAssignment> = frames
            .iter()
            .map(|f| associate_frame(f, p.pd, p.kappa, p.lambda_c))
            .collect::<Result<_>>()?;
        let cf = match closed_form_params(frames, &a) {
            Ok(cf) => cf,
            Err(e) => {
                diagnostic = Some(format!("parameter step failed: {e}; detection probability clamped"));
                p.pd = PD_MIN;
                p.lambda_c =
                    (a.iter().map(|f| f.labels.len()).sum::<usize>() as f64 / frames.len() as f64).max(LAMBDA_C_MIN);
                trace.push(log_likelihood(frames, &a, p.pd, p.kappa, p.lambda_c)?);
                prev = Some(a);
                break;
            }
        };
        p = CalibrationParams {
            pd: cf.pd,
            kappa: cf.kappa,
            lambda_c: cf.lambda_c,
        };
        let lb = log_likelihood(frames, &a, p.pd, p.kappa, p.lambda_c)?;
        let unchanged = prev.as_ref() == Some(&a);
        let small = trace.last().is_some_and(|l| lb - l < tol);
        trace.push(lb);
        prev = Some(a);
        if unchanged || small {
            break;
        }
    }
    Ok(CalibrationResult {
        pd: p.pd,
        kappa: p.kappa,
        lambda_c: p.lambda_c,
        assignments: prev.expect("at least one round"),
        lower_bound: *trace.last().expect("at least one round"),
        iterations: rounds,
        trace,
        diagnostic,
    })
}
