//! File formats of the command-line tool.
//!
//! * Detection frames: JSON lines, one camera frame per line.
//! * Trajectory sets (ground truth and estimates): one JSON document.
//! * Per-step GOSPA and filter diagnostics: CSV.
//! * Run configuration: TOML.
//!
//! Angles in files are degrees, radians everywhere else. States in files are
//! ordered `[px, py, vx, vy]` (m, m/s) in the local East-North-Down frame.

use nalgebra::{Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{AnnotatedFrame, CalibrationResult};
use crate::error::{Error, Result};
use crate::geometry::{
    bbox_center, pixel_to_doa, wgs84_to_local, BoundingBox, CameraPose, GeoCoordinate, PixelMethod, Quaternion,
    UnitVector3,
};
use crate::metrics::{gospa, rms_gospa_over_time, GospaParams, GospaResult};
use crate::models::{doa_mean, position, ObjectState};
use crate::sim::{state_from_file_order, state_to_file_order, Scenario, ScenarioConfig, TruthTrajectory};
use crate::slr::{IplfConfig, IplfSettings, LikelihoodMode, DEFAULT_W0};
use crate::tpmbm::{EstimatedTrajectory, FilterConfig, FilterMode};

fn input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodeticFix {
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// Ellipsoidal altitude (m).
    pub alt_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFix {
    /// Position in the local frame (m, z down).
    pub local_xyz_m: [f64; 3],
}

/// Drone position, either geodetic or already in the local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, expecting = "drone must be {lat_deg, lon_deg, alt_m} or {local_xyz_m}")]
pub enum DroneFix {
    Geodetic(GeodeticFix),
    Local(LocalFix),
}

/// One line of a detection file. Exactly one of `boxes` (pixels, upper-left
/// corner plus size) and `doas` (camera-frame directions) is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFrame {
    pub frame: u64,
    pub time_s: f64,
    pub drone: DroneFix,
    /// Scalar-first local-to-camera rotation.
    pub quat: [f64; 4],
    pub fov_deg: [f64; 2],
    pub image_px: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doas: Option<Vec<[f64; 3]>>,
}

impl DetectionFrame {
    fn check(&self) -> Result<()> {
        if self.boxes.is_some() == self.doas.is_some() {
            return Err(input("exactly one of `boxes` and `doas` must be given"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let pos_ok = match self.drone {
            DroneFix::Geodetic(g) => finite(&[g.lat_deg, g.lon_deg, g.alt_m]),
            DroneFix::Local(l) => finite(&l.local_xyz_m),
        };
        if !pos_ok || !self.time_s.is_finite() || !finite(&self.quat) || !finite(&self.fov_deg) {
            return Err(input("non-finite pose or time"));
        }
        if let Some(b) = &self.boxes {
            if !b.iter().all(|x| finite(x)) {
                return Err(input("non-finite bounding box"));
            }
        }
        if let Some(d) = &self.doas {
            if !d.iter().all(|x| finite(x)) {
                return Err(input("non-finite DOA"));
            }
        }
        Ok(())
    }
}

/// Parses a detection file. Errors carry the 1-based line number.
pub fn parse_detection_frames(text: &str) -> Result<Vec<DetectionFrame>> {
    let mut out: Vec<DetectionFrame> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| input(format!("line {}: {}", i + 1, strip_prefix(&e)));
        let f: DetectionFrame = serde_json::from_str(line).map_err(|e| input(format!("line {}: {e}", i + 1)))?;
        f.check().map_err(at)?;
        if let Some(prev) = out.last() {
            if f.frame <= prev.frame {
                return Err(at(input(format!(
                    "frame {} does not follow frame {}",
                    f.frame, prev.frame
                ))));
            }
            if std::mem::discriminant(&f.drone) != std::mem::discriminant(&prev.drone) {
                return Err(at(input("geodetic and local drone positions are mixed in one file")));
            }
        }
        out.push(f);
    }
    Ok(out)
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::InvalidInput(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn json_err(e: serde_json::Error) -> Error {
    input(e.to_string())
}

pub fn write_detection_frames(frames: &[DetectionFrame]) -> Result<String> {
    let mut out = String::new();
    for f in frames {
        out += &serde_json::to_string(f).map_err(json_err)?;
        out.push('\n');
    }
    Ok(out)
}

/// Detection frames of a simulated scenario, with DOAs and local positions.
pub fn frames_from_scenario(scenario: &Scenario, cfg: &ScenarioConfig) -> Vec<DetectionFrame> {
    scenario
        .frames
        .iter()
        .map(|f| DetectionFrame {
            frame: f.step as u64,
            time_s: f.time,
            drone: DroneFix::Local(LocalFix {
                local_xyz_m: f.pose.position.into(),
            }),
            quat: f.pose.quat.as_array(),
            fov_deg: cfg.fov_deg,
            image_px: cfg.image_px,
            boxes: None,
            doas: Some(f.measurements.iter().map(|z| [z.x(), z.y(), z.z()]).collect()),
        })
        .collect()
}

/// A frame ready for the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame: u64,
    pub time_s: f64,
    pub pose: CameraPose,
    pub measurements: Vec<UnitVector3>,
}

/// Converts parsed frames to camera poses and DOAs. Geodetic positions are
/// expressed in the local frame anchored on the ground below the first frame;
/// boxes are reduced to their centre and converted with `method`.
pub fn frame_inputs(frames: &[DetectionFrame], method: PixelMethod) -> Result<Vec<FrameInput>> {
    let origin = match frames.first().map(|f| f.drone) {
        Some(DroneFix::Geodetic(g)) => Some(GeoCoordinate::from_degrees(g.lat_deg, g.lon_deg, 0.0)?),
        _ => None,
    };
    frames
        .iter()
        .map(|f| {
            let ctx = |e: Error| input(format!("frame {}: {}", f.frame, strip_prefix(&e)));
            let position = match (f.drone, origin) {
                (DroneFix::Local(l), _) => Vector3::from(l.local_xyz_m),
                (DroneFix::Geodetic(g), Some(o)) => wgs84_to_local(
                    &GeoCoordinate::from_degrees(g.lat_deg, g.lon_deg, g.alt_m).map_err(ctx)?,
                    &o,
                ),
                (DroneFix::Geodetic(_), None) => return Err(ctx(input("mixed drone position forms"))),
            };
            let [q1, q2, q3, q4] = f.quat;
            let quat = Quaternion::new(q1, q2, q3, q4).map_err(ctx)?;
            let fov = (f.fov_deg[0].to_radians(), f.fov_deg[1].to_radians());
            let pose = CameraPose::new(position, quat, fov, (f.image_px[0], f.image_px[1])).map_err(ctx)?;
            let measurements = match (&f.boxes, &f.doas) {
                (Some(boxes), _) => boxes
                    .iter()
                    .map(|&[bx, by, bw, bh]| {
                        pixel_to_doa(&bbox_center(&BoundingBox::new(bx, by, bw, bh)?), &pose, method)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(ctx)?,
                (None, Some(doas)) => doas
                    .iter()
                    .map(|&[x, y, z]| UnitVector3::from_xyz(x, y, z))
                    .collect::<Result<Vec<_>>>()
                    .map_err(ctx)?,
                (None, None) => return Err(ctx(input("frame has neither boxes nor doas"))),
            };
            Ok(FrameInput {
                frame: f.frame,
                time_s: f.time_s,
                pose,
                measurements,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub id: u64,
    pub birth_step: usize,
    pub end_step: usize,
    /// `[px, py, vx, vy]` for every step from `birth_step` to `end_step`.
    pub states: Vec<[f64; 4]>,
}

/// Trajectories over the step range `first_step .. first_step + steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySet {
    pub first_step: usize,
    pub steps: usize,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl TrajectorySet {
    pub fn from_truths(truths: &[TruthTrajectory], first_step: usize, steps: usize) -> Self {
        let trajectories = truths
            .iter()
            .map(|t| TrajectoryRecord {
                id: t.id,
                birth_step: t.birth_step,
                end_step: t.end_step(),
                states: t.states.iter().map(state_to_file_order).collect(),
            })
            .collect();
        Self {
            first_step,
            steps,
            trajectories,
        }
    }

    /// Estimates indexed by filter step, shifted by `first_step`.
    pub fn from_estimates(est: &[EstimatedTrajectory], first_step: usize, steps: usize) -> Self {
        let trajectories = est
            .iter()
            .map(|t| TrajectoryRecord {
                id: t.id,
                birth_step: t.birth_step + first_step,
                end_step: t.end_step + first_step,
                states: t.states.iter().map(state_to_file_order).collect(),
            })
            .collect();
        Self {
            first_step,
            steps,
            trajectories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let end = self.first_step + self.steps;
        for t in &self.trajectories {
            if t.birth_step > t.end_step || t.states.len() != t.end_step - t.birth_step + 1 {
                return Err(input(format!(
                    "trajectory {}: state count does not match its step range",
                    t.id
                )));
            }
            if t.birth_step < self.first_step || t.end_step >= end {
                return Err(input(format!(
                    "trajectory {} spans steps {}..={}, outside {}..{end}",
                    t.id, t.birth_step, t.end_step, self.first_step
                )));
            }
            if !t.states.iter().flatten().all(|v| v.is_finite()) {
                return Err(input(format!("trajectory {}: non-finite state", t.id)));
            }
        }
        Ok(())
    }

    pub fn states_at(&self, k: usize) -> Vec<ObjectState> {
        self.trajectories
            .iter()
            .filter(|t| (t.birth_step..=t.end_step).contains(&k))
            .map(|t| state_from_file_order(t.states[k - t.birth_step]))
            .collect()
    }

    pub fn positions_at(&self, k: usize) -> Vec<Vector2<f64>> {
        self.states_at(k).iter().map(position).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(json_err)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(json_err)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GospaRow {
    pub step: usize,
    pub gospa: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_targets: f64,
}

/// Per-step GOSPA between two sets over the same step range.
pub fn gospa_rows(truth: &TrajectorySet, est: &TrajectorySet, params: &GospaParams) -> Result<Vec<GospaRow>> {
    if (truth.first_step, truth.steps) != (est.first_step, est.steps) {
        return Err(input(format!(
            "step ranges differ: truth {}+{}, estimate {}+{}",
            truth.first_step, truth.steps, est.first_step, est.steps
        )));
    }
    (truth.first_step..truth.first_step + truth.steps)
        .map(|k| {
            let g = gospa(&truth.positions_at(k), &est.positions_at(k), params)?;
            Ok(GospaRow {
                step: k,
                gospa: g.total,
                localization: g.localization,
                missed: g.missed,
                false_targets: g.false_,
            })
        })
        .collect()
}

/// RMS over the rows' GOSPA values.
pub fn rms_of_rows(rows: &[GospaRow]) -> Result<f64> {
    let per: Vec<GospaResult> = rows
        .iter()
        .map(|r| GospaResult {
            total: r.gospa,
            ..Default::default()
        })
        .collect();
    rms_gospa_over_time(&per)
}

/// Per-step filter diagnostics. `runtime_ms` is wall-clock time and the only
/// column that changes between identical runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub frame: u64,
    pub global_hypotheses: usize,
    pub bernoulli_components: usize,
    pub iplf_runs: usize,
    pub runtime_ms: f64,
}

pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| input(e.to_string()))
}

pub fn parse_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| input(format!("row {}: {e}", i + 1))))
        .collect()
}

/// Filter settings as written in the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub mode: FilterMode,
    pub lscan: usize,
    pub iplf_iters: usize,
    pub likelihood: LikelihoodMode,
    pub kld_threshold: f64,
    pub unscented_w0: f64,
    pub gate_threshold: f64,
    pub max_globals: usize,
    pub prune_bernoulli_r: f64,
    pub prune_global_w: f64,
    pub prune_ppp_w: f64,
    pub estimator_r_threshold: f64,
    pub gamma_a: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        let s = IplfSettings::default();
        Self {
            mode: f.mode,
            lscan: f.lscan,
            iplf_iters: s.max_iters,
            likelihood: f.iplf.likelihood,
            kld_threshold: s.kld_threshold,
            unscented_w0: DEFAULT_W0,
            gate_threshold: f.gate_threshold,
            max_globals: f.max_globals,
            prune_bernoulli_r: f.prune_bernoulli_r,
            prune_global_w: f.prune_global_w,
            prune_ppp_w: f.prune_ppp_w,
            estimator_r_threshold: f.estimator_r_threshold,
            gamma_a: f.gamma_a,
        }
    }
}

impl FilterSection {
    pub fn to_config(&self) -> Result<FilterConfig> {
        let iplf = IplfConfig {
            settings: IplfSettings {
                max_iters: self.iplf_iters,
                kld_threshold: self.kld_threshold,
                w0: self.unscented_w0,
            },
            likelihood: self.likelihood,
        };
        let cfg = FilterConfig {
            mode: self.mode,
            lscan: self.lscan,
            iplf,
            gate_threshold: self.gate_threshold,
            max_globals: self.max_globals,
            prune_bernoulli_r: self.prune_bernoulli_r,
            prune_global_w: self.prune_global_w,
            prune_ppp_w: self.prune_ppp_w,
            estimator_r_threshold: self.estimator_r_threshold,
            gamma_a: self.gamma_a,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("[filter] {}", strip_prefix(&e))))?;
        if self.iplf_iters == 0 || !(self.unscented_w0 > -1.0 && self.unscented_w0 < 1.0) {
            return Err(Error::Config(
                "[filter] iplf_iters must be >= 1 and unscented_w0 in (-1, 1)".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GospaSection {
    /// Cut-off distance (m).
    pub c: f64,
    pub p: f64,
}

impl Default for GospaSection {
    fn default() -> Self {
        let g = GospaParams::default();
        Self { c: g.c, p: g.p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    /// Conversion of box centres to DOAs.
    pub pixel_method: PixelMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub max_rounds: usize,
    /// Stop when the lower bound improves by less than this.
    pub tol: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            max_rounds: 100,
            tol: 1e-9,
        }
    }
}

/// Everything a run needs besides input files and the seed. Every section and
/// field is optional; missing ones take the reference-scenario values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub filter: FilterSection,
    pub gospa: GospaSection,
    pub detections: DetectionSection,
    pub calibration: CalibrationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario
            .validate()
            .map_err(|e| Error::Config(format!("[scenario] {}", strip_prefix(&e))))?;
        self.filter.to_config()?;
        self.gospa_params()?;
        if self.calibration.max_rounds == 0 || !(self.calibration.tol >= 0.0) {
            return Err(Error::Config(
                "[calibration] max_rounds must be >= 1 and tol >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn gospa_params(&self) -> Result<GospaParams> {
        GospaParams::new(self.gospa.c, self.gospa.p, 2.0)
            .map_err(|e| Error::Config(format!("[gospa] {}", strip_prefix(&e))))
    }
}

/// Truth DOAs inside the FoV paired with the detections of each frame.
/// Truth steps are frame numbers.
pub fn annotated_frames(frames: &[FrameInput], truth: &TrajectorySet) -> Result<Vec<AnnotatedFrame>> {
    frames
        .iter()
        .map(|f| {
            let k = f.frame as usize;
            if k < truth.first_step || k >= truth.first_step + truth.steps {
                return Err(input(format!(
                    "frame {k} has no truth (truth covers steps {}..{})",
                    truth.first_step,
                    truth.first_step + truth.steps
                )));
            }
            let fov = f.pose.fov_spec();
            let mut truth_doas = Vec::new();
            for x in truth.states_at(k) {
                let z = doa_mean(&x, &f.pose)?;
                if fov.contains(&z) {
                    truth_doas.push(z);
                }
            }
            Ok(AnnotatedFrame {
                truth_doas,
                measured_doas: f.measurements.clone(),
                fov,
            })
        })
        .collect()
}

/// Calibration output as written by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    pub pd: f64,
    pub kappa: f64,
    pub lambda_c: f64,
    pub lower_bound: f64,
    pub rounds: usize,
    /// Lower bound after each round; nondecreasing.
    pub lower_bound_trace: Vec<f64>,
    pub frames: usize,
    pub detections: usize,
    pub clutter_labels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl CalibrationReport {
    pub fn new(result: &CalibrationResult, frames: &[AnnotatedFrame]) -> Self {
        let labels = result.assignments.iter().flat_map(|a| &a.labels);
        Self {
            pd: result.pd,
            kappa: result.kappa,
            lambda_c: result.lambda_c,
            lower_bound: result.lower_bound,
            rounds: result.iterations,
            lower_bound_trace: result.trace.clone(),
            frames: frames.len(),
            detections: frames.iter().map(|f| f.measured_doas.len()).sum(),
            clutter_labels: labels.filter(|l| **l == 0).count(),
            diagnostic: result.diagnostic.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(json_err)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(json_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, reference_scenario};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_frames() -> (Scenario, Vec<DetectionFrame>) {
        let cfg = ScenarioConfig {
            steps: 6,
            ..reference_scenario()
        };
        let s = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let f = frames_from_scenario(&s, &cfg);
        (s, f)
    }

    #[test]
    fn detection_frames_round_trip() {
        let (s, frames) = sample_frames();
        let text = write_detection_frames(&frames).unwrap();
        assert_eq!(text.lines().count(), 6);
        let back = parse_detection_frames(&text).unwrap();
        assert_eq!(back, frames);
        assert_eq!(write_detection_frames(&back).unwrap(), text);
        let inputs = frame_inputs(&back, PixelMethod::Pinhole).unwrap();
        for (i, f) in inputs.iter().zip(&s.frames) {
            assert_eq!(i.pose.rotation(), f.pose.rotation());
            assert_eq!(i.measurements.len(), f.measurements.len());
            for (a, b) in i.measurements.iter().zip(&f.measurements) {
                assert!((a.as_vector() - b.as_vector()).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn detection_errors_name_the_line() {
        let (_, frames) = sample_frames();
        let good = write_detection_frames(&frames[..2]).unwrap();
        let cases = [
            good.replace("\"doas\"", "\"dooas\""),
            good.replace("\"frame\":1", "\"frame\":0"),
            good.replace("\"doas\":[", "\"boxes\":[[1,2,3,4]],\"doas\":["),
            good.replacen(
                "{\"local_xyz_m\":[0.0,0.0,-25.0]}",
                "{\"lat_deg\":1.0,\"lon_deg\":2.0,\"alt_m\":3.0}",
                1,
            ),
            good.replace("\"drone\":{", "\"drone\":{\"x\":1,"),
        ];
        for (i, bad) in cases.iter().enumerate() {
            let e = parse_detection_frames(bad).unwrap_err().to_string();
            assert!(e.contains("line 1") || e.contains("line 2"), "case {i}: {e}");
        }
        assert!(parse_detection_frames("").unwrap().is_empty());
    }

    #[test]
    fn geodetic_frames_and_boxes() {
        let line = |frame: u64, lat: f64| {
            format!(
                "{{\"frame\":{frame},\"time_s\":0.0,\"drone\":{{\"lat_deg\":{lat},\"lon_deg\":-1.5,\"alt_m\":30.0}},\
                 \"quat\":[1.0,0.0,0.0,0.0],\"fov_deg\":[69.0,42.27],\"image_px\":[1920,1080],\"boxes\":[[950.0,530.0,20.0,20.0]]}}"
            )
        };
        let text = format!("{}\n{}\n", line(3, 52.0), line(4, 52.0001));
        let frames = parse_detection_frames(&text).unwrap();
        let inputs = frame_inputs(&frames, PixelMethod::Pinhole).unwrap();
        let p0 = inputs[0].pose.position;
        assert!(p0.x.abs() < 1e-6 && p0.y.abs() < 1e-6 && (p0.z + 30.0).abs() < 1e-6);
        // 1e-4 degrees of latitude is about 11.1 m north.
        let p1 = inputs[1].pose.position;
        assert!((p1.y - 11.13).abs() < 0.05 && p1.x.abs() < 1e-6);
        let z = inputs[0].measurements[0];
        assert!((z.x() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_set_round_trip_and_checks() {
        let (s, _) = sample_frames();
        let set = TrajectorySet::from_truths(&s.truths, 0, 6);
        let text = set.to_json().unwrap();
        let back = TrajectorySet::from_json(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.positions_at(2).len(), 4);
        let mut bad = set.clone();
        bad.trajectories[0].states.pop();
        assert!(bad.validate().is_err());
        let mut bad = set;
        bad.steps = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gospa_rows_and_csv() {
        let (s, _) = sample_frames();
        let truth = TrajectorySet::from_truths(&s.truths, 0, 6);
        let empty = TrajectorySet {
            first_step: 0,
            steps: 6,
            trajectories: Vec::new(),
        };
        let rows = gospa_rows(&truth, &empty, &GospaParams::default()).unwrap();
        // Four missed objects per step: sqrt(4 c² / 2).
        assert!((rms_of_rows(&rows).unwrap() - 18f64.sqrt()).abs() < 1e-12);
        assert!(rms_of_rows(&gospa_rows(&truth, &truth, &GospaParams::default()).unwrap()).unwrap() == 0.0);
        let text = write_csv(&rows).unwrap();
        assert!(text.starts_with("step,gospa,localization,missed,false_targets\n"));
        let back: Vec<GospaRow> = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(write_csv(&back).unwrap(), text);
        let shifted = TrajectorySet { first_step: 1, ..empty };
        assert!(gospa_rows(&truth, &shifted, &GospaParams::default()).is_err());
    }

    #[test]
    fn diagnostics_csv_round_trip() {
        let rows = vec![
            DiagnosticsRow {
                frame: 0,
                global_hypotheses: 3,
                bernoulli_components: 7,
                iplf_runs: 12,
                runtime_ms: 0.125,
            },
            DiagnosticsRow {
                frame: 2,
                global_hypotheses: 1,
                bernoulli_components: 0,
                iplf_runs: 0,
                runtime_ms: 1e-3,
            },
        ];
        let text = write_csv(&rows).unwrap();
        let back: Vec<DiagnosticsRow> = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(write_csv(&back).unwrap(), text);
        assert!(parse_csv::<DiagnosticsRow>("frame,global_hypotheses\n1,x\n").is_err());
    }

    #[test]
    fn run_config_defaults_and_round_trip() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.filter.to_config().unwrap(), FilterConfig::default());
        assert_eq!(cfg.scenario, reference_scenario());
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        let partial = RunConfig::from_toml("[filter]\nmode = \"pmbm\"\niplf_iters = 1\nlikelihood = \"l0\"\n").unwrap();
        assert_eq!(partial.filter.mode, FilterMode::Pmbm);
        assert_eq!(partial.filter.lscan, 5);
        assert_eq!(partial.filter.to_config().unwrap().iplf.settings.max_iters, 1);
    }

    #[test]
    fn run_config_rejects_bad_input() {
        for bad in [
            "[filter]\nlscan = 0\n",
            "[filter]\nunknown = 1\n",
            "[scenario]\npd = 1.5\n",
            "[gospa]\nc = -1.0\n",
            "[calibration]\nmax_rounds = 0\n",
            "[nope]\n",
            "[filter]\nmode = \"kalman\"\n",
        ] {
            let e = RunConfig::from_toml(bad).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        let e = RunConfig::from_toml("\n\n[filter]\nlscan = \"five\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 4"), "{e}");
    }

    #[test]
    fn annotated_frames_keep_in_fov_truth() {
        let (s, frames) = sample_frames();
        let inputs = frame_inputs(&frames, PixelMethod::Pinhole).unwrap();
        let truth = TrajectorySet::from_truths(&s.truths, 0, 6);
        let ann = annotated_frames(&inputs, &truth).unwrap();
        assert_eq!(ann.len(), 6);
        assert!(ann.iter().all(|a| a.truth_doas.len() == 4));
        let short = TrajectorySet {
            steps: 3,
            trajectories: Vec::new(),
            ..truth
        };
        assert!(annotated_frames(&inputs, &short).is_err());
    }
}
