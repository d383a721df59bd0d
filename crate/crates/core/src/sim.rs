//! Synthetic scenario generator: ground-truth trajectories, a static drone
//! camera, VMF detections and uniform clutter on the FoV.

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::AnnotatedFrame;
use crate::directional::{vmf_sample_one, FovSpec, VmfParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraPose, UnitVector3};
use crate::linalg;
use crate::models::{build_cv, default_birth, doa_mean, BirthModel, MeasurementModel, MotionModel, ObjectState};
use crate::tpmbm::Models;

/// Ground-truth source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TruthMode {
    /// Fixed constant-velocity objects from [`ScenarioConfig::objects`].
    #[default]
    Scripted,
    /// Births, deaths and motion drawn from the filter's generative model.
    Sampled,
}

/// Deterministic constant-velocity object present on `[birth_step, death_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedObject {
    /// Initial state `[px, py, vx, vy]` at `birth_step`.
    pub initial: [f64; 4],
    pub birth_step: usize,
    pub death_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub steps: usize,
    pub tau: f64,
    pub sigma_q2: f64,
    pub ps: f64,
    pub lambda_b_initial: f64,
    pub lambda_b: f64,
    pub sigma_v2: f64,
    pub kappa: f64,
    pub pd: f64,
    pub lambda_c: f64,
    pub fov_deg: [f64; 2],
    pub image_px: [u32; 2],
    /// Drone position in the local frame (m, z down).
    pub drone_position: [f64; 3],
    /// Ground point the camera looks at.
    pub look_at: [f64; 3],
    pub truth: TruthMode,
    pub objects: Vec<ScriptedObject>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        reference_scenario()
    }
}

/// Reference synthetic scenario: drone 25 m above the origin looking at
/// (25, 25, 0) and four objects at 2 m/s converging on the image centre,
/// where they pass within about 1 m of each other at step 50. One of them
/// disappears at step 51. Headings are mostly across the line of sight,
/// along which DOAs resolve position best.
pub fn reference_scenario() -> ScenarioConfig {
    let tau = 1.0 / 6.0;
    let tc = 50.0 * tau;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // Away from the camera (u) and across the line of sight (w).
    let (u, w) = ([s, s], [-s, s]);
    let at = |a: f64, b: f64| [25.0 + a * u[0] + b * w[0], 25.0 + a * u[1] + b * w[1]];
    let cross = |c: [f64; 2], along_u: f64, along_w: f64| {
        let n = (along_u * along_u + along_w * along_w).sqrt();
        let (vx, vy) = (
            2.0 * (along_u * u[0] + along_w * w[0]) / n,
            2.0 * (along_u * u[1] + along_w * w[1]) / n,
        );
        [c[0] - vx * tc, c[1] - vy * tc, vx, vy]
    };
    let (c40, s40) = (40f64.to_radians().cos(), 40f64.to_radians().sin());
    let objects = vec![
        ScriptedObject {
            initial: cross(at(1.0, 0.0), 0.0, 1.0),
            birth_step: 0,
            death_step: 101,
        },
        ScriptedObject {
            initial: cross(at(-1.0, 0.0), 0.0, -1.0),
            birth_step: 0,
            death_step: 101,
        },
        ScriptedObject {
            initial: cross(at(0.0, 0.5), s40, c40),
            birth_step: 0,
            death_step: 101,
        },
        ScriptedObject {
            initial: cross(at(0.0, -0.5), -s40, -c40),
            birth_step: 0,
            death_step: 51,
        },
    ];
    ScenarioConfig {
        steps: 101,
        tau,
        sigma_q2: 0.5,
        ps: 0.99,
        lambda_b_initial: 1.0,
        lambda_b: 0.025,
        sigma_v2: 400.0,
        kappa: 700.0,
        pd: 0.9,
        lambda_c: 5.0,
        fov_deg: [69.0, 42.27],
        image_px: [1920, 1080],
        drone_position: [0.0, 0.0, -25.0],
        look_at: [25.0, 25.0, 0.0],
        truth: TruthMode::Scripted,
        objects,
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.tau,
            self.sigma_q2,
            self.lambda_b_initial,
            self.lambda_b,
            self.sigma_v2,
            self.kappa,
            self.lambda_c,
        ];
        if rates.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.tau <= 0.0 {
            return Err(Error::Config(
                "rates must be finite and nonnegative, tau positive".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ps) || !(0.0..=1.0).contains(&self.pd) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        for o in &self.objects {
            if o.birth_step >= o.death_step || o.initial.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("bad scripted object {o:?}")));
            }
        }
        self.pose()?;
        Ok(())
    }

    pub fn pose(&self) -> Result<CameraPose> {
        let [fx, fy] = self.fov_deg;
        CameraPose::looking_at(
            Vector3::from(self.drone_position),
            Vector3::from(self.look_at),
            (fx.to_radians(), fy.to_radians()),
            (self.image_px[0], self.image_px[1]),
        )
    }

    pub fn motion(&self) -> Result<MotionModel> {
        build_cv(self.tau, self.sigma_q2, self.ps)
    }

    pub fn birth(&self) -> Result<BirthModel> {
        BirthModel::new(self.lambda_b, self.lambda_b_initial, self.sigma_v2)
    }

    pub fn measurement(&self) -> Result<MeasurementModel> {
        let [fx, fy] = self.fov_deg;
        MeasurementModel::new(self.kappa, self.pd, self.lambda_c, FovSpec::from_degrees(fx, fy)?)
    }

    /// Filter models matching the generator.
    pub fn models(&self) -> Result<Models> {
        Ok(Models {
            motion: self.motion()?,
            birth: self.birth()?,
            measurement: self.measurement()?,
        })
    }
}

/// Converts `[px, py, vx, vy]` to the internal `[px, vx, py, vy]` order.
pub fn state_from_file_order(v: [f64; 4]) -> ObjectState {
    Vector4::new(v[0], v[2], v[1], v[3])
}

/// Converts an internal state to `[px, py, vx, vy]`.
pub fn state_to_file_order(x: &ObjectState) -> [f64; 4] {
    [x[0], x[2], x[1], x[3]]
}

/// Ground-truth trajectory: one state per step from `birth_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrajectory {
    pub id: u64,
    pub birth_step: usize,
    pub states: Vec<ObjectState>,
}

impl TruthTrajectory {
    pub fn end_step(&self) -> usize {
        self.birth_step + self.states.len() - 1
    }

    pub fn state_at(&self, k: usize) -> Option<&ObjectState> {
        k.checked_sub(self.birth_step).and_then(|i| self.states.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub step: usize,
    pub time: f64,
    pub pose: CameraPose,
    pub measurements: Vec<UnitVector3>,
    /// For evaluation only.
    pub truth_states: Vec<ObjectState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<FrameRecord>,
    pub truths: Vec<TruthTrajectory>,
}

fn scripted_truths(
    cfg: &ScenarioConfig,
    motion: &MotionModel,
    pose: &CameraPose,
    fov: &FovSpec,
) -> Result<Vec<TruthTrajectory>> {
    let mut out = Vec::new();
    for (i, o) in cfg.objects.iter().enumerate() {
        if o.birth_step >= cfg.steps {
            continue;
        }
        let x0 = state_from_file_order(o.initial);
        if !doa_mean(&x0, pose).map(|z| fov.contains(&z)).unwrap_or(false) {
            return Err(Error::Config(format!(
                "scripted object {i} starts outside the field of view"
            )));
        }
        let end = o.death_step.min(cfg.steps);
        let mut states = vec![x0];
        for _ in o.birth_step + 1..end {
            states.push(motion.f * states.last().expect("non-empty"));
        }
        out.push(TruthTrajectory {
            id: i as u64,
            birth_step: o.birth_step,
            states,
        });
    }
    Ok(out)
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn sample_gaussian4<R: Rng + ?Sized>(mean: &Vector4<f64>, cov: &nalgebra::Matrix4<f64>, rng: &mut R) -> Vector4<f64> {
    let l = linalg::sqrt(cov);
    let e = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    mean + l * e
}

fn sampled_truths<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    motion: &MotionModel,
    pose: &CameraPose,
    rng: &mut R,
) -> Result<Vec<TruthTrajectory>> {
    let birth = cfg.birth()?;
    let lq = linalg::sqrt(&motion.q);
    let mut alive: Vec<TruthTrajectory> = Vec::new();
    let mut done: Vec<TruthTrajectory> = Vec::new();
    let mut next_id = 0;
    for k in 0..cfg.steps {
        if k > 0 {
            let mut still = Vec::with_capacity(alive.len());
            for mut t in alive.drain(..) {
                if rng.random::<f64>() < motion.ps {
                    let e = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = motion.f * t.states.last().expect("non-empty") + lq * e;
                    t.states.push(x);
                    still.push(t);
                } else {
                    done.push(t);
                }
            }
            alive = still;
        }
        let b = default_birth(pose, &birth, k)?;
        for _ in 0..poisson(b.weight, rng) {
            let x = sample_gaussian4(&b.mean, &b.cov, rng);
            alive.push(TruthTrajectory {
                id: next_id,
                birth_step: k,
                states: vec![x],
            });
            next_id += 1;
        }
    }
    done.extend(alive);
    done.sort_by_key(|t| t.id);
    Ok(done)
}

/// Detections of the given object states plus clutter, shuffled. Objects
/// whose expected DOA lies outside the FoV are not detected; detections that
/// fall outside the FoV are discarded.
pub fn simulate_measurements<R: Rng + ?Sized>(
    states: &[ObjectState],
    model: &MeasurementModel,
    pose: &CameraPose,
    rng: &mut R,
) -> Vec<UnitVector3> {
    let mut out = Vec::new();
    for x in states {
        let Ok(mu) = doa_mean(x, pose) else { continue };
        if !model.fov.contains(&mu) {
            continue;
        }
        if rng.random::<f64>() < model.pd {
            let z = vmf_sample_one(&VmfParams { mu, kappa: model.kappa }, rng);
            if model.fov.contains(&z) {
                out.push(z);
            }
        }
    }
    for _ in 0..poisson(model.lambda_c, rng) {
        out.push(model.fov.sample_uniform(rng));
    }
    out.shuffle(rng);
    out
}

/// Generates a scenario; deterministic for a given rng state.
pub fn generate<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    cfg.validate()?;
    let pose = cfg.pose()?;
    let motion = cfg.motion()?;
    let model = cfg.measurement()?;
    let truths = match cfg.truth {
        TruthMode::Scripted => scripted_truths(cfg, &motion, &pose, &model.fov)?,
        TruthMode::Sampled => sampled_truths(cfg, &motion, &pose, rng)?,
    };
    let mut frames = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let truth_states: Vec<ObjectState> = truths.iter().filter_map(|t| t.state_at(k)).copied().collect();
        let measurements = simulate_measurements(&truth_states, &model, &pose, rng);
        frames.push(FrameRecord {
            step: k,
            time: k as f64 * cfg.tau,
            pose: pose.clone(),
            measurements,
            truth_states,
        });
    }
    Ok(Scenario { frames, truths })
}

/// Calibration data: `objects` truth DOAs per frame drawn uniformly from the
/// central 80% of the FoV, each detected with probability `pd` with VMF
/// noise, plus Poisson clutter uniform on the FoV.
pub fn generate_calibration_frames<R: Rng + ?Sized>(
    frames: usize,
    objects: usize,
    model: &MeasurementModel,
    rng: &mut R,
) -> Result<Vec<AnnotatedFrame>> {
    if !(0.0..=1.0).contains(&model.pd) {
        return Err(invalid("detection probability out of range"));
    }
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let truth: Vec<UnitVector3> = (0..objects).map(|_| model.fov.sample_uniform_inner(0.8, rng)).collect();
        let mut z = Vec::new();
        for mu in &truth {
            if rng.random::<f64>() < model.pd {
                let d = vmf_sample_one(
                    &VmfParams {
                        mu: *mu,
                        kappa: model.kappa,
                    },
                    rng,
                );
                if model.fov.contains(&d) {
                    z.push(d);
                }
            }
        }
        for _ in 0..poisson(model.lambda_c, rng) {
            z.push(model.fov.sample_uniform(rng));
        }
        z.shuffle(rng);
        out.push(AnnotatedFrame {
            truth_doas: truth,
            measured_doas: z,
            fov: model.fov,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directional::mean_resultant_length;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_constants() {
        let c = reference_scenario();
        assert_eq!(c.steps, 101);
        assert_eq!(c.kappa, 700.0);
        assert_eq!(c.ps, 0.99);
        assert_eq!(c.lambda_c, 5.0);
        assert_eq!(c.sigma_q2, 0.5);
        assert_eq!(c.tau, 1.0 / 6.0);
        assert_eq!((c.lambda_b_initial, c.lambda_b, c.sigma_v2), (1.0, 0.025, 400.0));
        c.validate().unwrap();
    }

    #[test]
    fn scripted_geometry() {
        let c = reference_scenario();
        let s = generate(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.frames.len(), 101);
        assert_eq!(s.truths.len(), 4);
        assert_eq!(s.truths[3].end_step(), 50);
        assert!(s.frames[50].truth_states.len() == 4 && s.frames[51].truth_states.len() == 3);
        let pose = c.pose().unwrap();
        let fov = c.measurement().unwrap().fov;
        for t in &s.truths {
            for x in &t.states {
                assert!(fov.contains(&doa_mean(x, &pose).unwrap()));
            }
        }
        // Objects come close to each other mid-scenario.
        let f = &s.frames[50].truth_states;
        let spread = f
            .iter()
            .map(|x| ((x[0] - 25.0).powi(2) + (x[2] - 25.0).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(spread < 2.0);
    }

    #[test]
    fn perfect_sensor_counts() {
        let mut c = reference_scenario();
        c.pd = 1.0;
        c.lambda_c = 0.0;
        let s = generate(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for f in &s.frames {
            assert_eq!(f.measurements.len(), f.truth_states.len());
        }
    }

    #[test]
    fn seed_determinism_and_fov() {
        let c = reference_scenario();
        let a = generate(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let fov = c.measurement().unwrap().fov;
        assert!(a.frames.iter().flat_map(|f| &f.measurements).all(|z| fov.contains(z)));
    }

    #[test]
    fn clutter_rate() {
        let m = reference_scenario().measurement().unwrap();
        let pose = reference_scenario().pose().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n: usize = (0..10_000)
            .map(|_| simulate_measurements(&[], &m, &pose, &mut rng).len())
            .sum();
        let mean = n as f64 / 1e4;
        assert!((mean - 5.0).abs() / 5.0 < 0.02, "{mean}");
    }

    #[test]
    fn detection_concentration() {
        let c = reference_scenario();
        let pose = c.pose().unwrap();
        let mut m = c.measurement().unwrap();
        m.pd = 1.0;
        m.lambda_c = 0.0;
        let x = Vector4::new(25.0, 0.0, 25.0, 0.0);
        let mu = doa_mean(&x, &pose).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let r: f64 = (0..n)
            .map(|_| simulate_measurements(&[x], &m, &pose, &mut rng)[0].dot(&mu))
            .sum::<f64>()
            / n as f64;
        assert!((r - mean_resultant_length(700.0)).abs() < 5e-3);
    }

    #[test]
    fn sampled_mode_runs() {
        let mut c = reference_scenario();
        c.truth = TruthMode::Sampled;
        let s = generate(&c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(s.frames.len(), 101);
        for t in &s.truths {
            assert!(t.end_step() < 101);
        }
    }

    #[test]
    fn scripted_object_outside_fov_is_rejected() {
        let mut c = reference_scenario();
        c.objects[0].initial = [-30.0, -30.0, 0.0, 0.0];
        assert!(matches!(
            generate(&c, &mut ChaCha8Rng::seed_from_u64(7)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn calibration_frames() {
        let m = reference_scenario().measurement().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = generate_calibration_frames(50, 4, &m, &mut rng).unwrap();
        assert_eq!(f.len(), 50);
        assert!(f.iter().all(|a| a.truth_doas.len() == 4));
        assert!(f
            .iter()
            .flat_map(|a| a.truth_doas.iter().chain(&a.measured_doas))
            .all(|z| m.fov.contains(z)));
    }
}
