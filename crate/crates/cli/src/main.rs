//! `doatrack` command-line tool.
//!
//! ```text
//! doatrack simulate  --out DIR [--config run.toml] [--seed N]
//! doatrack track     --detections FILE --out DIR [--config run.toml] [filter flags]
//! doatrack calibrate --detections FILE --truth FILE --out FILE [--config run.toml]
//! doatrack evaluate  --truth FILE --estimates FILE --out FILE [--gospa-c C] [--gospa-p P]
//! ```
//!
//! Exit status: 0 on success, 2 for bad input, configuration or I/O, 3 when
//! the computation itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use doatrack::calibration::{coordinate_ascent, CalibrationParams};
use doatrack::geometry::PixelMethod;
use doatrack::io::{
    annotated_frames, frame_inputs, frames_from_scenario, gospa_rows, parse_detection_frames, rms_of_rows, write_csv,
    write_detection_frames, CalibrationReport, DiagnosticsRow, FrameInput, RunConfig, TrajectorySet,
};
use doatrack::models::MeasurementModel;
use doatrack::sim::generate;
use doatrack::slr::LikelihoodMode;
use doatrack::tpmbm::{estimate, predict_step, step, FilterMode, Models, PmbmPosterior};
use doatrack::Error;

#[derive(Parser)]
#[command(
    name = "doatrack",
    version,
    about = "Multi-object tracking from drone camera detections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: detections.jsonl and truth.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter over a detection file: trajectories.json and diagnostics.csv.
    Track {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<FilterMode>,
        #[arg(long)]
        lscan: Option<usize>,
        #[arg(long)]
        iplf_iters: Option<usize>,
        #[arg(long, value_parser = parse_likelihood)]
        likelihood: Option<LikelihoodMode>,
        #[arg(long, value_parser = parse_pixel_method)]
        pixel_method: Option<PixelMethod>,
    },
    /// Estimate detection probability, concentration and clutter rate from
    /// detections and ground truth.
    Calibrate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_pixel_method)]
        pixel_method: Option<PixelMethod>,
    },
    /// Per-step GOSPA of estimates against truth, plus the RMS summary on stdout.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-step CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gospa_c: Option<f64>,
        #[arg(long)]
        gospa_p: Option<f64>,
    },
}

fn parse_mode(s: &str) -> Result<FilterMode, String> {
    match s {
        "pmbm" => Ok(FilterMode::Pmbm),
        "tpmbm" => Ok(FilterMode::Tpmbm),
        _ => Err("expected pmbm or tpmbm".into()),
    }
}

fn parse_likelihood(s: &str) -> Result<LikelihoodMode, String> {
    match s {
        "l0" => Ok(LikelihoodMode::L0),
        "l1" => Ok(LikelihoodMode::L1),
        _ => Err("expected l0 or l1".into()),
    }
}

fn parse_pixel_method(s: &str) -> Result<PixelMethod, String> {
    match s {
        "linear" => Ok(PixelMethod::Linear),
        "pinhole" => Ok(PixelMethod::Pinhole),
        _ => Err("expected linear or pinhole".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) => 2,
        _ => 3,
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::from_toml(&read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

fn simulate(config: Option<&Path>, seed: u64, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let scenario = generate(&cfg.scenario, &mut ChaCha8Rng::seed_from_u64(seed))?;
    out_dir(out)?;
    write(
        &out.join("detections.jsonl"),
        &write_detection_frames(&frames_from_scenario(&scenario, &cfg.scenario))?,
    )?;
    let truth = TrajectorySet::from_truths(&scenario.truths, 0, cfg.scenario.steps);
    write(&out.join("truth.json"), &truth.to_json()?)
}

fn frame_models(cfg: &RunConfig, frame: &FrameInput) -> Result<Models, Error> {
    let s = &cfg.scenario;
    Ok(Models {
        motion: s.motion()?,
        birth: s.birth()?,
        measurement: MeasurementModel::new(s.kappa, s.pd, s.lambda_c, frame.pose.fov_spec())?,
    })
}

fn track(detections: &Path, cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let filter = cfg.filter.to_config()?;
    let frames = parse_detection_frames(&read(detections)?)?;
    let inputs = frame_inputs(&frames, cfg.detections.pixel_method)?;
    out_dir(out)?;

    let mut post = PmbmPosterior::new();
    let mut diagnostics = Vec::new();
    let mut failure = None;
    let mut prev: Option<u64> = None;
    'frames: for f in &inputs {
        let models = frame_models(cfg, f)?;
        if let Some(p) = prev {
            if f.frame > p + 1 {
                eprintln!(
                    "warning: frames {}..{} missing, predicting through the gap",
                    p + 1,
                    f.frame - 1
                );
            }
            for missing in p + 1..f.frame {
                let t0 = Instant::now();
                match predict_step(post.clone(), &f.pose, &models, &filter) {
                    Ok(next) => post = next,
                    Err(e) => {
                        failure = Some((missing, e));
                        break 'frames;
                    }
                }
                diagnostics.push(diagnostics_row(missing, &post, t0));
            }
        }
        let t0 = Instant::now();
        match step(post.clone(), &f.measurements, &f.pose, &models, &filter) {
            Ok(next) => post = next,
            Err(e) => {
                failure = Some((f.frame, e));
                break;
            }
        }
        diagnostics.push(diagnostics_row(f.frame, &post, t0));
        prev = Some(f.frame);
    }

    write(&out.join("diagnostics.csv"), &write_csv(&diagnostics)?)?;
    if let Some((frame, e)) = failure {
        let e = match e {
            Error::InvalidInput(m) => Error::InvalidInput(format!("frame {frame}: {m}")),
            Error::Config(m) => Error::Config(format!("frame {frame}: {m}")),
            other => Error::Numerical(format!(
                "frame {frame}: {other}; diagnostics up to the failure were written"
            )),
        };
        return Err(e);
    }
    let (first, steps) = match (inputs.first(), inputs.last()) {
        (Some(a), Some(b)) => (a.frame as usize, (b.frame - a.frame + 1) as usize),
        _ => (0, 0),
    };
    let set = TrajectorySet::from_estimates(&estimate(&post, &filter), first, steps);
    write(&out.join("trajectories.json"), &set.to_json()?)
}

fn diagnostics_row(frame: u64, post: &PmbmPosterior, t0: Instant) -> DiagnosticsRow {
    DiagnosticsRow {
        frame,
        global_hypotheses: post.globals.len(),
        bernoulli_components: post.bernoulli_count(),
        iplf_runs: post.stats.iplf_runs,
        runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
    }
}

fn calibrate(detections: &Path, truth: &Path, cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let frames = parse_detection_frames(&read(detections)?)?;
    let inputs = frame_inputs(&frames, cfg.detections.pixel_method)?;
    let truth = TrajectorySet::from_json(&read(truth)?)?;
    truth.validate()?;
    let annotated = annotated_frames(&inputs, &truth)?;
    let init = CalibrationParams::initial(&annotated);
    let result = coordinate_ascent(&annotated, init, cfg.calibration.max_rounds, cfg.calibration.tol)?;
    if let Some(d) = &result.diagnostic {
        eprintln!("warning: {d}");
    }
    write(out, &CalibrationReport::new(&result, &annotated).to_json()?)
}

fn evaluate(truth: &Path, estimates: &Path, cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let params = cfg.gospa_params()?;
    let truth = TrajectorySet::from_json(&read(truth)?)?;
    let est = TrajectorySet::from_json(&read(estimates)?)?;
    truth.validate()?;
    est.validate()?;
    let rows = gospa_rows(&truth, &est, &params)?;
    write(out, &write_csv(&rows)?)?;
    println!("rms_gospa={} steps={}", rms_of_rows(&rows)?, rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(config.as_deref(), seed, &out),
        Command::Track {
            detections,
            config,
            out,
            mode,
            lscan,
            iplf_iters,
            likelihood,
            pixel_method,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.filter.mode = m;
            }
            if let Some(l) = lscan {
                cfg.filter.lscan = l;
            }
            if let Some(n) = iplf_iters {
                cfg.filter.iplf_iters = n;
            }
            if let Some(l) = likelihood {
                cfg.filter.likelihood = l;
            }
            if let Some(p) = pixel_method {
                cfg.detections.pixel_method = p;
            }
            cfg.validate()?;
            track(&detections, &cfg, &out)
        }
        Command::Calibrate {
            detections,
            truth,
            config,
            out,
            pixel_method,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = pixel_method {
                cfg.detections.pixel_method = p;
            }
            calibrate(&detections, &truth, &cfg, &out)
        }
        Command::Evaluate {
            truth,
            estimates,
            config,
            out,
            gospa_c,
            gospa_p,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(c) = gospa_c {
                cfg.gospa.c = c;
            }
            if let Some(p) = gospa_p {
                cfg.gospa.p = p;
            }
            evaluate(&truth, &estimates, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
