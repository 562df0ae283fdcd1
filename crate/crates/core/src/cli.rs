//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{KpbeError, Result};
use crate::frame::{FrameSequence, ImageTensor};
use crate::geometry::{HeadPose, RotationMatrix};
use crate::metrics::QualityReport;
use crate::model::Kpbe;
use crate::pipeline::io::{self, file_backend_at, list_frames, load_frames_at, read_frame, write_frames};
use crate::pipeline::toy::{blurred_mouth_clip, synthesize_toy_dataset, talking_clip};
use crate::pipeline::{enhance, reenact_pose_sequence, RunConfig};
use crate::training::{train_stage2, write_loss_trace, BackendClip, Checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kpbe", version, about = "Keypoint-based talking-head enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a toy dataset of synthetic talking heads plus blurred-mouth backend frames.
    Datagen(DatagenArgs),
    /// Train the frontend (stage 1: self-reconstruction, stage 2: backend fine-tuning).
    Train(TrainArgs),
    /// Combine a source image, backend frames and a pose-driving clip.
    Enhance(EnhanceArgs),
    /// Like enhance, with a user-defined head pose for every frame.
    Reenact(ReenactArgs),
    /// PSNR/SSIM of predicted frames against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    clips: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Yaw amplitude in degrees.
    #[arg(long, default_value_t = 30.0)]
    max_yaw: f64,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Gaussian sigma (pixels) of the mouth blur in the backend frames.
    #[arg(long, default_value_t = 3.0)]
    backend_blur: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from; required for stage 2.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint output (overrides paths.checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace CSV output (overrides paths.trace).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    pose_driver: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReenactArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    /// Optional clip whose length caps the number of output frames.
    #[arg(long)]
    pose_driver: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    roll: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tx: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    ty: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tz: f64,
    /// Row-major 3x3 rotation matrix, used instead of yaw/pitch/roll.
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        conflicts_with_all = ["yaw", "pitch", "roll"]
    )]
    rotation: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    json: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(KpbeError),
}

impl From<KpbeError> for Failure {
    fn from(e: KpbeError) -> Self {
        Self::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Datagen(a) => datagen(&a),
        Command::Train(a) => train(&a),
        Command::Enhance(a) => run_enhance(&a),
        Command::Reenact(a) => reenact(&a),
        Command::Evaluate(a) => evaluate(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn datagen(a: &DatagenArgs) -> CliResult {
    if a.clips == 0 || a.frames == 0 {
        return Err(Failure::Usage("--clips and --frames must be positive".into()));
    }
    for c in 0..a.clips {
        let name = format!("clip_{c:03}");
        let params = talking_clip(a.seed.wrapping_add(c as u64), a.frames, a.max_yaw.to_radians(), a.resolution);
        let clip = synthesize_toy_dataset(&params)?;
        let clip_dir = a.out.join("clips").join(&name);
        write_frames(&clip_dir, &clip.frames)?;
        let labels = serde_json::to_string_pretty(&clip.labels).map_err(KpbeError::from)?;
        fs::write(clip_dir.join("labels.json"), labels).map_err(KpbeError::from)?;
        write_frames(&a.out.join("backend").join(&name), &blurred_mouth_clip(&params, a.backend_blur)?)?;
        log::info!("wrote {name} ({} frames)", a.frames);
    }
    Ok(())
}

/// Frame directories under `dir`, sorted by name; `dir` itself when it
/// holds frames directly.
fn clip_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if list_frames(dir).is_ok() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| KpbeError::Frames {
            path: dir.to_path_buf(),
            msg: format!("cannot read directory: {e}"),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(KpbeError::Frames {
            path: dir.to_path_buf(),
            msg: "no clip directories".into(),
        });
    }
    Ok(dirs)
}

fn train(a: &TrainArgs) -> CliResult {
    if a.stage == 2 && a.resume.is_none() {
        return Err(Failure::Usage("stage 2 needs a stage-1 checkpoint via --resume".into()));
    }
    let mut cfg = RunConfig::from_file(&a.config)?;
    cfg.apply_env()?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.checkpoint_out.clone())
        .ok_or_else(|| Failure::Usage("no checkpoint output: pass --out or set paths.checkpoint".into()))?;
    let data = cfg
        .data_dir
        .clone()
        .ok_or_else(|| KpbeError::Config("paths.data is not set".into()))?;
    let res = cfg.model.resolution;
    let dirs = clip_dirs(&data)?;
    let clips = dirs
        .iter()
        .map(|d| load_frames_at(d, res))
        .collect::<Result<Vec<_>>>()?;
    let training = cfg.training();
    let resumed = a
        .resume
        .as_deref()
        .map(|p| Checkpoint::load_for(p, &cfg.model))
        .transpose()?;

    let (checkpoint, trace) = if a.stage == 1 {
        let mut trainer = match resumed {
            Some(ckpt) => Trainer::resume(ckpt, training)?,
            None => Trainer::new(Kpbe::new(cfg.model.clone(), cfg.seed)?, training)?,
        };
        trainer.run_stage1(&clips)?;
        (trainer.checkpoint(), trainer.trace)
    } else {
        let backend_root = cfg
            .backend_dir
            .clone()
            .ok_or_else(|| KpbeError::Config("stage 2 needs paths.backend".into()))?;
        let paired = clips
            .into_iter()
            .zip(&dirs)
            .map(|(gt, d)| {
                let backend_dir = match d.file_name() {
                    Some(name) if d != &data => backend_root.join(name),
                    _ => backend_root.clone(),
                };
                BackendClip::new(gt, load_frames_at(&backend_dir, res)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let outcome = train_stage2(&paired, resumed.expect("checked above"), &training)?;
        (outcome.checkpoint, outcome.trace)
    };
    checkpoint.save(&out)?;
    log::info!("saved checkpoint to {} after {} steps", out.display(), checkpoint.step());
    if let Some(path) = a.trace.clone().or_else(|| cfg.trace_out.clone()) {
        write_loss_trace(&path, &trace)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Kpbe> {
    Ok(Checkpoint::load(path)?.model)
}

fn load_source(path: &Path, resolution: usize) -> Result<ImageTensor> {
    Ok(read_frame(path)?.resized(resolution, resolution))
}

fn run_enhance(a: &EnhanceArgs) -> CliResult {
    let model = load_model(&a.ckpt)?;
    let res = model.config().resolution;
    let source = load_source(&a.source, res)?;
    let mut backend = file_backend_at(&a.backend, res)?;
    let driver = load_frames_at(&a.pose_driver, res)?;
    let frames = enhance(&model, &source, &mut backend, &driver)?;
    write_frames(&a.out, &frames)?;
    log::info!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn user_pose(a: &ReenactArgs) -> Result<HeadPose> {
    let translation = [a.tx, a.ty, a.tz];
    match &a.rotation {
        Some(v) => {
            let m = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
            HeadPose::new(RotationMatrix::new(m)?, translation)
        }
        None => HeadPose::from_euler(a.yaw.to_radians(), a.pitch.to_radians(), a.roll.to_radians(), translation),
    }
}

fn reenact(a: &ReenactArgs) -> CliResult {
    if a.rotation.as_ref().is_some_and(|v| v.len() != 9) {
        return Err(Failure::Usage("--rotation takes 9 comma-separated values".into()));
    }
    let pose = user_pose(a)?;
    let model = load_model(&a.ckpt)?;
    let res = model.config().resolution;
    let source = load_source(&a.source, res)?;
    let mut backend = file_backend_at(&a.backend, res)?;
    let available = io::BackendSource::remaining(&backend).unwrap_or(1);
    let n = match &a.pose_driver {
        Some(dir) => list_frames(dir)?.len(),
        None => available,
    };
    let frames = reenact_pose_sequence(&model, &source, &mut backend, &vec![pose; n])?;
    let frames = FrameSequence::new(frames.into_iter().map(|f| f.image).collect())?;
    write_frames(&a.out, &frames)?;
    log::info!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn read_native(dir: &Path) -> Result<Vec<ImageTensor>> {
    list_frames(dir)?.iter().map(|p| read_frame(p)).collect()
}

fn evaluate(a: &EvaluateArgs) -> CliResult {
    let pred = read_native(&a.pred)?;
    let gt = read_native(&a.gt)?;
    let report = QualityReport::compare(&pred, &gt)?;
    fs::write(&a.json, report.to_json()?).map_err(KpbeError::from)?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()?).map_err(KpbeError::from)?;
    }
    match report.mean_psnr {
        Some(p) => log::info!("mean PSNR {p:.3} dB, mean SSIM {:.5}", report.mean_ssim),
        None => log::info!("all frames identical, mean SSIM {:.5}", report.mean_ssim),
    }
    Ok(())
}
