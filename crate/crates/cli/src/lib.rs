//! Subcommand implementations behind the `flashsplat` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use flash_splat::camera::CameraView;
use flash_splat::composite::{SceneRender, TransmissionMode};
use flash_splat::eval::{evaluate, EvalReport};
use flash_splat::io::checkpoint::{read_checkpoint, write_checkpoint};
use flash_splat::io::dataset::{read_dataset, read_poses, write_dataset};
use flash_splat::io::pfm::{read_pfm, write_pfm};
use flash_splat::io::{read_json, write_json, write_log_csv, write_png_display, write_png_preview};
use flash_splat::pipeline::{fit, FitConfig};
use flash_splat::raster::RenderSettings;
use flash_splat::synth::{emit_dataset, paired_subtract, DatasetSpec};
use flash_splat::{Error, ImageMap, Result};
use serde::Serialize;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flashsplat", version, about = "Reflection separation from unpaired flash/no-flash captures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Initialize and train a scene model on a dataset.
    Fit(FitArgs),
    /// Render layers of a checkpoint at the given poses.
    Render(RenderArgs),
    /// Paired flash/no-flash subtraction of two PFM images.
    Subtract(SubtractArgs),
    /// Score a checkpoint against a dataset's ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset spec JSON; defaults are used for missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON; defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Remove the flash cue: three clouds and no linearity loss.
    #[arg(long)]
    pub flashless: bool,
    /// Constrain the flash transmission to `c` times the no-flash one.
    #[arg(long, value_name = "C")]
    pub hard_linear: Option<f64>,
    /// Seed all clouds randomly instead of from the point clouds.
    #[arg(long)]
    pub no_init: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layer {
    Composite,
    #[value(name = "T")]
    T,
    #[value(name = "R")]
    R,
    Beta,
    #[value(name = "depthT")]
    DepthT,
    #[value(name = "depthR")]
    DepthR,
}

impl Layer {
    fn name(self) -> &'static str {
        match self {
            Layer::Composite => "composite",
            Layer::T => "T",
            Layer::R => "R",
            Layer::Beta => "beta",
            Layer::DepthT => "depthT",
            Layer::DepthR => "depthR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON array of camera records, as written to a dataset's poses.json.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long, value_enum)]
    pub layer: Layer,
    #[arg(long, value_enum, default_value = "off")]
    pub flash: Switch,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SubtractArgs {
    #[arg(long)]
    pub flash: PathBuf,
    #[arg(long)]
    pub noflash: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::DegenerateCovariance(_) | Error::Domain(_) | Error::BehindCamera(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Fit(a) => fit_cmd(&a).map(|_| ()),
        Command::Render(a) => render(&a),
        Command::Subtract(a) => subtract(&a),
        Command::Eval(a) => eval_cmd(&a).map(|_| ()),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = emit_dataset(&spec)?;
    write_dataset(&a.out, &ds)?;
    log::info!(
        "wrote {} captures and {} held-out views to {}",
        ds.captures.views.len(),
        ds.heldout.len(),
        a.out.display()
    );
    Ok(())
}

/// Run metadata written next to the checkpoint.
#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub config: FitConfig,
    pub alignment_applied: bool,
    pub alignment_rms_before: Option<f64>,
    pub alignment_rms_after: Option<f64>,
    pub init_accuracy: Option<f64>,
    pub skipped_steps: usize,
    pub final_loss: Option<f64>,
    pub gaussians: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

pub fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    cfg.flashless |= a.flashless;
    cfg.no_init |= a.no_init;
    if a.hard_linear.is_some() {
        cfg.hard_linear = a.hard_linear;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.init.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn fit_cmd(a: &FitArgs) -> Result<FitSummary> {
    let cfg = fit_config(a)?;
    let ds = read_dataset(&a.data)?;
    if !cfg.flashless && ds.flash_points.is_none() {
        return Err(Error::Config("dataset has no flash captures; use --flashless".into()));
    }
    mkdir(&a.out)?;
    let out_dir = a.out.clone();
    let mut hook = move |it: usize, scene: &flash_splat::composite::SceneModel| -> Result<()> {
        write_checkpoint(&out_dir.join(format!("iter_{it:06}")), scene, it)
    };
    let out = fit(
        &ds.captures,
        ds.flash_points.as_ref(),
        &ds.noflash_points,
        &cfg,
        Some(&mut hook),
    )?;
    write_checkpoint(&a.out, &out.scene, cfg.train.iterations)?;
    write_log_csv(&a.out.join("log.csv"), &out.log)?;
    let summary = FitSummary {
        config: cfg,
        alignment_applied: out.alignment_applied,
        alignment_rms_before: out.alignment.map(|x| x.rms_before),
        alignment_rms_after: out.alignment.map(|x| x.rms_after),
        init_accuracy: out.init_accuracy,
        skipped_steps: out.skipped_steps,
        final_loss: out.log.last().map(|r| r.total),
        gaussians: out
            .scene
            .cloud_ids()
            .into_iter()
            .map(|id| (id.name().to_string(), out.scene.cloud(id).map_or(0, |c| c.len())))
            .collect(),
        warnings: out.warnings,
    };
    write_json(&a.out.join("fit.json"), &summary)?;
    Ok(summary)
}

/// Raw-linear (or depth / β) map of one layer.
pub fn render_layer(scene: &flash_splat::composite::SceneModel, view: &CameraView, layer: Layer) -> Result<ImageMap> {
    let r = SceneRender::new(scene, view, false, &RenderSettings::default())?;
    let tone = scene.tone;
    let raw = |m: ImageMap| m.map(|v| tone.inverse(v.clamp(0.0, 1.0)));
    Ok(match layer {
        Layer::Composite => raw(r.composite()),
        Layer::T => raw(r.transmission()),
        Layer::R => raw(r.reflection.color.clone()),
        Layer::Beta => r.beta_map(),
        Layer::DepthT => r.transmission_depth().clone(),
        Layer::DepthR => r.reflection.depth.clone(),
    })
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let (scene, _) = read_checkpoint(&a.ckpt)?;
    let flash = a.flash == Switch::On;
    if flash && scene.mode == TransmissionMode::Flashless && a.layer != Layer::R && a.layer != Layer::Beta {
        log::warn!("flashless checkpoint has no flash transmission; rendering the no-flash layer");
    }
    let records = read_poses(&a.poses)?;
    mkdir(&a.out)?;
    for rec in records {
        let mut view = rec.to_view()?;
        view.flash = flash;
        let map = render_layer(&scene, &view, a.layer)?;
        let stem = format!("{}_{}", view.view_id, a.layer.name());
        write_pfm(&a.out.join(format!("{stem}.pfm")), &map)?;
        let png = a.out.join(format!("{stem}.png"));
        match a.layer {
            Layer::DepthT | Layer::DepthR => {
                let max = map.data().iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
                let norm = map.map(|v| if max > 0.0 { v / max } else { 0.0 });
                write_png_display(&png, &norm)?;
            }
            Layer::Beta => write_png_display(&png, &map)?,
            _ => write_png_preview(&png, &map)?,
        }
    }
    Ok(())
}

pub fn subtract(a: &SubtractArgs) -> Result<()> {
    let f = read_pfm(&a.flash)?;
    let n = read_pfm(&a.noflash)?;
    write_pfm(&a.out, &paired_subtract(&f, &n)?)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<EvalReport> {
    let (scene, _) = read_checkpoint(&a.ckpt)?;
    let ds = read_dataset(&a.data)?;
    if ds.truth.is_empty() {
        return Err(Error::Config(format!("dataset {} has no ground-truth layers", a.data.display())));
    }
    let mut views = Vec::new();
    for (v, held) in ds.captures.views.iter().map(|v| (v, false)).chain(ds.heldout.iter().map(|v| (v, true))) {
        let t = ds
            .truth_for(&v.view_id)
            .ok_or_else(|| Error::Config(format!("no ground truth for view {}", v.view_id)))?;
        views.push((v, t, held));
    }
    let report = evaluate(&scene, &views)?;
    if !report.is_finite() {
        return Err(Error::Numeric("evaluation produced non-finite metrics".into()));
    }
    write_json(&a.out, &report)?;
    Ok(report)
}
