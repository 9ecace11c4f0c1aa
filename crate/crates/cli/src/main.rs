use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use panost_core::curate::slice;
use panost_core::grid::to_gray255;
use panost_core::io::{read_rgb_png, write_mask_png, write_rgb_png};
use panost_core::pipeline::{configure_threads, Manifest, Outcome, Pipeline, PipelineConfig, PipelineError, Stage};
use panost_core::sphere::{project, read_rig_manifest, PerspectiveCamera};

#[derive(Parser)]
#[command(name = "panost", version, about = "Panoramic space-time reconstruction pipeline")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Workspace directory.
    #[arg(short, long, default_value = "workspace")]
    workspace: PathBuf,

    /// key=value config file; defaults to the config recorded in the workspace manifest.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Panorama height; the width is twice this.
    #[arg(long)]
    height: Option<usize>,

    #[arg(long)]
    frames: Option<usize>,

    /// Directory of per-view depth maps (`depth_NNNN_vVV.pfm` plus `rig.txt`) to use
    /// instead of the workspace `views/`.
    #[arg(long, value_name = "DIR")]
    external_depth: Option<PathBuf>,

    /// Treat per-view maps as disparity and invert them.
    #[arg(long)]
    disparity: bool,

    /// Fail the seam stage when the mean seam jump exceeds this value.
    #[arg(long, value_name = "GAP")]
    max_gap: Option<f64>,

    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render an oracle scene into the workspace: frames, ground truth and per-view depths.
    Synth(Common),
    /// Split raw frame sequences into clips at scene cuts.
    Curate {
        /// Directory of PNG frames, or of one subdirectory of frames per video.
        #[arg(short, long)]
        input: PathBuf,
        /// Manifest path; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sample a perspective view from an equirectangular image.
    Project {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        roll: f64,
        /// Horizontal field of view in degrees.
        #[arg(long, default_value_t = 90.0)]
        fov: f64,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        /// Also write the validity mask here.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Optical flow and motion masks.
    Flow(Common),
    /// Fit the first frame's depth field.
    AlignFirst(Common),
    /// Align the remaining frames against the first.
    AlignVideo(Common),
    /// Build the time-stamped point cloud.
    Lift(Common),
    /// Project frames and depths into the 58-camera training rig.
    Rig(Common),
    /// Write the four offset views of every rig camera.
    Warp(Common),
    /// Report the wrap-around seam of every frame.
    Seam(Common),
    /// Render the point cloud at one frame and compare with the source frame.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Camera name from `rig/rig.txt`; otherwise the orientation flags are used.
        #[arg(long)]
        camera: Option<String>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 90.0)]
        fov: f64,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Output PNG; defaults to `report/render_NNNN.png` in the workspace.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Flow, masks, alignment, lifting, rig, warping and seam report in order.
    RunAll(Common),
}

fn config_err(e: impl ToString) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn load_config(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(config_err)?;
    } else if let Ok(text) = std::fs::read_to_string(c.workspace.join("manifest.txt")) {
        let m = Manifest::parse(&text).map_err(config_err)?;
        cfg.apply_text(&m.config_text()).map_err(config_err)?;
    }
    for pair in &c.set {
        cfg.set_pair(pair).map_err(config_err)?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.height {
        cfg.height = v;
    }
    if let Some(v) = c.frames {
        cfg.frames = v;
    }
    if let Some(d) = &c.external_depth {
        let abs = std::path::absolute(d).map_err(config_err)?;
        cfg.external_depth = Some(abs.to_string_lossy().into_owned());
    }
    if c.disparity {
        cfg.disparity = true;
    }
    if c.max_gap.is_some() {
        cfg.max_seam_gap = c.max_gap;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn report(stage: Stage, outcome: Outcome) {
    let word = match outcome {
        Outcome::Ran => "done",
        Outcome::Skipped => "up to date",
    };
    println!("{stage}: {word}");
}

fn run_stages(c: &Common, stages: &[Stage]) -> Result<(), PipelineError> {
    let mut p = Pipeline::open(&c.workspace, load_config(c)?)?;
    for &s in stages {
        report(s, p.run(s, c.force)?);
    }
    Ok(())
}

fn stage_failure(stage: &str, e: impl ToString) -> PipelineError {
    PipelineError::Stage {
        stage: stage.to_string(),
        frame: None,
        config_hash: String::new(),
        source: panost_core::Error::invalid(e.to_string()),
    }
}

fn frame_dirs(input: &Path) -> std::io::Result<Vec<(String, PathBuf)>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let name = |p: &Path| p.file_name().map_or_else(|| "video".into(), |n| n.to_string_lossy().into_owned());
    if subdirs.is_empty() {
        Ok(vec![(name(input), input.to_path_buf())])
    } else {
        Ok(subdirs.into_iter().map(|p| (name(&p), p)).collect())
    }
}

fn curate(input: &Path, output: Option<&Path>, config: Option<&Path>, set: &[String]) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(config_err)?;
    }
    for pair in set {
        cfg.set_pair(pair).map_err(config_err)?;
    }
    let curator = cfg.curator();
    curator.validate().map_err(config_err)?;
    let fail = |e: &dyn ToString| stage_failure("curate", e.to_string());
    let mut text = String::new();
    for (id, dir) in frame_dirs(input).map_err(|e| fail(&e))? {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| fail(&e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let gray = files
            .iter()
            .map(|f| read_rgb_png(f).map(|g| to_gray255(&g)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(&e))?;
        text.push_str(&slice(&id, &gray, &curator).map_err(|e| fail(&e))?.to_text());
    }
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| fail(&e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(c) => run_stages(&c, &[Stage::Synth]),
        Command::Flow(c) => run_stages(&c, &[Stage::Flow, Stage::Masks]),
        Command::AlignFirst(c) => run_stages(&c, &[Stage::AlignFirst]),
        Command::AlignVideo(c) => run_stages(&c, &[Stage::AlignVideo]),
        Command::Lift(c) => run_stages(&c, &[Stage::Lift]),
        Command::Rig(c) => run_stages(&c, &[Stage::Rig]),
        Command::Warp(c) => run_stages(&c, &[Stage::Warp]),
        Command::Seam(c) => run_stages(&c, &[Stage::Seam]),
        Command::RunAll(c) => {
            let mut p = Pipeline::open(&c.workspace, load_config(&c)?)?;
            for (s, o) in p.run_all(c.force)? {
                report(s, o);
            }
            Ok(())
        }
        Command::Curate {
            input,
            output,
            config,
            set,
        } => curate(&input, output.as_deref(), config.as_deref(), &set),
        Command::Project {
            input,
            output,
            yaw,
            pitch,
            roll,
            fov,
            width,
            height,
            mask,
        } => {
            let fail = |e: &dyn ToString| stage_failure("project", e.to_string());
            let cam = PerspectiveCamera::new("view", yaw, pitch, roll, fov, width, height).map_err(config_err)?;
            let pano = read_rgb_png(&input).map_err(|e| fail(&e))?;
            let view = project(&pano, &cam);
            write_rgb_png(&output, &view.pixels).map_err(|e| fail(&e))?;
            if let Some(m) = mask {
                write_mask_png(&m, &view.valid).map_err(|e| fail(&e))?;
            }
            Ok(())
        }
        Command::Render {
            common,
            frame,
            camera,
            yaw,
            pitch,
            fov,
            size,
            output,
        } => {
            let p = Pipeline::open(&common.workspace, load_config(&common)?)?;
            let cam = match camera {
                Some(name) => read_rig_manifest(&p.workspace().path("rig/rig.txt"))
                    .map_err(|e| stage_failure("render", e))?
                    .into_iter()
                    .find(|c| c.name == name)
                    .ok_or_else(|| config_err(format!("no camera named {name:?} in rig/rig.txt")))?,
                None => PerspectiveCamera::new("render", yaw, pitch, 0.0, fov, size, size).map_err(config_err)?,
            };
            let (image, score) = p.render(frame, &cam)?;
            let out = output.unwrap_or_else(|| p.workspace().path(&format!("report/render_{frame:04}.png")));
            write_rgb_png(&out, &image.pixels).map_err(|e| stage_failure("render", e))?;
            match score {
                Some(db) => println!("frame {frame}: psnr {db:.2} dB over {:.1}% rendered pixels", 100.0 * image.valid_fraction()),
                None => println!("frame {frame}: nothing rendered"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = configure_threads().and_then(|()| execute(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
