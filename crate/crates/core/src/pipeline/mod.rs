//! Stage orchestration over a workspace directory.
//!
//! Every stage records in the manifest a hash of the config keys it reads and of the
//! files it consumes, plus a digest of each file it wrote. A stage whose recorded
//! hash matches and whose outputs still verify is skipped. Within `run_all` a stage
//! also runs when any stage it depends on ran.

pub mod config;
mod stages;
pub mod workspace;

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::grid::{psnr, Rgb};
use crate::lift::{frame_time, import_ply, render_points};
use crate::sphere::{project, PerspectiveCamera, PerspectiveImage};

pub use config::{FlowSource, PipelineConfig};
pub use workspace::{file_digest, Manifest, StageEntry, Workspace};

use workspace::LockError;

/// Environment variable read by [`configure_threads`].
pub const THREADS_ENV: &str = "PANOST_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Flow,
    Masks,
    AlignFirst,
    AlignVideo,
    Lift,
    Rig,
    Warp,
    Seam,
}

/// Stages executed by [`Pipeline::run_all`], in order.
pub const RUN_ALL: [Stage; 8] = [
    Stage::Flow,
    Stage::Masks,
    Stage::AlignFirst,
    Stage::AlignVideo,
    Stage::Lift,
    Stage::Rig,
    Stage::Warp,
    Stage::Seam,
];

const ALIGN_KEYS: [&str; 18] = [
    "seed",
    "iterations_first",
    "shift_warmup",
    "rays_per_step",
    "lr",
    "affine_lr",
    "shift_lr",
    "lambda_depth",
    "lambda_scale",
    "lambda_shift",
    "lambda_first",
    "lambda_pre",
    "hidden",
    "layers",
    "octaves",
    "disparity",
    "external_depth",
    "iterations_next",
];

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Flow,
        Stage::Masks,
        Stage::AlignFirst,
        Stage::AlignVideo,
        Stage::Lift,
        Stage::Rig,
        Stage::Warp,
        Stage::Seam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Flow => "flow",
            Stage::Masks => "masks",
            Stage::AlignFirst => "align-first",
            Stage::AlignVideo => "align-video",
            Stage::Lift => "lift",
            Stage::Rig => "rig",
            Stage::Warp => "warp",
            Stage::Seam => "seam",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages whose outputs this one reads.
    pub fn depends_on(self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Flow | Stage::AlignFirst | Stage::Seam => &[],
            Stage::Masks => &[Stage::Flow],
            Stage::AlignVideo => &[Stage::AlignFirst, Stage::Flow],
            Stage::Lift => &[Stage::AlignVideo, Stage::Masks],
            Stage::Rig => &[Stage::AlignVideo],
            Stage::Warp => &[Stage::Rig],
        }
    }

    /// Config keys that influence the outputs.
    pub fn config_keys(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[
                "seed",
                "height",
                "frames",
                "moving_object",
                "scale_min",
                "scale_max",
                "shift_min",
                "shift_max",
                "noise_sigma",
                "view_size",
                "view_fov",
            ],
            Stage::Flow => &["flow_source", "flow_block", "flow_search"],
            Stage::Masks => &["flow_threshold"],
            Stage::AlignFirst => &ALIGN_KEYS[..16],
            Stage::AlignVideo => &ALIGN_KEYS,
            Stage::Lift => &["tau_std", "std_rule"],
            Stage::Rig => &["rig_size"],
            Stage::Warp => &[],
            Stage::Seam => &["max_seam_gap"],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),

    #[error(
        "stage {stage} failed{} (config {config_hash}): {source}",
        frame.map_or_else(String::new, |f| format!(" at frame {f}"))
    )]
    Stage {
        stage: String,
        frame: Option<usize>,
        config_hash: String,
        #[source]
        source: Error,
    },

    #[error("workspace is locked by another process ({})", .0.display())]
    Lock(PathBuf),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::Lock(_) => 4,
        }
    }
}

/// Size the global thread pool, and the matrix-product threads unless
/// `MATMUL_NUM_THREADS` is already set, from [`THREADS_ENV`]. Call before any work starts.
pub fn configure_threads() -> Result<(), PipelineError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Config(format!("{THREADS_ENV} must be a positive thread count, got {v:?}")))?;
    if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Pipeline {
    ws: Workspace,
    cfg: PipelineConfig,
    manifest: Manifest,
}

impl Pipeline {
    pub fn open(root: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let ws = Workspace::open(root).map_err(|e| match e {
            LockError::Held(p) => PipelineError::Lock(p),
            LockError::Io(e) => PipelineError::Config(format!("cannot open workspace: {e}")),
        })?;
        let manifest = ws
            .load_manifest()
            .map_err(|e| PipelineError::Config(format!("unreadable manifest: {e}")))?;
        Ok(Pipeline { ws, cfg, manifest })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn fail(&self, stage: &str, e: Error) -> PipelineError {
        let frame = match &e {
            Error::Frame { frame, .. } => Some(*frame),
            _ => None,
        };
        PipelineError::Stage {
            stage: stage.to_string(),
            frame,
            config_hash: self.cfg.hash(),
            source: e,
        }
    }

    fn input_hash(&self, stage: Stage) -> crate::Result<String> {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(b"\n");
        let all = self.cfg.to_text();
        for line in all.lines() {
            let key = line.split(" = ").next().unwrap_or("");
            if stage.config_keys().contains(&key) {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        for (label, path) in stages::inputs(&self.ws, &self.cfg, stage)? {
            h.update(format!("{label} {}\n", file_digest(&path)?).as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Recorded outputs exist and match their digests.
    fn outputs_verify(&self, entry: &StageEntry) -> bool {
        entry
            .files
            .iter()
            .all(|(p, d)| file_digest(&self.ws.path(p)).is_ok_and(|got| &got == d))
    }

    /// Run one stage unless it is up to date.
    pub fn run(&mut self, stage: Stage, force: bool) -> Result<Outcome, PipelineError> {
        let name = stage.name();
        let hash = self.input_hash(stage).map_err(|e| self.fail(name, e))?;
        if !force {
            if let Some(entry) = self.manifest.stages.get(name) {
                if entry.input_hash == hash && self.outputs_verify(entry) {
                    log::info!("{name}: up to date");
                    return Ok(Outcome::Skipped);
                }
            }
        }
        let keep_inputs = stage == Stage::Flow && self.cfg.flow_source == FlowSource::External;
        if let Some(old) = self.manifest.stages.remove(name) {
            if !keep_inputs {
                for (p, _) in &old.files {
                    let _ = std::fs::remove_file(self.ws.path(p));
                }
            }
        }
        log::info!("{name}: running");
        let started = std::time::Instant::now();
        let mut files = stages::run(&self.ws, &self.cfg, stage).map_err(|e| self.fail(name, e))?;
        log::info!("{name}: finished in {:.1?}", started.elapsed());
        files.sort();
        files.dedup();
        let files = files
            .into_iter()
            .map(|p| file_digest(&self.ws.path(&p)).map(|d| (p, d)))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| self.fail(name, e))?;
        self.manifest.seed = self.cfg.seed;
        self.manifest.config_hash = self.cfg.hash();
        self.manifest.config = self.cfg.to_text().lines().map(str::to_string).collect();
        self.manifest.stages.insert(
            name.to_string(),
            StageEntry {
                input_hash: hash,
                files,
            },
        );
        self.ws.save_manifest(&self.manifest).map_err(|e| self.fail(name, e))?;
        Ok(Outcome::Ran)
    }

    /// Flow through seam report. A stage reruns when a stage it depends on ran.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<(Stage, Outcome)>, PipelineError> {
        let mut done: Vec<(Stage, Outcome)> = Vec::new();
        for stage in RUN_ALL {
            let upstream_ran = stage
                .depends_on()
                .iter()
                .any(|d| done.iter().any(|(s, o)| s == d && *o == Outcome::Ran));
            let outcome = self.run(stage, force || upstream_ran)?;
            done.push((stage, outcome));
        }
        Ok(done)
    }

    /// Render the lifted cloud at frame `l` through `cam`, and the PSNR against the
    /// source frame seen through the same camera on rendered pixels.
    pub fn render(&self, l: usize, cam: &PerspectiveCamera) -> Result<(PerspectiveImage<Rgb>, Option<f64>), PipelineError> {
        let go = || -> crate::Result<_> {
            let frames = self.ws.frame_count();
            if l == 0 || l > frames {
                return Err(Error::invalid(format!("frame {l} outside 1..={frames}")));
            }
            let cloud = import_ply(&self.ws.path("cloud/cloud.ply"))?;
            let image = render_points(&cloud, cam, frame_time(l, frames));
            let source = stages::load_frame(&self.ws, l)?;
            let reference = project(source.pixels(), cam);
            let score = psnr(&image.pixels, &reference.pixels, Some(&image.valid));
            Ok((image, score))
        };
        go().map_err(|e| self.fail("render", e))
    }
}
