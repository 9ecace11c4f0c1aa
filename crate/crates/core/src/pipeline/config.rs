//! Pipeline configuration as `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. The canonical
//! form lists every key in [`PipelineConfig::KEYS`] order and is what gets hashed.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::curate::CuratorConfig;
use crate::error::{Error, Result};
use crate::field::FieldArch;
use crate::lift::VariationRule;
use crate::oracle::DepthPerturbation;
use crate::spacetime::VideoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    /// Ground-truth flow written by `synth`.
    Oracle,
    /// Block matching between consecutive frames.
    Block,
    /// `.flo` files already present in `flow/`.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub height: usize,
    pub frames: usize,
    pub moving_object: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_min: f64,
    pub shift_max: f64,
    pub noise_sigma: f64,
    pub view_size: usize,
    pub view_fov: f64,
    pub flow_source: FlowSource,
    pub flow_block: usize,
    pub flow_search: usize,
    pub flow_threshold: f32,
    pub iterations_first: usize,
    pub iterations_next: usize,
    pub shift_warmup: usize,
    pub rays_per_step: usize,
    pub lr: f64,
    pub affine_lr: f64,
    pub shift_lr: f64,
    pub lambda_depth: f64,
    pub lambda_scale: f64,
    pub lambda_shift: f64,
    pub lambda_first: f64,
    pub lambda_pre: f64,
    pub hidden: usize,
    pub layers: usize,
    pub octaves: usize,
    pub disparity: bool,
    pub external_depth: Option<String>,
    pub tau_std: f64,
    pub std_rule: VariationRule,
    pub rig_size: usize,
    pub max_seam_gap: Option<f64>,
    pub sample_interval: usize,
    pub trans_threshold: f32,
    pub count_threshold: f64,
    pub discard_margin: usize,
    pub min_clip_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let align = AlignConfig::first_frame();
        let pert = DepthPerturbation::default();
        let cur = CuratorConfig::default();
        let arch = FieldArch::default();
        PipelineConfig {
            seed: 0,
            height: 128,
            frames: 9,
            moving_object: true,
            scale_min: pert.scale_min,
            scale_max: pert.scale_max,
            shift_min: pert.shift_min,
            shift_max: pert.shift_max,
            noise_sigma: pert.noise_sigma,
            view_size: 64,
            view_fov: 90.0,
            flow_source: FlowSource::Oracle,
            flow_block: 8,
            flow_search: 6,
            flow_threshold: crate::motion::DEFAULT_FLOW_THRESHOLD,
            iterations_first: align.iterations,
            iterations_next: AlignConfig::subsequent_frames().iterations,
            shift_warmup: align.shift_warmup,
            rays_per_step: align.rays_per_step,
            lr: align.lr,
            affine_lr: align.affine_lr,
            shift_lr: align.shift_lr,
            lambda_depth: align.lambda_depth,
            lambda_scale: align.lambda_scale,
            lambda_shift: align.lambda_shift,
            lambda_first: align.lambda_first,
            lambda_pre: align.lambda_pre,
            hidden: arch.hidden,
            layers: arch.layers,
            octaves: arch.octaves,
            disparity: false,
            external_depth: None,
            tau_std: crate::lift::DEFAULT_STD_THRESHOLD,
            std_rule: VariationRule::AtLeast,
            rig_size: 128,
            max_seam_gap: None,
            sample_interval: cur.sample_interval,
            trans_threshold: cur.trans_threshold,
            count_threshold: cur.count_threshold,
            discard_margin: cur.discard_margin,
            min_clip_len: cur.min_clip_len,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    (!matches!(value, "" | "none")).then_some(value)
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 42] = [
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
        "flow_source",
        "flow_block",
        "flow_search",
        "flow_threshold",
        "iterations_first",
        "iterations_next",
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
        "tau_std",
        "std_rule",
        "rig_size",
        "max_seam_gap",
        "sample_interval",
        "trans_threshold",
        "count_threshold",
        "discard_margin",
        "min_clip_len",
        "width",
    ];

    pub fn width(&self) -> usize {
        2 * self.height
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => {
                let w: usize = parse(key, v)?;
                if w % 2 != 0 {
                    return Err(Error::invalid("width must be even (W = 2H)"));
                }
                self.height = w / 2;
            }
            "frames" => self.frames = parse(key, v)?,
            "moving_object" => self.moving_object = parse_bool(key, v)?,
            "scale_min" => self.scale_min = parse(key, v)?,
            "scale_max" => self.scale_max = parse(key, v)?,
            "shift_min" => self.shift_min = parse(key, v)?,
            "shift_max" => self.shift_max = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "view_size" => self.view_size = parse(key, v)?,
            "view_fov" => self.view_fov = parse(key, v)?,
            "flow_source" => {
                self.flow_source = match v {
                    "oracle" => FlowSource::Oracle,
                    "block" => FlowSource::Block,
                    "external" => FlowSource::External,
                    _ => return Err(Error::invalid(format!("flow_source must be oracle, block or external, got {v:?}"))),
                }
            }
            "flow_block" => self.flow_block = parse(key, v)?,
            "flow_search" => self.flow_search = parse(key, v)?,
            "flow_threshold" => self.flow_threshold = parse(key, v)?,
            "iterations_first" => self.iterations_first = parse(key, v)?,
            "iterations_next" => self.iterations_next = parse(key, v)?,
            "shift_warmup" => self.shift_warmup = parse(key, v)?,
            "rays_per_step" => self.rays_per_step = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "affine_lr" => self.affine_lr = parse(key, v)?,
            "shift_lr" => self.shift_lr = parse(key, v)?,
            "lambda_depth" => self.lambda_depth = parse(key, v)?,
            "lambda_scale" => self.lambda_scale = parse(key, v)?,
            "lambda_shift" => self.lambda_shift = parse(key, v)?,
            "lambda_first" => self.lambda_first = parse(key, v)?,
            "lambda_pre" => self.lambda_pre = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "octaves" => self.octaves = parse(key, v)?,
            "disparity" => self.disparity = parse_bool(key, v)?,
            "external_depth" => self.external_depth = optional(v).map(str::to_string),
            "tau_std" => self.tau_std = parse(key, v)?,
            "std_rule" => {
                self.std_rule = match v {
                    "at-least" => VariationRule::AtLeast,
                    "below" => VariationRule::Below,
                    _ => return Err(Error::invalid(format!("std_rule must be at-least or below, got {v:?}"))),
                }
            }
            "rig_size" => self.rig_size = parse(key, v)?,
            "max_seam_gap" => self.max_seam_gap = optional(v).map(|s| parse(key, s)).transpose()?,
            "sample_interval" => self.sample_interval = parse(key, v)?,
            "trans_threshold" => self.trans_threshold = parse(key, v)?,
            "count_threshold" => self.count_threshold = parse(key, v)?,
            "discard_margin" => self.discard_margin = parse(key, v)?,
            "min_clip_len" => self.min_clip_len = parse(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        let rule = match self.std_rule {
            VariationRule::AtLeast => "at-least",
            VariationRule::Below => "below",
        };
        let flow = match self.flow_source {
            FlowSource::Oracle => "oracle",
            FlowSource::Block => "block",
            FlowSource::External => "external",
        };
        match key {
            "seed" => self.seed.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width().to_string(),
            "frames" => self.frames.to_string(),
            "moving_object" => self.moving_object.to_string(),
            "scale_min" => self.scale_min.to_string(),
            "scale_max" => self.scale_max.to_string(),
            "shift_min" => self.shift_min.to_string(),
            "shift_max" => self.shift_max.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "view_size" => self.view_size.to_string(),
            "view_fov" => self.view_fov.to_string(),
            "flow_source" => flow.to_string(),
            "flow_block" => self.flow_block.to_string(),
            "flow_search" => self.flow_search.to_string(),
            "flow_threshold" => self.flow_threshold.to_string(),
            "iterations_first" => self.iterations_first.to_string(),
            "iterations_next" => self.iterations_next.to_string(),
            "shift_warmup" => self.shift_warmup.to_string(),
            "rays_per_step" => self.rays_per_step.to_string(),
            "lr" => self.lr.to_string(),
            "affine_lr" => self.affine_lr.to_string(),
            "shift_lr" => self.shift_lr.to_string(),
            "lambda_depth" => self.lambda_depth.to_string(),
            "lambda_scale" => self.lambda_scale.to_string(),
            "lambda_shift" => self.lambda_shift.to_string(),
            "lambda_first" => self.lambda_first.to_string(),
            "lambda_pre" => self.lambda_pre.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "octaves" => self.octaves.to_string(),
            "disparity" => self.disparity.to_string(),
            "external_depth" => self.external_depth.clone().unwrap_or_else(|| "none".into()),
            "tau_std" => self.tau_std.to_string(),
            "std_rule" => rule.to_string(),
            "rig_size" => self.rig_size.to_string(),
            "max_seam_gap" => self.max_seam_gap.map_or_else(|| "none".into(), |g| g.to_string()),
            "sample_interval" => self.sample_interval.to_string(),
            "trans_threshold" => self.trans_threshold.to_string(),
            "count_threshold" => self.count_threshold.to_string(),
            "discard_margin" => self.discard_margin.to_string(),
            "min_clip_len" => self.min_clip_len.to_string(),
            _ => unreachable!("key list and values are in sync"),
        }
    }

    /// Every key with its value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.value_of(k)).expect("writing to a String cannot fail");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.frames == 0 || self.view_size < 2 || self.rig_size < 2 {
            return Err(Error::invalid("height, frames, view_size and rig_size must be positive"));
        }
        if self.scale_min <= 0.0 || self.scale_max < self.scale_min || self.shift_max < self.shift_min {
            return Err(Error::invalid("perturbation ranges are inverted or nonpositive"));
        }
        if self.noise_sigma < 0.0 || !(self.flow_threshold > 0.0) || self.tau_std < 0.0 {
            return Err(Error::invalid("noise_sigma, flow_threshold and tau_std must be nonnegative"));
        }
        if self.octaves == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::invalid("field architecture sizes must be positive"));
        }
        self.first_align().validate()?;
        self.next_align().validate()?;
        self.curator().validate()?;
        if self.flow_block == 0 || self.flow_search == 0 {
            return Err(Error::invalid("flow_block and flow_search must be positive"));
        }
        crate::sphere::PerspectiveCamera::new("check", 0.0, 0.0, 0.0, self.view_fov, self.view_size, self.view_size)?;
        Ok(())
    }

    pub fn arch(&self) -> FieldArch {
        FieldArch {
            octaves: self.octaves,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn first_align(&self) -> AlignConfig {
        AlignConfig {
            lambda_depth: self.lambda_depth,
            lambda_scale: self.lambda_scale,
            lambda_shift: self.lambda_shift,
            lambda_first: self.lambda_first,
            lambda_pre: self.lambda_pre,
            iterations: self.iterations_first,
            shift_warmup: self.shift_warmup,
            rays_per_step: self.rays_per_step,
            lr: self.lr,
            affine_lr: self.affine_lr,
            shift_lr: self.shift_lr,
            seed: self.seed,
            arch: self.arch(),
        }
    }

    pub fn next_align(&self) -> AlignConfig {
        AlignConfig {
            iterations: self.iterations_next,
            shift_warmup: 0,
            ..self.first_align()
        }
    }

    pub fn video(&self) -> VideoConfig {
        VideoConfig {
            first: self.first_align(),
            next: self.next_align(),
            flow_threshold: self.flow_threshold,
        }
    }

    pub fn perturbation(&self) -> DepthPerturbation {
        DepthPerturbation {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            shift_min: self.shift_min,
            shift_max: self.shift_max,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn curator(&self) -> CuratorConfig {
        CuratorConfig {
            sample_interval: self.sample_interval,
            trans_threshold: self.trans_threshold,
            count_threshold: self.count_threshold,
            discard_margin: self.discard_margin,
            min_clip_len: self.min_clip_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrip() {
        let mut c = PipelineConfig::default();
        c.set_pair("seed=42").unwrap();
        c.set_pair("max_seam_gap = 0.01").unwrap();
        c.set_pair("external_depth=/tmp/d").unwrap();
        let back = PipelineConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.to_text().lines().count(), PipelineConfig::KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let c = PipelineConfig::from_text("# tiny\nheight = 16 # rows\n\nframes=3\n").unwrap();
        assert_eq!((c.height, c.width(), c.frames), (16, 32, 3));
        assert!(PipelineConfig::from_text("bogus = 1").is_err());
        assert!(PipelineConfig::from_text("height = x").is_err());
        assert!(PipelineConfig::from_text("frames = 0").is_err());
        assert!(PipelineConfig::from_text("flow_source = magic").is_err());
        let err = PipelineConfig::from_text("seed = 1\nlr").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn hash_changes_with_values() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
