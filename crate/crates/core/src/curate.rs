//! Shot-cut detection and clip slicing for raw panoramic videos.
//!
//! Frames are subsampled at a fixed interval. A sampled frame is a keyframe when the
//! share of pixels whose gray level jumps by more than `trans_threshold` exceeds
//! `count_threshold`. Frames near keyframes are discarded and the remaining runs
//! become clips. Margins and lengths count sampled frames; reported indices use the
//! original 0-based frame numbering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuratorConfig {
    pub sample_interval: usize,
    /// Gray-level jump (0..255) marking a transition pixel.
    pub trans_threshold: f32,
    /// Fraction of transition pixels marking a keyframe.
    pub count_threshold: f64,
    pub discard_margin: usize,
    pub min_clip_len: usize,
}

impl Default for CuratorConfig {
    fn default() -> Self {
        CuratorConfig {
            sample_interval: 5,
            trans_threshold: 30.0,
            count_threshold: 0.3,
            discard_margin: 2,
            min_clip_len: 25,
        }
    }
}

impl CuratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_interval == 0 {
            return Err(Error::invalid("sample_interval must be at least 1"));
        }
        if !(self.count_threshold > 0.0 && self.count_threshold <= 1.0) {
            return Err(Error::invalid("count_threshold must lie in (0, 1]"));
        }
        if !self.trans_threshold.is_finite() {
            return Err(Error::invalid("trans_threshold must be finite"));
        }
        Ok(())
    }
}

/// Pixels whose gray level changes by strictly more than `threshold`.
pub fn transition_count(prev: &Grid<f32>, cur: &Grid<f32>, threshold: f32) -> Result<usize> {
    if !prev.same_shape(cur) {
        return Err(Error::invalid(format!(
            "frames differ in size: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height()
        )));
    }
    Ok(prev
        .as_slice()
        .iter()
        .zip(cur.as_slice())
        .filter(|(a, b)| (*b - *a).abs() > threshold)
        .count())
}

pub fn is_keyframe(prev: &Grid<f32>, cur: &Grid<f32>, cfg: &CuratorConfig) -> Result<bool> {
    let n = transition_count(prev, cur, cfg.trans_threshold)?;
    Ok(n as f64 / cur.len().max(1) as f64 > cfg.count_threshold)
}

/// Inclusive frame range in original numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clip {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipManifest {
    pub video_id: String,
    pub clips: Vec<Clip>,
    /// Keyframes in original numbering.
    pub keyframes: Vec<usize>,
}

impl ClipManifest {
    /// One line per clip: `video_id start end keyframes...`.
    pub fn to_text(&self) -> String {
        let keys: String = self.keyframes.iter().map(|k| format!(" {k}")).collect();
        let mut out = String::new();
        for c in &self.clips {
            writeln!(out, "{} {} {}{keys}", self.video_id, c.start, c.end).expect("writing to a String cannot fail");
        }
        out
    }
}

/// Keyframes among the sampled gray frames, as positions in the sampled sequence.
pub fn sampled_keyframes(sampled: &[&Grid<f32>], cfg: &CuratorConfig) -> Result<Vec<usize>> {
    let mut keys = Vec::new();
    for k in 1..sampled.len() {
        if is_keyframe(sampled[k - 1], sampled[k], cfg)? {
            keys.push(k);
        }
    }
    Ok(keys)
}

/// Slice a video given as gray frames on the 0..255 scale.
pub fn slice(video_id: &str, gray: &[Grid<f32>], cfg: &CuratorConfig) -> Result<ClipManifest> {
    cfg.validate()?;
    let sampled: Vec<&Grid<f32>> = gray.iter().step_by(cfg.sample_interval).collect();
    let keys = sampled_keyframes(&sampled, cfg)?;
    let original = |k: usize| k * cfg.sample_interval;
    let near_key = |k: usize| keys.iter().any(|&key| k.abs_diff(key) <= cfg.discard_margin);
    let mut clips = Vec::new();
    let mut run_start = None;
    for k in 0..=sampled.len() {
        let keep = k < sampled.len() && !near_key(k);
        match (keep, run_start) {
            (true, None) => run_start = Some(k),
            (false, Some(s)) => {
                if k - s >= cfg.min_clip_len.max(1) {
                    clips.push(Clip {
                        start: original(s),
                        end: original(k - 1),
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(ClipManifest {
        video_id: video_id.to_string(),
        clips,
        keyframes: keys.into_iter().map(original).collect(),
    })
}
