//! Time-stamped point clouds from aligned panoramic depth.
//!
//! Frame 1 contributes every pixel. Later frames contribute only pixels whose
//! appearance varies over the video or that lie in the frame's motion region, which
//! keeps the cloud close to one panorama's worth of points for mostly static scenes.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::{EquirectFrame, PanoDepth};
use crate::grid::{gray255, Grid, Mask, Rgb};
use crate::io::quantize_u8;
use crate::sphere::{nearest_pixel, pixel_direction, PerspectiveCamera, PerspectiveImage, Vec3};

/// Default grayscale standard-deviation threshold on the 0..255 scale.
pub const DEFAULT_STD_THRESHOLD: f64 = 20.0;

/// Which side of the threshold counts as texture variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VariationRule {
    /// `std >= tau`.
    #[default]
    AtLeast,
    /// `std < tau`.
    Below,
}

/// Per-pixel population std of BT.601 gray over all frames, thresholded.
pub fn texture_variation_mask(frames: &[EquirectFrame], tau: f64, rule: VariationRule) -> Result<Mask> {
    let Some(head) = frames.first() else {
        return Err(Error::invalid("texture variation needs at least one frame"));
    };
    if frames.iter().any(|f| !f.pixels().same_shape(head.pixels())) {
        return Err(Error::invalid("frames differ in size"));
    }
    let n = frames.len() as f64;
    let (w, h) = (head.width(), head.height());
    Ok(Grid::from_fn(w, h, |r, c| {
        let g: Vec<f64> = frames.iter().map(|f| gray255(f.pixels().get(r, c)) as f64).collect();
        let mean = g.iter().sum::<f64>() / n;
        let std = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        match rule {
            VariationRule::AtLeast => std >= tau,
            VariationRule::Below => std < tau,
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point4D {
    pub position: [f32; 3],
    pub color: Rgb,
    /// Normalized time in [0, 1].
    pub t: f32,
}

impl Point4D {
    pub fn depth(&self) -> f32 {
        let [x, y, z] = self.position;
        (x * x + y * y + z * z).sqrt()
    }
}

/// Points lifted from a `width` x `height` panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud4D {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point4D>,
}

impl PointCloud4D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Panorama pixel `(row, col)` whose center ray carries `p`.
    pub fn source_pixel(&self, p: &Point4D) -> (usize, usize) {
        let d = Vec3::new(p.position[0] as f64, p.position[1] as f64, p.position[2] as f64);
        nearest_pixel(&d, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiftReport {
    /// Points contributed by each frame.
    pub per_frame: Vec<usize>,
    /// Selected pixels skipped for nonpositive or non-finite depth.
    pub dropped: usize,
}

/// Normalized time of frame `l` (1-based) in a video of `frames` frames.
pub fn frame_time(l: usize, frames: usize) -> f32 {
    if frames <= 1 {
        0.0
    } else {
        (l - 1) as f32 / (frames - 1) as f32
    }
}

/// Lift frames with their depths. `regions[l - 1]` is the motion region of frame `l`.
pub fn lift(
    frames: &[EquirectFrame],
    depths: &[PanoDepth],
    variation: &Mask,
    regions: &[Mask],
) -> Result<(PointCloud4D, LiftReport)> {
    let Some(head) = frames.first() else {
        return Err(Error::invalid("nothing to lift"));
    };
    let (w, h) = (head.width(), head.height());
    let l_total = frames.len();
    if depths.len() != l_total || regions.len() != l_total {
        return Err(Error::invalid(format!(
            "{} frames, {} depths, {} motion regions",
            l_total,
            depths.len(),
            regions.len()
        )));
    }
    let shape_ok = frames.iter().all(|f| f.width() == w && f.height() == h)
        && depths.iter().all(|d| d.values.width() == w && d.values.height() == h)
        && regions.iter().all(|m| m.width() == w && m.height() == h)
        && variation.width() == w
        && variation.height() == h;
    if !shape_ok {
        return Err(Error::invalid("frames, depths and masks must share the panorama size"));
    }
    let dirs: Vec<Vec3> = (0..h * w).map(|i| pixel_direction(i / w, i % w, h, w)).collect();
    let mut points = Vec::new();
    let mut per_frame = Vec::with_capacity(l_total);
    let mut dropped = 0;
    for (k, (frame, depth)) in frames.iter().zip(depths).enumerate() {
        let t = frame_time(k + 1, l_total);
        let before = points.len();
        for i in 0..h * w {
            if k > 0 && !(variation.as_slice()[i] || regions[k].as_slice()[i]) {
                continue;
            }
            let d = depth.values.as_slice()[i];
            if !(d.is_finite() && d > 0.0) {
                dropped += 1;
                continue;
            }
            let p = dirs[i] * d as f64;
            points.push(Point4D {
                position: [p.x as f32, p.y as f32, p.z as f32],
                color: frame.pixels().as_slice()[i],
                t,
            });
        }
        per_frame.push(points.len() - before);
    }
    Ok((
        PointCloud4D {
            width: w,
            height: h,
            points,
        },
        LiftReport { per_frame, dropped },
    ))
}

/// Sidecar text describing a lift run.
pub fn lift_manifest(frames: usize, height: usize, width: usize, tau: f64, rule: VariationRule, report: &LiftReport) -> String {
    let mut out = String::new();
    let rule = match rule {
        VariationRule::AtLeast => "at-least",
        VariationRule::Below => "below",
    };
    writeln!(out, "frames {frames}\nheight {height}\nwidth {width}\ntau_std {tau}\nrule {rule}\ndropped {}", report.dropped)
        .expect("writing to a String cannot fail");
    for (i, n) in report.per_frame.iter().enumerate() {
        writeln!(out, "frame {} {n}", i + 1).expect("writing to a String cannot fail");
    }
    out
}

const PLY_PROPERTIES: [&str; 7] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
    "property float t",
];

/// Bytes per vertex: three floats, three bytes, one float.
pub const PLY_VERTEX_BYTES: usize = 19;

pub fn ply_header(cloud: &PointCloud4D) -> String {
    let mut s = String::from("ply\nformat binary_little_endian 1.0\n");
    writeln!(s, "comment panorama {} {}", cloud.width, cloud.height).expect("string write");
    writeln!(s, "element vertex {}", cloud.len()).expect("string write");
    for p in PLY_PROPERTIES {
        s.push_str(p);
        s.push('\n');
    }
    s.push_str("end_header\n");
    s
}

pub fn encode_ply(cloud: &PointCloud4D) -> Vec<u8> {
    let mut buf = ply_header(cloud).into_bytes();
    buf.reserve(cloud.len() * PLY_VERTEX_BYTES);
    for p in &cloud.points {
        for v in p.position {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(p.color.map(quantize_u8));
        buf.extend_from_slice(&p.t.to_le_bytes());
    }
    buf
}

pub fn export_ply(cloud: &PointCloud4D, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_ply(cloud))?;
    f.flush()?;
    Ok(())
}

pub fn import_ply(path: &Path) -> Result<PointCloud4D> {
    decode_ply(&std::fs::read(path)?)
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud4D> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start as u64, "unterminated PLY header line"))?;
        *pos = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| Error::format(start as u64, "PLY header is not text"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::format(at as u64, "missing ply magic"));
    }
    let (at, format) = next_line(&mut pos)?;
    if format != "format binary_little_endian 1.0" {
        return Err(Error::format(at as u64, format!("unsupported PLY format {format:?}")));
    }
    let mut size = None;
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (at, line) = next_line(&mut pos)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["comment", "panorama", w, h] => {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::format(at as u64, format!("bad panorama size {line:?}")))
                };
                size = Some((parse(w)?, parse(h)?));
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::format(at as u64, "duplicate vertex element"));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::format(at as u64, format!("bad vertex count {n:?}")))?,
                );
            }
            ["element", ..] => return Err(Error::format(at as u64, format!("unexpected element {line:?}"))),
            ["property", ..] => props.push((at, line.clone())),
            _ => return Err(Error::format(at as u64, format!("unexpected header line {line:?}"))),
        }
    }
    if props.len() != PLY_PROPERTIES.len() {
        return Err(Error::format(pos as u64, format!("expected {} properties, found {}", PLY_PROPERTIES.len(), props.len())));
    }
    for ((at, got), want) in props.iter().zip(PLY_PROPERTIES) {
        if got != want {
            return Err(Error::format(*at as u64, format!("expected {want:?}, found {got:?}")));
        }
    }
    let count = count.ok_or_else(|| Error::format(pos as u64, "missing vertex element"))?;
    let (width, height) = size.ok_or_else(|| Error::format(pos as u64, "missing panorama size comment"))?;
    let need = count * PLY_VERTEX_BYTES;
    if bytes.len() - pos < need {
        return Err(Error::format(bytes.len() as u64, format!("vertex data truncated, need {need} bytes")));
    }
    let f = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let points = (0..count)
        .map(|i| {
            let o = pos + i * PLY_VERTEX_BYTES;
            Point4D {
                position: [f(o), f(o + 4), f(o + 8)],
                color: [bytes[o + 12], bytes[o + 13], bytes[o + 14]].map(|b| b as f32 / 255.0),
                t: f(o + 15),
            }
        })
        .collect();
    Ok(PointCloud4D { width, height, points })
}

/// For each source pixel, the index of its latest point with `t <= t_query`.
pub fn active_points(cloud: &PointCloud4D, t_query: f32) -> Vec<usize> {
    let mut latest: Vec<Option<usize>> = vec![None; cloud.width * cloud.height];
    for (i, p) in cloud.points.iter().enumerate() {
        if p.t > t_query {
            continue;
        }
        let (r, c) = cloud.source_pixel(p);
        let slot = &mut latest[r * cloud.width + c];
        if slot.is_none_or(|j| cloud.points[j].t <= p.t) {
            *slot = Some(i);
        }
    }
    latest.into_iter().flatten().collect()
}

/// Z-buffered one-pixel splat of the points active at `t_query`. Pixels no point
/// lands on are invalid.
pub fn render_points(cloud: &PointCloud4D, cam: &PerspectiveCamera, t_query: f32) -> PerspectiveImage<Rgb> {
    let (w, h) = (cam.width, cam.height);
    let mut pixels = Grid::new(w, h, [0.0f32; 3]);
    let mut valid = Grid::new(w, h, false);
    let mut zbuf = Grid::new(w, h, f64::INFINITY);
    for i in active_points(cloud, t_query) {
        let p = &cloud.points[i];
        let world = Vec3::new(p.position[0] as f64, p.position[1] as f64, p.position[2] as f64);
        let local = cam.world_to_local(&world);
        let Some((u, v)) = cam.local_to_pixel(&local) else {
            continue;
        };
        let (c, r) = (u.round(), v.round());
        if c < 0.0 || r < 0.0 || c >= w as f64 || r >= h as f64 {
            continue;
        }
        let (r, c) = (r as usize, c as usize);
        if local.z < zbuf.get(r, c) {
            zbuf.set(r, c, local.z);
            pixels.set(r, c, p.color);
            valid.set(r, c, true);
        }
    }
    PerspectiveImage { pixels, valid }
}
