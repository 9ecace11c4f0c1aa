//! Frame-by-frame depth alignment over a video.
//!
//! Frame 1 is aligned from all views. Each later frame warm-starts from the previous
//! field, refits only the views overlapping its motion region, and anchors the rest of
//! the panorama: pixels that never move are held to frame 1, pixels that moved at some
//! other time are held to the previous frame.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    align_first_frame, anchor_term, check_rig_depths, eval_field, optimize, AlignConfig, Anchor, AnchorKind,
    StepLosses, ViewAffine, ViewSlot,
};
use crate::error::{Error, Result};
use crate::field::{GeometricField, Real};
use crate::frame::{EquirectFrame, PanoDepth, PerspectiveDepth};
use crate::grid::{Grid, Mask};
use crate::motion::{select_views, FlowField, MotionMasks, ViewSelection};
use crate::sphere::{camera_ray_grid, make_direction_grid, nearest_pixel, DirectionGrid, PerspectiveCamera};

/// Supplies perspective depth on demand, so only selected views need to be loaded.
pub trait ViewDepthSource {
    fn view_depth(&mut self, view: usize, frame: usize) -> Result<PerspectiveDepth>;
}

/// In-memory depths indexed `[frame - 1][view]`.
impl ViewDepthSource for Vec<Vec<PerspectiveDepth>> {
    fn view_depth(&mut self, view: usize, frame: usize) -> Result<PerspectiveDepth> {
        self.get(frame.wrapping_sub(1))
            .and_then(|f| f.get(view))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no depth for view {view} of frame {frame}")))
    }
}

impl<F: FnMut(usize, usize) -> Result<PerspectiveDepth>> ViewDepthSource for F {
    fn view_depth(&mut self, view: usize, frame: usize) -> Result<PerspectiveDepth> {
        self(view, frame)
    }
}

/// `(L_first, L_pre)` over their full supports: never-moving pixels against `first`,
/// pixels in the motion union but outside the current region against `prev`.
pub fn temporal_losses<T: Real>(
    field: &GeometricField<T>,
    first: &PanoDepth,
    prev: &PanoDepth,
    overall: &Mask,
    region: &Mask,
    dirs: &DirectionGrid,
) -> Result<(f64, f64)> {
    let (first_support, pre_support) = anchor_supports(overall, region)?;
    if !first.values.same_shape(overall) || !prev.values.same_shape(overall) || dirs.len() != overall.len() {
        return Err(Error::invalid("temporal losses need inputs at panorama resolution"));
    }
    let pred = field.eval(dirs.as_slice());
    let gather = |px: &[usize]| px.iter().map(|&p| pred[p]).collect::<Vec<T>>();
    let one = T::one();
    let lf = anchor_term(&first.values, &first_support, &gather(&first_support), one, None);
    let lp = anchor_term(&prev.values, &pre_support, &gather(&pre_support), one, None);
    Ok((lf.to_f64().unwrap_or(f64::NAN), lp.to_f64().unwrap_or(f64::NAN)))
}

/// Pixel supports of the first-frame and previous-frame anchors.
pub fn anchor_supports(overall: &Mask, region: &Mask) -> Result<(Vec<usize>, Vec<usize>)> {
    if !overall.same_shape(region) {
        return Err(Error::invalid("motion masks differ in size"));
    }
    let first = overall.not().indices();
    let pre = overall.and(&region.not()).indices();
    Ok((first, pre))
}

/// Result of aligning one frame after the first.
#[derive(Debug, Clone)]
pub struct FrameAlignment {
    pub field: GeometricField<f32>,
    pub depth: PanoDepth,
    pub affines: Vec<(usize, ViewAffine<f32>)>,
    /// Mean losses over the final 100 steps; all zero on the skip path.
    pub final_losses: StepLosses,
    /// Motion-region pixels outside every selected frustum.
    pub unsupervised: usize,
    pub skipped: bool,
}

/// Inputs of [`align_frame`] shared across a video.
pub struct FrameContext<'a> {
    pub rig: &'a [PerspectiveCamera],
    pub first: &'a PanoDepth,
    pub overall: &'a Mask,
    pub pano_dirs: &'a DirectionGrid,
}

/// Align frame `l > 1`. `depths` must hold exactly the views of `selection`, in order.
#[allow(clippy::too_many_arguments)]
pub fn align_frame(
    l: usize,
    region: &Mask,
    selection: &ViewSelection,
    depths: &[PerspectiveDepth],
    prev_field: &GeometricField<f32>,
    prev: &PanoDepth,
    ctx: &FrameContext<'_>,
    cfg: &AlignConfig,
) -> Result<FrameAlignment> {
    cfg.validate()?;
    if l < 2 {
        return Err(Error::invalid("frame 1 is aligned with align_first_frame"));
    }
    if selection.views.is_empty() {
        return Ok(FrameAlignment {
            field: prev_field.clone(),
            depth: PanoDepth {
                frame: l,
                values: prev.values.clone(),
            },
            affines: Vec::new(),
            final_losses: StepLosses::default(),
            unsupervised: 0,
            skipped: true,
        });
    }
    if depths.len() != selection.views.len() || depths.iter().zip(&selection.views).any(|(d, &v)| d.view != v) {
        return Err(Error::invalid("depths must match the selected views"));
    }
    check_rig_depths(&depths.iter().collect::<Vec<_>>(), ctx.rig)?;
    let (first_support, pre_support) = anchor_supports(ctx.overall, region)?;

    let selected: Vec<&PerspectiveCamera> = selection.views.iter().map(|&v| &ctx.rig[v]).collect();
    let unsupervised = region
        .indices()
        .into_iter()
        .filter(|&p| !selected.iter().any(|c| c.contains_direction(&ctx.pano_dirs.as_slice()[p])))
        .count();
    if unsupervised > 0 {
        log::info!("frame {l}: {unsupervised} motion pixels outside every selected view");
    }

    let mut field = prev_field.clone();
    let mut views: Vec<ViewSlot> = depths
        .iter()
        .zip(&selected)
        .map(|(d, cam)| ViewSlot::new(&d.values, camera_ray_grid(cam), cfg.affine_lr, cfg.shift_lr))
        .collect();
    for v in &mut views {
        let (h, w) = (ctx.overall.height(), ctx.overall.width());
        v.fit_to_field(&field, |dir| {
            let (r, c) = nearest_pixel(dir, h, w);
            !ctx.overall.get(r, c)
        });
    }
    let anchors = [
        Anchor {
            target: &ctx.first.values,
            support: first_support,
            weight: cfg.lambda_first,
            kind: AnchorKind::First,
        },
        Anchor {
            target: &prev.values,
            support: pre_support,
            weight: cfg.lambda_pre,
            kind: AnchorKind::Previous,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000 ^ ((l as u64) << 20));
    let report = optimize(&mut field, &mut views, &anchors, ctx.pano_dirs, cfg, &mut rng)?;
    let depth = PanoDepth {
        frame: l,
        values: eval_field(&field, ctx.pano_dirs),
    };
    Ok(FrameAlignment {
        final_losses: report.tail_mean(100),
        affines: selection.views.iter().copied().zip(views.into_iter().map(|v| v.affine)).collect(),
        field,
        depth,
        unsupervised,
        skipped: false,
    })
}

/// Per-frame record of a video alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub selected: Vec<usize>,
    pub losses: StepLosses,
    pub unsupervised: usize,
}

#[derive(Debug, Clone)]
pub struct VideoDepthResult {
    pub depths: Vec<PanoDepth>,
    pub records: Vec<FrameRecord>,
    pub masks: MotionMasks,
    /// Field of the last frame.
    pub field: GeometricField<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoConfig {
    pub first: AlignConfig,
    pub next: AlignConfig,
    pub flow_threshold: f32,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            first: AlignConfig::first_frame(),
            next: AlignConfig::subsequent_frames(),
            flow_threshold: crate::motion::DEFAULT_FLOW_THRESHOLD,
        }
    }
}

/// Align every frame of a video in order.
pub fn align_video(
    frames: &[EquirectFrame],
    source: &mut dyn ViewDepthSource,
    flow: &FlowField,
    rig: &[PerspectiveCamera],
    cfg: &VideoConfig,
) -> Result<VideoDepthResult> {
    let Some(head) = frames.first() else {
        return Err(Error::invalid("empty video"));
    };
    check_flow(frames, flow)?;
    let first_views = (0..rig.len())
        .map(|v| source.view_depth(v, 1))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_frame(1))?;
    let first = align_first_frame(head, &first_views, rig, &cfg.first).map_err(|e| e.in_frame(1))?;
    drop(first_views);
    let record = FrameRecord {
        frame: 1,
        selected: (0..rig.len()).collect(),
        losses: first.final_losses,
        unsupervised: 0,
    };
    let mut out = align_video_from(frames, source, flow, rig, cfg, first.field, first.depth)?;
    out.records.insert(0, record);
    Ok(out)
}

/// Align frames `2..=L` given the field and depth of frame 1. The returned records
/// cover only those frames; `depths` still starts with frame 1.
pub fn align_video_from(
    frames: &[EquirectFrame],
    source: &mut dyn ViewDepthSource,
    flow: &FlowField,
    rig: &[PerspectiveCamera],
    cfg: &VideoConfig,
    first_field: GeometricField<f32>,
    first_depth: PanoDepth,
) -> Result<VideoDepthResult> {
    let Some(head) = frames.first() else {
        return Err(Error::invalid("empty video"));
    };
    check_flow(frames, flow)?;
    if first_depth.values.width() != head.width() || first_depth.values.height() != head.height() {
        return Err(Error::invalid("first-frame depth does not match the video size"));
    }
    let masks = MotionMasks::from_flow(flow, cfg.flow_threshold);
    let pano_dirs = make_direction_grid(head.height(), head.width())?;
    let mut records = Vec::with_capacity(frames.len().saturating_sub(1));
    let mut depths = vec![first_depth.clone()];
    let mut field = first_field;
    let ctx = FrameContext {
        rig,
        first: &first_depth,
        overall: &masks.overall,
        pano_dirs: &pano_dirs,
    };
    for l in 2..=frames.len() {
        let region = masks.region(l);
        let selection = select_views(l, region, rig);
        let view_depths = selection
            .views
            .iter()
            .map(|&v| source.view_depth(v, l))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_frame(l))?;
        let prev = depths.last().expect("frame 1 present");
        let out = align_frame(l, region, &selection, &view_depths, &field, prev, &ctx, &cfg.next)
            .map_err(|e| e.in_frame(l))?;
        records.push(FrameRecord {
            frame: l,
            selected: selection.views,
            losses: out.final_losses,
            unsupervised: out.unsupervised,
        });
        depths.push(out.depth);
        field = out.field;
    }
    Ok(VideoDepthResult {
        depths,
        records,
        masks,
        field,
    })
}

fn check_flow(frames: &[EquirectFrame], flow: &FlowField) -> Result<()> {
    let head = &frames[0];
    if flow.frames() != frames.len() || flow.width() != head.width() || flow.height() != head.height() {
        return Err(Error::invalid(format!(
            "flow covers {} frames of {}x{}, video has {} of {}x{}",
            flow.frames(),
            flow.width(),
            flow.height(),
            frames.len(),
            head.width(),
            head.height()
        )));
    }
    Ok(())
}

/// Line-oriented run log: `frame selected depth scale shift first pre total unsupervised`.
pub fn run_log(records: &[FrameRecord]) -> String {
    let mut out = String::from("# frame selected depth scale shift first pre total unsupervised\n");
    for r in records {
        let l = &r.losses;
        writeln!(
            out,
            "{} {} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {}",
            r.frame,
            r.selected.len(),
            l.depth,
            l.scale,
            l.shift,
            l.first,
            l.pre,
            l.total,
            r.unsupervised
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn write_run_log(path: &Path, records: &[FrameRecord]) -> Result<()> {
    std::fs::write(path, run_log(records))?;
    Ok(())
}

/// Per-pixel population standard deviation across frames.
pub fn temporal_std(depths: &[PanoDepth]) -> Result<Grid<f32>> {
    let Some(head) = depths.first() else {
        return Err(Error::invalid("no depth frames"));
    };
    if depths.iter().any(|d| !d.values.same_shape(&head.values)) {
        return Err(Error::invalid("depth frames differ in size"));
    }
    let n = depths.len() as f64;
    Ok(Grid::from_fn(head.values.width(), head.values.height(), |r, c| {
        let mean = depths.iter().map(|d| d.values.get(r, c) as f64).sum::<f64>() / n;
        let var = depths.iter().map(|d| (d.values.get(r, c) as f64 - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldArch, Tape};
    use crate::sphere::icosahedron_rig;

    fn tiny() -> FieldArch {
        FieldArch {
            octaves: 2,
            hidden: 8,
            layers: 2,
        }
    }

    #[test]
    fn temporal_loss_examples() {
        let (h, w) = (4, 8);
        let dirs = make_direction_grid(h, w).unwrap();
        let field = GeometricField::<f64>::new(tiny(), 1, 3.0);
        let pred = field.eval(dirs.as_slice());
        let as_depth = |v: Vec<f64>| PanoDepth {
            frame: 1,
            values: Grid::from_vec(w, h, v.into_iter().map(|x| x as f32).collect()).unwrap(),
        };
        let d_field = as_depth(pred.clone());
        let none = Grid::new(w, h, false);
        let all = Grid::new(w, h, true);
        let (lf, lp) = temporal_losses(&field, &d_field, &d_field, &none, &none, &dirs).unwrap();
        assert!(lf < 1e-10 && lp == 0.0);
        let (_, lp) = temporal_losses(&field, &d_field, &d_field, &all, &none, &dirs).unwrap();
        assert!(lp < 1e-10);
        // target one unit below the field everywhere
        let lower = as_depth(pred.iter().map(|p| p - 1.0).collect());
        let (lf, _) = temporal_losses(&field, &lower, &lower, &none, &none, &dirs).unwrap();
        assert!((lf - 1.0).abs() < 1e-5, "{lf}");
    }

    #[test]
    fn supports_partition_with_region() {
        let overall = Grid::from_fn(6, 3, |r, c| (r + c) % 3 != 0);
        let region = Grid::from_fn(6, 3, |r, c| (r + c) % 3 == 1);
        let (first, pre) = anchor_supports(&overall, &region).unwrap();
        let fitted = region.indices();
        let mut all: Vec<usize> = first.iter().chain(&pre).chain(&fitted).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn anchor_gradients_match_finite_differences() {
        let (h, w) = (8, 16);
        let dirs = make_direction_grid(h, w).unwrap();
        let field = GeometricField::<f64>::new(tiny(), 4, 2.0);
        let first = PanoDepth {
            frame: 1,
            values: Grid::from_fn(w, h, |r, c| 1.5 + 0.1 * r as f32 - 0.03 * c as f32),
        };
        let prev = PanoDepth {
            frame: 2,
            values: Grid::from_fn(w, h, |r, c| 2.5 - 0.05 * r as f32 + 0.02 * c as f32),
        };
        let overall = Grid::from_fn(w, h, |_, c| c >= 6);
        let region = Grid::from_fn(w, h, |_, c| c >= 11);
        let (fs, ps) = anchor_supports(&overall, &region).unwrap();
        let loss = |f: &GeometricField<f64>| {
            let (a, b) = temporal_losses(f, &first, &prev, &overall, &region, &dirs).unwrap();
            a + b
        };
        let mut tape = Tape::new();
        let pred = field.forward(dirs.as_slice(), &mut tape).to_vec();
        let mut d_pred = vec![0.0; pred.len()];
        let pf: Vec<f64> = fs.iter().map(|&p| pred[p]).collect();
        let pp: Vec<f64> = ps.iter().map(|&p| pred[p]).collect();
        let mut df = vec![0.0; fs.len()];
        let mut dp = vec![0.0; ps.len()];
        anchor_term(&first.values, &fs, &pf, 1.0, Some(&mut df));
        anchor_term(&prev.values, &ps, &pp, 1.0, Some(&mut dp));
        for (i, &p) in fs.iter().enumerate() {
            d_pred[p] += df[i];
        }
        for (i, &p) in ps.iter().enumerate() {
            d_pred[p] += dp[i];
        }
        let mut g = vec![0.0; field.params().len()];
        field.backward(&mut tape, &d_pred, &mut g);
        let eps = 1e-6;
        for i in 0..g.len() {
            let mut a = field.clone();
            a.params_mut()[i] += eps;
            let mut b = field.clone();
            b.params_mut()[i] -= eps;
            let num = (loss(&a) - loss(&b)) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: {} vs {num}", g[i]);
        }
    }

    fn static_setup(frames: usize) -> (Vec<EquirectFrame>, Vec<Vec<PerspectiveDepth>>, Vec<PerspectiveCamera>) {
        let rig = icosahedron_rig(90.0, 8, 8).unwrap();
        let video = (1..=frames)
            .map(|l| EquirectFrame::new(l, Grid::new(16, 8, [0.5; 3])).unwrap())
            .collect();
        let depths = (1..=frames)
            .map(|l| {
                (0..rig.len())
                    .map(|v| PerspectiveDepth::new(v, l, Grid::new(8, 8, 2.0)).unwrap())
                    .collect()
            })
            .collect();
        (video, depths, rig)
    }

    fn quick() -> VideoConfig {
        let base = AlignConfig {
            iterations: 20,
            shift_warmup: 0,
            rays_per_step: 32,
            arch: tiny(),
            ..AlignConfig::first_frame()
        };
        VideoConfig {
            first: base,
            next: base,
            flow_threshold: 1.0,
        }
    }

    #[test]
    fn static_video_takes_skip_path() {
        let (video, mut depths, rig) = static_setup(4);
        let out = align_video(&video, &mut depths, &FlowField::zeros(16, 8, 4), &rig, &quick()).unwrap();
        assert_eq!(out.depths.len(), 4);
        for d in &out.depths[1..] {
            assert_eq!(d.values, out.depths[0].values);
        }
        assert!(out.records[1..].iter().all(|r| r.selected.is_empty()));
        assert!(temporal_std(&out.depths).unwrap().as_slice().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_frame_video() {
        let (video, mut depths, rig) = static_setup(1);
        let out = align_video(&video, &mut depths, &FlowField::zeros(16, 8, 1), &rig, &quick()).unwrap();
        assert_eq!(out.depths.len(), 1);
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn missing_depth_reports_frame() {
        let (video, mut depths, rig) = static_setup(2);
        depths[1].clear();
        let flow = FlowField::new(16, 8, vec![Grid::new(16, 8, [2.0, 0.0])]).unwrap();
        match align_video(&video, &mut depths, &flow, &rig, &quick()) {
            Err(Error::Frame { frame, .. }) => assert_eq!(frame, 2),
            other => panic!("expected frame error, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_equals_previous_depth() {
        let (video, mut depths, rig) = static_setup(2);
        let flow = FlowField::new(16, 8, vec![Grid::from_fn(16, 8, |r, c| if r == 4 && c == 8 { [2.0, 0.0] } else { [0.0, 0.0] })])
            .unwrap();
        let mut cfg = quick();
        cfg.next.lr = 0.0;
        cfg.next.iterations = 1;
        let out = align_video(&video, &mut depths, &flow, &rig, &cfg).unwrap();
        assert!(!out.records[1].selected.is_empty());
        assert_eq!(out.depths[1].values, out.depths[0].values);
    }

    #[test]
    fn run_log_has_one_line_per_frame() {
        let (video, mut depths, rig) = static_setup(3);
        let out = align_video(&video, &mut depths, &FlowField::zeros(16, 8, 3), &rig, &quick()).unwrap();
        let log = run_log(&out.records);
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().nth(2).unwrap().starts_with("2 0 "));
    }
}
