//! Multi-view depth alignment into one panoramic geometric field.
//!
//! Each perspective view `n` carries an affine correction: a scale `softplus(alpha_n)` and
//! a per-pixel shift grid `beta_n`. The field is fit so that
//! `softplus(alpha_n) * d_n + beta_n` matches the field along the view's rays, with a
//! penalty keeping the scales near 1 and the shifts spatially smooth.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{sigmoid, softplus, softplus_inv, Adam, FieldArch, GeometricField, Real, Tape};
use crate::frame::{EquirectFrame, PanoDepth, PerspectiveDepth};
use crate::grid::Grid;
use crate::sphere::{camera_ray_grid, make_direction_grid, DirectionGrid, PerspectiveCamera, Vec3};

/// Per-view scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAffine<T = f32> {
    /// Pre-softplus scale.
    pub alpha: T,
    pub beta: Grid<T>,
}

impl<T: Real> ViewAffine<T> {
    /// Unit scale, zero shift.
    pub fn init(height: usize, width: usize) -> Self {
        ViewAffine {
            alpha: T::of(softplus_inv(1.0)),
            beta: Grid::new(width, height, T::zero()),
        }
    }

    pub fn scale(&self) -> T {
        softplus(self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub lambda_depth: f64,
    pub lambda_scale: f64,
    pub lambda_shift: f64,
    pub lambda_first: f64,
    pub lambda_pre: f64,
    pub iterations: usize,
    /// Iterations at the start with the shift smoothness term disabled.
    pub shift_warmup: usize,
    pub rays_per_step: usize,
    /// Adam step size for the field weights.
    pub lr: f64,
    /// Adam step size for the per-view scale.
    pub affine_lr: f64,
    /// Adam step size for the per-pixel shift grids.
    pub shift_lr: f64,
    pub seed: u64,
    pub arch: FieldArch,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self::first_frame()
    }
}

impl AlignConfig {
    /// 3000 iterations, shift smoothness off for the first 1500.
    pub fn first_frame() -> Self {
        AlignConfig {
            lambda_depth: 1.0,
            lambda_scale: 0.1,
            lambda_shift: 1.0,
            lambda_first: 1.0,
            lambda_pre: 1.0,
            iterations: 3000,
            shift_warmup: 1500,
            rays_per_step: 4096,
            lr: 1e-3,
            affine_lr: 3e-2,
            shift_lr: 1e-3,
            seed: 0,
            arch: FieldArch::default(),
        }
    }

    /// 1000 warm-started iterations per later frame.
    pub fn subsequent_frames() -> Self {
        AlignConfig {
            iterations: 1000,
            shift_warmup: 0,
            ..Self::first_frame()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_depth,
            self.lambda_scale,
            self.lambda_shift,
            self.lambda_first,
            self.lambda_pre,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.rays_per_step == 0 {
            return Err(Error::invalid("rays_per_step must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.affine_lr >= 0.0 && self.shift_lr >= 0.0) {
            return Err(Error::invalid("learning rates must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpatialLosses {
    pub depth: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Loss terms of one optimization step (or averaged over several).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub depth: f64,
    pub scale: f64,
    pub shift: f64,
    pub first: f64,
    pub pre: f64,
    /// Weighted objective as optimized at that step.
    pub total: f64,
}

impl StepLosses {
    fn accumulate(&mut self, other: &StepLosses, w: f64) {
        self.depth += w * other.depth;
        self.scale += w * other.scale;
        self.shift += w * other.shift;
        self.first += w * other.first;
        self.pre += w * other.pre;
        self.total += w * other.total;
    }
}

/// Gradient of one view's affine parameters.
#[derive(Debug, Clone)]
pub struct AffineGrad<T> {
    pub alpha: T,
    pub beta: Vec<T>,
}

impl<T: Real> AffineGrad<T> {
    pub fn zeros(len: usize) -> Self {
        AffineGrad {
            alpha: T::zero(),
            beta: vec![T::zero(); len],
        }
    }
}

/// Mean over `pixels` of `(softplus(alpha) d + beta - pred)^2`. Adds `weight`-scaled
/// gradients into `d_pred` and `grad` when given.
pub fn depth_term<T: Real>(
    affine: &ViewAffine<T>,
    depth: &Grid<f32>,
    pixels: &[usize],
    pred: &[T],
    weight: T,
    mut d_pred: Option<&mut [T]>,
    mut grad: Option<&mut AffineGrad<T>>,
) -> T {
    if pixels.is_empty() {
        return T::zero();
    }
    let s = affine.scale();
    let ds = sigmoid(affine.alpha);
    let inv_n = T::one() / T::of(pixels.len() as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    for (i, &p) in pixels.iter().enumerate() {
        let d = T::of(depth.as_slice()[p] as f64);
        let r = s * d + affine.beta.as_slice()[p] - pred[i];
        sum = sum + r * r;
        let g = weight * two * r * inv_n;
        if let Some(dp) = d_pred.as_deref_mut() {
            dp[i] = dp[i] - g;
        }
        if let Some(ag) = grad.as_deref_mut() {
            ag.beta[p] = ag.beta[p] + g;
            ag.alpha = ag.alpha + g * d * ds;
        }
    }
    sum * inv_n
}

/// `(softplus(alpha) - 1)^2`.
pub fn scale_term<T: Real>(affine: &ViewAffine<T>, weight: T, grad: Option<&mut AffineGrad<T>>) -> T {
    let e = affine.scale() - T::one();
    if let Some(g) = grad {
        g.alpha = g.alpha + weight * T::of(2.0) * e * sigmoid(affine.alpha);
    }
    e * e
}

/// Mean of squared horizontal and vertical forward differences of the shift grid.
pub fn shift_term<T: Real>(affine: &ViewAffine<T>, weight: T, mut grad: Option<&mut AffineGrad<T>>) -> T {
    let b = &affine.beta;
    let (w, h) = (b.width(), b.height());
    let count = h * w.saturating_sub(1) + w * h.saturating_sub(1);
    if count == 0 {
        return T::zero();
    }
    let inv_n = T::one() / T::of(count as f64);
    let two = T::of(2.0);
    let v = b.as_slice();
    let mut sum = T::zero();
    let mut visit = |a: usize, c: usize, sum: &mut T| {
        let diff = v[c] - v[a];
        *sum = *sum + diff * diff;
        if let Some(g) = grad.as_deref_mut() {
            let gd = weight * two * diff * inv_n;
            g.beta[c] = g.beta[c] + gd;
            g.beta[a] = g.beta[a] - gd;
        }
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                visit(i, i + 1, &mut sum);
            }
            if r + 1 < h {
                visit(i, i + w, &mut sum);
            }
        }
    }
    sum * inv_n
}

/// Mean over `pixels` of `(target - pred)^2`; zero on empty support.
pub fn anchor_term<T: Real>(
    target: &Grid<f32>,
    pixels: &[usize],
    pred: &[T],
    weight: T,
    d_pred: Option<&mut [T]>,
) -> T {
    if pixels.is_empty() {
        return T::zero();
    }
    let inv_n = T::one() / T::of(pixels.len() as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    let mut d_pred = d_pred;
    for (i, &p) in pixels.iter().enumerate() {
        let r = T::of(target.as_slice()[p] as f64) - pred[i];
        sum = sum + r * r;
        if let Some(dp) = d_pred.as_deref_mut() {
            dp[i] = dp[i] - weight * two * r * inv_n;
        }
    }
    sum * inv_n
}

/// The three spatial terms for one view over the sampled `pixels`, whose rays are
/// `rays[pixels]`. The shift term always covers the whole grid.
pub fn spatial_losses<T: Real>(
    field: &GeometricField<T>,
    affine: &ViewAffine<T>,
    depth: &PerspectiveDepth,
    rays: &DirectionGrid,
    pixels: &[usize],
) -> Result<SpatialLosses> {
    check_view(affine, &depth.values, rays)?;
    if depth.values.as_slice().iter().any(|d| !d.is_finite())
        || !affine.alpha.is_finite()
        || affine.beta.as_slice().iter().any(|b| !b.is_finite())
    {
        return Err(Error::Numeric("non-finite depth or affine parameter".into()));
    }
    let dirs: Vec<Vec3> = pixels.iter().map(|&p| rays.as_slice()[p]).collect();
    let pred = field.eval(&dirs);
    let one = T::one();
    let losses = SpatialLosses {
        depth: depth_term(affine, &depth.values, pixels, &pred, one, None, None).to_f64().unwrap_or(f64::NAN),
        scale: scale_term(affine, one, None).to_f64().unwrap_or(f64::NAN),
        shift: shift_term(affine, one, None).to_f64().unwrap_or(f64::NAN),
    };
    if [losses.depth, losses.scale, losses.shift].iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("spatial loss is not finite".into()));
    }
    Ok(losses)
}

fn check_view<T: Copy>(affine: &ViewAffine<T>, depth: &Grid<f32>, rays: &DirectionGrid) -> Result<()> {
    if depth.width() != rays.width()
        || depth.height() != rays.height()
        || affine.beta.width() != rays.width()
        || affine.beta.height() != rays.height()
    {
        return Err(Error::invalid("view depth, shift grid and rays must share one size"));
    }
    Ok(())
}

/// Evaluate the field on every direction of `dirs`.
pub fn eval_field(field: &GeometricField<f32>, dirs: &DirectionGrid) -> Grid<f32> {
    Grid::from_vec(dirs.width(), dirs.height(), field.eval(dirs.as_slice())).expect("size matches")
}

/// `count` distinct indices below `total`, or all of them when `count >= total`.
pub(crate) fn sample_indices(rng: &mut ChaCha8Rng, total: usize, count: usize) -> Vec<usize> {
    if count >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, count).into_vec()
    }
}

/// Split one `rays_per_step` budget across anchors in proportion to their supports;
/// every nonempty support gets at least one ray.
pub(crate) fn anchor_budgets(anchors: &[Anchor<'_>], rays_per_step: usize) -> Vec<usize> {
    let total: usize = anchors.iter().map(|a| a.support.len()).sum();
    anchors
        .iter()
        .map(|a| match a.support.len() {
            0 => 0,
            n => ((rays_per_step as u128 * n as u128 / total as u128) as usize).clamp(1, n),
        })
        .collect()
}

/// One perspective view taking part in an optimization.
pub(crate) struct ViewSlot<'a> {
    pub depth: &'a Grid<f32>,
    pub rays: DirectionGrid,
    pub affine: ViewAffine<f32>,
    adam_alpha: Adam<f32>,
    adam_beta: Adam<f32>,
}

impl<'a> ViewSlot<'a> {
    pub fn new(depth: &'a Grid<f32>, rays: DirectionGrid, scale_lr: f64, shift_lr: f64) -> Self {
        let n = depth.len();
        ViewSlot {
            depth,
            affine: ViewAffine::init(depth.height(), depth.width()),
            rays,
            adam_alpha: Adam::new(1, scale_lr),
            adam_beta: Adam::new(n, shift_lr),
        }
    }

    /// Start this view from the previous solution instead of unit scale and zero shift:
    /// least-squares scale and offset taking its depths onto `field` over the rays
    /// accepted by `keep`, then the shift set to the remaining residual on those rays
    /// and to the offset elsewhere. Keeps the unit init when the fit is degenerate.
    pub fn fit_to_field(&mut self, field: &GeometricField<f32>, keep: impl Fn(&Vec3) -> bool) {
        let kept: Vec<usize> = (0..self.depth.len()).filter(|&p| keep(&self.rays.as_slice()[p])).collect();
        if kept.len() < 2 {
            return;
        }
        let rays: Vec<Vec3> = kept.iter().map(|&p| self.rays.as_slice()[p]).collect();
        let pred = field.eval(&rays);
        let depth = self.depth.as_slice();
        let n = pred.len() as f64;
        let (mut sd, mut sp, mut sdd, mut sdp) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &y) in kept.iter().zip(&pred) {
            let (d, y) = (depth[p] as f64, y as f64);
            sd += d;
            sp += y;
            sdd += d * d;
            sdp += d * y;
        }
        let var = sdd - sd * sd / n;
        if !(var > 1e-12 * n) {
            return;
        }
        let s = (sdp - sd * sp / n) / var;
        if !(s.is_finite() && s > 1e-3) {
            return;
        }
        let b = (sp - s * sd) / n;
        self.affine.alpha = softplus_inv(s) as f32;
        let beta = self.affine.beta.as_mut_slice();
        beta.iter_mut().for_each(|v| *v = b as f32);
        for (&p, &y) in kept.iter().zip(&pred) {
            beta[p] = (y as f64 - s * depth[p] as f64) as f32;
        }
    }
}

/// Panorama-resolution supervision `(target - field)^2` over a fixed pixel support.
pub(crate) struct Anchor<'a> {
    pub target: &'a Grid<f32>,
    pub support: Vec<usize>,
    pub weight: f64,
    pub kind: AnchorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AnchorKind {
    First,
    Previous,
}

pub(crate) struct OptimizeReport {
    pub history: Vec<StepLosses>,
}

impl OptimizeReport {
    /// Mean losses over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> StepLosses {
        let n = window.min(self.history.len()).max(1);
        let mut acc = StepLosses::default();
        for s in &self.history[self.history.len().saturating_sub(n)..] {
            acc.accumulate(s, 1.0 / n as f64);
        }
        acc
    }
}

/// Stochastic Adam loop shared by first-frame and per-frame alignment. Each step draws
/// one view uniformly and `rays_per_step` of its pixels, plus up to `rays_per_step`
/// pixels from each anchor's support.
pub(crate) fn optimize(
    field: &mut GeometricField<f32>,
    views: &mut [ViewSlot<'_>],
    anchors: &[Anchor<'_>],
    pano_dirs: &DirectionGrid,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OptimizeReport> {
    let mut adam = Adam::new(field.params().len(), cfg.lr);
    let mut grad = vec![0.0f32; field.params().len()];
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last_finite = None;
    let mut dirs = Vec::new();
    let mut d_pred = Vec::new();
    let budgets = anchor_budgets(anchors, cfg.rays_per_step);
    for it in 0..cfg.iterations {
        let lambda_shift = if it < cfg.shift_warmup { 0.0 } else { cfg.lambda_shift };
        dirs.clear();
        let view_pick = (!views.is_empty()).then(|| rng.random_range(0..views.len()));
        let view_pixels = match view_pick {
            Some(v) => {
                let px = sample_indices(rng, views[v].depth.len(), cfg.rays_per_step);
                dirs.extend(px.iter().map(|&p| views[v].rays.as_slice()[p]));
                px
            }
            None => Vec::new(),
        };
        let mut anchor_pixels = Vec::with_capacity(anchors.len());
        for (a, &budget) in anchors.iter().zip(&budgets) {
            let picks = sample_indices(rng, a.support.len(), budget);
            let px: Vec<usize> = picks.into_iter().map(|i| a.support[i]).collect();
            dirs.extend(px.iter().map(|&p| pano_dirs.as_slice()[p]));
            anchor_pixels.push(px);
        }
        let pred = field.forward(&dirs, &mut tape).to_vec();
        d_pred.clear();
        d_pred.resize(pred.len(), 0.0f32);

        let mut step = StepLosses::default();
        let mut affine_grad = None;
        if let Some(v) = view_pick {
            let slot = &views[v];
            let n = view_pixels.len();
            let mut ag = AffineGrad::zeros(slot.depth.len());
            step.depth = depth_term(
                &slot.affine,
                slot.depth,
                &view_pixels,
                &pred[..n],
                cfg.lambda_depth as f32,
                Some(&mut d_pred[..n]),
                Some(&mut ag),
            ) as f64;
            step.scale = scale_term(&slot.affine, cfg.lambda_scale as f32, Some(&mut ag)) as f64;
            step.shift = if lambda_shift > 0.0 {
                shift_term(&slot.affine, lambda_shift as f32, Some(&mut ag)) as f64
            } else {
                shift_term(&slot.affine, 0.0, None) as f64
            };
            step.total = cfg.lambda_depth * step.depth + cfg.lambda_scale * step.scale + lambda_shift * step.shift;
            affine_grad = Some((v, ag));
        }
        let mut offset = view_pixels.len();
        for (a, px) in anchors.iter().zip(&anchor_pixels) {
            let n = px.len();
            let l = anchor_term(
                a.target,
                px,
                &pred[offset..offset + n],
                a.weight as f32,
                Some(&mut d_pred[offset..offset + n]),
            ) as f64;
            match a.kind {
                AnchorKind::First => step.first = l,
                AnchorKind::Previous => step.pre = l,
            }
            step.total += a.weight * l;
            offset += n;
        }
        if !step.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                last_finite,
            });
        }
        last_finite = Some(it);
        history.push(step);

        grad.iter_mut().for_each(|g| *g = 0.0);
        field.backward(&mut tape, &d_pred, &mut grad);
        adam.step(field.params_mut(), &grad);
        if let Some((v, ag)) = affine_grad {
            let slot = &mut views[v];
            let mut alpha = [slot.affine.alpha];
            slot.adam_alpha.step(&mut alpha, &[ag.alpha]);
            slot.affine.alpha = alpha[0];
            slot.adam_beta.step(slot.affine.beta.as_mut_slice(), &ag.beta);
        }
    }
    Ok(OptimizeReport { history })
}

/// Result of aligning the first frame.
#[derive(Debug, Clone)]
pub struct FirstFrameAlignment {
    pub field: GeometricField<f32>,
    pub depth: PanoDepth,
    pub affines: Vec<ViewAffine<f32>>,
    /// Per-step losses.
    pub history: Vec<StepLosses>,
    /// Mean losses over the final 100 steps.
    pub final_losses: StepLosses,
}

fn median(mut v: Vec<f32>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m as f64
}

pub(crate) fn check_rig_depths(depths: &[&PerspectiveDepth], rig: &[PerspectiveCamera]) -> Result<()> {
    for d in depths {
        let cam = rig
            .get(d.view)
            .ok_or_else(|| Error::invalid(format!("depth for view {} but rig has {} cameras", d.view, rig.len())))?;
        if cam.width != d.values.width() || cam.height != d.values.height() {
            return Err(Error::invalid(format!(
                "view {} depth is {}x{}, camera {:?} is {}x{}",
                d.view,
                d.values.width(),
                d.values.height(),
                cam.name,
                cam.width,
                cam.height
            )));
        }
    }
    Ok(())
}

/// Fit the geometric field of the first frame to all `depths` (one per rig camera, in
/// rig order) and evaluate it on every panorama pixel.
pub fn align_first_frame(
    frame: &EquirectFrame,
    depths: &[PerspectiveDepth],
    rig: &[PerspectiveCamera],
    cfg: &AlignConfig,
) -> Result<FirstFrameAlignment> {
    cfg.validate()?;
    if depths.is_empty() || depths.len() != rig.len() {
        return Err(Error::invalid(format!(
            "need one depth per rig camera: {} depths, {} cameras",
            depths.len(),
            rig.len()
        )));
    }
    if depths.iter().enumerate().any(|(i, d)| d.view != i) {
        return Err(Error::invalid("depths must be ordered by view index"));
    }
    check_rig_depths(&depths.iter().collect::<Vec<_>>(), rig)?;

    let init = median(depths.iter().flat_map(|d| d.values.as_slice().iter().copied()).collect());
    let mut field = GeometricField::<f32>::new(cfg.arch, cfg.seed, init);
    let mut views: Vec<ViewSlot> = depths
        .iter()
        .zip(rig)
        .map(|(d, cam)| ViewSlot::new(&d.values, camera_ray_grid(cam), cfg.affine_lr, cfg.shift_lr))
        .collect();
    let pano_dirs = make_direction_grid(frame.height(), frame.width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let report = optimize(&mut field, &mut views, &[], &pano_dirs, cfg, &mut rng)?;
    let depth = PanoDepth {
        frame: frame.index,
        values: eval_field(&field, &pano_dirs),
    };
    Ok(FirstFrameAlignment {
        final_losses: report.tail_mean(100),
        affines: views.into_iter().map(|v| v.affine).collect(),
        history: report.history,
        field,
        depth,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HTGF";
const CHECKPOINT_VERSION: u16 = 1;

/// Field checkpoint: 16-byte header (`HTGF`, u16 version, u16 input width, u16 hidden
/// width, u16 hidden layers, u16 shift-grid height, u16 shift-grid width), then f32
/// little-endian weights in layer order, the alpha list, and the beta grids.
pub fn write_checkpoint(path: &Path, field: &GeometricField<f32>, affines: &[ViewAffine<f32>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_checkpoint(field, affines)?)?;
    f.flush()?;
    Ok(())
}

pub fn encode_checkpoint(field: &GeometricField<f32>, affines: &[ViewAffine<f32>]) -> Result<Vec<u8>> {
    let arch = field.arch();
    let (bh, bw) = affines
        .first()
        .map_or((0, 0), |a| (a.beta.height(), a.beta.width()));
    if affines.iter().any(|a| a.beta.height() != bh || a.beta.width() != bw) {
        return Err(Error::invalid("all shift grids in a checkpoint must share one size"));
    }
    let dims = [arch.input_dim(), arch.hidden, arch.layers, bh, bw];
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::invalid("checkpoint dimensions exceed 16 bits"));
    }
    let mut buf = Vec::with_capacity(16 + 4 * (field.params().len() + affines.len() * (1 + bh * bw)));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u16).to_le_bytes());
    }
    let values = field
        .params()
        .iter()
        .chain(affines.iter().map(|a| &a.alpha))
        .chain(affines.iter().flat_map(|a| a.beta.as_slice()));
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(GeometricField<f32>, Vec<ViewAffine<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(GeometricField<f32>, Vec<ViewAffine<f32>>)> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "checkpoint header truncated"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let half = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    if half(4) != CHECKPOINT_VERSION as usize {
        return Err(Error::format(4, format!("unsupported checkpoint version {}", half(4))));
    }
    let input = half(6);
    if input < 3 || (input - 3) % 6 != 0 {
        return Err(Error::format(6, format!("bad input width {input}")));
    }
    let arch = FieldArch {
        octaves: (input - 3) / 6,
        hidden: half(8),
        layers: half(10),
    };
    let (bh, bw) = (half(12), half(14));
    let payload = &bytes[16..];
    if payload.len() % 4 != 0 {
        return Err(Error::format(bytes.len() as u64, "payload is not a whole number of f32"));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_params = arch.param_count();
    if floats.len() < n_params {
        return Err(Error::format(bytes.len() as u64, "checkpoint weights truncated"));
    }
    let rest = floats.len() - n_params;
    let per_view = 1 + bh * bw;
    if rest % per_view != 0 {
        return Err(Error::format(
            (16 + 4 * n_params) as u64,
            "affine section does not divide into views",
        ));
    }
    let n_views = rest / per_view;
    let field = GeometricField::from_params(arch, floats[..n_params].to_vec()).expect("length checked");
    let alphas = &floats[n_params..n_params + n_views];
    let betas = &floats[n_params + n_views..];
    let affines = (0..n_views)
        .map(|i| ViewAffine {
            alpha: alphas[i],
            beta: Grid::from_vec(bw, bh, betas[i * bh * bw..(i + 1) * bh * bw].to_vec()).expect("sized"),
        })
        .collect();
    Ok((field, affines))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> FieldArch {
        FieldArch {
            octaves: 2,
            hidden: 8,
            layers: 2,
        }
    }

    #[test]
    fn init_affine_is_identity() {
        let a = ViewAffine::<f64>::init(3, 4);
        assert!((a.scale() - 1.0).abs() < 1e-15);
        assert!(scale_term(&a, 1.0, None) < 1e-30);
        assert_eq!(shift_term(&a, 1.0, None), 0.0);
        let a32 = ViewAffine::<f32>::init(3, 4);
        assert!((a32.scale() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn depth_term_hand_value() {
        // d = 2, beta = 0, scale 1, field 3: (2 - 3)^2 = 1
        let a = ViewAffine::<f64>::init(2, 2);
        let depth = Grid::new(2, 2, 2.0f32);
        let l = depth_term(&a, &depth, &[0, 1, 2, 3], &[3.0; 4], 1.0, None, None);
        assert!((l - 1.0).abs() < 1e-12);
        // zero residual
        let l0 = depth_term(&a, &depth, &[0, 3], &[2.0, 2.0], 1.0, None, None);
        assert!(l0.abs() < 1e-12);
    }

    #[test]
    fn shift_term_counts_both_directions() {
        let mut a = ViewAffine::<f64>::init(2, 2);
        a.beta = Grid::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        // horizontal diffs: 1, 1; vertical: 0, 0
        assert!((shift_term(&a, 1.0, None) - 0.5).abs() < 1e-12);
        let single = ViewAffine::<f64>::init(1, 1);
        assert_eq!(shift_term(&single, 1.0, None), 0.0);
    }

    #[test]
    fn anchor_budget_split() {
        let t = Grid::new(4, 4, 1.0f32);
        let mk = |n: usize| Anchor {
            target: &t,
            support: (0..n).collect(),
            weight: 1.0,
            kind: AnchorKind::First,
        };
        assert_eq!(anchor_budgets(&[mk(300), mk(100)], 100), vec![75, 25]);
        assert_eq!(anchor_budgets(&[mk(0), mk(10)], 100), vec![0, 10]);
        assert_eq!(anchor_budgets(&[mk(100_000), mk(1)], 64), vec![63, 1]);
        assert!(anchor_budgets(&[], 64).is_empty());
    }

    #[test]
    fn anchor_term_empty_support_is_zero() {
        let t = Grid::new(2, 1, 1.0f32);
        assert_eq!(anchor_term::<f64>(&t, &[], &[], 1.0, None), 0.0);
        assert!((anchor_term::<f64>(&t, &[0, 1], &[2.0, 0.0], 1.0, None) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_losses_rejects_non_finite() {
        let cam = PerspectiveCamera::new("c", 0.0, 0.0, 0.0, 90.0, 4, 4).unwrap();
        let rays = camera_ray_grid(&cam);
        let field = GeometricField::<f64>::new(tiny_arch(), 0, 1.0);
        let mut aff = ViewAffine::<f64>::init(4, 4);
        let depth = PerspectiveDepth::new(0, 1, Grid::new(4, 4, 1.0)).unwrap();
        assert!(spatial_losses(&field, &aff, &depth, &rays, &[0, 1]).is_ok());
        aff.alpha = f64::NAN;
        assert!(matches!(
            spatial_losses(&field, &aff, &depth, &rays, &[0, 1]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_lr_single_step_keeps_initialization() {
        let rig = crate::sphere::icosahedron_rig(90.0, 8, 8).unwrap();
        let depths: Vec<_> = (0..rig.len())
            .map(|i| PerspectiveDepth::new(i, 1, Grid::new(8, 8, 2.0)).unwrap())
            .collect();
        let frame = EquirectFrame::new(1, Grid::new(16, 8, [0.5; 3])).unwrap();
        let cfg = AlignConfig {
            iterations: 1,
            lr: 0.0,
            affine_lr: 0.0,
            shift_lr: 0.0,
            arch: tiny_arch(),
            seed: 3,
            ..AlignConfig::first_frame()
        };
        let out = align_first_frame(&frame, &depths, &rig, &cfg).unwrap();
        let init = GeometricField::<f32>::new(cfg.arch, cfg.seed, 2.0);
        let dirs = make_direction_grid(8, 16).unwrap();
        assert_eq!(out.depth.values, eval_field(&init, &dirs));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn mismatched_depths_rejected() {
        let rig = crate::sphere::icosahedron_rig(90.0, 8, 8).unwrap();
        let frame = EquirectFrame::new(1, Grid::new(16, 8, [0.5; 3])).unwrap();
        let depths = vec![PerspectiveDepth::new(0, 1, Grid::new(8, 8, 2.0)).unwrap()];
        assert!(align_first_frame(&frame, &depths, &rig, &AlignConfig::first_frame()).is_err());
        let depths: Vec<_> = (0..20)
            .map(|i| PerspectiveDepth::new(i, 1, Grid::new(4, 8, 2.0)).unwrap())
            .collect();
        assert!(align_first_frame(&frame, &depths, &rig, &AlignConfig::first_frame()).is_err());
    }

    #[test]
    fn nan_depth_aborts_with_diagnostic() {
        let rig = crate::sphere::icosahedron_rig(90.0, 4, 4).unwrap();
        let mut depths: Vec<_> = (0..rig.len())
            .map(|i| PerspectiveDepth::new(i, 1, Grid::new(4, 4, 2.0)).unwrap())
            .collect();
        // bypass the constructor check to inject a poisoned value
        for d in &mut depths {
            d.values.set(0, 0, f32::INFINITY);
        }
        let frame = EquirectFrame::new(1, Grid::new(16, 8, [0.5; 3])).unwrap();
        let cfg = AlignConfig {
            iterations: 5,
            rays_per_step: 16,
            arch: tiny_arch(),
            ..AlignConfig::first_frame()
        };
        match align_first_frame(&frame, &depths, &rig, &cfg) {
            Err(Error::NonFinite { iteration, last_finite }) => {
                assert_eq!(iteration, 0);
                assert_eq!(last_finite, None);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    /// Full spatial objective over two views and its analytic gradient.
    fn objective(
        field: &GeometricField<f64>,
        affines: &[ViewAffine<f64>],
        depths: &[Grid<f32>],
        rays: &[DirectionGrid],
        lambdas: (f64, f64, f64),
        grads: Option<(&mut Vec<f64>, &mut Vec<AffineGrad<f64>>)>,
    ) -> f64 {
        let mut tape = Tape::new();
        let mut total = 0.0;
        let mut grads = grads;
        for v in 0..affines.len() {
            let px: Vec<usize> = (0..depths[v].len()).collect();
            let pred = field.forward(rays[v].as_slice(), &mut tape).to_vec();
            let mut d_pred = vec![0.0; pred.len()];
            let (ld, ls, lsh) = lambdas;
            match grads.as_mut() {
                Some((g, ag)) => {
                    total += ld * depth_term(&affines[v], &depths[v], &px, &pred, ld, Some(&mut d_pred), Some(&mut ag[v]));
                    total += ls * scale_term(&affines[v], ls, Some(&mut ag[v]));
                    total += lsh * shift_term(&affines[v], lsh, Some(&mut ag[v]));
                    field.backward(&mut tape, &d_pred, g);
                }
                None => {
                    total += ld * depth_term(&affines[v], &depths[v], &px, &pred, ld, None, None);
                    total += ls * scale_term(&affines[v], ls, None);
                    total += lsh * shift_term(&affines[v], lsh, None);
                }
            }
        }
        total
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = tiny_arch();
        let field = GeometricField::<f64>::new(arch, 11, 1.3);
        let cams = [
            PerspectiveCamera::new("a", 0.0, 0.0, 0.0, 60.0, 8, 8).unwrap(),
            PerspectiveCamera::new("b", 70.0, 20.0, 0.0, 60.0, 8, 8).unwrap(),
        ];
        let rays: Vec<_> = cams.iter().map(camera_ray_grid).collect();
        let depths: Vec<_> = (0..2)
            .map(|v| Grid::from_fn(8, 8, |r, c| 0.5 + 0.1 * (r + v) as f32 + 0.05 * c as f32))
            .collect();
        let affines: Vec<_> = (0..2)
            .map(|v| ViewAffine {
                alpha: 0.3 - 0.4 * v as f64,
                beta: Grid::from_fn(8, 8, |r, c| 0.02 * ((r * 3 + c * 5 + v) % 7) as f64 - 0.05),
            })
            .collect();
        let lambdas = (1.0, 0.1, 1.0);
        let mut g = vec![0.0; field.params().len()];
        let mut ag = vec![AffineGrad::zeros(64), AffineGrad::zeros(64)];
        objective(&field, &affines, &depths, &rays, lambdas, Some((&mut g, &mut ag)));

        // a ReLU kink can fall inside a 1e-4 step for network weights
        let eps_field = 1e-6;
        let eps = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let f_at = |field: &GeometricField<f64>, affines: &[ViewAffine<f64>]| {
            objective(field, affines, &depths, &rays, lambdas, None)
        };
        let n = field.params().len();
        for i in (0..n).step_by(n / 23).chain([n - 1]) {
            let mut plus = field.clone();
            plus.params_mut()[i] += eps_field;
            let mut minus = field.clone();
            minus.params_mut()[i] -= eps_field;
            let num = (f_at(&plus, &affines) - f_at(&minus, &affines)) / (2.0 * eps_field);
            if num.abs() < 1e-7 && g[i].abs() < 1e-7 {
                continue;
            }
            assert!(rel(g[i], num) < 1e-3, "param {i}: {} vs {num}", g[i]);
        }
        for v in 0..2 {
            let mut plus = affines.clone();
            plus[v].alpha += eps;
            let mut minus = affines.clone();
            minus[v].alpha -= eps;
            let num = (f_at(&field, &plus) - f_at(&field, &minus)) / (2.0 * eps);
            assert!(rel(ag[v].alpha, num) < 1e-3, "alpha {v}: {} vs {num}", ag[v].alpha);
            for p in [0, 9, 27, 63] {
                let mut plus = affines.clone();
                plus[v].beta.as_mut_slice()[p] += eps;
                let mut minus = affines.clone();
                minus[v].beta.as_mut_slice()[p] -= eps;
                let num = (f_at(&field, &plus) - f_at(&field, &minus)) / (2.0 * eps);
                assert!(rel(ag[v].beta[p], num) < 1e-3, "beta {v},{p}: {} vs {num}", ag[v].beta[p]);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let field = GeometricField::<f32>::new(tiny_arch(), 8, 1.5);
        let mut a = ViewAffine::<f32>::init(3, 2);
        a.beta.set(1, 1, 0.25);
        let b = ViewAffine::<f32>::init(3, 2);
        let bytes = encode_checkpoint(&field, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(&bytes[..4], b"HTGF");
        assert_eq!(bytes.len(), 16 + 4 * (field.params().len() + 2 * 7));
        let (f2, affs) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(f2, field);
        assert_eq!(affs, vec![a, b]);
        let (f3, none) = decode_checkpoint(&encode_checkpoint(&field, &[]).unwrap()).unwrap();
        assert_eq!(f3, field);
        assert!(none.is_empty());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let field = GeometricField::<f32>::new(tiny_arch(), 8, 1.5);
        let mut bytes = encode_checkpoint(&field, &[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
        let bytes = encode_checkpoint(&field, &[]).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn fit_to_field_reproduces_field_on_kept_rays() {
        let field = GeometricField::<f32>::new(tiny_arch(), 8, 1.5);
        let cam = PerspectiveCamera::new("v", 0.0, 0.0, 0.0, 90.0, 6, 4).unwrap();
        let depth = Grid::from_fn(6, 4, |r, c| 1.0 + 0.1 * (r * 6 + c) as f32);
        let mut slot = ViewSlot::new(&depth, camera_ray_grid(&cam), 1e-3, 1e-3);
        let keep = |d: &Vec3| d.y > 0.0;
        slot.fit_to_field(&field, keep);
        let s = slot.affine.scale() as f64;
        let rays = slot.rays.as_slice();
        let pred = field.eval(rays);
        let beta = slot.affine.beta.as_slice();
        let offset = (0..rays.len()).find(|&p| !keep(&rays[p])).map(|p| beta[p]).unwrap();
        for p in 0..rays.len() {
            if keep(&rays[p]) {
                let fitted = s * depth.as_slice()[p] as f64 + beta[p] as f64;
                assert!((fitted - pred[p] as f64).abs() < 1e-4);
            } else {
                assert_eq!(beta[p], offset);
            }
        }

        // too few kept rays leaves the unit init
        let mut unit = ViewSlot::new(&depth, camera_ray_grid(&cam), 1e-3, 1e-3);
        unit.fit_to_field(&field, |_| false);
        assert_eq!(unit.affine, ViewAffine::init(4, 6));
    }
}
