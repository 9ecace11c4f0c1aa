use panost_core::align::{align_first_frame, AlignConfig};
use panost_core::oracle::{perturb_depths, DepthPerturbation, OracleScene};
use panost_core::sphere::icosahedron_rig;

/// Relative errors after the best affine map of `est` onto `gt`, sorted.
fn gauge_errors(est: &[f32], gt: &[f32]) -> Vec<f64> {
    let n = est.len() as f64;
    let mx = est.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = gt.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sxy: f64 = est.iter().zip(gt).map(|(&x, &y)| (x as f64 - mx) * (y as f64 - my)).sum();
    let sxx: f64 = est.iter().map(|&x| (x as f64 - mx).powi(2)).sum();
    let (s, b) = (sxy / sxx, my - sxy / sxx * mx);
    let mut rel: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(&x, &y)| ((s * x as f64 + b - y as f64) / y as f64).abs())
        .collect();
    rel.sort_by(f64::total_cmp);
    rel
}

#[test]
fn first_frame_alignment_tolerates_depth_noise() {
    let scene = OracleScene::new(128, 256, 1, 1);
    let rig = icosahedron_rig(90.0, 64, 64).unwrap();
    let fr = scene.render(1).unwrap();
    let clean = scene.view_depths(&rig, 1).unwrap();
    let pert = DepthPerturbation { noise_sigma: 0.05, seed: 3, ..Default::default() };
    let views = perturb_depths(&clean, &pert).unwrap().depths;
    let cfg = AlignConfig { rays_per_step: 1024, ..AlignConfig::first_frame() };
    let out = align_first_frame(&fr.frame, &views, &rig, &cfg).unwrap();
    let rel = gauge_errors(out.depth.values.as_slice(), fr.depth.values.as_slice());
    let (med, p95) = (rel[rel.len() / 2], rel[rel.len() * 95 / 100]);
    assert!(med < 0.05 && p95 < 0.15, "median {med:.4} p95 {p95:.4}");
}
