//! Stage bodies. Each returns the workspace-relative paths it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{FlowSource, PipelineConfig};
use super::workspace::{frame_name, view_depth_name, Workspace};
use super::Stage;
use crate::align::{align_first_frame, read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::frame::{EquirectFrame, PanoDepth, PerspectiveDepth};
use crate::grid::{Flow, Grid};
use crate::io::{read_flo, read_mask_png, read_pfm, read_rgb_png, write_flo, write_mask_png, write_pfm, write_rgb_png};
use crate::lift::{export_ply, lift, lift_manifest, texture_variation_mask};
use crate::motion::{block_matching_flow, FlowField, MotionMasks};
use crate::oracle::{perturb_depths, OracleScene, CLAMP_EPS};
use crate::seam::seam_metric;
use crate::spacetime::{align_video_from, run_log, FrameRecord};
use crate::sphere::{icosahedron_rig, project, read_rig_manifest, rig_manifest, PerspectiveCamera, PerspectiveImage};
use crate::warp::{build_training_rig, offset_camera, project_pano_depth, supplementary_views};

type Files = Vec<String>;

pub(super) fn load_frame(ws: &Workspace, l: usize) -> Result<EquirectFrame> {
    EquirectFrame::new(l, read_rgb_png(&ws.path(&frame_name(l)))?).map_err(|e| e.in_frame(l))
}

fn load_frames(ws: &Workspace) -> Result<Vec<EquirectFrame>> {
    let n = ws.frame_count();
    if n == 0 {
        return Err(Error::invalid("workspace has no frames (run synth or import frames/frame_0001.png...)"));
    }
    (1..=n).map(|l| load_frame(ws, l)).collect()
}

fn flow_name(l: usize) -> String {
    format!("flow/flow_{l:04}.flo")
}

fn depth_name(l: usize) -> String {
    format!("depth/depth_{l:04}.pfm")
}

fn region_name(l: usize) -> String {
    format!("masks/region_{l:04}.png")
}

/// Directory holding per-view depths and their `rig.txt`.
fn views_dir(ws: &Workspace, cfg: &PipelineConfig) -> PathBuf {
    match &cfg.external_depth {
        Some(d) => PathBuf::from(d),
        None => ws.path("views"),
    }
}

fn view_rig(ws: &Workspace, cfg: &PipelineConfig) -> Result<Vec<PerspectiveCamera>> {
    read_rig_manifest(&views_dir(ws, cfg).join("rig.txt"))
}

fn load_view(dir: &Path, cfg: &PipelineConfig, view: usize, l: usize) -> Result<PerspectiveDepth> {
    let values = read_pfm(&dir.join(view_depth_name(l, view)))?;
    if cfg.disparity {
        PerspectiveDepth::from_disparity(view, l, &values, CLAMP_EPS)
    } else {
        PerspectiveDepth::new(view, l, values)
    }
}

/// `(label, path)` of every file a stage reads, in a stable order.
pub(super) fn inputs(ws: &Workspace, cfg: &PipelineConfig, stage: Stage) -> Result<Vec<(String, PathBuf)>> {
    let rel = |names: Vec<String>| -> Vec<(String, PathBuf)> { names.into_iter().map(|n| (n.clone(), ws.path(&n))).collect() };
    let frames = || rel((1..=ws.frame_count()).map(frame_name).collect());
    let views = |prefix: String| -> Result<Vec<(String, PathBuf)>> {
        let dir = views_dir(ws, cfg);
        let mut names: Vec<String> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok()?.file_name().into_string().ok())
                .filter(|n| n == "rig.txt" || (n.starts_with(&prefix) && n.ends_with(".pfm")))
                .collect(),
            Err(_) => Vec::new(),
        };
        names.sort();
        Ok(names.into_iter().map(|n| (format!("views/{n}"), dir.join(n))).collect())
    };
    let listed = |dir: &str, keep: &dyn Fn(&str) -> bool| -> Result<Vec<(String, PathBuf)>> { Ok(rel(ws.list(dir, keep)?)) };
    let mut out = Vec::new();
    match stage {
        Stage::Synth => {}
        Stage::Flow => {
            out.extend(frames());
            match cfg.flow_source {
                FlowSource::Oracle => out.extend(listed("gt", &|n| n.starts_with("flow_"))?),
                FlowSource::External => out.extend(listed("flow", &|n| n.ends_with(".flo"))?),
                FlowSource::Block => {}
            }
        }
        Stage::Masks => out.extend(listed("flow", &|n| n.ends_with(".flo"))?),
        Stage::AlignFirst => {
            out.extend(rel(vec![frame_name(1)]));
            out.extend(views("depth_0001_".into())?);
        }
        Stage::AlignVideo => {
            out.extend(frames());
            out.extend(listed("flow", &|n| n.ends_with(".flo"))?);
            out.extend(views("depth_".into())?);
            out.extend(rel(vec![depth_name(1), "depth/first.htgf".into(), "depth/first.log".into()]));
        }
        Stage::Lift => {
            out.extend(frames());
            out.extend(listed("depth", &|n| n.starts_with("depth_"))?);
            out.extend(listed("masks", &|n| n.starts_with("region_"))?);
        }
        Stage::Rig => {
            out.extend(frames());
            out.extend(listed("depth", &|n| n.starts_with("depth_"))?);
        }
        Stage::Warp => out.extend(listed("rig", &|n| n == "rgb.png" || n == "depth.pfm" || n == "rig.txt")?),
        Stage::Seam => out.extend(frames()),
    }
    Ok(out)
}

pub(super) fn run(ws: &Workspace, cfg: &PipelineConfig, stage: Stage) -> Result<Files> {
    match stage {
        Stage::Synth => synth(ws, cfg),
        Stage::Flow => flow(ws, cfg),
        Stage::Masks => masks(ws, cfg),
        Stage::AlignFirst => align_first(ws, cfg),
        Stage::AlignVideo => align_rest(ws, cfg),
        Stage::Lift => lift_stage(ws, cfg),
        Stage::Rig => rig(ws, cfg),
        Stage::Warp => warp(ws),
        Stage::Seam => seam(ws, cfg),
    }
}

fn synth(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let (h, w, frames) = (cfg.height, cfg.width(), cfg.frames);
    let scene = if cfg.moving_object {
        OracleScene::moving_disk(h, w, frames, cfg.seed)
    } else {
        OracleScene::new(h, w, frames, cfg.seed)
    };
    scene.validate()?;
    let rig = icosahedron_rig(cfg.view_fov, cfg.view_size, cfg.view_size)?;
    let mut files = vec!["views/rig.txt".to_string(), "gt/scene.txt".into(), "gt/affines.txt".into()];
    fs::write(ws.path("views/rig.txt"), rig_manifest(&rig))?;
    let mut affines = String::from("# frame view scale shift\n");
    let mut clamped = 0;
    let pert = cfg.perturbation();
    for l in 1..=frames {
        let at = |e: Error| e.in_frame(l);
        let f = scene.render(l).map_err(at)?;
        let names = [frame_name(l), format!("gt/depth_{l:04}.pfm"), format!("gt/flow_{l:04}.flo"), format!("gt/object_{l:04}.png")];
        write_rgb_png(&ws.path(&names[0]), f.frame.pixels())?;
        write_pfm(&ws.path(&names[1]), &f.depth.values)?;
        write_flo(&ws.path(&names[2]), &f.flow)?;
        write_mask_png(&ws.path(&names[3]), &f.object)?;
        files.extend(names);
        let clean = scene.view_depths(&rig, l).map_err(at)?;
        let p = perturb_depths(&clean, &pert).map_err(at)?;
        clamped += p.clamped;
        for (d, (s, b)) in p.depths.iter().zip(&p.affines) {
            let name = format!("views/{}", view_depth_name(l, d.view));
            write_pfm(&ws.path(&name), &d.values)?;
            files.push(name);
            writeln!(affines, "{l} {} {s} {b}", d.view).expect("writing to a String cannot fail");
        }
    }
    fs::write(ws.path("gt/affines.txt"), affines)?;
    let mut s = String::new();
    writeln!(s, "seed {}\nheight {h}\nwidth {w}\nframes {frames}", cfg.seed).expect("string write");
    writeln!(s, "base_radius {}", scene.base_radius).expect("string write");
    for (m, a) in &scene.harmonics {
        writeln!(s, "harmonic {m} {a}").expect("string write");
    }
    if let Some(o) = &scene.object {
        writeln!(
            s,
            "object radius_deg {} speed_deg {} depth_start {} depth_end {}",
            o.radius_deg, o.speed_deg, o.depth_start, o.depth_end
        )
        .expect("string write");
    }
    writeln!(s, "clamped {clamped}").expect("string write");
    fs::write(ws.path("gt/scene.txt"), s)?;
    Ok(files)
}

fn flow(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let n = ws.frame_count();
    if n == 0 {
        return Err(Error::invalid("workspace has no frames"));
    }
    // one slice per consecutive pair
    let names: Files = (1..n).map(flow_name).collect();
    match cfg.flow_source {
        FlowSource::Oracle => {
            for (l, name) in names.iter().enumerate().map(|(i, n)| (i + 1, n)) {
                let src = ws.path(&format!("gt/flow_{l:04}.flo"));
                if !src.is_file() {
                    return Err(Error::invalid("oracle flow needs gt/flow_NNNN.flo from synth").in_frame(l));
                }
                fs::copy(src, ws.path(name))?;
            }
        }
        FlowSource::Block => {
            let frames = load_frames(ws)?;
            let slices: Vec<(usize, Grid<Flow>)> = (1..n)
                .into_par_iter()
                .map(|l| {
                    let g = block_matching_flow(frames[l - 1].pixels(), frames[l].pixels(), cfg.flow_block, cfg.flow_search)
                        .map_err(|e| e.in_frame(l))?;
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            for (l, g) in slices {
                write_flo(&ws.path(&flow_name(l)), &g)?;
            }
        }
        FlowSource::External => {
            for (l, name) in names.iter().enumerate().map(|(i, n)| (i + 1, n)) {
                read_flo(&ws.path(name)).map_err(|e| e.in_frame(l))?;
            }
        }
    }
    Ok(names)
}

fn load_flow(ws: &Workspace, frames: usize) -> Result<FlowField> {
    let head = load_frame(ws, 1)?;
    let slices = (1..frames)
        .map(|l| read_flo(&ws.path(&flow_name(l))).map_err(|e| e.in_frame(l)))
        .collect::<Result<Vec<_>>>()?;
    FlowField::new(head.width(), head.height(), slices)
}

fn masks(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let n = ws.frame_count();
    if n == 0 {
        return Err(Error::invalid("workspace has no frames"));
    }
    let m = MotionMasks::from_flow(&load_flow(ws, n)?, cfg.flow_threshold);
    let mut files = Vec::new();
    let mut put = |name: String, mask: &crate::grid::Mask| -> Result<()> {
        write_mask_png(&ws.path(&name), mask)?;
        files.push(name);
        Ok(())
    };
    for l in 1..=n {
        put(region_name(l), m.region(l))?;
        if l < n {
            put(format!("masks/source_{l:04}.png"), &m.source[l - 1])?;
        }
        if l > 1 {
            put(format!("masks/destination_{l:04}.png"), &m.destination[l - 2])?;
        }
    }
    put("masks/overall.png".into(), &m.overall)?;
    Ok(files)
}

fn align_first(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let frame = load_frame(ws, 1)?;
    let rig = view_rig(ws, cfg)?;
    let dir = views_dir(ws, cfg);
    let views = (0..rig.len())
        .map(|v| load_view(&dir, cfg, v, 1))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_frame(1))?;
    let out = align_first_frame(&frame, &views, &rig, &cfg.first_align()).map_err(|e| e.in_frame(1))?;
    write_pfm(&ws.path(&depth_name(1)), &out.depth.values)?;
    write_checkpoint(&ws.path("depth/first.htgf"), &out.field, &out.affines)?;
    let record = FrameRecord {
        frame: 1,
        selected: (0..rig.len()).collect(),
        losses: out.final_losses,
        unsupervised: 0,
    };
    fs::write(ws.path("depth/first.log"), run_log(&[record]))?;
    Ok(vec![depth_name(1), "depth/first.htgf".into(), "depth/first.log".into()])
}

fn align_rest(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let frames = load_frames(ws)?;
    let flow = load_flow(ws, frames.len())?;
    let rig = view_rig(ws, cfg)?;
    let dir = views_dir(ws, cfg);
    let (field, _) = read_checkpoint(&ws.path("depth/first.htgf"))?;
    let first = PanoDepth {
        frame: 1,
        values: read_pfm(&ws.path(&depth_name(1)))?,
    };
    let first_log = fs::read_to_string(ws.path("depth/first.log"))?;
    let mut source = |view: usize, l: usize| load_view(&dir, cfg, view, l);
    let out = align_video_from(&frames, &mut source, &flow, &rig, &cfg.video(), field, first)?;
    let mut files = Vec::new();
    for d in &out.depths[1..] {
        let name = depth_name(d.frame);
        write_pfm(&ws.path(&name), &d.values)?;
        files.push(name);
    }
    write_checkpoint(&ws.path("depth/field.htgf"), &out.field, &[])?;
    let rest = run_log(&out.records);
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    fs::write(ws.path("depth/run.log"), format!("{first_log}{rest}"))?;
    files.extend(["depth/field.htgf".to_string(), "depth/run.log".into()]);
    Ok(files)
}

fn load_depths(ws: &Workspace, frames: usize) -> Result<Vec<PanoDepth>> {
    (1..=frames)
        .map(|l| {
            Ok(PanoDepth {
                frame: l,
                values: read_pfm(&ws.path(&depth_name(l))).map_err(|e| e.in_frame(l))?,
            })
        })
        .collect()
}

fn lift_stage(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let frames = load_frames(ws)?;
    let n = frames.len();
    let depths = load_depths(ws, n)?;
    let regions = (1..=n)
        .map(|l| read_mask_png(&ws.path(&region_name(l))).map_err(|e| e.in_frame(l)))
        .collect::<Result<Vec<_>>>()?;
    let variation = texture_variation_mask(&frames, cfg.tau_std, cfg.std_rule)?;
    let (cloud, report) = lift(&frames, &depths, &variation, &regions)?;
    export_ply(&cloud, &ws.path("cloud/cloud.ply"))?;
    let text = lift_manifest(n, frames[0].height(), frames[0].width(), cfg.tau_std, cfg.std_rule, &report);
    fs::write(ws.path("cloud/lift.txt"), text)?;
    write_mask_png(&ws.path("cloud/variation.png"), &variation)?;
    Ok(vec!["cloud/cloud.ply".into(), "cloud/lift.txt".into(), "cloud/variation.png".into()])
}

fn camera_dir(cam: &PerspectiveCamera, l: usize) -> String {
    format!("rig/{}/frame_{l:04}", cam.name)
}

fn rig(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let frames = load_frames(ws)?;
    let depths = load_depths(ws, frames.len())?;
    let cams = build_training_rig(cfg.rig_size, cfg.rig_size)?;
    fs::write(ws.path("rig/rig.txt"), rig_manifest(&cams))?;
    let jobs: Vec<(usize, usize)> = (1..=frames.len()).flat_map(|l| (0..cams.len()).map(move |v| (l, v))).collect();
    let written = jobs
        .par_iter()
        .map(|&(l, v)| -> Result<Files> {
            let cam = &cams[v];
            let dir = camera_dir(cam, l);
            fs::create_dir_all(ws.path(&dir))?;
            let rgb = project(frames[l - 1].pixels(), cam);
            let depth = project_pano_depth(&depths[l - 1], cam, v)?;
            let (a, b) = (format!("{dir}/rgb.png"), format!("{dir}/depth.pfm"));
            write_rgb_png(&ws.path(&a), &rgb.pixels)?;
            write_pfm(&ws.path(&b), &depth.values)?;
            Ok(vec![a, b])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut files: Files = written.into_iter().flatten().collect();
    files.push("rig/rig.txt".into());
    Ok(files)
}

fn warp(ws: &Workspace) -> Result<Files> {
    let cams = read_rig_manifest(&ws.path("rig/rig.txt"))?;
    let frames = ws.frame_count();
    let jobs: Vec<(usize, usize)> = (1..=frames).flat_map(|l| (0..cams.len()).map(move |v| (l, v))).collect();
    let written = jobs
        .par_iter()
        .map(|&(l, v)| -> Result<Files> {
            let cam = &cams[v];
            let dir = camera_dir(cam, l);
            let image = PerspectiveImage::all_valid(read_rgb_png(&ws.path(&format!("{dir}/rgb.png")))?);
            let depth = read_pfm(&ws.path(&format!("{dir}/depth.pfm")))?;
            let mut files = Vec::with_capacity(8);
            for (label, _, view) in supplementary_views(&image, &depth, cam) {
                let (a, b) = (format!("{dir}/warp_{label}.png"), format!("{dir}/warp_{label}_valid.png"));
                write_rgb_png(&ws.path(&a), &view.image.pixels)?;
                write_mask_png(&ws.path(&b), &view.image.valid)?;
                files.extend([a, b]);
            }
            Ok(files)
        })
        .collect::<Result<Vec<_>>>()?;
    let moved: Vec<PerspectiveCamera> = cams
        .iter()
        .flat_map(|c| crate::warp::supplement_offsets().map(|(label, off)| offset_camera(c, off, label)))
        .collect();
    fs::write(ws.path("rig/rig_warp.txt"), rig_manifest(&moved))?;
    let mut files: Files = written.into_iter().flatten().collect();
    files.push("rig/rig_warp.txt".into());
    Ok(files)
}

fn seam(ws: &Workspace, cfg: &PipelineConfig) -> Result<Files> {
    let frames = load_frames(ws)?;
    let pixels: Vec<Grid<crate::grid::Rgb>> = frames.into_iter().map(EquirectFrame::into_pixels).collect();
    let (gaps, mean) = seam_metric(&pixels)?;
    let mut s = String::from("# frame jump raw\n");
    for (i, g) in gaps.iter().enumerate() {
        writeln!(s, "{} {:.6} {:.6}", i + 1, g.jump, g.raw).expect("string write");
    }
    writeln!(s, "mean {:.6} {:.6}", mean.jump, mean.raw).expect("string write");
    fs::write(ws.path("report/seam.txt"), s)?;
    if let Some(max) = cfg.max_seam_gap {
        if mean.jump > max {
            return Err(Error::invalid(format!("mean seam jump {:.6} exceeds {max}", mean.jump)));
        }
    }
    Ok(vec!["report/seam.txt".into()])
}
