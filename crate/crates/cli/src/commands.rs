//! Subcommand implementations over the documented file formats. Every output
//! goes through the atomic writer; nothing mutates its inputs.

use std::path::{Path, PathBuf};

use depth_edges::eval::{self, BaselineMode, BoundaryPR};
use depth_edges::ground_truth::{self, CameraIntrinsics, NormalSource};
use depth_edges::image::MultiChannelImage;
use depth_edges::net::{self, HeadKind, Tensor};
use depth_edges::refine::{self, RefineConfig};
use depth_edges::scene::{self, DatasetManifest};
use depth_edges::segment::{self, SegmentationHierarchy};
use depth_edges::{io, Error, Result};

use crate::config::RunConfig;

pub fn gen(
    out: &Path,
    scenes: usize,
    width: usize,
    height: usize,
    seed: u64,
    jobs: usize,
    cfg: &RunConfig,
) -> Result<()> {
    let manifest = scene::make_dataset(out, scenes, width, height, seed, cfg.corruption(), jobs)?;
    println!(
        "generated {} scenes of {width}x{height} under {}",
        manifest.scenes.len(),
        out.display()
    );
    Ok(())
}

pub fn gt(
    disparity_path: &Path,
    normals_path: Option<&Path>,
    intrinsics: Option<(f64, f64, f64, f64)>, // focal, cx, cy, disparity scale
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let disparity = io::read_pfm(disparity_path)?;
    let gt_cfg = cfg.ground_truth()?;
    let reconstructed;
    let source = match (normals_path, intrinsics) {
        (Some(path), _) => {
            let normals = io::read_pfm(path)?;
            let deviation = normals.max_normal_deviation()?;
            if deviation > 1e-3 {
                eprintln!(
                    "warning: normals deviate from unit length by up to {deviation:.2e}; \
                     renormalizing"
                );
            }
            reconstructed = normals;
            NormalSource::Image(&reconstructed)
        }
        (None, Some((focal, cx, cy, scale))) => {
            let cam = CameraIntrinsics::new(focal, (cx, cy), scale)?;
            reconstructed = ground_truth::normals_from_disparity(
                &disparity,
                &cam,
                ground_truth::NORMAL_MEDIAN_RADIUS,
            )?;
            NormalSource::Image(&reconstructed)
        }
        (None, None) => {
            return Err(Error::Config(
                "gt needs either --normals or camera intrinsics (--focal/--principal/--disparity-scale)"
                    .into(),
            ))
        }
    };
    let bundle = ground_truth::make_ground_truth(&disparity, source, &gt_cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_pfm(&out_dir.join("contour.pfm"), bundle.contour.image())?;
    io::write_pfm(&out_dir.join("crease.pfm"), bundle.crease.image())?;
    io::write_pfm(&out_dir.join("edges.pfm"), bundle.edge.image())?;
    let sidecar = format!(
        "alpha = {}\nbeta = {}\nrecipe = {}\ncontour_gradient = {:?}\ncrease_gradient = {:?}\nlaplacian = {:?}\n",
        cfg.gt_alpha,
        cfg.gt_beta,
        if cfg.gt_smoothed { "smoothed" } else { "direct" },
        gt_cfg.contour.gradient,
        gt_cfg.crease.gradient,
        gt_cfg.contour.laplacian,
    );
    io::write_atomic(&out_dir.join("gt_params.txt"), sidecar.as_bytes())?;
    println!("wrote contour/crease/edge maps under {}", out_dir.display());
    Ok(())
}

pub fn train(
    dataset: &Path,
    model_out: &Path,
    loss_log_out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let manifest = DatasetManifest::load(dataset)?;
    let arch = cfg.architecture();
    let (params, log) = net::train(&manifest, &arch, &cfg.train)?;
    net::save_model(model_out, &params)?;
    if let Some(path) = loss_log_out {
        io::write_atomic(path, net::loss_log_csv(&log).as_bytes())?;
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} epochs: val loss {:.6} -> {:.6}; model at {}",
            log.len(),
            first.val,
            last.val,
            model_out.display()
        );
    }
    Ok(())
}

/// Loads the three estimate channels of one scene folder and assembles the
/// network input.
fn scene_input(dir: &Path) -> Result<Tensor> {
    let color = io::read_ppm(&dir.join("color.ppm"))?;
    let disparity = io::read_pfm(&dir.join("disp_est.pfm"))?;
    let normals = io::read_pfm(&dir.join("normals_est.pfm"))?;
    net::assemble_input(&color, &disparity, &normals)
}

/// Writes a 2-channel direction field as a 3-channel PFM (zero third
/// channel), since the float-map format only stores 1 or 3 channels.
fn write_direction_pfm(path: &Path, dirs: &MultiChannelImage) -> Result<()> {
    let (w, h) = (dirs.width(), dirs.height());
    let padded = MultiChannelImage::from_fn(w, h, 3, |x, y, c| {
        if c < 2 {
            dirs.get(x, y, c)
        } else {
            0.0
        }
    });
    io::write_pfm(path, &padded)
}

/// Reads a direction field written by [`write_direction_pfm`].
pub fn read_direction_pfm(path: &Path) -> Result<MultiChannelImage> {
    let img = io::read_pfm(path)?;
    if img.channels() < 2 {
        return Err(Error::format(path, "direction field needs 2 channels"));
    }
    Ok(MultiChannelImage::from_fn(
        img.width(),
        img.height(),
        2,
        |x, y, c| img.get(x, y, c),
    ))
}

pub fn infer(
    model_path: &Path,
    scene_dir: &Path,
    out: &Path,
    directions_out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let params = net::load_model(model_path)?;
    let input = scene_input(scene_dir)?;
    let output = net::infer(&params, &input)?;
    match params.config.head {
        HeadKind::Edge => {
            io::write_pfm(out, &output)?;
        }
        HeadKind::ContourDirection => {
            let (contour, dirs) = net::normalized_directions(&output, cfg.direction_threshold)?;
            io::write_pfm(out, &contour)?;
            let dir_path = directions_out.ok_or_else(|| {
                Error::Config(
                    "a contour+direction model needs --directions-out for the direction field"
                        .into(),
                )
            })?;
            write_direction_pfm(dir_path, &dirs)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn infer_dataset(
    model_path: &Path,
    dataset: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<()> {
    let params = net::load_model(model_path)?;
    let manifest = DatasetManifest::load(dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<(PathBuf, String)> = manifest
        .scenes
        .iter()
        .map(|e| {
            let name = e
                .dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            (e.dir.clone(), name)
        })
        .collect();
    let run_one = |dir: &Path, name: &str| -> Result<()> {
        let input = scene_input(dir)?;
        let output = net::infer(&params, &input)?;
        match params.config.head {
            HeadKind::Edge => io::write_pfm(&out_dir.join(format!("{name}.pfm")), &output),
            HeadKind::ContourDirection => {
                let (contour, dirs) =
                    net::normalized_directions(&output, cfg.direction_threshold)?;
                io::write_pfm(&out_dir.join(format!("{name}.pfm")), &contour)?;
                write_direction_pfm(&out_dir.join(format!("{name}_dirs.pfm")), &dirs)
            }
        }
    };
    let jobs = jobs.clamp(1, entries.len().max(1));
    if jobs == 1 {
        for (dir, name) in &entries {
            run_one(dir, name)?;
        }
    } else {
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            entries
                .chunks(entries.len().div_ceil(jobs))
                .map(|chunk| {
                    scope.spawn(move || {
                        for (dir, name) in chunk {
                            run_one(dir, name)?;
                        }
                        Ok(())
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("inference worker panicked"))
                .collect()
        });
        for r in results {
            r?;
        }
    }
    println!("wrote {} edge maps under {}", entries.len(), out_dir.display());
    Ok(())
}

/// Builds the hierarchy for an edge map per the run configuration.
pub fn hierarchy_for(edges: &MultiChannelImage, cfg: &RunConfig) -> Result<SegmentationHierarchy> {
    let ws = segment::watershed_with_depth(edges, cfg.minima_depth)?;
    let h = segment::build_ucm(ws);
    Ok(if cfg.strengthen {
        segment::strengthen_contours(&h, &cfg.strengthen_cfg)
    } else {
        h
    })
}

pub fn segment_cmd(
    edges_path: &Path,
    color_path: Option<&Path>,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let edges = io::read_pfm(edges_path)?;
    let hierarchy = hierarchy_for(&edges, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let ucm = hierarchy.ucm_raster();
    io::write_pfm(&out_dir.join("ucm.pfm"), &ucm)?;
    io::write_atomic(
        &out_dir.join("merge_tree.txt"),
        segment::merge_tree_text(&hierarchy).as_bytes(),
    )?;
    io::write_label_map(
        &out_dir.join("base_labels.pgm"),
        &hierarchy.watershed.labels,
        hierarchy.watershed.width,
        hierarchy.watershed.height,
    )?;

    // Red-line overlay: UCM strength blends toward red over the color image
    // (or a gray rendering of the edge map).
    let (w, h) = (edges.width(), edges.height());
    let base = match color_path {
        Some(p) => io::read_ppm(p)?,
        None => MultiChannelImage::from_fn(w, h, 3, |x, y, _| 1.0 - edges.get(x, y, 0) * 0.5),
    };
    if base.width() != w || base.height() != h {
        return Err(Error::Shape(format!(
            "overlay color image is {}x{}, edges are {w}x{h}",
            base.width(),
            base.height()
        )));
    }
    let overlay = MultiChannelImage::from_fn(w, h, 3, |x, y, c| {
        let strength = ucm.get(x, y, 0);
        if strength >= cfg.overlay_threshold {
            let alpha = strength.clamp(0.25, 1.0);
            let target = if c == 0 { 1.0 } else { 0.0 };
            base.get(x, y, c) * (1.0 - alpha) + target * alpha
        } else {
            base.get(x, y, c)
        }
    });
    io::write_ppm(&out_dir.join("overlay.ppm"), &overlay)?;
    println!(
        "segmented into {} base regions, {} merges; outputs under {}",
        hierarchy.watershed.n_regions,
        hierarchy.merges.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn refine_cmd(
    disparity_path: &Path,
    contour_path: &Path,
    directions_path: &Path,
    out: &Path,
    report_out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let disparity = io::read_pfm(disparity_path)?;
    let contour = io::read_pfm(contour_path)?;
    let directions = read_direction_pfm(directions_path)?;
    let refine_cfg = RefineConfig {
        ..cfg.refine.clone()
    };
    let result = refine::multiscale_refine(
        &disparity,
        &contour,
        &directions,
        cfg.refine_levels,
        &refine_cfg,
    )?;
    io::write_pfm(out, &result.disparity)?;
    let mut report = String::new();
    for level in &result.levels {
        report.push_str(&format!(
            "level {}x{} converged={} objectives:",
            level.width, level.height, level.converged
        ));
        for o in &level.objectives {
            report.push_str(&format!(" {o:.6}"));
        }
        report.push('\n');
    }
    match report_out {
        Some(path) => io::write_atomic(path, report.as_bytes())?,
        None => print!("{report}"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Evaluates predicted edge maps (one `<scene>.pfm` per dataset scene under
/// `predictions`) and optionally the hand-defined baselines, against the
/// ground-truth edges of each scene.
pub fn eval_cmd(
    dataset: &Path,
    predictions: Option<&Path>,
    out_dir: &Path,
    with_baselines: bool,
    cfg: &RunConfig,
) -> Result<()> {
    let manifest = DatasetManifest::load(dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let thresholds = eval::uniform_thresholds(cfg.threshold_count);

    struct Method {
        name: String,
        curves: Vec<Vec<BoundaryPR>>,
    }
    let mut methods: Vec<Method> = Vec::new();
    if predictions.is_some() {
        methods.push(Method {
            name: "fused".into(),
            curves: Vec::new(),
        });
    }
    if with_baselines {
        for name in [
            "single-disparity",
            "single-normals",
            "single-color",
            "data-agnostic",
        ] {
            methods.push(Method {
                name: name.into(),
                curves: Vec::new(),
            });
        }
    }
    if methods.is_empty() {
        return Err(Error::Config(
            "eval needs --predictions and/or --baselines".into(),
        ));
    }

    for entry in &manifest.scenes {
        let name = entry
            .dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let gt_edges = io::read_pfm(&entry.dir.join("edges_gt.pfm"))?;
        let gt_boundary = gt_edges.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });

        let mut edge_maps: Vec<(usize, MultiChannelImage)> = Vec::new();
        let mut mi = 0usize;
        if let Some(pred_dir) = predictions {
            let pred = io::read_pfm(&pred_dir.join(format!("{name}.pfm")))?;
            edge_maps.push((mi, pred));
            mi += 1;
        }
        if with_baselines {
            let color = io::read_ppm(&entry.dir.join("color.ppm"))?;
            let disparity = io::read_pfm(&entry.dir.join("disp_est.pfm"))?;
            let normals = io::read_pfm(&entry.dir.join("normals_est.pfm"))?;
            for mode in [
                BaselineMode::SingleDisparity,
                BaselineMode::SingleNormals,
                BaselineMode::SingleColor,
                BaselineMode::DataAgnostic,
            ] {
                let fused = eval::baseline_fuse(&color, &disparity, &normals, mode)?;
                edge_maps.push((mi, fused.into_image()));
                mi += 1;
            }
        }

        for (method_idx, edges) in edge_maps {
            let hierarchy = hierarchy_for(&edges, cfg)?;
            let curve = eval::pr_curve(&hierarchy, &gt_boundary, &thresholds, cfg.slack_radius)?;
            methods[method_idx].curves.push(curve);
        }
    }

    let mut rows = Vec::new();
    for method in &methods {
        let (ods, ois) = eval::ods_ois(&method.curves)?;
        // Dataset-aggregated PR curve.
        let mut aggregate = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut counts = eval::BoundaryCounts::default();
            for curve in &method.curves {
                counts.add(&curve[ti].counts);
            }
            aggregate.push(BoundaryPR {
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
                threshold: t,
                slack_radius: cfg.slack_radius,
                counts,
            });
        }
        io::write_atomic(
            &out_dir.join(format!("pr_{}.csv", method.name)),
            eval::pr_curve_csv(&aggregate).as_bytes(),
        )?;
        rows.push((method.name.clone(), ods, ois));
    }
    let table = eval::summary_table(&rows);
    io::write_atomic(&out_dir.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
