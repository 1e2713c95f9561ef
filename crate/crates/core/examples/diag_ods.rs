use depth_edges::eval::{self, BaselineMode};
use depth_edges::io;
use depth_edges::scene::DatasetManifest;
use depth_edges::segment;
use std::path::Path;

fn ods(maps: &[(depth_edges::image::MultiChannelImage, depth_edges::image::MultiChannelImage)], depth: f32) -> f64 {
    let thresholds = eval::uniform_thresholds(33);
    let curves: Vec<Vec<eval::BoundaryPR>> = maps.iter().map(|(pred, gtb)| {
        let ws = segment::watershed_with_depth(pred, depth).unwrap();
        let h = segment::build_ucm(ws);
        let h = segment::strengthen_contours(&h, &segment::StrengthenConfig::default());
        eval::pr_curve(&h, gtb, &thresholds, 2).unwrap()
    }).collect();
    eval::ods_ois(&curves).unwrap().0
}

fn main() {
    let ds = std::env::var("DIAG_DS").unwrap_or_else(|_| "/tmp/pipe/test4".into());
    let pred_dir = std::env::var("DIAG_PRED").unwrap_or_else(|_| "/tmp/pipe/predB".into());
    let manifest = DatasetManifest::load(Path::new(&ds)).unwrap();
    let mut fused = vec![];
    let mut agnostic = vec![];
    let mut sdisp = vec![];
    let mut snorm = vec![];
    for e in &manifest.scenes {
        let name = e.dir.file_name().unwrap().to_string_lossy().into_owned();
        let gtb = io::read_pfm(&e.dir.join("edges_gt.pfm")).unwrap().map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let pred = io::read_pfm(Path::new(&format!("{pred_dir}/{name}.pfm"))).unwrap();
        let color = io::read_ppm(&e.dir.join("color.ppm")).unwrap();
        let disp = io::read_pfm(&e.dir.join("disp_est.pfm")).unwrap();
        let normals = io::read_pfm(&e.dir.join("normals_est.pfm")).unwrap();
        agnostic.push((eval::baseline_fuse(&color, &disp, &normals, BaselineMode::DataAgnostic).unwrap().into_image(), gtb.clone()));
        sdisp.push((eval::baseline_fuse(&color, &disp, &normals, BaselineMode::SingleDisparity).unwrap().into_image(), gtb.clone()));
        snorm.push((eval::baseline_fuse(&color, &disp, &normals, BaselineMode::SingleNormals).unwrap().into_image(), gtb.clone()));
        fused.push((pred, gtb));
    }
    for depth in [0.0f32] {
        println!("h={depth}: fused {:.4} agnostic {:.4} sdisp {:.4} snorm {:.4}",
                 ods(&fused, depth), ods(&agnostic, depth), ods(&sdisp, depth), ods(&snorm, depth));
    }
}
