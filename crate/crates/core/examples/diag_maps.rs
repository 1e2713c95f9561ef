use depth_edges::eval::{self, BaselineMode};
use depth_edges::io;
use depth_edges::segment;
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/pipe/test4/scene_0000");
    let color = io::read_ppm(&dir.join("color.ppm")).unwrap();
    let disp = io::read_pfm(&dir.join("disp_est.pfm")).unwrap();
    let normals = io::read_pfm(&dir.join("normals_est.pfm")).unwrap();
    let pred = io::read_pfm(Path::new("/tmp/pipe/predB/scene_0000.pfm")).unwrap();

    let stats = |name: &str, m: &depth_edges::image::MultiChannelImage| {
        let (lo, hi) = m.min_max();
        let frac = m.data().iter().filter(|&&v| v > 0.5).count() as f64 / m.data().len() as f64;
        let ws = segment::watershed(m).unwrap();
        let h = segment::build_ucm(ws);
        println!("{name}: min {lo:.3} max {hi:.3} frac>0.5 {frac:.3} base_regions {} merges_max {:.3}",
            h.watershed.n_regions, h.merges.last().map(|m| m.strength).unwrap_or(0.0));
    };
    stats("pred (fused)", &pred);
    for (name, mode) in [("disp", BaselineMode::SingleDisparity), ("norm", BaselineMode::SingleNormals), ("color", BaselineMode::SingleColor), ("agnostic", BaselineMode::DataAgnostic)] {
        let fused = eval::baseline_fuse(&color, &disp, &normals, mode).unwrap();
        stats(name, fused.image());
    }
}
