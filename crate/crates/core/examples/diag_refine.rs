use depth_edges::net;
use depth_edges::refine::{self, RefineConfig};
use depth_edges::scene::{self, CorruptionSpec};
use depth_edges::image::MultiChannelImage;

fn band_rmse(est: &MultiChannelImage, gt: &MultiChannelImage, contour: &MultiChannelImage, band: i64, inside: bool) -> f64 {
    let (w, h) = (gt.width(), gt.height());
    let mut sq = 0.0; let mut n = 0usize;
    for y in 0..h { for x in 0..w {
        let mut near = false;
        'scan: for dy in -band..=band { for dx in -band..=band {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && contour.get(nx as usize, ny as usize, 0) > 0.5 { near = true; break 'scan; }
        }}
        if near == inside {
            let e = est.get(x, y, 0) as f64 - gt.get(x, y, 0) as f64;
            sq += e * e; n += 1;
        }
    }}
    (sq / n.max(1) as f64).sqrt()
}

fn main() {
    let mut total_before = (0.0, 0.0);
    let mut total_after = (0.0, 0.0);
    for seed in 0..8u64 {
        let spec = scene::random_scene(7000 + seed, 128, 128);
        let rendered = scene::render(&spec).unwrap();
        let est = scene::corrupt(&rendered, &CorruptionSpec::default(), 555 + seed).unwrap();
        // GT contours + directions from clean disparity
        let mask = MultiChannelImage::splat(128, 128, 1, 1.0);
        let (target, _) = net::make_contour_direction_target(&rendered.disparity, &mask).unwrap();
        let timg = target.to_image();
        let contour = timg.extract_channel(0);
        let dirs = MultiChannelImage::from_fn(128, 128, 2, |x, y, c| timg.get(x, y, c + 1));
        let result = refine::multiscale_refine(&est.disparity, &contour, &dirs, 3, &RefineConfig::default()).unwrap();

        let rb_before = band_rmse(&est.disparity, &rendered.disparity, &rendered.contour_mask, 4, true);
        let rb_after = band_rmse(&result.disparity, &rendered.disparity, &rendered.contour_mask, 4, true);
        let ro_before = band_rmse(&est.disparity, &rendered.disparity, &rendered.contour_mask, 4, false);
        let ro_after = band_rmse(&result.disparity, &rendered.disparity, &rendered.contour_mask, 4, false);
        println!("seed {seed}: band {rb_before:.3} -> {rb_after:.3} ({:+.1}%), off {ro_before:.3} -> {ro_after:.3} ({:+.1}%)",
            100.0 * (rb_after / rb_before - 1.0), 100.0 * (ro_after / ro_before - 1.0));
        total_before.0 += rb_before; total_after.0 += rb_after;
        total_before.1 += ro_before; total_after.1 += ro_after;
    }
    println!("MEAN band: {:.3} -> {:.3} ({:+.1}%)", total_before.0 / 8.0, total_after.0 / 8.0, 100.0 * (total_after.0 / total_before.0 - 1.0));
    println!("MEAN off:  {:.3} -> {:.3} ({:+.1}%)", total_before.1 / 8.0, total_after.1 / 8.0, 100.0 * (total_after.1 / total_before.1 - 1.0));
}
