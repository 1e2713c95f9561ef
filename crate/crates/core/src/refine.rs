//! Edge-constrained disparity refinement.
//!
//! Near depth contours the directional derivative of the disparity is
//! soft-constrained to exceed a minimum change `c` along the estimated edge
//! direction; away from contours both gradient components are pulled to zero;
//! a proximity term keeps the result near the initial estimate. The
//! nonnegative slack of the constraint is eliminated in closed form, which
//! turns the problem into a smooth convex one-sided (hinge-squared) penalty:
//!
//! `f(x) = sum_p [w1_p max(0, c_p - (d_u Gu x + d_v Gv x)_p)]^2
//!       + sum_p [w2_p (Gu x)_p]^2 + [w2_p (Gv x)_p]^2 + mu ||x - x0||^2`
//!
//! with `w1 = P_e` at contour pixels (zero below a cutoff) and `w2 = 1 - P_e`.
//! Fixing the hinge's active set makes `f` quadratic; each Gauss-Newton pass
//! solves that quadratic with conjugate gradients and backtracks so the true
//! objective never increases. `f` is convex piecewise quadratic, so this
//! reaches the global minimizer.

use crate::error::{Error, Result};
use crate::image::{self, FilterSpec, MultiChannelImage, ResampleDirection};

/// Compressed sparse row matrix, just enough for the gradient operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row entry lists.
    pub fn from_rows(rows: usize, cols: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(entries.len(), rows);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in entries {
            for (c, v) in row {
                debug_assert!(c < cols);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    pub fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for r in 0..self.rows {
            let v = y[r];
            if v == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * v;
            }
        }
    }

    /// Entries of one row, for tests and dense assembly.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| (self.col_idx[k], self.values[k]))
    }
}

/// Forward-difference gradient operators over a flattened `width x height`
/// image: one `-1/+1` pair per pixel with a forward neighbor, zero rows on
/// the far boundary.
pub fn build_gradient_operators(
    width: usize,
    height: usize,
) -> Result<(SparseMatrix, SparseMatrix)> {
    if width * height < 2 {
        return Err(Error::Shape(format!(
            "gradient operators need at least 2 pixels, got {width}x{height}"
        )));
    }
    let n = width * height;
    let mut gu_rows = Vec::with_capacity(n);
    let mut gv_rows = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                gu_rows.push(vec![(p, -1.0), (p + 1, 1.0)]);
            } else {
                gu_rows.push(Vec::new());
            }
            if y + 1 < height {
                gv_rows.push(vec![(p, -1.0), (p + width, 1.0)]);
            } else {
                gv_rows.push(Vec::new());
            }
        }
    }
    Ok((
        SparseMatrix::from_rows(n, n, gu_rows),
        SparseMatrix::from_rows(n, n, gv_rows),
    ))
}

/// Solver knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Proximity weight to the initial disparity.
    pub mu: f64,
    /// Contour probabilities below this are excluded from the edge term.
    pub edge_cutoff: f64,
    /// Gauss-Newton iteration budget per solve.
    pub max_gauss_newton: usize,
    /// Relative conjugate-gradient tolerance.
    pub cg_tolerance: f64,
    /// Conjugate-gradient iteration cap per solve (0 = ten times the pixel
    /// count).
    pub cg_max_iterations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            mu: 0.05,
            edge_cutoff: 0.1,
            max_gauss_newton: 15,
            cg_tolerance: 1e-8,
            cg_max_iterations: 0,
        }
    }
}

/// Fully assembled refinement problem over flattened vectors.
pub struct RefinementProblem {
    pub width: usize,
    pub height: usize,
    /// Proximity anchor (the initial disparity).
    pub initial: Vec<f64>,
    /// Edge-term weight per pixel (contour probability, zeroed below the
    /// cutoff).
    pub edge_weight: Vec<f64>,
    /// Gradient-suppression weight per pixel (`1 - P_e`).
    pub smooth_weight: Vec<f64>,
    pub dir_u: Vec<f64>,
    pub dir_v: Vec<f64>,
    pub min_change: Vec<f64>,
    pub mu: f64,
    pub gu: SparseMatrix,
    pub gv: SparseMatrix,
    pub config: RefineConfig,
}

impl RefinementProblem {
    /// Builds a problem from image-shaped inputs: single-channel disparity,
    /// contour probability and minimum-change maps, and a 2-channel unit
    /// direction field.
    pub fn new(
        initial: &MultiChannelImage,
        contour: &MultiChannelImage,
        directions: &MultiChannelImage,
        min_change: &MultiChannelImage,
        config: RefineConfig,
    ) -> Result<Self> {
        let (w, h) = (initial.width(), initial.height());
        if initial.channels() != 1 || contour.channels() != 1 || min_change.channels() != 1 {
            return Err(Error::Shape(
                "disparity, contour and min-change images must be single-channel".into(),
            ));
        }
        if directions.channels() != 2 {
            return Err(Error::Shape(format!(
                "direction field needs 2 channels, got {}",
                directions.channels()
            )));
        }
        for (name, iw, ih) in [
            ("contour", contour.width(), contour.height()),
            ("directions", directions.width(), directions.height()),
            ("min-change", min_change.width(), min_change.height()),
        ] {
            if iw != w || ih != h {
                return Err(Error::Shape(format!(
                    "{name} is {iw}x{ih}, expected {w}x{h}"
                )));
            }
        }
        if config.mu <= 0.0 {
            return Err(Error::Config("mu must be positive".into()));
        }
        let (gu, gv) = build_gradient_operators(w, h)?;
        let n = w * h;
        let mut edge_weight = Vec::with_capacity(n);
        let mut smooth_weight = Vec::with_capacity(n);
        let mut dir_u = Vec::with_capacity(n);
        let mut dir_v = Vec::with_capacity(n);
        let mut minc = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let p = contour.get(x, y, 0) as f64;
                edge_weight.push(if p >= config.edge_cutoff { p } else { 0.0 });
                smooth_weight.push(1.0 - p);
                dir_u.push(directions.get(x, y, 0) as f64);
                dir_v.push(directions.get(x, y, 1) as f64);
                minc.push((min_change.get(x, y, 0) as f64).max(0.0));
            }
        }
        Ok(RefinementProblem {
            width: w,
            height: h,
            initial: initial.data().iter().map(|&v| v as f64).collect(),
            edge_weight,
            smooth_weight,
            dir_u,
            dir_v,
            min_change: minc,
            mu: config.mu,
            gu,
            gv,
            config,
        })
    }

    /// Directional derivative `d_u Gu x + d_v Gv x`.
    fn directional(&self, x: &[f64], gu_x: &mut [f64], gv_x: &mut [f64], out: &mut [f64]) {
        self.gu.apply(x, gu_x);
        self.gv.apply(x, gv_x);
        for p in 0..out.len() {
            out[p] = self.dir_u[p] * gu_x[p] + self.dir_v[p] * gv_x[p];
        }
    }

    /// The convex objective with the slack eliminated.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut gu_x = vec![0.0; n];
        let mut gv_x = vec![0.0; n];
        let mut dd = vec![0.0; n];
        self.directional(x, &mut gu_x, &mut gv_x, &mut dd);
        let mut f = 0.0;
        for p in 0..n {
            if self.edge_weight[p] > 0.0 {
                let hinge = (self.min_change[p] - dd[p]).max(0.0);
                let r = self.edge_weight[p] * hinge;
                f += r * r;
            }
            let ru = self.smooth_weight[p] * gu_x[p];
            let rv = self.smooth_weight[p] * gv_x[p];
            f += ru * ru + rv * rv;
            let d = x[p] - self.initial[p];
            f += self.mu * d * d;
        }
        f
    }
}

/// Refinement output.
pub struct RefineResult {
    pub disparity: MultiChannelImage,
    /// False when the Gauss-Newton budget ran out before the iterates
    /// stabilized; the best iterate is still returned.
    pub converged: bool,
    /// Objective after each Gauss-Newton iteration, starting with the value
    /// at the initial iterate.
    pub objectives: Vec<f64>,
}

/// Minimizes the refinement objective starting from the initial disparity.
pub fn refine(problem: &RefinementProblem) -> Result<RefineResult> {
    refine_seeded(problem, problem.initial.clone())
}

/// Gauss-Newton with conjugate-gradient inner solves from an explicit
/// starting iterate. The proximity term still anchors to
/// `problem.initial`.
pub fn refine_seeded(problem: &RefinementProblem, start: Vec<f64>) -> Result<RefineResult> {
    let n = problem.initial.len();
    let mut x = start;
    let mut objectives = vec![problem.objective(&x)];
    let mut converged = false;

    let mut gu_x = vec![0.0; n];
    let mut gv_x = vec![0.0; n];
    let mut dd = vec![0.0; n];
    let mut active = vec![false; n];
    let mut active_initialized = false;

    for _ in 0..problem.config.max_gauss_newton {
        problem.directional(&x, &mut gu_x, &mut gv_x, &mut dd);
        let mut changed = !active_initialized;
        active_initialized = true;
        for p in 0..n {
            let a = problem.edge_weight[p] > 0.0 && problem.min_change[p] - dd[p] > 0.0;
            if a != active[p] {
                changed = true;
            }
            active[p] = a;
        }
        let f_now = *objectives.last().expect("seeded");

        // Fixed-active-set quadratic, solved by CG from the current iterate.
        let z = solve_quadratic(problem, &active, &x)?;

        // Backtracking keeps the exact objective non-increasing even when the
        // step leaves the active set's validity region.
        let mut alpha = 1.0;
        let mut best = f_now;
        let mut accepted = false;
        let mut trial = vec![0.0; n];
        for _ in 0..40 {
            for p in 0..n {
                trial[p] = x[p] + alpha * (z[p] - x[p]);
            }
            let f_trial = problem.objective(&trial);
            if f_trial <= best {
                best = f_trial;
                x.copy_from_slice(&trial);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        objectives.push(best);

        let improved = f_now - best > 1e-14 * f_now.max(1.0);
        if !improved && !changed {
            converged = true;
            break;
        }
        if !accepted && !changed {
            converged = true;
            break;
        }
    }

    let disparity = MultiChannelImage::from_vec(
        problem.width,
        problem.height,
        1,
        x.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(RefineResult {
        disparity,
        converged,
        objectives,
    })
}

/// Solves `H z = rhs` for the quadratic with the given hinge active set:
/// `H = Ad^T W1^2 Ad + Gu^T W2^2 Gu + Gv^T W2^2 Gv + mu I`,
/// `rhs = Ad^T W1^2 c + mu x0`. Strictly positive definite because `mu > 0`.
fn solve_quadratic(
    problem: &RefinementProblem,
    active: &[bool],
    x_start: &[f64],
) -> Result<Vec<f64>> {
    let n = x_start.len();
    let w1sq: Vec<f64> = problem
        .edge_weight
        .iter()
        .zip(active)
        .map(|(&w, &a)| if a { w * w } else { 0.0 })
        .collect();
    let w2sq: Vec<f64> = problem.smooth_weight.iter().map(|&w| w * w).collect();

    let mut gu_v = vec![0.0; n];
    let mut gv_v = vec![0.0; n];
    let mut scratch_a = vec![0.0; n];
    let mut scratch_b = vec![0.0; n];
    let mut apply = |v: &[f64], out: &mut [f64]| {
        problem.gu.apply(v, &mut gu_v);
        problem.gv.apply(v, &mut gv_v);
        out.fill(0.0);
        // Edge term: Ad^T W1^2 Ad v.
        for p in 0..n {
            scratch_a[p] = w1sq[p] * (problem.dir_u[p] * gu_v[p] + problem.dir_v[p] * gv_v[p]);
        }
        let weighted_u: Vec<f64> = (0..n).map(|p| problem.dir_u[p] * scratch_a[p]).collect();
        problem.gu.apply_transpose(&weighted_u, &mut scratch_b);
        for p in 0..n {
            out[p] += scratch_b[p];
        }
        let weighted_v: Vec<f64> = (0..n).map(|p| problem.dir_v[p] * scratch_a[p]).collect();
        problem.gv.apply_transpose(&weighted_v, &mut scratch_b);
        for p in 0..n {
            out[p] += scratch_b[p];
        }
        // Smoothness terms.
        for p in 0..n {
            scratch_a[p] = w2sq[p] * gu_v[p];
        }
        problem.gu.apply_transpose(&scratch_a, &mut scratch_b);
        for p in 0..n {
            out[p] += scratch_b[p];
        }
        for p in 0..n {
            scratch_a[p] = w2sq[p] * gv_v[p];
        }
        problem.gv.apply_transpose(&scratch_a, &mut scratch_b);
        for p in 0..n {
            out[p] += scratch_b[p] + problem.mu * v[p];
        }
    };

    // rhs = Ad^T W1^2 c + mu x0.
    let mut rhs = vec![0.0; n];
    {
        let wc: Vec<f64> = (0..n).map(|p| w1sq[p] * problem.min_change[p]).collect();
        let cu: Vec<f64> = (0..n).map(|p| problem.dir_u[p] * wc[p]).collect();
        let cv: Vec<f64> = (0..n).map(|p| problem.dir_v[p] * wc[p]).collect();
        let mut tu = vec![0.0; n];
        let mut tv = vec![0.0; n];
        problem.gu.apply_transpose(&cu, &mut tu);
        problem.gv.apply_transpose(&cv, &mut tv);
        for p in 0..n {
            rhs[p] = tu[p] + tv[p] + problem.mu * problem.initial[p];
        }
    }

    // Conjugate gradients from the current iterate.
    let mut z = x_start.to_vec();
    let mut hz = vec![0.0; n];
    apply(&z, &mut hz);
    let mut r: Vec<f64> = rhs.iter().zip(&hz).map(|(b, h)| b - h).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let b_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = problem.config.cg_tolerance * b_norm.max(1e-30);
    let max_iters = if problem.config.cg_max_iterations == 0 {
        10 * n
    } else {
        problem.config.cg_max_iterations
    };
    let mut hp = vec![0.0; n];
    for _ in 0..max_iters {
        if rr.sqrt() <= tol {
            break;
        }
        apply(&p, &mut hp);
        let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
        if php <= 0.0 {
            return Err(Error::Numeric(
                "refinement normal equations lost positive definiteness".into(),
            ));
        }
        let alpha = rr / php;
        for i in 0..n {
            z[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(z)
}

/// Default integration window for [`choose_c`], in pixels.
pub const DEFAULT_C_WINDOW: f64 = 5.0;
/// Default pre-smoothing sigma for [`choose_c`].
pub const DEFAULT_C_SIGMA: f64 = 1.0;

/// Per-pixel minimum directional change: the change of the Gaussian-smoothed
/// initial disparity integrated over `window` pixels along the edge
/// direction, clamped nonnegative. Zero wherever the direction is undefined.
pub fn choose_c(
    initial: &MultiChannelImage,
    directions: &MultiChannelImage,
    window: f64,
    smoothing_sigma: f64,
) -> Result<MultiChannelImage> {
    if initial.channels() != 1 || directions.channels() != 2 {
        return Err(Error::Shape(
            "choose_c expects single-channel disparity and a 2-channel direction field".into(),
        ));
    }
    let smoothed = if smoothing_sigma > 0.0 {
        image::filter(
            initial,
            &FilterSpec::Gaussian {
                sigma: smoothing_sigma,
            },
        )?
    } else {
        initial.clone()
    };
    let (w, h) = (initial.width(), initial.height());
    let half = window / 2.0;
    let mut out = MultiChannelImage::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let du = directions.get(x, y, 0) as f64;
            let dv = directions.get(x, y, 1) as f64;
            if du * du + dv * dv < 1e-12 {
                continue;
            }
            let ahead = smoothed.sample_bilinear(x as f64 + half * du, y as f64 + half * dv, 0);
            let behind = smoothed.sample_bilinear(x as f64 - half * du, y as f64 - half * dv, 0);
            out.set(x, y, 0, (ahead - behind).max(0.0) as f32);
        }
    }
    Ok(out)
}

/// Per-level report from [`multiscale_refine`].
pub struct LevelReport {
    pub width: usize,
    pub height: usize,
    pub objectives: Vec<f64>,
    pub converged: bool,
}

pub struct MultiscaleResult {
    pub disparity: MultiChannelImage,
    /// Coarsest level first.
    pub levels: Vec<LevelReport>,
}

/// Coarse-to-fine refinement on a factor-2 pyramid. Disparities halve when
/// downsampled; each level starts from the upsampled coarser solution
/// (values doubled) while anchoring its proximity term to its own downsampled
/// initial disparity. `mu` halves per coarser level so the edge and
/// smoothness terms dominate the coarse structure.
pub fn multiscale_refine(
    initial: &MultiChannelImage,
    contour: &MultiChannelImage,
    directions: &MultiChannelImage,
    levels: usize,
    config: &RefineConfig,
) -> Result<MultiscaleResult> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }

    // Pyramids, finest first.
    let mut disp_pyr = vec![initial.clone()];
    let mut contour_pyr = vec![contour.clone()];
    let mut dir_pyr = vec![directions.clone()];
    for l in 1..levels {
        let prev = &disp_pyr[l - 1];
        if prev.width() < 4 || prev.height() < 4 {
            return Err(Error::Shape(format!(
                "image too small for a {levels}-level pyramid"
            )));
        }
        disp_pyr.push(image::resample(prev, ResampleDirection::Down)?.map(|v| v * 0.5));
        contour_pyr.push(image::resample(&contour_pyr[l - 1], ResampleDirection::Down)?);
        let mut dirs = image::resample(&dir_pyr[l - 1], ResampleDirection::Down)?;
        renormalize_direction_field(&mut dirs);
        dir_pyr.push(dirs);
    }

    let mut reports = Vec::with_capacity(levels);
    let mut solution: Option<MultiChannelImage> = None;
    for l in (0..levels).rev() {
        let level_cfg = RefineConfig {
            mu: config.mu / (1 << l) as f64,
            ..config.clone()
        };
        let c = choose_c(&disp_pyr[l], &dir_pyr[l], DEFAULT_C_WINDOW, DEFAULT_C_SIGMA)?;
        let problem =
            RefinementProblem::new(&disp_pyr[l], &contour_pyr[l], &dir_pyr[l], &c, level_cfg)?;
        let start = match solution.take() {
            Some(coarse) => {
                let up = image::resample(&coarse, ResampleDirection::Up)?.map(|v| v * 2.0);
                let up = crop_to(&up, disp_pyr[l].width(), disp_pyr[l].height());
                up.data().iter().map(|&v| v as f64).collect()
            }
            None => problem.initial.clone(),
        };
        let result = refine_seeded(&problem, start)?;
        reports.push(LevelReport {
            width: disp_pyr[l].width(),
            height: disp_pyr[l].height(),
            objectives: result.objectives,
            converged: result.converged,
        });
        solution = Some(result.disparity);
    }

    Ok(MultiscaleResult {
        disparity: solution.expect("at least one level"),
        levels: reports,
    })
}

fn renormalize_direction_field(dirs: &mut MultiChannelImage) {
    for y in 0..dirs.height() {
        for x in 0..dirs.width() {
            let du = dirs.get(x, y, 0) as f64;
            let dv = dirs.get(x, y, 1) as f64;
            let norm = (du * du + dv * dv).sqrt();
            if norm > 1e-9 {
                dirs.set(x, y, 0, (du / norm) as f32);
                dirs.set(x, y, 1, (dv / norm) as f32);
            }
        }
    }
}

fn crop_to(img: &MultiChannelImage, w: usize, h: usize) -> MultiChannelImage {
    if img.width() == w && img.height() == h {
        return img.clone();
    }
    MultiChannelImage::from_fn(w, h, img.channels(), |x, y, c| img.get(x, y, c))
}
