//! Hierarchical segmentation from an edge probability map: watershed base
//! regions, boundary arcs, contour strengthening, and an ultrametric contour
//! map built by greedy agglomeration.
//!
//! The watershed floods from minima plateaus in increasing probability order
//! (Meyer's algorithm). Pixels reached by two or more basins form the
//! watershed lines; after flooding the line pixels are absorbed into
//! neighboring regions so every pixel is labeled. Arcs carry the crest pixels
//! of each region interface, a strength (mean crest probability), an arc
//! length and endpoint tangents.
//!
//! Thresholding at `t` applies every merge with strength strictly below `t`,
//! so `t = 0` reproduces the base partition and partitions are nested in `t`
//! by construction.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::image::MultiChannelImage;

/// Boundary arc between two base regions.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryArc {
    /// Base region pair, `regions.0 < regions.1`.
    pub regions: (u32, u32),
    /// Crest pixels of the interface (the higher-probability endpoint of each
    /// boundary crossing).
    pub pixels: Vec<(usize, usize)>,
    /// Mean crest probability over the interface crossings.
    pub strength: f64,
    /// Arc length in pixels.
    pub length: usize,
    /// Up to two `(endpoint, unit tangent)` pairs from least-squares line
    /// fits over the terminal pixels. Closed arcs have none.
    pub endpoints: Vec<((usize, usize), (f64, f64))>,
}

/// Watershed base partition plus its boundary arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct Watershed {
    pub width: usize,
    pub height: usize,
    /// Region label per pixel, `0..n_regions`, every pixel labeled.
    pub labels: Vec<u32>,
    /// Pre-absorption watershed-line pixels.
    pub line_mask: Vec<bool>,
    pub n_regions: usize,
    pub arcs: Vec<BoundaryArc>,
}

/// One agglomeration event; regions are base-region representatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEvent {
    pub region_a: u32,
    pub region_b: u32,
    pub strength: f64,
}

/// Base partition, merge tree, and per-arc cophenetic strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHierarchy {
    pub watershed: Watershed,
    /// Merges ordered by non-decreasing strength; `n_regions - 1` entries.
    pub merges: Vec<MergeEvent>,
    /// Cophenetic strength per arc of `watershed.arcs` (the merge level at
    /// which the arc's two regions first join).
    pub arc_cophenetic: Vec<f64>,
}

const NEIGHBORS4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Monotone bit mapping of a non-negative f32 for heap ordering.
fn prob_key(v: f32) -> u32 {
    debug_assert!(v >= 0.0);
    v.to_bits()
}

/// Opt-in shallow-minima suppression depth for analytically exact maps:
/// pixel aliasing along curved contours carves chains of tiny dips into
/// otherwise solid ridges, each seeding a bead-sized region walled in by
/// full-strength arcs. Suppression also merges regions through any boundary
/// gap shallower than the depth, which destroys soft network outputs, so the
/// default watershed applies none.
pub const ANALYTIC_MINIMA_DEPTH: f64 = 0.05;

/// Reconstruction by erosion of `min(f + h, ...)` over mask `f`: fills every
/// dip shallower than `h`. Alternating causal/anti-causal sweeps until
/// stable.
fn fill_shallow_minima(prob: &MultiChannelImage, h: f32) -> MultiChannelImage {
    let (w, ht) = (prob.width(), prob.height());
    let mut rec = prob.map(|v| v + h);
    loop {
        let mut changed = false;
        // Forward sweep: top-left causal neighbors.
        for y in 0..ht {
            for x in 0..w {
                let mut m = rec.get(x, y, 0);
                if x > 0 {
                    m = m.min(rec.get(x - 1, y, 0));
                }
                if y > 0 {
                    m = m.min(rec.get(x, y - 1, 0));
                }
                let v = m.max(prob.get(x, y, 0));
                if v != rec.get(x, y, 0) {
                    rec.set(x, y, 0, v);
                    changed = true;
                }
            }
        }
        // Backward sweep: bottom-right causal neighbors.
        for y in (0..ht).rev() {
            for x in (0..w).rev() {
                let mut m = rec.get(x, y, 0);
                if x + 1 < w {
                    m = m.min(rec.get(x + 1, y, 0));
                }
                if y + 1 < ht {
                    m = m.min(rec.get(x, y + 1, 0));
                }
                let v = m.max(prob.get(x, y, 0));
                if v != rec.get(x, y, 0) {
                    rec.set(x, y, 0, v);
                    changed = true;
                }
            }
        }
        if !changed {
            return rec;
        }
    }
}

/// Watershed transform of an edge probability map.
pub fn watershed(prob: &MultiChannelImage) -> Result<Watershed> {
    watershed_with_depth(prob, 0.0)
}

/// Watershed with an explicit shallow-minima suppression depth (0 disables).
pub fn watershed_with_depth(prob: &MultiChannelImage, minima_depth: f32) -> Result<Watershed> {
    if prob.channels() != 1 {
        return Err(Error::Shape(format!(
            "watershed expects a single-channel map, got {} channels",
            prob.channels()
        )));
    }
    if !prob.is_probability_map() {
        return Err(Error::Input("watershed input must lie in [0, 1]".into()));
    }
    let (w, h) = (prob.width(), prob.height());
    let npix = w * h;
    const UNLABELED: u32 = u32::MAX;
    let mut labels = vec![UNLABELED; npix];

    // Flooding runs on the shallow-minima-filled map; arc strengths are
    // still measured on the original probabilities.
    let flood = if minima_depth > 0.0 {
        fill_shallow_minima(prob, minima_depth)
    } else {
        prob.clone()
    };

    // Minima plateaus: connected components of equal value with no lower
    // 4-neighbor anywhere on the component.
    let mut n_regions = 0u32;
    let mut visited = vec![false; npix];
    let mut stack = Vec::new();
    for start in 0..npix {
        if visited[start] {
            continue;
        }
        let value = flood.data()[start];
        let mut component = Vec::new();
        let mut is_minimum = true;
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            component.push(p);
            let (x, y) = (p % w, p / w);
            for (dx, dy) in NEIGHBORS4 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                let qv = flood.data()[q];
                if qv < value {
                    is_minimum = false;
                } else if qv == value && !visited[q] {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
        if is_minimum {
            for p in component {
                labels[p] = n_regions;
            }
            n_regions += 1;
        } else {
            for p in component {
                visited[p] = false;
            }
        }
    }

    // Meyer flooding: lowest probability first, FIFO tiebreak.
    let mut heap: BinaryHeap<std::cmp::Reverse<(u32, u64, usize)>> = BinaryHeap::new();
    let mut queued = vec![false; npix];
    let mut seq = 0u64;
    macro_rules! push_neighbors {
        ($p:expr) => {{
            let (x, y) = ($p % w, $p / w);
            for (dx, dy) in NEIGHBORS4 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if labels[q] == UNLABELED && !queued[q] {
                    queued[q] = true;
                    heap.push(std::cmp::Reverse((prob_key(flood.data()[q]), seq, q)));
                    seq += 1;
                }
            }
        }};
    }
    for p in 0..npix {
        if labels[p] != UNLABELED {
            push_neighbors!(p);
        }
    }

    let mut line_mask = vec![false; npix];
    while let Some(std::cmp::Reverse((_, _, p))) = heap.pop() {
        if labels[p] != UNLABELED || line_mask[p] {
            continue;
        }
        let (x, y) = (p % w, p / w);
        let mut neighbor_label = UNLABELED;
        let mut multiple = false;
        for (dx, dy) in NEIGHBORS4 {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let l = labels[ny as usize * w + nx as usize];
            if l != UNLABELED {
                if neighbor_label == UNLABELED {
                    neighbor_label = l;
                } else if l != neighbor_label {
                    multiple = true;
                }
            }
        }
        if multiple {
            line_mask[p] = true;
        } else if neighbor_label != UNLABELED {
            labels[p] = neighbor_label;
            push_neighbors!(p);
        }
    }
    // Pixels enclosed entirely by lines never flood; fold them into the line
    // set.
    for p in 0..npix {
        if labels[p] == UNLABELED && !line_mask[p] {
            line_mask[p] = true;
        }
    }

    // Absorb line pixels into neighboring regions, wave by wave; batch
    // application keeps the result deterministic.
    loop {
        let mut assignments = Vec::new();
        for p in 0..npix {
            if labels[p] != UNLABELED {
                continue;
            }
            let (x, y) = (p % w, p / w);
            for (dx, dy) in NEIGHBORS4 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if labels[q] != UNLABELED {
                    assignments.push((p, labels[q]));
                    break;
                }
            }
        }
        if assignments.is_empty() {
            break;
        }
        for (p, l) in assignments {
            labels[p] = l;
        }
    }

    let arcs = build_arcs(prob, &labels, w, h);
    Ok(Watershed {
        width: w,
        height: h,
        labels,
        line_mask,
        n_regions: n_regions as usize,
        arcs,
    })
}

/// Extracts a boundary arc for every 4-adjacent region pair of the label map.
/// The crest pixel of a crossing is the endpoint with higher probability
/// (ties break toward the smaller linear index).
fn build_arcs(prob: &MultiChannelImage, labels: &[u32], w: usize, h: usize) -> Vec<BoundaryArc> {
    struct ArcAccum {
        pixels: Vec<(usize, usize)>,
        seen: BTreeSet<usize>,
        crest_sum: f64,
        crossings: usize,
    }
    let mut accum: BTreeMap<(u32, u32), ArcAccum> = BTreeMap::new();
    let mut visit = |pa: usize, qa: usize| {
        let (la, lb) = (labels[pa], labels[qa]);
        if la == lb {
            return;
        }
        let key = (la.min(lb), la.max(lb));
        let (va, vb) = (prob.data()[pa], prob.data()[qa]);
        let crest = if vb > va || (vb == va && qa < pa) { qa } else { pa };
        let entry = accum.entry(key).or_insert_with(|| ArcAccum {
            pixels: Vec::new(),
            seen: BTreeSet::new(),
            crest_sum: 0.0,
            crossings: 0,
        });
        entry.crest_sum += va.max(vb) as f64;
        entry.crossings += 1;
        if entry.seen.insert(crest) {
            entry.pixels.push((crest % w, crest / w));
        }
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                visit(p, p + 1);
            }
            if y + 1 < h {
                visit(p, p + w);
            }
        }
    }

    accum
        .into_iter()
        .map(|((a, b), acc)| {
            let length = acc.pixels.len();
            let endpoints = arc_endpoints(&acc.pixels);
            BoundaryArc {
                regions: (a, b),
                strength: acc.crest_sum / acc.crossings as f64,
                pixels: acc.pixels,
                length,
                endpoints,
            }
        })
        .collect()
}

/// Endpoints of an arc pixel set (pixels with at most one 8-neighbor in the
/// set) with unit tangents. Closed arcs have no endpoints.
fn arc_endpoints(pixels: &[(usize, usize)]) -> Vec<((usize, usize), (f64, f64))> {
    if pixels.len() < 2 {
        return Vec::new();
    }
    let set: BTreeSet<(usize, usize)> = pixels.iter().copied().collect();
    let mut endpoints = Vec::new();
    for &(x, y) in pixels {
        let mut neighbors = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && set.contains(&(nx as usize, ny as usize)) {
                    neighbors += 1;
                }
            }
        }
        if neighbors <= 1 {
            endpoints.push((x, y));
        }
        if endpoints.len() == 2 {
            break;
        }
    }
    endpoints
        .into_iter()
        .map(|e| (e, tangent_near(pixels, e)))
        .collect()
}

/// Principal direction of the 5 arc pixels nearest to `at` (least-squares
/// line fit direction).
fn tangent_near(pixels: &[(usize, usize)], at: (usize, usize)) -> (f64, f64) {
    let mut by_dist: Vec<&(usize, usize)> = pixels.iter().collect();
    by_dist.sort_by_key(|&&(x, y)| {
        let dx = x as isize - at.0 as isize;
        let dy = y as isize - at.1 as isize;
        (dx * dx + dy * dy, y, x)
    });
    let take: Vec<(f64, f64)> = by_dist
        .iter()
        .take(5)
        .map(|&&(x, y)| (x as f64, y as f64))
        .collect();
    let n = take.len() as f64;
    let mx = take.iter().map(|p| p.0).sum::<f64>() / n;
    let my = take.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &take {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (angle.cos(), angle.sin())
}

/// How the strengthening formula updates arc strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrengthenMode {
    /// `w' = w * (1 + max_j ...)`: the boost is a multiplicative factor.
    Factor,
    /// `w' = 1 + max_j ...` taken literally as the updated strength.
    Direct,
}

/// Contour strengthening configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthenConfig {
    pub mode: StrengthenMode,
    /// Arc-length logistic saturation point as a fraction of the image width.
    pub length_saturation: f64,
    /// Logistic sharpness of the arc-length saturation.
    pub length_sharpness: f64,
    /// Chebyshev distance within which an arc endpoint connects to another
    /// arc.
    pub connection_radius: usize,
}

impl Default for StrengthenConfig {
    fn default() -> Self {
        StrengthenConfig {
            mode: StrengthenMode::Factor,
            length_saturation: 0.7,
            length_sharpness: 10.0,
            connection_radius: 2,
        }
    }
}

fn length_sigma(length: f64, image_width: f64, cfg: &StrengthenConfig) -> f64 {
    let center = cfg.length_saturation * image_width;
    1.0 / (1.0 + (-cfg.length_sharpness * (length / center - 1.0)).exp())
}

/// Boost `1 + max_j |cos| * max(1, 0.5 (w_j / w_i) sqrt(s_i s_j))` over
/// connected stronger arcs; 1 when no such arc exists.
fn strengthen_boost(
    strength: f64,
    sigma_i: f64,
    candidates: &[(f64, f64, f64)], // (w_j, sigma(l_j), |cos angle|)
) -> f64 {
    let mut best = 0.0f64;
    for &(wj, sigma_j, cos) in candidates {
        if wj <= strength {
            continue;
        }
        let term = cos * (0.5 * (wj / strength) * (sigma_i * sigma_j).sqrt()).max(1.0);
        best = best.max(term);
    }
    1.0 + best
}

/// Strengthens arcs that smoothly continue stronger arcs, processing
/// coarse-to-fine (descending strength), then rescales strengths into [0, 1].
/// No arc's pre-rescaling strength decreases.
pub fn strengthen_arc_strengths(
    arcs: &[BoundaryArc],
    image_width: usize,
    cfg: &StrengthenConfig,
) -> Vec<f64> {
    let mut strengths = strengthen_arc_strengths_raw(arcs, image_width, cfg);
    // Strengths must stay valid probabilities for the UCM; only shrink when
    // the boosts pushed past 1.
    let max = strengths.iter().cloned().fold(0.0f64, f64::max);
    if max > 1.0 {
        for s in &mut strengths {
            *s /= max;
        }
    }
    strengths
}

/// The strengthening pass before rescaling; every returned strength is at
/// least the arc's original strength.
pub fn strengthen_arc_strengths_raw(
    arcs: &[BoundaryArc],
    image_width: usize,
    cfg: &StrengthenConfig,
) -> Vec<f64> {
    let n = arcs.len();
    let mut strengths: Vec<f64> = arcs.iter().map(|a| a.strength).collect();
    if n == 0 {
        return strengths;
    }
    let sigmas: Vec<f64> = arcs
        .iter()
        .map(|a| length_sigma(a.length as f64, image_width as f64, cfg))
        .collect();

    // Connectivity: an endpoint of arc i within Chebyshev radius of any pixel
    // of arc j; the tangent of j is fitted at its pixels nearest the contact.
    let mut connections: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let r = cfg.connection_radius as isize;
    for i in 0..n {
        for &(endpoint, tangent_i) in &arcs[i].endpoints {
            for (j, other) in arcs.iter().enumerate() {
                if i == j {
                    continue;
                }
                let near = other.pixels.iter().any(|&(x, y)| {
                    (x as isize - endpoint.0 as isize).abs() <= r
                        && (y as isize - endpoint.1 as isize).abs() <= r
                });
                if !near {
                    continue;
                }
                let tangent_j = tangent_near(&other.pixels, endpoint);
                let cos = (tangent_i.0 * tangent_j.0 + tangent_i.1 * tangent_j.1).abs();
                connections[i].push((j, cos));
            }
        }
    }

    // Descending original strength; comparisons see updated values of the
    // already-processed (stronger) arcs.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| arcs[b].strength.total_cmp(&arcs[a].strength).then(a.cmp(&b)));
    for &i in &order {
        if strengths[i] <= 0.0 {
            continue;
        }
        let candidates: Vec<(f64, f64, f64)> = connections[i]
            .iter()
            .map(|&(j, cos)| (strengths[j], sigmas[j], cos))
            .collect();
        let boost = strengthen_boost(strengths[i], sigmas[i], &candidates);
        strengths[i] = match cfg.mode {
            StrengthenMode::Factor => strengths[i] * boost,
            StrengthenMode::Direct => boost,
        };
    }
    strengths
}

/// Applies [`strengthen_arc_strengths`] to the hierarchy's arcs and rebuilds
/// the merge tree (which re-establishes monotonicity).
pub fn strengthen_contours(
    hierarchy: &SegmentationHierarchy,
    cfg: &StrengthenConfig,
) -> SegmentationHierarchy {
    let mut ws = hierarchy.watershed.clone();
    let strengths = strengthen_arc_strengths(&ws.arcs, ws.width, cfg);
    for (arc, s) in ws.arcs.iter_mut().zip(strengths) {
        arc.strength = s;
    }
    build_ucm(ws)
}

/// Greedy agglomeration by ascending arc strength. When two regions merge,
/// their arcs to a common neighbor combine with crossing-count-weighted
/// strengths. Selecting the global minimum each step makes the merge sequence
/// non-decreasing and the cophenetic distances ultrametric.
pub fn build_ucm(watershed: Watershed) -> SegmentationHierarchy {
    struct WorkArc {
        weight_sum: f64, // strength * crossings
        crossings: f64,
        base_ids: Vec<usize>,
        alive: bool,
        version: u32,
    }

    let n = watershed.n_regions;
    let mut merges = Vec::new();
    let mut arc_cophenetic = vec![0.0f64; watershed.arcs.len()];
    if n <= 1 {
        return SegmentationHierarchy {
            watershed,
            merges,
            arc_cophenetic,
        };
    }

    let mut work: Vec<WorkArc> = Vec::new();
    // Per-cluster adjacency, keyed by the neighbor's current representative.
    let mut adj: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n];
    // Heap entries: (strength bits, endpoint reps at push time, id, version).
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, u32, u32, usize, u32)>> = BinaryHeap::new();

    for (bi, arc) in watershed.arcs.iter().enumerate() {
        let (a, b) = arc.regions;
        let crossings = arc.pixels.len().max(1) as f64;
        let id = work.len();
        work.push(WorkArc {
            weight_sum: arc.strength * crossings,
            crossings,
            base_ids: vec![bi],
            alive: true,
            version: 0,
        });
        adj[a as usize].insert(b, id);
        adj[b as usize].insert(a, id);
        heap.push(std::cmp::Reverse((arc.strength.to_bits(), a, b, id, 0)));
    }

    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], x: u32) -> u32 {
        let mut root = x;
        while parent[root as usize] != root {
            root = parent[root as usize];
        }
        let mut cur = x;
        while parent[cur as usize] != root {
            let next = parent[cur as usize];
            parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    let mut merges_done = 0usize;
    while merges_done + 1 < n {
        let std::cmp::Reverse((_, a0, b0, id, version)) =
            heap.pop().expect("arc graph stays connected");
        if !work[id].alive || work[id].version != version {
            continue;
        }
        let ra = find(&mut parent, a0);
        let rb = find(&mut parent, b0);
        debug_assert_ne!(ra, rb, "live arc connects distinct clusters");
        let strength = work[id].weight_sum / work[id].crossings;
        work[id].alive = false;
        for &bi in &work[id].base_ids {
            arc_cophenetic[bi] = strength;
        }
        merges.push(MergeEvent {
            region_a: ra.min(rb),
            region_b: ra.max(rb),
            strength,
        });
        merges_done += 1;

        let keep = ra.min(rb);
        let gone = ra.max(rb);
        parent[gone as usize] = keep;
        adj[keep as usize].remove(&gone);

        let gone_adj = std::mem::take(&mut adj[gone as usize]);
        for (nb, arc_id) in gone_adj {
            if arc_id == id || !work[arc_id].alive {
                continue;
            }
            debug_assert_eq!(find(&mut parent, nb), nb, "adjacency keys stay current");
            adj[nb as usize].remove(&gone);
            if let Some(&existing) = adj[keep as usize].get(&nb) {
                // Parallel arcs combine: crossing-weighted strength.
                let (ws2, cr2, ids2) = {
                    let wa = &mut work[arc_id];
                    wa.alive = false;
                    (wa.weight_sum, wa.crossings, std::mem::take(&mut wa.base_ids))
                };
                let ex = &mut work[existing];
                ex.weight_sum += ws2;
                ex.crossings += cr2;
                ex.base_ids.extend(ids2);
                ex.version += 1;
                let s = ex.weight_sum / ex.crossings;
                heap.push(std::cmp::Reverse((s.to_bits(), keep, nb, existing, ex.version)));
            } else {
                adj[keep as usize].insert(nb, arc_id);
                adj[nb as usize].insert(keep, arc_id);
                let wa = &mut work[arc_id];
                wa.version += 1;
                let s = wa.weight_sum / wa.crossings;
                heap.push(std::cmp::Reverse((s.to_bits(), keep, nb, arc_id, wa.version)));
            }
        }
    }

    // Monotonicity repair: running maximum along the merge order (the greedy
    // minimum already guarantees this; the repair is idempotent).
    let mut running = 0.0f64;
    for m in &mut merges {
        running = running.max(m.strength);
        m.strength = running;
    }

    SegmentationHierarchy {
        watershed,
        merges,
        arc_cophenetic,
    }
}

impl SegmentationHierarchy {
    /// Partition after applying all merges with strength strictly below `t`.
    /// Labels are renumbered consecutively in raster order of first
    /// appearance.
    pub fn threshold_segmentation(&self, t: f64) -> Vec<u32> {
        let n = self.watershed.n_regions;
        let mut parent: Vec<u32> = (0..n as u32).collect();
        fn find(parent: &mut [u32], x: u32) -> u32 {
            let mut root = x;
            while parent[root as usize] != root {
                root = parent[root as usize];
            }
            let mut cur = x;
            while parent[cur as usize] != root {
                let next = parent[cur as usize];
                parent[cur as usize] = root;
                cur = next;
            }
            root
        }
        for m in &self.merges {
            if m.strength < t {
                let (ra, rb) = (find(&mut parent, m.region_a), find(&mut parent, m.region_b));
                if ra != rb {
                    parent[ra.max(rb) as usize] = ra.min(rb);
                }
            }
        }
        let mut renumber: BTreeMap<u32, u32> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.watershed.labels.len());
        for &base in &self.watershed.labels {
            let rep = find(&mut parent, base);
            let next = renumber.len() as u32;
            let label = *renumber.entry(rep).or_insert(next);
            out.push(label);
        }
        out
    }

    /// Number of distinct regions at threshold `t`.
    pub fn region_count_at(&self, t: f64) -> usize {
        let labels = self.threshold_segmentation(t);
        labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// Cophenetic strength of two base regions: the level of the merge that
    /// first joins them.
    pub fn cophenetic(&self, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        let n = self.watershed.n_regions;
        let mut parent: Vec<u32> = (0..n as u32).collect();
        fn find(parent: &mut [u32], x: u32) -> u32 {
            let mut root = x;
            while parent[root as usize] != root {
                root = parent[root as usize];
            }
            root
        }
        for m in &self.merges {
            let (ra, rb) = (find(&mut parent, m.region_a), find(&mut parent, m.region_b));
            if ra != rb {
                parent[ra.max(rb) as usize] = ra.min(rb);
            }
            if find(&mut parent, a) == find(&mut parent, b) {
                return m.strength;
            }
        }
        f64::INFINITY
    }

    /// Ultrametric contour map raster: each arc pixel carries the cophenetic
    /// strength of its separation. This is the pixel-grid projection used for
    /// file output and overlays; where arcs share a junction pixel the
    /// maximum wins.
    pub fn ucm_raster(&self) -> MultiChannelImage {
        let ws = &self.watershed;
        let mut out = MultiChannelImage::new(ws.width, ws.height, 1);
        for (arc, &c) in ws.arcs.iter().zip(&self.arc_cophenetic) {
            for &(x, y) in &arc.pixels {
                let prev = out.get(x, y, 0);
                out.set(x, y, 0, prev.max(c as f32));
            }
        }
        out
    }

    /// Crack-grid UCM of size `(2w+1) x (2h+1)`: pixel `(x, y)` maps to cell
    /// `(2x+1, 2y+1)` and the cell between two 4-adjacent pixels carries the
    /// cophenetic strength of their regions' separation. Every boundary
    /// crossing owns its own cell, so thresholding this raster reconstructs
    /// [`Self::threshold_segmentation`] exactly.
    pub fn ucm_crack_raster(&self) -> MultiChannelImage {
        let ws = &self.watershed;
        let (w, h) = (ws.width, ws.height);
        let coph: BTreeMap<(u32, u32), f64> = ws
            .arcs
            .iter()
            .zip(&self.arc_cophenetic)
            .map(|(arc, &c)| (arc.regions, c))
            .collect();
        let mut out = MultiChannelImage::new(2 * w + 1, 2 * h + 1, 1);
        let mut fill = |cx: usize, cy: usize, a: u32, b: u32| {
            if a != b {
                let key = (a.min(b), a.max(b));
                let v = *coph.get(&key).expect("adjacent pair has an arc") as f32;
                out.set(cx, cy, 0, v);
            }
        };
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    fill(2 * x + 2, 2 * y + 1, ws.labels[p], ws.labels[p + 1]);
                }
                if y + 1 < h {
                    fill(2 * x + 1, 2 * y + 2, ws.labels[p], ws.labels[p + w]);
                }
            }
        }
        // Junction corners take the maximum of their incident crack cells so
        // rendered lines stay visually connected.
        for cy in (0..=2 * h).step_by(2) {
            for cx in (0..=2 * w).step_by(2) {
                let mut v = 0.0f32;
                for (dx, dy) in NEIGHBORS4 {
                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                    if nx >= 0 && ny >= 0 && nx <= 2 * w as isize && ny <= 2 * h as isize {
                        v = v.max(out.get(nx as usize, ny as usize, 0));
                    }
                }
                out.set(cx, cy, 0, v);
            }
        }
        out
    }
}

/// 1-px boundary map of a label image: a pixel is marked when its right or
/// down neighbor carries a different label.
pub fn boundary_map(labels: &[u32], width: usize, height: usize) -> MultiChannelImage {
    let mut out = MultiChannelImage::new(width, height, 1);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let boundary = (x + 1 < width && labels[p] != labels[p + 1])
                || (y + 1 < height && labels[p] != labels[p + width]);
            if boundary {
                out.set(x, y, 0, 1.0);
            }
        }
    }
    out
}

/// Serializes the merge tree as `merge region_a region_b strength` lines.
pub fn merge_tree_text(hierarchy: &SegmentationHierarchy) -> String {
    let mut out = String::new();
    for m in &hierarchy.merges {
        out.push_str(&format!(
            "merge {} {} {}\n",
            m.region_a, m.region_b, m.strength
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_map(size: usize, strength: f32, inner: f64, outer: f64) -> MultiChannelImage {
        let c = size as f64 / 2.0;
        MultiChannelImage::from_fn(size, size, 1, |x, y, _| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if d >= inner && d <= outer {
                strength
            } else {
                0.0
            }
        })
    }

    #[test]
    fn uniform_zero_map_is_single_region() {
        let ws = watershed(&MultiChannelImage::new(12, 9, 1)).unwrap();
        assert_eq!(ws.n_regions, 1);
        assert!(ws.arcs.is_empty());
        assert!(ws.labels.iter().all(|&l| l == 0));
        assert!(ws.line_mask.iter().all(|&m| !m));
    }

    #[test]
    fn closed_ring_gives_two_regions_one_arc() {
        let map = ring_map(21, 0.9, 5.0, 6.5);
        let ws = watershed(&map).unwrap();
        assert_eq!(ws.n_regions, 2);
        assert_eq!(ws.arcs.len(), 1);
        let arc = &ws.arcs[0];
        assert!(
            (arc.strength - 0.9).abs() < 1e-6,
            "arc strength {}",
            arc.strength
        );
        assert!(arc.endpoints.is_empty(), "closed contour has no endpoints");
    }

    /// Independent flood fill of the complement of the line mask.
    fn flood_fill_oracle(ws: &Watershed) -> (usize, BTreeSet<(u32, u32)>) {
        let (w, h) = (ws.width, ws.height);
        let mut comp = vec![u32::MAX; w * h];
        let mut n = 0u32;
        for start in 0..w * h {
            if ws.line_mask[start] || comp[start] != u32::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = n;
            while let Some(p) = stack.pop() {
                let (x, y) = (p % w, p / w);
                for (dx, dy) in NEIGHBORS4 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !ws.line_mask[q] && comp[q] == u32::MAX {
                        comp[q] = n;
                        stack.push(q);
                    }
                }
            }
            n += 1;
        }
        let mut pairs = BTreeSet::new();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)]
                    .into_iter()
                    .flatten()
                {
                    let (a, b) = (ws.labels[p], ws.labels[q]);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        (n as usize, pairs)
    }

    #[test]
    fn watershed_matches_flood_fill_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            // Quantized random maps produce plateaus and rich topology.
            let map = MultiChannelImage::from_fn(16, 16, 1, |_, _, _| {
                (rng.random_range(0..6) as f32) / 5.0
            });
            let ws = watershed(&map).unwrap();
            let (n_oracle, adj_oracle) = flood_fill_oracle(&ws);
            assert_eq!(ws.n_regions, n_oracle, "trial {trial}: region count");
            let arc_pairs: BTreeSet<(u32, u32)> = ws.arcs.iter().map(|a| a.regions).collect();
            assert_eq!(arc_pairs, adj_oracle, "trial {trial}: adjacency");
            assert!(ws.labels.iter().all(|&l| (l as usize) < ws.n_regions));
        }
    }

    #[test]
    fn nested_rings_threshold_walkthrough() {
        // Inner ring 0.4, outer ring 0.8: 3 base regions; thresholds inside
        // the three bands give 3, 2, 1 regions.
        let size = 33;
        let c = size as f64 / 2.0;
        let map = MultiChannelImage::from_fn(size, size, 1, |x, y, _| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if (5.0..=6.5).contains(&d) {
                0.4
            } else if (11.0..=12.5).contains(&d) {
                0.8
            } else {
                0.0
            }
        });
        let ws = watershed(&map).unwrap();
        assert_eq!(ws.n_regions, 3);
        let h = build_ucm(ws);
        assert_eq!(h.region_count_at(0.2), 3);
        assert_eq!(h.region_count_at(0.6), 2);
        assert_eq!(h.region_count_at(0.95), 1);
        assert_eq!(h.region_count_at(0.0), 3, "t=0 is the base partition");
        let above_max = h.merges.last().unwrap().strength + 0.01;
        assert_eq!(h.region_count_at(above_max), 1);
    }

    #[test]
    fn single_region_has_empty_merge_tree() {
        let h = build_ucm(watershed(&MultiChannelImage::new(8, 8, 1)).unwrap());
        assert!(h.merges.is_empty());
        assert_eq!(h.region_count_at(0.5), 1);
    }

    fn random_hierarchy(seed: u64, size: usize) -> SegmentationHierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = MultiChannelImage::from_fn(size, size, 1, |_, _, _| {
            (rng.random_range(0..8) as f32) / 7.0
        });
        build_ucm(watershed(&map).unwrap())
    }

    #[test]
    fn merge_strengths_are_non_decreasing_and_ultrametric() {
        for seed in 0..10u64 {
            let h = random_hierarchy(seed, 14);
            assert_eq!(h.merges.len() + 1, h.watershed.n_regions);
            for pair in h.merges.windows(2) {
                assert!(pair[0].strength <= pair[1].strength);
            }
            let n = h.watershed.n_regions as u32;
            if n < 3 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..40 {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                let c = rng.random_range(0..n);
                if a == b || b == c || a == c {
                    continue;
                }
                let dab = h.cophenetic(a, b);
                let dbc = h.cophenetic(b, c);
                let dac = h.cophenetic(a, c);
                assert!(
                    dac <= dab.max(dbc) + 1e-12,
                    "ultrametric violated: {dac} > max({dab}, {dbc})"
                );
            }
        }
    }

    #[test]
    fn thresholded_partitions_are_nested() {
        for seed in 0..5u64 {
            let h = random_hierarchy(seed, 14);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
            let mut ts: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.1)).collect();
            ts.sort_by(f64::total_cmp);
            for pair in ts.windows(2) {
                let fine = h.threshold_segmentation(pair[0]);
                let coarse = h.threshold_segmentation(pair[1]);
                let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
                for (f, c) in fine.iter().zip(&coarse) {
                    match mapping.get(f) {
                        Some(&expect) => assert_eq!(expect, *c, "nesting violated"),
                        None => {
                            mapping.insert(*f, *c);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ucm_raster_reconstructs_threshold_partitions() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = MultiChannelImage::from_fn(14, 14, 1, |_, _, _| {
                (rng.random_range(0..8) as f32) / 7.0
            });
            let h = build_ucm(watershed(&map).unwrap());
            let ucm = h.ucm_crack_raster();
            let ws = &h.watershed;

            for t in [0.05, 0.3, 0.55, 0.8, 1.05] {
                let expect = h.threshold_segmentation(t);
                // Reconstruct from the crack raster: merge two adjacent
                // pixels when the crack cell between them falls below t.
                let npix = ws.width * ws.height;
                let mut parent: Vec<u32> = (0..npix as u32).collect();
                fn find(parent: &mut [u32], x: u32) -> u32 {
                    let mut r = x;
                    while parent[r as usize] != r {
                        r = parent[r as usize];
                    }
                    r
                }
                let union = |parent: &mut Vec<u32>, a: u32, b: u32| {
                    let (ra, rb) = (find(parent, a), find(parent, b));
                    if ra != rb {
                        parent[ra.max(rb) as usize] = ra.min(rb);
                    }
                };
                for y in 0..ws.height {
                    for x in 0..ws.width {
                        let p = y * ws.width + x;
                        if x + 1 < ws.width
                            && (ucm.get(2 * x + 2, 2 * y + 1, 0) as f64) < t
                        {
                            union(&mut parent, p as u32, (p + 1) as u32);
                        }
                        if y + 1 < ws.height
                            && (ucm.get(2 * x + 1, 2 * y + 2, 0) as f64) < t
                        {
                            union(&mut parent, p as u32, (p + ws.width) as u32);
                        }
                    }
                }
                // Compare partitions up to relabeling (bijective mapping).
                let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
                let mut bwd: BTreeMap<u32, u32> = BTreeMap::new();
                for p in 0..npix {
                    let a = expect[p];
                    let b = find(&mut parent, p as u32);
                    match fwd.get(&a) {
                        Some(&e) => assert_eq!(e, b, "seed {seed} t {t}: partition mismatch"),
                        None => {
                            fwd.insert(a, b);
                        }
                    }
                    match bwd.get(&b) {
                        Some(&e) => assert_eq!(e, a, "seed {seed} t {t}: partition mismatch"),
                        None => {
                            bwd.insert(b, a);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn strengthen_boost_hand_cases() {
        // Isolated arc: boost 1.
        assert_eq!(strengthen_boost(0.4, 1.0, &[]), 1.0);
        // Tangential continuation of a stronger saturated arc: boost 2.
        let b = strengthen_boost(0.4, 1.0, &[(0.8, 1.0, 1.0)]);
        assert!((b - 2.0).abs() < 1e-12, "boost {b}");
        // Perpendicular connection: the cosine kills the term.
        assert_eq!(strengthen_boost(0.4, 1.0, &[(0.8, 1.0, 0.0)]), 1.0);
        // Weaker neighbors never qualify.
        assert_eq!(strengthen_boost(0.4, 1.0, &[(0.3, 1.0, 1.0)]), 1.0);
    }

    #[test]
    fn strengthen_never_reduces_pre_rescale_strength() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = MultiChannelImage::from_fn(20, 20, 1, |_, _, _| {
                (rng.random_range(0..6) as f32) / 5.0
            });
            let ws = watershed(&map).unwrap();
            let cfg = StrengthenConfig::default();
            let raw = strengthen_arc_strengths_raw(&ws.arcs, 20, &cfg);
            for (arc, s) in ws.arcs.iter().zip(&raw) {
                assert!(
                    *s >= arc.strength - 1e-12,
                    "strength reduced: {} -> {}",
                    arc.strength,
                    s
                );
            }
            let rescaled = strengthen_arc_strengths(&ws.arcs, 20, &cfg);
            for s in &rescaled {
                assert!((0.0..=1.0 + 1e-12).contains(s));
            }
        }
    }

    #[test]
    fn strengthened_hierarchy_stays_consistent() {
        let h = random_hierarchy(3, 16);
        let boosted = strengthen_contours(&h, &StrengthenConfig::default());
        assert_eq!(boosted.merges.len(), h.merges.len());
        for pair in boosted.merges.windows(2) {
            assert!(pair[0].strength <= pair[1].strength);
        }
        // Direct mode also yields valid probabilities.
        let direct = strengthen_contours(
            &h,
            &StrengthenConfig {
                mode: StrengthenMode::Direct,
                ..StrengthenConfig::default()
            },
        );
        for arc in &direct.watershed.arcs {
            assert!((0.0..=1.0 + 1e-12).contains(&arc.strength));
        }
    }

    #[test]
    fn boundary_map_marks_interfaces_once() {
        let labels = vec![0, 0, 1, 0, 0, 1, 2, 2, 1];
        let bm = boundary_map(&labels, 3, 3);
        assert_eq!(bm.get(0, 0, 0), 0.0);
        assert_eq!(bm.get(1, 0, 0), 1.0);
        assert_eq!(bm.get(0, 1, 0), 1.0);
        assert_eq!(bm.get(2, 2, 0), 0.0);
    }

    #[test]
    fn merge_tree_text_format() {
        let h = random_hierarchy(1, 10);
        let text = merge_tree_text(&h);
        for (line, m) in text.lines().zip(&h.merges) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(parts[0], "merge");
            assert_eq!(parts[1].parse::<u32>().unwrap(), m.region_a);
            assert_eq!(parts[2].parse::<u32>().unwrap(), m.region_b);
            assert!((parts[3].parse::<f64>().unwrap() - m.strength).abs() < 1e-12);
        }
    }
}
