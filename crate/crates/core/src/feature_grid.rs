//! Spatial suppression of scored keypoints on a grid of square cells.
//!
//! The cell side `c` comes from a closed-form expression in the image size and
//! the target point count, floored at 64 px. Each cell is split into an 8×8
//! lattice of nodes whose side equals the suppression radius `r = c / 8`, so a
//! point's Chebyshev `r`-neighbourhood never leaves the 3×3 block of nodes
//! around it. Within a cell at most `quota` (normally 2) points survive.

use crate::textio::{self, ParseError};
use std::cmp::Ordering;
use thiserror::Error;

pub const MIN_CELL_SIDE: f64 = 64.0;
pub const NODES_PER_SIDE: usize = 8;
pub const DEFAULT_CELL_QUOTA: usize = 2;
pub const DEFAULT_TOLERANCE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("target point count {0} is below 2")]
    InvalidTarget(usize),
    #[error("image {width}x{height} is smaller than the 64 px minimum cell")]
    ImageTooSmall { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredKeypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    pub octave: u32,
}

impl ScoredKeypoint {
    pub fn new(x: f64, y: f64, response: f64, octave: u32) -> Self {
        Self {
            x,
            y,
            response,
            octave,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Cell side after the 64 px floor.
    pub cell: f64,
    /// Cell side straight from the closed form, before the floor.
    pub cell_unclamped: f64,
    pub radius: f64,
    /// Point columns `n` and rows `m` implied by the cell side.
    pub cols: usize,
    pub rows: usize,
    pub width: u32,
    pub height: u32,
    pub target: usize,
}

impl GridSpec {
    pub fn cells_x(&self) -> usize {
        (self.width as f64 / self.cell).ceil() as usize
    }

    pub fn cells_y(&self) -> usize {
        (self.height as f64 / self.cell).ceil() as usize
    }

    pub fn cell_count(&self) -> usize {
        self.cells_x() * self.cells_y()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        (
            ((x / self.cell).floor().max(0.0) as usize).min(self.cells_x() - 1),
            ((y / self.cell).floor().max(0.0) as usize).min(self.cells_y() - 1),
        )
    }
}

/// Cell side from the closed form, taking the `+` root.
pub fn closed_form_cell_side(width: f64, height: f64, target: usize) -> Result<f64, GridError> {
    if target < 2 {
        return Err(GridError::InvalidTarget(target));
    }
    let n = target as f64;
    let delta = 16.0 * (n - 1.0) * (width + height + height * width - n + 1.0);
    let a = width + 2.0 * height + 2.0 * n + 2.0;
    let disc = (a * a + delta).sqrt();
    Ok((-2.0 * a + disc) / (2.0 * (n - 1.0)))
}

/// Number of point columns (rows) fitting into `extent` for cell side `c`,
/// from `extent = c + (k - 1)(c/2 + 1)`, before rounding.
pub fn points_along(extent: f64, cell: f64) -> f64 {
    (extent - cell) / (cell / 2.0 + 1.0) + 1.0
}

fn rounded_count(extent: f64, cell: f64) -> usize {
    points_along(extent, cell).round().max(1.0) as usize
}

pub fn compute_grid_spec(width: u32, height: u32, target: usize) -> Result<GridSpec, GridError> {
    if target < 2 {
        return Err(GridError::InvalidTarget(target));
    }
    if (width as f64) < MIN_CELL_SIDE || (height as f64) < MIN_CELL_SIDE {
        return Err(GridError::ImageTooSmall { width, height });
    }
    let raw = closed_form_cell_side(width as f64, height as f64, target)?;
    let cell = if raw.is_finite() { raw.max(MIN_CELL_SIDE) } else { MIN_CELL_SIDE };
    Ok(GridSpec {
        cell,
        cell_unclamped: raw,
        radius: suppression_radius(cell),
        cols: rounded_count(width as f64, cell),
        rows: rounded_count(height as f64, cell),
        width,
        height,
        target,
    })
}

pub fn suppression_radius(cell: f64) -> f64 {
    cell / NODES_PER_SIDE as f64
}

/// Solves `n(c) * m(c) = target` for the continuous cell side by bisection on
/// the column/row relation. Returns `None` when no root lies in `(0, min(W, H)]`.
pub fn cell_side_by_bisection(width: f64, height: f64, target: usize) -> Option<f64> {
    let f = |c: f64| points_along(width, c) * points_along(height, c) - target as f64;
    let mut lo = 1e-9;
    let mut hi = width.min(height);
    if f(lo) < 0.0 || f(hi) > 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Descending response, ties broken by `(y, x, input index)`.
fn rank_order(points: &[ScoredKeypoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| compare_rank(&points[a], a, &points[b], b));
    order
}

pub(crate) fn compare_rank(a: &ScoredKeypoint, ia: usize, b: &ScoredKeypoint, ib: usize) -> Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(ia.cmp(&ib))
}

pub fn suppress(points: &[ScoredKeypoint], spec: &GridSpec) -> Vec<ScoredKeypoint> {
    suppress_with_quota(points, spec, DEFAULT_CELL_QUOTA)
}

pub fn suppress_with_quota(points: &[ScoredKeypoint], spec: &GridSpec, quota: usize) -> Vec<ScoredKeypoint> {
    suppress_indices(points, spec, quota).into_iter().map(|i| points[i]).collect()
}

/// Input indices of the points kept by suppression, in acceptance order.
pub fn suppress_indices(points: &[ScoredKeypoint], spec: &GridSpec, quota: usize) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let r = spec.radius;
    let nodes_x = spec.cells_x() * NODES_PER_SIDE + 1;
    let nodes_y = spec.cells_y() * NODES_PER_SIDE + 1;
    let node_of = |v: f64, limit: usize| ((v / r).floor().max(0.0) as usize).min(limit - 1);
    // accepted points bucketed by node
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); nodes_x * nodes_y];
    let mut per_cell = vec![0usize; spec.cell_count()];
    let mut kept = Vec::new();

    for idx in rank_order(points) {
        let p = &points[idx];
        let (cx, cy) = spec.cell_of(p.x, p.y);
        let cell_slot = cy * spec.cells_x() + cx;
        if per_cell[cell_slot] >= quota {
            continue;
        }
        let (nx, ny) = (node_of(p.x, nodes_x), node_of(p.y, nodes_y));
        let mut blocked = false;
        'scan: for yy in ny.saturating_sub(1)..=(ny + 1).min(nodes_y - 1) {
            for xx in nx.saturating_sub(1)..=(nx + 1).min(nodes_x - 1) {
                for &j in &nodes[yy * nodes_x + xx] {
                    let q = &points[j];
                    if (q.x - p.x).abs().max((q.y - p.y).abs()) <= r {
                        blocked = true;
                        break 'scan;
                    }
                }
            }
        }
        if blocked {
            continue;
        }
        nodes[ny * nodes_x + nx].push(idx);
        per_cell[cell_slot] += 1;
        kept.push(idx);
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub points: Vec<ScoredKeypoint>,
    pub quota: usize,
}

/// Suppression against a target count with a relative tolerance. While the
/// selection falls short of `target * (1 - tolerance)` the per-cell quota is
/// raised by one (up to the 64 nodes of a cell); a selection above
/// `target * (1 + tolerance)` is cut to the `target` strongest points.
pub fn select_with_tolerance(points: &[ScoredKeypoint], spec: &GridSpec, tolerance: f64) -> Selection {
    let target = spec.target as f64;
    let max_quota = NODES_PER_SIDE * NODES_PER_SIDE;
    let mut quota = DEFAULT_CELL_QUOTA;
    let mut selected = suppress_with_quota(points, spec, quota);
    while (selected.len() as f64) < target * (1.0 - tolerance) && quota < max_quota {
        let next = suppress_with_quota(points, spec, quota + 1);
        if next.len() == selected.len() {
            break;
        }
        quota += 1;
        selected = next;
    }
    if selected.len() as f64 > target * (1.0 + tolerance) {
        selected.truncate(spec.target);
    }
    Selection {
        points: selected,
        quota,
    }
}

/// Runs suppression independently per pyramid level. Level `l` has image size
/// `(W, H) / scale^l` (floored at 64 px) and a share of `target` proportional
/// to its area. Keypoint coordinates are in their own level's pixel frame.
pub fn suppress_pyramid(
    points: &[ScoredKeypoint],
    width: u32,
    height: u32,
    target: usize,
    levels: u32,
    scale: f64,
) -> Result<Vec<ScoredKeypoint>, GridError> {
    if target < 2 {
        return Err(GridError::InvalidTarget(target));
    }
    let dims: Vec<(u32, u32)> = (0..levels.max(1))
        .map(|l| {
            let s = scale.powi(l as i32);
            (
                ((width as f64 / s).round() as u32).max(MIN_CELL_SIDE as u32),
                ((height as f64 / s).round() as u32).max(MIN_CELL_SIDE as u32),
            )
        })
        .collect();
    let total_area: f64 = dims.iter().map(|&(w, h)| w as f64 * h as f64).sum();
    let mut out = Vec::new();
    for (level, &(w, h)) in dims.iter().enumerate() {
        let share = ((target as f64 * (w as f64 * h as f64) / total_area).round() as usize).max(2);
        let spec = compute_grid_spec(w, h, share)?;
        let level_points: Vec<ScoredKeypoint> = points
            .iter()
            .filter(|p| p.octave as usize == level)
            .copied()
            .collect();
        out.extend(suppress(&level_points, &spec));
    }
    // points on octaves past the last level pass through untouched
    out.extend(points.iter().filter(|p| p.octave >= levels.max(1)).copied());
    Ok(out)
}

pub fn parse_keypoints(text: &str) -> Result<Vec<ScoredKeypoint>, ParseError> {
    textio::records(text)
        .map(|(line, tokens)| {
            textio::expect_len(line, &tokens, 4, "keypoint")?;
            let v = textio::parse_floats(line, &tokens[..3])?;
            let octave = tokens[3]
                .parse::<u32>()
                .map_err(|_| ParseError::new(line, format!("invalid octave `{}`", tokens[3])))?;
            Ok(ScoredKeypoint::new(v[0], v[1], v[2], octave))
        })
        .collect()
}

pub fn format_keypoints(points: &[ScoredKeypoint]) -> String {
    let mut out = String::from("# x y response octave\n");
    for p in points {
        textio::push_floats(&mut out, &[p.x, p.y, p.response]);
        out.push_str(&format!(" {}\n", p.octave));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic greedy reference: strongest first, accepted if no accepted
    /// point lies within Chebyshev `r` and its cell holds fewer than 2.
    fn greedy_oracle(points: &[ScoredKeypoint], spec: &GridSpec) -> Vec<ScoredKeypoint> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| {
            let (p, q) = (&points[a], &points[b]);
            q.response
                .partial_cmp(&p.response)
                .unwrap()
                .then(p.y.partial_cmp(&q.y).unwrap())
                .then(p.x.partial_cmp(&q.x).unwrap())
                .then(a.cmp(&b))
        });
        let mut accepted: Vec<ScoredKeypoint> = Vec::new();
        for i in idx {
            let p = points[i];
            let cell = ((p.x / spec.cell).floor(), (p.y / spec.cell).floor());
            let in_cell = accepted
                .iter()
                .filter(|q| ((q.x / spec.cell).floor(), (q.y / spec.cell).floor()) == cell)
                .count();
            let near = accepted
                .iter()
                .any(|q| (q.x - p.x).abs() <= spec.radius && (q.y - p.y).abs() <= spec.radius);
            if in_cell < 2 && !near {
                accepted.push(p);
            }
        }
        accepted
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32) -> Vec<ScoredKeypoint> {
        (0..n)
            .map(|_| {
                ScoredKeypoint::new(
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..100.0),
                    0,
                )
            })
            .collect()
    }

    #[test]
    fn radius_is_an_eighth_of_the_cell() {
        assert_eq!(suppression_radius(64.0), 8.0);
        assert_eq!(suppression_radius(80.0), 10.0);
        assert_eq!(suppression_radius(128.0), 16.0);
    }

    #[test]
    fn grid_spec_rejects_small_targets() {
        assert_eq!(compute_grid_spec(640, 480, 1), Err(GridError::InvalidTarget(1)));
        assert_eq!(compute_grid_spec(640, 480, 0), Err(GridError::InvalidTarget(0)));
        assert!(matches!(compute_grid_spec(32, 480, 10), Err(GridError::ImageTooSmall { .. })));
    }

    #[test]
    fn grid_spec_floor_at_minimum_cell() {
        let spec = compute_grid_spec(64, 64, 2).unwrap();
        assert!(spec.cell_unclamped < 64.0);
        assert_eq!(spec.cell, 64.0);
        assert_eq!(spec.radius, 8.0);
        assert_eq!((spec.cols, spec.rows), (1, 1));
    }

    #[test]
    fn closed_form_vs_bisection_vga() {
        // Frozen values: closed form 31.5194, bisection on the row/column relation 32.0925
        let closed = closed_form_cell_side(640.0, 480.0, 1000).unwrap();
        let bisect = cell_side_by_bisection(640.0, 480.0, 1000).unwrap();
        assert!((closed - 31.519_4).abs() < 1e-3, "{closed}");
        assert!((bisect - 32.092_5).abs() < 1e-3, "{bisect}");
        let n = points_along(640.0, bisect) * points_along(480.0, bisect);
        assert!((n - 1000.0).abs() < 1e-6);
        let spec = compute_grid_spec(640, 480, 1000).unwrap();
        assert_eq!(spec.cell, 64.0);
        assert_eq!((spec.cols, spec.rows), (18, 14));
    }

    #[test]
    fn large_cells_for_small_targets() {
        let spec = compute_grid_spec(1280, 720, 20).unwrap();
        assert!(spec.cell > 64.0);
        assert_eq!(spec.radius, spec.cell / 8.0);
    }

    #[test]
    fn single_point_kept() {
        let spec = compute_grid_spec(640, 480, 200).unwrap();
        let p = ScoredKeypoint::new(123.0, 45.0, 1.0, 0);
        assert_eq!(suppress(&[p], &spec), vec![p]);
        assert!(suppress(&[], &spec).is_empty());
    }

    #[test]
    fn radius_dominance_in_one_cell() {
        let spec = compute_grid_spec(640, 480, 200).unwrap();
        assert!(spec.radius > 3.0);
        let strong = ScoredKeypoint::new(10.0, 10.0, 5.0, 0);
        let weak = ScoredKeypoint::new(13.0, 10.0, 4.0, 0);
        assert_eq!(suppress(&[weak, strong], &spec), vec![strong]);
    }

    #[test]
    fn cell_quota_of_two() {
        let spec = compute_grid_spec(640, 480, 200).unwrap();
        let pts = [
            ScoredKeypoint::new(1.0, 1.0, 3.0, 0),
            ScoredKeypoint::new(30.0, 1.0, 2.0, 0),
            ScoredKeypoint::new(60.0, 60.0, 1.0, 0),
        ];
        assert_eq!(suppress(&pts, &spec), vec![pts[0], pts[1]]);
    }

    #[test]
    fn matches_greedy_oracle_on_uniform_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = compute_grid_spec(640, 480, 200).unwrap();
        for _ in 0..20 {
            let pts = random_points(&mut rng, 500, 640, 480);
            assert_eq!(suppress(&pts, &spec), greedy_oracle(&pts, &spec));
        }
    }

    #[test]
    fn tolerance_raises_quota_when_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 3000, 640, 480);
        let spec = compute_grid_spec(640, 480, 300).unwrap();
        let base = suppress(&pts, &spec);
        assert!(base.len() < 300);
        let sel = select_with_tolerance(&pts, &spec, DEFAULT_TOLERANCE);
        assert!(sel.quota > DEFAULT_CELL_QUOTA);
        assert!((sel.points.len() as f64 - 300.0).abs() <= 300.0 * DEFAULT_TOLERANCE);
    }

    #[test]
    fn pyramid_levels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pts = random_points(&mut rng, 200, 640, 480);
        for (i, p) in pts.iter_mut().enumerate() {
            p.octave = (i % 2) as u32;
            p.x /= 1.0 + p.octave as f64 * 0.2;
            p.y /= 1.0 + p.octave as f64 * 0.2;
        }
        let out = suppress_pyramid(&pts, 640, 480, 100, 2, 1.2).unwrap();
        let level0: Vec<_> = pts.iter().filter(|p| p.octave == 0).copied().collect();
        let spec0 = compute_grid_spec(640, 480, 59).unwrap();
        let expect0 = suppress(&level0, &spec0);
        let got0: Vec<_> = out.iter().filter(|p| p.octave == 0).copied().collect();
        assert_eq!(got0, expect0);
    }

    #[test]
    fn keypoint_file_errors_report_line() {
        let err = parse_keypoints("# c\n1 2 3 0\n1 2 x 0\n").unwrap_err();
        assert_eq!(err.line, 3);
        let err = parse_keypoints("1 2 3\n").unwrap_err();
        assert_eq!(err.line, 1);
        let pts = parse_keypoints("1.5 2 3 1 # ok\n").unwrap();
        assert_eq!(pts, vec![ScoredKeypoint::new(1.5, 2.0, 3.0, 1)]);
        assert_eq!(parse_keypoints(&format_keypoints(&pts)).unwrap(), pts);
    }

    fn arb_points() -> impl Strategy<Value = Vec<ScoredKeypoint>> {
        prop::collection::vec(
            (0.0..640.0f64, 0.0..480.0f64, 0.0..10.0f64).prop_map(|(x, y, r)| ScoredKeypoint::new(x, y, r, 0)),
            0..300,
        )
    }

    proptest! {
        #[test]
        fn suppression_invariants(pts in arb_points(), target in 2usize..2000) {
            let spec = compute_grid_spec(640, 480, target).unwrap();
            prop_assert!(spec.cell >= 64.0);
            prop_assert_eq!(spec.radius, spec.cell / 8.0);
            let out = suppress(&pts, &spec);
            prop_assert!(out.len() <= pts.len());
            prop_assert!(out.len() <= 2 * spec.cell_count());
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    if spec.cell_of(a.x, a.y) == spec.cell_of(b.x, b.y) {
                        prop_assert!((a.x - b.x).abs().max((a.y - b.y).abs()) > spec.radius);
                    }
                }
            }
            prop_assert_eq!(suppress(&out, &spec), out.clone());
            let mut reversed = pts.clone();
            reversed.reverse();
            let mut a = suppress(&reversed, &spec);
            let mut b = out;
            let key = |p: &ScoredKeypoint| (p.x.to_bits(), p.y.to_bits(), p.response.to_bits());
            a.sort_by_key(key);
            b.sort_by_key(key);
            prop_assert_eq!(a, b);
        }
    }
}
