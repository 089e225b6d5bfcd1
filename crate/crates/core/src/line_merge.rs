//! Hough-space merging of broken collinear segments.
//!
//! Segments live in a frame whose origin is the image center. Each one is
//! mapped to `(rho, theta)` through its slope/intercept and a quadrant table on
//! the signs of `(k, b)`; segments whose Hough points are close are clustered by
//! transitive closure and every cluster is replaced by the span of its
//! endpoints along an orthogonal least-squares fit.

use crate::textio::{self, ParseError};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Below this horizontal extent a segment is treated as vertical (pixels).
pub const VERTICAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineError {
    #[error("segment is vertical (|x1 - x2| <= {VERTICAL_EPS})")]
    VerticalLine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Segment2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn length(&self) -> f64 {
        (self.x2 - self.x1).hypot(self.y2 - self.y1)
    }

    /// Shifts corner-origin pixel coordinates to the center-origin frame.
    pub fn from_corner_origin(&self, width: f64, height: f64) -> Self {
        let (ox, oy) = (width / 2.0, height / 2.0);
        Self::new(self.x1 - ox, self.y1 - oy, self.x2 - ox, self.y2 - oy)
    }

    pub fn to_corner_origin(&self, width: f64, height: f64) -> Self {
        let (ox, oy) = (width / 2.0, height / 2.0);
        Self::new(self.x1 + ox, self.y1 + oy, self.x2 + ox, self.y2 + oy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughLine {
    pub rho: f64,
    pub theta: f64,
}

/// Thresholds of the merge predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeTolerances {
    /// Relative `rho` tolerance (fraction of `|rho|`).
    pub rho_fraction: f64,
    /// Lower bound on the `|rho|` used by the relative test (pixels).
    pub rho_floor: f64,
    /// Angular tolerance (radians).
    pub theta: f64,
}

impl Default for MergeTolerances {
    fn default() -> Self {
        Self {
            rho_fraction: 0.01,
            rho_floor: 1.0,
            theta: PI / 180.0,
        }
    }
}

pub fn slope_intercept(seg: &Segment2D) -> Result<(f64, f64), LineError> {
    let dx = seg.x1 - seg.x2;
    if dx.abs() <= VERTICAL_EPS {
        return Err(LineError::VerticalLine);
    }
    let k = (seg.y1 - seg.y2) / dx;
    Ok((k, seg.y1 - k * seg.x1))
}

pub fn to_hough(seg: &Segment2D) -> HoughLine {
    let theta = match slope_intercept(seg) {
        Err(LineError::VerticalLine) => {
            if seg.x1 >= 0.0 {
                0.0
            } else {
                PI
            }
        }
        Ok((k, b)) => {
            if k == 0.0 {
                if b >= 0.0 {
                    PI / 2.0
                } else {
                    3.0 * PI / 2.0
                }
            } else {
                let a = (1.0 / k).atan();
                match (k < 0.0, b >= 0.0) {
                    (true, true) => -a,
                    (false, true) => PI - a,
                    (true, false) => PI - a,
                    (false, false) => TAU - a,
                }
            }
        }
    };
    let theta = wrap_angle(theta);
    HoughLine {
        rho: seg.x1 * theta.cos() + seg.y1 * theta.sin(),
        theta,
    }
}

fn wrap_angle(t: f64) -> f64 {
    let w = t.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Smallest absolute difference between two angles.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn close_in_hough(a: &HoughLine, b: &HoughLine, tol: &MergeTolerances) -> bool {
    let test = |rho_b: f64, theta_b: f64| {
        let scale = a.rho.abs().max(rho_b.abs()).max(tol.rho_floor);
        (a.rho - rho_b).abs() < tol.rho_fraction * scale && angle_gap(a.theta, theta_b) < tol.theta
    };
    // (rho, theta) and (-rho, theta + pi) describe the same line
    test(b.rho, b.theta) || test(-b.rho, b.theta + PI)
}

/// True when two segments fall into the same Hough neighbourhood.
pub fn mergeable(a: &Segment2D, b: &Segment2D, tol: &MergeTolerances) -> bool {
    close_in_hough(&to_hough(a), &to_hough(b), tol)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Groups segment indices into clusters (transitive closure of the pairwise
/// test). Clusters are listed by smallest member index, members ascending.
pub fn cluster_segments(segs: &[Segment2D], tol: &MergeTolerances) -> Vec<Vec<usize>> {
    let hough: Vec<HoughLine> = segs.iter().map(to_hough).collect();
    // Sweep over theta: only pairs within the angular window can match.
    // The antipodal representation is covered by also sweeping theta + pi.
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(2 * segs.len());
    for (i, h) in hough.iter().enumerate() {
        keyed.push((h.theta, i));
        keyed.push((wrap_angle(h.theta + PI), i));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = keyed.len();
    let mut sets = DisjointSet::new(segs.len());
    for s in 0..n {
        let (t0, i) = keyed[s];
        for step in 1..n {
            let (t1, j) = keyed[(s + step) % n];
            let gap = if s + step < n { t1 - t0 } else { t1 + TAU - t0 };
            if gap >= tol.theta {
                break;
            }
            if i != j && close_in_hough(&hough[i], &hough[j], tol) {
                sets.union(i, j);
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..segs.len() {
        let r = sets.find(i);
        by_root.entry(r).or_default().push(i);
    }
    by_root.into_values().collect()
}

/// Orthogonal regression over a point set: returns `(centroid, unit direction)`.
pub fn fit_line_tls(points: &[(f64, f64)]) -> ((f64, f64), (f64, f64)) {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x / n, sy + y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // principal axis angle of the 2×2 scatter matrix
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    ((mx, my), (angle.cos(), angle.sin()))
}

/// Replaces a cluster by one segment spanning the extreme projections of its
/// endpoints onto the fitted line, oriented like the cluster's first member.
pub fn merge_cluster(segs: &[Segment2D]) -> Segment2D {
    if segs.len() == 1 {
        return segs[0];
    }
    let pts: Vec<(f64, f64)> = segs.iter().flat_map(|s| [(s.x1, s.y1), (s.x2, s.y2)]).collect();
    let ((mx, my), (mut dx, mut dy)) = fit_line_tls(&pts);
    let first = &segs[0];
    if dx * (first.x2 - first.x1) + dy * (first.y2 - first.y1) < 0.0 {
        dx = -dx;
        dy = -dy;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        let t = (x - mx) * dx + (y - my) * dy;
        lo = lo.min(t);
        hi = hi.max(t);
    }
    Segment2D::new(mx + lo * dx, my + lo * dy, mx + hi * dx, my + hi * dy)
}

/// A merged segment together with the input indices it replaces.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedSegment {
    pub segment: Segment2D,
    pub members: Vec<usize>,
}

/// Clusters, refits, and repeats on the refitted segments until a pass merges
/// nothing, so the output is stable under another call. A refit can move a
/// merged segment within tolerance of a neighbour that none of its pieces
/// matched; each refit spans all original members of the group.
pub fn merge_segments_detailed(segs: &[Segment2D], tol: &MergeTolerances) -> Vec<MergedSegment> {
    let refit = |members: Vec<usize>| {
        let cluster: Vec<Segment2D> = members.iter().map(|&i| segs[i]).collect();
        MergedSegment { segment: merge_cluster(&cluster), members }
    };
    let mut groups: Vec<MergedSegment> = cluster_segments(segs, tol).into_iter().map(refit).collect();
    loop {
        let current: Vec<Segment2D> = groups.iter().map(|g| g.segment).collect();
        let clusters = cluster_segments(&current, tol);
        if clusters.len() == groups.len() {
            break;
        }
        groups = clusters
            .into_iter()
            .map(|c| {
                let mut members: Vec<usize> = c.iter().flat_map(|&g| groups[g].members.iter().copied()).collect();
                members.sort_unstable();
                refit(members)
            })
            .collect();
    }
    let mut out: Vec<(HoughLine, MergedSegment)> = groups.into_iter().map(|m| (to_hough(&m.segment), m)).collect();
    out.sort_by(|(ha, a), (hb, b)| {
        ha.theta
            .total_cmp(&hb.theta)
            .then(ha.rho.total_cmp(&hb.rho))
            .then(a.members[0].cmp(&b.members[0]))
    });
    out.into_iter().map(|(_, m)| m).collect()
}

pub fn merge_segments(segs: &[Segment2D], tol: &MergeTolerances) -> Vec<Segment2D> {
    merge_segments_detailed(segs, tol)
        .into_iter()
        .map(|m| m.segment)
        .collect()
}

pub fn parse_segments(text: &str) -> Result<Vec<Segment2D>, ParseError> {
    textio::records(text)
        .map(|(line, tokens)| {
            textio::expect_len(line, &tokens, 4, "segment")?;
            let v = textio::parse_floats(line, &tokens)?;
            let seg = Segment2D::new(v[0], v[1], v[2], v[3]);
            if seg.length() <= 1e-9 {
                return Err(ParseError::new(line, "segment endpoints coincide"));
            }
            Ok(seg)
        })
        .collect()
}

pub fn format_segments(segs: &[Segment2D]) -> String {
    let mut out = String::from("# x1 y1 x2 y2 (image-center origin)\n");
    for s in segs {
        textio::push_floats(&mut out, &[s.x1, s.y1, s.x2, s.y2]);
        out.push('\n');
    }
    out
}
