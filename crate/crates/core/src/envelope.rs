//! Least concave majorants of grid fields and the Hyers-Ulam witness.

use robust::orient2d;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Field1d, ScalarField};
use crate::hull::{c2, convex_hull_3d, upper_hull_1d, P3};

/// Default audit constant `K` for `distance <= K delta`.
pub const DEFAULT_AUDIT_K: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct EnvelopeResult<F> {
    pub envelope: F,
    /// Max over nodes of `envelope - f` (a witness distance, not the optimal one).
    pub distance: f64,
    pub delta: f64,
    /// `distance / delta`; NaN when `delta = 0`.
    pub ratio: f64,
    pub facets: usize,
    pub audit_k: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub witness_distance: f64,
    pub delta: f64,
    pub ratio: Option<f64>,
    pub facets: usize,
    pub audit_k: f64,
    pub consistent: bool,
}

impl<F> EnvelopeResult<F> {
    pub fn summary(&self) -> EnvelopeSummary {
        EnvelopeSummary {
            witness_distance: self.distance,
            delta: self.delta,
            ratio: self.ratio.is_finite().then_some(self.ratio),
            facets: self.facets,
            audit_k: self.audit_k,
            consistent: self.consistent,
        }
    }

    fn with_delta(mut self, delta: f64, k: f64) -> Self {
        self.delta = delta;
        self.ratio = if delta > 0.0 { self.distance / delta } else { f64::NAN };
        self.audit_k = k;
        self.consistent = self.distance <= k * delta + 1e-10;
        self
    }
}

/// Upper hull of the graph of `f` over its interior nodes, evaluated back
/// at every node.
pub fn concave_envelope(f: &ScalarField) -> Result<EnvelopeResult<ScalarField>> {
    let grid = f.grid();
    let nodes = grid.interior_nodes();
    if nodes.len() < 2 {
        return Err(Error::DegenerateHull(format!("{} nodes", nodes.len())));
    }
    let mut pts: Vec<P3> = nodes
        .iter()
        .map(|&k| {
            let p = grid.node_point(k);
            [p[0], p[1], f.values()[k]]
        })
        .collect();
    let zmin = pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let zmax = pts.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    // a floor under the 2D hull vertices makes the solid full-dimensional
    let base = zmin - (zmax - zmin + 1.0);
    let xy: Vec<[f64; 2]> = pts.iter().map(|p| [p[0], p[1]]).collect();
    for i in convex_hull_2d(&xy) {
        pts.push([xy[i][0], xy[i][1], base]);
    }
    let m = nodes.len();
    let faces = convex_hull_3d(&pts)?;
    let upper: Vec<[usize; 3]> = faces
        .into_iter()
        .filter(|v| {
            v.iter().all(|&i| i < m)
                && orient2d(c2(xy[v[0]]), c2(xy[v[1]]), c2(xy[v[2]])) > 0.0
        })
        .collect();

    // locate every node in the projection of some upper facet
    let h = grid.h();
    let ext = grid.extents();
    let index_of = |x: f64, lo: f64| (x - lo) / h;
    let mut env = vec![f64::NEG_INFINITY; grid.nx() * grid.ny()];
    for v in &upper {
        let (a, b, c) = (xy[v[0]], xy[v[1]], xy[v[2]]);
        let area = orient2d(c2(a), c2(b), c2(c));
        let i_lo = index_of(a[0].min(b[0]).min(c[0]), ext[0]).floor().max(0.0) as usize;
        let i_hi = (index_of(a[0].max(b[0]).max(c[0]), ext[0]).ceil() as usize).min(grid.nx() - 1);
        let j_lo = index_of(a[1].min(b[1]).min(c[1]), ext[2]).floor().max(0.0) as usize;
        let j_hi = (index_of(a[1].max(b[1]).max(c[1]), ext[2]).ceil() as usize).min(grid.ny() - 1);
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                if !grid.is_interior(i, j) {
                    continue;
                }
                let p = grid.coord(i, j);
                let wa = orient2d(c2(b), c2(c), c2(p));
                let wb = orient2d(c2(c), c2(a), c2(p));
                let wc = orient2d(c2(a), c2(b), c2(p));
                if wa < 0.0 || wb < 0.0 || wc < 0.0 {
                    continue;
                }
                let z = (wa * pts[v[0]][2] + wb * pts[v[1]][2] + wc * pts[v[2]][2]) / area;
                let k = grid.index(i, j);
                // exact at hull vertices
                let z = if wa == area {
                    pts[v[0]][2]
                } else if wb == area {
                    pts[v[1]][2]
                } else if wc == area {
                    pts[v[2]][2]
                } else {
                    z
                };
                env[k] = env[k].max(z);
            }
        }
    }
    let mut distance = 0.0f64;
    for &k in nodes {
        if !env[k].is_finite() {
            return Err(Error::DegenerateHull(format!("node {k} not covered by the upper hull")));
        }
        // the majorant never dips below the data
        env[k] = env[k].max(f.values()[k]);
        distance = distance.max(env[k] - f.values()[k]);
    }
    let envelope = ScalarField::from_values(f.grid_arc().clone(), env, f64::NAN)?;
    Ok(EnvelopeResult {
        envelope,
        distance,
        delta: 0.0,
        ratio: f64::NAN,
        facets: upper.len(),
        audit_k: DEFAULT_AUDIT_K,
        consistent: true,
    })
}

/// Monotone-chain upper hull of a 1D field, interpolated back to the nodes.
pub fn concave_envelope_1d(f: &Field1d) -> Result<EnvelopeResult<Field1d>> {
    let xs: Vec<f64> = (0..f.values.len()).map(|i| f.node(i)).collect();
    let hull = upper_hull_1d(&xs, &f.values)?;
    let mut env = f.values.clone();
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, e) in env.iter_mut().enumerate().take(b).skip(a + 1) {
            let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
            *e = (f.values[a] * (1.0 - t) + f.values[b] * t).max(f.values[i]);
        }
    }
    let distance = env
        .iter()
        .zip(&f.values)
        .map(|(e, v)| e - v)
        .fold(0.0, f64::max);
    Ok(EnvelopeResult {
        envelope: Field1d {
            values: env,
            ..f.clone()
        },
        distance,
        delta: 0.0,
        ratio: f64::NAN,
        facets: hull.len() - 1,
        audit_k: DEFAULT_AUDIT_K,
        consistent: true,
    })
}

/// The envelope as a concave witness for a field with deficit `delta`.
pub fn hyers_ulam_witness(f: &ScalarField, delta: f64, k: f64) -> Result<EnvelopeResult<ScalarField>> {
    Ok(concave_envelope(f)?.with_delta(delta, k))
}

pub fn hyers_ulam_witness_1d(f: &Field1d, delta: f64, k: f64) -> Result<EnvelopeResult<Field1d>> {
    Ok(concave_envelope_1d(f)?.with_delta(delta, k))
}

/// Vertices of the 2D convex hull (Andrew's monotone chain), collinear
/// points excluded.
fn convex_hull_2d(pts: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1])));
    let turn = |o: usize, a: usize, b: usize| orient2d(c2(pts[o]), c2(pts[a]), c2(pts[b]));
    let mut lower: Vec<usize> = Vec::new();
    for &i in &idx {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], i) <= 0.0 {
            lower.pop();
        }
        lower.push(i);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &i in idx.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], i) <= 0.0 {
            upper.pop();
        }
        upper.push(i);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid;
    use crate::geometry::ConvexDomain;
    use std::sync::Arc;

    #[test]
    fn concave_field_is_its_own_envelope() {
        let d = ConvexDomain::disk([0.0, 0.0], 1.0).unwrap();
        let g = Arc::new(Grid::new(&d, 1.0 / 16.0).unwrap());
        let f = ScalarField::from_fn(g, 0.0, |p| -(p[0] * p[0] + p[1] * p[1])).unwrap();
        let r = concave_envelope(&f).unwrap();
        assert!(r.distance <= 1e-10);
        let w = hyers_ulam_witness(&f, 0.0, DEFAULT_AUDIT_K).unwrap();
        assert!(w.ratio.is_nan() && w.consistent);
        assert_eq!(w.summary().ratio, None);
    }

    #[test]
    fn parabola_chord_in_1d() {
        let f = Field1d::from_fn(0.0, 1.0, 11, |x| x * x);
        let r = concave_envelope_1d(&f).unwrap();
        for (i, e) in r.envelope.values.iter().enumerate() {
            assert!((e - f.node(i)).abs() < 1e-15);
        }
        assert!((r.distance - 0.25).abs() < 1e-15);
        let w = hyers_ulam_witness_1d(&f, 0.25, DEFAULT_AUDIT_K).unwrap();
        assert!((w.ratio - 1.0).abs() < 1e-14 && w.consistent);
    }

    #[test]
    fn affine_field_is_flat_hull() {
        let d = ConvexDomain::square([0.0, 0.0], 1.0).unwrap();
        let g = Arc::new(Grid::with_cells(&d, 16).unwrap());
        let f = ScalarField::from_fn(g, 0.0, |p| 1.0 + p[0] - 2.0 * p[1]).unwrap();
        let r = concave_envelope(&f).unwrap();
        assert!(r.distance <= 1e-12);
    }
}
