//! Concavity, joint-concavity and harmonic-concavity functionals, and the
//! global maximization of the concavity deficit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldEval, ScalarField};
use crate::geometry::{dist, ConvexDomain, InnerParallelSet, Point};

/// `(x1, x3, lambda)` with `x2 = lambda x3 + (1 - lambda) x1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TripleRepr", from = "TripleRepr")]
pub struct Triple {
    pub x1: Point,
    pub x3: Point,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct TripleRepr {
    x1: Point,
    x2: Point,
    x3: Point,
    lambda: f64,
}

impl From<Triple> for TripleRepr {
    fn from(t: Triple) -> Self {
        TripleRepr {
            x1: t.x1,
            x2: t.x2(),
            x3: t.x3,
            lambda: t.lambda,
        }
    }
}

impl From<TripleRepr> for Triple {
    fn from(t: TripleRepr) -> Self {
        Triple::new(t.x1, t.x3, t.lambda)
    }
}

impl Triple {
    pub fn new(x1: Point, x3: Point, lambda: f64) -> Self {
        Self { x1, x3, lambda }
    }

    #[inline]
    pub fn x2(&self) -> Point {
        let l = self.lambda;
        [
            l * self.x3[0] + (1.0 - l) * self.x1[0],
            l * self.x3[1] + (1.0 - l) * self.x1[1],
        ]
    }

    /// The same triple read from the other end.
    pub fn reversed(&self) -> Self {
        Self::new(self.x3, self.x1, 1.0 - self.lambda)
    }

    /// All three points strictly inside the domain.
    pub fn is_interior(&self, domain: &ConvexDomain) -> bool {
        domain.contains(self.x1) && domain.contains(self.x2()) && domain.contains(self.x3)
    }
}

fn finite(v: f64, at: Point) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::PointTooCloseToBoundary(at))
    }
}

/// `f(x2) - lambda f(x3) - (1 - lambda) f(x1)`.
pub fn concavity_fn<F: FieldEval + ?Sized>(f: &F, t: &Triple) -> Result<f64> {
    let f1 = finite(f.eval_point(t.x1)?, t.x1)?;
    let f3 = finite(f.eval_point(t.x3)?, t.x3)?;
    let x2 = t.x2();
    let f2 = finite(f.eval_point(x2)?, x2)?;
    Ok(f2 - t.lambda * f3 - (1.0 - t.lambda) * f1)
}

/// `g(x2, s2) - lambda g(x3, s3) - (1 - lambda) g(x1, s1)` with
/// `s2 = lambda s3 + (1 - lambda) s1`.
pub fn joint_concavity_fn<G: Fn(Point, f64) -> f64>(g: G, t: &Triple, s1: f64, s3: f64) -> Result<f64> {
    let s2 = t.lambda * s3 + (1.0 - t.lambda) * s1;
    let g1 = finite(g(t.x1, s1), t.x1)?;
    let g3 = finite(g(t.x3, s3), t.x3)?;
    let x2 = t.x2();
    let g2 = finite(g(x2, s2), x2)?;
    Ok(g2 - t.lambda * g3 - (1.0 - t.lambda) * g1)
}

/// Harmonic concavity; `Undefined` is an ordinary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcValue {
    Value(f64),
    Undefined,
}

impl HcValue {
    pub fn value(&self) -> Option<f64> {
        match *self {
            HcValue::Value(v) => Some(v),
            HcValue::Undefined => None,
        }
    }
}

pub fn harmonic_concavity_fn<G: Fn(Point, f64) -> f64>(g: G, t: &Triple, s1: f64, s3: f64) -> HcValue {
    let l = t.lambda;
    let s2 = l * s3 + (1.0 - l) * s1;
    let g1 = g(t.x1, s1);
    let g3 = g(t.x3, s3);
    let g2 = g(t.x2(), s2);
    harmonic_from_values(g1, g2, g3, l)
}

/// The case split on endpoint values `g1`, `g3` and midpoint value `g2`.
pub fn harmonic_from_values(g1: f64, g2: f64, g3: f64, lambda: f64) -> HcValue {
    let denom = lambda * g1 + (1.0 - lambda) * g3;
    if denom > 0.0 {
        HcValue::Value(g2 - g1 * g3 / denom)
    } else if g1 == 0.0 && g3 == 0.0 {
        HcValue::Value(g2)
    } else {
        HcValue::Undefined
    }
}

pub fn hc_minus_jc<G: Fn(Point, f64) -> f64>(g: G, t: &Triple, s1: f64, s3: f64) -> Result<f64> {
    let hc = harmonic_concavity_fn(&g, t, s1, s3)
        .value()
        .ok_or(Error::UndefinedHarmonicConcavity)?;
    let jc = joint_concavity_fn(&g, t, s1, s3)?;
    Ok(hc - jc)
}

/// Where the deficit is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// The closed domain; boundary values are the field's trace.
    Closed,
    /// The closure of the inner parallel set at distance `rho`.
    Inner { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeficitOptions {
    pub lambda_grid: usize,
    pub top_k: usize,
    pub max_pairs: usize,
    /// Forces the scan stride instead of deriving it from `max_pairs`.
    pub stride: Option<usize>,
    pub region: Region,
    /// The numerical floor is `floor_factor h^2 max|f|`.
    pub floor_factor: f64,
    pub max_refine_iterations: usize,
}

impl Default for DeficitOptions {
    fn default() -> Self {
        Self {
            lambda_grid: 7,
            top_k: 16,
            max_pairs: 20_000_000,
            stride: None,
            region: Region::Closed,
            floor_factor: 10.0,
            max_refine_iterations: 4000,
        }
    }
}

impl DeficitOptions {
    pub fn with_region(self, region: Region) -> Self {
        Self { region, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitReport {
    pub triple: Triple,
    /// `max(0, max C_{-f})`, with values at rounding level reported as 0.
    pub deficit: f64,
    pub coarse_value: f64,
    pub refined_value: f64,
    pub interior: bool,
    pub h: f64,
    pub lambda_grid: usize,
    pub stride: usize,
    pub pairs: usize,
    pub refinement_iterations: usize,
    pub region: Region,
    pub floor: f64,
}

impl DeficitReport {
    pub fn above_floor(&self) -> bool {
        self.deficit > self.floor
    }
}

enum Feasible<'a> {
    Closed(&'a ConvexDomain),
    Inner(InnerParallelSet),
}

impl Feasible<'_> {
    fn contains_node(&self, x: Point) -> bool {
        match self {
            Feasible::Closed(d) => d.contains(x),
            Feasible::Inner(s) => s.contains(x),
        }
    }

    fn project(&self, x: Point) -> Point {
        match self {
            Feasible::Closed(d) => d.project(x),
            Feasible::Inner(s) => s.project(x),
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    value: f64,
    a: usize,
    b: usize,
    lambda: f64,
}

/// Global maximum of `C_{-f}` over the region: an exhaustive strided scan
/// over node pairs and a uniform lambda grid, then Nelder-Mead refinement
/// of the best `top_k` triples.
pub fn max_deficit(f: &ScalarField, opts: &DeficitOptions) -> Result<DeficitReport> {
    if opts.lambda_grid < 3 {
        return Err(Error::InvalidProblem(format!(
            "lambda grid needs at least 3 values, got {}",
            opts.lambda_grid
        )));
    }
    let grid = f.grid();
    let domain = grid.domain();
    let h = grid.h();
    let feasible = match opts.region {
        Region::Closed => Feasible::Closed(domain),
        Region::Inner { rho } => Feasible::Inner(domain.inner_parallel(rho)),
    };
    let nodes: Vec<usize> = grid
        .interior_nodes()
        .iter()
        .copied()
        .filter(|&k| feasible.contains_node(grid.node_point(k)))
        .collect();
    if nodes.is_empty() {
        return Err(Error::EmptyMask);
    }
    let fmax = nodes.iter().map(|&k| f.values()[k].abs()).fold(0.0, f64::max);
    let floor = opts.floor_factor * h * h * fmax;

    let stride = match opts.stride {
        Some(s) => s.max(1),
        None => {
            let mut s = 1;
            loop {
                let count = nodes
                    .iter()
                    .filter(|&&k| {
                        let (i, j) = grid.ij(k);
                        i % s == 0 && j % s == 0
                    })
                    .count();
                if count * count.saturating_sub(1) / 2 <= opts.max_pairs {
                    break s;
                }
                s += 1;
            }
        }
    };
    let sub: Vec<usize> = nodes
        .iter()
        .copied()
        .filter(|&k| {
            let (i, j) = grid.ij(k);
            i % stride == 0 && j % stride == 0
        })
        .collect();
    let pts: Vec<Point> = sub.iter().map(|&k| grid.node_point(k)).collect();
    let vals: Vec<f64> = sub.iter().map(|&k| f.values()[k]).collect();
    let m = pts.len();
    let lambdas: Vec<f64> = (1..=opts.lambda_grid)
        .map(|k| k as f64 / (opts.lambda_grid + 1) as f64)
        .collect();

    // Phase 1: best partner per x1, pairs in row-major order.
    let per_x1: Vec<Candidate> = (0..m)
        .into_par_iter()
        .map(|a| {
            let mut best = Candidate {
                value: f64::NEG_INFINITY,
                a,
                b: a,
                lambda: 0.5,
            };
            let (p1, f1) = (pts[a], vals[a]);
            for b in a + 1..m {
                let (p3, f3) = (pts[b], vals[b]);
                for &l in &lambdas {
                    let x2 = [l * p3[0] + (1.0 - l) * p1[0], l * p3[1] + (1.0 - l) * p1[1]];
                    let Ok(f2) = f.evaluate(x2) else { continue };
                    let c = -f2 + l * f3 + (1.0 - l) * f1;
                    if c > best.value {
                        best = Candidate {
                            value: c,
                            a,
                            b,
                            lambda: l,
                        };
                    }
                }
            }
            best
        })
        .collect();
    let pairs = m * m.saturating_sub(1) / 2;
    let mut ranked: Vec<Candidate> = per_x1.into_iter().filter(|c| c.value.is_finite()).collect();
    // stable: equal values keep row-major order
    ranked.sort_by(|p, q| q.value.total_cmp(&p.value));
    ranked.truncate(opts.top_k.max(1));

    let (coarse_value, coarse_triple) = match ranked.first() {
        Some(c) => (c.value, Triple::new(pts[c.a], pts[c.b], c.lambda)),
        None => {
            // a single feasible node: every triple is degenerate
            let p = pts[0];
            (0.0, Triple::new(p, p, 0.5))
        }
    };

    // Phase 2: Nelder-Mead on (x1, x3, lambda).
    let objective = |z: &[f64; 5]| -> (f64, Triple) {
        let t = Triple::new(
            feasible.project([z[0], z[1]]),
            feasible.project([z[2], z[3]]),
            z[4].clamp(0.0, 1.0),
        );
        match concavity_fn(f, &t) {
            Ok(c) => (-c, t),
            Err(_) => (f64::NEG_INFINITY, t),
        }
    };
    let step_lambda = 0.5 / (opts.lambda_grid + 1) as f64;
    let diam = domain.diameter();
    let refined: Vec<(f64, Triple, usize)> = ranked
        .par_iter()
        .map(|c| {
            let start = [pts[c.a][0], pts[c.a][1], pts[c.b][0], pts[c.b][1], c.lambda];
            let steps = [stride as f64 * h, stride as f64 * h, stride as f64 * h, stride as f64 * h, step_lambda];
            let scales = [1.0, 1.0, 1.0, 1.0, diam];
            let (z, iters) = nelder_mead_max(&objective, start, steps, scales, h / 100.0, opts.max_refine_iterations);
            let (v, t) = objective(&z);
            (v, t, iters)
        })
        .collect();
    let mut best: Option<(f64, Triple, usize)> = None;
    for (v, t, it) in refined {
        if !v.is_finite() {
            continue;
        }
        best = match best {
            None => Some((v, t, it)),
            Some((bv, bt, bit)) => {
                let tol = 1e-14 * bv.abs().max(1.0);
                if v > bv + tol || ((v - bv).abs() <= tol && dist(t.x1, t.x3) < dist(bt.x1, bt.x3)) {
                    Some((v, t, it))
                } else {
                    Some((bv, bt, bit))
                }
            }
        };
    }
    let (refined_value, triple, refinement_iterations) = match best {
        Some((v, t, it)) if v >= coarse_value => (v, t, it),
        Some((_, _, it)) => (coarse_value, coarse_triple, it),
        None => (coarse_value, coarse_triple, 0),
    };
    // degenerate triples evaluate to zero only up to rounding
    let roundoff = 64.0 * f64::EPSILON * fmax;
    let deficit = if refined_value <= roundoff { 0.0 } else { refined_value };
    Ok(DeficitReport {
        triple,
        deficit,
        coarse_value,
        refined_value,
        interior: triple.is_interior(domain),
        h,
        lambda_grid: opts.lambda_grid,
        stride,
        pairs,
        refinement_iterations,
        region: opts.region,
        floor,
    })
}

/// Maximizes the first component of `objective`; returns the best vertex
/// and the iteration count.
fn nelder_mead_max<F, T>(
    objective: &F,
    start: [f64; 5],
    steps: [f64; 5],
    scales: [f64; 5],
    tol: f64,
    max_iter: usize,
) -> ([f64; 5], usize)
where
    F: Fn(&[f64; 5]) -> (f64, T),
{
    const D: usize = 5;
    let value = |z: &[f64; D]| {
        let v = objective(z).0;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<([f64; D], f64)> = Vec::with_capacity(D + 1);
    simplex.push((start, value(&start)));
    for d in 0..D {
        let mut z = start;
        z[d] += steps[d];
        simplex.push((z, value(&z)));
    }
    let mut iter = 0;
    loop {
        // best first; stable keeps the start vertex on ties
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(z, _)| {
                (0..D)
                    .map(|d| ((z[d] - simplex[0].0[d]) * scales[d]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if diameter < tol || iter >= max_iter {
            return (simplex[0].0, iter);
        }
        iter += 1;
        let mut centroid = [0.0; D];
        for (z, _) in &simplex[..D] {
            for d in 0..D {
                centroid[d] += z[d] / D as f64;
            }
        }
        let worst = simplex[D];
        let along = |t: f64| {
            let mut z = [0.0; D];
            for d in 0..D {
                z[d] = centroid[d] + t * (worst.0[d] - centroid[d]);
            }
            z
        };
        let xr = along(-1.0);
        let fr = value(&xr);
        if fr > simplex[0].1 {
            let xe = along(-2.0);
            let fe = value(&xe);
            simplex[D] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[D - 1].1 {
            simplex[D] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr > worst.1 {
            let z = along(-0.5);
            (z, value(&z))
        } else {
            let z = along(0.5);
            (z, value(&z))
        };
        if fc > worst.1.max(fr) {
            simplex[D] = (xc, fc);
            continue;
        }
        let best = simplex[0].0;
        for v in simplex.iter_mut().skip(1) {
            for d in 0..D {
                v.0[d] = best[d] + 0.5 * (v.0[d] - best[d]);
            }
            v.1 = value(&v.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryClass {
    Interior,
    NearBoundaryWarning,
    BoundaryViolation,
}

/// Classifies the argmax triple by its distance to the boundary. Deficits
/// at or below the numerical floor are vacuously interior.
pub fn boundary_audit(report: &DeficitReport, f: &ScalarField) -> BoundaryClass {
    if !report.above_floor() {
        return BoundaryClass::Interior;
    }
    let domain = f.grid().domain();
    let h = f.grid().h();
    let t = &report.triple;
    let d = [t.x1, t.x2(), t.x3]
        .iter()
        .map(|&x| {
            if domain.contains(x) {
                domain.boundary_distance(x).unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min);
    if d <= 1e-12 {
        BoundaryClass::BoundaryViolation
    } else if d < 2.0 * h {
        BoundaryClass::NearBoundaryWarning
    } else {
        BoundaryClass::Interior
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Field1d, FnField, Grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn disk_grid(h: f64) -> Arc<Grid> {
        Arc::new(Grid::new(&ConvexDomain::disk([0.0, 0.0], 1.0).unwrap(), h).unwrap())
    }

    #[test]
    fn concavity_examples() {
        let g = disk_grid(1.0 / 16.0);
        let affine = ScalarField::from_fn(g.clone(), 0.0, |p| 2.0 * p[0] - p[1] + 0.5).unwrap();
        // the affine field's trace is not constant, so stay off cut cells
        let t = Triple::new([-0.3, 0.2], [0.4, -0.1], 0.37);
        assert!(concavity_fn(&affine, &t).unwrap().abs() < 1e-12);

        let sq = Field1d::from_fn(0.0, 2.0, 9, |x| x * x);
        let t = Triple::new([0.0, 0.0], [2.0, 0.0], 0.5);
        assert_eq!(concavity_fn(&sq, &t).unwrap(), -1.0);

        let wavy = FnField(|p: Point| (3.0 * p[0]).sin() + p[1] * p[1]);
        for l in [0.0, 1.0] {
            let t = Triple::new([0.1, 0.2], [-0.5, 0.3], l);
            assert_eq!(concavity_fn(&wavy, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn joint_and_harmonic_examples() {
        let t = Triple::new([0.1, 0.0], [0.7, 0.2], 0.5);
        assert!(joint_concavity_fn(|_, s| s, &t, 0.3, 1.7).unwrap().abs() < 1e-15);
        assert_eq!(joint_concavity_fn(|_, s| -s * s, &t, 0.0, 2.0).unwrap(), 1.0);
        let g0 = |x: Point| 1.0 + x[0] * x[0];
        let t2 = Triple::new([0.0, 0.0], [1.0, 0.0], 0.3);
        let direct = {
            let s2 = 0.3 * 2.0 + 0.7 * 1.0;
            s2 * g0(t2.x2()) - 0.3 * 2.0 * g0(t2.x3) - 0.7 * 1.0 * g0(t2.x1)
        };
        let jc = joint_concavity_fn(|x, s| s * g0(x), &t2, 1.0, 2.0).unwrap();
        assert!((jc - direct).abs() < 1e-15);

        assert_eq!(harmonic_concavity_fn(|_, _| 2.5, &t, 0.1, 0.9), HcValue::Value(0.0));
        assert_eq!(harmonic_from_values(0.0, 0.3, 0.0, 0.4), HcValue::Value(0.3));
        assert_eq!(harmonic_from_values(-1.0, 0.3, -1.0, 0.5), HcValue::Undefined);
    }

    #[test]
    fn hc_minus_jc_examples() {
        let t = Triple::new([0.0, 0.0], [1.0, 0.0], 0.5);
        assert_eq!(hc_minus_jc(|_, _| 3.0, &t, 0.0, 1.0).unwrap(), 0.0);
        // g1 = 1, g3 = 4 at lambda = 1/2
        let g = |x: Point, _s: f64| 1.0 + 3.0 * x[0];
        let v = hc_minus_jc(g, &t, 0.0, 0.0).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        assert!(matches!(
            hc_minus_jc(|_, _| -1.0, &t, 0.0, 0.0),
            Err(Error::UndefinedHarmonicConcavity)
        ));
    }

    #[test]
    fn hc_dominates_jc_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let g1 = rng.random_range(1e-6..=10.0);
            let g3 = rng.random_range(1e-6..=10.0);
            let g2 = rng.random_range(-10.0..10.0);
            let l = rng.random_range(1e-9..1.0);
            let hc = harmonic_from_values(g1, g2, g3, l).value().unwrap();
            let jc = g2 - l * g3 - (1.0 - l) * g1;
            assert!(hc - jc >= -1e-12, "{g1} {g3} {l}");
        }
    }

    #[test]
    fn symmetry_and_scale() {
        let g = disk_grid(1.0 / 32.0);
        let f = ScalarField::from_fn(g.clone(), 0.0, |p| (1.0 - p[0] * p[0] - p[1] * p[1]) * (1.5 + p[0].sin())).unwrap();
        let f3 = f.scaled(3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = g.domain();
        let mut n = 0;
        while n < 10_000 {
            let x1 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let x3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if !d.contains(x1) || !d.contains(x3) {
                continue;
            }
            n += 1;
            let t = Triple::new(x1, x3, rng.random_range(0.0..1.0));
            let c = concavity_fn(&f, &t).unwrap();
            let r = concavity_fn(&f, &t.reversed()).unwrap();
            assert!((c - r).abs() <= 1e-14, "{c} {r}");
            let c3 = concavity_fn(&f3, &t).unwrap();
            assert!((c3 - 3.0 * c).abs() <= 1e-13);
        }
    }

    #[test]
    fn concave_quadratic_has_zero_deficit() {
        let g = disk_grid(1.0 / 32.0);
        let f = ScalarField::from_fn(g, -1.0, |p| -(p[0] * p[0] + p[1] * p[1])).unwrap();
        let rep = max_deficit(&f, &DeficitOptions::default()).unwrap();
        assert!(rep.deficit <= rep.floor, "{rep:?}");
        assert!(rep.refined_value >= rep.coarse_value - 1e-12);
        assert_eq!(boundary_audit(&rep, &f), BoundaryClass::Interior);
    }

    #[test]
    fn eigenfunction_on_square_is_not_concave() {
        let sq = ConvexDomain::square([0.0, 0.0], PI).unwrap();
        let g = Arc::new(Grid::with_cells(&sq, 32).unwrap());
        let f = ScalarField::from_fn(g.clone(), 0.0, |p| p[0].sin() * p[1].sin()).unwrap();
        let rep = max_deficit(&f, &DeficitOptions::default()).unwrap();
        assert!(rep.deficit > 0.05, "{rep:?}");
        assert!(rep.refined_value >= rep.coarse_value);

        // brute-force oracle over every node pair on a coarse grid
        let coarse = Arc::new(Grid::with_cells(&sq, 12).unwrap());
        let fc = ScalarField::from_fn(coarse.clone(), 0.0, |p| p[0].sin() * p[1].sin()).unwrap();
        let nodes = coarse.interior_nodes();
        let mut oracle = f64::NEG_INFINITY;
        for &a in nodes {
            for &b in nodes {
                for k in 1..8 {
                    let t = Triple::new(coarse.node_point(a), coarse.node_point(b), k as f64 / 8.0);
                    oracle = oracle.max(-concavity_fn(&fc, &t).unwrap());
                }
            }
        }
        let rc = max_deficit(&fc, &DeficitOptions::default()).unwrap();
        assert!(rc.deficit >= oracle - 1e-12, "{} vs {oracle}", rc.deficit);
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let sq = ConvexDomain::square([0.0, 0.0], PI).unwrap();
        let g = Arc::new(Grid::with_cells(&sq, 24).unwrap());
        let f = ScalarField::from_fn(g.clone(), 0.0, |p| p[0].sin() * p[1].sin()).unwrap();
        let r1 = max_deficit(&f, &DeficitOptions::default()).unwrap();
        let r2 = max_deficit(&f.scaled(4.0).unwrap(), &DeficitOptions::default()).unwrap();
        assert!((r2.deficit - 4.0 * r1.deficit).abs() < 1e-10);
        let tol = g.h() / 10.0;
        assert!(dist(r1.triple.x1, r2.triple.x1) < tol && dist(r1.triple.x3, r2.triple.x3) < tol);
    }

    #[test]
    fn ramp_near_boundary_is_flagged() {
        let sq = ConvexDomain::square([0.0, 0.0], 1.0).unwrap();
        let g = Arc::new(Grid::with_cells(&sq, 32).unwrap());
        let f = ScalarField::from_fn(g.clone(), 0.0, |p| (0.1 - p[0]).max(0.0)).unwrap();
        // the kink is reachable from points half a cell from the boundary
        let region = Region::Inner { rho: g.h() / 2.0 };
        let rep = max_deficit(&f, &DeficitOptions::default().with_region(region)).unwrap();
        assert!(rep.above_floor());
        assert_eq!(boundary_audit(&rep, &f), BoundaryClass::NearBoundaryWarning, "{rep:?}");
    }

    #[test]
    fn empty_region_and_bad_lambda_grid() {
        let g = disk_grid(1.0 / 16.0);
        let f = ScalarField::from_fn(g, 0.0, |_| 1.0).unwrap();
        let opts = DeficitOptions::default().with_region(Region::Inner { rho: 2.0 });
        assert!(matches!(max_deficit(&f, &opts), Err(Error::EmptyMask)));
        let opts = DeficitOptions {
            lambda_grid: 2,
            ..Default::default()
        };
        assert!(max_deficit(&f, &opts).is_err());
    }

    #[test]
    fn report_serializes_points_as_pairs() {
        let t = Triple::new([0.0, 0.0], [1.0, 0.5], 0.5);
        let js = serde_json::to_value(t).unwrap();
        assert_eq!(js["x2"], serde_json::json!([0.5, 0.25]));
        let back: Triple = serde_json::from_value(js).unwrap();
        assert_eq!(back, t);
    }
}
