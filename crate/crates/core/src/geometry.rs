//! Bounded convex planar domains and their inner parallel sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

const BOUNDARY_SAMPLES: usize = 1024;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "params", rename_all = "lowercase")]
pub enum Shape {
    Disk {
        center: Point,
        radius: f64,
    },
    Ellipse {
        center: Point,
        semi_axes: [f64; 2],
    },
    /// `|x/a|^p + |y/b|^p < 1` with an even exponent `p >= 2`.
    Superellipse {
        center: Point,
        semi_axes: [f64; 2],
        exponent: u32,
    },
    Square {
        corner: Point,
        side: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Shape", into = "Shape")]
pub struct ConvexDomain {
    shape: Shape,
}

impl TryFrom<Shape> for ConvexDomain {
    type Error = Error;

    fn try_from(shape: Shape) -> Result<Self> {
        ConvexDomain::new(shape)
    }
}

impl From<ConvexDomain> for Shape {
    fn from(d: ConvexDomain) -> Shape {
        d.shape
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDomain(format!("{name} must be positive, got {v}")))
    }
}

impl ConvexDomain {
    pub fn new(shape: Shape) -> Result<Self> {
        match &shape {
            Shape::Disk { radius, .. } => positive("radius", *radius)?,
            Shape::Ellipse { semi_axes, .. } => {
                positive("semi-axis a", semi_axes[0])?;
                positive("semi-axis b", semi_axes[1])?;
            }
            Shape::Superellipse {
                semi_axes,
                exponent,
                ..
            } => {
                positive("semi-axis a", semi_axes[0])?;
                positive("semi-axis b", semi_axes[1])?;
                if *exponent < 2 || exponent % 2 != 0 {
                    return Err(Error::InvalidDomain(format!(
                        "superellipse exponent must be an even integer >= 2, got {exponent}"
                    )));
                }
            }
            Shape::Square { side, .. } => positive("side", *side)?,
        }
        Ok(Self { shape })
    }

    pub fn disk(center: Point, radius: f64) -> Result<Self> {
        Self::new(Shape::Disk { center, radius })
    }

    pub fn ellipse(center: Point, a: f64, b: f64) -> Result<Self> {
        Self::new(Shape::Ellipse {
            center,
            semi_axes: [a, b],
        })
    }

    pub fn superellipse(center: Point, a: f64, b: f64, exponent: u32) -> Result<Self> {
        Self::new(Shape::Superellipse {
            center,
            semi_axes: [a, b],
            exponent,
        })
    }

    pub fn square(corner: Point, side: f64) -> Result<Self> {
        Self::new(Shape::Square { corner, side })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Disks, ellipses and superellipses are strongly convex; the square has
    /// flat sides and corners.
    pub fn strongly_convex(&self) -> bool {
        !matches!(self.shape, Shape::Square { .. })
    }

    pub fn center(&self) -> Point {
        match self.shape {
            Shape::Disk { center, .. }
            | Shape::Ellipse { center, .. }
            | Shape::Superellipse { center, .. } => center,
            Shape::Square { corner, side } => [corner[0] + side / 2.0, corner[1] + side / 2.0],
        }
    }

    /// `[xmin, xmax, ymin, ymax]` of the closed region.
    pub fn bounding_box(&self) -> [f64; 4] {
        match self.shape {
            Shape::Disk { center, radius } => [
                center[0] - radius,
                center[0] + radius,
                center[1] - radius,
                center[1] + radius,
            ],
            Shape::Ellipse { center, semi_axes } | Shape::Superellipse { center, semi_axes, .. } => [
                center[0] - semi_axes[0],
                center[0] + semi_axes[0],
                center[1] - semi_axes[1],
                center[1] + semi_axes[1],
            ],
            Shape::Square { corner, side } => {
                [corner[0], corner[0] + side, corner[1], corner[1] + side]
            }
        }
    }

    /// Open-region membership.
    pub fn contains(&self, x: Point) -> bool {
        match self.shape {
            Shape::Disk { center, radius } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                dx * dx + dy * dy < radius * radius
            }
            Shape::Ellipse { center, semi_axes } => {
                let u = (x[0] - center[0]) / semi_axes[0];
                let v = (x[1] - center[1]) / semi_axes[1];
                u * u + v * v < 1.0
            }
            Shape::Superellipse {
                center,
                semi_axes,
                exponent,
            } => {
                let u = ((x[0] - center[0]) / semi_axes[0]).abs();
                let v = ((x[1] - center[1]) / semi_axes[1]).abs();
                u.powi(exponent as i32) + v.powi(exponent as i32) < 1.0
            }
            Shape::Square { corner, side } => {
                x[0] > corner[0]
                    && x[0] < corner[0] + side
                    && x[1] > corner[1]
                    && x[1] < corner[1] + side
            }
        }
    }

    /// Boundary point for parameter `t` of a closed curve parameterization
    /// (curved shapes only).
    fn boundary_param(&self, t: f64) -> Point {
        match self.shape {
            Shape::Disk { center, radius } => {
                [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            }
            Shape::Ellipse { center, semi_axes } => [
                center[0] + semi_axes[0] * t.cos(),
                center[1] + semi_axes[1] * t.sin(),
            ],
            Shape::Superellipse {
                center,
                semi_axes,
                exponent,
            } => {
                let q = 2.0 / exponent as f64;
                let (c, s) = (t.cos(), t.sin());
                [
                    center[0] + semi_axes[0] * c.signum() * c.abs().powf(q),
                    center[1] + semi_axes[1] * s.signum() * s.abs().powf(q),
                ]
            }
            Shape::Square { .. } => unreachable!("square has no smooth parameterization"),
        }
    }

    /// Distance from a point of the closed region to the boundary.
    pub fn boundary_distance(&self, x: Point) -> Result<f64> {
        if !self.contains(x) && !self.on_boundary(x) {
            return Err(Error::PointOutsideDomain(x));
        }
        Ok(self.boundary_distance_unchecked(x))
    }

    fn on_boundary(&self, x: Point) -> bool {
        let p = self.project(x);
        dist(p, x) <= 1e-12 * (1.0 + norm(x))
    }

    pub(crate) fn boundary_distance_unchecked(&self, x: Point) -> f64 {
        match self.shape {
            Shape::Disk { center, radius } => (radius - dist(x, center)).max(0.0),
            Shape::Square { corner, side } => {
                let d = [
                    x[0] - corner[0],
                    corner[0] + side - x[0],
                    x[1] - corner[1],
                    corner[1] + side - x[1],
                ];
                d.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
            }
            _ => {
                let (_, d) = self.extremize_boundary(|p| dist(p, x), false);
                d
            }
        }
    }

    /// Dense sampling of the boundary parameterization followed by
    /// golden-section refinement around the best sample.
    fn extremize_boundary<F: Fn(Point) -> f64>(&self, f: F, maximize: bool) -> (f64, f64) {
        let sign = if maximize { -1.0 } else { 1.0 };
        let g = |t: f64| sign * f(self.boundary_param(t));
        let dt = std::f64::consts::TAU / BOUNDARY_SAMPLES as f64;
        let mut best_k = 0;
        let mut best = f64::INFINITY;
        for k in 0..BOUNDARY_SAMPLES {
            let v = g(k as f64 * dt);
            if v < best {
                best = v;
                best_k = k;
            }
        }
        let (mut lo, mut hi) = ((best_k as f64 - 1.0) * dt, (best_k as f64 + 1.0) * dt);
        let mut c = hi - GOLDEN * (hi - lo);
        let mut d = lo + GOLDEN * (hi - lo);
        let (mut fc, mut fd) = (g(c), g(d));
        for _ in 0..200 {
            if hi - lo < 1e-15 {
                break;
            }
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - GOLDEN * (hi - lo);
                fc = g(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + GOLDEN * (hi - lo);
                fd = g(d);
            }
        }
        let t = 0.5 * (lo + hi);
        let v = g(t).min(best);
        (t, sign * v)
    }

    pub fn diameter(&self) -> f64 {
        match self.shape {
            Shape::Disk { radius, .. } => 2.0 * radius,
            Shape::Square { side, .. } => side * std::f64::consts::SQRT_2,
            Shape::Ellipse { semi_axes, .. } => 2.0 * semi_axes[0].max(semi_axes[1]),
            Shape::Superellipse { center, .. } => {
                // centrally symmetric: the diameter is twice the largest radius
                let (_, r) = self.extremize_boundary(|p| dist(p, center), true);
                2.0 * r
            }
        }
    }

    /// Largest rho for which the inner parallel set is nonempty.
    pub fn inradius(&self) -> f64 {
        match self.shape {
            Shape::Disk { radius, .. } => radius,
            Shape::Square { side, .. } => side / 2.0,
            Shape::Ellipse { semi_axes, .. } | Shape::Superellipse { semi_axes, .. } => {
                semi_axes[0].min(semi_axes[1])
            }
        }
    }

    /// A point of the closed region: `x` itself when contained, otherwise
    /// the nearest boundary point for disks and squares and the radial
    /// boundary point (towards the center) for the other shapes.
    pub fn project(&self, x: Point) -> Point {
        if self.contains(x) {
            return x;
        }
        match self.shape {
            Shape::Disk { center, radius } => {
                let r = dist(x, center);
                [
                    center[0] + (x[0] - center[0]) * radius / r,
                    center[1] + (x[1] - center[1]) * radius / r,
                ]
            }
            Shape::Square { corner, side } => [
                x[0].clamp(corner[0], corner[0] + side),
                x[1].clamp(corner[1], corner[1] + side),
            ],
            _ => {
                let c = self.center();
                radial_bisect(c, x, |p| self.contains(p))
            }
        }
    }

    /// Fraction `theta` in (0, 1] such that `from + theta (to - from)` lies on
    /// the boundary, for `from` inside and `to` outside.
    pub fn crossing_fraction(&self, from: Point, to: Point) -> f64 {
        match self.shape {
            Shape::Disk { center, radius } => {
                // |from - c + t d|^2 = r^2
                let d = [to[0] - from[0], to[1] - from[1]];
                let f = [from[0] - center[0], from[1] - center[1]];
                let a = d[0] * d[0] + d[1] * d[1];
                let b = f[0] * d[0] + f[1] * d[1];
                let c = f[0] * f[0] + f[1] * f[1] - radius * radius;
                // c < 0 inside; the positive root, in a cancellation-free form
                let disc = (b * b - a * c).max(0.0).sqrt();
                let t = if b >= 0.0 { -c / (b + disc) } else { (disc - b) / a };
                t.clamp(0.0, 1.0)
            }
            Shape::Ellipse { center, semi_axes } => {
                let d = [
                    (to[0] - from[0]) / semi_axes[0],
                    (to[1] - from[1]) / semi_axes[1],
                ];
                let f = [
                    (from[0] - center[0]) / semi_axes[0],
                    (from[1] - center[1]) / semi_axes[1],
                ];
                let a = d[0] * d[0] + d[1] * d[1];
                let b = f[0] * d[0] + f[1] * d[1];
                let c = f[0] * f[0] + f[1] * f[1] - 1.0;
                let disc = (b * b - a * c).max(0.0).sqrt();
                let t = if b >= 0.0 { -c / (b + disc) } else { (disc - b) / a };
                t.clamp(0.0, 1.0)
            }
            _ => {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    let p = [
                        from[0] + mid * (to[0] - from[0]),
                        from[1] + mid * (to[1] - from[1]),
                    ];
                    if self.contains(p) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    pub fn inner_parallel(&self, rho: f64) -> InnerParallelSet {
        InnerParallelSet {
            parent: self.clone(),
            rho: rho.max(0.0),
        }
    }
}

/// Last point on the segment `inside -> target` satisfying `member`.
fn radial_bisect<F: Fn(Point) -> bool>(inside: Point, target: Point, member: F) -> Point {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if member(lerp(inside, target, mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lerp(inside, target, lo)
}

/// `{x in parent : d(x, boundary) > rho}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerParallelSet {
    parent: ConvexDomain,
    rho: f64,
}

impl InnerParallelSet {
    pub fn parent(&self) -> &ConvexDomain {
        &self.parent
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_empty(&self) -> bool {
        self.rho >= self.parent.inradius()
    }

    pub fn contains(&self, x: Point) -> bool {
        if !self.parent.contains(x) {
            return false;
        }
        if self.rho == 0.0 {
            return true;
        }
        self.parent.boundary_distance_unchecked(x) > self.rho
    }

    /// Closed form when one exists (disks shrink radially, squares shrink
    /// by `rho` on each side). `None` for empty sets and curved shapes whose
    /// parallel sets are not in the same family.
    pub fn as_domain(&self) -> Option<ConvexDomain> {
        if self.is_empty() {
            return None;
        }
        if self.rho == 0.0 {
            return Some(self.parent.clone());
        }
        match *self.parent.shape() {
            Shape::Disk { center, radius } => ConvexDomain::disk(center, radius - self.rho).ok(),
            Shape::Square { corner, side } => ConvexDomain::square(
                [corner[0] + self.rho, corner[1] + self.rho],
                side - 2.0 * self.rho,
            )
            .ok(),
            _ => None,
        }
    }

    /// A point of the closure: `x` when contained, else the last contained
    /// point on the ray from the parent's center.
    pub fn project(&self, x: Point) -> Point {
        if self.contains(x) {
            return x;
        }
        if let Some(d) = self.as_domain() {
            return d.project(x);
        }
        radial_bisect(self.parent.center(), x, |p| self.contains(p))
    }

    pub fn diameter(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        if let Some(d) = self.as_domain() {
            return d.diameter();
        }
        // Sample the closure's boundary along rays from the center.
        let c = self.parent.center();
        let reach = self.parent.diameter();
        let pts: Vec<Point> = (0..BOUNDARY_SAMPLES)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / BOUNDARY_SAMPLES as f64;
                radial_bisect(c, [c[0] + reach * t.cos(), c[1] + reach * t.sin()], |p| {
                    self.contains(p)
                })
            })
            .collect();
        let mut best = 0.0f64;
        for (i, p) in pts.iter().enumerate() {
            for q in &pts[i + 1..] {
                best = best.max(dist(*p, *q));
            }
        }
        best
    }
}

pub fn segment_samples(x1: Point, x3: Point, m: usize) -> Vec<Point> {
    let m = m.max(2);
    (0..m)
        .map(|k| {
            if k == m - 1 {
                x3
            } else {
                lerp(x1, x3, k as f64 / (m - 1) as f64)
            }
        })
        .collect()
}

#[inline]
pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}
