//! Grid-sampled scalar fields on masked uniform grids.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::geometry::{ConvexDomain, Point};

/// Offsets of the eight neighbors, in the order E, W, N, S, NE, NW, SE, SW.
pub const NEIGHBORS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, 1),
    (1, -1),
    (-1, -1),
];
pub const E: usize = 0;
pub const W: usize = 1;
pub const N: usize = 2;
pub const S: usize = 3;
pub const NE: usize = 4;
pub const NW: usize = 5;
pub const SE: usize = 6;
pub const SW: usize = 7;

const MIN_CROSSING: f64 = 1e-12;

/// Uniform grid with square cells, masked to the interior of a domain.
#[derive(Debug, Clone)]
pub struct Grid {
    domain: ConvexDomain,
    xmin: f64,
    ymin: f64,
    h: f64,
    nx: usize,
    ny: usize,
    mask: Vec<bool>,
    /// Per node and direction: fraction of the step to the neighbor that
    /// stays inside the domain (1 when the neighbor is interior).
    crossings: Vec<[f64; 8]>,
    /// Row-major unknown numbering of interior nodes.
    unknown: Vec<usize>,
    interior: Vec<usize>,
}

impl Grid {
    /// Grid with spacing `h`, centered on the domain's bounding box.
    pub fn new(domain: &ConvexDomain, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {h}")));
        }
        let b = domain.bounding_box();
        let nx = ((b[1] - b[0]) / h - 1e-9).ceil() as usize + 1;
        let ny = ((b[3] - b[2]) / h - 1e-9).ceil() as usize + 1;
        let cx = 0.5 * (b[0] + b[1]);
        let cy = 0.5 * (b[2] + b[3]);
        let xmin = cx - 0.5 * (nx - 1) as f64 * h;
        let ymin = cy - 0.5 * (ny - 1) as f64 * h;
        Self::build(domain.clone(), xmin, ymin, h, nx, ny)
    }

    /// Grid whose longer bounding-box side is split into `cells` cells.
    pub fn with_cells(domain: &ConvexDomain, cells: usize) -> Result<Self> {
        let b = domain.bounding_box();
        let h = (b[1] - b[0]).max(b[3] - b[2]) / cells.max(1) as f64;
        Self::new(domain, h)
    }

    /// Grid from explicit extents (as stored in field files).
    pub fn from_extents(
        domain: &ConvexDomain,
        nx: usize,
        ny: usize,
        [xmin, xmax, ymin, ymax]: [f64; 4],
    ) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!("need nx, ny >= 9, got {nx} x {ny}")));
        }
        let hx = (xmax - xmin) / (nx - 1) as f64;
        let hy = (ymax - ymin) / (ny - 1) as f64;
        if !(hx > 0.0 && ((hx - hy) / hx).abs() <= 1e-12) {
            return Err(Error::InvalidGrid(format!("cells are not square: hx = {hx}, hy = {hy}")));
        }
        Self::build(domain.clone(), xmin, ymin, hx, nx, ny)
    }

    fn build(domain: ConvexDomain, xmin: f64, ymin: f64, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 9 || ny < 9 {
            return Err(Error::InvalidGrid(format!("need nx, ny >= 9, got {nx} x {ny}")));
        }
        let coord = |i: i64, j: i64| [xmin + i as f64 * h, ymin + j as f64 * h];
        let mut mask = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                mask[j * nx + i] = domain.contains(coord(i as i64, j as i64));
            }
        }
        let mut crossings = vec![[1.0; 8]; nx * ny];
        let mut unknown = vec![usize::MAX; nx * ny];
        let mut interior = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if !mask[k] {
                    continue;
                }
                unknown[k] = interior.len();
                interior.push(k);
                let p = coord(i as i64, j as i64);
                for (dir, (di, dj)) in NEIGHBORS.iter().enumerate() {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    let inside = ii >= 0
                        && jj >= 0
                        && (ii as usize) < nx
                        && (jj as usize) < ny
                        && mask[jj as usize * nx + ii as usize];
                    if !inside {
                        let theta = domain.crossing_fraction(p, coord(ii, jj));
                        crossings[k][dir] = theta.max(MIN_CROSSING);
                    }
                }
            }
        }
        Ok(Self {
            domain,
            xmin,
            ymin,
            h,
            nx,
            ny,
            mask,
            crossings,
            unknown,
            interior,
        })
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.domain
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn extents(&self) -> [f64; 4] {
        [
            self.xmin,
            self.xmin + (self.nx - 1) as f64 * self.h,
            self.ymin,
            self.ymin + (self.ny - 1) as f64 * self.h,
        ]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> Point {
        [self.xmin + i as f64 * self.h, self.ymin + j as f64 * self.h]
    }

    #[inline]
    pub fn node_point(&self, k: usize) -> Point {
        let (i, j) = self.ij(k);
        self.coord(i, j)
    }

    #[inline]
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.nx + i]
    }

    pub fn is_interior_offset(&self, i: usize, j: usize, di: i64, dj: i64) -> bool {
        let (ii, jj) = (i as i64 + di, j as i64 + dj);
        ii >= 0
            && jj >= 0
            && (ii as usize) < self.nx
            && (jj as usize) < self.ny
            && self.mask[jj as usize * self.nx + ii as usize]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Interior node indices, row-major.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn unknown_index(&self, k: usize) -> Option<usize> {
        let u = self.unknown[k];
        (u != usize::MAX).then_some(u)
    }

    pub fn crossings(&self, k: usize) -> &[f64; 8] {
        &self.crossings[k]
    }

    /// Cell `(i, j)` containing `x` (lower-left corner), clamped to the grid.
    pub fn cell_of(&self, x: Point) -> (usize, usize, f64, f64) {
        let fx = (x[0] - self.xmin) / self.h;
        let fy = (x[1] - self.ymin) / self.h;
        let i = (fx.floor().max(0.0) as usize).min(self.nx - 2);
        let j = (fy.floor().max(0.0) as usize).min(self.ny - 2);
        (i, j, fx - i as f64, fy - j as f64)
    }

    pub fn cell_fully_interior(&self, i: usize, j: usize) -> bool {
        self.is_interior(i, j)
            && self.is_interior(i + 1, j)
            && self.is_interior(i, j + 1)
            && self.is_interior(i + 1, j + 1)
    }
}

/// Node-wise transform that produced a field from a base field; off-node
/// values are the transform of the base field's interpolant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointwiseTransform {
    Power(f64),
    Log,
}

impl PointwiseTransform {
    #[inline]
    pub fn apply(&self, s: f64) -> f64 {
        match *self {
            PointwiseTransform::Power(q) => {
                if s <= 0.0 {
                    0.0
                } else if q == 0.5 {
                    s.sqrt()
                } else {
                    s.powf(q)
                }
            }
            PointwiseTransform::Log => {
                if s <= 0.0 {
                    f64::NAN
                } else {
                    s.ln()
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Lift {
    base: Arc<ScalarField>,
    transform: PointwiseTransform,
    scale: f64,
}

/// Values on the interior nodes of a grid; exterior nodes hold NaN.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
    trace: f64,
    lift: Option<Lift>,
    cells: OnceLock<Vec<Option<[f64; 4]>>>,
}

/// Anything that can be evaluated at points of the closed domain.
pub trait FieldEval: Sync {
    fn eval_point(&self, x: Point) -> Result<f64>;
}

impl ScalarField {
    pub fn from_values(grid: Arc<Grid>, mut values: Vec<f64>, trace: f64) -> Result<Self> {
        if values.len() != grid.nx * grid.ny {
            return Err(Error::ValueCountMismatch {
                expected: grid.nx * grid.ny,
                found: values.len(),
            });
        }
        for (k, v) in values.iter_mut().enumerate() {
            if grid.mask[k] {
                if !v.is_finite() {
                    return Err(Error::InvalidGrid(format!(
                        "non-finite value {v} at interior node {k}"
                    )));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            grid,
            values,
            trace,
            lift: None,
            cells: OnceLock::new(),
        })
    }

    /// Samples `f` at interior nodes.
    pub fn from_fn<F: Fn(Point) -> f64>(grid: Arc<Grid>, trace: f64, f: F) -> Result<Self> {
        let values = (0..grid.nx * grid.ny)
            .map(|k| {
                if grid.mask[k] {
                    f(grid.node_point(k))
                } else {
                    f64::NAN
                }
            })
            .collect();
        Self::from_values(grid, values, trace)
    }

    /// Interior-node values in row-major order.
    pub fn from_interior(grid: Arc<Grid>, interior: &[f64], trace: f64) -> Result<Self> {
        let nodes = grid.interior_nodes();
        if interior.len() != nodes.len() {
            return Err(Error::ValueCountMismatch {
                expected: nodes.len(),
                found: interior.len(),
            });
        }
        let mut values = vec![f64::NAN; grid.nx * grid.ny];
        for (&k, &v) in nodes.iter().zip(interior) {
            values[k] = v;
        }
        Self::from_values(grid, values, trace)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn interior_values(&self) -> Vec<f64> {
        self.grid.interior.iter().map(|&k| self.values[k]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.grid
            .interior
            .iter()
            .map(|&k| self.values[k].abs())
            .fold(0.0, f64::max)
    }

    pub fn min_interior(&self) -> f64 {
        self.grid
            .interior
            .iter()
            .map(|&k| self.values[k])
            .fold(f64::INFINITY, f64::min)
    }

    /// Node-wise map preserving the grid; the result has no lift.
    pub fn map<F: Fn(f64) -> f64>(&self, trace: f64, f: F) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| if self.grid.mask[k] { f(v) } else { f64::NAN })
            .collect();
        Self::from_values(self.grid.clone(), values, trace)
    }

    /// Node-wise `c * f`; a lifted field stays lifted.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut out = self.map(c * self.trace, |v| c * v)?;
        out.lift = self.lift.clone().map(|l| Lift {
            scale: l.scale * c,
            ..l
        });
        Ok(out)
    }

    fn ensure_positive(&self) -> Result<()> {
        for &k in &self.grid.interior {
            let v = self.values[k];
            if !(v > 0.0) {
                return Err(Error::NonpositiveInputValue { node: k, value: v });
            }
        }
        Ok(())
    }

    /// Bilinear interpolation on the cell containing `x`; if that cell has
    /// exterior corners, the nearest fully interior cell within `2h` is
    /// extrapolated instead.
    pub fn interpolate(&self, x: Point) -> Result<f64> {
        let g = &*self.grid;
        let (i, j, tx, ty) = g.cell_of(x);
        if g.cell_fully_interior(i, j) {
            return Ok(self.bilinear(i, j, tx, ty));
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for dj in -2i64..=2 {
            for di in -2i64..=2 {
                let (ci, cj) = (i as i64 + di, j as i64 + dj);
                if ci < 0 || cj < 0 || ci as usize + 1 >= g.nx || cj as usize + 1 >= g.ny {
                    continue;
                }
                let (ci, cj) = (ci as usize, cj as usize);
                if !g.cell_fully_interior(ci, cj) {
                    continue;
                }
                // distance from x to the cell rectangle
                let lo = g.coord(ci, cj);
                let dx = (lo[0] - x[0]).max(0.0).max(x[0] - lo[0] - g.h);
                let dy = (lo[1] - x[1]).max(0.0).max(x[1] - lo[1] - g.h);
                let d = dx.hypot(dy);
                if d <= 2.0 * g.h && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, ci, cj));
                }
            }
        }
        match best {
            Some((_, ci, cj)) => {
                let tx = (x[0] - g.xmin) / g.h - ci as f64;
                let ty = (x[1] - g.ymin) / g.h - cj as f64;
                Ok(self.bilinear(ci, cj, tx, ty))
            }
            None => Err(Error::PointTooCloseToBoundary(x)),
        }
    }

    #[inline]
    fn bilinear(&self, i: usize, j: usize, tx: f64, ty: f64) -> f64 {
        let f00 = self.at(i, j);
        let f10 = self.at(i + 1, j);
        let f01 = self.at(i, j + 1);
        let f11 = self.at(i + 1, j + 1);
        bilerp([f00, f10, f01, f11], tx, ty)
    }

    /// Corner values per cell, exterior corners replaced by ghost values
    /// that put the Dirichlet trace exactly at the boundary crossing.
    fn cell_corners(&self) -> &Vec<Option<[f64; 4]>> {
        self.cells.get_or_init(|| {
            let g = &*self.grid;
            let mut cells = vec![None; (g.nx - 1) * (g.ny - 1)];
            // corner order: (i,j), (i+1,j), (i,j+1), (i+1,j+1)
            const OFF: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
            for j in 0..g.ny - 1 {
                for i in 0..g.nx - 1 {
                    let inside: [bool; 4] = OFF.map(|(a, b)| g.is_interior(i + a, j + b));
                    if !inside.iter().any(|&b| b) {
                        continue;
                    }
                    let mut vals = [0.0; 4];
                    for c in 0..4 {
                        let (a, b) = OFF[c];
                        if inside[c] {
                            vals[c] = self.at(i + a, j + b);
                            continue;
                        }
                        // axis partners share one coordinate with the corner
                        let mut sum = 0.0;
                        let mut count = 0;
                        for p in 0..4 {
                            if !inside[p] {
                                continue;
                            }
                            let (pa, pb) = OFF[p];
                            let dir = direction(a as i64 - pa as i64, b as i64 - pb as i64);
                            let axis = pa == a || pb == b;
                            if axis {
                                let k = g.index(i + pa, j + pb);
                                let theta = g.crossings[k][dir];
                                sum += self.ghost(self.values[k], theta);
                                count += 1;
                            }
                        }
                        if count == 0 {
                            // only the diagonal partner is interior
                            let p = 3 - c;
                            let (pa, pb) = OFF[p];
                            let dir = direction(a as i64 - pa as i64, b as i64 - pb as i64);
                            let k = g.index(i + pa, j + pb);
                            sum = self.ghost(self.values[k], g.crossings[k][dir]);
                            count = 1;
                        }
                        vals[c] = sum / count as f64;
                    }
                    cells[j * (g.nx - 1) + i] = Some(vals);
                }
            }
            cells
        })
    }

    #[inline]
    fn ghost(&self, inner: f64, theta: f64) -> f64 {
        self.trace + (inner - self.trace) * (1.0 - 1.0 / theta)
    }

    /// Value at a point of the closed domain: the trace on the boundary,
    /// bilinear on fully interior cells, and ghost-corrected bilinear on cut
    /// cells. Transformed fields evaluate their base field and transform.
    pub fn evaluate(&self, x: Point) -> Result<f64> {
        if let Some(lift) = &self.lift {
            let s = lift.base.evaluate(x)?;
            return Ok(lift.scale * lift.transform.apply(s));
        }
        let g = &*self.grid;
        if !g.domain.contains(x) {
            let p = g.domain.project(x);
            let tol = 1e-9 * g.domain.diameter().max(1.0);
            if crate::geometry::dist(p, x) > tol {
                return Err(Error::PointOutsideDomain(x));
            }
            return Ok(self.trace);
        }
        let (i, j, tx, ty) = g.cell_of(x);
        if g.cell_fully_interior(i, j) {
            return Ok(self.bilinear(i, j, tx, ty));
        }
        if !self.trace.is_finite() {
            return self.interpolate(x);
        }
        match self.cell_corners()[j * (g.nx - 1) + i] {
            Some(c) => Ok(bilerp(c, tx, ty)),
            None => Ok(self.trace),
        }
    }

    /// Central-difference gradient at an interior node.
    pub fn gradient_at(&self, i: usize, j: usize) -> Result<[f64; 2]> {
        let g = &*self.grid;
        for (di, dj) in &NEIGHBORS[..4] {
            if !g.is_interior_offset(i, j, *di, *dj) || !g.is_interior(i, j) {
                return Err(Error::StencilExitsDomain(i, j));
            }
        }
        let h2 = 2.0 * g.h;
        Ok([
            (self.at(i + 1, j) - self.at(i - 1, j)) / h2,
            (self.at(i, j + 1) - self.at(i, j - 1)) / h2,
        ])
    }

    /// Second-order Hessian at an interior node (cross stencil for `f_xy`).
    pub fn hessian_at(&self, i: usize, j: usize) -> Result<[[f64; 2]; 2]> {
        let g = &*self.grid;
        if !g.is_interior(i, j) {
            return Err(Error::StencilExitsDomain(i, j));
        }
        for (di, dj) in NEIGHBORS {
            if !g.is_interior_offset(i, j, di, dj) {
                return Err(Error::StencilExitsDomain(i, j));
            }
        }
        let hh = g.h * g.h;
        let c = self.at(i, j);
        let fxx = (self.at(i + 1, j) - 2.0 * c + self.at(i - 1, j)) / hh;
        let fyy = (self.at(i, j + 1) - 2.0 * c + self.at(i, j - 1)) / hh;
        let fxy = (self.at(i + 1, j + 1) - self.at(i - 1, j + 1) - self.at(i + 1, j - 1)
            + self.at(i - 1, j - 1))
            / (4.0 * hh);
        Ok([[fxx, fxy], [fxy, fyy]])
    }

    /// Node-wise gradient components; NaN where the stencil leaves the mask.
    pub fn gradient_fields(&self) -> Result<[ScalarField; 2]> {
        let g = &*self.grid;
        let mut gx = vec![f64::NAN; self.values.len()];
        let mut gy = vec![f64::NAN; self.values.len()];
        for &k in &g.interior {
            let (i, j) = g.ij(k);
            if let Ok(d) = self.gradient_at(i, j) {
                gx[k] = d[0];
                gy[k] = d[1];
            }
        }
        Ok([self.partial(gx), self.partial(gy)])
    }

    /// Node-wise Hessian entries `[f_xx, f_xy, f_yy]`; NaN where the
    /// 8-neighborhood leaves the mask.
    pub fn hessian_fields(&self) -> [ScalarField; 3] {
        let g = &*self.grid;
        let mut out = [
            vec![f64::NAN; self.values.len()],
            vec![f64::NAN; self.values.len()],
            vec![f64::NAN; self.values.len()],
        ];
        for &k in &g.interior {
            let (i, j) = g.ij(k);
            if let Ok(hs) = self.hessian_at(i, j) {
                out[0][k] = hs[0][0];
                out[1][k] = hs[0][1];
                out[2][k] = hs[1][1];
            }
        }
        out.map(|v| self.partial(v))
    }

    /// Field whose interior values may be NaN (derived stencil quantities).
    fn partial(&self, values: Vec<f64>) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values,
            trace: f64::NAN,
            lift: None,
            cells: OnceLock::new(),
        }
    }

    /// Plain bilinear interpolation of a possibly partial field; fails when
    /// any corner of the containing cell is undefined.
    pub fn interpolate_defined(&self, x: Point) -> Result<f64> {
        let g = &*self.grid;
        let (i, j, tx, ty) = g.cell_of(x);
        let v = self.bilinear(i, j, tx, ty);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::PointTooCloseToBoundary(x))
        }
    }

    /// `u^((1 - beta) / 2)` node-wise, with boundary trace 0.
    pub fn transform_power(u: &Arc<ScalarField>, beta: f64) -> Result<ScalarField> {
        u.ensure_positive()?;
        let q = (1.0 - beta) / 2.0;
        let t = PointwiseTransform::Power(q);
        let mut out = u.map(0.0, |v| t.apply(v))?;
        out.lift = Some(Lift {
            base: u.clone(),
            transform: t,
            scale: 1.0,
        });
        Ok(out)
    }

    /// `log u` node-wise; the trace is undefined (NaN), so this field is
    /// only evaluated away from the boundary.
    pub fn transform_log(u: &Arc<ScalarField>) -> Result<ScalarField> {
        u.ensure_positive()?;
        let mut out = u.map(f64::NAN, f64::ln)?;
        out.lift = Some(Lift {
            base: u.clone(),
            transform: PointwiseTransform::Log,
            scale: 1.0,
        });
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &*self.grid;
        let e = g.extents();
        writeln!(w, "#FIELD v1")?;
        writeln!(
            w,
            "{} {} {} {} {} {}",
            g.nx,
            g.ny,
            fmt17(e[0]),
            fmt17(e[1]),
            fmt17(e[2]),
            fmt17(e[3])
        )?;
        let mut line = String::new();
        for j in 0..g.ny {
            line.clear();
            for i in 0..g.nx {
                if i > 0 {
                    line.push(' ');
                }
                let v = self.at(i, j);
                if v.is_nan() {
                    line.push_str("nan");
                } else {
                    let _ = write!(line, "{}", fmt17(v));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn write_field<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a field file; the mask implied by `domain` must match the
    /// `nan` pattern of the file.
    pub fn read_field<P: AsRef<Path>>(path: P, domain: &ConvexDomain, trace: f64) -> Result<Self> {
        let raw = RawField::read(std::fs::File::open(path)?)?;
        raw.into_field(domain, trace)
    }
}

/// Parsed contents of a field file before a domain is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawField {
    pub nx: usize,
    pub ny: usize,
    pub extents: [f64; 4],
    pub values: Vec<f64>,
}

impl RawField {
    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let magic = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
        if magic.trim_end() != "#FIELD v1" {
            return Err(Error::MalformedHeader(format!("bad magic line {magic:?}")));
        }
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::MalformedHeader("missing size line".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::MalformedHeader(format!(
                "expected 6 header fields, found {}",
                parts.len()
            )));
        }
        let bad = |s: &str| Error::MalformedHeader(format!("cannot parse {s:?}"));
        let nx: usize = parts[0].parse().map_err(|_| bad(parts[0]))?;
        let ny: usize = parts[1].parse().map_err(|_| bad(parts[1]))?;
        let mut extents = [0.0; 4];
        for (e, s) in extents.iter_mut().zip(&parts[2..]) {
            *e = s.parse().map_err(|_| bad(s))?;
        }
        let mut values = Vec::with_capacity(nx * ny);
        let mut rows = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            let before = values.len();
            for tok in line.split_whitespace() {
                let v = if tok == "nan" {
                    f64::NAN
                } else {
                    tok.parse::<f64>().map_err(|_| bad(tok))?
                };
                values.push(v);
            }
            if values.len() - before != nx {
                return Err(Error::ValueCountMismatch {
                    expected: nx,
                    found: values.len() - before,
                });
            }
        }
        if rows != ny {
            return Err(Error::ValueCountMismatch {
                expected: nx * ny,
                found: values.len(),
            });
        }
        Ok(Self {
            nx,
            ny,
            extents,
            values,
        })
    }

    pub fn into_field(self, domain: &ConvexDomain, trace: f64) -> Result<ScalarField> {
        let grid = Grid::from_extents(domain, self.nx, self.ny, self.extents)?;
        for (k, v) in self.values.iter().enumerate() {
            if grid.mask[k] == v.is_nan() {
                return Err(Error::InvalidGrid(format!(
                    "node {k}: file mask disagrees with the domain"
                )));
            }
        }
        ScalarField::from_values(Arc::new(grid), self.values, trace)
    }
}

impl FieldEval for ScalarField {
    fn eval_point(&self, x: Point) -> Result<f64> {
        self.evaluate(x)
    }
}

/// Uniform 1D grid field with linear interpolation. Points are read from
/// their first coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Field1d {
    pub x0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl Field1d {
    pub fn from_fn<F: Fn(f64) -> f64>(x0: f64, x1: f64, n: usize, f: F) -> Self {
        let h = (x1 - x0) / (n - 1) as f64;
        Self {
            x0,
            h,
            values: (0..n).map(|i| f(x0 + i as f64 * h)).collect(),
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    pub fn interpolate(&self, x: f64) -> Result<f64> {
        let n = self.values.len();
        let t = (x - self.x0) / self.h;
        let tol = 1e-12 * (n as f64);
        if t < -tol || t > (n - 1) as f64 + tol {
            return Err(Error::PointOutsideDomain([x, 0.0]));
        }
        let i = (t.floor().max(0.0) as usize).min(n - 2);
        let s = t - i as f64;
        if s == 0.0 {
            return Ok(self.values[i]);
        }
        Ok(self.values[i] * (1.0 - s) + self.values[i + 1] * s)
    }
}

impl FieldEval for Field1d {
    fn eval_point(&self, x: Point) -> Result<f64> {
        self.interpolate(x[0])
    }
}

/// Closed-form field, useful for oracles.
pub struct FnField<F>(pub F);

impl<F: Fn(Point) -> f64 + Sync> FieldEval for FnField<F> {
    fn eval_point(&self, x: Point) -> Result<f64> {
        Ok((self.0)(x))
    }
}

#[inline]
fn bilerp(c: [f64; 4], tx: f64, ty: f64) -> f64 {
    // exact at corners and along edges
    if tx == 0.0 && ty == 0.0 {
        return c[0];
    }
    let bottom = c[0] + tx * (c[1] - c[0]);
    let top = c[2] + tx * (c[3] - c[2]);
    if ty == 0.0 {
        bottom
    } else {
        bottom + ty * (top - bottom)
    }
}

fn direction(di: i64, dj: i64) -> usize {
    NEIGHBORS
        .iter()
        .position(|&d| d == (di, dj))
        .expect("unit offset")
}

/// 17 significant decimal digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Coefficients `a(x)` and `alpha^{ij}(x)` of the model problems, each a
/// closed-form expression in `x`, `y` and the parameter `eps`, with exact
/// spatial gradients.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    a: Expr,
    alpha: [Expr; 3],
    grad_a: [Expr; 2],
    grad_alpha: [[Expr; 2]; 3],
    eps: f64,
    zeta: f64,
}

fn gradient(e: &Expr) -> [Expr; 2] {
    [e.diff(Var::X), e.diff(Var::Y)]
}

impl CoefficientSet {
    /// `alpha` holds `[alpha11, alpha12, alpha22]`; `alpha21 = alpha12`.
    pub fn new(a: Expr, alpha: [Expr; 3], eps: f64, zeta: f64) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::InvalidProblem(format!("ellipticity floor must be positive, got {zeta}")));
        }
        let grad_a = gradient(&a);
        let grad_alpha = [gradient(&alpha[0]), gradient(&alpha[1]), gradient(&alpha[2])];
        Ok(Self {
            a,
            alpha,
            grad_a,
            grad_alpha,
            eps,
            zeta,
        })
    }

    pub fn parse(a: &str, alpha11: &str, alpha12: &str, alpha22: &str, eps: f64, zeta: f64) -> Result<Self> {
        Self::new(
            Expr::parse(a)?,
            [Expr::parse(alpha11)?, Expr::parse(alpha12)?, Expr::parse(alpha22)?],
            eps,
            zeta,
        )
    }

    /// `a = 1`, `alpha = I`.
    pub fn isotropic() -> Self {
        Self::new(
            Expr::num(1.0),
            [Expr::num(1.0), Expr::num(0.0), Expr::num(1.0)],
            0.0,
            1.0,
        )
        .expect("valid")
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn with_source(&self, a: Expr) -> Self {
        let grad_a = gradient(&a);
        Self {
            a,
            grad_a,
            ..self.clone()
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn source_expr(&self) -> &Expr {
        &self.a
    }

    pub fn alpha_exprs(&self) -> &[Expr; 3] {
        &self.alpha
    }

    pub fn a(&self, x: Point) -> f64 {
        self.a.eval(x[0], x[1], self.eps)
    }

    pub fn alpha(&self, x: Point) -> [[f64; 2]; 2] {
        let a11 = self.alpha[0].eval(x[0], x[1], self.eps);
        let a12 = self.alpha[1].eval(x[0], x[1], self.eps);
        let a22 = self.alpha[2].eval(x[0], x[1], self.eps);
        [[a11, a12], [a12, a22]]
    }

    pub fn grad_a(&self, x: Point) -> [f64; 2] {
        self.grad_a.clone().map(|e| e.eval(x[0], x[1], self.eps))
    }

    /// Gradient of `alpha^{ij}`.
    pub fn grad_alpha(&self, i: usize, j: usize, x: Point) -> [f64; 2] {
        let slot = match (i, j) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        [
            self.grad_alpha[slot][0].eval(x[0], x[1], self.eps),
            self.grad_alpha[slot][1].eval(x[0], x[1], self.eps),
        ]
    }

    /// Largest gradient norm over the distinct entries of `alpha`.
    pub fn max_grad_alpha_norm(&self, x: Point) -> f64 {
        (0..3)
            .map(|s| {
                let gx = self.grad_alpha[s][0].eval(x[0], x[1], self.eps);
                let gy = self.grad_alpha[s][1].eval(x[0], x[1], self.eps);
                gx.hypot(gy)
            })
            .fold(0.0, f64::max)
    }

    pub fn is_constant(&self) -> bool {
        !self.a.depends_on_space() && self.alpha.iter().all(|e| !e.depends_on_space())
    }

    /// Checks `a > 0` and the ellipticity floor at every interior node.
    pub fn validate_on(&self, grid: &Grid) -> Result<()> {
        for &k in grid.interior_nodes() {
            let x = grid.node_point(k);
            let av = self.a(x);
            if !(av > 0.0) {
                return Err(Error::NonpositiveSource { at: x, value: av });
            }
            let eig = smallest_eigenvalue(self.alpha(x));
            if !(eig >= self.zeta) {
                return Err(Error::EllipticityViolation {
                    at: x,
                    eig,
                    zeta: self.zeta,
                });
            }
        }
        Ok(())
    }
}

pub fn smallest_eigenvalue(m: [[f64; 2]; 2]) -> f64 {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    mean - (half * half + m[0][1] * m[1][0]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_square_grid(cells: usize) -> Arc<Grid> {
        let d = ConvexDomain::square([0.0, 0.0], 1.0).unwrap();
        Arc::new(Grid::with_cells(&d, cells).unwrap())
    }

    fn disk_grid(h: f64) -> Arc<Grid> {
        let d = ConvexDomain::disk([0.0, 0.0], 1.0).unwrap();
        Arc::new(Grid::new(&d, h).unwrap())
    }

    #[test]
    fn grid_shape_and_mask() {
        let g = disk_grid(1.0 / 64.0);
        assert_eq!((g.nx(), g.ny()), (129, 129));
        assert_eq!(g.extents(), [-1.0, 1.0, -1.0, 1.0]);
        for k in 0..g.nx() * g.ny() {
            assert_eq!(g.mask()[k], g.domain().contains(g.node_point(k)));
        }
        let d = ConvexDomain::disk([0.0, 0.0], 1.0).unwrap();
        assert!(Grid::new(&d, 0.5).is_err());
    }

    #[test]
    fn crossing_fractions_are_consistent() {
        let g = disk_grid(1.0 / 16.0);
        for &k in g.interior_nodes() {
            let p = g.node_point(k);
            for (dir, (di, dj)) in NEIGHBORS.iter().enumerate() {
                let theta = g.crossings(k)[dir];
                let q = [p[0] + *di as f64 * g.h() * theta, p[1] + *dj as f64 * g.h() * theta];
                if theta < 1.0 {
                    assert!((q[0].hypot(q[1]) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolate_examples() {
        let g = unit_square_grid(16);
        let affine = ScalarField::from_fn(g.clone(), 0.0, |p| 2.0 * p[0] + 3.0 * p[1]).unwrap();
        let v = affine.interpolate([0.37, 0.41]).unwrap();
        assert!((v - 1.97).abs() < 1e-12);
        let c = ScalarField::from_fn(g.clone(), 0.0, |_| 5.0).unwrap();
        assert_eq!(c.interpolate([0.23, 0.71]).unwrap(), 5.0);
        // h = 0.25 would violate nx >= 9, so use a grid containing those nodes
        let g8 = unit_square_grid(8);
        let xy = ScalarField::from_fn(g8, 0.0, |p| p[0] * p[1]).unwrap();
        // corners (0.125, 0.125) are nodes of the 1/8 grid; probe a cell middle
        let v = xy.interpolate([0.1875, 0.1875]).unwrap();
        // hand bilinear on corners (0.125,0.125),(0.25,0.125),(0.125,0.25),(0.25,0.25)
        let want = 0.25 * (0.015625 + 0.03125 + 0.03125 + 0.0625);
        assert!((v - want).abs() < 1e-15);
    }

    #[test]
    fn interpolate_falls_back_then_fails() {
        let g = unit_square_grid(16);
        let affine = ScalarField::from_fn(g.clone(), 0.0, |p| 2.0 * p[0] + 3.0 * p[1]).unwrap();
        // first cell touches the boundary nodes; extrapolation is exact for affine data
        let v = affine.interpolate([0.02, 0.03]).unwrap();
        assert!((v - (0.04 + 0.09)).abs() < 1e-12);
        let far = ScalarField::from_fn(g, 0.0, |_| 1.0).unwrap();
        assert!(matches!(
            far.interpolate([5.0, 5.0]),
            Err(Error::PointTooCloseToBoundary(_))
        ));
    }

    #[test]
    fn evaluate_respects_trace_on_cut_cells() {
        // u = 1 - |x|^2 vanishes on the unit circle; ghosts keep it exact to O(h^2)
        let g = disk_grid(1.0 / 32.0);
        let u = ScalarField::from_fn(g.clone(), 0.0, |p| 1.0 - p[0] * p[0] - p[1] * p[1]).unwrap();
        assert_eq!(u.evaluate([1.0, 0.0]).unwrap(), 0.0);
        let mut worst = 0.0f64;
        for k in 0..2000 {
            let t = k as f64 * 0.0031;
            let r = 1.0 - 0.05 * ((k % 37) as f64 / 37.0);
            let p = [r * t.cos(), r * t.sin()];
            let want = 1.0 - r * r;
            worst = worst.max((u.evaluate(p).unwrap() - want).abs());
        }
        assert!(worst < 4.0 * g.h() * g.h(), "worst {worst}");
        assert!(u.evaluate([1.5, 0.0]).is_err());
    }

    #[test]
    fn derivative_examples() {
        let g = unit_square_grid(64);
        let affine = ScalarField::from_fn(g.clone(), 0.0, |p| 2.0 * p[0] + 3.0 * p[1]).unwrap();
        let d = affine.gradient_at(20, 30).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-10 && (d[1] - 3.0).abs() < 1e-10);
        let c = ScalarField::from_fn(g.clone(), 0.0, |_| 4.0).unwrap();
        assert_eq!(c.gradient_at(5, 5).unwrap(), [0.0, 0.0]);
        let s = ScalarField::from_fn(g.clone(), 0.0, |p| (PI * p[0]).sin() * (PI * p[1]).sin()).unwrap();
        let d = s.gradient_at(32, 32).unwrap();
        assert!(d[0].abs() < 1e-10 && d[1].abs() < 1e-10);

        let sq = ScalarField::from_fn(g.clone(), 0.0, |p| p[0] * p[0]).unwrap();
        let hs = sq.hessian_at(10, 40).unwrap();
        assert!((hs[0][0] - 2.0).abs() < 1e-9 && hs[0][1].abs() < 1e-9 && hs[1][1].abs() < 1e-9);
        let xy = ScalarField::from_fn(g.clone(), 0.0, |p| p[0] * p[1]).unwrap();
        let hs = xy.hessian_at(10, 40).unwrap();
        assert!(hs[0][0].abs() < 1e-9 && (hs[0][1] - 1.0).abs() < 1e-9 && hs[1][1].abs() < 1e-9);
        let hs = s.hessian_at(32, 32).unwrap();
        let tol = 10.0 * g.h() * g.h();
        assert!((hs[0][0] + PI * PI).abs() < tol && (hs[1][1] + PI * PI).abs() < tol);
        assert!(hs[0][1].abs() < tol);
        assert!(matches!(s.hessian_at(1, 5), Err(Error::StencilExitsDomain(1, 5))));
        assert!(matches!(s.gradient_at(0, 5), Err(Error::StencilExitsDomain(0, 5))));
    }

    #[test]
    fn derivative_convergence_factor() {
        let f = |p: Point| (PI * p[0]).sin() * (PI * p[1]).sin();
        let errors = |cells: usize| {
            let g = unit_square_grid(cells);
            let s = ScalarField::from_fn(g.clone(), 0.0, f).unwrap();
            let (mut eg, mut eh) = (0.0f64, 0.0f64);
            for j in 2..cells - 1 {
                for i in 2..cells - 1 {
                    let p = g.coord(i, j);
                    let d = s.gradient_at(i, j).unwrap();
                    let gx = PI * (PI * p[0]).cos() * (PI * p[1]).sin();
                    let gy = PI * (PI * p[0]).sin() * (PI * p[1]).cos();
                    eg = eg.max((d[0] - gx).abs()).max((d[1] - gy).abs());
                    let hs = s.hessian_at(i, j).unwrap();
                    let hxx = -PI * PI * f(p);
                    let hxy = PI * PI * (PI * p[0]).cos() * (PI * p[1]).cos();
                    eh = eh
                        .max((hs[0][0] - hxx).abs())
                        .max((hs[1][1] - hxx).abs())
                        .max((hs[0][1] - hxy).abs());
                }
            }
            (eg, eh)
        };
        let (g1, h1) = errors(32);
        let (g2, h2) = errors(64);
        assert!(g1 / g2 >= 3.5, "gradient ratio {}", g1 / g2);
        assert!(h1 / h2 >= 3.5, "hessian ratio {}", h1 / h2);
    }

    #[test]
    fn transform_examples() {
        let g = unit_square_grid(16);
        let u = Arc::new(ScalarField::from_fn(g.clone(), 0.0, |_| 4.0).unwrap());
        let t = ScalarField::transform_power(&u, 0.0).unwrap();
        assert!(t.interior_values().iter().all(|&v| v == 2.0));
        assert_eq!(t.trace(), 0.0);
        let u16 = Arc::new(ScalarField::from_fn(g.clone(), 0.0, |_| 16.0).unwrap());
        let t = ScalarField::transform_power(&u16, 0.5).unwrap();
        assert!(t.interior_values().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let ones = Arc::new(ScalarField::from_fn(g.clone(), 0.0, |_| 1.0).unwrap());
        for beta in [0.0, 0.3, 0.9] {
            let t = ScalarField::transform_power(&ones, beta).unwrap();
            assert!(t.interior_values().iter().all(|&v| v == 1.0));
        }
        let l = ScalarField::transform_log(&ones).unwrap();
        assert!(l.interior_values().iter().all(|&v| v == 0.0));
        assert!(l.trace().is_nan());
        let e = Arc::new(ScalarField::from_fn(g.clone(), 0.0, |_| std::f64::consts::E).unwrap());
        let l = ScalarField::transform_log(&e).unwrap();
        assert!(l.interior_values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let gauss = Arc::new(
            ScalarField::from_fn(g.clone(), 0.0, |p| (-(p[0] * p[0] + p[1] * p[1])).exp()).unwrap(),
        );
        let l = ScalarField::transform_log(&gauss).unwrap();
        for &k in g.interior_nodes() {
            let p = g.node_point(k);
            assert!((l.values()[k] + p[0] * p[0] + p[1] * p[1]).abs() < 1e-14);
            assert!((l.values()[k].exp() - gauss.values()[k]).abs() < 1e-12);
        }
        let neg = Arc::new(ScalarField::from_fn(g, 0.0, |p| p[0] - 0.5).unwrap());
        assert!(matches!(
            ScalarField::transform_power(&neg, 0.5),
            Err(Error::NonpositiveInputValue { .. })
        ));
        assert!(matches!(
            ScalarField::transform_log(&neg),
            Err(Error::NonpositiveInputValue { .. })
        ));
    }

    #[test]
    fn field_file_round_trip_and_errors() {
        let g = disk_grid(1.0 / 8.0);
        let f = ScalarField::from_fn(g.clone(), 0.0, |p| (3.0 * p[0]).sin() / 7.0 + p[1]).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#FIELD v1\n17 17 "));
        assert!(text.lines().nth(2).unwrap().split(' ').all(|t| t == "nan"));
        let back = RawField::read(&buf[..]).unwrap().into_field(g.domain(), 0.0).unwrap();
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        // drop one row
        let short: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            RawField::read(short.as_bytes()),
            Err(Error::ValueCountMismatch { .. })
        ));
        let bad_nx = text.replacen("17 17", "18 17", 1);
        assert!(matches!(
            RawField::read(bad_nx.as_bytes()),
            Err(Error::ValueCountMismatch { .. })
        ));
        assert!(matches!(
            RawField::read("#FIELD v2\n".as_bytes()),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            RawField::read("#FIELD v1\n9 9 0 1\n".as_bytes()),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn coefficient_invariants() {
        let c = CoefficientSet::parse(
            "1 + eps*sin(2*x + y)",
            "1 + eps*sin(x)",
            "0.1*eps*x",
            "1 + eps*cos(y)",
            0.2,
            0.5,
        )
        .unwrap();
        let g = disk_grid(1.0 / 16.0);
        c.validate_on(&g).unwrap();
        for &k in g.interior_nodes() {
            let p = g.node_point(k);
            let m = c.alpha(p);
            assert_eq!(m[0][1], m[1][0]);
            assert!(smallest_eigenvalue(m) >= 0.5);
            let ga = c.grad_a(p);
            let want = [0.2 * 2.0 * (2.0 * p[0] + p[1]).cos(), 0.2 * (2.0 * p[0] + p[1]).cos()];
            assert!((ga[0] - want[0]).abs() < 1e-15 && (ga[1] - want[1]).abs() < 1e-15);
        }
        let bad = CoefficientSet::parse("1", "1", "2", "1", 0.0, 0.1).unwrap();
        assert!(matches!(bad.validate_on(&g), Err(Error::EllipticityViolation { .. })));
        let neg = CoefficientSet::parse("x", "1", "0", "1", 0.0, 0.1).unwrap();
        assert!(matches!(neg.validate_on(&g), Err(Error::NonpositiveSource { .. })));
    }
}
