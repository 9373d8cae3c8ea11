//! Newton solver for `-sum alpha^{ij} D_ij u = F(x, u)` with zero Dirichlet
//! data on a masked grid.

use std::sync::Arc;
use std::time::Instant;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr, Var};
use crate::fields::{CoefficientSet, Grid, ScalarField, E, N, NE, NEIGHBORS, NW, S, SE, SW, W};
use crate::geometry::{ConvexDomain, Point};

/// Perturbation `phi` of the eigenvalue problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "gamma", rename_all = "snake_case")]
pub enum Phi {
    /// `phi = 1`
    One,
    /// `phi(t) = 1 / (1 + t)`
    InverseShift,
    /// `phi(t) = exp(-t)`
    Exp,
    /// `phi(t) = t^gamma`, `0 <= gamma < 1`
    Power(f64),
}

/// Which admissibility condition a `phi` satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiCondition {
    /// `phi' <= 0`
    Nonincreasing,
    /// `e^s phi(e^-s) - phi'(e^-s) >= gamma > 0`
    Loosened,
}

impl Phi {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Phi::One => 1.0,
            Phi::InverseShift => 1.0 / (1.0 + t),
            Phi::Exp => (-t).exp(),
            Phi::Power(g) => t.powf(g),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Phi::One => 0.0,
            Phi::InverseShift => -1.0 / ((1.0 + t) * (1.0 + t)),
            Phi::Exp => -(-t).exp(),
            Phi::Power(g) => {
                if g == 0.0 {
                    0.0
                } else {
                    g * t.powf(g - 1.0)
                }
            }
        }
    }

    pub fn condition(&self) -> PhiCondition {
        match *self {
            Phi::Power(g) if g > 0.0 => PhiCondition::Loosened,
            _ => PhiCondition::Nonincreasing,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Phi::Power(g) if !(0.0..1.0).contains(&g) => Err(Error::InvalidProblem(format!(
                "phi exponent must lie in [0, 1), got {g}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `F = a u^beta`
    Power { beta: f64 },
    /// `F = a u + eps_phi phi(u)`
    EigenPerturbed { phi: Phi, eps_phi: f64 },
}

impl Nonlinearity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Nonlinearity::Power { beta } => {
                if beta == 1.0 {
                    Err(Error::BetaOneRejected)
                } else if !(0.0..1.0).contains(&beta) {
                    Err(Error::InvalidProblem(format!("beta must lie in [0, 1), got {beta}")))
                } else {
                    Ok(())
                }
            }
            Nonlinearity::EigenPerturbed { phi, eps_phi } => {
                phi.validate()?;
                if eps_phi > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidProblem(format!("eps_phi must be positive, got {eps_phi}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverControls {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Smallest line-search step before a full-length failure is declared.
    pub min_step: f64,
    pub u_floor: f64,
}

impl Default for SolverControls {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            min_step: 1.0 / 1024.0,
            u_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: ConvexDomain,
    pub h: f64,
    pub coefficients: CoefficientSet,
    pub nonlinearity: Nonlinearity,
    pub controls: SolverControls,
}

impl ProblemSpec {
    pub fn new(domain: ConvexDomain, h: f64, coefficients: CoefficientSet, nonlinearity: Nonlinearity) -> Self {
        Self {
            domain,
            h,
            coefficients,
            nonlinearity,
            controls: SolverControls::default(),
        }
    }

    /// `-Laplace u = u^beta`-type isotropic problem with `a = 1`.
    pub fn isotropic(domain: ConvexDomain, h: f64, nonlinearity: Nonlinearity) -> Self {
        Self::new(domain, h, CoefficientSet::isotropic(), nonlinearity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub min_u: f64,
    pub boundary_scheme: String,
    pub unknowns: usize,
    pub h: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Discrete operator `u -> M u + c` over interior nodes; `c` carries the
/// boundary data.
#[derive(Debug, Clone)]
pub struct Operator {
    n: usize,
    triplets: Vec<(usize, usize, f64)>,
    constant: Vec<f64>,
}

impl Operator {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn constant(&self) -> &[f64] {
        &self.constant
    }

    /// Nonzero entries of row `r` as `(column, value)`, duplicates summed.
    pub fn row(&self, r: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for &(i, j, v) in &self.triplets {
            if i == r {
                match out.iter_mut().find(|(c, _)| *c == j) {
                    Some(e) => e.1 += v,
                    None => out.push((j, v)),
                }
            }
        }
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn apply_interior(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.constant.clone();
        for &(i, j, v) in &self.triplets {
            out[i] += v * u[j];
        }
        out
    }

    pub fn apply(&self, u: &ScalarField) -> Vec<f64> {
        self.apply_interior(&u.interior_values())
    }
}

/// Discretizes `-sum alpha^{ij} D_ij` on the interior nodes of `grid`, with
/// Shortley-Weller rows next to the boundary. `boundary` supplies the
/// Dirichlet values at boundary crossings.
pub fn assemble_operator<B: Fn(Point) -> f64>(
    coeffs: &CoefficientSet,
    grid: &Grid,
    boundary: B,
) -> Result<Operator> {
    coeffs.validate_on(grid)?;
    let n = grid.interior_nodes().len();
    let h = grid.h();
    let mut triplets = Vec::with_capacity(9 * n);
    let mut constant = vec![0.0; n];
    for (row, &k) in grid.interior_nodes().iter().enumerate() {
        let (i, j) = grid.ij(k);
        let p = grid.coord(i, j);
        let m = coeffs.alpha(p);
        let theta = grid.crossings(k);
        let neighbor = |dir: usize| {
            let (di, dj) = NEIGHBORS[dir];
            grid.unknown_index(grid.index((i as i64 + di) as usize, (j as i64 + dj) as usize))
        };
        let crossing_point = |dir: usize| {
            let (di, dj) = NEIGHBORS[dir];
            [p[0] + di as f64 * theta[dir] * h, p[1] + dj as f64 * theta[dir] * h]
        };
        let push = |dir: Option<usize>, c: f64, triplets: &mut Vec<(usize, usize, f64)>, constant: &mut [f64]| match dir {
            None => triplets.push((row, row, c)),
            Some(d) => {
                match neighbor(d) {
                    Some(col) => triplets.push((row, col, c)),
                    None => constant[row] += c * boundary(crossing_point(d)),
                }
            }
        };
        // pure second derivatives, weighted by -alpha_ii
        for (weight, plus, minus) in [(m[0][0], E, W), (m[1][1], N, S)] {
            let hp = theta[plus] * h;
            let hm = theta[minus] * h;
            let scale = 2.0 / (hp + hm);
            push(Some(plus), -weight * scale / hp, &mut triplets, &mut constant);
            push(Some(minus), -weight * scale / hm, &mut triplets, &mut constant);
            push(None, weight * scale * (1.0 / hp + 1.0 / hm), &mut triplets, &mut constant);
        }
        // mixed term -2 alpha12 u_xy
        let a12 = m[0][1];
        if a12 != 0.0 {
            let c = -2.0 * a12 / (4.0 * h * h);
            for (dir, sign, opposite) in [(NE, 1.0, SW), (SW, 1.0, NE), (NW, -1.0, SE), (SE, -1.0, NW)] {
                let w = c * sign;
                if neighbor(dir).is_some() {
                    push(Some(dir), w, &mut triplets, &mut constant);
                    continue;
                }
                // ghost by extrapolation along the diagonal through the crossing
                let t = theta[dir];
                let g = boundary(crossing_point(dir));
                if neighbor(opposite).is_some() {
                    constant[row] += w * g * 2.0 / (t * (t + 1.0));
                    push(None, -w * 2.0 * (1.0 - t) / t, &mut triplets, &mut constant);
                    push(Some(opposite), w * (1.0 - t) / (1.0 + t), &mut triplets, &mut constant);
                } else {
                    constant[row] += w * g / t;
                    push(None, w * (1.0 - 1.0 / t), &mut triplets, &mut constant);
                }
            }
        }
    }
    Ok(Operator {
        n,
        triplets,
        constant,
    })
}

struct Nonlinear<'a> {
    source: Vec<f64>,
    kind: Nonlinearity,
    floor: f64,
    _grid: &'a Grid,
}

impl Nonlinear<'_> {
    /// `F(x_r, u)` and `dF/du`.
    #[inline]
    fn eval(&self, r: usize, u: f64) -> (f64, f64) {
        let a = self.source[r];
        match self.kind {
            Nonlinearity::Power { beta } => {
                if beta == 0.0 {
                    (a, 0.0)
                } else {
                    let uf = u.max(self.floor);
                    let p = uf.powf(beta);
                    (a * p, a * beta * p / uf)
                }
            }
            Nonlinearity::EigenPerturbed { phi, eps_phi } => {
                let uf = u.max(self.floor);
                (a * u + eps_phi * phi.value(uf), a + eps_phi * phi.derivative(uf))
            }
        }
    }
}

fn residual(op: &Operator, nl: &Nonlinear, u: &[f64]) -> Vec<f64> {
    let mut r = op.apply_interior(u);
    for (i, ri) in r.iter_mut().enumerate() {
        *ri -= nl.eval(i, u[i]).0;
    }
    r
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct LinearSystem {
    symbolic: Option<SymbolicLu<usize>>,
}

impl LinearSystem {
    fn solve(&mut self, n: usize, triplets: &[Triplet<usize, usize, f64>], rhs: &[f64]) -> Result<Vec<f64>> {
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, triplets)
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        if self.symbolic.is_none() {
            let sym = SymbolicLu::try_new(mat.symbolic()).map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
            self.symbolic = Some(sym);
        }
        let sym = self.symbolic.clone().expect("set above");
        let lu = Lu::try_new_with_symbolic(sym, mat.as_ref()).map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let mut x = Col::<f64>::from_fn(n, |i| rhs[i]);
        lu.solve_in_place(x.as_mat_mut());
        let out: Vec<f64> = (0..n).map(|i| x[i]).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::LinearSolve("non-finite solution".into()))
        }
    }
}

fn jacobian(op: &Operator, nl: &Nonlinear, u: &[f64]) -> Vec<Triplet<usize, usize, f64>> {
    let mut t: Vec<Triplet<usize, usize, f64>> = op
        .triplets
        .iter()
        .map(|&(i, j, v)| Triplet::new(i, j, v))
        .collect();
    for (i, &ui) in u.iter().enumerate() {
        let d = nl.eval(i, ui).1;
        t.push(Triplet::new(i, i, -d));
    }
    t
}

/// Solves the Dirichlet problem described by `spec`.
pub fn solve(spec: &ProblemSpec) -> Result<(ScalarField, SolveReport)> {
    let start = Instant::now();
    spec.nonlinearity.validate()?;
    let grid = Arc::new(Grid::new(&spec.domain, spec.h)?);
    let op = assemble_operator(&spec.coefficients, &grid, |_| 0.0)?;
    let n = op.n;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let source: Vec<f64> = grid
        .interior_nodes()
        .iter()
        .map(|&k| spec.coefficients.a(grid.node_point(k)))
        .collect();
    let ctl = spec.controls;
    let mut linear = LinearSystem { symbolic: None };

    // torsion-like start: M u0 = a, scaled to unit max
    let op_triplets: Vec<Triplet<usize, usize, f64>> =
        op.triplets.iter().map(|&(i, j, v)| Triplet::new(i, j, v)).collect();
    let rhs: Vec<f64> = source.iter().zip(&op.constant).map(|(a, c)| a - c).collect();
    let mut u = linear.solve(n, &op_triplets, &rhs)?;
    let is_linear = matches!(spec.nonlinearity, Nonlinearity::Power { beta } if beta == 0.0);
    if !is_linear {
        let m = max_norm(&u);
        if m > 0.0 {
            u.iter_mut().for_each(|v| *v /= m);
        }
    }

    let nl = Nonlinear {
        source,
        kind: spec.nonlinearity,
        floor: ctl.u_floor,
        _grid: &grid,
    };
    let mut r = residual(&op, &nl, &u);
    let mut rn = max_norm(&r);
    let mut history = vec![rn];
    let mut iterations = 0;
    while rn > ctl.tolerance {
        if iterations >= ctl.max_iterations || !rn.is_finite() {
            return Err(Error::NewtonDivergence {
                iterations,
                residual: rn,
            });
        }
        iterations += 1;
        let jac = jacobian(&op, &nl, &u);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let du = linear.solve(n, &jac, &neg)?;
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + step * b).collect();
            let tr = residual(&op, &nl, &trial);
            let tn = max_norm(&tr);
            if tn < (1.0 - 1e-4 * step) * rn || step <= ctl.min_step {
                u = trial;
                r = tr;
                rn = tn;
                break;
            }
            step *= 0.5;
        }
        history.push(rn);
    }
    let min_u = u.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_u > ctl.u_floor) {
        return Err(Error::PositivityLoss { min_u });
    }
    let field = ScalarField::from_interior(grid.clone(), &u, 0.0)?;
    let report = SolveReport {
        iterations,
        residual: rn,
        residual_history: history,
        min_u,
        boundary_scheme: "shortley-weller".into(),
        unknowns: n,
        h: grid.h(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((field, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    /// Observed order between consecutive resolutions.
    pub orders: Vec<f64>,
}

/// Builds the source `a = (-sum alpha^{ij} D_ij u*) / u*^beta` for the
/// exact solution `u_exact` (vanishing on the boundary), solves at each
/// spacing and reports max-node errors with observed orders.
pub fn manufactured_convergence(template: &ProblemSpec, u_exact: &Expr, resolutions: &[f64]) -> Result<ConvergenceReport> {
    if resolutions.len() < 2 {
        return Err(Error::NeedsTwoResolutions);
    }
    let beta = match template.nonlinearity {
        Nonlinearity::Power { beta } => beta,
        Nonlinearity::EigenPerturbed { .. } => {
            return Err(Error::InvalidProblem(
                "manufactured forcing needs a power nonlinearity".into(),
            ))
        }
    };
    let source = manufactured_source(template.coefficients.alpha_exprs(), u_exact, beta);
    let coefficients = template.coefficients.with_source(source);
    let mut errors = Vec::with_capacity(resolutions.len());
    for &h in resolutions {
        let spec = ProblemSpec {
            h,
            coefficients: coefficients.clone(),
            ..template.clone()
        };
        let (u, _) = solve(&spec)?;
        let g = u.grid();
        let err = g
            .interior_nodes()
            .iter()
            .map(|&k| {
                let p = g.node_point(k);
                (u.values()[k] - u_exact.eval(p[0], p[1], coefficients.eps())).abs()
            })
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let orders = errors
        .windows(2)
        .zip(resolutions.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect();
    Ok(ConvergenceReport {
        h: resolutions.to_vec(),
        errors,
        orders,
    })
}

pub fn manufactured_source(alpha: &[Expr; 3], u: &Expr, beta: f64) -> Expr {
    let ux = u.diff(Var::X);
    let uy = u.diff(Var::Y);
    let uxx = ux.diff(Var::X);
    let uxy = ux.diff(Var::Y);
    let uyy = uy.diff(Var::Y);
    let lu = expr::add(
        expr::add(
            expr::mul(alpha[0].clone(), uxx),
            expr::mul(expr::mul(Expr::num(2.0), alpha[1].clone()), uxy),
        ),
        expr::mul(alpha[2].clone(), uyy),
    );
    let minus_lu = expr::neg(lu);
    if beta == 0.0 {
        minus_lu
    } else {
        expr::div(minus_lu, expr::pow_e(u.clone(), Expr::num(beta)))
    }
}
