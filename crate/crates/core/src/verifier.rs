//! Audits of the convexity maximum principles at a located deficit
//! maximizer, and of the linear-in-eps almost-concavity bounds.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concavity::{concavity_fn, harmonic_from_values, joint_concavity_fn, DeficitReport, HcValue, Triple};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fields::{CoefficientSet, ScalarField};
use crate::geometry::{lerp, ConvexDomain, Point};
use crate::solver::{Nonlinearity, Phi, ProblemSpec};

/// Space dimension of the shipped problems.
const N: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BKind {
    /// `b = (-s)^-1 f_xi(x)`, defined for `s < 0`.
    PowerTransform { beta: f64 },
    /// `b = alpha(xi, xi) + a + eps e^s phi(e^-s)`.
    LogTransform { phi: Phi, eps: f64 },
}

/// Lower-order term `b(x, s, xi)` of the transformed equation
/// `tr(alpha D^2 v) = b(x, v, Dv)`.
#[derive(Debug, Clone)]
pub struct BFunction {
    pub kind: BKind,
    coeffs: CoefficientSet,
}

fn quad(m: [[f64; 2]; 2], xi: [f64; 2]) -> f64 {
    m[0][0] * xi[0] * xi[0] + 2.0 * m[0][1] * xi[0] * xi[1] + m[1][1] * xi[1] * xi[1]
}

impl BFunction {
    pub fn power(coeffs: CoefficientSet, beta: f64) -> Result<Self> {
        Nonlinearity::Power { beta }.validate()?;
        Ok(Self {
            kind: BKind::PowerTransform { beta },
            coeffs,
        })
    }

    /// `eps = 0` is allowed here; it is the degenerate eigenvalue case.
    pub fn log(coeffs: CoefficientSet, phi: Phi, eps: f64) -> Self {
        Self {
            kind: BKind::LogTransform { phi, eps },
            coeffs,
        }
    }

    pub fn for_problem(spec: &ProblemSpec) -> Result<Self> {
        match spec.nonlinearity {
            Nonlinearity::Power { beta } => Self::power(spec.coefficients.clone(), beta),
            Nonlinearity::EigenPerturbed { phi, eps_phi } => Ok(Self::log(spec.coefficients.clone(), phi, eps_phi)),
        }
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }

    fn f_xi(&self, beta: f64, x: Point, xi: [f64; 2]) -> f64 {
        self.coeffs.a(x) * (1.0 - beta) / 2.0 + (1.0 + beta) / (1.0 - beta) * quad(self.coeffs.alpha(x), xi)
    }

    pub fn value(&self, x: Point, s: f64, xi: [f64; 2]) -> Result<f64> {
        match self.kind {
            BKind::PowerTransform { beta } => {
                if s >= 0.0 {
                    return Err(Error::SDomainViolation(s));
                }
                Ok(self.f_xi(beta, x, xi) / -s)
            }
            BKind::LogTransform { phi, eps } => {
                Ok(quad(self.coeffs.alpha(x), xi) + self.coeffs.a(x) + eps * s.exp() * phi.value((-s).exp()))
            }
        }
    }

    /// `d b / d s`.
    pub fn ds(&self, x: Point, s: f64, xi: [f64; 2]) -> Result<f64> {
        match self.kind {
            BKind::PowerTransform { beta } => {
                if s >= 0.0 {
                    return Err(Error::SDomainViolation(s));
                }
                Ok(self.f_xi(beta, x, xi) / (s * s))
            }
            BKind::LogTransform { phi, eps } => {
                let t = (-s).exp();
                Ok(eps * (s.exp() * phi.value(t) - phi.derivative(t)))
            }
        }
    }
}

/// The transform whose concavity is studied: `u^((1 - beta)/2)` or `log u`.
pub fn transform_for(u: &Arc<ScalarField>, nonlinearity: &Nonlinearity) -> Result<ScalarField> {
    match *nonlinearity {
        Nonlinearity::Power { beta } => ScalarField::transform_power(u, beta),
        Nonlinearity::EigenPerturbed { .. } => ScalarField::transform_log(u),
    }
}

/// Largest gradient norm of the `alpha^{ij}` along `[x1, x3]`, `m` samples.
pub fn epsilon_of_xi(coeffs: &CoefficientSet, x1: Point, x3: Point, m: usize) -> f64 {
    let m = m.max(2);
    (0..m)
        .map(|k| coeffs.max_grad_alpha_norm(lerp(x1, x3, k as f64 / (m - 1) as f64)))
        .fold(0.0, f64::max)
}

fn hessian_near(v: &ScalarField, hess: &[ScalarField; 3], x: Point) -> Result<[f64; 3]> {
    let g = v.grid();
    let (i, j, tx, ty) = g.cell_of(x);
    for (di, dj, t) in [(0, 0, (tx, ty)), (1, 0, (1.0 - tx, ty)), (0, 1, (tx, 1.0 - ty)), (1, 1, (1.0 - tx, 1.0 - ty))] {
        if t.0.abs() < 1e-12 && t.1.abs() < 1e-12 {
            let hs = v.hessian_at(i + di, j + dj)?;
            return Ok([hs[0][0], hs[0][1], hs[1][1]]);
        }
    }
    let mut out = [0.0; 3];
    for (o, f) in out.iter_mut().zip(hess) {
        *o = f.interpolate_defined(x).map_err(|_| Error::StencilExitsDomain(i, j))?;
    }
    Ok(out)
}

/// `n^2 max_{ij} max_{k in {1,3}} |v_ij(x_k)| diam`.
pub fn c_const(v: &ScalarField, x1: Point, x3: Point, domain: &ConvexDomain) -> Result<f64> {
    let hess = v.hessian_fields();
    let mut m = 0.0f64;
    for x in [x1, x3] {
        for e in hessian_near(v, &hess, x)? {
            m = m.max(e.abs());
        }
    }
    Ok(N * N * m * domain.diameter())
}

/// Sampled infima of `d_s b` and `b` over the segment times the s-range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaNu {
    pub sigma_raw: f64,
    pub nu_raw: f64,
    /// Raw infimum minus the sampled Lipschitz margin.
    pub sigma: f64,
    pub nu: f64,
    pub samples: usize,
}

pub fn sigma_nu_estimate(
    bfun: &BFunction,
    x1: Point,
    x3: Point,
    s1: f64,
    s3: f64,
    xi: [f64; 2],
    m: usize,
) -> Result<SigmaNu> {
    let m = m.max(2);
    let (lo, hi) = (s1.min(s3), s1.max(s3));
    if matches!(bfun.kind, BKind::PowerTransform { .. }) && hi >= 0.0 {
        return Err(Error::SDomainViolation(hi));
    }
    let step = 1.0 / (m - 1) as f64;
    let mut db = vec![0.0; m * m];
    let mut bv = vec![0.0; m * m];
    for a in 0..m {
        let x = lerp(x1, x3, a as f64 * step);
        for c in 0..m {
            let s = lo + (hi - lo) * c as f64 * step;
            db[a * m + c] = bfun.ds(x, s, xi)?;
            bv[a * m + c] = bfun.value(x, s, xi)?;
        }
    }
    let inf = |g: &[f64]| g.iter().copied().fold(f64::INFINITY, f64::min);
    // largest change between neighboring samples
    let jump = |g: &[f64]| {
        let mut l = 0.0f64;
        for a in 0..m {
            for c in 0..m {
                let here = g[a * m + c];
                if a + 1 < m {
                    l = l.max((g[(a + 1) * m + c] - here).abs());
                }
                if c + 1 < m {
                    l = l.max((g[a * m + c + 1] - here).abs());
                }
            }
        }
        l
    };
    let (sigma_raw, nu_raw) = (inf(&db), inf(&bv));
    Ok(SigmaNu {
        sigma_raw,
        nu_raw,
        sigma: sigma_raw - jump(&db),
        nu: nu_raw - jump(&bv),
        samples: m * m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditStatus {
    Vacuous,
    Pass,
    Fail,
    HypothesisFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditOptions {
    pub slack: f64,
    /// Samples along the segment for `eps(xi)`.
    pub segment_samples: usize,
    /// Samples per axis for `sigma` and `nu`.
    pub sigma_samples: usize,
    /// Audit even when the deficit is below the floor.
    pub force: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            slack: 0.05,
            segment_samples: 257,
            sigma_samples: 65,
            force: false,
        }
    }
}

/// One side of the inequality, with `sigma`, `nu` either raw or
/// safeguarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMeasures {
    pub xi: [f64; 2],
    pub s1: f64,
    pub s3: f64,
    pub rho: f64,
    pub sigma: SigmaNu,
    pub eps_xi: f64,
    pub c_const: f64,
    pub jc: f64,
    pub hc: HcValue,
    pub lhs: f64,
    /// Theorem 2 only: `jointly-concave` when `jc >= 0`, else `general`.
    pub branch: Option<String>,
    pub safeguarded: Option<Bound>,
    pub raw: Option<Bound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremAudit {
    pub theorem: Theorem,
    pub status: AuditStatus,
    pub triple: Triple,
    pub deficit: f64,
    pub floor: f64,
    pub forced: bool,
    pub sigma_positive: Option<bool>,
    pub nu_positive: Option<bool>,
    pub slack: f64,
    pub measures: Option<AuditMeasures>,
    pub warnings: Vec<String>,
}

fn bound(lhs: f64, rhs: f64, slack: f64) -> Bound {
    let margin = rhs - lhs;
    Bound {
        rhs,
        margin,
        pass: margin >= -slack * rhs.abs(),
    }
}

/// `rho = min(d(x1), d(x3), inradius / 2)`, at least `3h`.
fn localize(t: &Triple, domain: &ConvexDomain, h: f64) -> Result<f64> {
    let d = |x: Point| {
        if domain.contains(x) {
            domain.boundary_distance(x).unwrap_or(0.0)
        } else {
            0.0
        }
    };
    let rho = d(t.x1).min(d(t.x3)).min(domain.inradius() / 2.0);
    if rho < 3.0 * h {
        return Err(Error::BoundaryMaximum {
            distance: rho,
            required: 3.0 * h,
        });
    }
    Ok(rho)
}

fn audit(v: &ScalarField, bfun: &BFunction, report: &DeficitReport, opts: &AuditOptions, theorem: Theorem) -> Result<TheoremAudit> {
    let domain = v.grid().domain();
    let mut out = TheoremAudit {
        theorem,
        status: AuditStatus::Vacuous,
        triple: report.triple,
        deficit: report.deficit,
        floor: report.floor,
        forced: opts.force,
        sigma_positive: None,
        nu_positive: None,
        slack: opts.slack,
        measures: None,
        warnings: Vec::new(),
    };
    if !domain.strongly_convex() {
        out.warnings.push("domain is not strongly convex".into());
    }
    if !report.above_floor() && !opts.force {
        return Ok(out);
    }
    let t = report.triple;
    let rho = localize(&t, domain, v.grid().h())?;
    let [gx, gy] = v.gradient_fields()?;
    let xi = [gx.interpolate_defined(t.x1)?, gy.interpolate_defined(t.x1)?];
    let (s1, s3) = (v.evaluate(t.x1)?, v.evaluate(t.x3)?);
    let sn = sigma_nu_estimate(bfun, t.x1, t.x3, s1, s3, xi, opts.sigma_samples)?;
    let eps_xi = epsilon_of_xi(bfun.coefficients(), t.x1, t.x3, opts.segment_samples);
    let c = c_const(v, t.x1, t.x3, domain)?;
    let b = |x: Point, s: f64| bfun.value(x, s, xi).unwrap_or(f64::NAN);
    let jc = joint_concavity_fn(b, &t, s1, s3)?;
    let s2 = t.lambda * s3 + (1.0 - t.lambda) * s1;
    let hc = harmonic_from_values(b(t.x1, s1), b(t.x2(), s2), b(t.x3, s3), t.lambda);
    let lhs = concavity_fn(v, &t)?;
    let mut m = AuditMeasures {
        xi,
        s1,
        s3,
        rho,
        sigma: sn,
        eps_xi,
        c_const: c,
        jc,
        hc,
        lhs,
        branch: None,
        safeguarded: None,
        raw: None,
    };
    if theorem == Theorem::Second && hc == HcValue::Undefined {
        return Err(Error::UndefinedHarmonicConcavity);
    }
    let sigma_ok = sn.sigma > 0.0 && sn.sigma_raw > 0.0;
    out.sigma_positive = Some(sigma_ok);
    let mut hypotheses = sigma_ok;
    if theorem == Theorem::Second {
        let nu_ok = sn.nu > 0.0 && sn.nu_raw > 0.0;
        out.nu_positive = Some(nu_ok);
        hypotheses &= nu_ok;
    }
    if !hypotheses {
        out.status = AuditStatus::HypothesisFailure;
        out.measures = Some(m);
        return Ok(out);
    }
    let rhs = |sigma: f64, nu: f64| -> Result<f64> {
        let ce = c * eps_xi;
        Ok(match theorem {
            Theorem::First => (-jc + ce) / sigma,
            Theorem::Second if jc >= 0.0 => (ce + ce * ce / nu) / sigma,
            Theorem::Second => {
                let hc = hc.value().ok_or(Error::UndefinedHarmonicConcavity)?;
                (-hc + ce * (1.0 - jc / nu) + ce * ce / nu) / sigma
            }
        })
    };
    if theorem == Theorem::Second {
        m.branch = Some(if jc >= 0.0 { "jointly-concave" } else { "general" }.into());
    }
    let safe = bound(lhs, rhs(sn.sigma, sn.nu)?, opts.slack);
    let raw = bound(lhs, rhs(sn.sigma_raw, sn.nu_raw)?, opts.slack);
    out.status = if safe.pass && raw.pass {
        AuditStatus::Pass
    } else {
        AuditStatus::Fail
    };
    m.safeguarded = Some(safe);
    m.raw = Some(raw);
    out.measures = Some(m);
    Ok(out)
}

/// First convexity principle: `C_v <= (-JC + C eps(xi)) / sigma`.
pub fn audit_theorem1(v: &ScalarField, bfun: &BFunction, report: &DeficitReport, opts: &AuditOptions) -> Result<TheoremAudit> {
    audit(v, bfun, report, opts, Theorem::First)
}

/// Second convexity principle, two branches on the sign of `JC`.
pub fn audit_theorem2(v: &ScalarField, bfun: &BFunction, report: &DeficitReport, opts: &AuditOptions) -> Result<TheoremAudit> {
    audit(v, bfun, report, opts, Theorem::Second)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemarkWitness {
    pub x1: f64,
    pub x3: f64,
    pub s1: f64,
    pub s3: f64,
    pub lambda: f64,
    pub hc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemarkAudit {
    pub g0: String,
    pub interval: [f64; 2],
    /// `witness-found` or `search-exhausted`.
    pub status: String,
    pub witness: Option<RemarkWitness>,
    pub evaluated: usize,
}

/// Looks for a triple where `b = 1 / (s g0(x))` has negative harmonic
/// concavity, by a grid search over `(x1, s1, x3, s3, lambda)`.
pub fn audit_remark_noconc(g0: &Expr, interval: [f64; 2], points: usize) -> Result<RemarkAudit> {
    let n = points.max(3);
    let (a, c) = (interval[0], interval[1]);
    if !(c > a) {
        return Err(Error::InvalidProblem(format!("empty interval [{a}, {c}]")));
    }
    let g = |x: f64| g0.eval(x, 0.0, 0.0);
    for k in 0..n {
        let x = a + (c - a) * k as f64 / (n - 1) as f64;
        if !(g(x) > 0.0) {
            return Err(Error::InvalidProblem(format!("g0 must be positive, g0({x}) = {}", g(x))));
        }
    }
    let b = |x: f64, s: f64| 1.0 / (s * g(x));
    let xs: Vec<f64> = (0..n).map(|k| a + (c - a) * k as f64 / (n - 1) as f64).collect();
    let ss: Vec<f64> = (0..n).map(|k| 0.5 + 1.5 * k as f64 / (n - 1) as f64).collect();
    let ls: Vec<f64> = (1..n).map(|k| k as f64 / n as f64).collect();
    let mut best: Option<RemarkWitness> = None;
    let mut evaluated = 0;
    for &x1 in &xs {
        for &s1 in &ss {
            for &x3 in &xs {
                for &s3 in &ss {
                    for &l in &ls {
                        evaluated += 1;
                        let (x2, s2) = (l * x3 + (1.0 - l) * x1, l * s3 + (1.0 - l) * s1);
                        let hc = match harmonic_from_values(b(x1, s1), b(x2, s2), b(x3, s3), l) {
                            HcValue::Value(v) => v,
                            HcValue::Undefined => continue,
                        };
                        if hc < -1e-9 && best.is_none_or(|w| hc < w.hc) {
                            best = Some(RemarkWitness {
                                x1,
                                x3,
                                s1,
                                s3,
                                lambda: l,
                                hc,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(RemarkAudit {
        g0: format!("{g0}"),
        interval,
        status: if best.is_some() { "witness-found" } else { "search-exhausted" }.into(),
        witness: best,
        evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionSummary {
    pub eps: f64,
    /// `sup |grad a| + max_ij sup |grad alpha^{ij}|` over the closed domain.
    pub eps_meas: f64,
    pub grad_a_sup: f64,
    pub grad_alpha_sup: f64,
    pub deficit: f64,
    pub floor: f64,
    pub above_floor: bool,
    /// `deficit / eps_meas`; absent when `eps_meas = 0`.
    pub ratio: Option<f64>,
    pub samples: usize,
}

/// Sup over the closed domain of a nonnegative function by dense sampling
/// and pattern-search polishing.
fn domain_sup<F: Fn(Point) -> f64 + Sync>(domain: &ConvexDomain, f: F, n: usize) -> (f64, usize) {
    let bb = domain.bounding_box();
    let pts: Vec<Point> = (0..n * n)
        .map(|k| {
            let (i, j) = (k % n, k / n);
            let x = bb[0] + (bb[1] - bb[0]) * i as f64 / (n - 1) as f64;
            let y = bb[2] + (bb[3] - bb[2]) * j as f64 / (n - 1) as f64;
            domain.project([x, y])
        })
        .collect();
    let (mut best, mut at) = pts
        .par_iter()
        .map(|&p| (f(p), p))
        .reduce(|| (f64::NEG_INFINITY, [0.0, 0.0]), |a, b| if b.0 > a.0 { b } else { a });
    let mut step = (bb[1] - bb[0]).max(bb[3] - bb[2]) / (n - 1) as f64;
    let mut evals = pts.len();
    while step > 1e-9 {
        let mut moved = false;
        for d in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            let q = domain.project([at[0] + step * d[0], at[1] + step * d[1]]);
            let v = f(q);
            evals += 1;
            if v > best {
                best = v;
                at = q;
                moved = true;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    (best, evals)
}

/// Records `(eps_meas, deficit)` for one instance.
pub fn audit_propositions(problem: &ProblemSpec, report: &DeficitReport) -> PropositionSummary {
    let c = &problem.coefficients;
    let n = 257;
    let (grad_a_sup, na) = if c.source_expr().depends_on_space() {
        domain_sup(&problem.domain, |x| {
            let g = c.grad_a(x);
            g[0].hypot(g[1])
        }, n)
    } else {
        (0.0, 0)
    };
    let (grad_alpha_sup, nb) = if c.alpha_exprs().iter().any(|e| e.depends_on_space()) {
        domain_sup(&problem.domain, |x| c.max_grad_alpha_norm(x), n)
    } else {
        (0.0, 0)
    };
    let eps_meas = grad_a_sup + grad_alpha_sup;
    PropositionSummary {
        eps: c.eps(),
        eps_meas,
        grad_a_sup,
        grad_alpha_sup,
        deficit: report.deficit,
        floor: report.floor,
        above_floor: report.above_floor(),
        ratio: (eps_meas > 0.0).then(|| report.deficit / eps_meas),
        samples: na + nb,
    }
}
