//! Experiment configuration, single-instance runs, eps-sweeps with report
//! and plot output, and the fixed baseline suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concavity::{boundary_audit, max_deficit, BoundaryClass, DeficitOptions, DeficitReport, Region};
use crate::envelope::{hyers_ulam_witness, EnvelopeSummary};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fields::{CoefficientSet, Grid, ScalarField};
use crate::geometry::ConvexDomain;
use crate::solver::{solve, Nonlinearity, Phi, ProblemSpec, SolveReport, SolverControls};
use crate::verifier::{
    audit_propositions, audit_remark_noconc, audit_theorem1, audit_theorem2, transform_for, AuditOptions,
    AuditStatus, BFunction, PropositionSummary, RemarkAudit, TheoremAudit,
};

pub const SWEEP_HEADER: &str = "#SWEEP v1";

/// Expression templates `[a, alpha11, alpha12, alpha22]` by name.
pub fn template(name: &str) -> Option<[&'static str; 4]> {
    match name {
        "isotropic" => Some(["1", "1", "0", "1"]),
        "source" => Some(["1 + eps*sin(2*x + y)", "1", "0", "1"]),
        "diagonal" => Some(["1 + eps*sin(2*x + y)", "1 + eps*sin(x)", "0", "1 + eps*cos(y)"]),
        "full" => Some([
            "1 + eps*sin(2*x + y)",
            "1 + eps*sin(x)",
            "eps*sin(x + y)/2",
            "1 + eps*cos(y)",
        ]),
        _ => None,
    }
}

pub const TEMPLATES: [&str; 4] = ["isotropic", "source", "diagonal", "full"];

fn default_zeta() -> f64 {
    0.1
}

/// A named template, optionally with individual entries overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub a: Option<String>,
    #[serde(default)]
    pub alpha11: Option<String>,
    #[serde(default)]
    pub alpha12: Option<String>,
    #[serde(default)]
    pub alpha22: Option<String>,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            template: None,
            a: None,
            alpha11: None,
            alpha12: None,
            alpha22: None,
            zeta: default_zeta(),
        }
    }
}

impl CoefficientConfig {
    pub fn build(&self, eps: f64) -> Result<CoefficientSet> {
        let name = self.template.as_deref().unwrap_or("isotropic");
        let base = template(name).ok_or_else(|| {
            Error::Config(format!("unknown coefficient template {name:?} (known: {})", TEMPLATES.join(", ")))
        })?;
        let pick = |o: &Option<String>, d: &'static str| o.clone().unwrap_or_else(|| d.to_string());
        CoefficientSet::parse(
            &pick(&self.a, base[0]),
            &pick(&self.alpha11, base[1]),
            &pick(&self.alpha12, base[2]),
            &pick(&self.alpha22, base[3]),
            eps,
            self.zeta,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearityConfig {
    Power {
        beta: f64,
    },
    /// `eps_phi` defaults to the instance's `eps`.
    EigenPerturbed {
        phi: Phi,
        #[serde(default)]
        eps_phi: Option<f64>,
    },
}

impl NonlinearityConfig {
    pub fn resolve(&self, eps: f64) -> Nonlinearity {
        match *self {
            NonlinearityConfig::Power { beta } => Nonlinearity::Power { beta },
            NonlinearityConfig::EigenPerturbed { phi, eps_phi } => Nonlinearity::EigenPerturbed {
                phi,
                eps_phi: eps_phi.unwrap_or(eps),
            },
        }
    }

    pub fn transform_name(&self) -> &'static str {
        match self {
            NonlinearityConfig::Power { .. } => "power",
            NonlinearityConfig::EigenPerturbed { .. } => "log",
        }
    }
}

fn yes() -> bool {
    true
}

fn default_k() -> f64 {
    crate::envelope::DEFAULT_AUDIT_K
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "yes")]
    pub theorems: bool,
    #[serde(default = "yes")]
    pub propositions: bool,
    #[serde(default = "yes")]
    pub envelope: bool,
    #[serde(default = "default_k")]
    pub envelope_k: f64,
    #[serde(default)]
    pub options: AuditOptions,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            theorems: true,
            propositions: true,
            envelope: true,
            envelope_k: default_k(),
            options: AuditOptions::default(),
        }
    }
}

fn default_g0() -> Vec<String> {
    ["1 + x", "exp(x)", "2 + sin(x)", "3"].map(String::from).to_vec()
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

fn nine() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemarkConfig {
    #[serde(default = "default_g0")]
    pub g0: Vec<String>,
    #[serde(default = "unit_interval")]
    pub interval: [f64; 2],
    /// Grid points per search axis.
    #[serde(default = "nine")]
    pub points: usize,
}

impl Default for RemarkConfig {
    fn default() -> Self {
        Self {
            g0: default_g0(),
            interval: unit_interval(),
            points: nine(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn five() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub domain: ConvexDomain,
    pub h: f64,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    pub nonlinearity: NonlinearityConfig,
    /// Perturbation size for single-instance commands.
    #[serde(default)]
    pub eps: f64,
    /// Perturbation sizes for `sweep`.
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub solver: SolverControls,
    #[serde(default)]
    pub deficit: DeficitOptions,
    /// The log transform is maximized over the inner parallel set at
    /// distance `log_rho_h * h`.
    #[serde(default = "five")]
    pub log_rho_h: f64,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub remark: RemarkConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Recorded in every report; all shipped computations are deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("h must be positive, got {}", self.h)));
        }
        self.nonlinearity.resolve(self.eps.max(f64::MIN_POSITIVE)).validate()?;
        self.coefficients.build(self.eps)?;
        if !(self.log_rho_h >= 0.0) {
            return Err(Error::Config(format!("log_rho_h must be nonnegative, got {}", self.log_rho_h)));
        }
        if !self.sweep.is_empty() {
            self.validate_sweep()?;
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.len() < 4 {
            return Err(Error::Config(format!(
                "a sweep needs at least 4 eps values, got {}",
                self.sweep.len()
            )));
        }
        if self.sweep.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config("sweep eps values must be positive".into()));
        }
        if self.sweep.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sweep eps values must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn problem(&self, eps: f64) -> Result<ProblemSpec> {
        let nonlinearity = self.nonlinearity.resolve(eps);
        nonlinearity.validate()?;
        let mut spec = ProblemSpec::new(self.domain.clone(), self.h, self.coefficients.build(eps)?, nonlinearity);
        spec.controls = self.solver;
        Ok(spec)
    }

    pub fn deficit_options(&self) -> DeficitOptions {
        match (self.nonlinearity, self.deficit.region) {
            (NonlinearityConfig::EigenPerturbed { .. }, Region::Closed) => self.deficit.with_region(Region::Inner {
                rho: self.log_rho_h * self.h,
            }),
            _ => self.deficit,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("concavlab-out"))
    }
}

/// One solved and analyzed instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub eps: f64,
    pub spec: ProblemSpec,
    pub u: Arc<ScalarField>,
    pub solve: SolveReport,
    /// `u^((1 - beta)/2)` or `log u`.
    pub transform: ScalarField,
    pub deficit: DeficitReport,
}

pub fn analyze(cfg: &ExperimentConfig, eps: f64) -> Result<Instance> {
    let spec = cfg.problem(eps)?;
    let (u, solve_report) = solve(&spec)?;
    let u = Arc::new(u);
    let transform = transform_for(&u, &spec.nonlinearity)?;
    let deficit = max_deficit(&transform, &cfg.deficit_options())?;
    Ok(Instance {
        eps,
        spec,
        u,
        solve: solve_report,
        transform,
        deficit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AuditOutcome {
    Completed(TheoremAudit),
    Skipped,
    Errored { code: String, message: String },
}

impl AuditOutcome {
    fn from_result(r: Result<TheoremAudit>) -> Self {
        match r {
            Ok(a) => AuditOutcome::Completed(a),
            Err(e) => AuditOutcome::Errored {
                code: e.code().into(),
                message: e.to_string(),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            AuditOutcome::Completed(a) => serde_json::to_value(a.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            AuditOutcome::Skipped => "skipped".into(),
            AuditOutcome::Errored { code, .. } => code.clone(),
        }
    }

    /// An inequality failure, as opposed to a hypothesis or setup problem.
    pub fn failed(&self) -> bool {
        matches!(self, AuditOutcome::Completed(a) if a.status == AuditStatus::Fail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAudits {
    pub boundary: BoundaryClass,
    pub theorem1: AuditOutcome,
    pub theorem2: AuditOutcome,
    pub propositions: Option<PropositionSummary>,
    pub envelope: Option<EnvelopeSummary>,
}

impl InstanceAudits {
    pub fn failed(&self) -> bool {
        self.theorem1.failed() || self.theorem2.failed()
    }
}

pub fn run_audits(cfg: &ExperimentConfig, inst: &Instance) -> Result<InstanceAudits> {
    let boundary = boundary_audit(&inst.deficit, &inst.transform);
    let (theorem1, theorem2) = if cfg.audit.theorems {
        let v = inst.transform.scaled(-1.0)?;
        let b = BFunction::for_problem(&inst.spec)?;
        let o = &cfg.audit.options;
        (
            AuditOutcome::from_result(audit_theorem1(&v, &b, &inst.deficit, o)),
            AuditOutcome::from_result(audit_theorem2(&v, &b, &inst.deficit, o)),
        )
    } else {
        (AuditOutcome::Skipped, AuditOutcome::Skipped)
    };
    let propositions = cfg
        .audit
        .propositions
        .then(|| audit_propositions(&inst.spec, &inst.deficit));
    let envelope = if cfg.audit.envelope {
        Some(hyers_ulam_witness(&inst.transform, inst.deficit.deficit, cfg.audit.envelope_k)?.summary())
    } else {
        None
    };
    Ok(InstanceAudits {
        boundary,
        theorem1,
        theorem2,
        propositions,
        envelope,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifacts {
    pub field: PathBuf,
    pub report: PathBuf,
}

/// Solves the configured instance and writes `solution.field` and
/// `solve_report.json`.
pub fn run_solve(cfg: &ExperimentConfig, out: &Path) -> Result<SolveArtifacts> {
    fs::create_dir_all(out)?;
    let spec = cfg.problem(cfg.eps)?;
    let (u, report) = solve(&spec)?;
    let field = out.join("solution.field");
    let path = out.join("solve_report.json");
    u.write_field(&field)?;
    write_json(&path, &report)?;
    write_json(
        &out.join("timings.json"),
        &[Timing {
            label: "solve".into(),
            seconds: report.wall_time_s,
        }],
    )?;
    Ok(SolveArtifacts { field, report: path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitOutput {
    pub eps: f64,
    pub transform: String,
    pub solve: SolveReport,
    pub deficit: DeficitReport,
    pub boundary: BoundaryClass,
}

pub fn run_deficit(cfg: &ExperimentConfig, out: &Path) -> Result<DeficitOutput> {
    fs::create_dir_all(out)?;
    let inst = analyze(cfg, cfg.eps)?;
    let o = DeficitOutput {
        eps: cfg.eps,
        transform: cfg.nonlinearity.transform_name().into(),
        boundary: boundary_audit(&inst.deficit, &inst.transform),
        solve: inst.solve,
        deficit: inst.deficit,
    };
    write_json(&out.join("deficit.json"), &o)?;
    Ok(o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeOutput {
    pub eps: f64,
    pub transform: String,
    pub deficit: f64,
    pub envelope: EnvelopeSummary,
}

/// Writes the transform, its concave envelope and the witness summary.
pub fn run_envelope(cfg: &ExperimentConfig, out: &Path) -> Result<EnvelopeOutput> {
    fs::create_dir_all(out)?;
    let inst = analyze(cfg, cfg.eps)?;
    let w = hyers_ulam_witness(&inst.transform, inst.deficit.deficit, cfg.audit.envelope_k)?;
    inst.transform.write_field(out.join("transform.field"))?;
    w.envelope.write_field(out.join("envelope.field"))?;
    let o = EnvelopeOutput {
        eps: cfg.eps,
        transform: cfg.nonlinearity.transform_name().into(),
        deficit: inst.deficit.deficit,
        envelope: w.summary(),
    };
    write_json(&out.join("envelope.json"), &o)?;
    Ok(o)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Theorem1,
    Theorem2,
    Props,
    Remark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum CheckOutput {
    Theorem {
        eps: f64,
        deficit: DeficitReport,
        boundary: BoundaryClass,
        audit: AuditOutcome,
    },
    Props(PropositionSummary),
    Remark { audits: Vec<RemarkAudit> },
}

impl CheckOutput {
    pub fn failed(&self) -> bool {
        matches!(self, CheckOutput::Theorem { audit, .. } if audit.failed())
    }
}

pub fn run_check(cfg: &ExperimentConfig, kind: CheckKind, out: &Path) -> Result<CheckOutput> {
    fs::create_dir_all(out)?;
    let o = match kind {
        CheckKind::Theorem1 | CheckKind::Theorem2 => {
            let inst = analyze(cfg, cfg.eps)?;
            let v = inst.transform.scaled(-1.0)?;
            let b = BFunction::for_problem(&inst.spec)?;
            let r = if kind == CheckKind::Theorem1 {
                audit_theorem1(&v, &b, &inst.deficit, &cfg.audit.options)
            } else {
                audit_theorem2(&v, &b, &inst.deficit, &cfg.audit.options)
            };
            CheckOutput::Theorem {
                eps: cfg.eps,
                boundary: boundary_audit(&inst.deficit, &inst.transform),
                deficit: inst.deficit,
                audit: AuditOutcome::from_result(r),
            }
        }
        CheckKind::Props => {
            let inst = analyze(cfg, cfg.eps)?;
            CheckOutput::Props(audit_propositions(&inst.spec, &inst.deficit))
        }
        CheckKind::Remark => {
            let audits = cfg
                .remark
                .g0
                .iter()
                .map(|g| audit_remark_noconc(&Expr::parse(g)?, cfg.remark.interval, cfg.remark.points))
                .collect::<Result<Vec<_>>>()?;
            CheckOutput::Remark { audits }
        }
    };
    write_json(&out.join("check.json"), &o)?;
    Ok(o)
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    /// `ok` or the error code that stopped the row.
    pub status: String,
    pub eps_meas: Option<f64>,
    pub deficit: Option<f64>,
    pub floor: Option<f64>,
    pub censored: bool,
    pub ratio: Option<f64>,
    pub envelope_distance: Option<f64>,
    pub envelope_consistent: Option<bool>,
    pub theorem1: String,
    pub theorem2: String,
    pub audit_pass: bool,
    pub boundary: String,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    /// Deficit below the previous uncensored row's.
    pub inversion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDetail {
    pub eps: f64,
    pub message: Option<String>,
    pub solve: Option<SolveReport>,
    pub deficit: Option<DeficitReport>,
    pub audits: Option<InstanceAudits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the log residuals.
    pub residual: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fitted(LogLogFit),
    Refused { reason: String },
}

impl FitOutcome {
    pub fn fit(&self) -> Option<&LogLogFit> {
        match self {
            FitOutcome::Fitted(f) => Some(f),
            FitOutcome::Refused { .. } => None,
        }
    }
}

/// Least squares `log y = slope log x + intercept`; needs three points.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::FitRefused(format!("{} rows, need at least 3", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::FitRefused("nonpositive value on a log axis".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::FitRefused("all x values coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(LogLogFit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
        rows: points.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    pub name: String,
    pub transform: String,
    pub h: f64,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// Fit over uncensored rows only.
    pub fit: FitOutcome,
    /// Fit over every row with a positive deficit, censored or not. Not a
    /// result; it shows the trend below the floor.
    pub diagnostic_fit: FitOutcome,
    /// `max / min - 1` of `deficit / eps_meas` over the fitted rows.
    pub ratio_spread: Option<f64>,
    pub audit_failures: usize,
    pub details: Vec<RowDetail>,
}

fn run_row(cfg: &ExperimentConfig, eps: f64) -> (SweepRow, RowDetail) {
    let mut row = SweepRow {
        eps,
        status: "ok".into(),
        eps_meas: None,
        deficit: None,
        floor: None,
        censored: false,
        ratio: None,
        envelope_distance: None,
        envelope_consistent: None,
        theorem1: "skipped".into(),
        theorem2: "skipped".into(),
        audit_pass: true,
        boundary: String::new(),
        iterations: None,
        residual: None,
        inversion: false,
    };
    let mut detail = RowDetail {
        eps,
        message: None,
        solve: None,
        deficit: None,
        audits: None,
    };
    let result = analyze(cfg, eps).and_then(|inst| {
        let audits = run_audits(cfg, &inst)?;
        Ok((inst, audits))
    });
    match result {
        Ok((inst, audits)) => {
            let d = &inst.deficit;
            row.deficit = Some(d.deficit);
            row.floor = Some(d.floor);
            row.censored = !d.above_floor();
            row.iterations = Some(inst.solve.iterations);
            row.residual = Some(inst.solve.residual);
            if let Some(p) = &audits.propositions {
                row.eps_meas = Some(p.eps_meas);
                row.ratio = p.ratio;
            }
            if let Some(e) = &audits.envelope {
                row.envelope_distance = Some(e.witness_distance);
                row.envelope_consistent = Some(e.consistent);
            }
            row.theorem1 = audits.theorem1.label();
            row.theorem2 = audits.theorem2.label();
            row.audit_pass = !audits.failed();
            row.boundary = serde_json::to_value(audits.boundary)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            detail.solve = Some(inst.solve.clone());
            detail.deficit = Some(inst.deficit.clone());
            detail.audits = Some(audits);
        }
        Err(e) => {
            row.status = e.code().into();
            detail.message = Some(e.to_string());
        }
    }
    (row, detail)
}

/// Paths written by [`run_sweep`].
pub const SWEEP_FILES: [&str; 5] = ["sweep.csv", "sweep.json", "deficit_vs_eps.dat", "ratio_vs_eps.dat", "sweep.svg"];

/// Solves and audits every eps of the sweep in parallel, fits the log-log
/// slope of deficit against eps_meas and writes the reports.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate_sweep()?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let results: Vec<(SweepRow, RowDetail, f64)> = cfg
        .sweep
        .par_iter()
        .map(|&eps| {
            let t = Instant::now();
            let (r, d) = run_row(cfg, eps);
            (r, d, t.elapsed().as_secs_f64())
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut details = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len() + 1);
    for (r, d, s) in results {
        timings.push(Timing {
            label: format!("eps={}", r.eps),
            seconds: s,
        });
        rows.push(r);
        details.push(d);
    }
    let mut last: Option<f64> = None;
    for r in rows.iter_mut().filter(|r| r.status == "ok" && !r.censored) {
        let d = r.deficit.unwrap_or(0.0);
        r.inversion = last.is_some_and(|l| d < l);
        last = Some(d);
    }
    let usable = |r: &&SweepRow| r.status == "ok" && r.eps_meas.is_some_and(|e| e > 0.0);
    let fit_rows: Vec<&SweepRow> = rows.iter().filter(usable).filter(|r| !r.censored).collect();
    let points = |rs: &[&SweepRow]| -> Vec<(f64, f64)> {
        rs.iter()
            .filter_map(|r| Some((r.eps_meas?, r.deficit?)))
            .filter(|p| p.1 > 0.0)
            .collect()
    };
    let fit = if fit_rows.is_empty() {
        FitOutcome::Refused {
            reason: "all-censored".into(),
        }
    } else {
        match fit_loglog(&points(&fit_rows)) {
            Ok(f) => FitOutcome::Fitted(f),
            Err(e) => FitOutcome::Refused { reason: e.to_string() },
        }
    };
    let all: Vec<&SweepRow> = rows.iter().filter(usable).collect();
    let diagnostic_fit = match fit_loglog(&points(&all)) {
        Ok(f) => FitOutcome::Fitted(f),
        Err(e) => FitOutcome::Refused { reason: e.to_string() },
    };
    let ratios: Vec<f64> = fit_rows.iter().filter_map(|r| r.ratio).collect();
    let ratio_spread = (ratios.len() >= 2).then(|| {
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        hi / lo - 1.0
    });
    let report = SweepReport {
        version: 1,
        name: cfg.name.clone(),
        transform: cfg.nonlinearity.transform_name().into(),
        h: cfg.h,
        seed: cfg.seed,
        audit_failures: rows.iter().filter(|r| !r.audit_pass).count(),
        rows,
        fit,
        diagnostic_fit,
        ratio_spread,
        details,
    };
    write_sweep_csv(&out.join(SWEEP_FILES[0]), &report.rows)?;
    write_json(&out.join(SWEEP_FILES[1]), &report)?;
    write_dat(&out.join(SWEEP_FILES[2]), report.rows.iter().filter_map(|r| Some((r.eps_meas?, r.deficit?))))?;
    write_dat(&out.join(SWEEP_FILES[3]), report.rows.iter().filter_map(|r| Some((r.eps, r.ratio?))))?;
    fs::write(out.join(SWEEP_FILES[4]), sweep_svg(&report))?;
    timings.push(Timing {
        label: "total".into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    write_json(&out.join("timings.json"), &timings)?;
    Ok(report)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SWEEP_HEADER.as_bytes());
    buf.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_dat<I: Iterator<Item = (f64, f64)>>(path: &Path, points: I) -> Result<()> {
    let mut s = String::new();
    for (x, y) in points {
        let _ = writeln!(s, "{x:.16e} {y:.16e}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Log-log chart of deficit and floor against eps_meas.
fn sweep_svg(report: &SweepReport) -> String {
    let (w, hgt, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<(f64, f64, bool)> = report
        .rows
        .iter()
        .filter_map(|r| Some((r.eps_meas?, r.deficit?, r.censored)))
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .collect();
    let floors: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter_map(|r| Some((r.eps_meas?, r.floor?)))
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{hgt}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{} ({} transform)</text>"#,
        w / 2.0,
        report.name,
        report.transform
    );
    let xs: Vec<f64> = pts.iter().map(|p| p.0).chain(floors.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).chain(floors.iter().map(|p| p.1)).collect();
    if xs.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">no positive data</text>"#,
            w / 2.0,
            hgt / 2.0
        );
        s.push_str("</svg>\n");
        return s;
    }
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| pad + (x.log10() - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| hgt - pad - (y.log10() - y0) / (y1 - y0) * (hgt - 2.0 * pad);
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        hgt - 2.0 * pad
    );
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">1e{e}</text>"#,
            hgt - pad + 16.0
        );
    }
    for e in (y0 as i32)..=(y1 as i32) {
        let y = py(10f64.powi(e));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{e}</text>"#,
            pad - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">eps_meas</text>"#,
        w / 2.0,
        hgt - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">deficit</text>"#,
        hgt / 2.0,
        hgt / 2.0
    );
    let poly = |p: &[(f64, f64)]| {
        p.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    if floors.len() > 1 {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#,
            poly(&floors)
        );
    }
    let line: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
    if line.len() > 1 {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#, poly(&line));
    }
    for &(x, y, censored) in &pts {
        let fill = if censored { "white" } else { "steelblue" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{fill}" stroke="steelblue"/>"#,
            px(x),
            py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub value: f64,
    /// `<=` or `>`.
    pub comparison: String,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub h: f64,
    pub rows: Vec<BaselineRow>,
    pub all_pass: bool,
}

impl BaselineReport {
    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>12} {:>3} {:>10}  result\n", "baseline", "value", "", "threshold");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<34} {:>12.4e} {:>3} {:>10.2e}  {}",
                r.name,
                r.value,
                r.comparison,
                r.threshold,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn at_most(name: &str, value: f64, threshold: f64) -> BaselineRow {
    BaselineRow {
        name: name.into(),
        value,
        comparison: "<=".into(),
        threshold,
        pass: value <= threshold,
    }
}

fn above(name: &str, value: f64, threshold: f64) -> BaselineRow {
    BaselineRow {
        name: name.into(),
        value,
        comparison: ">".into(),
        threshold,
        pass: value > threshold,
    }
}

/// The classical concavity results on closed-form or isotropic instances.
pub fn run_baselines(h: f64) -> Result<BaselineReport> {
    let disk = ConvexDomain::disk([0.0, 0.0], 1.0)?;
    let opts = DeficitOptions::default();
    let mut rows = Vec::new();

    let (u, _) = solve(&ProblemSpec::isotropic(disk.clone(), h, Nonlinearity::Power { beta: 0.0 }))?;
    let err = u
        .grid()
        .interior_nodes()
        .iter()
        .map(|&k| {
            let p = u.grid().node_point(k);
            (u.values()[k] - (1.0 - p[0] * p[0] - p[1] * p[1]) / 4.0).abs()
        })
        .fold(0.0, f64::max);
    rows.push(at_most("torsion max error", err, 5e-3));
    let u = Arc::new(u);
    let sq = ScalarField::transform_power(&u, 0.0)?;
    rows.push(at_most("torsion sqrt(u) deficit", max_deficit(&sq, &opts)?.deficit, 5e-3));

    let side = std::f64::consts::PI;
    let square = ConvexDomain::square([0.0, 0.0], side)?;
    let g = Arc::new(Grid::with_cells(&square, (side / h).round() as usize)?);
    let e = Arc::new(ScalarField::from_fn(g.clone(), 0.0, |p| p[0].sin() * p[1].sin())?);
    rows.push(above("eigenfunction u deficit", max_deficit(&e, &opts)?.deficit, 0.05));
    let log_e = ScalarField::transform_log(&e)?;
    let inner = opts.with_region(Region::Inner { rho: 5.0 * g.h() });
    rows.push(at_most("eigenfunction log(u) deficit", max_deficit(&log_e, &inner)?.deficit, 1e-2));

    let (u, _) = solve(&ProblemSpec::isotropic(disk, h, Nonlinearity::Power { beta: 0.5 }))?;
    let q = ScalarField::transform_power(&Arc::new(u), 0.5)?;
    let tol = 10.0 * h * h * q.max_abs();
    rows.push(at_most("beta=1/2 u^(1/4) deficit", max_deficit(&q, &opts)?.deficit, tol));

    let all_pass = rows.iter().all(|r| r.pass);
    Ok(BaselineReport { h, rows, all_pass })
}

pub fn write_baselines(report: &BaselineReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("baselines.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TORSION: &str = r#"{
        "name": "torsion",
        "domain": {"shape": "disk", "params": {"center": [0, 0], "radius": 1}},
        "h": 0.0625,
        "nonlinearity": {"kind": "power", "beta": 0.0}
    }"#;

    #[test]
    fn config_parses_with_defaults() {
        let c = ExperimentConfig::parse(TORSION).unwrap();
        assert_eq!(c.coefficients, CoefficientConfig::default());
        assert_eq!(c.deficit, DeficitOptions::default());
        assert_eq!(c.log_rho_h, 5.0);
        assert!(c.audit.theorems);
        let spec = c.problem(0.0).unwrap();
        assert!(spec.coefficients.is_constant());
    }

    #[test]
    fn malformed_json_reports_position() {
        let e = ExperimentConfig::parse("{\n  \"h\": 0.1,\n  oops\n}").unwrap_err();
        match e {
            Error::Config(m) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn beta_one_and_bad_sweeps_rejected() {
        let one = TORSION.replace("\"beta\": 0.0", "\"beta\": 1.0");
        assert!(matches!(ExperimentConfig::parse(&one), Err(Error::BetaOneRejected)));
        let short = TORSION.replace("\"h\": 0.0625", "\"h\": 0.0625, \"sweep\": [0.1, 0.2, 0.3]");
        assert!(matches!(ExperimentConfig::parse(&short), Err(Error::Config(_))));
        let unsorted = TORSION.replace("\"h\": 0.0625", "\"h\": 0.0625, \"sweep\": [0.1, 0.3, 0.2, 0.4]");
        assert!(matches!(ExperimentConfig::parse(&unsorted), Err(Error::Config(_))));
        let unknown = TORSION.replace("\"h\": 0.0625", "\"h\": 0.0625, \"colour\": 1");
        assert!(matches!(ExperimentConfig::parse(&unknown), Err(Error::Config(_))));
        let bad_expr = TORSION.replace(
            "\"h\": 0.0625",
            "\"h\": 0.0625, \"coefficients\": {\"a\": \"1 + system(x)\"}",
        );
        assert!(ExperimentConfig::parse(&bad_expr).is_err());
    }

    #[test]
    fn templates_build() {
        for name in TEMPLATES {
            let c = CoefficientConfig {
                template: Some(name.into()),
                ..Default::default()
            };
            let set = c.build(0.1).unwrap();
            assert_eq!(set.is_constant(), name == "isotropic");
        }
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [0.02, 0.05, 0.1, 0.2].iter().map(|&e| (e, 3.0 * e)).collect();
        let f = fit_loglog(&pts).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && (f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.residual < 1e-12);
        assert!(matches!(fit_loglog(&pts[..2]), Err(Error::FitRefused(_))));
    }

    #[test]
    fn isotropic_sweep_is_all_censored() {
        let cfg = ExperimentConfig::parse(&TORSION.replace(
            "\"h\": 0.0625",
            "\"h\": 0.0625, \"sweep\": [0.02, 0.05, 0.1, 0.2], \"audit\": {\"propositions\": true}",
        ))
        .unwrap();
        let dir = std::env::temp_dir().join(format!("concavlab-iso-{}", std::process::id()));
        let r = run_sweep(&cfg, &dir).unwrap();
        assert!(r.rows.iter().all(|r| r.censored && r.status == "ok"));
        assert_eq!(
            r.fit,
            FitOutcome::Refused {
                reason: "all-censored".into()
            }
        );
        let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
        assert!(csv.starts_with("#SWEEP v1\neps,status,"));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn divergent_row_is_flagged_and_excluded() {
        let mut cfg = ExperimentConfig::parse(&TORSION.replace(
            "\"h\": 0.0625",
            "\"h\": 0.0625, \"sweep\": [0.02, 0.05, 0.1, 30.0], \"coefficients\": {\"template\": \"source\"}",
        ))
        .unwrap();
        cfg.coefficients.zeta = 0.1;
        let dir = std::env::temp_dir().join(format!("concavlab-div-{}", std::process::id()));
        let r = run_sweep(&cfg, &dir).unwrap();
        // a = 1 + 30 sin(2x + y) changes sign
        assert_ne!(r.rows[3].status, "ok");
        assert!(r.rows[..3].iter().all(|r| r.status == "ok"));
        assert!(r.details[3].message.is_some());
        fs::remove_dir_all(dir).unwrap();
    }
}
