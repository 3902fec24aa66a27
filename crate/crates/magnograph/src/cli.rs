//! Command-line surface: spectra, constrained solves, parameter sweeps,
//! threshold tables, audit runs, and graph checking, all persisted as
//! manifest-stamped deterministic artifacts.
//!
//! Exit codes: 0 success, 1 audits ran but failed, 2 parse error,
//! 3 validation error, 4 convergence failure.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::energy::{
    compute_thresholds, estimate_gns_constants, EnergyError, EnergyParams, Thresholds,
};
use crate::expr::{Expr, ExprError};
use crate::field::{
    build_grid, C64, FieldError, GraphFunction, GraphGrid, PotentialPair,
};
use crate::graph::{parse_graph, serialize_graph, GraphError, MetricGraph};
use crate::io::{
    fmt_f64, write_audit_csv_with_scope, write_csv, write_solution_bundle,
    write_spectrum_csv, write_threshold_csv, EdgeSamples, IoError, RunManifest,
    SnapshotHeader, SpectrumRow, ThresholdRow,
};
use crate::linalg::LinalgError;
use crate::operator::{
    assemble, eigenpairs, ess_spectrum_surrogate, EigOptions, HermitianSystem,
    OperatorError, Spectrum,
};
use crate::solver::{multi_branch, CriticalPoint, SolverConfig, SolverError};
use crate::verify::{
    audit_diamagnetic, audit_energy_levels, audit_gauge_flux, audit_multiplier_ranges,
    audit_nonexistence, AuditReport, InputHasher, VerifyError,
};

pub const EXIT_OK: i32 = 0;
/// Audits executed but at least one failed (the run itself succeeded).
pub const EXIT_AUDIT_FAILED: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

const AUDIT_SCOPE: &str = "audits falsify properties on the supplied artifacts only; \
nonexistence statements are never confirmed exhaustively";

#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Validation(String),
    Convergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Convergence(_) => EXIT_CONVERGENCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Convergence(m) => write!(f, "convergence failure: {m}"),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Parse { .. } => CliError::Parse(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ExprError> for CliError {
    fn from(e: ExprError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        match e {
            OperatorError::Convergence(m) => CliError::Convergence(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EnergyError> for CliError {
    fn from(e: EnergyError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Convergence(_)
            | SolverError::Divergence { .. }
            | SolverError::LeftUMu(_) => CliError::Convergence(e.to_string()),
            SolverError::Energy(inner) => inner.into(),
            SolverError::Operator(inner) => inner.into(),
            SolverError::Linalg(inner) => inner.into(),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Energy(inner) => inner.into(),
            VerifyError::Operator(inner) => inner.into(),
            VerifyError::Validation(m) => CliError::Validation(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Argument surface.
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "magnograph",
    version = crate::TOOL_VERSION,
    about = "Magnetic Schrödinger operators on metric graphs: spectra, \
             mass-constrained NLS critical points, thresholds, and audits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Eigenvalue table (optionally eigenvector snapshots and a flux sweep)
    Spectrum(SpectrumArgs),
    /// Mass-constrained critical points with automatic audits
    Solve(SolveArgs),
    /// Long-form CSV over a (p, mu, flux) grid described by a JSON config
    Sweep(SweepArgs),
    /// Threshold table with constant provenance
    Thresholds(ThresholdsArgs),
    /// Audit suite over freshly computed artifacts
    Verify(VerifyArgs),
    /// Graph-file utilities
    Graph(GraphCmd),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Graph description file
    #[arg(long, value_name = "FILE")]
    pub graph: PathBuf,
    /// Magnetic potential: expression in x, `edge: expr` list, or @snapshot
    #[arg(long = "A", default_value = "0", value_name = "SPEC")]
    pub pot_a: String,
    /// Electric potential (V >= 1 everywhere): same forms as --A
    #[arg(long = "V", default_value = "1", value_name = "SPEC")]
    pub pot_v: String,
    /// Target mesh spacing
    #[arg(long, default_value_t = 0.01)]
    pub h: f64,
    /// Half-line truncation length (default 12x the longest bounded edge)
    #[arg(long = "L-trunc", value_name = "LEN")]
    pub l_trunc: Option<f64>,
    /// Seed for eigensolver starts and solver retries
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    /// Output directory (created if missing)
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of eigenvalues
    #[arg(short, long, default_value_t = 6)]
    pub k: usize,
    /// Also write eigenvector snapshots phi_<j>.snap
    #[arg(long)]
    pub eigenvectors: bool,
    /// Comma-separated constant field values; writes flux_sweep.csv
    #[arg(long, value_name = "LIST")]
    pub flux_sweep: Option<String>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Nonlinearity exponent (p > 2)
    #[arg(long)]
    pub p: f64,
    /// Mass constraint (mu > 0)
    #[arg(long)]
    pub mu: f64,
    /// Number of branches to seek
    #[arg(long, default_value_t = 1)]
    pub branches: usize,
    /// Comma-separated strictly increasing penalty exponents
    #[arg(long, value_name = "LIST")]
    pub r_schedule: Option<String>,
    /// Relative gradient tolerance
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// JSON sweep configuration file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct ThresholdsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Nonlinearity exponent (p > 2)
    #[arg(long)]
    pub p: f64,
    /// Deepest level for multiplicity thresholds
    #[arg(short, long, default_value_t = 1)]
    pub k: usize,
    /// Probe count for the empirical interpolation constants
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Nonlinearity exponent for solve-backed audits (needs --mu)
    #[arg(long)]
    pub p: Option<f64>,
    /// Mass for solve-backed audits (needs --p)
    #[arg(long)]
    pub mu: Option<f64>,
    /// Branches for solve-backed audits
    #[arg(long, default_value_t = 1)]
    pub branches: usize,
    /// Random probe fields for the diamagnetic audit
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
}

#[derive(Args, Debug)]
pub struct GraphCmd {
    #[command(subcommand)]
    pub action: GraphAction,
}

#[derive(Subcommand, Debug)]
pub enum GraphAction {
    /// Parse and validate a graph file, printing a summary
    Check {
        /// Graph description file
        #[arg(long, value_name = "FILE")]
        graph: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Input pipeline.
// ---------------------------------------------------------------------------

pub struct Setup {
    pub graph: MetricGraph,
    pub grid: GraphGrid,
    pub pot: PotentialPair,
    pub sys: HermitianSystem,
    pub graph_hash: String,
}

/// Potential source: per-edge closed-form expressions or sampled arrays.
enum PotInput {
    Exprs {
        default: Option<Expr>,
        per_edge: BTreeMap<usize, Expr>,
    },
    Samples(Vec<EdgeSamples>),
}

fn parse_pot_input(spec: &str, base_dir: &Path) -> Result<PotInput, CliError> {
    if let Some(rel) = spec.strip_prefix('@') {
        let path = base_dir.join(rel);
        let (_, blocks) = crate::io::read_field_snapshot(&path)?;
        for b in &blocks {
            if b.x.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::Validation(format!(
                    "potential file {}: edge {} samples must have strictly increasing x",
                    path.display(),
                    b.edge
                )));
            }
            if let Some(v) = b.value.iter().find(|v| v.im != 0.0) {
                return Err(CliError::Validation(format!(
                    "potential file {}: potentials are real but found imaginary part {}",
                    path.display(),
                    v.im
                )));
            }
        }
        return Ok(PotInput::Samples(blocks));
    }
    let mut default = None;
    let mut per_edge = BTreeMap::new();
    for seg in spec.split(';') {
        let seg = seg.trim();
        if seg.is_empty() {
            continue;
        }
        match seg.split_once(':') {
            Some((idx, body)) => {
                let edge: usize = idx.trim().parse().map_err(|_| {
                    CliError::Parse(format!("bad edge index `{}` in potential spec", idx.trim()))
                })?;
                per_edge.insert(edge, Expr::parse(body)?);
            }
            None => default = Some(Expr::parse(seg)?),
        }
    }
    if default.is_none() && per_edge.is_empty() {
        return Err(CliError::Parse("empty potential specification".to_string()));
    }
    Ok(PotInput::Exprs { default, per_edge })
}

/// Linear interpolation with constant extrapolation at the ends.
fn interp(x: &[f64], y: &[C64], t: f64) -> f64 {
    if t <= x[0] {
        return y[0].re;
    }
    if t >= x[x.len() - 1] {
        return y[y.len() - 1].re;
    }
    let i = x.partition_point(|&xi| xi <= t).min(x.len() - 1);
    let (x0, x1) = (x[i - 1], x[i]);
    let w = (t - x0) / (x1 - x0);
    y[i - 1].re * (1.0 - w) + y[i].re * w
}

fn eval_pot(input: &PotInput, edge: usize, x: f64) -> Result<f64, CliError> {
    match input {
        PotInput::Exprs { default, per_edge } => per_edge
            .get(&edge)
            .or(default.as_ref())
            .map(|e| e.eval(x))
            .ok_or_else(|| {
                CliError::Validation(format!("no potential given for edge {edge}"))
            }),
        PotInput::Samples(blocks) => blocks
            .iter()
            .find(|b| b.edge == edge)
            .map(|b| interp(&b.x, &b.value, x))
            .ok_or_else(|| {
                CliError::Validation(format!("potential file has no block for edge {edge}"))
            }),
    }
}

fn build_potentials(
    grid: &GraphGrid,
    a_spec: &str,
    v_spec: &str,
    base_dir: &Path,
) -> Result<PotentialPair, CliError> {
    let a_in = parse_pot_input(a_spec, base_dir)?;
    let v_in = parse_pot_input(v_spec, base_dir)?;
    let mut a_mid = Vec::with_capacity(grid.edges.len());
    let mut v_node = vec![1.0; grid.n_dofs];
    for (ei, eg) in grid.edges.iter().enumerate() {
        let mut row = Vec::with_capacity(eg.n_elements());
        for j in 0..eg.n_elements() {
            row.push(eval_pot(&a_in, ei, eg.mid_x(j))?);
        }
        a_mid.push(row);
        for j in 0..eg.n_nodes {
            v_node[eg.node_dof(j)] = eval_pot(&v_in, ei, eg.node_x(j))?;
        }
    }
    Ok(PotentialPair::from_samples(grid, a_mid, v_node)?)
}

fn load_setup(c: &CommonArgs, base_dir: &Path) -> Result<Setup, CliError> {
    let text = fs::read_to_string(base_dir.join(&c.graph)).map_err(|e| {
        CliError::Validation(format!("cannot read graph file {}: {e}", c.graph.display()))
    })?;
    let graph = parse_graph(&text)?;
    let grid = build_grid(&graph, c.h, c.l_trunc)?;
    let pot = build_potentials(&grid, &c.pot_a, &c.pot_v, base_dir)?;
    let sys = assemble(&graph, &grid, &pot)?;
    let graph_hash = InputHasher::new("graph").str(&serialize_graph(&graph)).hex();
    Ok(Setup { graph, grid, pot, sys, graph_hash })
}

fn base_manifest(command: String, setup: &Setup, c: &CommonArgs) -> RunManifest {
    let mut m = RunManifest::new(&command, &setup.graph_hash);
    m.command = command;
    m.h = c.h;
    m.l_trunc = c.l_trunc;
    m.potential_a = c.pot_a.clone();
    m.potential_v = c.pot_v.clone();
    m.seed = c.seed;
    m
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Parse(format!("bad number `{s}` in list")))
        })
        .collect()
}

fn prepare_out_dir(
    manifest: &RunManifest,
    out_dir: &Path,
) -> Result<String, CliError> {
    fs::create_dir_all(out_dir)?;
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest.hash())
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

fn spectrum_rows(spec: &Spectrum) -> Vec<SpectrumRow> {
    spec.eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &lambda)| SpectrumRow {
            j: i + 1,
            lambda,
            residual: spec.residuals[i],
            cluster_id: spec.clusters[i],
        })
        .collect()
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<i32, CliError> {
    let setup = load_setup(&a.common, Path::new(""))?;
    let command = format!(
        "spectrum k={} eigenvectors={} flux_sweep={}",
        a.k,
        a.eigenvectors,
        a.flux_sweep.as_deref().unwrap_or("-")
    );
    let manifest = base_manifest(command, &setup, &a.common);
    let hash = prepare_out_dir(&manifest, &a.common.out_dir)?;
    let opts = EigOptions { seed: a.common.seed, ..EigOptions::default() };
    let spec = eigenpairs(&setup.sys, a.k, &opts)?;
    write_spectrum_csv(
        &a.common.out_dir.join("spectrum.csv"),
        &hash,
        &spectrum_rows(&spec),
    )?;
    if a.eigenvectors {
        for (i, phi) in spec.eigenfunctions.iter().enumerate() {
            let header = SnapshotHeader {
                grid_hash: setup.grid.hash.clone(),
                mu: setup.grid.mass(phi),
                p: 0.0,
                lambda: spec.eigenvalues[i],
            };
            crate::io::write_field_snapshot(
                &a.common.out_dir.join(format!("phi_{}.snap", i + 1)),
                &hash,
                &header,
                &setup.grid,
                phi,
            )?;
        }
    }
    if let Some(list) = &a.flux_sweep {
        let fluxes = parse_f64_list(list)?;
        let mut lines = Vec::new();
        for &f in &fluxes {
            let a_mid: Vec<Vec<f64>> = setup
                .grid
                .edges
                .iter()
                .map(|eg| vec![f; eg.n_elements()])
                .collect();
            let pot_f =
                PotentialPair::from_samples(&setup.grid, a_mid, setup.pot.v_node.clone())?;
            let sys_f = assemble(&setup.graph, &setup.grid, &pot_f)?;
            let spec_f = eigenpairs(&sys_f, a.k, &opts)?;
            for (i, &lambda) in spec_f.eigenvalues.iter().enumerate() {
                lines.push(format!(
                    "{},{},{},{},{}",
                    fmt_f64(f),
                    i + 1,
                    fmt_f64(lambda),
                    fmt_f64(spec_f.residuals[i]),
                    spec_f.clusters[i]
                ));
            }
        }
        write_csv(
            &a.common.out_dir.join("flux_sweep.csv"),
            &hash,
            "flux,j,lambda,residual,cluster_id",
            &lines,
        )?;
    }
    for (i, &lambda) in spec.eigenvalues.iter().enumerate() {
        println!(
            "lambda_{} = {} (residual {:.2e}, cluster {})",
            i + 1,
            fmt_f64(lambda),
            spec.residuals[i],
            spec.clusters[i]
        );
    }
    println!("wrote {}", a.common.out_dir.join("spectrum.csv").display());
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn build_thresholds(
    setup: &Setup,
    p: f64,
    spec: &Spectrum,
    probes: usize,
    seed: u64,
) -> Result<Thresholds, CliError> {
    let gns = estimate_gns_constants(&setup.sys, &setup.pot, p, probes, seed)?;
    let ess = ess_spectrum_surrogate(&setup.grid, &setup.pot).value_or_infinity();
    let ladder: Vec<f64> = spec
        .distinct_eigenvalues()
        .into_iter()
        .take_while(|&l| l < ess)
        .collect();
    if ladder.is_empty() {
        return Err(CliError::Validation(
            "no eigenvalue below the essential-spectrum surrogate".to_string(),
        ));
    }
    Ok(compute_thresholds(
        p,
        gns.c_p,
        gns.c_inf,
        &ladder,
        ess,
        setup.graph.is_compact(),
    )?)
}

fn solver_config(
    seed: u64,
    grad_tol: f64,
    r_schedule: &Option<String>,
) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig { seed, grad_tol, ..SolverConfig::default() };
    if let Some(list) = r_schedule {
        cfg.r_schedule = parse_f64_list(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Standard audit set over a batch of solved points.
fn audit_points(
    points: &[CriticalPoint],
    pot: &PotentialPair,
    grid: &GraphGrid,
    spec: &Spectrum,
    thresholds: Option<&Thresholds>,
    mu: f64,
) -> Result<Vec<AuditReport>, CliError> {
    let mut reports = Vec::new();
    for pt in points {
        reports.push(audit_diamagnetic(&pt.u, pot, grid));
    }
    reports.push(audit_multiplier_ranges(points, &spec.eigenvalues, 1e-6));
    reports.push(audit_energy_levels(points, &spec.eigenvalues, mu, 1e-6));
    if let Some(th) = thresholds {
        reports.push(audit_nonexistence(
            points,
            th,
            th.lambdas[0] / 2.0,
            1e-6,
            1e-6,
        )?);
    }
    Ok(reports)
}

fn cmd_solve(a: &SolveArgs) -> Result<i32, CliError> {
    let setup = load_setup(&a.common, Path::new(""))?;
    let params = EnergyParams::new(a.p, a.mu, setup.graph.region_edges(), None)?;
    let cfg = solver_config(a.common.seed, a.grad_tol, &a.r_schedule)?;
    let command = format!("solve grad_tol={}", fmt_f64(a.grad_tol));
    let mut manifest = base_manifest(command, &setup, &a.common);
    manifest.p = Some(a.p);
    manifest.mu = Some(a.mu);
    manifest.r_schedule = cfg.r_schedule.clone();
    manifest.branches = Some(a.branches);
    let hash = prepare_out_dir(&manifest, &a.common.out_dir)?;

    let opts = EigOptions { seed: a.common.seed, ..EigOptions::default() };
    let k_eig = (a.branches + 2).min(setup.sys.dof_count);
    let spec = eigenpairs(&setup.sys, k_eig, &opts)?;
    let thresholds = match build_thresholds(&setup, a.p, &spec, 400, a.common.seed) {
        Ok(t) => Some(t),
        Err(e) => {
            eprintln!("warning: thresholds unavailable ({e}); solving without them");
            None
        }
    };

    let outcome = multi_branch(&setup.sys, &setup.pot, &params, &cfg, a.branches, thresholds.as_ref())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    for c in &outcome.collapsed {
        eprintln!("branch collapse: {c}");
    }
    if outcome.points.is_empty() {
        return Err(CliError::Convergence(
            "no branch converged to a distinct critical point".to_string(),
        ));
    }
    for (i, pt) in outcome.points.iter().enumerate() {
        let stem = format!("branch_{}", i + 1);
        write_solution_bundle(&a.common.out_dir, &stem, &hash, &setup.grid, a.p, a.mu, pt)?;
        println!(
            "{stem}: lambda = {}, energy = {}, mass = {}, {} ({})",
            fmt_f64(pt.multiplier),
            fmt_f64(pt.energy),
            fmt_f64(pt.mass),
            pt.dichotomy.flag(),
            pt.branch
        );
    }
    let reports = audit_points(
        &outcome.points,
        &setup.pot,
        &setup.grid,
        &spec,
        thresholds.as_ref(),
        a.mu,
    )?;
    write_audit_csv_with_scope(
        &a.common.out_dir.join("audits.csv"),
        &hash,
        Some(AUDIT_SCOPE),
        &reports,
    )?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!(
        "audits: {} passed, {failed} failed ({})",
        reports.len() - failed,
        a.common.out_dir.join("audits.csv").display()
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_AUDIT_FAILED })
}

// ---------------------------------------------------------------------------
// thresholds
// ---------------------------------------------------------------------------

fn cmd_thresholds(a: &ThresholdsArgs) -> Result<i32, CliError> {
    let setup = load_setup(&a.common, Path::new(""))?;
    let command = format!("thresholds k={} probes={}", a.k, a.probes);
    let mut manifest = base_manifest(command, &setup, &a.common);
    manifest.p = Some(a.p);
    let hash = prepare_out_dir(&manifest, &a.common.out_dir)?;

    let opts = EigOptions { seed: a.common.seed, ..EigOptions::default() };
    // Grow the request until k distinct levels are certified (multiplicities
    // collapse into clusters).
    let mut k_eig = (a.k + 2).min(setup.sys.dof_count);
    let spec = loop {
        let s = eigenpairs(&setup.sys, k_eig, &opts)?;
        if s.distinct_eigenvalues().len() >= a.k || k_eig == setup.sys.dof_count {
            break s;
        }
        k_eig = (2 * k_eig).min(setup.sys.dof_count);
    };
    let gns = estimate_gns_constants(&setup.sys, &setup.pot, a.p, a.probes, a.common.seed)?;
    let ess = ess_spectrum_surrogate(&setup.grid, &setup.pot).value_or_infinity();
    let ladder: Vec<f64> = spec
        .distinct_eigenvalues()
        .into_iter()
        .take_while(|&l| l < ess)
        .collect();
    if ladder.len() < a.k {
        return Err(CliError::Validation(format!(
            "only {} distinct levels below the essential-spectrum surrogate; k = {} requested",
            ladder.len(),
            a.k
        )));
    }
    let th = compute_thresholds(a.p, gns.c_p, gns.c_inf, &ladder, ess, setup.graph.is_compact())?;

    let inputs_hash = {
        let mut h = InputHasher::new("thresholds");
        h.f64(a.p).f64(gns.c_p).f64(gns.c_inf).f64(ess).f64s(&ladder);
        h.hex()
    };
    let empirical = format!("empirical-sup-{}-probes-x{:.2}", gns.probes, gns.safety);
    let mut rows = vec![
        ThresholdRow {
            name: "C_p".to_string(),
            value: gns.c_p,
            inputs_hash: inputs_hash.clone(),
            provenance: empirical.clone(),
        },
        ThresholdRow {
            name: "C_inf".to_string(),
            value: gns.c_inf,
            inputs_hash: inputs_hash.clone(),
            provenance: empirical.clone(),
        },
        ThresholdRow {
            name: "ess_inf".to_string(),
            value: ess,
            inputs_hash: inputs_hash.clone(),
            provenance: if setup.graph.is_compact() {
                "compact-graph-no-essential-spectrum".to_string()
            } else {
                "half-line-tail-surrogate".to_string()
            },
        },
    ];
    let mut push = |name: String, value: f64, provenance: &str| {
        rows.push(ThresholdRow {
            name,
            value,
            inputs_hash: inputs_hash.clone(),
            provenance: provenance.to_string(),
        });
    };
    for (i, &l) in ladder.iter().enumerate().take(a.k) {
        push(format!("lambda_{}", i + 1), l, "eigensolver-distinct-ladder");
    }
    for i in 0..a.k {
        push(
            format!("delta_{}", i + 1),
            th.delta[i],
            if th.ess_inf.is_finite() {
                "half-gap-to-essential-spectrum"
            } else {
                "unit-when-no-essential-spectrum"
            },
        );
    }
    for i in 1..a.k {
        push(
            format!("mu_tilde_{}", i + 1),
            th.mu_tilde[i],
            "level-separation-bisection",
        );
    }
    if !th.compact {
        for i in 0..a.k {
            push(
                format!("mu_double_star_{}", i + 1),
                th.mu_double_star[i],
                "tail-compactness-bound",
            );
        }
    }
    for c in [0.5, 1.0, 2.0] {
        push(
            format!("mu_c[c={c}]"),
            th.mu_cp(c)?,
            "nonexistence-mass-bound",
        );
    }
    if 2.0 < a.p && a.p < 6.0 {
        for lam in [-1.0, -2.0, -4.0] {
            push(
                format!("mu_star[lambda={lam}]"),
                th.mu_star(lam)?,
                "multiplier-sign-bound",
            );
        }
    }
    push(
        "mu_existence_ground".to_string(),
        th.groundstate_threshold()?,
        "min-of-nonexistence-and-tail-bounds",
    );
    push(
        format!("mu_multiplicity_{}", a.k),
        th.multiplicity_threshold(a.k)?,
        "min-of-nonexistence-separation-tail-bounds",
    );
    write_threshold_csv(&a.common.out_dir.join("thresholds.csv"), &hash, &rows)?;
    for r in &rows {
        println!("{} = {}", r.name, fmt_f64(r.value));
    }
    println!("wrote {}", a.common.out_dir.join("thresholds.csv").display());
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn random_probe(grid: &GraphGrid, rng: &mut ChaCha8Rng) -> GraphFunction {
    let mut u = GraphFunction::zeros(grid);
    for &g in &grid.global_of_free {
        u.values[g] = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    }
    u
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32, CliError> {
    if a.p.is_some() != a.mu.is_some() {
        return Err(CliError::Validation(
            "solve-backed audits need both --p and --mu".to_string(),
        ));
    }
    let setup = load_setup(&a.common, Path::new(""))?;
    let command = format!("verify probes={} branches={}", a.probes, a.branches);
    let mut manifest = base_manifest(command, &setup, &a.common);
    manifest.p = a.p;
    manifest.mu = a.mu;
    manifest.branches = Some(a.branches);
    let hash = prepare_out_dir(&manifest, &a.common.out_dir)?;
    let opts = EigOptions { seed: a.common.seed, ..EigOptions::default() };

    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed ^ 0xd1a);
    for _ in 0..a.probes {
        let u = random_probe(&setup.grid, &mut rng);
        reports.push(audit_diamagnetic(&u, &setup.pot, &setup.grid));
    }
    let k_flux = 3.min(setup.sys.dof_count);
    reports.push(audit_gauge_flux(&setup.graph, &setup.grid, &setup.pot, k_flux, &opts)?);

    if let (Some(p), Some(mu)) = (a.p, a.mu) {
        let params = EnergyParams::new(p, mu, setup.graph.region_edges(), None)?;
        let cfg = solver_config(a.common.seed, 1e-8, &None)?;
        let k_eig = (a.branches + 2).min(setup.sys.dof_count);
        let spec = eigenpairs(&setup.sys, k_eig, &opts)?;
        let thresholds = build_thresholds(&setup, p, &spec, 400, a.common.seed).ok();
        let outcome =
            multi_branch(&setup.sys, &setup.pot, &params, &cfg, a.branches, thresholds.as_ref())?;
        for c in &outcome.collapsed {
            eprintln!("branch collapse: {c}");
        }
        if outcome.points.is_empty() {
            return Err(CliError::Convergence(
                "no branch converged; solve-backed audits impossible".to_string(),
            ));
        }
        reports.extend(audit_points(
            &outcome.points,
            &setup.pot,
            &setup.grid,
            &spec,
            thresholds.as_ref(),
            mu,
        )?);
    }

    write_audit_csv_with_scope(
        &a.common.out_dir.join("audits.csv"),
        &hash,
        Some(AUDIT_SCOPE),
        &reports,
    )?;
    println!("# scope {AUDIT_SCOPE}");
    let mut failed = 0usize;
    for r in &reports {
        if !r.pass {
            failed += 1;
            println!("FAIL {} measured {} bound {} tol {}", r.check, fmt_f64(r.measured), fmt_f64(r.bound), fmt_f64(r.tol));
        }
    }
    println!(
        "audits: {} passed, {failed} failed ({})",
        reports.len() - failed,
        a.common.out_dir.join("audits.csv").display()
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_AUDIT_FAILED })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn default_pot_a() -> String {
    "0".to_string()
}
fn default_pot_v() -> String {
    "1".to_string()
}
fn default_branches() -> usize {
    1
}
fn default_seed() -> u64 {
    0x5eed
}
fn default_out_dir() -> String {
    "out".to_string()
}
fn default_grad_tol() -> f64 {
    1e-8
}

#[derive(Debug, Deserialize)]
struct SweepConfig {
    graph: String,
    #[serde(rename = "A", default = "default_pot_a")]
    pot_a: String,
    #[serde(rename = "V", default = "default_pot_v")]
    pot_v: String,
    h: f64,
    #[serde(default)]
    l_trunc: Option<f64>,
    p: Vec<f64>,
    mu: Vec<f64>,
    #[serde(default)]
    flux: Vec<f64>,
    #[serde(default = "default_branches")]
    branches: usize,
    #[serde(default)]
    r_schedule: Vec<f64>,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_out_dir")]
    out_dir: String,
    #[serde(default = "default_grad_tol")]
    grad_tol: f64,
}

const SWEEP_HEADER: &str = "cell,p,mu,flux,converged,lambda,energy,mass,dichotomy,audits_pass";

struct SweepCell {
    index: usize,
    p: f64,
    mu: f64,
    flux: f64,
}

fn sweep_cell_row(
    setup: &Setup,
    cfg: &SweepConfig,
    cell: &SweepCell,
) -> Result<String, CliError> {
    let a_mid: Vec<Vec<f64>> = setup
        .pot
        .a_mid
        .iter()
        .map(|row| row.iter().map(|a| a + cell.flux).collect())
        .collect();
    let pot = PotentialPair::from_samples(&setup.grid, a_mid, setup.pot.v_node.clone())?;
    let sys = assemble(&setup.graph, &setup.grid, &pot)?;
    let params = EnergyParams::new(cell.p, cell.mu, setup.graph.region_edges(), None)?;
    let mut solver_cfg = SolverConfig {
        seed: cfg.seed,
        grad_tol: cfg.grad_tol,
        ..SolverConfig::default()
    };
    if !cfg.r_schedule.is_empty() {
        solver_cfg.r_schedule = cfg.r_schedule.clone();
    }
    solver_cfg.validate()?;
    let opts = EigOptions { seed: cfg.seed, ..EigOptions::default() };
    let k_eig = (cfg.branches + 2).min(sys.dof_count);
    let spec = eigenpairs(&sys, k_eig, &opts)?;

    let prefix = format!(
        "{},{},{},{}",
        cell.index,
        fmt_f64(cell.p),
        fmt_f64(cell.mu),
        fmt_f64(cell.flux)
    );
    let solved = multi_branch(&sys, &pot, &params, &solver_cfg, cfg.branches, None);
    let outcome = match solved {
        Ok(o) if !o.points.is_empty() => o,
        Ok(_) => {
            return Ok(format!(
                "{prefix},false,{nan},{nan},{nan},none,false",
                nan = fmt_f64(f64::NAN)
            ));
        }
        Err(e) => {
            let ce: CliError = e.into();
            match ce {
                CliError::Convergence(_) => {
                    return Ok(format!(
                        "{prefix},false,{nan},{nan},{nan},none,false",
                        nan = fmt_f64(f64::NAN)
                    ));
                }
                other => return Err(other),
            }
        }
    };
    let ground = outcome
        .points
        .iter()
        .min_by(|x, y| x.energy.total_cmp(&y.energy))
        .expect("nonempty");
    let audits = audit_points(&outcome.points, &pot, &setup.grid, &spec, None, cell.mu)?;
    let audits_pass = audits.iter().all(|r| r.pass);
    Ok(format!(
        "{prefix},true,{},{},{},{},{audits_pass}",
        fmt_f64(ground.multiplier),
        fmt_f64(ground.energy),
        fmt_f64(ground.mass),
        ground.dichotomy.flag()
    ))
}

fn worker_count(cells: usize) -> usize {
    let cap = std::env::var("MAGNOGRAPH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    cap.unwrap_or(hw).min(cells.max(1))
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32, CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| {
        CliError::Validation(format!("cannot read config {}: {e}", a.config.display()))
    })?;
    let cfg: SweepConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("sweep config: {e}")))?;
    let base_dir = a.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let common = CommonArgs {
        graph: PathBuf::from(&cfg.graph),
        pot_a: cfg.pot_a.clone(),
        pot_v: cfg.pot_v.clone(),
        h: cfg.h,
        l_trunc: cfg.l_trunc,
        seed: cfg.seed,
        out_dir: base_dir.join(&cfg.out_dir),
    };
    let setup = load_setup(&common, &base_dir)?;
    let flux = if cfg.flux.is_empty() { vec![0.0] } else { cfg.flux.clone() };

    let command = format!(
        "sweep p={:?} mu={:?} flux={:?} branches={} grad_tol={}",
        cfg.p, cfg.mu, flux, cfg.branches, fmt_f64(cfg.grad_tol)
    );
    let mut manifest = base_manifest(command, &setup, &common);
    manifest.r_schedule = cfg.r_schedule.clone();
    manifest.branches = Some(cfg.branches);
    let hash = prepare_out_dir(&manifest, &common.out_dir)?;

    let mut cells = Vec::new();
    for (ip, &p) in cfg.p.iter().enumerate() {
        for (imu, &mu) in cfg.mu.iter().enumerate() {
            for (iflux, &f) in flux.iter().enumerate() {
                let index = (ip * cfg.mu.len() + imu) * flux.len() + iflux;
                cells.push(SweepCell { index, p, mu, flux: f });
            }
        }
    }
    let sweep_csv = common.out_dir.join("sweep.csv");
    if cells.is_empty() {
        write_csv(&sweep_csv, &hash, SWEEP_HEADER, &[])?;
        println!("empty grid: wrote header-only {}", sweep_csv.display());
        return Ok(EXIT_OK);
    }

    // One file per completed cell makes the sweep resumable and keeps the
    // final ordering deterministic regardless of worker scheduling.
    let cell_dir = common.out_dir.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let cell_tag = |c: &SweepCell| {
        let mut h = InputHasher::new("sweep-cell");
        h.str(&hash).usize(c.index).f64(c.p).f64(c.mu).f64(c.flux);
        h.hex()
    };
    let mut rows: Vec<Option<String>> = vec![None; cells.len()];
    let mut pending = Vec::new();
    for c in &cells {
        let path = cell_dir.join(format!("cell_{:06}.csv", c.index));
        let tag = cell_tag(c);
        let mut reused = false;
        if let Ok(prev) = fs::read_to_string(&path) {
            let mut lines = prev.lines();
            if lines.next() == Some(format!("# cell {tag}").as_str()) {
                if let Some(row) = lines.next() {
                    rows[c.index] = Some(row.to_string());
                    reused = true;
                }
            }
        }
        if !reused {
            pending.push(c.index);
        }
    }

    let workers = worker_count(pending.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<String, CliError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let cell = &cells[pending[i]];
                let row = sweep_cell_row(&setup, &cfg, cell);
                if let Ok(r) = &row {
                    let path = cell_dir.join(format!("cell_{:06}.csv", cell.index));
                    let _ = fs::write(&path, format!("# cell {}\n{r}\n", cell_tag(cell)));
                }
                results.lock().unwrap().push((cell.index, row));
            });
        }
    });
    for (index, row) in results.into_inner().unwrap() {
        rows[index] = Some(row?);
    }
    let lines: Vec<String> = rows.into_iter().map(|r| r.expect("all cells done")).collect();
    write_csv(&sweep_csv, &hash, SWEEP_HEADER, &lines)?;
    println!("wrote {} ({} cells, {} workers)", sweep_csv.display(), cells.len(), workers);
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// graph check
// ---------------------------------------------------------------------------

fn cmd_graph_check(path: &Path) -> Result<i32, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read graph file {}: {e}", path.display()))
    })?;
    let g = parse_graph(&text)?;
    let bounded = g.edges.iter().filter(|e| e.is_bounded()).count();
    let half = g.edges.len() - bounded;
    let total: f64 = g.edges.iter().filter_map(|e| e.length()).sum();
    println!("graph OK: {} vertices, {} bounded edges, {} half-lines", g.vertices.len(), bounded, half);
    println!("compact core length {}", fmt_f64(total));
    println!("compact: {}", g.is_compact());
    println!("nonlinearity region edges: {:?}", g.region_edges());
    for (i, e) in g.edges.iter().enumerate() {
        match (e.head, e.length()) {
            (Some(h), Some(l)) => println!(
                "edge {i}: {} -- {} length {}",
                g.vertices[e.tail].id,
                g.vertices[h].id,
                fmt_f64(l)
            ),
            _ => println!("edge {i}: {} -- infinity (half-line)", g.vertices[e.tail].id),
        }
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// Entry point.
// ---------------------------------------------------------------------------

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_PARSE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Thresholds(a) => cmd_thresholds(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Graph(GraphCmd { action: GraphAction::Check { graph } }) => {
            cmd_graph_check(graph)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
