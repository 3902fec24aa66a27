//! Critical-point solvers for the mass-constrained functional: projected
//! gradient descent on the mass sphere, an anchored Newton method for the
//! penalized functional, continuation in the penalty exponent with a final
//! constrained (KKT) refinement, and a deflated multi-branch driver seeded
//! from eigenfunctions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::energy::{
    energy, f_r_prime, f_r_second, gradient, EnergyError, EnergyParams, Thresholds,
};
use crate::field::{C64, GraphFunction, GraphGrid, PotentialPair};
use crate::linalg::{
    anchor_block_row, complex_linear_block, conj_linear_block, realify, unrealify, Block2,
    CondensedLayout, CondensedLu, LinalgError, RankOneSolver,
};
use crate::operator::{
    eigenpairs, strong_form_residual, EigOptions, HermitianSystem, OperatorError,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver failed to converge: {0}")]
    Convergence(String),
    #[error("energy diverging (E = {energy:.3e}, sup norm {sup_norm:.3e}): the functional is unbounded below on this mass sphere")]
    Divergence { energy: f64, sup_norm: f64 },
    #[error("iterates forced out of the open mass ball: {0}")]
    LeftUMu(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Solver controls; `Default` mirrors the documented defaults.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Relative residual target: ‖projected gradient‖_{L²} / ‖u‖₂.
    pub grad_tol: f64,
    /// Newton iterations per penalty stage (and for the KKT refinement).
    pub max_iter: usize,
    /// Projected-gradient iteration budget.
    pub max_outer: usize,
    /// Strictly increasing penalty exponents, all > 1.
    pub r_schedule: Vec<f64>,
    /// Constrained-mass acceptance: |mass − μ| ≤ mass_tol·μ.
    pub mass_tol: f64,
    /// Line-search shrink factor and trial budget.
    pub backtrack_shrink: f64,
    pub backtrack_max: usize,
    /// Deflation shift relative to μ (influence radius ≈ √(shift·μ)).
    pub deflation_shift: f64,
    /// Global DOF whose phase is pinned; `None` picks the largest entry.
    pub phase_anchor: Option<usize>,
    /// Orbit-distinctness cutoff relative to √μ.
    pub distinct_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grad_tol: 1e-8,
            max_iter: 80,
            max_outer: 20_000,
            r_schedule: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0],
            mass_tol: 1e-6,
            backtrack_shrink: 0.5,
            backtrack_max: 48,
            deflation_shift: 1e-2,
            phase_anchor: None,
            distinct_tol: 1e-3,
            seed: 0x5eed,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.r_schedule.is_empty() {
            return Err(SolverError::Convergence(
                "penalty schedule must not be empty".to_string(),
            ));
        }
        let mut prev = 1.0;
        for &r in &self.r_schedule {
            if r <= prev {
                return Err(SolverError::Convergence(
                    "penalty schedule must be strictly increasing with every entry > 1"
                        .to_string(),
                ));
            }
            prev = r;
        }
        Ok(())
    }
}

/// Which alternative of the constrained limit was reached.
#[derive(Debug, Clone, PartialEq)]
pub enum Dichotomy {
    /// The continuation delivered a point on the mass sphere.
    MassReached,
    /// Mass stalled strictly inside the ball with vanishing multiplier.
    MassStagnated { mass: f64, multiplier: f64 },
}

impl Dichotomy {
    pub fn flag(&self) -> &'static str {
        match self {
            Dichotomy::MassReached => "mass_reached",
            Dichotomy::MassStagnated { .. } => "mass_stagnated",
        }
    }
}

/// A converged critical point with its audit-relevant diagnostics.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub u: GraphFunction,
    pub multiplier: f64,
    /// Plain (unpenalized) energy `½‖u‖² − Ψ`.
    pub energy: f64,
    pub mass: f64,
    /// Relative weak Euler–Lagrange residual ‖Su − N(u) − λMu‖_{L²}/‖u‖₂.
    pub weak_residual: f64,
    /// Max interior strong-form residual over edges.
    pub strong_residual: f64,
    /// Flux-balance defect per vertex.
    pub vertex_residuals: Vec<f64>,
    pub branch: String,
    /// Last penalty exponent used (None for direct constrained solves).
    pub r_final: Option<f64>,
    pub dichotomy: Dichotomy,
}

fn rescale_mass(grid: &GraphGrid, u: &GraphFunction, target: f64) -> GraphFunction {
    let m = grid.mass(u);
    u.scale(C64::new((target / m).sqrt(), 0.0))
}

/// Weighted residual norms: `(‖res‖_{L²-Riesz}, relative to ‖u‖₂)`.
fn residual_norms(grid: &GraphGrid, res: &[C64], mass: f64) -> (f64, f64) {
    let sq: f64 = res
        .iter()
        .zip(&grid.global_of_free)
        .map(|(r, &g)| r.norm_sqr() / grid.weights[g])
        .sum();
    let abs = sq.sqrt();
    (abs, abs / mass.sqrt().max(f64::MIN_POSITIVE))
}

fn finalize_point(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    u: &GraphFunction,
    multiplier: f64,
    params: &EnergyParams,
    branch: String,
    r_final: Option<f64>,
    dichotomy: Dichotomy,
) -> Result<CriticalPoint, SolverError> {
    let grid = &sys.grid;
    let plain = params.with_r(None);
    let rep = energy(sys, u, &plain)?;
    let grad = gradient(sys, u, &plain)?;
    let uf = grid.to_free(u);
    let res: Vec<C64> = grad
        .residual
        .iter()
        .zip(uf.iter().zip(&grid.global_of_free))
        .map(|(r, (v, &g))| r - v * (multiplier * grid.weights[g]))
        .collect();
    let (_, weak) = residual_norms(grid, &res, rep.mass);
    let strong = strong_form_residual(grid, pot, u, multiplier, params.p, &params.region_edges);
    Ok(CriticalPoint {
        u: u.clone(),
        multiplier,
        energy: rep.total,
        mass: rep.mass,
        weak_residual: weak,
        strong_residual: strong.interior_max,
        vertex_residuals: strong.vertex_residuals,
        branch,
        r_final,
        dichotomy,
    })
}

// ---------------------------------------------------------------------------
// Linear ground state: projected gradient + inverse-iteration polish.
// ---------------------------------------------------------------------------

/// Minimizes the Rayleigh quotient on the mass-μ sphere: Barzilai–Borwein
/// projected gradient followed by inverse-iteration polish, returning the
/// linear ground state (energy field = ½‖u‖², no nonlinearity).
pub fn minimize_rayleigh(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<CriticalPoint, SolverError> {
    cfg.validate()?;
    let grid = &sys.grid;
    let n = sys.dof_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let m_norm = |v: &[C64]| -> f64 {
        v.iter()
            .zip(&sys.m_diag)
            .map(|(a, m)| m * a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    let scale = mu.sqrt() / m_norm(&x);
    for v in x.iter_mut() {
        *v *= scale;
    }
    let mut step = 1e-2;
    let mut prev: Option<(Vec<C64>, Vec<C64>)> = None;
    let mut theta = sys.rayleigh_quotient(&x);
    for _ in 0..cfg.max_outer {
        let sx = sys.s.matvec(&x);
        // L²-Riesz gradient of the Rayleigh quotient (up to 2/μ).
        let g: Vec<C64> = sx
            .iter()
            .zip(x.iter().zip(&sys.m_diag))
            .map(|(s, (v, m))| s / *m - v * theta)
            .collect();
        let gnorm = m_norm(&g);
        if gnorm / mu.sqrt() <= 1e-6 * theta.abs().max(1.0) {
            break;
        }
        if let Some((dx, dg)) = &prev {
            let num: f64 = dx
                .iter()
                .zip(dx.iter().zip(&sys.m_diag))
                .map(|(a, (b, m))| m * (a.conj() * b).re)
                .sum();
            let den: f64 = dx
                .iter()
                .zip(dg.iter().zip(&sys.m_diag))
                .map(|(a, (b, m))| m * (a.conj() * b).re)
                .sum();
            if den.abs() > 1e-300 {
                step = (num / den).abs().clamp(1e-8, 1e4);
            }
        }
        let x_old = x.clone();
        let g_old = g.clone();
        let mut t = step;
        for _ in 0..cfg.backtrack_max {
            let mut xt: Vec<C64> = x_old
                .iter()
                .zip(&g_old)
                .map(|(v, gg)| v - gg * t)
                .collect();
            let s = mu.sqrt() / m_norm(&xt);
            for v in xt.iter_mut() {
                *v *= s;
            }
            let tt = sys.rayleigh_quotient(&xt);
            if tt <= theta + 1e-14 * theta.abs() {
                x = xt;
                theta = tt;
                break;
            }
            t *= cfg.backtrack_shrink;
        }
        let dx: Vec<C64> = x.iter().zip(&x_old).map(|(a, b)| a - b).collect();
        let sx_new = sys.s.matvec(&x);
        let g_new: Vec<C64> = sx_new
            .iter()
            .zip(x.iter().zip(&sys.m_diag))
            .map(|(s, (v, m))| s / *m - v * theta)
            .collect();
        let dg: Vec<C64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
        prev = Some((dx, dg));
    }
    // Rayleigh-shifted inverse-iteration polish: converges even when the
    // ground level is nearly degenerate (flux-induced level crossings).
    let mut polished = false;
    let mut sigma_off = 1e-8;
    for _ in 0..60 {
        theta = sys.rayleigh_quotient(&x);
        let sx = sys.s.matvec(&x);
        let res: Vec<C64> = sx
            .iter()
            .zip(x.iter().zip(&sys.m_diag))
            .map(|(s, (v, m))| s / *m - v * theta)
            .collect();
        if m_norm(&res) / mu.sqrt() <= cfg.grad_tol * theta.abs().max(1.0) {
            polished = true;
            break;
        }
        let sigma = theta - sigma_off * theta.abs().max(1.0);
        let lu = match CondensedLu::factor(
            CondensedLayout::from_grid(grid),
            &sys.shifted_blocks(sigma),
        ) {
            Ok(lu) => lu,
            Err(_) => {
                sigma_off *= 10.0;
                continue;
            }
        };
        let mx: Vec<C64> = x
            .iter()
            .zip(&sys.m_diag)
            .map(|(v, m)| v * *m)
            .collect();
        let mut y = lu.solve_complex(&mx)?;
        let s = mu.sqrt() / m_norm(&y);
        for v in y.iter_mut() {
            *v *= s;
        }
        x = y;
    }
    if !polished {
        return Err(SolverError::Convergence(
            "Rayleigh minimization stalled before reaching the residual target".to_string(),
        ));
    }
    // Canonical phase: largest component real positive.
    let mut imax = 0;
    let mut best = -1.0;
    for (i, v) in x.iter().enumerate() {
        if v.norm_sqr() > best {
            best = v.norm_sqr();
            imax = i;
        }
    }
    if x[imax].norm() > 0.0 {
        let ph = x[imax].conj() / x[imax].norm();
        for v in x.iter_mut() {
            *v *= ph;
        }
    }
    let u = grid.from_free(&x);
    let quadratic = 0.5 * theta * mu;
    let strong = strong_form_residual(grid, pot, &u, theta, 4.0, &[]);
    let sx = sys.s.matvec(&x);
    let res: Vec<C64> = sx
        .iter()
        .zip(x.iter().zip(&sys.m_diag))
        .map(|(s, (v, m))| s - v * (*m * theta))
        .collect();
    let (_, weak) = residual_norms(grid, &res, mu);
    Ok(CriticalPoint {
        u,
        multiplier: theta,
        energy: quadratic,
        mass: mu,
        weak_residual: weak,
        strong_residual: strong.interior_max,
        vertex_residuals: strong.vertex_residuals,
        branch: "rayleigh-minimum".to_string(),
        r_final: None,
        dichotomy: Dichotomy::MassReached,
    })
}

// ---------------------------------------------------------------------------
// Projected gradient on the mass sphere.
// ---------------------------------------------------------------------------

/// Constrained descent on `E` over the mass-μ sphere via Riesz gradient
/// steps and mass retraction. Diverging energy (unbounded below, expected
/// for p > 6) raises `Divergence`.
pub fn projected_gradient(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    u0: &GraphFunction,
    params: &EnergyParams,
    cfg: &SolverConfig,
) -> Result<CriticalPoint, SolverError> {
    cfg.validate()?;
    let grid = &sys.grid;
    let plain = params.with_r(None);
    let m0 = grid.mass(u0);
    if !(m0 > 0.0) || !m0.is_finite() {
        return Err(SolverError::Convergence(
            "projected gradient needs a nonzero start".to_string(),
        ));
    }
    let mut u = rescale_mass(grid, u0, params.mu);
    let sup0 = u.sup_norm();
    // Form-metric preconditioner: directions S⁻¹(projected residual) keep
    // the iteration count essentially mesh-independent.
    let lu = CondensedLu::factor(CondensedLayout::from_grid(grid), &sys.shifted_blocks(0.0))?;
    let mut step = 1.0;
    let mut prev: Option<(Vec<C64>, Vec<C64>)> = None;
    let mut polish_tol = 1e-5_f64.max(10.0 * cfg.grad_tol);
    let mut polish_left = 3usize;
    for _it in 0..cfg.max_outer {
        let grad = gradient(sys, &u, &plain)?;
        let uf = grid.to_free(&u);
        let mass = grad.mass;
        let lambda = uf
            .iter()
            .zip(&grad.residual)
            .map(|(v, r)| (r.conj() * v).re)
            .sum::<f64>()
            / mass;
        let pres: Vec<C64> = grad
            .residual
            .iter()
            .zip(uf.iter().zip(&grid.global_of_free))
            .map(|(r, (v, &g))| r - v * (lambda * grid.weights[g]))
            .collect();
        let (_, rel) = residual_norms(grid, &pres, mass);
        let e_now = energy(sys, &u, &plain)?.total;
        if e_now < -1e8 || (e_now < -1e6 && u.sup_norm() > 1.5 * sup0.max(1e-12)) {
            return Err(SolverError::Divergence {
                energy: e_now,
                sup_norm: u.sup_norm(),
            });
        }
        if rel <= cfg.grad_tol {
            return finalize_point(
                sys,
                pot,
                &u,
                lambda,
                params,
                "projected-gradient".to_string(),
                None,
                Dichotomy::MassReached,
            );
        }
        // Near the basin floor, switch to the constrained Newton polish.
        if rel <= polish_tol && polish_left > 0 {
            polish_left -= 1;
            polish_tol *= 1e-2;
            if let Ok((u_ref, lam_ref)) = kkt_refine(sys, &u, lambda, params, cfg) {
                return finalize_point(
                    sys,
                    pot,
                    &u_ref,
                    lam_ref,
                    params,
                    "projected-gradient".to_string(),
                    None,
                    Dichotomy::MassReached,
                );
            }
        }
        // Preconditioned descent direction G = S⁻¹·pres.
        let dir = lu.solve_complex(&pres)?;
        let slope: f64 = pres
            .iter()
            .zip(&dir)
            .map(|(r, d)| (r.conj() * d).re)
            .sum();
        if let Some((dx, dg)) = &prev {
            let num: f64 = dx.iter().zip(dx.iter()).map(|(a, b)| (a.conj() * b).re).sum();
            let den: f64 = dx.iter().zip(dg.iter()).map(|(a, b)| (a.conj() * b).re).sum();
            if den.abs() > 1e-300 {
                step = (num / den).abs().clamp(1e-8, 1e4);
            }
        }
        let uf_old = uf.clone();
        let mut t = step;
        let mut accepted = false;
        for _bt in 0..cfg.backtrack_max {
            let trial: Vec<C64> = uf_old
                .iter()
                .zip(&dir)
                .map(|(v, d)| v - d * t)
                .collect();
            let trial_u = rescale_mass(grid, &grid.from_free(&trial), params.mu);
            let e_t = energy(sys, &trial_u, &plain)?.total;
            if e_t <= e_now - 1e-4 * t * slope.max(0.0) || e_t < e_now - 1e-14 {
                u = trial_u;
                accepted = true;
                break;
            }
            t *= cfg.backtrack_shrink;
        }
        if !accepted {
            // No descent available: either converged to the line search's
            // resolution or genuinely stuck.
            if rel <= 1e2 * cfg.grad_tol {
                return finalize_point(
                    sys,
                    pot,
                    &u,
                    lambda,
                    params,
                    "projected-gradient".to_string(),
                    None,
                    Dichotomy::MassReached,
                );
            }
            return Err(SolverError::Convergence(format!(
                "projected gradient line search stalled at relative residual {rel:.3e}"
            )));
        }
        let uf_new = grid.to_free(&u);
        let grad_new = gradient(sys, &u, &plain)?;
        let mass_new = grad_new.mass;
        let lam_new = uf_new
            .iter()
            .zip(&grad_new.residual)
            .map(|(v, r)| (r.conj() * v).re)
            .sum::<f64>()
            / mass_new;
        let pres_new: Vec<C64> = grad_new
            .residual
            .iter()
            .zip(uf_new.iter().zip(&grid.global_of_free))
            .map(|(r, (v, &g))| r - v * (lam_new * grid.weights[g]))
            .collect();
        let dir_new = lu.solve_complex(&pres_new)?;
        let dx: Vec<C64> = uf_new.iter().zip(&uf_old).map(|(a, b)| a - b).collect();
        let dg: Vec<C64> = dir_new.iter().zip(&dir).map(|(a, b)| a - b).collect();
        prev = Some((dx, dg));
    }
    Err(SolverError::Convergence(format!(
        "projected gradient exhausted {} iterations",
        cfg.max_outer
    )))
}

// ---------------------------------------------------------------------------
// Anchored Newton for the penalized functional.
// ---------------------------------------------------------------------------

/// Nodal Hessian coefficients of the nonlinear term: complex-linear part
/// `α = w·(p/2)|u|^{p−2}` and conjugate-linear part
/// `β = w·((p−2)/2)|u|^{p−4}u²`.
fn hessian_nl_coeffs(region_w: &[f64], u: &GraphFunction, p: f64) -> (Vec<f64>, Vec<C64>) {
    let mut alpha = Vec::with_capacity(u.values.len());
    let mut beta = Vec::with_capacity(u.values.len());
    for (w, v) in region_w.iter().zip(&u.values) {
        let r = v.norm();
        if r == 0.0 || *w == 0.0 {
            alpha.push(0.0);
            beta.push(C64::new(0.0, 0.0));
        } else {
            let rp2 = r.powf(p - 2.0);
            let phase2 = (v / r) * (v / r);
            alpha.push(w * (p / 2.0) * rp2);
            beta.push(phase2 * (w * ((p - 2.0) / 2.0) * rp2));
        }
    }
    (alpha, beta)
}

/// Realified Jacobian blocks of `S − λM − diag(α) − conj-diag(β)`.
fn jacobian_blocks(
    sys: &HermitianSystem,
    lambda: f64,
    alpha: &[f64],
    beta: &[C64],
) -> Vec<(usize, usize, Block2)> {
    let grid = &sys.grid;
    let mut blocks = sys.shifted_blocks(lambda);
    for (f, &g) in grid.global_of_free.iter().enumerate() {
        if alpha[g] != 0.0 {
            blocks.push((f, f, complex_linear_block(C64::new(-alpha[g], 0.0))));
        }
        if beta[g].norm_sqr() != 0.0 {
            blocks.push((f, f, conj_linear_block(-beta[g])));
        }
    }
    blocks
}

/// Phase-minimized squared M-distance to a stored orbit and the inner
/// product used by its derivative.
fn orbit_distance_sq(grid: &GraphGrid, u: &GraphFunction, v: &GraphFunction) -> (f64, C64) {
    let c = grid.inner_l2_complex(v, u);
    let d2 = grid.mass(u) + grid.mass(v) - 2.0 * c.norm();
    (d2.max(0.0), c)
}

struct Deflation<'a> {
    points: &'a [GraphFunction],
    shift: f64,
}

impl<'a> Deflation<'a> {
    /// Multiplicative factor D(u) = Π (1 + shift/d_i²).
    fn factor(&self, grid: &GraphGrid, u: &GraphFunction) -> f64 {
        let mut d = 1.0;
        for p in self.points {
            let (d2, _) = orbit_distance_sq(grid, u, p);
            d *= 1.0 + self.shift / d2.max(1e-300);
        }
        d
    }

    /// Directional derivative of log D at `u` along `delta` (free vector).
    fn dlog_along(&self, grid: &GraphGrid, u: &GraphFunction, delta: &[C64]) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let dg = grid.from_free(delta);
        let u_dot: f64 = grid.inner_l2_complex(u, &dg).re;
        let mut total = 0.0;
        for p in self.points {
            let (d2, c) = orbit_distance_sq(grid, u, p);
            let d2 = d2.max(1e-300);
            let p_dot = grid.inner_l2_complex(p, &dg);
            let dd2 = 2.0 * u_dot
                - if c.norm() > 0.0 {
                    2.0 * (c.conj() * p_dot).re / c.norm()
                } else {
                    0.0
                };
            total += (-self.shift / (d2 * d2)) / (1.0 + self.shift / d2) * dd2;
        }
        total
    }
}

/// Picks (and phase-normalizes to) the anchor DOF: `cfg.phase_anchor` if it
/// is a free DOF, otherwise the largest-modulus free component.
fn resolve_anchor(
    grid: &GraphGrid,
    u: &mut GraphFunction,
    cfg: &SolverConfig,
) -> Result<usize, SolverError> {
    let f = match cfg.phase_anchor {
        Some(g) => grid
            .free_of_global
            .get(g)
            .copied()
            .flatten()
            .ok_or_else(|| {
                SolverError::Convergence(format!(
                    "phase anchor DOF {g} is pinned or out of range"
                ))
            })?,
        None => {
            let mut best = (0usize, -1.0f64);
            for (f, &g) in grid.global_of_free.iter().enumerate() {
                let a = u.values[g].norm_sqr();
                if a > best.1 {
                    best = (f, a);
                }
            }
            best.0
        }
    };
    let g = grid.global_of_free[f];
    let a = u.values[g];
    if a.norm() > 0.0 {
        let ph = a.conj() / a.norm();
        for v in u.values.iter_mut() {
            *v *= ph;
        }
    }
    Ok(f)
}

/// One critical point of the penalized functional at fixed exponent `r`,
/// by damped Newton on the realified gradient with a phase-anchor row and
/// rejection of steps leaving the open mass ball.
pub fn penalized_critical_point(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    seed: &GraphFunction,
    params: &EnergyParams,
    cfg: &SolverConfig,
    r: f64,
) -> Result<CriticalPoint, SolverError> {
    cfg.validate()?;
    let stage = params.with_r(Some(r));
    let u = newton_penalized(sys, seed, &stage, cfg, &Deflation { points: &[], shift: 0.0 })?;
    let grad = gradient(sys, &u, &stage)?;
    finalize_penalized(sys, pot, u, grad.multiplier_penalty, &stage, r)
}

fn finalize_penalized(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    u: GraphFunction,
    lambda: f64,
    stage: &EnergyParams,
    r: f64,
) -> Result<CriticalPoint, SolverError> {
    let mut cp = finalize_point(
        sys,
        pot,
        &u,
        lambda,
        stage,
        "penalized".to_string(),
        Some(r),
        Dichotomy::MassStagnated {
            mass: sys.grid.mass(&u),
            multiplier: lambda,
        },
    )?;
    // Report the penalized energy for a single-stage solve.
    cp.energy = energy(sys, &u, stage)?.total;
    Ok(cp)
}

/// Rescales `u` onto the radial ridge of the penalized functional: the
/// amplitude `t` where `d/dt E_{r,μ}(t·u) = 0`. Such a `t` always exists
/// because the energy rises quadratically from zero and the penalty wall
/// pulls it to −∞ at the mass boundary; seeding Newton on the ridge keeps
/// it away from the trivial zero root when the stage's critical mass is
/// small.
fn radial_prepare(
    sys: &HermitianSystem,
    u: &GraphFunction,
    stage: &EnergyParams,
) -> Result<GraphFunction, SolverError> {
    let grid = &sys.grid;
    let r = stage.r.expect("radial preparation needs a penalty exponent");
    let mu = stage.mu;
    let uf = grid.to_free(u);
    let su = sys.s.matvec(&uf);
    let q2: f64 = uf.iter().zip(&su).map(|(a, b)| (a.conj() * b).re).sum();
    let region_w = grid.region_weights(&stage.region_edges);
    let psi_p: f64 = region_w
        .iter()
        .zip(&u.values)
        .map(|(w, v)| w * v.norm().powf(stage.p))
        .sum();
    let m0 = grid.mass(u);
    if !(q2 > 0.0) || !(m0 > 0.0) {
        return Err(SolverError::Convergence(
            "radial preparation needs a nonzero seed with positive form energy".to_string(),
        ));
    }
    // g(t) = φ'(t)/t with φ(t) = E_{r,μ}(t·u); g(0⁺) = ‖u‖² > 0 and
    // g → −∞ at the mass boundary, so a sign change is always bracketed.
    let g = |t: f64| -> Result<f64, SolverError> {
        let s = (t * t * m0 / mu).min(1.0 - 1e-15);
        Ok(q2 - t.powf(stage.p - 2.0) * psi_p - 2.0 * m0 / mu * f_r_prime(r, s)?)
    };
    let t_max = (mu / m0).sqrt();
    let mut lo = 1e-8 * t_max;
    let mut hi = (1.0 - 1e-9) * t_max;
    if g(lo)? <= 0.0 {
        // Degenerate seed (nonlinearity overwhelms at all amplitudes);
        // keep the smallest amplitude and let Newton sort it out.
        return Ok(u.scale(C64::new(lo, 0.0)));
    }
    if g(hi)? >= 0.0 {
        return Ok(u.scale(C64::new(hi, 0.0)));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) < 1e-14 * t_max {
            break;
        }
    }
    Ok(u.scale(C64::new(0.5 * (lo + hi), 0.0)))
}

/// Core Newton loop; returns the converged field inside the open ball.
fn newton_penalized(
    sys: &HermitianSystem,
    seed: &GraphFunction,
    stage: &EnergyParams,
    cfg: &SolverConfig,
    deflation: &Deflation,
) -> Result<GraphFunction, SolverError> {
    let grid = &sys.grid;
    let r = stage.r.expect("penalized stage needs r");
    let mu = stage.mu;
    let mut u = seed.clone();
    let m0 = grid.mass(&u);
    if !(m0 > 0.0) || !m0.is_finite() {
        return Err(SolverError::Convergence(
            "penalized solve needs a nonzero seed inside the mass ball".to_string(),
        ));
    }
    if m0 >= mu {
        u = rescale_mass(grid, &u, 0.9 * mu);
    }
    u = radial_prepare(sys, &u, stage)?;
    let anchor = resolve_anchor(grid, &mut u, cfg)?;
    let region_w = grid.region_weights(&stage.region_edges);
    let merit = |res: &[C64], grid: &GraphGrid| -> f64 {
        0.5 * res
            .iter()
            .zip(&grid.global_of_free)
            .map(|(v, &g)| v.norm_sqr() / grid.weights[g])
            .sum::<f64>()
    };
    for _it in 0..cfg.max_iter {
        let grad = gradient(sys, &u, stage)?;
        let mass = grad.mass;
        let (_, rel) = residual_norms(grid, &grad.residual, mass);
        if rel <= cfg.grad_tol {
            if mass < 1e-12 * mu {
                return Err(SolverError::Convergence(
                    "collapsed onto the trivial zero solution".to_string(),
                ));
            }
            return Ok(u);
        }
        // Jacobian: S − λ_pen·M − nonlinear diagonal − penalty rank-one.
        let (alpha, beta) = hessian_nl_coeffs(&region_w, &u, stage.p);
        let mut blocks = jacobian_blocks(sys, grad.multiplier_penalty, &alpha, &beta);
        anchor_block_row(&mut blocks, anchor, 1);
        let layout = CondensedLayout::from_grid(grid);
        let lu = CondensedLu::factor(layout, &blocks)
            .map_err(|e| SolverError::Convergence(format!("Jacobian factorization: {e}")))?;
        let uf = grid.to_free(&u);
        let mut q = realify(
            &uf.iter()
                .zip(&grid.global_of_free)
                .map(|(v, &g)| v * grid.weights[g])
                .collect::<Vec<C64>>(),
        );
        q[2 * anchor + 1] = 0.0;
        let c_pen = 4.0 / (mu * mu) * f_r_second(r, mass / mu)?;
        let rank1 = RankOneSolver::new(&lu, q, c_pen)
            .map_err(|e| SolverError::Convergence(format!("penalty rank-one update: {e}")))?;
        let mut rhs = realify(&grad.residual);
        for v in rhs.iter_mut() {
            *v = -*v;
        }
        rhs[2 * anchor + 1] = -u.values[grid.global_of_free[anchor]].im;
        let delta = unrealify(&rank1.solve(&rhs)?);
        // Deflation correction: scale the Newton step.
        let dlog = deflation.dlog_along(grid, &u, &delta);
        let denom = 1.0 - dlog;
        let scale = if denom.abs() < 0.05 {
            20.0_f64.copysign(denom)
        } else {
            1.0 / denom
        };
        let phi0 = merit(&grad.residual, grid) * deflation.factor(grid, &u).powi(2);
        let mut t = 1.0;
        let mut accepted = false;
        let mut boundary_blocked = false;
        for _bt in 0..cfg.backtrack_max {
            let trial: Vec<C64> = uf
                .iter()
                .zip(&delta)
                .map(|(v, d)| v + d * (t * scale))
                .collect();
            let trial_u = grid.from_free(&trial);
            let tm = grid.mass(&trial_u);
            if tm >= mu * (1.0 - 1e-12) {
                boundary_blocked = true;
                t *= cfg.backtrack_shrink;
                continue;
            }
            let tg = match gradient(sys, &trial_u, stage) {
                Ok(g) => g,
                Err(EnergyError::OutsideUMu { .. }) => {
                    boundary_blocked = true;
                    t *= cfg.backtrack_shrink;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let phi_t = merit(&tg.residual, grid) * deflation.factor(grid, &trial_u).powi(2);
            if phi_t <= (1.0 - 1e-4 * t) * phi0 {
                u = trial_u;
                accepted = true;
                break;
            }
            t *= cfg.backtrack_shrink;
        }
        if !accepted {
            if boundary_blocked {
                return Err(SolverError::LeftUMu(format!(
                    "every damped step exits the open ball of mass {mu} (mass {mass})"
                )));
            }
            return Err(SolverError::Convergence(format!(
                "Newton line search stalled at relative residual {rel:.3e} (r = {r})"
            )));
        }
    }
    Err(SolverError::Convergence(format!(
        "penalized Newton exhausted {} iterations at r = {r}",
        cfg.max_iter
    )))
}

/// Constrained refinement: Newton on the KKT system
/// `Su − N(u) − λMu = 0`, `mass(u) = μ`, with the phase anchor, solved via
/// a bordered elimination (two linear solves per step).
fn kkt_refine(
    sys: &HermitianSystem,
    seed: &GraphFunction,
    lambda0: f64,
    params: &EnergyParams,
    cfg: &SolverConfig,
) -> Result<(GraphFunction, f64), SolverError> {
    let grid = &sys.grid;
    let plain = params.with_r(None);
    let mu = params.mu;
    let mut u = seed.clone();
    let anchor = resolve_anchor(grid, &mut u, cfg)?;
    let mut lambda = lambda0;
    let region_w = grid.region_weights(&params.region_edges);
    for _it in 0..cfg.max_iter {
        let grad = gradient(sys, &u, &plain)?;
        let uf = grid.to_free(&u);
        let mass = grad.mass;
        let res: Vec<C64> = grad
            .residual
            .iter()
            .zip(uf.iter().zip(&grid.global_of_free))
            .map(|(rr, (v, &g))| rr - v * (lambda * grid.weights[g]))
            .collect();
        let (_, rel) = residual_norms(grid, &res, mass);
        let mass_gap = mass - mu;
        if rel <= cfg.grad_tol && mass_gap.abs() <= cfg.mass_tol * mu {
            return Ok((u, lambda));
        }
        let (alpha, beta) = hessian_nl_coeffs(&region_w, &u, params.p);
        let mut blocks = jacobian_blocks(sys, lambda, &alpha, &beta);
        anchor_block_row(&mut blocks, anchor, 1);
        let layout = CondensedLayout::from_grid(grid);
        let lu = CondensedLu::factor(layout, &blocks)
            .map_err(|e| SolverError::Convergence(format!("KKT factorization: {e}")))?;
        let mut q = realify(
            &uf.iter()
                .zip(&grid.global_of_free)
                .map(|(v, &g)| v * grid.weights[g])
                .collect::<Vec<C64>>(),
        );
        q[2 * anchor + 1] = 0.0;
        let mut rhs1 = realify(&res);
        for v in rhs1.iter_mut() {
            *v = -*v;
        }
        rhs1[2 * anchor + 1] = -u.values[grid.global_of_free[anchor]].im;
        let d1 = lu.solve(&rhs1)?;
        let d2 = lu.solve(&q)?;
        let q_d1: f64 = q.iter().zip(&d1).map(|(a, b)| a * b).sum();
        let q_d2: f64 = q.iter().zip(&d2).map(|(a, b)| a * b).sum();
        if q_d2.abs() < 1e-300 {
            return Err(SolverError::Convergence(
                "mass constraint row degenerate in the KKT refinement".to_string(),
            ));
        }
        let dlam = (-mass_gap / 2.0 - q_d1) / q_d2;
        let du: Vec<C64> = unrealify(&d1)
            .iter()
            .zip(unrealify(&d2))
            .map(|(a, b)| a + b * dlam)
            .collect();
        // Merit: residual plus scaled mass defect.
        let merit0 = {
            let rr: f64 = res
                .iter()
                .zip(&grid.global_of_free)
                .map(|(v, &g)| v.norm_sqr() / grid.weights[g])
                .sum();
            rr / mass + (mass_gap / mu).powi(2)
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _bt in 0..cfg.backtrack_max {
            let trial: Vec<C64> = uf.iter().zip(&du).map(|(v, d)| v + d * t).collect();
            let tu = grid.from_free(&trial);
            let tl = lambda + t * dlam;
            let tg = gradient(sys, &tu, &plain)?;
            let tm = tg.mass;
            let tres: Vec<C64> = tg
                .residual
                .iter()
                .zip(trial.iter().zip(&grid.global_of_free))
                .map(|(rr, (v, &g))| rr - v * (tl * grid.weights[g]))
                .collect();
            let merit_t = {
                let rr: f64 = tres
                    .iter()
                    .zip(&grid.global_of_free)
                    .map(|(v, &g)| v.norm_sqr() / grid.weights[g])
                    .sum();
                rr / tm.max(1e-300) + ((tm - mu) / mu).powi(2)
            };
            if merit_t <= (1.0 - 1e-4 * t) * merit0 {
                u = tu;
                lambda = tl;
                accepted = true;
                break;
            }
            t *= cfg.backtrack_shrink;
        }
        if !accepted {
            return Err(SolverError::Convergence(format!(
                "KKT refinement stalled at relative residual {rel:.3e}"
            )));
        }
        if !lambda.is_finite() || lambda.abs() > 1e9 {
            return Err(SolverError::Convergence(
                "KKT multiplier diverged".to_string(),
            ));
        }
    }
    Err(SolverError::Convergence(format!(
        "KKT refinement exhausted {} iterations",
        cfg.max_iter
    )))
}

// ---------------------------------------------------------------------------
// Continuation in the penalty exponent.
// ---------------------------------------------------------------------------

/// Runs the penalty schedule with warm starts and finishes with the
/// constrained refinement, reporting which dichotomy alternative occurred.
pub fn r_continuation(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    seed: &GraphFunction,
    params: &EnergyParams,
    cfg: &SolverConfig,
) -> Result<CriticalPoint, SolverError> {
    r_continuation_deflated(sys, pot, seed, params, cfg, &[], "r-continuation".to_string())
}

fn r_continuation_deflated(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    seed: &GraphFunction,
    params: &EnergyParams,
    cfg: &SolverConfig,
    deflate: &[GraphFunction],
    branch: String,
) -> Result<CriticalPoint, SolverError> {
    cfg.validate()?;
    let grid = &sys.grid;
    let mu = params.mu;
    let deflation = Deflation {
        points: deflate,
        shift: cfg.deflation_shift * mu,
    };
    let mut u = seed.clone();
    let m_seed = grid.mass(&u);
    if !(m_seed > 0.0) || !m_seed.is_finite() {
        return Err(SolverError::Convergence(
            "continuation needs a nonzero seed".to_string(),
        ));
    }
    if m_seed >= mu {
        u = rescale_mass(grid, &u, 0.9 * mu);
    }
    let mut r_last = cfg.r_schedule[0];
    let mut lambda_last = 0.0;
    let mut mass_last = grid.mass(&u);
    for &r in &cfg.r_schedule {
        let stage = params.with_r(Some(r));
        u = newton_penalized(sys, &u, &stage, cfg, &deflation)?;
        let rep = energy(sys, &u, &stage)?;
        r_last = r;
        lambda_last = rep.multiplier_estimate;
        mass_last = rep.mass;
        if (mass_last - mu).abs() <= cfg.mass_tol * mu {
            break;
        }
    }
    let s = mass_last / mu;
    if s < 0.9 {
        // Mass stalled inside the ball: the vanishing-multiplier alternative.
        return finalize_point(
            sys,
            pot,
            &u,
            lambda_last,
            params,
            branch,
            Some(r_last),
            Dichotomy::MassStagnated {
                mass: mass_last,
                multiplier: lambda_last,
            },
        );
    }
    let (u_ref, lambda) = kkt_refine(sys, &u, lambda_last, params, cfg)?;
    finalize_point(
        sys,
        pot,
        &u_ref,
        lambda,
        params,
        branch,
        Some(r_last),
        Dichotomy::MassReached,
    )
}

// ---------------------------------------------------------------------------
// Multi-branch search with deflation.
// ---------------------------------------------------------------------------

/// Outcome of the multi-branch search: distinct points sorted by energy,
/// plus collapse notes and threshold warnings.
#[derive(Debug)]
pub struct BranchOutcome {
    pub points: Vec<CriticalPoint>,
    /// One note per branch that failed to produce a new orbit.
    pub collapsed: Vec<String>,
    pub warnings: Vec<String>,
}

/// Phase-minimized L² distance between two fields.
pub fn orbit_distance(grid: &GraphGrid, a: &GraphFunction, b: &GraphFunction) -> f64 {
    let (d2, _) = orbit_distance_sq(grid, a, b);
    d2.sqrt()
}

/// Seeds continuation from the first `k` eigenfunctions, deflating each run
/// against the orbits already found; retries with seeded noise before
/// declaring a branch collapsed.
pub fn multi_branch(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    params: &EnergyParams,
    cfg: &SolverConfig,
    k: usize,
    thresholds: Option<&Thresholds>,
) -> Result<BranchOutcome, SolverError> {
    cfg.validate()?;
    let grid = &sys.grid;
    let mu = params.mu;
    let spec = eigenpairs(
        sys,
        k,
        &EigOptions {
            seed: cfg.seed,
            ..EigOptions::default()
        },
    )?;
    let mut warnings = Vec::new();
    if let Some(th) = thresholds {
        let level = spec.clusters[k - 1] + 1;
        if level <= th.mu_tilde.len() {
            let bound = th.mu_tilde[level - 1];
            if mu >= bound {
                warnings.push(format!(
                    "target mass {mu} is not below the level-separation bound {bound} for {level} levels; branch energies may not interlace"
                ));
            }
        }
        match th.multiplicity_threshold(level.min(th.lambdas.len())) {
            Ok(b) if mu >= b => warnings.push(format!(
                "target mass {mu} exceeds the certified multiplicity threshold {b}"
            )),
            _ => {}
        }
    }
    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut collapsed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb4a2c3);
    for j in 0..k {
        let label = format!("seeded-from-phi_{}", j + 1);
        let base_seed = rescale_mass(grid, &spec.eigenfunctions[j], (0.9 * mu).min(mu));
        let mut found: Option<CriticalPoint> = None;
        let mut last_err: Option<String> = None;
        for attempt in 0..=3 {
            let seed_u = if attempt == 0 {
                base_seed.clone()
            } else {
                // Deterministic noise at 1e−2·√μ in L².
                let noise_f: Vec<C64> = (0..grid.n_free())
                    .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                let noise = rescale_mass(grid, &grid.from_free(&noise_f), mu * 1e-4);
                let mut s = base_seed.clone();
                for (a, b) in s.values.iter_mut().zip(&noise.values) {
                    *a += b;
                }
                rescale_mass(grid, &s, (0.9 * mu).min(mu))
            };
            let deflate: Vec<GraphFunction> =
                points.iter().map(|p| p.u.clone()).collect();
            match r_continuation_deflated(
                sys,
                pot,
                &seed_u,
                params,
                cfg,
                &deflate,
                label.clone(),
            ) {
                Ok(cp) => {
                    let distinct = points.iter().all(|p| {
                        orbit_distance(grid, &cp.u, &p.u) > cfg.distinct_tol * mu.sqrt()
                    });
                    if distinct {
                        found = Some(cp);
                        break;
                    }
                    last_err = Some("converged onto an already-found orbit".to_string());
                }
                Err(SolverError::Energy(e)) => return Err(SolverError::Energy(e)),
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        match found {
            Some(cp) => points.push(cp),
            None => collapsed.push(format!(
                "branch {} ({label}) collapsed after 3 retries: {}",
                j + 1,
                last_err.unwrap_or_else(|| "unknown".to_string())
            )),
        }
    }
    points.sort_by(|a, b| a.energy.partial_cmp(&b.energy).unwrap());
    Ok(BranchOutcome {
        points,
        collapsed,
        warnings,
    })
}

/// Coercivity diagnostic of the penalized functional at `u`:
/// `p·E_{r,μ}(u) − (p−2)/2·‖u‖²`, which is nonnegative (up to tolerance)
/// at critical points once `r ≥ p/2`.
pub fn boundedness_gap(
    sys: &HermitianSystem,
    u: &GraphFunction,
    params: &EnergyParams,
) -> Result<f64, SolverError> {
    let rep = energy(sys, u, params)?;
    Ok(params.p * rep.total - (params.p - 2.0) * rep.quadratic)
}
