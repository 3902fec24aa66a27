//! Scalar functionals of the constrained NLS problem: the action
//! `E(u) = ½‖u‖²_{A,V} − Ψ(u)`, its mass-penalized family, gradients,
//! empirical Gagliardo–Nirenberg–Sobolev constants, and the closed-form
//! mass thresholds used by existence/nonexistence audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::{C64, GraphFunction, PotentialPair};
use crate::operator::{eigenpairs, EigOptions, HermitianSystem};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("mass {mass} is not inside the open penalty ball of radius {mu}")]
    OutsideUMu { mass: f64, mu: f64 },
    #[error("regime error: {0}")]
    Regime(String),
}

// ---------------------------------------------------------------------------
// Penalty family f_r(s) = s^r / (1 − s) on [0, 1).
// ---------------------------------------------------------------------------

fn check_penalty_domain(r: f64, s: f64) -> Result<(), EnergyError> {
    if !(r > 1.0) || !r.is_finite() {
        return Err(EnergyError::Domain(format!(
            "penalty exponent must satisfy r > 1, got {r}"
        )));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(EnergyError::Domain(format!(
            "penalty argument must satisfy 0 ≤ s < 1, got {s}"
        )));
    }
    Ok(())
}

/// `f_r(s) = s^r/(1−s)`; vanishes to high order at 0, blows up at 1.
pub fn f_r(r: f64, s: f64) -> Result<f64, EnergyError> {
    check_penalty_domain(r, s)?;
    Ok(s.powf(r) / (1.0 - s))
}

/// `f'_r(s) = r·s^{r−1}/(1−s) + s^r/(1−s)²`.
pub fn f_r_prime(r: f64, s: f64) -> Result<f64, EnergyError> {
    check_penalty_domain(r, s)?;
    let om = 1.0 - s;
    Ok(r * s.powf(r - 1.0) / om + s.powf(r) / (om * om))
}

/// `f''_r(s) = r(r−1)s^{r−2}/(1−s) + 2r·s^{r−1}/(1−s)² + 2s^r/(1−s)³`.
pub fn f_r_second(r: f64, s: f64) -> Result<f64, EnergyError> {
    check_penalty_domain(r, s)?;
    let om = 1.0 - s;
    Ok(r * (r - 1.0) * s.powf(r - 2.0) / om
        + 2.0 * r * s.powf(r - 1.0) / (om * om)
        + 2.0 * s.powf(r) / (om * om * om))
}

/// `h_r(s) = f'_r(s)·s − f_r(s)`, nonnegative and increasing on [0, 1).
pub fn h_r(r: f64, s: f64) -> Result<f64, EnergyError> {
    Ok(f_r_prime(r, s)? * s - f_r(r, s)?)
}

// ---------------------------------------------------------------------------
// Energy and gradient.
// ---------------------------------------------------------------------------

/// Parameters of the (optionally penalized) constrained functional.
#[derive(Debug, Clone)]
pub struct EnergyParams {
    /// Nonlinearity power, `p > 2`.
    pub p: f64,
    /// Target mass, `μ > 0`.
    pub mu: f64,
    /// Edges carrying the nonlinearity (resolved region).
    pub region_edges: Vec<usize>,
    /// Penalty exponent `r > 1`; `None` evaluates the plain functional.
    pub r: Option<f64>,
}

impl EnergyParams {
    pub fn new(
        p: f64,
        mu: f64,
        region_edges: Vec<usize>,
        r: Option<f64>,
    ) -> Result<Self, EnergyError> {
        if !(p > 2.0) || !p.is_finite() {
            return Err(EnergyError::Domain(format!(
                "nonlinearity power must satisfy p > 2, got {p}"
            )));
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(EnergyError::Domain(format!(
                "target mass must satisfy μ > 0, got {mu}"
            )));
        }
        if let Some(r) = r {
            if !(r > 1.0) || !r.is_finite() {
                return Err(EnergyError::Domain(format!(
                    "penalty exponent must satisfy r > 1, got {r}"
                )));
            }
        }
        Ok(EnergyParams {
            p,
            mu,
            region_edges,
            r,
        })
    }

    pub fn with_r(&self, r: Option<f64>) -> Self {
        EnergyParams {
            r,
            ..self.clone()
        }
    }
}

/// All scalar diagnostics of one functional evaluation.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    /// `½‖u‖²_{A,V}`.
    pub quadratic: f64,
    /// `(1/p)∫_region |u|^p`.
    pub psi: f64,
    /// `f_r(mass/μ)`, zero without penalty.
    pub penalty: f64,
    /// `quadratic − psi − penalty`.
    pub total: f64,
    pub mass: f64,
    /// L² norm of the gradient's Riesz representative.
    pub grad_norm: f64,
    /// With penalty: `(2/μ)f'_r(mass/μ)`; otherwise the critical-point
    /// identity `(‖u‖² − p·Ψ)/mass`.
    pub multiplier_estimate: f64,
}

/// Nodal nonlinear load `N_j = w_j·|u_j|^{p−2}u_j` on the region (global
/// indexing); mass-lumped so energy and gradient share one quadrature.
pub fn nonlinear_load(region_w: &[f64], u: &GraphFunction, p: f64) -> Vec<C64> {
    region_w
        .iter()
        .zip(&u.values)
        .map(|(w, v)| v * (w * v.norm().powf(p - 2.0)))
        .collect()
}

struct Evaluation {
    quadratic: f64,
    psi: f64,
    penalty: f64,
    mass: f64,
    lambda_pen: f64,
    residual: Vec<C64>,
}

fn evaluate(
    sys: &HermitianSystem,
    u: &GraphFunction,
    params: &EnergyParams,
) -> Result<Evaluation, EnergyError> {
    let grid = &sys.grid;
    let uf = grid.to_free(u);
    let su = sys.s.matvec(&uf);
    let quadratic = 0.5
        * uf.iter()
            .zip(&su)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>();
    let region_w = grid.region_weights(&params.region_edges);
    let psi = region_w
        .iter()
        .zip(&u.values)
        .map(|(w, v)| w * v.norm().powf(params.p))
        .sum::<f64>()
        / params.p;
    let mass = grid.mass(u);
    let (penalty, lambda_pen) = match params.r {
        None => (0.0, 0.0),
        Some(r) => {
            let s = mass / params.mu;
            if s >= 1.0 {
                return Err(EnergyError::OutsideUMu {
                    mass,
                    mu: params.mu,
                });
            }
            (f_r(r, s)?, 2.0 / params.mu * f_r_prime(r, s)?)
        }
    };
    let load = nonlinear_load(&region_w, u, params.p);
    let mut residual = su;
    for (f, &g) in grid.global_of_free.iter().enumerate() {
        residual[f] -= load[g] + u.values[g] * (lambda_pen * grid.weights[g]);
    }
    Ok(Evaluation {
        quadratic,
        psi,
        penalty,
        mass,
        lambda_pen,
        residual,
    })
}

/// Evaluates `E` (or `E_{r,μ}` with penalty) and its diagnostics.
pub fn energy(
    sys: &HermitianSystem,
    u: &GraphFunction,
    params: &EnergyParams,
) -> Result<EnergyReport, EnergyError> {
    let ev = evaluate(sys, u, params)?;
    let grid = &sys.grid;
    let grad_norm = ev
        .residual
        .iter()
        .zip(&grid.global_of_free)
        .map(|(r, &g)| r.norm_sqr() / grid.weights[g])
        .sum::<f64>()
        .sqrt();
    let multiplier_estimate = if params.r.is_some() {
        ev.lambda_pen
    } else if ev.mass > 0.0 {
        (2.0 * ev.quadratic - params.p * ev.psi) / ev.mass
    } else {
        0.0
    };
    Ok(EnergyReport {
        quadratic: ev.quadratic,
        psi: ev.psi,
        penalty: ev.penalty,
        total: ev.quadratic - ev.psi - ev.penalty,
        mass: ev.mass,
        grad_norm,
        multiplier_estimate,
    })
}

/// Gradient of the functional at `u`.
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Cogradient over free DOFs: `⟨E'(u), v⟩ = Re Σ conj(residual_f)·v_f`.
    pub residual: Vec<C64>,
    /// L² Riesz representative (global nodal values: residual/weight).
    pub riesz_l2: GraphFunction,
    /// `‖riesz_l2‖₂` (equals the dual norm of E' in the L² pairing).
    pub l2_norm: f64,
    /// Penalty multiplier `λ_pen = (2/μ)f'_r(mass/μ)` (0 without penalty).
    pub multiplier_penalty: f64,
    pub mass: f64,
}

pub fn gradient(
    sys: &HermitianSystem,
    u: &GraphFunction,
    params: &EnergyParams,
) -> Result<GradientReport, EnergyError> {
    let ev = evaluate(sys, u, params)?;
    let grid = &sys.grid;
    let mut riesz = GraphFunction::zeros(grid);
    let mut sq = 0.0;
    for (f, &g) in grid.global_of_free.iter().enumerate() {
        let w = grid.weights[g];
        riesz.values[g] = ev.residual[f] / w;
        sq += ev.residual[f].norm_sqr() / w;
    }
    Ok(GradientReport {
        residual: ev.residual,
        riesz_l2: riesz,
        l2_norm: sq.sqrt(),
        multiplier_penalty: ev.lambda_pen,
        mass: ev.mass,
    })
}

// ---------------------------------------------------------------------------
// Empirical Gagliardo–Nirenberg–Sobolev constants.
// ---------------------------------------------------------------------------

/// Empirical interpolation constants: `‖u‖_p^p ≤ C_p·Z^{p/2−1}·‖u‖₂^{p/2+1}`
/// and `‖u‖_∞ ≤ C_∞·Z^{1/2}·‖u‖₂^{1/2}`, where `Z` is the form norm on
/// compact graphs and the covariant-derivative seminorm when half-lines are
/// present.
#[derive(Debug, Clone)]
pub struct GnsConstants {
    pub c_p: f64,
    pub c_inf: f64,
    pub p: f64,
    /// Number of probe fields behind the estimate.
    pub probes: usize,
    /// True when the denominator uses the covariant seminorm.
    pub noncompact: bool,
    /// Multiplicative headroom applied to the observed suprema.
    pub safety: f64,
}

/// Ratio denominator base: form norm (compact) or covariant seminorm.
/// Interpolation denominator `Z(u)`: the form norm on compact graphs, the
/// covariant-derivative seminorm (form minus the `V` part) otherwise.
pub fn gns_z(sys: &HermitianSystem, pot: &PotentialPair, uf: &[C64], noncompact: bool) -> f64 {
    let su = sys.s.matvec(uf);
    let mut form = 0.0;
    for (a, b) in uf.iter().zip(&su) {
        form += (a.conj() * b).re;
    }
    if !noncompact {
        return form.max(0.0).sqrt();
    }
    let grid = &sys.grid;
    let mut vpart = 0.0;
    for (f, &g) in grid.global_of_free.iter().enumerate() {
        vpart += grid.weights[g] * pot.v_node[g] * uf[f].norm_sqr();
    }
    (form - vpart).max(0.0).sqrt()
}

/// Estimates the interpolation constants as the supremum of the defining
/// ratio over eigenfunctions, random fields, peaked bumps, and a constant
/// field, inflated by 5% headroom.
pub fn estimate_gns_constants(
    sys: &HermitianSystem,
    pot: &PotentialPair,
    p: f64,
    probes: usize,
    seed: u64,
) -> Result<GnsConstants, EnergyError> {
    if probes < 100 {
        return Err(EnergyError::Domain(format!(
            "constant estimation needs at least 100 probes, got {probes}"
        )));
    }
    if !(p >= 2.0) {
        return Err(EnergyError::Domain(format!(
            "interpolation inequality requires p ≥ 2, got {p}"
        )));
    }
    let grid = &sys.grid;
    let noncompact = grid.edges.iter().any(|e| e.is_halfline);
    let mut probe_set: Vec<GraphFunction> = Vec::with_capacity(probes);
    // Eigenfunction probes (skipped silently if the solver stalls).
    let k = 6.min(sys.dof_count);
    if let Ok(spec) = eigenpairs(sys, k, &EigOptions::default()) {
        probe_set.extend(spec.eigenfunctions);
    }
    // Constant probe (zero on pinned DOFs).
    probe_set.push(grid.from_free(&vec![C64::new(1.0, 0.0); sys.dof_count]));
    // Peaked bumps: Gaussians of two widths at five stations per edge,
    // endpoints included — concentration at a low-degree vertex roughly
    // halves the mass and energy at fixed sup, so boundary bumps carry the
    // largest ratios and must be in the family.
    for (ei, eg) in grid.edges.iter().enumerate() {
        for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let x0 = frac * eg.length;
            for sigma in [eg.length / 8.0, 5.0 * eg.h] {
                let mut u = GraphFunction::zeros(grid);
                for j in 0..eg.n_nodes {
                    let x = eg.node_x(j);
                    u.values[eg.node_dof(j)] =
                        C64::new((-((x - x0) / sigma).powi(2)).exp(), 0.0);
                }
                for (g, v) in u.values.iter_mut().enumerate() {
                    if grid.is_pinned(g) {
                        *v = C64::new(0.0, 0.0);
                    }
                }
                let _ = ei;
                probe_set.push(u);
            }
        }
    }
    // Random complex fields fill the remaining budget.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while probe_set.len() < probes {
        let uf: Vec<C64> = (0..sys.dof_count)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        probe_set.push(grid.from_free(&uf));
    }
    let mut c_p: f64 = 0.0;
    let mut c_inf: f64 = 0.0;
    for u in &probe_set {
        let uf = grid.to_free(u);
        let z = gns_z(sys, pot, &uf, noncompact);
        let m2 = grid.mass(u).sqrt();
        if z <= 0.0 || m2 <= 0.0 {
            continue;
        }
        let lp: f64 = grid
            .weights
            .iter()
            .zip(&u.values)
            .map(|(w, v)| w * v.norm().powf(p))
            .sum();
        let sup = u.sup_norm();
        c_p = c_p.max(lp / (z.powf(p / 2.0 - 1.0) * m2.powf(p / 2.0 + 1.0)));
        c_inf = c_inf.max(sup / (z.sqrt() * m2.sqrt()));
    }
    let safety = 1.05;
    Ok(GnsConstants {
        c_p: c_p * safety,
        c_inf: c_inf * safety,
        p,
        probes: probe_set.len(),
        noncompact,
        safety,
    })
}

// ---------------------------------------------------------------------------
// Closed-form mass thresholds.
// ---------------------------------------------------------------------------

/// Threshold bundle over a ladder of distinct eigenvalues `λ_1 < … < λ_k`
/// below the essential-spectrum surrogate, with empirical constants.
#[derive(Debug, Clone)]
pub struct Thresholds {
    pub p: f64,
    pub c_p: f64,
    pub c_inf: f64,
    /// Distinct eigenvalue ladder (index 0 ↦ level 1).
    pub lambdas: Vec<f64>,
    /// Essential-spectrum surrogate (`+∞` when absent).
    pub ess_inf: f64,
    /// Half-gap to the essential spectrum per level (1 when `ess_inf = ∞`).
    pub delta: Vec<f64>,
    /// Level-separation mass bounds; level 1 is unconstrained (`+∞`).
    pub mu_tilde: Vec<f64>,
    /// Tail-compactness mass bounds per level.
    pub mu_double_star: Vec<f64>,
    /// Graph has no half-lines (changes which minima apply).
    pub compact: bool,
    /// Constants are empirical suprema, not proven bounds.
    pub empirical_constants: bool,
}

/// Bisection for the level-separation bound: largest μ with
/// `μλ_{i−1}/2 < μλ_i/2 − (C_p/p)·μ^{p/2}·λ_i^{(p−2)/4}` for all 2 ≤ i ≤ k.
/// The closed form `[p(λ_i−λ_{i−1})/(2C_p λ_i^{(p−2)/4})]^{2/(p−2)}` serves
/// as a cross-check; disagreement beyond 1e−8 relative is an internal error.
fn mu_tilde_level(p: f64, c_p: f64, lam_prev: f64, lam: f64) -> Result<f64, EnergyError> {
    // g(μ) = (λ−λ_prev)/2 − (C/p)·μ^{(p−2)/2}·λ^{(p−2)/4}, strictly decreasing.
    let g = |mu: f64| (lam - lam_prev) / 2.0 - c_p / p * mu.powf((p - 2.0) / 2.0) * lam.powf((p - 2.0) / 4.0);
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while g(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let closed = (p * (lam - lam_prev) / (2.0 * c_p * lam.powf((p - 2.0) / 4.0)))
        .powf(2.0 / (p - 2.0));
    if (root - closed).abs() > 1e-8 * closed.max(f64::MIN_POSITIVE) {
        return Err(EnergyError::Domain(format!(
            "level-separation bisection {root} disagrees with closed form {closed}"
        )));
    }
    Ok(root)
}

pub fn compute_thresholds(
    p: f64,
    c_p: f64,
    c_inf: f64,
    lambdas: &[f64],
    ess_inf: f64,
    compact: bool,
) -> Result<Thresholds, EnergyError> {
    if !(p > 2.0) {
        return Err(EnergyError::Domain(format!("thresholds need p > 2, got {p}")));
    }
    if !(c_p > 0.0) || !(c_inf > 0.0) {
        return Err(EnergyError::Domain(
            "interpolation constants must be positive".to_string(),
        ));
    }
    if lambdas.is_empty() {
        return Err(EnergyError::Domain(
            "at least the first eigenvalue is required".to_string(),
        ));
    }
    for w in lambdas.windows(2) {
        if w[1] <= w[0] {
            return Err(EnergyError::Domain(
                "eigenvalue ladder must be strictly increasing (distinct levels)".to_string(),
            ));
        }
    }
    if lambdas[0] <= 0.0 {
        return Err(EnergyError::Domain(
            "eigenvalues must be positive (V ≥ 1)".to_string(),
        ));
    }
    if *lambdas.last().unwrap() >= ess_inf {
        return Err(EnergyError::Domain(format!(
            "ladder top {} must lie below the essential-spectrum surrogate {}",
            lambdas.last().unwrap(),
            ess_inf
        )));
    }
    let delta: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            if ess_inf.is_finite() {
                (ess_inf - l) / 2.0
            } else {
                1.0
            }
        })
        .collect();
    let mut mu_tilde = vec![f64::INFINITY];
    for i in 1..lambdas.len() {
        let level = mu_tilde_level(p, c_p, lambdas[i - 1], lambdas[i])?;
        mu_tilde.push(level.min(mu_tilde[i - 1]));
    }
    let mu_double_star: Vec<f64> = lambdas
        .iter()
        .zip(&delta)
        .map(|(&l, &d)| {
            c_inf.powi(-2) * ((p - 2.0) / (p * l)).sqrt() * (d / (3.0 * (p - 1.0))).powf(2.0 / (p - 2.0))
        })
        .collect();
    Ok(Thresholds {
        p,
        c_p,
        c_inf,
        lambdas: lambdas.to_vec(),
        ess_inf,
        delta,
        mu_tilde,
        mu_double_star,
        compact,
        empirical_constants: true,
    })
}

impl Thresholds {
    /// Nonexistence mass bound at energy cap `c`:
    /// no critical point with mass `ν < μ_c(c)` and energy `≤ c·μ_c(c)`.
    pub fn mu_cp(&self, c: f64) -> Result<f64, EnergyError> {
        if !(c > 0.0) {
            return Err(EnergyError::Domain(format!(
                "energy-cap coefficient must be positive, got {c}"
            )));
        }
        let p = self.p;
        let base = self.c_p.powf(2.0 / (2.0 - p));
        if p <= 6.0 {
            Ok(base * self.lambdas[0].powf((6.0 - p) / (2.0 * p - 4.0)))
        } else {
            Ok(base * (2.0 * p * c / (p - 2.0)).powf((6.0 - p) / (2.0 * p - 4.0)))
        }
    }

    /// Multiplier-sign nonexistence bound: for `λ < 0` and `2 < p < 6`, no
    /// critical point with that multiplier below this mass.
    pub fn mu_star(&self, lambda: f64) -> Result<f64, EnergyError> {
        let p = self.p;
        if !(2.0 < p && p < 6.0) {
            return Err(EnergyError::Regime(format!(
                "the multiplier-sign bound needs 2 < p < 6, got p = {p}"
            )));
        }
        if lambda >= 0.0 {
            return Err(EnergyError::Regime(format!(
                "the multiplier-sign bound needs λ < 0, got λ = {lambda}"
            )));
        }
        let e1 = (6.0 - p) / (2.0 * p - 4.0);
        Ok((4.0 / (6.0 - p)).powf(e1)
            * (4.0 / (p - 2.0)).sqrt()
            * self.c_p.powf(2.0 / (2.0 - p))
            * lambda.abs().powf(e1))
    }

    /// Guaranteed-existence mass threshold for the lowest critical point:
    /// compact graphs use the nonexistence bound at `c = λ₁/2`; with
    /// half-lines the tail-compactness bound joins the minimum.
    pub fn groundstate_threshold(&self) -> Result<f64, EnergyError> {
        let mu0 = self.mu_cp(self.lambdas[0] / 2.0)?;
        if self.compact {
            Ok(mu0)
        } else {
            Ok(mu0.min(self.mu_double_star[0]))
        }
    }

    /// Mass threshold guaranteeing at least `k` distinct critical points:
    /// `min{μ_c(λ_k/2), μ̃_k}`, intersected with the tail-compactness bound
    /// on noncompact graphs. `k` is 1-based and must fit the ladder.
    pub fn multiplicity_threshold(&self, k: usize) -> Result<f64, EnergyError> {
        if k == 0 || k > self.lambdas.len() {
            return Err(EnergyError::Domain(format!(
                "level {k} outside the computed ladder of {} eigenvalues",
                self.lambdas.len()
            )));
        }
        if k == 1 {
            return self.groundstate_threshold();
        }
        let mut t = self
            .mu_cp(self.lambdas[k - 1] / 2.0)?
            .min(self.mu_tilde[k - 1]);
        if !self.compact {
            t = t.min(self.mu_double_star[k - 1]);
        }
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Perturbed-potential norm equivalence.
// ---------------------------------------------------------------------------

/// Young constant `C_{1/2}` absorbing an `L^q` potential perturbation into
/// half the form norm: `∫|V_q||u|² ≤ ½‖u‖² + C_{1/2}‖V_q‖_q^{2q/(2q−1)}‖u‖₂²`.
/// `q = 1` needs `C_∞`; `q > 1` needs `C_p̃` for `p̃ = 2q/(q−1)`.
pub fn c_half(q: f64, c_inf: f64, c_ptilde: Option<f64>) -> Result<f64, EnergyError> {
    if !(q >= 1.0) {
        return Err(EnergyError::Domain(format!(
            "integrability exponent must satisfy q ≥ 1, got {q}"
        )));
    }
    if q == 1.0 {
        return Ok(c_inf.powi(4) / 2.0);
    }
    let cpt = c_ptilde.ok_or_else(|| {
        EnergyError::Domain(format!(
            "q = {q} needs the interpolation constant for exponent {}",
            2.0 * q / (q - 1.0)
        ))
    })?;
    Ok((2.0 * q - 1.0) / (2.0 * q)
        * q.powf(-1.0 / (2.0 * q - 1.0))
        * cpt.powf(2.0 * (q - 1.0) / (2.0 * q - 1.0)))
}

/// Smallest certified shift `ν = 1 + C_{1/2}·‖V_q‖_q^{2q/(2q−1)}` making
/// `V + V_q + ν` an equivalent form: `½‖u‖² + ‖u‖₂² ≤ ‖u‖²_{V+V_q+ν} ≤
/// (3/2)‖u‖² + (2ν−1)‖u‖₂²`.
pub fn perturbed_shift(q: f64, c_half_value: f64, vq_norm: f64) -> f64 {
    1.0 + c_half_value * vq_norm.powf(2.0 * q / (2.0 * q - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{build_grid, GraphGrid};
    use crate::graph::parse_graph;
    use crate::operator::assemble;
    use approx::assert_relative_eq;

    fn interval(l: f64, n: usize, v: f64) -> (HermitianSystem, GraphGrid, PotentialPair) {
        let g = parse_graph(&format!("v0 -- v1 : {l}")).unwrap();
        let grid = build_grid(&g, l / n as f64 + 1e-12, None).unwrap();
        let pot = PotentialPair::constants(&grid, 0.0, v).unwrap();
        let sys = assemble(&g, &grid, &pot).unwrap();
        (sys, grid, pot)
    }

    #[test]
    fn penalty_values_and_identities() {
        // Exact values at frozen points.
        assert_eq!(f_r(2.0, 0.0).unwrap(), 0.0);
        assert_eq!(f_r_prime(2.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(f_r(2.0, 0.5).unwrap(), 0.5);
        assert_relative_eq!(f_r_prime(2.0, 0.5).unwrap(), 3.0);
        // s=0.9, r=3 strict identity instance.
        let s = 0.9;
        assert!(f_r_prime(3.0, s).unwrap() * s > 3.0 * f_r(3.0, s).unwrap());
        // Identity and monotonicity across a grid for several r.
        for &r in &[2.0, 3.0, 8.0, 64.0] {
            let mut prev_fp = f64::NEG_INFINITY;
            let mut prev_h = f64::NEG_INFINITY;
            for i in 0..200 {
                let s = (i as f64 + 0.5) / 201.0;
                let f = f_r(r, s).unwrap();
                let fp = f_r_prime(r, s).unwrap();
                let fpp = f_r_second(r, s).unwrap();
                let h = h_r(r, s).unwrap();
                assert!(fp * s > r * f && f > 0.0, "identity fails at r={r}, s={s}");
                assert!(fpp > 0.0);
                assert!(fp > prev_fp && h > prev_h, "monotonicity fails at r={r}, s={s}");
                prev_fp = fp;
                prev_h = h;
            }
        }
        // Domain errors.
        assert!(f_r(2.0, 1.0).is_err());
        assert!(f_r(2.0, -0.1).is_err());
        assert!(f_r(1.0, 0.5).is_err());
        assert!(f_r_second(2.0, 1.5).is_err());
    }

    #[test]
    fn penalty_derivative_consistency() {
        // f'_r and f''_r against central differences of f_r.
        for &r in &[2.0, 5.0, 16.0] {
            for &s in &[0.1, 0.4, 0.7, 0.9] {
                let t = 1e-6;
                let fd1 = (f_r(r, s + t).unwrap() - f_r(r, s - t).unwrap()) / (2.0 * t);
                assert_relative_eq!(fd1, f_r_prime(r, s).unwrap(), max_relative = 1e-7);
                let fd2 = (f_r_prime(r, s + t).unwrap() - f_r_prime(r, s - t).unwrap()) / (2.0 * t);
                assert_relative_eq!(fd2, f_r_second(r, s).unwrap(), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn energy_closed_form_constant_field() {
        // u ≡ 1 on interval ℓ=2, V≡1, p=4: E = ½·2 − ¼·2 = 0.5 exactly.
        let (sys, grid, _pot) = interval(2.0, 50, 1.0);
        let u = GraphFunction::from_fn(&grid, |_, _| C64::new(1.0, 0.0));
        let params = EnergyParams::new(4.0, 1.0, vec![0], None).unwrap();
        let rep = energy(&sys, &u, &params).unwrap();
        assert_relative_eq!(rep.quadratic, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rep.psi, 0.5, epsilon = 1e-12);
        assert_eq!(rep.penalty, 0.0);
        assert_relative_eq!(rep.total, 0.5, epsilon = 1e-12);
        assert_relative_eq!(rep.mass, 2.0, epsilon = 1e-12);
        // Zero field: E = 0, penalty = 0.
        let zero = GraphFunction::zeros(&grid);
        let params_r = EnergyParams::new(4.0, 1.0, vec![0], Some(2.0)).unwrap();
        let rep0 = energy(&sys, &zero, &params_r).unwrap();
        assert_eq!(rep0.total, 0.0);
        assert_eq!(rep0.penalty, 0.0);
    }

    #[test]
    fn penalty_ball_membership() {
        let (sys, grid, _pot) = interval(2.0, 40, 1.0);
        let u = GraphFunction::from_fn(&grid, |_, _| C64::new(1.0, 0.0)); // mass 2
        let params = EnergyParams::new(4.0, 3.0, vec![0], Some(4.0)).unwrap();
        let rep = energy(&sys, &u, &params).unwrap();
        assert_relative_eq!(rep.penalty, f_r(4.0, 2.0 / 3.0).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(
            rep.multiplier_estimate,
            2.0 / 3.0 * f_r_prime(4.0, 2.0 / 3.0).unwrap(),
            epsilon = 1e-12
        );
        for bad_mu in [2.0, 1.5] {
            let params = EnergyParams::new(4.0, bad_mu, vec![0], Some(4.0)).unwrap();
            assert!(matches!(
                energy(&sys, &u, &params),
                Err(EnergyError::OutsideUMu { .. })
            ));
        }
    }

    #[test]
    fn localized_nonlinearity_ignores_tails() {
        // Core edge ℓ=1 with two half-lines; u ≡ 1 on free DOFs; region=core:
        // Ψ = ¼·∫_core 1 = 0.25 regardless of the tail values.
        let g = parse_graph("v0 -- v1 : 1\nv0 --> inf\nv1 --> inf").unwrap();
        let grid = build_grid(&g, 0.05, Some(5.0)).unwrap();
        let pot = PotentialPair::constants(&grid, 0.0, 1.0).unwrap();
        let sys = assemble(&g, &grid, &pot).unwrap();
        let core = g.compact_core();
        assert_eq!(core, vec![0]);
        let ones = grid.from_free(&vec![C64::new(1.0, 0.0); grid.n_free()]);
        let params = EnergyParams::new(4.0, 1.0, core.clone(), None).unwrap();
        let rep = energy(&sys, &ones, &params).unwrap();
        assert_relative_eq!(rep.psi, 0.25, epsilon = 1e-12);
        // Tail values do not enter Ψ.
        let mut damped = ones.clone();
        for eg in grid.edges.iter().filter(|e| e.is_halfline) {
            for j in 1..eg.n_nodes {
                damped.values[eg.node_dof(j)] *= 0.3;
            }
        }
        let rep2 = energy(&sys, &damped, &params).unwrap();
        assert_relative_eq!(rep2.psi, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn penalized_energy_monotone_in_r() {
        let (sys, grid, _pot) = interval(1.0, 30, 1.0);
        let u = GraphFunction::from_fn(&grid, |_, x| C64::new(0.4 * (1.0 + x), 0.2 * x));
        let params = EnergyParams::new(4.0, 4.0 * grid.mass(&u), vec![0], None).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for r in [2.0, 3.0, 6.0, 12.0, 48.0] {
            let e = energy(&sys, &u, &params.with_r(Some(r))).unwrap().total;
            assert!(e >= prev - 1e-14, "E_r not monotone at r={r}");
            prev = e;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let g = parse_graph("v0 -- v0 : 2\nv0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 0.05, None).unwrap();
        let pot = PotentialPair::from_fns(&grid, |e, x| 0.4 * (x + e as f64), |_, x| 1.0 + 0.3 * x.sin().abs()).unwrap();
        let sys = assemble(&g, &grid, &pot).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rand_fn = |scale: f64| {
            let v: Vec<C64> = (0..grid.n_free())
                .map(|_| C64::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
                .collect();
            grid.from_free(&v)
        };
        for &(p, r) in &[(3.0, None), (4.0, Some(2.0)), (6.0, Some(8.0)), (4.0, None)] {
            for _ in 0..5 {
                let u = rand_fn(0.3);
                let mu = 4.0 * grid.mass(&u).max(0.1);
                let params = EnergyParams::new(p, mu, vec![0, 1], r).unwrap();
                let grad = gradient(&sys, &u, &params).unwrap();
                let v = rand_fn(1.0);
                let t = 1e-5;
                let mut up = u.clone();
                let mut um = u.clone();
                for i in 0..up.values.len() {
                    up.values[i] += v.values[i] * t;
                    um.values[i] -= v.values[i] * t;
                }
                let ep = energy(&sys, &up, &params).unwrap().total;
                let em = energy(&sys, &um, &params).unwrap().total;
                let fd = (ep - em) / (2.0 * t);
                let vf = grid.to_free(&v);
                let dir: f64 = grad
                    .residual
                    .iter()
                    .zip(&vf)
                    .map(|(g, v)| (g.conj() * v).re)
                    .sum();
                assert_relative_eq!(fd, dir, max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gradient_linearizes_at_small_amplitude() {
        // u = t·φ₁: residual = t·λ₁·Mφ₁ + O(t³) without penalty.
        let (sys, grid, _pot) = interval(std::f64::consts::PI, 80, 1.0);
        let spec = eigenpairs(&sys, 1, &EigOptions::default()).unwrap();
        let phi = &spec.eigenfunctions[0];
        let lam = spec.eigenvalues[0];
        let params = EnergyParams::new(4.0, 1.0, vec![0], None).unwrap();
        for &t in &[1e-2, 1e-3] {
            let u = phi.scale(C64::new(t, 0.0));
            let grad = gradient(&sys, &u, &params).unwrap();
            let mut err: f64 = 0.0;
            for (f, &g) in grid.global_of_free.iter().enumerate() {
                let expect = phi.values[g] * (t * lam * grid.weights[g]);
                err = err.max((grad.residual[f] - expect).norm());
            }
            assert!(err < 2.0 * t.powi(3), "linearization error {err} at t={t}");
        }
    }

    #[test]
    fn constant_critical_family_residual_vanishes() {
        // On the interval with V≡1, p=4, u ≡ c solves the stationary equation
        // with λ = 1 − c²; the discrete residual vanishes identically.
        let (sys, grid, _pot) = interval(2.0, 64, 1.0);
        for &c in &[0.3, 0.8] {
            let u = GraphFunction::from_fn(&grid, |_, _| C64::new(c, 0.0));
            let params = EnergyParams::new(4.0, 1.0, vec![0], None).unwrap();
            let grad = gradient(&sys, &u, &params).unwrap();
            let lambda = 1.0 - c * c;
            let uf = grid.to_free(&u);
            let mut worst: f64 = 0.0;
            for (f, &g) in grid.global_of_free.iter().enumerate() {
                let res = grad.residual[f] - uf[f] * (lambda * grid.weights[g]);
                worst = worst.max(res.norm());
            }
            assert!(worst < 1e-14, "constant family residual {worst}");
            // Two-formula multiplier agreement is exact here.
            let rep = energy(&sys, &u, &params).unwrap();
            assert_relative_eq!(rep.multiplier_estimate, lambda, epsilon = 1e-12);
        }
    }

    #[test]
    fn diamagnetic_form_bound_on_modulus() {
        use rand::{Rng, SeedableRng};
        // Form norm of the nodal modulus (A = 0) never exceeds the magnetic
        // form norm: exact element-wise inequality of the scheme.
        let g = parse_graph("v0 -- v0 : 2\nv0 -- v1 : 1\nv1 --> inf").unwrap();
        let grid = build_grid(&g, 0.07, Some(4.0)).unwrap();
        let pot = PotentialPair::from_fns(&grid, |e, x| (x * 3.0 + e as f64).sin() * 2.0, |_, _| 1.0).unwrap();
        let pot0 = PotentialPair::constants(&grid, 0.0, 1.0).unwrap();
        let gg = parse_graph("v0 -- v0 : 2\nv0 -- v1 : 1\nv1 --> inf").unwrap();
        let sys_a = assemble(&gg, &grid, &pot).unwrap();
        let sys_0 = assemble(&gg, &grid, &pot0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let uf: Vec<C64> = (0..grid.n_free())
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let u = grid.from_free(&uf);
            let modf: Vec<C64> = uf.iter().map(|v| C64::new(v.norm(), 0.0)).collect();
            let qa = {
                let su = sys_a.s.matvec(&uf);
                uf.iter().zip(&su).map(|(a, b)| (a.conj() * b).re).sum::<f64>()
            };
            let q0 = {
                let su = sys_0.s.matvec(&modf);
                modf.iter().zip(&su).map(|(a, b)| (a.conj() * b).re).sum::<f64>()
            };
            assert!(
                q0 <= qa * (1.0 + 1e-12),
                "diamagnetic form bound violated: {q0} > {qa}"
            );
            let _ = u;
        }
    }

    #[test]
    fn gns_constants_interval_and_fresh_probes() {
        use rand::{Rng, SeedableRng};
        let (sys, grid, pot) = interval(1.0, 64, 1.0);
        let est = estimate_gns_constants(&sys, &pot, 4.0, 120, 11).unwrap();
        // u ≡ 1 has ratio exactly 1, so C₄ ≥ 1 (with the 1.05 headroom).
        assert!(est.c_p >= 1.0);
        assert!(!est.noncompact);
        assert!(est.probes >= 120);
        assert!(estimate_gns_constants(&sys, &pot, 4.0, 99, 0).is_err());
        // Fresh random probes respect both inequalities.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let uf: Vec<C64> = (0..grid.n_free())
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let u = grid.from_free(&uf);
            let z = gns_z(&sys, &pot, &uf, false);
            let m2 = grid.mass(&u).sqrt();
            let lp: f64 = grid
                .weights
                .iter()
                .zip(&u.values)
                .map(|(w, v)| w * v.norm().powf(4.0))
                .sum();
            assert!(lp <= est.c_p * z.powf(1.0) * m2.powf(3.0) * (1.0 + 1e-12));
            assert!(u.sup_norm() <= est.c_inf * z.sqrt() * m2.sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gns_constant_stable_under_refinement() {
        let mut vals = Vec::new();
        for n in [64usize, 128] {
            let (sys, _grid, pot) = interval(1.0, n, 1.0);
            let est = estimate_gns_constants(&sys, &pot, 4.0, 150, 5).unwrap();
            vals.push(est.c_p);
        }
        let rel = (vals[0] - vals[1]).abs() / vals[1];
        assert!(rel < 0.02, "C₄ moved {rel} under h-halving");
    }

    #[test]
    fn gns_noncompact_uses_covariant_seminorm() {
        let g = parse_graph("v0 -- v1 : 1\nv0 --> inf\nv1 --> inf").unwrap();
        let grid = build_grid(&g, 0.05, Some(6.0)).unwrap();
        let pot = PotentialPair::constants(&grid, 0.0, 1.0).unwrap();
        let sys = assemble(&g, &grid, &pot).unwrap();
        let est = estimate_gns_constants(&sys, &pot, 4.0, 110, 2).unwrap();
        assert!(est.noncompact);
        assert!(est.c_p > 0.0 && est.c_inf > 0.0);
    }

    #[test]
    fn threshold_closed_forms() {
        // p=4, C₄=1, λ₁=1 → μ_c = 1 for any c.
        let t = compute_thresholds(4.0, 1.0, 1.0, &[1.0, 2.0, 5.0], f64::INFINITY, true).unwrap();
        assert_relative_eq!(t.mu_cp(0.5).unwrap(), 1.0);
        assert_relative_eq!(t.mu_cp(7.0).unwrap(), 1.0);
        // p=6 → μ_c = C₆^{−1/2}, independent of c.
        let t6 = compute_thresholds(6.0, 2.0, 1.0, &[1.0], f64::INFINITY, true).unwrap();
        assert_relative_eq!(t6.mu_cp(0.1).unwrap(), 2.0f64.powf(-0.5));
        assert_relative_eq!(t6.mu_cp(9.0).unwrap(), 2.0f64.powf(-0.5));
        // p>6 branch depends on c.
        let t8 = compute_thresholds(8.0, 1.5, 1.0, &[1.0], f64::INFINITY, true).unwrap();
        let a = t8.mu_cp(1.0).unwrap();
        let b = t8.mu_cp(2.0).unwrap();
        assert!(a != b && a > 0.0 && b > 0.0);
        assert_relative_eq!(
            a,
            1.5f64.powf(2.0 / -6.0) * (16.0 / 6.0f64).powf(-2.0 / 12.0),
            max_relative = 1e-12
        );
        // δ_k: infinite surrogate → 1; finite surrogate → half gap.
        assert_eq!(t.delta, vec![1.0, 1.0, 1.0]);
        let tf = compute_thresholds(4.0, 1.0, 1.0, &[1.0, 2.0], 9.0, false).unwrap();
        assert_eq!(tf.delta, vec![4.0, 3.5]);
        // μ_c decreasing in C_p.
        let hi = compute_thresholds(4.0, 3.0, 1.0, &[1.0], f64::INFINITY, true).unwrap();
        assert!(hi.mu_cp(1.0).unwrap() < t.mu_cp(1.0).unwrap());
        // Level-separation bound: closed form, monotone minima, level 1 free.
        assert_eq!(t.mu_tilde[0], f64::INFINITY);
        let closed = |lp: f64, l: f64| (4.0 * (l - lp) / (2.0 * l.powf(0.5))).powf(1.0);
        assert_relative_eq!(t.mu_tilde[1], closed(1.0, 2.0), max_relative = 1e-9);
        assert_relative_eq!(
            t.mu_tilde[2],
            closed(1.0, 2.0).min(closed(2.0, 5.0)),
            max_relative = 1e-9
        );
        // Tail-compactness bound formula spot check (p=4, C_∞=1, δ=1):
        // μ** = (2/(4λ))^{1/2}·(1/9).
        assert_relative_eq!(
            t.mu_double_star[0],
            (2.0f64 / 4.0).sqrt() / 9.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn threshold_regime_and_domain_errors() {
        let t = compute_thresholds(4.0, 1.0, 1.0, &[1.0, 2.0], f64::INFINITY, true).unwrap();
        assert!(t.mu_star(-1.0).is_ok());
        assert!(matches!(t.mu_star(0.5), Err(EnergyError::Regime(_))));
        let t6 = compute_thresholds(6.0, 1.0, 1.0, &[1.0], f64::INFINITY, true).unwrap();
        assert!(matches!(t6.mu_star(-1.0), Err(EnergyError::Regime(_))));
        assert!(t.mu_cp(0.0).is_err());
        assert!(compute_thresholds(2.0, 1.0, 1.0, &[1.0], f64::INFINITY, true).is_err());
        assert!(compute_thresholds(4.0, 1.0, 1.0, &[], f64::INFINITY, true).is_err());
        assert!(compute_thresholds(4.0, 1.0, 1.0, &[1.0, 1.0], f64::INFINITY, true).is_err());
        assert!(compute_thresholds(4.0, 1.0, 1.0, &[1.0, 3.0], 2.5, false).is_err());
        assert!(t.multiplicity_threshold(0).is_err());
        assert!(t.multiplicity_threshold(3).is_err());
        let m2 = t.multiplicity_threshold(2).unwrap();
        assert!(m2 > 0.0 && m2.is_finite());
        assert!(t.groundstate_threshold().unwrap() > 0.0);
    }

    #[test]
    fn mu_star_scaling_in_lambda() {
        // μ*(λ) ∝ |λ|^{(6−p)/(2p−4)}: for p=4 the exponent is 1/2.
        let t = compute_thresholds(4.0, 2.0, 1.0, &[1.0], f64::INFINITY, true).unwrap();
        let a = t.mu_star(-1.0).unwrap();
        let b = t.mu_star(-4.0).unwrap();
        assert_relative_eq!(b / a, 2.0, max_relative = 1e-12);
        assert_relative_eq!(
            a,
            2.0f64.powf(0.5) * 2.0f64.sqrt() * 2.0f64.powf(-1.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn perturbed_norm_equivalence_sampled() {
        use rand::{Rng, SeedableRng};
        // q=2 perturbation V_q = cos(3x) on the interval; shift ν from the
        // Young constant certifies the two-sided norm equivalence.
        let (sys, grid, pot) = interval(1.0, 80, 1.0);
        let est = estimate_gns_constants(&sys, &pot, 4.0, 150, 9).unwrap();
        let q = 2.0;
        let ch = c_half(q, est.c_inf, Some(est.c_p)).unwrap();
        let mut vq = vec![0.0; grid.n_dofs];
        let eg = &grid.edges[0];
        for j in 0..eg.n_nodes {
            vq[eg.node_dof(j)] = (3.0 * eg.node_x(j)).cos();
        }
        let vq_norm = grid
            .weights
            .iter()
            .zip(&vq)
            .map(|(w, v)| w * v.abs().powf(q))
            .sum::<f64>()
            .powf(1.0 / q);
        let nu = perturbed_shift(q, ch, vq_norm);
        assert!(nu >= 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let uf: Vec<C64> = (0..grid.n_free())
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let u = grid.from_free(&uf);
            let su = sys.s.matvec(&uf);
            let form: f64 = uf.iter().zip(&su).map(|(a, b)| (a.conj() * b).re).sum();
            let mass = grid.mass(&u);
            let vq_term: f64 = grid
                .weights
                .iter()
                .zip(vq.iter().zip(&u.values))
                .map(|(w, (v, uu))| w * v * uu.norm_sqr())
                .sum();
            let perturbed = form + vq_term + nu * mass;
            assert!(
                0.5 * form + mass <= perturbed * (1.0 + 1e-12),
                "lower perturbed-norm bound failed"
            );
            assert!(
                perturbed <= 1.5 * form + (2.0 * nu - 1.0) * mass + 1e-12,
                "upper perturbed-norm bound failed"
            );
        }
        // q=1 branch uses C_∞ only.
        let ch1 = c_half(1.0, est.c_inf, None).unwrap();
        assert_relative_eq!(ch1, est.c_inf.powi(4) / 2.0);
        assert!(c_half(0.5, 1.0, None).is_err());
        assert!(c_half(2.0, 1.0, None).is_err());
    }

    #[test]
    fn energy_params_validation() {
        assert!(EnergyParams::new(2.0, 1.0, vec![], None).is_err());
        assert!(EnergyParams::new(4.0, 0.0, vec![], None).is_err());
        assert!(EnergyParams::new(4.0, 1.0, vec![], Some(1.0)).is_err());
        assert!(EnergyParams::new(4.0, 1.0, vec![], Some(2.0)).is_ok());
    }
}
