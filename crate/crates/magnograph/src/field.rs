//! Discretization layer: per-edge uniform grids, global DOF layout,
//! nodal/midpoint fields, and trapezoid quadrature.
//!
//! Global DOF layout (dense, contiguous):
//!
//! ```text
//! [ real vertices 0..nv ) ++ [ synthetic far vertices, one per half-line )
//!                         ++ [ interior nodes, contiguous per edge ]
//! ```
//!
//! Half-lines are truncated at `l_trunc` and their far endpoint is pinned to
//! zero (Dirichlet) by DOF elimination: pinned DOFs keep a slot in global
//! vectors but are excluded from the free index set that linear algebra
//! operates on.

use num_complex::Complex;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{EdgeKind, MetricGraph};

pub type C64 = Complex<f64>;

#[derive(Debug, Error)]
pub enum FieldError {
    /// Electric potential below the unit floor required for coercivity.
    #[error("potential domain error: {0}")]
    PotentialDomain(String),
    /// Sample arrays whose shapes do not match the grid.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Bad discretization request (non-positive spacing, …).
    #[error("grid error: {0}")]
    Grid(String),
}

/// Uniform grid along one edge. Node `j` sits at arclength `j·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrid {
    pub n_nodes: usize,
    pub h: f64,
    /// Geometric length (truncated length for half-lines).
    pub length: f64,
    pub tail_dof: usize,
    pub head_dof: usize,
    /// Global index of interior node `j = 1`.
    pub interior_start: usize,
    pub is_halfline: bool,
}

impl EdgeGrid {
    /// Global DOF of node `j ∈ 0..n_nodes`.
    pub fn node_dof(&self, j: usize) -> usize {
        debug_assert!(j < self.n_nodes);
        if j == 0 {
            self.tail_dof
        } else if j == self.n_nodes - 1 {
            self.head_dof
        } else {
            self.interior_start + j - 1
        }
    }

    pub fn n_elements(&self) -> usize {
        self.n_nodes - 1
    }

    /// Arclength coordinate of node `j`.
    pub fn node_x(&self, j: usize) -> f64 {
        j as f64 * self.h
    }

    /// Arclength coordinate of the midpoint of element `j`.
    pub fn mid_x(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.h
    }
}

/// Discretization of a whole metric graph.
#[derive(Debug, Clone)]
pub struct GraphGrid {
    pub edges: Vec<EdgeGrid>,
    pub n_vertices: usize,
    pub n_dofs: usize,
    pub target_h: f64,
    /// Truncation length applied to half-lines (None on compact graphs).
    pub l_trunc: Option<f64>,
    /// Pinned (eliminated) global DOFs: the synthetic far vertices.
    pub pinned: Vec<usize>,
    pub free_of_global: Vec<Option<usize>>,
    pub global_of_free: Vec<usize>,
    /// Trapezoid weight of each global DOF over the whole graph.
    pub weights: Vec<f64>,
    /// Stable identifier of (graph, target_h, l_trunc) for output stamping.
    pub hash: String,
}

/// Default half-line truncation: generous multiple of the core diameter
/// scale, floored at 50 so decay has room even on small cores.
pub fn default_l_trunc(graph: &MetricGraph) -> f64 {
    let longest = graph.longest_bounded_edge().unwrap_or(1.0);
    (12.0 * longest).max(50.0)
}

/// Builds per-edge uniform grids with spacing ≤ `target_h`.
///
/// Bounded edges get `n = ceil(ℓ/target_h) + 1` nodes (loops at least 3 so
/// the single vertex is not doubly self-coupled through one element).
/// Half-lines are truncated at `l_trunc` (default [`default_l_trunc`]).
pub fn build_grid(
    graph: &MetricGraph,
    target_h: f64,
    l_trunc: Option<f64>,
) -> Result<GraphGrid, FieldError> {
    if !(target_h > 0.0) || !target_h.is_finite() {
        return Err(FieldError::Grid(format!(
            "target spacing must be positive, got {target_h}"
        )));
    }
    let has_half = !graph.is_compact();
    let l_trunc = if has_half {
        let l = l_trunc.unwrap_or_else(|| default_l_trunc(graph));
        if !(l > 0.0) || !l.is_finite() {
            return Err(FieldError::Grid(format!(
                "truncation length must be positive, got {l}"
            )));
        }
        Some(l)
    } else {
        None
    };

    let nv = graph.vertices.len();
    let n_half = graph.edges.iter().filter(|e| !e.is_bounded()).count();
    let mut edges = Vec::with_capacity(graph.edges.len());
    let mut next_far = nv;
    let mut interior_cursor = nv + n_half;

    for e in &graph.edges {
        let (length, head_dof, is_halfline) = match e.kind {
            EdgeKind::Bounded(l) => (l, e.head.expect("validated"), false),
            EdgeKind::HalfLine => {
                let d = next_far;
                next_far += 1;
                (l_trunc.expect("half-line present"), d, true)
            }
        };
        let mut n_nodes = (length / target_h).ceil() as usize + 1;
        if e.is_loop() {
            n_nodes = n_nodes.max(3);
        }
        n_nodes = n_nodes.max(2);
        let h = length / (n_nodes - 1) as f64;
        let grid = EdgeGrid {
            n_nodes,
            h,
            length,
            tail_dof: e.tail,
            head_dof,
            interior_start: interior_cursor,
            is_halfline,
        };
        interior_cursor += n_nodes - 2;
        edges.push(grid);
    }

    let n_dofs = interior_cursor;
    let pinned: Vec<usize> = (nv..nv + n_half).collect();
    let mut free_of_global = vec![None; n_dofs];
    let mut global_of_free = Vec::with_capacity(n_dofs - n_half);
    for g in 0..n_dofs {
        if !(nv..nv + n_half).contains(&g) {
            free_of_global[g] = Some(global_of_free.len());
            global_of_free.push(g);
        }
    }

    let mut weights = vec![0.0; n_dofs];
    for eg in &edges {
        for j in 0..eg.n_elements() {
            weights[eg.node_dof(j)] += eg.h / 2.0;
            weights[eg.node_dof(j + 1)] += eg.h / 2.0;
        }
    }

    let mut hasher = Sha256::new();
    hasher.update(crate::graph::serialize_graph(graph).as_bytes());
    hasher.update(format!("target_h={target_h:.17e}\n").as_bytes());
    if let Some(l) = l_trunc {
        hasher.update(format!("l_trunc={l:.17e}\n").as_bytes());
    }
    for eg in &edges {
        hasher.update(format!("n={}\n", eg.n_nodes).as_bytes());
    }
    let hash = hex16(&hasher.finalize());

    Ok(GraphGrid {
        edges,
        n_vertices: nv,
        n_dofs,
        target_h,
        l_trunc,
        pinned,
        free_of_global,
        global_of_free,
        weights,
        hash,
    })
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl GraphGrid {
    pub fn n_free(&self) -> usize {
        self.global_of_free.len()
    }

    pub fn is_pinned(&self, global: usize) -> bool {
        self.free_of_global[global].is_none()
    }

    /// Quadrature weights restricted to the given edges; other DOFs get 0,
    /// shared vertex DOFs only their contributions from the listed edges.
    pub fn region_weights(&self, region_edges: &[usize]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_dofs];
        for &ei in region_edges {
            let eg = &self.edges[ei];
            for j in 0..eg.n_elements() {
                w[eg.node_dof(j)] += eg.h / 2.0;
                w[eg.node_dof(j + 1)] += eg.h / 2.0;
            }
        }
        w
    }

    /// ∑ w_j |u_j|² — squared L² norm.
    pub fn mass(&self, u: &GraphFunction) -> f64 {
        self.weights
            .iter()
            .zip(&u.values)
            .map(|(w, v)| w * v.norm_sqr())
            .sum()
    }

    /// Real L² inner product Re ∑ w_j conj(u_j) v_j.
    pub fn inner_l2(&self, u: &GraphFunction, v: &GraphFunction) -> f64 {
        self.inner_l2_complex(u, v).re
    }

    /// Sesquilinear L² inner product ∑ w_j conj(u_j) v_j.
    pub fn inner_l2_complex(&self, u: &GraphFunction, v: &GraphFunction) -> C64 {
        self.weights
            .iter()
            .zip(u.values.iter().zip(&v.values))
            .map(|(w, (a, b))| a.conj() * b * *w)
            .sum()
    }

    /// (∑ w_j |u_j|^p)^{1/p}.
    pub fn lp_norm(&self, u: &GraphFunction, p: f64) -> f64 {
        weighted_lp_pow(&self.weights, u, p).powf(1.0 / p)
    }

    /// Magnetic form value ‖D_A u‖² + ∑ w_j V_j |u_j|² (the squared
    /// field-energy norm of the operator; V ≥ 1 makes it ≥ ‖u‖²).
    pub fn norm_ha_sq(&self, u: &GraphFunction, pot: &PotentialPair) -> f64 {
        let mut acc = 0.0;
        for (ei, eg) in self.edges.iter().enumerate() {
            let h = eg.h;
            for j in 0..eg.n_elements() {
                let d = covariant_element(
                    u.values[eg.node_dof(j)],
                    u.values[eg.node_dof(j + 1)],
                    h,
                    pot.a_mid[ei][j],
                );
                acc += h * d.norm_sqr();
            }
        }
        acc += self
            .weights
            .iter()
            .zip(pot.v_node.iter().zip(&u.values))
            .map(|(w, (v, uv))| w * v * uv.norm_sqr())
            .sum::<f64>();
        acc
    }

    /// Midpoint values of the covariant derivative on every edge.
    pub fn covariant_derivative(
        &self,
        u: &GraphFunction,
        pot: &PotentialPair,
    ) -> Vec<Vec<C64>> {
        self.edges
            .iter()
            .enumerate()
            .map(|(ei, eg)| {
                (0..eg.n_elements())
                    .map(|j| {
                        covariant_element(
                            u.values[eg.node_dof(j)],
                            u.values[eg.node_dof(j + 1)],
                            eg.h,
                            pot.a_mid[ei][j],
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Extracts the free-DOF subvector.
    pub fn to_free(&self, u: &GraphFunction) -> Vec<C64> {
        self.global_of_free.iter().map(|&g| u.values[g]).collect()
    }

    /// Expands a free-DOF vector to a global function (pinned DOFs zero).
    pub fn from_free(&self, free: &[C64]) -> GraphFunction {
        let mut values = vec![C64::new(0.0, 0.0); self.n_dofs];
        for (f, &g) in self.global_of_free.iter().enumerate().map(|(i, g)| (i, g)) {
            values[g] = free[f];
        }
        GraphFunction { values }
    }
}

/// Midpoint covariant derivative on one element:
/// `(u₁ − u₀)/(i·h) − a·(u₀ + u₁)/2`.
#[inline]
pub fn covariant_element(u0: C64, u1: C64, h: f64, a: f64) -> C64 {
    let diff = (u1 - u0) * C64::new(0.0, -1.0 / h); // division by i·h
    let avg = (u0 + u1) * 0.5;
    diff - avg * a
}

/// ∑ w_j |u_j|^p with arbitrary nonnegative weights.
pub fn weighted_lp_pow(w: &[f64], u: &GraphFunction, p: f64) -> f64 {
    w.iter()
        .zip(&u.values)
        .map(|(w, v)| {
            if *w == 0.0 {
                0.0
            } else {
                w * v.norm().powf(p)
            }
        })
        .sum()
}

/// A complex nodal field over all global DOFs (pinned entries kept at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFunction {
    pub values: Vec<C64>,
}

impl GraphFunction {
    pub fn zeros(grid: &GraphGrid) -> Self {
        GraphFunction {
            values: vec![C64::new(0.0, 0.0); grid.n_dofs],
        }
    }

    /// Samples `f(edge_index, x)` at every node. Vertex DOFs are written once
    /// per incident edge; the caller must supply edgewise-consistent values
    /// (the last incident edge wins otherwise). Pinned DOFs are forced to 0.
    pub fn from_fn(grid: &GraphGrid, f: impl Fn(usize, f64) -> C64) -> Self {
        let mut values = vec![C64::new(0.0, 0.0); grid.n_dofs];
        for (ei, eg) in grid.edges.iter().enumerate() {
            for j in 0..eg.n_nodes {
                values[eg.node_dof(j)] = f(ei, eg.node_x(j));
            }
        }
        for &p in &grid.pinned {
            values[p] = C64::new(0.0, 0.0);
        }
        GraphFunction { values }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: C64) -> Self {
        GraphFunction {
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

/// Magnetic potential (element midpoints, oriented along each edge) together
/// with an electric potential (nodes). `V ≥ 1` everywhere is enforced so the
/// quadratic form dominates the L² norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    /// `a_mid[edge][element]`, tangential component along the orientation.
    pub a_mid: Vec<Vec<f64>>,
    /// `v_node[global_dof]`.
    pub v_node: Vec<f64>,
}

impl PotentialPair {
    pub fn constants(grid: &GraphGrid, a: f64, v: f64) -> Result<Self, FieldError> {
        Self::from_fns(grid, |_, _| a, |_, _| v)
    }

    /// Samples `fa(edge, x_mid)` at midpoints and `fv(edge, x_node)` at
    /// nodes. As in [`GraphFunction::from_fn`], vertex values must be
    /// consistent across incident edges.
    pub fn from_fns(
        grid: &GraphGrid,
        fa: impl Fn(usize, f64) -> f64,
        fv: impl Fn(usize, f64) -> f64,
    ) -> Result<Self, FieldError> {
        let mut a_mid = Vec::with_capacity(grid.edges.len());
        let mut v_node = vec![1.0; grid.n_dofs];
        for (ei, eg) in grid.edges.iter().enumerate() {
            a_mid.push((0..eg.n_elements()).map(|j| fa(ei, eg.mid_x(j))).collect());
            for j in 0..eg.n_nodes {
                v_node[eg.node_dof(j)] = fv(ei, eg.node_x(j));
            }
        }
        let pair = PotentialPair { a_mid, v_node };
        pair.validate(grid)?;
        Ok(pair)
    }

    /// Adopts explicit samples, validating shapes and the `V ≥ 1` floor.
    pub fn from_samples(
        grid: &GraphGrid,
        a_mid: Vec<Vec<f64>>,
        v_node: Vec<f64>,
    ) -> Result<Self, FieldError> {
        if a_mid.len() != grid.edges.len() {
            return Err(FieldError::Shape(format!(
                "expected {} edge arrays for the magnetic potential, got {}",
                grid.edges.len(),
                a_mid.len()
            )));
        }
        for (ei, (arr, eg)) in a_mid.iter().zip(&grid.edges).enumerate() {
            if arr.len() != eg.n_elements() {
                return Err(FieldError::Shape(format!(
                    "edge {ei}: expected {} midpoint samples, got {}",
                    eg.n_elements(),
                    arr.len()
                )));
            }
        }
        if v_node.len() != grid.n_dofs {
            return Err(FieldError::Shape(format!(
                "expected {} nodal samples for the electric potential, got {}",
                grid.n_dofs,
                v_node.len()
            )));
        }
        let pair = PotentialPair { a_mid, v_node };
        pair.validate(grid)?;
        Ok(pair)
    }

    fn validate(&self, _grid: &GraphGrid) -> Result<(), FieldError> {
        for (i, v) in self.v_node.iter().enumerate() {
            if !v.is_finite() || *v < 1.0 - 1e-12 {
                return Err(FieldError::PotentialDomain(format!(
                    "electric potential must satisfy V ≥ 1 everywhere; node {i} has V = {v}"
                )));
            }
        }
        for (ei, arr) in self.a_mid.iter().enumerate() {
            for a in arr {
                if !a.is_finite() {
                    return Err(FieldError::PotentialDomain(format!(
                        "magnetic potential on edge {ei} is not finite"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Flips the orientation of a bounded edge, returning a consistent
/// (graph, grid, potential, function) quadruple. The magnetic potential on
/// the edge is negated and reversed; interior samples reverse in place;
/// vertex DOFs keep their values. Physically nothing changes, which makes
/// this the natural invariance test for all quadrature and assembly code.
pub fn reorient_edge(
    graph: &MetricGraph,
    grid: &GraphGrid,
    pot: &PotentialPair,
    u: &GraphFunction,
    edge: usize,
) -> Result<(MetricGraph, GraphGrid, PotentialPair, GraphFunction), FieldError> {
    let e = &graph.edges[edge];
    let head = match (e.kind, e.head) {
        (EdgeKind::Bounded(_), Some(h)) => h,
        _ => {
            return Err(FieldError::Grid(format!(
                "cannot reorient half-line `{}`",
                e.id
            )))
        }
    };
    let mut g2 = graph.clone();
    g2.edges[edge].tail = head;
    g2.edges[edge].head = Some(e.tail);
    let grid2 = build_grid(&g2, grid.target_h, grid.l_trunc)?;
    debug_assert_eq!(grid2.n_dofs, grid.n_dofs);

    let eg = &grid.edges[edge];
    let n = eg.n_nodes;
    let mut values = u.values.clone();
    let mut v_node = pot.v_node.clone();
    for k in 0..n.saturating_sub(2) {
        let newd = grid2.edges[edge].interior_start + k;
        let oldd = eg.interior_start + (n - 3 - k);
        values[newd] = u.values[oldd];
        v_node[newd] = pot.v_node[oldd];
    }
    let mut a_mid = pot.a_mid.clone();
    a_mid[edge] = (0..eg.n_elements())
        .map(|k| -pot.a_mid[edge][eg.n_elements() - 1 - k])
        .collect();

    let pot2 = PotentialPair::from_samples(&grid2, a_mid, v_node)?;
    Ok((g2, grid2, pot2, GraphFunction { values }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn interval_grid_layout_and_weights() {
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 0.1, None).unwrap();
        let eg = &grid.edges[0];
        assert_eq!(eg.n_nodes, 11);
        assert_relative_eq!(eg.h, 0.1);
        assert_eq!(grid.n_dofs, 11);
        assert_eq!(grid.n_free(), 11);
        assert_eq!(eg.node_dof(0), 0);
        assert_eq!(eg.node_dof(10), 1);
        assert_eq!(eg.node_dof(1), 2);
        // Trapezoid weights: h/2 at endpoints, h inside; total = length.
        assert_relative_eq!(grid.weights[0], 0.05);
        assert_relative_eq!(grid.weights[2], 0.1);
        assert_relative_eq!(grid.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn halfline_truncation_and_pinning() {
        let g = parse_graph("v0 -- v1 : 2\nv1 --> inf").unwrap();
        // Default truncation: max(12 * 2, 50) = 50.
        let grid = build_grid(&g, 0.5, None).unwrap();
        assert_eq!(grid.l_trunc, Some(50.0));
        let eg = &grid.edges[1];
        assert!(eg.is_halfline);
        assert_relative_eq!(eg.length, 50.0);
        assert_eq!(grid.pinned, vec![2]);
        assert!(grid.is_pinned(2));
        assert_eq!(grid.n_free(), grid.n_dofs - 1);
        // Explicit override.
        let grid = build_grid(&g, 0.5, Some(10.0)).unwrap();
        assert_eq!(grid.l_trunc, Some(10.0));
        // Free/global maps are mutually inverse.
        for (f, &gd) in grid.global_of_free.iter().enumerate() {
            assert_eq!(grid.free_of_global[gd], Some(f));
        }
    }

    #[test]
    fn loop_minimum_nodes() {
        let g = parse_graph("v0 -- v0 : 1").unwrap();
        let grid = build_grid(&g, 10.0, None).unwrap();
        assert!(grid.edges[0].n_nodes >= 3);
        assert_eq!(grid.edges[0].tail_dof, grid.edges[0].head_dof);
    }

    #[test]
    fn trapezoid_x_squared_exact_correction() {
        // ∫₀¹ x² dx = 1/3; trapezoid error for a quadratic is exactly h²/6.
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        for n_el in [4usize, 10, 37] {
            let h = 1.0 / n_el as f64;
            let grid = build_grid(&g, h + 1e-12, None).unwrap();
            assert_eq!(grid.edges[0].n_elements(), n_el);
            let u = GraphFunction::from_fn(&grid, |_, x| c(x, 0.0));
            let expected = 1.0 / 3.0 + h * h / 6.0;
            assert_relative_eq!(grid.mass(&u), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn constant_on_loop_form_value() {
        // u ≡ 1, A ≡ a, V ≡ 1 on a loop of length 2π:
        // D_A u = −a so the form is ℓ·(a² + 1).
        let g = parse_graph("v0 -- v0 : 6.283185307179586").unwrap();
        let grid = build_grid(&g, 0.01, None).unwrap();
        let a = 0.7;
        let pot = PotentialPair::constants(&grid, a, 1.0).unwrap();
        let u = GraphFunction::from_fn(&grid, |_, _| c(1.0, 0.0));
        let expected = 2.0 * PI * (a * a + 1.0);
        assert_relative_eq!(grid.norm_ha_sq(&u, &pot), expected, epsilon = 1e-10);
        // Midpoint covariant derivative is exactly −a on every element.
        let d = grid.covariant_derivative(&u, &pot);
        for v in &d[0] {
            assert_relative_eq!(v.re, -a, epsilon = 1e-15);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn plane_wave_covariant_derivative_small() {
        // u = exp(i a x) with A ≡ a: the continuum derivative vanishes; the
        // discrete one is O(h²) per element.
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 1e-3, None).unwrap();
        let a = 1.3;
        let pot = PotentialPair::constants(&grid, a, 1.0).unwrap();
        let u = GraphFunction::from_fn(&grid, |_, x| C64::new(0.0, a * x).exp());
        let d = grid.covariant_derivative(&u, &pot);
        let max = d[0].iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(max < 1e-6 * a, "covariant derivative too large: {max}");
    }

    #[test]
    fn potential_floor_enforced() {
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 0.25, None).unwrap();
        assert!(matches!(
            PotentialPair::constants(&grid, 0.0, 0.5),
            Err(FieldError::PotentialDomain(_))
        ));
        assert!(PotentialPair::constants(&grid, 0.0, 1.0).is_ok());
        // Shape validation.
        assert!(matches!(
            PotentialPair::from_samples(&grid, vec![vec![0.0; 3]], vec![1.0; grid.n_dofs]),
            Err(FieldError::Shape(_))
        ));
        assert!(matches!(
            PotentialPair::from_samples(
                &grid,
                vec![vec![0.0; grid.edges[0].n_elements()]],
                vec![1.0; 3]
            ),
            Err(FieldError::Shape(_))
        ));
    }

    #[test]
    fn grid_hash_distinguishes_resolutions() {
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let g1 = build_grid(&g, 0.1, None).unwrap();
        let g2 = build_grid(&g, 0.05, None).unwrap();
        let g1b = build_grid(&g, 0.1, None).unwrap();
        assert_ne!(g1.hash, g2.hash);
        assert_eq!(g1.hash, g1b.hash);
    }

    #[test]
    fn reorientation_preserves_quadrature() {
        let g = parse_graph("v0 -- v1 : 1\nv1 -- v2 : 0.5\nv0 -- v2 : 0.75").unwrap();
        let grid = build_grid(&g, 0.05, None).unwrap();
        let pot = PotentialPair::from_fns(
            &grid,
            |e, x| (e as f64 + 1.0) * (x * 2.0).sin(),
            |e, x| 1.0 + (e as f64) * 0.3 + x * x,
        )
        .unwrap();
        let u = GraphFunction::from_fn(&grid, |e, x| {
            c((x + e as f64).cos(), (1.3 * x - e as f64).sin())
        });
        // Vertex consistency: rebuild vertex values so all edges agree.
        // from_fn leaves the last writer; that's consistent by construction
        // only for matching endpoints, so reconcile via explicit overwrite.
        let (g2, grid2, pot2, u2) = reorient_edge(&g, &grid, &pot, &u, 1).unwrap();
        assert_eq!(g2.edges[1].tail, g.edges[1].head.unwrap());
        assert_relative_eq!(grid2.mass(&u2), grid.mass(&u), epsilon = 1e-14);
        assert_relative_eq!(
            grid2.lp_norm(&u2, 4.0),
            grid.lp_norm(&u, 4.0),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            grid2.norm_ha_sq(&u2, &pot2),
            grid.norm_ha_sq(&u, &pot),
            epsilon = 1e-12
        );
        assert_eq!(u2.sup_norm(), u.sup_norm());
    }

    #[test]
    fn region_weights_mask() {
        let g = parse_graph("v0 -- v1 : 1\nv1 --> inf\ncore subgraph e0").unwrap();
        let grid = build_grid(&g, 0.25, Some(2.0)).unwrap();
        let w = grid.region_weights(&g.region_edges());
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // Half-line interior DOFs carry no region weight.
        let eg = &grid.edges[1];
        for j in 1..eg.n_nodes - 1 {
            assert_eq!(w[eg.node_dof(j)], 0.0);
        }
        // The shared vertex gets only the bounded-edge half-weight.
        assert_relative_eq!(w[1], grid.edges[0].h / 2.0);
    }

    proptest! {
        /// Element-level diamagnetic inequality: the modulus difference
        /// quotient never exceeds the covariant derivative magnitude.
        #[test]
        fn prop_element_diamagnetic(
            re0 in -3.0f64..3.0, im0 in -3.0f64..3.0,
            re1 in -3.0f64..3.0, im1 in -3.0f64..3.0,
            h in 0.01f64..1.0, a in -5.0f64..5.0,
        ) {
            let u0 = c(re0, im0);
            let u1 = c(re1, im1);
            let lhs = ((u1.norm() - u0.norm()) / h).abs();
            let rhs = covariant_element(u0, u1, h, a).norm();
            prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs));
        }

        /// Quadrature sums are invariant under reorienting any bounded edge.
        #[test]
        fn prop_reorientation_mass(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let g = parse_graph("v0 -- v1 : 1\nv0 -- v1 : 2").unwrap();
            let grid = build_grid(&g, 0.3, None).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<C64> = (0..grid.n_dofs)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let u = GraphFunction { values };
            let pot = PotentialPair::constants(&grid, 0.4, 1.5).unwrap();
            let (_, grid2, pot2, u2) = reorient_edge(&g, &grid, &pot, &u, 0).unwrap();
            prop_assert!((grid2.mass(&u2) - grid.mass(&u)).abs() < 1e-13);
            prop_assert!(
                (grid2.norm_ha_sq(&u2, &pot2) - grid.norm_ha_sq(&u, &pot)).abs() < 1e-11
            );
        }
    }
}
