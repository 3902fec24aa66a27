//! Metric-graph data model, validation, and text-format parsing.
//!
//! A metric graph is a finite combinatorial graph whose edges are either
//! bounded (identified with intervals `[0, ℓ_e]`, `ℓ_e > 0`) or half-lines
//! `[0, ∞)` attached at a single vertex. The compact core is the set of all
//! bounded edges. Loops (`tail == head`) and multi-edges are permitted.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! vertex <id> [x y]          # optional explicit vertex with position hint
//! <id_a> -- <id_b> : <len>   # bounded edge of the given length
//! <id> --> inf               # half-line attached at <id>
//! core subgraph <e0> <e1> …  # optional nonlinearity-region override
//! ```
//!
//! Edges receive ids `e0, e1, …` in declaration order; `core subgraph`
//! references those ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Errors raised by graph parsing and validation.
#[derive(Debug, Error)]
pub enum GraphError {
    /// Syntactic problem in the text format.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Structural problem: disconnected, zero-length edge, bad region, …
    #[error("invalid graph: {0}")]
    Validation(String),
    /// Lookup of a vertex id that does not exist.
    #[error("unknown vertex id `{0}`")]
    UnknownVertex(String),
}

/// A vertex; `position_hint` is display-only and never enters computations.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: String,
    pub position_hint: Option<(f64, f64)>,
}

/// Bounded edges carry a positive length; half-lines extend to infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeKind {
    Bounded(f64),
    HalfLine,
}

/// An oriented edge. The tail sits at coordinate 0. Half-lines have no head
/// vertex: the truncation vertex is created by the discretizer, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: String,
    /// Index into `MetricGraph::vertices`.
    pub tail: usize,
    /// Index into `MetricGraph::vertices`; `None` for half-lines.
    pub head: Option<usize>,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn is_bounded(&self) -> bool {
        matches!(self.kind, EdgeKind::Bounded(_))
    }

    /// Length of a bounded edge.
    pub fn length(&self) -> Option<f64> {
        match self.kind {
            EdgeKind::Bounded(l) => Some(l),
            EdgeKind::HalfLine => None,
        }
    }

    pub fn is_loop(&self) -> bool {
        self.head == Some(self.tail)
    }
}

/// Where the nonlinearity `|u|^{p−2}u` acts.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearityRegion {
    /// Whole graph; only meaningful (and only accepted) on compact graphs.
    WholeGraph,
    /// All bounded edges.
    CompactCore,
    /// An explicit nonempty set of bounded edges (sorted edge indices).
    Subgraph(Vec<usize>),
}

/// Which endpoint of an edge touches a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Start,
    End,
}

/// A validated, connected metric graph with finitely many edges.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub region: NonlinearityRegion,
}

impl MetricGraph {
    /// Builds and validates a graph. The default region is `WholeGraph` for
    /// compact graphs and `CompactCore` otherwise; pass `None` for that.
    pub fn new(
        vertices: Vec<Vertex>,
        edges: Vec<Edge>,
        region: Option<NonlinearityRegion>,
    ) -> Result<Self, GraphError> {
        let compact = edges.iter().all(Edge::is_bounded);
        let region = region.unwrap_or(if compact {
            NonlinearityRegion::WholeGraph
        } else {
            NonlinearityRegion::CompactCore
        });
        let g = MetricGraph {
            vertices,
            edges,
            region,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.edges.is_empty() {
            return Err(GraphError::Validation(
                "graph has no edges".to_string(),
            ));
        }
        let mut ids = BTreeMap::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if ids.insert(v.id.clone(), i).is_some() {
                return Err(GraphError::Validation(format!(
                    "duplicate vertex id `{}`",
                    v.id
                )));
            }
        }
        for e in &self.edges {
            if e.tail >= self.vertices.len() {
                return Err(GraphError::Validation(format!(
                    "edge `{}` references missing tail vertex",
                    e.id
                )));
            }
            if let Some(h) = e.head {
                if h >= self.vertices.len() {
                    return Err(GraphError::Validation(format!(
                        "edge `{}` references missing head vertex",
                        e.id
                    )));
                }
            }
            match e.kind {
                EdgeKind::Bounded(l) => {
                    if !(l > 0.0) || !l.is_finite() {
                        return Err(GraphError::Validation(format!(
                            "edge `{}` has non-positive length {}",
                            e.id, l
                        )));
                    }
                    if e.head.is_none() {
                        return Err(GraphError::Validation(format!(
                            "bounded edge `{}` lacks a head vertex",
                            e.id
                        )));
                    }
                }
                EdgeKind::HalfLine => {
                    if e.head.is_some() {
                        return Err(GraphError::Validation(format!(
                            "half-line `{}` must not carry a head vertex",
                            e.id
                        )));
                    }
                }
            }
        }
        // Every vertex incident to at least one edge.
        let mut touched = vec![false; self.vertices.len()];
        for e in &self.edges {
            touched[e.tail] = true;
            if let Some(h) = e.head {
                touched[h] = true;
            }
        }
        if let Some(i) = touched.iter().position(|t| !t) {
            return Err(GraphError::Validation(format!(
                "vertex `{}` is isolated",
                self.vertices[i].id
            )));
        }
        // Connectivity by traversal over the vertex-edge incidence.
        let mut seen = vec![false; self.vertices.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for e in &self.edges {
                for (a, b) in [(e.tail, e.head), (e.head.unwrap_or(e.tail), Some(e.tail))] {
                    if a == v {
                        if let Some(b) = b {
                            if !seen[b] {
                                seen[b] = true;
                                stack.push(b);
                            }
                        }
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GraphError::Validation("graph is disconnected".to_string()));
        }
        // Region checks.
        match &self.region {
            NonlinearityRegion::WholeGraph => {
                if !self.is_compact() {
                    return Err(GraphError::Validation(
                        "whole-graph nonlinearity region requires a compact graph; \
                         noncompact graphs localize to the compact core"
                            .to_string(),
                    ));
                }
            }
            NonlinearityRegion::CompactCore => {
                if self.compact_core().is_empty() {
                    return Err(GraphError::Validation(
                        "compact-core nonlinearity region is empty (no bounded edges)"
                            .to_string(),
                    ));
                }
            }
            NonlinearityRegion::Subgraph(set) => {
                if set.is_empty() {
                    return Err(GraphError::Validation(
                        "subgraph nonlinearity region is empty".to_string(),
                    ));
                }
                for &ei in set {
                    if ei >= self.edges.len() {
                        return Err(GraphError::Validation(format!(
                            "subgraph region references missing edge index {ei}"
                        )));
                    }
                    if !self.edges[ei].is_bounded() {
                        return Err(GraphError::Validation(format!(
                            "subgraph region edge `{}` is a half-line; only bounded edges allowed",
                            self.edges[ei].id
                        )));
                    }
                }
                let mut sorted = set.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if &sorted != set {
                    return Err(GraphError::Validation(
                        "subgraph region indices must be sorted and unique".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// True iff the graph contains no half-line.
    pub fn is_compact(&self) -> bool {
        self.edges.iter().all(Edge::is_bounded)
    }

    /// Indices of all bounded edges (the compact core).
    pub fn compact_core(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_bounded())
            .map(|(i, _)| i)
            .collect()
    }

    /// Edge indices over which the nonlinearity integrates.
    pub fn region_edges(&self) -> Vec<usize> {
        match &self.region {
            NonlinearityRegion::WholeGraph => (0..self.edges.len()).collect(),
            NonlinearityRegion::CompactCore => self.compact_core(),
            NonlinearityRegion::Subgraph(set) => set.clone(),
        }
    }

    pub fn vertex_index(&self, id: &str) -> Result<usize, GraphError> {
        self.vertices
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| GraphError::UnknownVertex(id.to_string()))
    }

    /// All edges touching the vertex, with which endpoint touches. Loops
    /// appear twice (once per endpoint); half-lines once, at `Start`.
    pub fn incident_edges(&self, vertex_id: &str) -> Result<Vec<(usize, Endpoint)>, GraphError> {
        let v = self.vertex_index(vertex_id)?;
        Ok(self.incident_edges_by_index(v))
    }

    pub fn incident_edges_by_index(&self, v: usize) -> Vec<(usize, Endpoint)> {
        let mut out = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.tail == v {
                out.push((i, Endpoint::Start));
            }
            if e.head == Some(v) {
                out.push((i, Endpoint::End));
            }
        }
        out
    }

    /// Longest bounded edge length, if any bounded edge exists.
    pub fn longest_bounded_edge(&self) -> Option<f64> {
        self.edges
            .iter()
            .filter_map(Edge::length)
            .fold(None, |acc, l| Some(acc.map_or(l, |a: f64| a.max(l))))
    }
}

/// Parses the text format. Vertices referenced by edge statements are
/// created implicitly in first-mention order.
pub fn parse_graph(text: &str) -> Result<MetricGraph, GraphError> {
    let mut vertices: Vec<Vertex> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut explicit: Vec<String> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut region: Option<NonlinearityRegion> = None;

    let intern = |vertices: &mut Vec<Vertex>,
                      index: &mut BTreeMap<String, usize>,
                      id: &str|
     -> usize {
        if let Some(&i) = index.get(id) {
            i
        } else {
            vertices.push(Vertex {
                id: id.to_string(),
                position_hint: None,
            });
            index.insert(id.to_string(), vertices.len() - 1);
            vertices.len() - 1
        }
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stmt = raw.split('#').next().unwrap_or("").trim();
        if stmt.is_empty() {
            continue;
        }
        let toks: Vec<&str> = stmt.split_whitespace().collect();
        let parse_err = |msg: String| GraphError::Parse { line, msg };

        if toks[0] == "vertex" {
            if toks.len() != 2 && toks.len() != 4 {
                return Err(parse_err(
                    "expected `vertex <id>` or `vertex <id> <x> <y>`".to_string(),
                ));
            }
            let id = toks[1];
            if explicit.iter().any(|e| e == id) {
                return Err(parse_err(format!("duplicate vertex declaration `{id}`")));
            }
            explicit.push(id.to_string());
            let vi = intern(&mut vertices, &mut index, id);
            if toks.len() == 4 {
                let x: f64 = toks[2]
                    .parse()
                    .map_err(|_| parse_err(format!("bad coordinate `{}`", toks[2])))?;
                let y: f64 = toks[3]
                    .parse()
                    .map_err(|_| parse_err(format!("bad coordinate `{}`", toks[3])))?;
                vertices[vi].position_hint = Some((x, y));
            }
        } else if toks.len() >= 2 && toks[1] == "-->" {
            if toks.len() != 3 || toks[2] != "inf" {
                return Err(parse_err("expected `<id> --> inf`".to_string()));
            }
            let tail = intern(&mut vertices, &mut index, toks[0]);
            edges.push(Edge {
                id: format!("e{}", edges.len()),
                tail,
                head: None,
                kind: EdgeKind::HalfLine,
            });
        } else if toks.len() >= 2 && toks[1] == "--" {
            if toks.len() != 5 || toks[3] != ":" {
                return Err(parse_err(
                    "expected `<id_a> -- <id_b> : <length>`".to_string(),
                ));
            }
            let tail = intern(&mut vertices, &mut index, toks[0]);
            let head = intern(&mut vertices, &mut index, toks[2]);
            let len: f64 = toks[4]
                .parse()
                .map_err(|_| parse_err(format!("bad length `{}`", toks[4])))?;
            edges.push(Edge {
                id: format!("e{}", edges.len()),
                tail,
                head: Some(head),
                kind: EdgeKind::Bounded(len),
            });
        } else if toks[0] == "core" {
            if toks.len() < 3 || toks[1] != "subgraph" {
                return Err(parse_err(
                    "expected `core subgraph <edge_id> …`".to_string(),
                ));
            }
            let mut set = Vec::new();
            for t in &toks[2..] {
                let ei = edges
                    .iter()
                    .position(|e| e.id == *t)
                    .ok_or_else(|| parse_err(format!("unknown edge id `{t}` in core subgraph")))?;
                set.push(ei);
            }
            set.sort_unstable();
            set.dedup();
            region = Some(NonlinearityRegion::Subgraph(set));
        } else {
            return Err(parse_err(format!("unrecognized statement `{stmt}`")));
        }
    }

    MetricGraph::new(vertices, edges, region)
}

/// Canonical serialization; `parse_graph(serialize_graph(g)) == g`.
pub fn serialize_graph(g: &MetricGraph) -> String {
    let mut out = String::new();
    for v in &g.vertices {
        match v.position_hint {
            Some((x, y)) => {
                let _ = writeln!(out, "vertex {} {} {}", v.id, x, y);
            }
            None => {
                let _ = writeln!(out, "vertex {}", v.id);
            }
        }
    }
    for e in &g.edges {
        match e.kind {
            EdgeKind::Bounded(l) => {
                let _ = writeln!(
                    out,
                    "{} -- {} : {}",
                    g.vertices[e.tail].id,
                    g.vertices[e.head.expect("bounded edge has head")].id,
                    l
                );
            }
            EdgeKind::HalfLine => {
                let _ = writeln!(out, "{} --> inf", g.vertices[e.tail].id);
            }
        }
    }
    if let NonlinearityRegion::Subgraph(set) = &g.region {
        let ids: Vec<&str> = set.iter().map(|&i| g.edges[i].id.as_str()).collect();
        let _ = writeln!(out, "core subgraph {}", ids.join(" "));
    }
    out
}
