//! Artifact persistence: run manifests and deterministic writers for
//! spectra, audits, thresholds, field snapshots, and solution bundles.
//!
//! Every file embeds the manifest hash so inputs fully determine outputs;
//! floats are written with 17 significant decimal digits (round-trip exact),
//! and identical data always serializes to identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{C64, GraphFunction, GraphGrid};
use crate::solver::CriticalPoint;
use crate::verify::AuditReport;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("artifact format: {0}")]
    Format(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
}

/// Formats a double in scientific notation with 17 significant decimal
/// digits, which round-trips every finite `f64` exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Run manifest.
// ---------------------------------------------------------------------------

/// Everything that determines a run's outputs, plus a timestamp that does
/// not participate in the hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub graph_hash: String,
    pub h: f64,
    pub l_trunc: Option<f64>,
    pub potential_a: String,
    pub potential_v: String,
    pub p: Option<f64>,
    pub mu: Option<f64>,
    pub r_schedule: Vec<f64>,
    pub branches: Option<usize>,
    pub seed: u64,
    pub tool_version: String,
    /// Unix seconds at run start. Excluded from the hash so repeated runs
    /// produce byte-identical data files.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, graph_hash: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            graph_hash: graph_hash.to_string(),
            h: 0.0,
            l_trunc: None,
            potential_a: String::new(),
            potential_v: String::new(),
            p: None,
            mu: None,
            r_schedule: Vec::new(),
            branches: None,
            seed: 0,
            tool_version: crate::TOOL_VERSION.to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// SHA-256 over every field except the timestamp, truncated to 16 hex
    /// digits.
    pub fn hash(&self) -> String {
        let mut d = Sha256::new();
        let mut field = |name: &str, value: &str| {
            d.update(name.as_bytes());
            d.update([0x1f]);
            d.update(value.as_bytes());
            d.update([0x1e]);
        };
        field("command", &self.command);
        field("graph_hash", &self.graph_hash);
        field("h", &format!("{:016x}", self.h.to_bits()));
        field(
            "l_trunc",
            &self
                .l_trunc
                .map_or("none".to_string(), |v| format!("{:016x}", v.to_bits())),
        );
        field("potential_a", &self.potential_a);
        field("potential_v", &self.potential_v);
        field(
            "p",
            &self
                .p
                .map_or("none".to_string(), |v| format!("{:016x}", v.to_bits())),
        );
        field(
            "mu",
            &self
                .mu
                .map_or("none".to_string(), |v| format!("{:016x}", v.to_bits())),
        );
        let sched: Vec<String> = self
            .r_schedule
            .iter()
            .map(|v| format!("{:016x}", v.to_bits()))
            .collect();
        field("r_schedule", &sched.join(","));
        field(
            "branches",
            &self.branches.map_or("none".to_string(), |v| v.to_string()),
        );
        field("seed", &self.seed.to_string());
        field("tool_version", &self.tool_version);
        let digest = d.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| IoError::Format(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// CSV writers.
// ---------------------------------------------------------------------------

/// Writes a CSV with the embedded manifest line, a header, and rows.
pub fn write_csv(
    path: &Path,
    manifest_hash: &str,
    header: &str,
    rows: &[String],
) -> Result<(), IoError> {
    let mut out = String::with_capacity(64 + header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    out.push_str(&format!("# manifest {manifest_hash}\n"));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SpectrumRow {
    pub j: usize,
    pub lambda: f64,
    pub residual: f64,
    pub cluster_id: usize,
}

pub fn write_spectrum_csv(
    path: &Path,
    manifest_hash: &str,
    rows: &[SpectrumRow],
) -> Result<(), IoError> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.j,
                fmt_f64(r.lambda),
                fmt_f64(r.residual),
                r.cluster_id
            )
        })
        .collect();
    write_csv(path, manifest_hash, "j,lambda,residual,cluster_id", &lines)
}

pub fn write_audit_csv(
    path: &Path,
    manifest_hash: &str,
    reports: &[AuditReport],
) -> Result<(), IoError> {
    write_audit_csv_with_scope(path, manifest_hash, None, reports)
}

/// Audit CSV with an optional `# scope …` header comment stating what the
/// suite can and cannot conclude.
pub fn write_audit_csv_with_scope(
    path: &Path,
    manifest_hash: &str,
    scope: Option<&str>,
    reports: &[AuditReport],
) -> Result<(), IoError> {
    let lines: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.check,
                r.inputs_hash,
                r.pass,
                fmt_f64(r.measured),
                fmt_f64(r.bound),
                fmt_f64(r.tol)
            )
        })
        .collect();
    let header = match scope {
        Some(s) => format!("# scope {s}\ncheck,target_hash,pass,measured,bound,tol"),
        None => "check,target_hash,pass,measured,bound,tol".to_string(),
    };
    write_csv(path, manifest_hash, &header, &lines)
}

#[derive(Debug, Clone)]
pub struct ThresholdRow {
    pub name: String,
    pub value: f64,
    pub inputs_hash: String,
    pub provenance: String,
}

pub fn write_threshold_csv(
    path: &Path,
    manifest_hash: &str,
    rows: &[ThresholdRow],
) -> Result<(), IoError> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.name,
                fmt_f64(r.value),
                r.inputs_hash,
                r.provenance
            )
        })
        .collect();
    write_csv(
        path,
        manifest_hash,
        "name,value,inputs_hash,constant_provenance",
        &lines,
    )
}

// ---------------------------------------------------------------------------
// Field snapshots.
// ---------------------------------------------------------------------------

/// Snapshot header: grid identity plus the scalars that situate the field.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub grid_hash: String,
    pub mu: f64,
    pub p: f64,
    pub lambda: f64,
}

/// One edge block of samples.
#[derive(Debug, Clone)]
pub struct EdgeSamples {
    pub edge: usize,
    pub x: Vec<f64>,
    pub value: Vec<C64>,
}

/// Writes a field as per-edge `x value_re value_im` blocks.
pub fn write_field_snapshot(
    path: &Path,
    manifest_hash: &str,
    header: &SnapshotHeader,
    grid: &GraphGrid,
    u: &GraphFunction,
) -> Result<(), IoError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# magnograph field snapshot")?;
    writeln!(f, "# manifest {manifest_hash}")?;
    writeln!(f, "grid {}", header.grid_hash)?;
    writeln!(
        f,
        "mu {} p {} lambda {}",
        fmt_f64(header.mu),
        fmt_f64(header.p),
        fmt_f64(header.lambda)
    )?;
    for (ei, eg) in grid.edges.iter().enumerate() {
        writeln!(f, "edge {ei} n {}", eg.n_nodes)?;
        for j in 0..eg.n_nodes {
            let v = u.values[eg.node_dof(j)];
            writeln!(
                f,
                "{} {} {}",
                fmt_f64(eg.node_x(j)),
                fmt_f64(v.re),
                fmt_f64(v.im)
            )?;
        }
    }
    Ok(())
}

/// Reads a snapshot back into its header and per-edge sample blocks.
pub fn read_field_snapshot(path: &Path) -> Result<(SnapshotHeader, Vec<EdgeSamples>), IoError> {
    let text = fs::read_to_string(path)?;
    parse_field_snapshot(&text)
}

pub fn parse_field_snapshot(text: &str) -> Result<(SnapshotHeader, Vec<EdgeSamples>), IoError> {
    let mut grid_hash = None;
    let mut scalars: Option<(f64, f64, f64)> = None;
    let mut edges: Vec<EdgeSamples> = Vec::new();
    let mut declared: Vec<usize> = Vec::new();
    let mut expect: usize = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| IoError::Format(format!("line {}: {msg}", lineno + 1));
        match toks[0] {
            "grid" if toks.len() == 2 => grid_hash = Some(toks[1].to_string()),
            "mu" if toks.len() == 6 && toks[2] == "p" && toks[4] == "lambda" => {
                let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("bad scalar"));
                scalars = Some((parse(toks[1])?, parse(toks[3])?, parse(toks[5])?));
            }
            "edge" if toks.len() == 4 && toks[2] == "n" => {
                let edge = toks[1].parse().map_err(|_| bad("bad edge id"))?;
                expect = toks[3].parse().map_err(|_| bad("bad sample count"))?;
                declared.push(expect);
                edges.push(EdgeSamples {
                    edge,
                    x: Vec::with_capacity(expect),
                    value: Vec::with_capacity(expect),
                });
            }
            _ if toks.len() == 3 => {
                let block = edges
                    .last_mut()
                    .ok_or_else(|| bad("samples before any edge block"))?;
                if block.x.len() >= expect {
                    return Err(bad("more samples than declared"));
                }
                let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("bad sample"));
                block.x.push(parse(toks[0])?);
                block
                    .value
                    .push(C64::new(parse(toks[1])?, parse(toks[2])?));
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    for (b, &n) in edges.iter().zip(&declared) {
        if b.x.len() != n {
            return Err(IoError::Format(format!(
                "edge {} block declares {n} samples but has {}",
                b.edge,
                b.x.len()
            )));
        }
    }
    let (mu, p, lambda) = scalars.ok_or_else(|| {
        IoError::Format("missing `mu … p … lambda …` header line".to_string())
    })?;
    Ok((
        SnapshotHeader {
            grid_hash: grid_hash
                .ok_or_else(|| IoError::Format("missing `grid <hash>` line".to_string()))?,
            mu,
            p,
            lambda,
        },
        edges,
    ))
}

/// Rebuilds a grid function from snapshot blocks taken on the same grid.
pub fn snapshot_to_function(
    grid: &GraphGrid,
    header: &SnapshotHeader,
    blocks: &[EdgeSamples],
) -> Result<GraphFunction, IoError> {
    if header.grid_hash != grid.hash {
        return Err(IoError::Mismatch(format!(
            "snapshot grid {} does not match target grid {}",
            header.grid_hash, grid.hash
        )));
    }
    if blocks.len() != grid.edges.len() {
        return Err(IoError::Mismatch(format!(
            "snapshot has {} edge blocks, grid has {}",
            blocks.len(),
            grid.edges.len()
        )));
    }
    let mut u = GraphFunction::zeros(grid);
    for b in blocks {
        let eg = grid.edges.get(b.edge).ok_or_else(|| {
            IoError::Mismatch(format!("snapshot edge {} not in grid", b.edge))
        })?;
        if b.x.len() != eg.n_nodes {
            return Err(IoError::Mismatch(format!(
                "edge {}: snapshot has {} samples, grid has {} nodes",
                b.edge,
                b.x.len(),
                eg.n_nodes
            )));
        }
        for j in 0..eg.n_nodes {
            u.values[eg.node_dof(j)] = b.value[j];
        }
    }
    Ok(u)
}

// ---------------------------------------------------------------------------
// Solution bundles.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub weak: f64,
    pub strong: f64,
    pub vertex_max: f64,
}

/// JSON manifest of one critical point; the field itself lives in the
/// sibling snapshot file named by `snapshot`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionBundle {
    pub manifest: String,
    pub mu: f64,
    pub p: f64,
    pub lambda: f64,
    pub energy: f64,
    pub mass: f64,
    pub residuals: ResidualSummary,
    pub branch: String,
    pub r_final: Option<f64>,
    pub dichotomy_flag: String,
    pub snapshot: String,
}

/// Writes `<stem>.json` + `<stem>.snap` into `dir` for one critical point.
pub fn write_solution_bundle(
    dir: &Path,
    stem: &str,
    manifest_hash: &str,
    grid: &GraphGrid,
    p: f64,
    mu: f64,
    point: &CriticalPoint,
) -> Result<SolutionBundle, IoError> {
    let snapshot_name = format!("{stem}.snap");
    let header = SnapshotHeader {
        grid_hash: grid.hash.clone(),
        mu,
        p,
        lambda: point.multiplier,
    };
    write_field_snapshot(
        &dir.join(&snapshot_name),
        manifest_hash,
        &header,
        grid,
        &point.u,
    )?;
    let bundle = SolutionBundle {
        manifest: manifest_hash.to_string(),
        mu,
        p,
        lambda: point.multiplier,
        energy: point.energy,
        mass: point.mass,
        residuals: ResidualSummary {
            weak: point.weak_residual,
            strong: point.strong_residual,
            vertex_max: point
                .vertex_residuals
                .iter()
                .copied()
                .fold(0.0, f64::max),
        },
        branch: point.branch.clone(),
        r_final: point.r_final,
        dichotomy_flag: point.dichotomy.flag().to_string(),
        snapshot: snapshot_name,
    };
    let json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(bundle)
}

pub fn read_solution_bundle(path: &Path) -> Result<SolutionBundle, IoError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_grid;
    use crate::graph::parse_graph;
    use crate::solver::Dichotomy;
    use std::f64::consts::PI;

    fn manifest() -> RunManifest {
        let mut m = RunManifest::new("spectrum", "abc123");
        m.h = 0.01;
        m.p = Some(4.0);
        m.mu = Some(0.5);
        m.r_schedule = vec![2.0, 4.0];
        m.seed = 7;
        m
    }

    #[test]
    fn float_format_round_trips_exactly() {
        for &v in &[
            0.1,
            1.0 / 3.0,
            -2.5e17,
            1e-300,
            PI,
            f64::MIN_POSITIVE,
            -0.0,
            6.02214076e23,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "round trip of {v} via {s}");
        }
    }

    #[test]
    fn manifest_hash_ignores_timestamp_only() {
        let a = manifest();
        let mut b = a.clone();
        b.timestamp = a.timestamp + 86400;
        assert_eq!(a.hash(), b.hash(), "timestamp must not affect the hash");
        let mut c = a.clone();
        c.seed = 8;
        assert_ne!(a.hash(), c.hash(), "seed must affect the hash");
        let mut d = a.clone();
        d.mu = Some(0.25);
        assert_ne!(a.hash(), d.hash(), "mass must affect the hash");
    }

    #[test]
    fn spectrum_csv_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spectrum.csv");
        let rows = vec![
            SpectrumRow { j: 1, lambda: 1.0, residual: 1e-12, cluster_id: 0 },
            SpectrumRow { j: 2, lambda: 2.0 + 1e-16, residual: 2e-12, cluster_id: 1 },
        ];
        write_spectrum_csv(&path, "deadbeef00000000", &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# manifest deadbeef00000000");
        assert_eq!(lines[1], "j,lambda,residual,cluster_id");
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",0"));
        let lam: f64 = lines[3].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(lam.to_bits(), (2.0f64 + 1e-16).to_bits());
        // Identical call ⇒ identical bytes.
        let path2 = dir.path().join("spectrum2.csv");
        write_spectrum_csv(&path2, "deadbeef00000000", &rows).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn audit_and_threshold_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let audit = AuditReport {
            check: "diamagnetic".to_string(),
            inputs_hash: "00ff".to_string(),
            pass: true,
            measured: -1e-3,
            bound: 0.0,
            tol: 1e-2,
            notes: "unused in csv".to_string(),
        };
        let pa = dir.path().join("audits.csv");
        write_audit_csv(&pa, "cafe", &[audit]).unwrap();
        let text = fs::read_to_string(&pa).unwrap();
        assert!(text.starts_with("# manifest cafe\ncheck,target_hash,pass,measured,bound,tol\n"));
        assert!(text.contains("diamagnetic,00ff,true,"));

        let pt = dir.path().join("thresholds.csv");
        write_threshold_csv(
            &pt,
            "cafe",
            &[ThresholdRow {
                name: "mu_c".to_string(),
                value: 0.5,
                inputs_hash: "11".to_string(),
                provenance: "empirical-sup-1000-probes-x1.05".to_string(),
            }],
        )
        .unwrap();
        let text = fs::read_to_string(&pt).unwrap();
        assert!(text.contains("name,value,inputs_hash,constant_provenance"));
        assert!(text.contains("mu_c,5.0000000000000000e-1,11,empirical-sup-1000-probes-x1.05"));
    }

    #[test]
    fn field_snapshot_round_trip_bitwise() {
        let g = parse_graph("v0 -- v0 : 1\nv0 -- v1 : 0.5").unwrap();
        let grid = build_grid(&g, 0.03, None).unwrap();
        let u = GraphFunction::from_fn(&grid, |e, x| {
            C64::new((x + e as f64).sin(), (2.0 * x).cos() / 3.0)
        });
        let header = SnapshotHeader {
            grid_hash: grid.hash.clone(),
            mu: 0.5,
            p: 4.0,
            lambda: 0.9871,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.snap");
        write_field_snapshot(&path, "feed", &header, &grid, &u).unwrap();
        let (h2, blocks) = read_field_snapshot(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(blocks.len(), grid.edges.len());
        let v = snapshot_to_function(&grid, &h2, &blocks).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn snapshot_grid_mismatch_rejected() {
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 0.1, None).unwrap();
        let other = build_grid(&g, 0.05, None).unwrap();
        let u = GraphFunction::from_fn(&grid, |_, x| C64::new(x, 0.0));
        let header = SnapshotHeader {
            grid_hash: grid.hash.clone(),
            mu: 1.0,
            p: 4.0,
            lambda: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.snap");
        write_field_snapshot(&path, "f00d", &header, &grid, &u).unwrap();
        let (h2, blocks) = read_field_snapshot(&path).unwrap();
        assert!(matches!(
            snapshot_to_function(&other, &h2, &blocks),
            Err(IoError::Mismatch(_))
        ));
    }

    #[test]
    fn solution_bundle_round_trip() {
        let g = parse_graph("v0 -- v1 : 1").unwrap();
        let grid = build_grid(&g, 0.05, None).unwrap();
        let point = CriticalPoint {
            u: GraphFunction::from_fn(&grid, |_, x| C64::new(1.0 - x, 0.1 * x)),
            multiplier: 0.75,
            energy: -0.01,
            mass: 0.5,
            weak_residual: 3e-9,
            strong_residual: 2e-4,
            vertex_residuals: vec![1e-5, 4e-5],
            branch: "seeded-from-phi_1".to_string(),
            r_final: Some(64.0),
            dichotomy: Dichotomy::MassReached,
        };
        let dir = tempfile::tempdir().unwrap();
        let bundle =
            write_solution_bundle(dir.path(), "branch_1", "beefcafe", &grid, 4.0, 0.5, &point)
                .unwrap();
        assert_eq!(bundle.dichotomy_flag, "mass_reached");
        assert_eq!(bundle.residuals.vertex_max, 4e-5);
        let back = read_solution_bundle(&dir.path().join("branch_1.json")).unwrap();
        assert_eq!(back.manifest, "beefcafe");
        assert_eq!(back.lambda.to_bits(), 0.75f64.to_bits());
        assert_eq!(back.r_final, Some(64.0));
        assert_eq!(back.snapshot, "branch_1.snap");
        // The snapshot holds the field.
        let (h, blocks) = read_field_snapshot(&dir.path().join(&back.snapshot)).unwrap();
        let v = snapshot_to_function(&grid, &h, &blocks).unwrap();
        assert_eq!(v.values[0].re.to_bits(), point.u.values[0].re.to_bits());
    }

    #[test]
    fn malformed_snapshot_rejected() {
        assert!(matches!(
            parse_field_snapshot("grid g\nmu 1 p 4 lambda 0\n0.0 1.0"),
            Err(IoError::Format(_))
        ));
        assert!(matches!(
            parse_field_snapshot("grid g\nedge 0 n 1\n0.0 1.0 0.0"),
            Err(IoError::Format(_)) // missing scalar header
        ));
        assert!(matches!(
            parse_field_snapshot("mu 1 p 4 lambda 0\nedge 0 n 1\n0.0 1.0 0.0"),
            Err(IoError::Format(_)) // missing grid hash
        ));
    }
}
