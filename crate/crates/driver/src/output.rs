//! History CSV, density snapshots (text, PGM), VTK fields and checkpoints.
//!
//! `history.csv` columns, one row per cycle:
//!
//! | column | meaning |
//! |---|---|
//! | cycle | 1-based cycle index |
//! | objective | sum of scaled compliances |
//! | compliance | per-load-case scaled compliances, `;`-separated |
//! | g_v, g_d | constraint values (g_d empty when unconstrained) |
//! | limit | relaxed displacement limit ū_k |
//! | probe | monitored displacement |
//! | grayscale, beta, theta, active_ratio | design-field state |
//! | modes, epochs | training mode and epochs per model (`;`-separated, `fem` in fem mode) |
//! | params_updated, params_total | trainable parameters touched this cycle, summed over models |
//! | losses | final energy per model |
//! | isolation_ok | untouched parameter subsets bit-identical after training |
//! | tau_stop | stopping measure once enough history exists |
//! | eps_dof, eps_norm, fem_objective | PINN-vs-FEM checks (with `--verify-fem`) |
//! | wall_seconds | cycle wall time |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dcpinn_core::mesh::Mesh;
use serde::Serialize;

use crate::error::{DriverError, DriverResult};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleRecord {
    pub cycle: usize,
    pub objective: f64,
    pub compliance: Vec<f64>,
    pub g_v: f64,
    pub g_d: Option<f64>,
    pub limit: Option<f64>,
    pub probe: f64,
    pub grayscale: f64,
    pub beta: f64,
    pub theta: f64,
    pub active_ratio: f64,
    pub modes: Vec<String>,
    pub epochs: Vec<usize>,
    pub params_updated: usize,
    pub params_total: usize,
    pub losses: Vec<f64>,
    pub isolation_ok: Option<bool>,
    pub tau_stop: Option<f64>,
    pub eps_dof: Option<f64>,
    pub eps_norm: Option<f64>,
    pub fem_objective: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptHistory {
    pub records: Vec<CycleRecord>,
}

impl OptHistory {
    pub fn push(&mut self, r: CycleRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&CycleRecord> {
        self.records.last()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

#[derive(Serialize)]
struct Row {
    cycle: usize,
    objective: f64,
    compliance: String,
    g_v: f64,
    g_d: Option<f64>,
    limit: Option<f64>,
    probe: f64,
    grayscale: f64,
    beta: f64,
    theta: f64,
    active_ratio: f64,
    modes: String,
    epochs: String,
    params_updated: usize,
    params_total: usize,
    losses: String,
    isolation_ok: Option<bool>,
    tau_stop: Option<f64>,
    eps_dof: Option<f64>,
    eps_norm: Option<f64>,
    fem_objective: Option<f64>,
    wall_seconds: f64,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes the whole history (the file is rewritten each cycle so partial runs leave a valid CSV).
pub fn write_history(path: &Path, history: &OptHistory) -> DriverResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &history.records {
        w.serialize(Row {
            cycle: r.cycle,
            objective: r.objective,
            compliance: join(&r.compliance),
            g_v: r.g_v,
            g_d: r.g_d,
            limit: r.limit,
            probe: r.probe,
            grayscale: r.grayscale,
            beta: r.beta,
            theta: r.theta,
            active_ratio: r.active_ratio,
            modes: join(&r.modes),
            epochs: join(&r.epochs),
            params_updated: r.params_updated,
            params_total: r.params_total,
            losses: join(&r.losses),
            isolation_ok: r.isolation_ok,
            tau_stop: r.tau_stop,
            eps_dof: r.eps_dof,
            eps_norm: r.eps_norm,
            fem_objective: r.fem_objective,
            wall_seconds: r.wall_seconds,
        })?;
    }
    if history.records.is_empty() {
        // header only
        w.write_record([
            "cycle", "objective", "compliance", "g_v", "g_d", "limit", "probe", "grayscale", "beta", "theta", "active_ratio", "modes",
            "epochs", "params_updated", "params_total", "losses", "isolation_ok", "tau_stop", "eps_dof", "eps_norm", "fem_objective",
            "wall_seconds",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Element densities on the full grid (holes as 0), x fastest.
pub fn grid_values(mesh: &Mesh, physical: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; mesh.n_elements()];
    for (i, &e) in mesh.design.iter().enumerate() {
        v[e] = physical[i];
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    pub counts: [usize; 3],
    pub extents: [f64; 3],
    pub cycle: usize,
    /// x fastest, then y, then z.
    pub values: Vec<f64>,
}

/// Three header lines (dims, extents, cycle), then one line of `nx` values per grid row.
pub fn write_density(path: &Path, snap: &DensitySnapshot) -> DriverResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let [nx, ny, nz] = snap.counts;
    writeln!(w, "dims {nx} {ny} {nz}")?;
    writeln!(w, "extents {} {} {}", snap.extents[0], snap.extents[1], snap.extents[2])?;
    writeln!(w, "cycle {}", snap.cycle)?;
    for row in snap.values.chunks(nx) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_density(path: &Path) -> DriverResult<DensitySnapshot> {
    let bad = |m: &str| DriverError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {m}", path.display())));
    let mut lines = BufReader::new(File::open(path)?).lines();
    let mut header = |key: &str| -> DriverResult<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad("truncated header"))??;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(&format!("expected '{key}' header")));
        }
        Ok(parts.map(String::from).collect())
    };
    let dims = header("dims")?;
    let ext = header("extents")?;
    let cyc = header("cycle")?;
    let num = |s: &String| s.parse::<f64>().map_err(|_| bad("bad number"));
    let int = |s: &String| s.parse::<usize>().map_err(|_| bad("bad integer"));
    if dims.len() != 3 || ext.len() != 3 || cyc.len() != 1 {
        return Err(bad("malformed header"));
    }
    let counts = [int(&dims[0])?, int(&dims[1])?, int(&dims[2])?];
    let extents = [num(&ext[0])?, num(&ext[1])?, num(&ext[2])?];
    let cycle = int(&cyc[0])?;
    let mut values = Vec::with_capacity(counts.iter().product());
    for line in lines {
        for tok in line?.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    if values.len() != counts.iter().product::<usize>() {
        return Err(bad("value count does not match dims"));
    }
    Ok(DensitySnapshot { counts, extents, cycle, values })
}

/// Binary PGM, top image row = largest y; 255 = solid.
pub fn write_pgm(path: &Path, counts: [usize; 3], values: &[f64]) -> DriverResult<()> {
    let [nx, ny, _] = counts;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let mut bytes = Vec::with_capacity(nx * ny);
    for j in (0..ny).rev() {
        for i in 0..nx {
            bytes.push((values[i + nx * j].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Legacy VTK structured points with cell density.
pub fn write_vtk(path: &Path, mesh: &Mesh, values: &[f64]) -> DriverResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let c = mesh.counts;
    let (nz, hz) = if mesh.dim == 3 { (c[2] + 1, mesh.h[2]) } else { (1, 1.0) };
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "density")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", c[0] + 1, c[1] + 1, nz)?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {} {} {}", mesh.h[0], mesh.h[1], hz)?;
    writeln!(w, "CELL_DATA {}", mesh.n_elements())?;
    writeln!(w, "SCALARS density double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let values: Vec<f64> = (0..12).map(|i| (i as f64 * 0.1).sin().abs() / 3.0).collect();
        let snap = DensitySnapshot { counts: [4, 3, 1], extents: [1.5, 0.3, 0.0], cycle: 7, values };
        write_density(&path, &snap).unwrap();
        let back = read_density(&path).unwrap();
        assert_eq!(back, snap);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3 + 3);
    }

    #[test]
    fn solid_pgm_is_all_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        write_pgm(&path, [5, 2, 1], &[1.0; 10]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n5 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 255));
        assert_eq!(bytes.len() - header.len(), 10);
    }

    #[test]
    fn history_has_one_row_per_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let mut h = OptHistory::default();
        write_history(&path, &h).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        for c in 1..=2 {
            h.push(CycleRecord { cycle: c, compliance: vec![1.0, 2.0], modes: vec!["fem".into()], ..Default::default() });
        }
        write_history(&path, &h).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with("cycle,objective,compliance,g_v"));
        assert!(text.contains("1;2"));
    }
}
