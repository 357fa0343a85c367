//! The five benchmark problems at desk and full resolution.

use dcpinn_core::energy::Material;
use dcpinn_core::mesh::{Hole, Mesh, Region};
use dcpinn_core::net::NetConfig;
use dcpinn_core::problem::{DisplacementLimit, LoadCase, OptConfig, Probe, Problem, Support, Traction};

use crate::error::{DriverError, DriverResult};

pub const PROBLEMS: [&str; 5] = ["cantilever2d", "lbeam2d", "multiload2d", "multiconstraint2d", "cantilever3d"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resolution {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Resolution {
    type Err = DriverError;
    fn from_str(s: &str) -> DriverResult<Resolution> {
        match s {
            "desk" => Ok(Resolution::Desk),
            "full" => Ok(Resolution::Full),
            other => Err(DriverError::Config(format!("unknown resolution '{other}' (expected desk or full)"))),
        }
    }
}

pub fn default_counts(name: &str, resolution: Resolution) -> DriverResult<[usize; 3]> {
    let desk = resolution == Resolution::Desk;
    Ok(match name {
        "cantilever2d" if desk => [96, 32, 1],
        "cantilever2d" => [480, 160, 1],
        "lbeam2d" if desk => [80, 50, 1],
        "lbeam2d" => [320, 200, 1],
        "multiload2d" if desk => [150, 30, 1],
        "multiload2d" => [800, 160, 1],
        "multiconstraint2d" if desk => [100, 20, 1],
        "multiconstraint2d" => [1000, 200, 1],
        "cantilever3d" if desk => [24, 2, 10],
        "cantilever3d" => [192, 16, 80],
        other => return Err(unknown(other)),
    })
}

fn unknown(name: &str) -> DriverError {
    DriverError::Config(format!("unknown problem '{name}' (expected one of {})", PROBLEMS.join(", ")))
}

fn rect(min: [f64; 3], max: [f64; 3]) -> Region {
    Region::new(min, max)
}

fn base(name: &str, mesh: Mesh, load_cases: Vec<LoadCase>, volume_fraction: f64, filter_radius: f64) -> Problem {
    Problem {
        name: name.to_string(),
        mesh,
        material: Material { youngs: 210.0, poisson: 0.3 },
        load_cases,
        volume_fraction,
        displacement_limit: None,
        filter_radius,
        opt: OptConfig::default(),
        net: NetConfig::default(),
    }
}

/// Builds a library problem on the given element counts.
pub fn build(name: &str, counts: [usize; 3]) -> DriverResult<Problem> {
    let p = match name {
        "cantilever2d" => {
            let mesh = Mesh::new(2, [12.0, 4.0, 0.0], counts, &[])?;
            let support = Support::clamped(rect([0.0, 0.0, 0.0], [0.0, 4.0, 0.0]));
            let load = Traction::from_total(&mesh, rect([12.0, 1.875, 0.0], [12.0, 2.125, 0.0]), [0.0, -2.0, 0.0])?;
            let lc = LoadCase { name: "f".into(), supports: vec![support], tractions: vec![load], pseudo_load: None };
            base(name, mesh, vec![lc], 0.4, 2.5)
        }
        "lbeam2d" => {
            let cut = Hole::Rect { min: [3.0, 2.0, 0.0], max: [8.0 + 1.0, 5.0 + 1.0, 0.0] };
            let mesh = Mesh::new(2, [8.0, 5.0, 0.0], counts, &[cut])?;
            let support = Support::clamped(rect([0.0, 5.0, 0.0], [3.0, 5.0, 0.0]));
            let load = Traction::from_total(&mesh, rect([8.0, 1.75, 0.0], [8.0, 2.0, 0.0]), [0.0, -2.0, 0.0])?;
            let lc = LoadCase { name: "f".into(), supports: vec![support], tractions: vec![load], pseudo_load: None };
            base(name, mesh, vec![lc], 0.4, 2.5)
        }
        "multiload2d" => {
            let holes = [
                Hole::Circle { center: [3.75, 1.2, 0.0], radius: 0.5, axis: 2 },
                Hole::Rect { min: [10.75, 0.7, 0.0], max: [11.75, 1.7, 0.0] },
            ];
            let mesh = Mesh::new(2, [15.0, 3.0, 0.0], counts, &holes)?;
            let supports = vec![
                Support::clamped(rect([0.0, 0.0, 0.0], [0.0, 3.0, 0.0])),
                Support::clamped(rect([15.0, 0.0, 0.0], [15.0, 3.0, 0.0])),
            ];
            let f1 = Traction::from_total(&mesh, rect([7.375, 3.0, 0.0], [7.625, 3.0, 0.0]), [0.0, -2.0, 0.0])?;
            let f2a = Traction::from_total(&mesh, rect([3.6875, 3.0, 0.0], [3.8125, 3.0, 0.0]), [0.0, -2.0, 0.0])?;
            let f2b = Traction::from_total(&mesh, rect([11.1875, 3.0, 0.0], [11.3125, 3.0, 0.0]), [0.0, -2.0, 0.0])?;
            let cases = vec![
                LoadCase { name: "f1".into(), supports: supports.clone(), tractions: vec![f1], pseudo_load: None },
                LoadCase { name: "f2".into(), supports, tractions: vec![f2a, f2b], pseudo_load: None },
            ];
            base(name, mesh, cases, 0.3, 3.0)
        }
        "multiconstraint2d" => {
            let mesh = Mesh::new(2, [10.0, 2.0, 0.0], counts, &[])?;
            let pin = |x0: f64, x1: f64| Support { region: rect([x0, 0.0, 0.0], [x1, 0.0, 0.0]), fixed: [true, true, false], value: [0.0; 3] };
            let supports = vec![pin(0.0, 0.2), pin(9.8, 10.0)];
            let load = Traction::from_total(&mesh, rect([4.9, 2.0, 0.0], [5.1, 2.0, 0.0]), [0.0, -1.0, 0.0])?;
            let lc = LoadCase { name: "f".into(), supports, tractions: vec![load], pseudo_load: None };
            let mut p = base(name, mesh, vec![lc], 0.3, 3.5);
            p.displacement_limit = Some(DisplacementLimit {
                probe: Probe { point: [5.0, 0.0, 0.0], direction: [0.0, -1.0, 0.0] },
                limit: 0.1,
            });
            p
        }
        "cantilever3d" => {
            let hole = Hole::Circle { center: [6.0, 0.5, 2.5], radius: 1.25, axis: 1 };
            let mesh = Mesh::new(3, [12.0, 1.0, 5.0], counts, &[hole])?;
            let support = Support::clamped(rect([0.0, 0.0, 0.0], [0.0, 1.0, 5.0]));
            let strip = mesh.h[2];
            let load = Traction::from_total(&mesh, rect([12.0, 0.0, 5.0 - strip], [12.0, 1.0, 5.0]), [0.0, 0.0, -1.0])?;
            let lc = LoadCase { name: "f".into(), supports: vec![support], tractions: vec![load], pseudo_load: None };
            let mut p = base(name, mesh, vec![lc], 0.3, 6f64.sqrt());
            p.opt.max_cycles = 100;
            p
        }
        other => return Err(unknown(other)),
    };
    p.validate()?;
    Ok(p)
}

pub fn problem_library(name: &str, resolution: Resolution) -> DriverResult<Problem> {
    build(name, default_counts(name, resolution)?)
}

/// Point used for displacement reporting: the displacement-limit probe if any,
/// otherwise the center of the first traction region along its load direction.
pub fn monitor_probe(problem: &Problem) -> Probe {
    if let Some(d) = &problem.displacement_limit {
        return d.probe;
    }
    let t = &problem.load_cases[0].tractions[0];
    let mut point = [0.0; 3];
    for a in 0..3 {
        point[a] = 0.5 * (t.region.min[a] + t.region.max[a]);
    }
    let norm = t.traction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction = [t.traction[0] / norm, t.traction[1] / norm, t.traction[2] / norm];
    Probe { point, direction }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_problem_builds_and_validates() {
        for name in PROBLEMS {
            let p = problem_library(name, Resolution::Desk).unwrap();
            assert_eq!(p.name, name);
            assert!(p.mesh.n_design() > 0);
        }
        assert!(problem_library("bridge", Resolution::Desk).is_err());
    }

    #[test]
    fn documented_defaults() {
        let c = problem_library("cantilever2d", Resolution::Desk).unwrap();
        assert_eq!(c.volume_fraction, 0.4);
        assert_eq!(c.mesh.n_design(), 3072);
        let total: f64 = {
            let t = &c.load_cases[0].tractions[0];
            t.traction[1] * t.region.measure(&c.mesh).unwrap()
        };
        assert!((total + 2.0).abs() < 1e-12);
        let m = problem_library("multiconstraint2d", Resolution::Desk).unwrap();
        assert_eq!(m.displacement_limit.unwrap().limit, 0.1);
        let s = problem_library("cantilever3d", Resolution::Desk).unwrap();
        assert!((s.filter_radius - 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.opt.max_cycles, 100);
        assert!(s.mesh.n_design() < 480);
        let l = problem_library("lbeam2d", Resolution::Desk).unwrap();
        assert_eq!(l.mesh.n_design(), 4000 - 50 * 30);
        let ml = problem_library("multiload2d", Resolution::Desk).unwrap();
        assert_eq!(ml.load_cases.len(), 2);
    }

    #[test]
    fn monitor_probe_follows_the_load() {
        let c = problem_library("cantilever2d", Resolution::Desk).unwrap();
        let p = monitor_probe(&c);
        assert_eq!(p.point, [12.0, 2.0, 0.0]);
        assert_eq!(p.direction, [0.0, -1.0, 0.0]);
    }
}
