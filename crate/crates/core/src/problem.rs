//! Problem data model: supports, loads, probes and optimization settings.

use crate::diff::AdamConfig;
use crate::energy::Material;
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Region};
use crate::net::NetConfig;

/// Dirichlet region fixing the flagged displacement components to `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub region: Region,
    pub fixed: [bool; 3],
    pub value: [f64; 3],
}

impl Support {
    pub fn clamped(region: Region) -> Support {
        Support { region, fixed: [true; 3], value: [0.0; 3] }
    }
}

/// Uniform traction (force per unit boundary measure) on a boundary region.
#[derive(Debug, Clone, PartialEq)]
pub struct Traction {
    pub region: Region,
    pub traction: [f64; 3],
}

impl Traction {
    /// Total force `force` spread uniformly over the region.
    pub fn from_total(mesh: &Mesh, region: Region, force: [f64; 3]) -> Result<Traction> {
        let m = region.measure(mesh)?;
        if !(m > 0.0) {
            return Err(Error::InvalidInput(format!("traction region {region:?} has zero measure")));
        }
        Ok(Traction { region, traction: [force[0] / m, force[1] / m, force[2] / m] })
    }
}

/// Point evaluation of the displacement along a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub point: [f64; 3],
    pub direction: [f64; 3],
}

impl Probe {
    pub fn project(&self, u: &[f64]) -> f64 {
        u.iter().zip(self.direction.iter()).map(|(a, b)| a * b).sum()
    }
}

/// One governing or adjoint equation: supports plus either tractions or a unit pseudo-load.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadCase {
    pub name: String,
    pub supports: Vec<Support>,
    pub tractions: Vec<Traction>,
    pub pseudo_load: Option<Probe>,
}

impl LoadCase {
    /// The adjoint equation for `probe`: same supports, unit load at the probe.
    pub fn adjoint(&self, probe: Probe) -> LoadCase {
        LoadCase {
            name: format!("{}-adjoint", self.name),
            supports: self.supports.clone(),
            tractions: Vec::new(),
            pseudo_load: Some(probe),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementLimit {
    pub probe: Probe,
    pub limit: f64,
}

/// How design sensitivities are formed from the physical-density gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Exact derivative of the filter and projection, including the moving threshold.
    #[default]
    Exact,
    /// Sensitivity filter, then the chain rule with the threshold held fixed.
    Filtered,
}

impl std::str::FromStr for GradientMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(GradientMode::Exact),
            "filtered" => Ok(GradientMode::Filtered),
            other => Err(format!("unknown gradient mode {other:?} (expected exact or filtered)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub penalty: f64,
    pub eta: f64,
    pub beta_start: f64,
    pub beta_period: usize,
    pub beta_max: f64,
    pub tau: f64,
    pub gray_limit: f64,
    pub period: usize,
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub max_cycles: usize,
    pub epochs_backbone: usize,
    pub epochs_coefficient: usize,
    pub adam: AdamConfig,
    pub move_limit: f64,
    pub damping: f64,
    pub gradient: GradientMode,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            penalty: 3.0,
            eta: 1e-6,
            beta_start: 0.1,
            beta_period: 5,
            beta_max: 24.0,
            tau: 1e-3,
            gray_limit: 0.05,
            period: 3,
            stop_window: 3,
            stop_threshold: 1e-4,
            max_cycles: 300,
            epochs_backbone: 3000,
            epochs_coefficient: 1000,
            adam: AdamConfig::default(),
            move_limit: 0.1,
            damping: 0.5,
            gradient: GradientMode::Exact,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub mesh: Mesh,
    pub material: Material,
    pub load_cases: Vec<LoadCase>,
    pub volume_fraction: f64,
    pub displacement_limit: Option<DisplacementLimit>,
    /// Filter radius in multiples of the element size.
    pub filter_radius: f64,
    pub opt: OptConfig,
    pub net: NetConfig,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if !(self.volume_fraction > 0.0 && self.volume_fraction < 1.0) {
            return Err(Error::InvalidInput(format!("volume fraction {} outside (0, 1)", self.volume_fraction)));
        }
        self.material.validate()?;
        if !(self.filter_radius >= 1.0) {
            return Err(Error::InvalidInput(format!("filter radius {} below one element size", self.filter_radius)));
        }
        if self.load_cases.is_empty() {
            return Err(Error::InvalidInput("no load cases".into()));
        }
        for lc in &self.load_cases {
            if lc.supports.is_empty() {
                return Err(Error::InvalidInput(format!("load case {} has no supports", lc.name)));
            }
            for s in &lc.supports {
                if !on_boundary(&self.mesh, &s.region) {
                    return Err(Error::InvalidInput(format!("support {:?} is not on the boundary", s.region)));
                }
            }
            for t in &lc.tractions {
                t.region.boundary_face(&self.mesh)?;
            }
        }
        if let Some(d) = &self.displacement_limit {
            if !(d.limit > 0.0) {
                return Err(Error::InvalidInput("displacement limit must be positive".into()));
            }
        }
        Ok(())
    }

    /// Filter radius in metres.
    pub fn filter_radius_m(&self) -> f64 {
        self.filter_radius * self.mesh.h[0]
    }
}

fn on_boundary(mesh: &Mesh, r: &Region) -> bool {
    (0..mesh.dim).any(|a| {
        let flat = (r.max[a] - r.min[a]).abs() <= r.tol;
        flat && (r.min[a].abs() <= r.tol || (r.min[a] - mesh.extents[a]).abs() <= r.tol)
    })
}
