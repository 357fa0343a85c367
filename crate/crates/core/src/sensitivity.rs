//! Scaled objective, constraint values and their derivatives with respect to
//! physical densities. All per-element slices are indexed by design index.

use crate::error::{Error, Result};

/// Reference compliances, frozen at the first cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectiveState {
    reference: Vec<Option<f64>>,
}

impl ObjectiveState {
    pub fn new(load_cases: usize) -> ObjectiveState {
        ObjectiveState { reference: vec![None; load_cases] }
    }

    /// Stores `energy` as f_{c,0} for `case` unless one is already set, and returns the stored value.
    pub fn freeze(&mut self, case: usize, energy: f64) -> Result<f64> {
        let slot = self
            .reference
            .get_mut(case)
            .ok_or_else(|| Error::InvalidInput(format!("load case {case} out of range")))?;
        if let Some(v) = *slot {
            return Ok(v);
        }
        if !(energy > 0.0 && energy.is_finite()) {
            return Err(Error::Undefined(format!("reference compliance {energy} must be positive")));
        }
        *slot = Some(energy);
        Ok(energy)
    }

    pub fn reference(&self, case: usize) -> Result<f64> {
        self.reference
            .get(case)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Undefined(format!("reference compliance for load case {case} unset")))
    }
}

/// f_c = (N/f_{c,0}) Σ ψ U⁰.
pub fn compliance(solid_energy: &[f64], physical: &[f64], penalty: f64, eta: f64, reference: f64) -> f64 {
    let n = physical.len() as f64;
    let s: f64 = solid_energy
        .iter()
        .zip(physical)
        .map(|(&u, &r)| crate::energy::interpolation_psi(r, penalty, eta) * u)
        .sum();
    n / reference * s
}

/// ∂f_c/∂ρ̃_e = −(N p (1−η)/f_{c,0}) ρ̃_e^{p−1} U_e⁰.
pub fn compliance_gradient(solid_energy: &[f64], physical: &[f64], penalty: f64, eta: f64, reference: f64) -> Vec<f64> {
    stiffness_gradient(solid_energy, physical, penalty, eta, reference)
}

/// g_v = N(Σ ρ̃ v − V̄₀) and ∂g_v/∂ρ̃ = N v, with v normalized to unit sum.
pub fn volume_constraint(physical: &[f64], volumes: &[f64], target: f64) -> (f64, Vec<f64>) {
    let n = physical.len() as f64;
    let total: f64 = volumes.iter().sum();
    let v: Vec<f64> = volumes.iter().map(|x| x / total).collect();
    let frac: f64 = physical.iter().zip(&v).map(|(r, w)| r * w).sum();
    (n * (frac - target), v.iter().map(|w| n * w).collect())
}

/// g_d = (N/f_{c,0})(u_probe − ū).
pub fn displacement_constraint(probe: f64, limit: f64, reference: f64, n: usize) -> f64 {
    n as f64 / reference * (probe - limit)
}

/// ∂g_d/∂ρ̃_e = −(N p (1−η)/f_{c,0}) ρ̃_e^{p−1} B_e.
pub fn displacement_gradient(mixed_energy: &[f64], physical: &[f64], penalty: f64, eta: f64, reference: f64) -> Vec<f64> {
    stiffness_gradient(mixed_energy, physical, penalty, eta, reference)
}

fn stiffness_gradient(energy: &[f64], physical: &[f64], penalty: f64, eta: f64, reference: f64) -> Vec<f64> {
    let n = physical.len() as f64;
    let c = -n * penalty * (1.0 - eta) / reference;
    energy.iter().zip(physical).map(|(&u, &r)| c * r.powf(penalty - 1.0) * u).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_normalized_first_cycle() {
        let u = [0.5, 1.5, 2.0, 0.25];
        let rho = [1.0, 0.5, 0.8, 0.3];
        let raw: f64 = u.iter().zip(&rho).map(|(a, r)| crate::energy::interpolation_psi(*r, 3.0, 1e-6) * a).sum();
        let mut st = ObjectiveState::new(1);
        let f0 = st.freeze(0, raw).unwrap();
        assert!((compliance(&u, &rho, 3.0, 1e-6, f0) - 4.0).abs() < 1e-12);
        assert_eq!(st.freeze(0, 99.0).unwrap(), raw);
        assert_eq!(compliance(&[0.0; 4], &rho, 3.0, 1e-6, f0), 0.0);
        assert!(ObjectiveState::new(1).reference(0).is_err());
        assert!(ObjectiveState::new(1).freeze(0, 0.0).is_err());
    }

    #[test]
    fn compliance_gradient_examples() {
        let g = compliance_gradient(&[2.0, 3.0, 0.0], &[0.0, 0.5, 0.7], 3.0, 1e-6, 1.5);
        assert_eq!(g[0], 0.0);
        let want = -3.0 * 3.0 * (1.0 - 1e-6) / 1.5 * 0.25 * 3.0;
        assert!((g[1] - want).abs() < 1e-14);
        assert!(g.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn volume_examples() {
        let vols = vec![0.25; 8];
        let (g, d) = volume_constraint(&[0.4; 8], &vols, 0.4);
        assert!(g.abs() < 1e-14);
        assert!(d.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let (g, _) = volume_constraint(&[1.0; 8], &vols, 0.4);
        assert!((g - 0.6 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(displacement_constraint(0.1, 0.1, 2.0, 10), 0.0);
        assert!((displacement_constraint(0.11, 0.1, 2.0, 10) - 0.01 * 10.0 / 2.0).abs() < 1e-14);
        assert!(displacement_constraint(0.05, 0.1, 2.0, 10) < 0.0);
        let b = [1.0, -2.0];
        let rho = [0.0, 0.6];
        let g = displacement_gradient(&b, &rho, 3.0, 1e-6, 1.0);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0 * 3.0 * (1.0 - 1e-6) * 0.36 * 2.0).abs() < 1e-13);
    }

    #[test]
    fn self_adjoint_substitution() {
        // λ = u makes B_e = 2 U_e⁰
        let u0 = [0.3, 0.7, 1.1];
        let b: Vec<f64> = u0.iter().map(|x| 2.0 * x).collect();
        let rho = [0.2, 0.5, 0.9];
        let gc = compliance_gradient(&u0, &rho, 3.0, 1e-6, 1.0);
        let gd = displacement_gradient(&b, &rho, 3.0, 1e-6, 1.0);
        for (a, c) in gc.iter().zip(&gd) {
            assert!((2.0 * a - c).abs() < 1e-14);
        }
    }
}
