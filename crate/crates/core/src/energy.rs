//! Potential-energy loss assembled from Gauss-point strains, and the per-cycle
//! training session of one PINN model.
//!
//! Densities enter only as the scalar factor ψ(ρ̃_e) multiplying the solid
//! strain energy of element `e`; stresses are always evaluated with the solid
//! modulus.

use ndarray::Array2;

use crate::diff::AdamConfig;
use crate::error::{Error, Result};
use crate::mesh::{GaussPoint, Mesh};
use crate::net::{FieldEval, FieldLoss, LossEval, PinnModel, TrainingMode};
use crate::problem::LoadCase;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub youngs: f64,
    pub poisson: f64,
}

impl Material {
    pub fn new(youngs: f64, poisson: f64) -> Result<Material> {
        let m = Material { youngs, poisson };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs > 0.0) || !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::InvalidInput(format!("invalid material E={} nu={}", self.youngs, self.poisson)));
        }
        Ok(())
    }

    /// First Lamé constant.
    pub fn lambda(&self) -> f64 {
        self.youngs * self.poisson / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
    }

    /// Shear modulus.
    pub fn mu(&self) -> f64 {
        self.youngs / (2.0 * (1.0 + self.poisson))
    }
}

/// SIMP interpolation ψ = η + (1-η) ρ^p.
pub fn interpolation_psi(rho: f64, p: f64, eta: f64) -> f64 {
    eta + (1.0 - eta) * rho.powf(p)
}

pub type Tensor3 = [[f64; 3]; 3];

/// Displacement gradient `H[i][k] = ∂u_i/∂χ_k` of point `p` in a field evaluation.
pub fn gradient_at(field: &FieldEval, p: usize) -> Tensor3 {
    let dim = field.u.ncols();
    let mut h = [[0.0; 3]; 3];
    for (k, jk) in field.jac.iter().enumerate() {
        for (i, row) in h.iter_mut().enumerate().take(dim) {
            row[k] = jk[[p, i]];
        }
    }
    h
}

/// Small strain and solid-material stress (plane strain in 2D).
pub fn strain_and_solid_stress(grad: &Tensor3, dim: usize, mat: &Material) -> (Tensor3, Tensor3) {
    let mut eps = [[0.0; 3]; 3];
    for i in 0..dim {
        for k in 0..dim {
            eps[i][k] = 0.5 * (grad[i][k] + grad[k][i]);
        }
    }
    let tr: f64 = (0..dim).map(|i| eps[i][i]).sum();
    let (lam, mu) = (mat.lambda(), mat.mu());
    let mut sig = [[0.0; 3]; 3];
    for i in 0..dim {
        for k in 0..dim {
            sig[i][k] = 2.0 * mu * eps[i][k] + if i == k { lam * tr } else { 0.0 };
        }
    }
    (eps, sig)
}

fn contract(a: &Tensor3, b: &Tensor3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            s += a[i][k] * b[i][k];
        }
    }
    s
}

/// ½ σ⁰:ε at a point.
pub fn solid_energy_density(grad: &Tensor3, dim: usize, mat: &Material) -> f64 {
    let (eps, sig) = strain_and_solid_stress(grad, dim, mat);
    0.5 * contract(&sig, &eps)
}

/// σ⁰(a):ε(b).
pub fn mixed_energy_density(grad_a: &Tensor3, grad_b: &Tensor3, dim: usize, mat: &Material) -> f64 {
    let (_, sig_a) = strain_and_solid_stress(grad_a, dim, mat);
    let (eps_b, _) = strain_and_solid_stress(grad_b, dim, mat);
    contract(&sig_a, &eps_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBreakdown {
    /// Solid strain energy U_e⁰ per element id (zero for elements not sampled).
    pub solid: Vec<f64>,
    /// Σ ψ(ρ̃_e) U_e⁰.
    pub internal: f64,
}

/// Internal energy from displacement gradients at `gauss` (rows of `field`
/// in the same order). `psi[e]` is indexed by element id.
pub fn internal_energy(field: &FieldEval, gauss: &[GaussPoint], psi: &[f64], mat: &Material, n_elements: usize) -> Result<EnergyBreakdown> {
    if gauss.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let dim = field.u.ncols();
    let mut solid = vec![0.0; n_elements];
    for (p, g) in gauss.iter().enumerate() {
        solid[g.element] += g.weight * solid_energy_density(&gradient_at(field, p), dim, mat);
    }
    let mut seen = vec![false; n_elements];
    let mut internal = 0.0;
    for g in gauss {
        if !seen[g.element] {
            seen[g.element] = true;
            internal += psi[g.element] * solid[g.element];
        }
    }
    Ok(EnergyBreakdown { solid, internal })
}

/// Per-element Σ κ σ⁰(λ):ε(u) from two fields sampled at the same Gauss points.
pub fn mixed_energies(state: &FieldEval, adjoint: &FieldEval, gauss: &[GaussPoint], mat: &Material, n_elements: usize) -> Vec<f64> {
    let dim = state.u.ncols();
    let mut out = vec![0.0; n_elements];
    for (p, g) in gauss.iter().enumerate() {
        out[g.element] += g.weight * mixed_energy_density(&gradient_at(adjoint, p), &gradient_at(state, p), dim, mat);
    }
    out
}

/// External work Σ c_q · u_q, where `c_q` is either `weight·t̄` or a probe direction.
pub fn external_work(u: &Array2<f64>, first_row: usize, coefficients: &[[f64; 3]]) -> f64 {
    let dim = u.ncols();
    coefficients
        .iter()
        .enumerate()
        .map(|(q, c)| (0..dim).map(|i| c[i] * u[[first_row + q, i]]).sum::<f64>())
        .sum()
}

/// Collocation batch for one load case: active Gauss points first, then
/// boundary quadrature points and the pseudo-load probe.
#[derive(Debug, Clone)]
pub struct Collocation {
    pub points: Vec<[f64; 3]>,
    pub gauss: Vec<GaussPoint>,
    /// Work coefficient per non-Gauss point.
    pub work: Vec<[f64; 3]>,
}

impl Collocation {
    pub fn new(mesh: &Mesh, active_elements: &[usize], load: &LoadCase) -> Result<Collocation> {
        if active_elements.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        let gauss = mesh.gauss_points_of(active_elements);
        let mut points: Vec<[f64; 3]> = gauss.iter().map(|g| g.coords).collect();
        let mut work = Vec::new();
        for t in &load.tractions {
            for (p, w) in mesh.boundary_quadrature(&t.region)? {
                points.push(p);
                work.push([w * t.traction[0], w * t.traction[1], w * t.traction[2]]);
            }
        }
        if let Some(probe) = &load.pseudo_load {
            points.push(probe.point);
            work.push(probe.direction);
        }
        Ok(Collocation { points, gauss, work })
    }

    pub fn n_gauss(&self) -> usize {
        self.gauss.len()
    }
}

/// Π = Σ_p w_p ½σ⁰:ε − Σ_q c_q·u_q with w_p = κ_p ψ(ρ̃_e(p)).
pub struct EnergyLoss {
    pub material: Material,
    pub weights: Vec<f64>,
    pub work: Vec<[f64; 3]>,
}

impl EnergyLoss {
    pub fn new(colloc: &Collocation, psi: &[f64], material: Material) -> EnergyLoss {
        let weights = colloc.gauss.iter().map(|g| g.weight * psi[g.element]).collect();
        EnergyLoss { material, weights, work: colloc.work.clone() }
    }
}

impl FieldLoss for EnergyLoss {
    fn evaluate(&self, field: &FieldEval) -> Result<LossEval> {
        let n = field.u.nrows();
        let dim = field.u.ncols();
        let ng = self.weights.len();
        if n != ng + self.work.len() {
            return Err(Error::Shape(format!("batch of {n} rows, loss expects {}", ng + self.work.len())));
        }
        let mut d_jac = vec![Array2::zeros((n, dim)); dim];
        let mut internal = 0.0;
        for p in 0..ng {
            let h = gradient_at(field, p);
            let (eps, sig) = strain_and_solid_stress(&h, dim, &self.material);
            let w = self.weights[p];
            internal += 0.5 * w * contract(&sig, &eps);
            for (k, dj) in d_jac.iter_mut().enumerate() {
                for i in 0..dim {
                    dj[[p, i]] = w * sig[i][k];
                }
            }
        }
        let mut d_u = Array2::zeros((n, dim));
        for (q, c) in self.work.iter().enumerate() {
            for i in 0..dim {
                d_u[[ng + q, i]] = -c[i];
            }
        }
        let work = external_work(&field.u, ng, &self.work);
        Ok(LossEval { value: internal - work, d_u, d_jac })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub mode: TrainingMode,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss at the start of every epoch.
    pub losses: Vec<f64>,
    pub retried: bool,
}

/// Runs `mode.epochs()` full-batch Adam steps on Π over the mode's parameter
/// subset. On a non-finite loss the warm-start parameters are restored and the
/// session is retried once with half the step size.
pub fn train_model(model: &mut PinnModel, colloc: &Collocation, loss: &EnergyLoss, mode: TrainingMode, adam: AdamConfig) -> Result<TrainReport> {
    let start = model.params.clone();
    let mut prep = model.prepare(&colloc.points);
    let alpha = mode.alpha();
    model.alpha = alpha;
    match train_session(model, &mut prep, loss, mode, adam) {
        Ok(r) => Ok(r),
        Err(Error::NonFinite(msg)) => {
            model.params = start;
            let halved = AdamConfig { step_size: 0.5 * adam.step_size, ..adam };
            model.clear_frozen_backbone(&mut prep);
            let mut r = train_session(model, &mut prep, loss, mode, halved)
                .map_err(|e| Error::Diverged(format!("{msg}; retry with halved step failed: {e}")))?;
            r.retried = true;
            Ok(r)
        }
        Err(e) => Err(e),
    }
}

fn train_session(model: &mut PinnModel, prep: &mut crate::net::Prepared, loss: &EnergyLoss, mode: TrainingMode, adam: AdamConfig) -> Result<TrainReport> {
    let subset = mode.subset();
    let alpha = mode.alpha();
    if matches!(mode, TrainingMode::CoefficientOnly { .. }) {
        model.freeze_backbone(prep);
    }
    let mut state = model.adam_state(subset, adam);
    let mut losses = Vec::with_capacity(mode.epochs());
    for _ in 0..mode.epochs() {
        let value = model.adam_step(prep, alpha, loss, &mut state, subset)?;
        losses.push(value);
    }
    let (final_loss, _) = evaluate_loss(model, prep, loss)?;
    model.clear_frozen_backbone(prep);
    let initial_loss = losses.first().copied().unwrap_or(final_loss);
    Ok(TrainReport { mode, epochs_run: mode.epochs(), initial_loss, final_loss, losses, retried: false })
}

/// Loss value of the model's current field on a prepared batch.
pub fn evaluate_loss(model: &PinnModel, prep: &crate::net::Prepared, loss: &EnergyLoss) -> Result<(f64, FieldEval)> {
    let field = model.forward_with_jacobian(prep, model.alpha)?;
    let v = loss.evaluate(&field)?.value;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v}")));
    }
    Ok((v, field))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steel() -> Material {
        Material::new(210.0, 0.3).unwrap()
    }

    #[test]
    fn psi_values() {
        assert_eq!(interpolation_psi(1.0, 3.0, 1e-6), 1.0);
        assert_eq!(interpolation_psi(0.0, 3.0, 1e-6), 1e-6);
        assert!((interpolation_psi(0.5, 3.0, 1e-6) - 0.125_000_875).abs() < 1e-15);
    }

    #[test]
    fn lame_constants() {
        let m = steel();
        assert!((m.mu() * 2.0 - 210.0 / 1.3).abs() < 1e-12);
        assert!(m.lambda() > 0.0);
        assert!(Material::new(210.0, 0.5).is_err());
        assert!(Material::new(-1.0, 0.3).is_err());
    }

    #[test]
    fn stress_examples() {
        let m = steel();
        let zero = [[0.0; 3]; 3];
        let (e, s) = strain_and_solid_stress(&zero, 2, &m);
        assert_eq!(e, zero);
        assert_eq!(s, zero);
        let mut g = [[0.0; 3]; 3];
        g[0][0] = 1e-3;
        let (_, s) = strain_and_solid_stress(&g, 2, &m);
        assert!((s[0][0] - (m.lambda() + 2.0 * m.mu()) * 1e-3).abs() < 1e-15);
        assert!((s[1][1] - m.lambda() * 1e-3).abs() < 1e-15);
        let mut rot = [[0.0; 3]; 3];
        rot[0][1] = 0.3;
        rot[1][0] = -0.3;
        let (e, _) = strain_and_solid_stress(&rot, 2, &m);
        assert_eq!(e, zero);
    }

    #[test]
    fn mixed_density_is_symmetric() {
        let m = steel();
        let a = [[0.1, -0.3, 0.2], [0.5, 0.05, -0.1], [0.0, 0.2, 0.3]];
        let b = [[-0.2, 0.1, 0.4], [0.3, 0.6, 0.1], [0.2, -0.5, 0.1]];
        for dim in [2, 3] {
            let ab = mixed_energy_density(&a, &b, dim, &m);
            let ba = mixed_energy_density(&b, &a, dim, &m);
            assert!((ab - ba).abs() < 1e-12 * ab.abs().max(1.0));
            assert!((mixed_energy_density(&a, &a, dim, &m) - 2.0 * solid_energy_density(&a, dim, &m)).abs() < 1e-12);
        }
    }

    fn uniform_field(n: usize, eps_xx: f64) -> FieldEval {
        let mut j0 = Array2::zeros((n, 2));
        for p in 0..n {
            j0[[p, 0]] = eps_xx;
        }
        FieldEval { u: Array2::zeros((n, 2)), jac: vec![j0, Array2::zeros((n, 2))] }
    }

    #[test]
    fn internal_energy_examples() {
        let m = steel();
        let mesh = Mesh::new(2, [2.0, 1.0, 0.0], [2, 1, 1], &[]).unwrap();
        let gauss = mesh.gauss_points();
        let e = 1e-2;
        let field = uniform_field(gauss.len(), e);
        let solid_one = 0.5 * (m.lambda() + 2.0 * m.mu()) * e * e;
        let b = internal_energy(&field, &gauss, &[1.0, interpolation_psi(0.5, 3.0, 1e-6)], &m, 2).unwrap();
        assert!((b.solid[0] - solid_one).abs() < 1e-15);
        assert!((b.internal - (1.0 + interpolation_psi(0.5, 3.0, 1e-6)) * solid_one).abs() < 1e-15);
        let zero = uniform_field(gauss.len(), 0.0);
        assert_eq!(internal_energy(&zero, &gauss, &[1.0, 1.0], &m, 2).unwrap().internal, 0.0);
        assert!(internal_energy(&zero, &[], &[1.0, 1.0], &m, 2).is_err());
    }

    #[test]
    fn external_work_examples() {
        let u = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 0.2, -0.1, 0.0, 0.3]).unwrap();
        assert_eq!(external_work(&u, 1, &[[0.0; 3], [0.0; 3]]), 0.0);
        // constant traction t on length s, constant u: s (t·u)
        let uc = Array2::from_shape_vec((2, 2), vec![0.2, -0.1, 0.2, -0.1]).unwrap();
        let s = 0.25;
        let t = [0.0, -8.0, 0.0];
        let w = external_work(&uc, 0, &[[0.0, 0.5 * s * t[1], 0.0], [0.0, 0.5 * s * t[1], 0.0]]);
        assert!((w - s * (t[1] * -0.1)).abs() < 1e-15);
        assert!((external_work(&u, 2, &[[0.0, 1.0, 0.0]]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn loss_derivatives_match_finite_differences() {
        let m = steel();
        let loss = EnergyLoss { material: m, weights: vec![0.3, 0.7], work: vec![[0.5, -2.0, 0.0]] };
        let mk = |u: Array2<f64>, j0: Array2<f64>, j1: Array2<f64>| FieldEval { u, jac: vec![j0, j1] };
        let u = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let j0 = Array2::from_shape_vec((3, 2), vec![0.01, 0.02, -0.03, 0.04, 0.0, 0.0]).unwrap();
        let j1 = Array2::from_shape_vec((3, 2), vec![0.05, -0.01, 0.02, 0.03, 0.0, 0.0]).unwrap();
        let base = loss.evaluate(&mk(u.clone(), j0.clone(), j1.clone())).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let mut jp = j0.clone();
            let mut jm = j0.clone();
            jp.as_slice_mut().unwrap()[idx] += h;
            jm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss.evaluate(&mk(u.clone(), jp, j1.clone())).unwrap().value
                - loss.evaluate(&mk(u.clone(), jm, j1.clone())).unwrap().value)
                / (2.0 * h);
            assert!((fd - base.d_jac[0].as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        assert_eq!(base.d_u[[2, 1]], 2.0);
    }
}
