//! Standalone verification suites behind `dcpinn verify`.

use std::fmt;
use std::time::Instant;

use dcpinn_core::diff::Subset;
use dcpinn_core::energy::{
    gradient_at, interpolation_psi, internal_energy, strain_and_solid_stress, train_model, Collocation, EnergyLoss, Material,
};
use dcpinn_core::fem::{error_metrics, field_at_gauss, load_vector, probe_value, probe_vector, FemSystem};
use dcpinn_core::mesh::{Mesh, Region};
use dcpinn_core::net::{grayscale, AlphaPolicy, HardConstraint, NetConfig, PinnModel, TrainingMode};
use dcpinn_core::problem::{LoadCase, OptConfig, Probe, Problem, Support, Traction};
use dcpinn_core::regularization::{
    chain_to_design, density_filter, heaviside, project, volume_preserving_threshold, FilterKernel,
};
use dcpinn_core::sensitivity::{compliance, compliance_gradient, displacement_constraint, displacement_gradient, volume_constraint};
use dcpinn_core::update::{oc_update, stopping_measure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DriverError, DriverResult};
use crate::library::{build, monitor_probe};
use crate::optimize::probe_dof;

pub const SUITES: [&str; 6] = ["all", "properties", "oracles", "gradients", "sensitivity", "pinn"];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `measured <= limit`.
    pub fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Check {
        Check { name: name.into(), measured, limit, pass: measured <= limit }
    }

    /// Passes when `measured == limit` bit for bit.
    pub fn exact(name: impl Into<String>, measured: f64, limit: f64) -> Check {
        Check { name: name.into(), measured, limit, pass: measured.to_bits() == limit.to_bits() }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Check {
        Check { name: name.into(), measured: if ok { 1.0 } else { 0.0 }, limit: 1.0, pass: ok }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<44} measured {:.3e}  limit {:.3e}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.measured, self.limit)
    }
}

pub fn run_suite(name: &str, seed: u64) -> DriverResult<Vec<Check>> {
    match name {
        "all" => {
            let mut v = properties()?;
            v.extend(oracles()?);
            v.extend(gradients(seed)?);
            v.extend(sensitivity(seed)?);
            Ok(v)
        }
        "properties" => properties(),
        "oracles" => oracles(),
        "gradients" => gradients(seed),
        "sensitivity" => sensitivity(seed),
        "pinn" => pinn(seed),
        other => Err(DriverError::Config(format!("unknown suite '{other}' (expected one of {})", SUITES.join(", ")))),
    }
}

fn strip(n: usize) -> Mesh {
    Mesh::new(2, [n as f64, 4.0, 0.0], [n, 4, 1], &[]).expect("strip mesh")
}

pub fn properties() -> DriverResult<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mesh = strip(20);
    let n = mesh.n_design();
    let kernel = FilterKernel::new(&mesh, 2.5)?;
    let ones = density_filter(&vec![1.0; n], &kernel);
    out.push(Check::at_most("properties/filter-partition-of-unity", ones.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max), 1e-14));

    let mut endpoint = 0.0f64;
    let mut monotone = true;
    for beta in [0.1, 1.0, 8.0, 24.0] {
        for theta in [0.001, 0.3, 0.5, 0.999] {
            endpoint = endpoint.max(heaviside(0.0, beta, theta).abs()).max((heaviside(1.0, beta, theta) - 1.0).abs());
            let xs: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
            monotone &= xs.windows(2).all(|w| heaviside(w[1], beta, theta) >= heaviside(w[0], beta, theta));
        }
    }
    out.push(Check::at_most("properties/heaviside-endpoints", endpoint, 1e-14));
    out.push(Check::flag("properties/heaviside-monotone", monotone));

    let volumes = vec![1.0; n];
    let mut vp = 0.0f64;
    for beta in [0.1, 1.6, 24.0] {
        let rho: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let filtered = density_filter(&rho, &kernel);
        let theta = volume_preserving_threshold(&filtered, beta, &volumes);
        let projected = project(&filtered, beta, theta);
        let rel = (projected.iter().sum::<f64>() - filtered.iter().sum::<f64>()).abs() / filtered.iter().sum::<f64>();
        vp = vp.max(rel);
    }
    out.push(Check::at_most("properties/volume-preserving-threshold", vp, 1e-8));

    let g0 = grayscale(&(0..n).map(|i| (i % 2) as f64).collect::<Vec<_>>())?;
    let g1 = grayscale(&vec![0.5; n])?;
    out.push(Check::at_most("properties/grayscale-binary-is-zero", g0, 0.0));
    out.push(Check::at_most("properties/grayscale-half-is-one", (g1 - 1.0).abs(), 1e-15));

    let target = 0.4;
    let rho = vec![target; n];
    let dfdx: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
    let dgdx = vec![1.0; n];
    let beta = 2.0;
    let constraint = |r: &[f64]| {
        let f = density_filter(r, &kernel);
        let t = volume_preserving_threshold(&f, beta, &volumes);
        volume_constraint(&project(&f, beta, t), &volumes, target).0
    };
    let step = oc_update(&rho, &dfdx, &dgdx, 0.2, 0.5, &constraint)?;
    out.push(Check::at_most("properties/oc-volume-feasibility", step.volume_constraint.abs(), 1e-6 * n as f64));
    let mut scale_diff = 0.0f64;
    for c in [0.125, 2.0, 1024.0] {
        let scaled: Vec<f64> = dfdx.iter().map(|d| c * d).collect();
        let other = oc_update(&rho, &scaled, &dgdx, 0.2, 0.5, &constraint)?;
        scale_diff = scale_diff.max(step.rho.iter().zip(&other.rho).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    out.push(Check::exact("properties/oc-scale-invariance", scale_diff, 0.0));

    let opt = OptConfig::default();
    let constant = vec![3.25; 2 * opt.stop_window + 3];
    let tau = stopping_measure(&constant, opt.stop_window).unwrap_or(f64::NAN);
    out.push(Check::exact("properties/stopping-zero-on-constant", tau, 0.0));
    Ok(out)
}

fn steel() -> Material {
    Material { youngs: 210.0, poisson: 0.3 }
}

fn linear_field(p: &[f64; 3], dim: usize) -> [f64; 3] {
    let a = [0.02, -0.01, 0.004];
    let b = [[0.002, -0.003, 0.001], [0.001, 0.0035, 0.0005], [-0.002, 0.001, 0.0025]];
    let mut u = [0.0; 3];
    for i in 0..dim {
        u[i] = a[i] + (0..dim).map(|k| b[i][k] * p[k]).sum::<f64>();
    }
    u
}

fn patch_error(dim: usize, counts: [usize; 3], extents: [f64; 3]) -> DriverResult<f64> {
    let m = Mesh::new(dim, extents, counts, &[])?;
    let mut fixed = Vec::new();
    for (n, p) in m.nodes.iter().enumerate() {
        if (0..dim).any(|a| p[a].abs() < 1e-12 || (p[a] - extents[a]).abs() < 1e-12) {
            let u = linear_field(p, dim);
            fixed.extend((0..dim).map(|c| (n * dim + c, u[c])));
        }
    }
    let sys = FemSystem::with_fixed(&m, &steel(), &fixed)?;
    let u = sys.solve_dense(&vec![1.0; m.n_elements()], &vec![0.0; m.n_dofs()])?;
    let gauss = m.gauss_points();
    let field = field_at_gauss(&m, &u, &gauss);
    let mut grad = [[0.0; 3]; 3];
    let u0 = linear_field(&[0.0; 3], dim);
    for k in 0..dim {
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let uk = linear_field(&e, dim);
        for i in 0..dim {
            grad[i][k] = uk[i] - u0[i];
        }
    }
    let (_, exact) = strain_and_solid_stress(&grad, dim, &steel());
    let scale = exact.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for p in 0..gauss.len() {
        let (_, s) = strain_and_solid_stress(&gradient_at(&field, p), dim, &steel());
        for i in 0..3 {
            for k in 0..3 {
                worst = worst.max((s[i][k] - exact[i][k]).abs() / scale);
            }
        }
    }
    Ok(worst)
}

fn small_cantilever(nx: usize, ny: usize) -> DriverResult<(Mesh, LoadCase)> {
    let (lx, ly) = (nx as f64 * 0.5, ny as f64 * 0.5);
    let m = Mesh::new(2, [lx, ly, 0.0], [nx, ny, 1], &[])?;
    let supports = vec![Support::clamped(Region::new([0.0; 3], [0.0, ly, 0.0]))];
    let t = Traction::from_total(&m, Region::new([lx, 0.0, 0.0], [lx, 0.5, 0.0]), [0.0, -1.0, 0.0])?;
    Ok((m, LoadCase { name: "v".into(), supports, tractions: vec![t], pseudo_load: None }))
}

pub fn oracles() -> DriverResult<Vec<Check>> {
    let mut out = Vec::new();
    out.push(Check::at_most("oracles/patch-test-2d", patch_error(2, [5, 3, 1], [2.5, 1.2, 0.0])?, 1e-10));
    out.push(Check::at_most("oracles/patch-test-3d", patch_error(3, [3, 3, 2], [1.5, 1.2, 0.8])?, 1e-10));
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut cg = 0.0f64;
    for (nx, ny) in [(8, 4), (9, 9)] {
        let (m, lc) = small_cantilever(nx, ny)?;
        let sys = FemSystem::new(&m, &steel(), &lc.supports)?;
        let f = load_vector(&m, &lc)?;
        let psi: Vec<f64> = (0..m.n_elements()).map(|_| rng.gen_range(0.01..1.0)).collect();
        let a = sys.solve(&psi, &f, None)?.u;
        let b = sys.solve_dense(&psi, &f)?;
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        cg = cg.max(num / den);
    }
    out.push(Check::at_most("oracles/cg-vs-dense", cg, 1e-8));
    let (m, lc) = small_cantilever(12, 6)?;
    let sys = FemSystem::new(&m, &steel(), &lc.supports)?;
    let f = load_vector(&m, &lc)?;
    let psi: Vec<f64> = (0..m.n_elements()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let u = sys.solve(&psi, &f, None)?.u;
    let half = 0.5 * sys.energy_norm(&psi, &u);
    let gauss = m.gauss_points();
    let e = internal_energy(&field_at_gauss(&m, &u, &gauss), &gauss, &psi, &steel(), m.n_elements())?;
    out.push(Check::at_most("oracles/energy-identity", (e.internal - half).abs() / half, 1e-10));
    Ok(out)
}

const BOX: [f64; 3] = [4.0, 2.0, 1.5];

fn probe_model(dim: usize, config: NetConfig, seed: u64) -> DriverResult<PinnModel> {
    let mesh = Mesh::new(dim, BOX, [4, 2, 2], &[])?;
    let top = if dim == 3 { BOX[2] } else { 0.0 };
    let hard = HardConstraint::new(&mesh, &[Support::clamped(Region::new([0.0; 3], [0.0, BOX[1], top]))])?;
    let mut m = PinnModel::new(seed, dim, BOX, hard, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in m.params.values.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    Ok(m)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..dim {
                p[a] = rng.gen_range(0.0..BOX[a]);
            }
            p
        })
        .collect()
}

fn random_loss(rng: &mut ChaCha8Rng, n_gauss: usize, n_work: usize) -> EnergyLoss {
    EnergyLoss {
        material: Material { youngs: 2.0, poisson: 0.3 },
        weights: (0..n_gauss).map(|_| rng.gen_range(0.1..1.0)).collect(),
        work: (0..n_work).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
    }
}

/// Worst relative error of parameter gradients against central differences.
pub fn parameter_gradient_error(mut m: PinnModel, subset: Subset, alpha: AlphaPolicy, probes: usize, seed: u64) -> DriverResult<f64> {
    use dcpinn_core::net::FieldLoss;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, 12, m.dim);
    let loss = random_loss(&mut rng, 10, 2);
    let prep = m.prepare(&pts);
    let (_, grad) = m.loss_gradient(&prep, subset, alpha, &loss)?;
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let candidates = m.params.indices(subset);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let orig = m.params.values[i];
        let h = 1e-5 * orig.abs().max(1.0);
        let at = |v: f64, m: &mut PinnModel| -> DriverResult<f64> {
            m.params.values[i] = v;
            Ok(loss.evaluate(&m.forward_with_jacobian(&prep, alpha)?)?.value)
        };
        let fp = at(orig + h, &mut m)?;
        let fm = at(orig - h, &mut m)?;
        m.params.values[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-6 * scale));
    }
    Ok(worst)
}

/// Worst relative error of the spatial Jacobian against central differences.
pub fn jacobian_error(m: &PinnModel, alpha: AlphaPolicy, n: usize, seed: u64) -> DriverResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(&mut rng, n, m.dim);
    let field = m.forward_with_jacobian(&m.prepare(&pts), alpha)?;
    let scale = field.jac.iter().flat_map(|j| j.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst = 0.0f64;
    for k in 0..m.dim {
        let h = 1e-6 * BOX[k];
        let shifted = |s: f64| -> Vec<[f64; 3]> {
            pts.iter()
                .map(|p| {
                    let mut q = *p;
                    q[k] += s;
                    q
                })
                .collect()
        };
        let up = m.forward_with_jacobian(&m.prepare(&shifted(h)), alpha)?.u;
        let dn = m.forward_with_jacobian(&m.prepare(&shifted(-h)), alpha)?.u;
        for p in 0..n {
            for i in 0..m.dim {
                let fd = (up[[p, i]] - dn[[p, i]]) / (2.0 * h);
                let ad = field.jac[k][[p, i]];
                worst = worst.max((fd - ad).abs() / ad.abs().max(fd.abs()).max(1e-3 * scale));
            }
        }
    }
    Ok(worst)
}

pub fn gradients(seed: u64) -> DriverResult<Vec<Check>> {
    let small = NetConfig { fourier_features: 16, hidden_width: 24, coef_width: 8, ..NetConfig::default() };
    let mut out = Vec::new();
    let m = probe_model(2, NetConfig::default(), seed)?;
    out.push(Check::at_most("gradients/backbone-parameters", parameter_gradient_error(m, Subset::Backbone, AlphaPolicy::Bypass, 500, seed + 1)?, 1e-4));
    let m = probe_model(2, NetConfig::default(), seed + 2)?;
    out.push(Check::at_most("gradients/composed-parameters", parameter_gradient_error(m, Subset::Both, AlphaPolicy::Evaluate, 500, seed + 3)?, 1e-4));
    let m = probe_model(3, small.clone(), seed + 4)?;
    out.push(Check::at_most("gradients/composed-parameters-3d", parameter_gradient_error(m, Subset::Both, AlphaPolicy::Evaluate, 200, seed + 5)?, 1e-4));
    let m = probe_model(2, NetConfig::default(), seed + 6)?;
    out.push(Check::at_most("gradients/backbone-jacobian", jacobian_error(&m, AlphaPolicy::Bypass, 40, seed + 7)?, 1e-6));
    out.push(Check::at_most("gradients/composed-jacobian", jacobian_error(&m, AlphaPolicy::Evaluate, 40, seed + 8)?, 1e-6));
    let m = probe_model(3, small, seed + 9)?;
    out.push(Check::at_most("gradients/composed-jacobian-3d", jacobian_error(&m, AlphaPolicy::Evaluate, 40, seed + 10)?, 1e-6));
    Ok(out)
}

pub fn sensitivity(seed: u64) -> DriverResult<Vec<Check>> {
    let (p, eta, beta, reference) = (3.0, 1e-6, 4.0, 0.5);
    let mesh = Mesh::new(2, [8.0, 4.0, 0.0], [8, 4, 1], &[])?;
    let supports = vec![Support::clamped(Region::new([0.0; 3], [0.0, 4.0, 0.0]))];
    let t = Traction::from_total(&mesh, Region::new([8.0, 0.0, 0.0], [8.0, 1.0, 0.0]), [0.0, -1.0, 0.0])?;
    let lc = LoadCase { name: "s".into(), supports: supports.clone(), tractions: vec![t], pseudo_load: None };
    let sys = FemSystem::new(&mesh, &steel(), &supports)?;
    let load = load_vector(&mesh, &lc)?;
    let probe = Probe { point: [8.0, 0.0, 0.0], direction: [0.0, -1.0, 0.0] };
    let kernel = FilterKernel::new(&mesh, 1.6)?;
    let n = mesh.n_design();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
    let rho: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
    let filtered = density_filter(&rho, &kernel);
    let theta = volume_preserving_threshold(&filtered, beta, &vec![1.0; n]);
    let eval = |r: &[f64]| -> DriverResult<(f64, f64, Vec<f64>, Vec<f64>)> {
        let phys = project(&density_filter(r, &kernel), beta, theta);
        let psi: Vec<f64> = phys.iter().map(|&x| interpolation_psi(x, p, eta)).collect();
        let u = sys.solve_dense(&psi, &load)?;
        let energies = sys.element_energies(&u, n);
        let fc = compliance(&energies, &phys, p, eta, reference);
        let gd = displacement_constraint(probe_value(&mesh, &probe, &u), 0.01, reference, n);
        Ok((fc, gd, u, phys))
    };
    let (_, _, u, phys) = eval(&rho)?;
    let psi: Vec<f64> = phys.iter().map(|&x| interpolation_psi(x, p, eta)).collect();
    let lam = sys.solve_dense(&psi, &probe_vector(&mesh, &probe))?;
    let dfc = chain_to_design(&compliance_gradient(&sys.element_energies(&u, n), &phys, p, eta, reference), &filtered, beta, theta, &kernel);
    let dgd = chain_to_design(&displacement_gradient(&sys.element_products(&lam, &u, n), &phys, p, eta, reference), &filtered, beta, theta, &kernel);
    let h = 1e-6;
    let (mut fd_c, mut fd_d) = (vec![0.0; n], vec![0.0; n]);
    for e in 0..n {
        let mut r = rho.clone();
        r[e] += h;
        let up = eval(&r)?;
        r[e] -= 2.0 * h;
        let dn = eval(&r)?;
        fd_c[e] = (up.0 - dn.0) / (2.0 * h);
        fd_d[e] = (up.1 - dn.1) / (2.0 * h);
    }
    let worst = |a: &[f64], f: &[f64]| {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(f).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6 * scale)).fold(0.0, f64::max)
    };
    Ok(vec![
        Check::at_most("sensitivity/compliance-vs-fd", worst(&dfc, &fd_c), 1e-3),
        Check::at_most("sensitivity/displacement-vs-fd", worst(&dgd, &fd_d), 1e-3),
    ])
}

/// Solid (ρ̃ ≡ 1) cantilever on the given mesh, with the library's loading.
pub fn solid_cantilever(counts: [usize; 3]) -> DriverResult<Problem> {
    build("cantilever2d", counts)
}

/// Trains a fresh governing model on the solid problem in backbone-only mode.
pub fn train_solid(problem: &Problem, epochs: usize, seed: u64) -> DriverResult<PinnModel> {
    let mesh = &problem.mesh;
    let lc = &problem.load_cases[0];
    let mut model = PinnModel::for_mesh(seed, mesh, &lc.supports, problem.net.clone())?;
    let psi = vec![1.0; mesh.n_elements()];
    let colloc = Collocation::new(mesh, &mesh.design, lc)?;
    let loss = EnergyLoss::new(&colloc, &psi, problem.material);
    train_model(&mut model, &colloc, &loss, TrainingMode::BackboneOnly { epochs, alpha: AlphaPolicy::Bypass }, problem.opt.adam)?;
    Ok(model)
}

pub fn pinn(seed: u64) -> DriverResult<Vec<Check>> {
    let problem = solid_cantilever([48, 16, 1])?;
    let started = Instant::now();
    let model = train_solid(&problem, problem.opt.epochs_backbone, seed)?;
    let seconds = started.elapsed().as_secs_f64();
    let mesh = &problem.mesh;
    let lc = &problem.load_cases[0];
    let sys = FemSystem::new(mesh, &problem.material, &lc.supports)?;
    let u_fe = sys.solve(&vec![1.0; mesh.n_elements()], &load_vector(mesh, lc)?, None)?.u;
    let u_pinn: Vec<f64> = model.predict(&mesh.nodes)?.u.iter().copied().collect();
    let free: Vec<bool> = sys.fixed.iter().map(|f| !f).collect();
    let m = error_metrics(&u_pinn, &u_fe, &free, probe_dof(mesh, &monitor_probe(&problem)));
    Ok(vec![
        Check::at_most("pinn/solid-cantilever-eps-norm-percent", m.norm.unwrap_or(f64::INFINITY), 4.0),
        Check::at_most("pinn/solid-cantilever-eps-dof-percent", m.dof.unwrap_or(f64::INFINITY), 3.0),
        Check::at_most("pinn/training-seconds", seconds, f64::INFINITY),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn property_and_oracle_suites_pass() {
        for c in properties().unwrap().into_iter().chain(oracles().unwrap()) {
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nonsense", 0).is_err());
    }

    #[test]
    fn check_formatting() {
        let c = Check::at_most("x", 2.0, 1.0);
        assert!(!c.pass);
        assert!(c.to_string().starts_with("FAIL x"));
        assert!(Check::exact("y", 0.0, 0.0).pass);
    }
}
