use dcpinn_core::energy::{interpolation_psi, Material};
use dcpinn_core::fem::{load_vector, probe_value, probe_vector, FemSystem};
use dcpinn_core::mesh::{Mesh, Region};
use dcpinn_core::problem::{LoadCase, Probe, Support, Traction};
use dcpinn_core::regularization::{chain_to_design, density_filter, project, volume_preserving_threshold, FilterKernel};
use dcpinn_core::sensitivity::{compliance, compliance_gradient, displacement_constraint, displacement_gradient};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: f64 = 3.0;
const ETA: f64 = 1e-6;
const BETA: f64 = 4.0;

struct Setup {
    mesh: Mesh,
    sys: FemSystem,
    load: Vec<f64>,
    probe: Probe,
    kernel: FilterKernel,
    theta: f64,
}

fn setup(rho: &[f64]) -> Setup {
    let mesh = Mesh::new(2, [8.0, 4.0, 0.0], [8, 4, 1], &[]).unwrap();
    let sup = vec![Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 4.0, 0.0]))];
    let tr = Traction::from_total(&mesh, Region::new([8.0, 0.0, 0.0], [8.0, 1.0, 0.0]), [0.0, -1.0, 0.0]).unwrap();
    let lc = LoadCase { name: "s".into(), supports: sup.clone(), tractions: vec![tr], pseudo_load: None };
    let sys = FemSystem::new(&mesh, &Material::new(210.0, 0.3).unwrap(), &sup).unwrap();
    let load = load_vector(&mesh, &lc).unwrap();
    let kernel = FilterKernel::new(&mesh, 1.6).unwrap();
    let filtered = density_filter(rho, &kernel);
    let theta = volume_preserving_threshold(&filtered, BETA, &vec![1.0; rho.len()]);
    let probe = Probe { point: [8.0, 0.0, 0.0], direction: [0.0, -1.0, 0.0] };
    Setup { mesh, sys, load, probe, kernel, theta }
}

fn psi_of(physical: &[f64]) -> Vec<f64> {
    physical.iter().map(|&r| interpolation_psi(r, P, ETA)).collect()
}

/// (f_c, g_d) through filter → projection (θ fixed) → dense solve.
fn evaluate(s: &Setup, rho: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let physical = project(&density_filter(rho, &s.kernel), BETA, s.theta);
    let psi = psi_of(&physical);
    let u = s.sys.solve_dense(&psi, &s.load).unwrap();
    let u0 = s.sys.element_energies(&u, s.mesh.n_elements());
    let fc = compliance(&u0, &physical, P, ETA, 0.37);
    let gd = displacement_constraint(probe_value(&s.mesh, &s.probe, &u), 0.01, 0.37, rho.len());
    (fc, gd, u, physical)
}

fn check(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn pipeline_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rho: Vec<f64> = (0..32).map(|_| rng.gen_range(0.2..0.8)).collect();
    let s = setup(&rho);
    let (_, _, u, physical) = evaluate(&s, &rho);
    let filtered = density_filter(&rho, &s.kernel);
    let psi = psi_of(&physical);
    let u0 = s.sys.element_energies(&u, s.mesh.n_elements());
    let lam = s.sys.solve_dense(&psi, &probe_vector(&s.mesh, &s.probe)).unwrap();
    let b = s.sys.element_products(&lam, &u, s.mesh.n_elements());
    let dfc = chain_to_design(&compliance_gradient(&u0, &physical, P, ETA, 0.37), &filtered, BETA, s.theta, &s.kernel);
    let dgd = chain_to_design(&displacement_gradient(&b, &physical, P, ETA, 0.37), &filtered, BETA, s.theta, &s.kernel);

    let h = 1e-6;
    let mut fd_c = vec![0.0; 32];
    let mut fd_d = vec![0.0; 32];
    for e in 0..32 {
        let mut r = rho.clone();
        r[e] += h;
        let (cp, dp, _, _) = evaluate(&s, &r);
        r[e] -= 2.0 * h;
        let (cm, dm, _, _) = evaluate(&s, &r);
        fd_c[e] = (cp - cm) / (2.0 * h);
        fd_d[e] = (dp - dm) / (2.0 * h);
    }
    let ec = check(&dfc, &fd_c);
    let ed = check(&dgd, &fd_d);
    assert!(ec <= 1e-3);
    assert!(ed <= 1e-3);
}

#[test]
fn mixed_energy_is_symmetric() {
    let rho = vec![0.5; 32];
    let s = setup(&rho);
    let psi = vec![1.0; 32];
    let u = s.sys.solve_dense(&psi, &s.load).unwrap();
    let lam = s.sys.solve_dense(&psi, &probe_vector(&s.mesh, &s.probe)).unwrap();
    let a = s.sys.element_products(&lam, &u, 32);
    let b = s.sys.element_products(&u, &lam, 32);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * scale);
    }
}
