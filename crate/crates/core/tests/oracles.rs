use dcpinn_core::energy::{internal_energy, strain_and_solid_stress, gradient_at, Material};
use dcpinn_core::fem::{field_at_gauss, load_vector, FemSystem};
use dcpinn_core::mesh::{Mesh, Region};
use dcpinn_core::problem::{LoadCase, Support, Traction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat() -> Material {
    Material::new(210.0, 0.3).unwrap()
}

fn linear_field(p: &[f64; 3], dim: usize) -> [f64; 3] {
    let a = [0.01, -0.02, 0.005];
    let b = [[0.003, -0.001, 0.002], [0.0015, 0.004, -0.0005], [0.001, 0.002, -0.003]];
    let mut u = [0.0; 3];
    for i in 0..dim {
        u[i] = a[i] + (0..dim).map(|k| b[i][k] * p[k]).sum::<f64>();
    }
    u
}

fn patch(dim: usize, counts: [usize; 3], extents: [f64; 3]) -> f64 {
    let m = Mesh::new(dim, extents, counts, &[]).unwrap();
    let mut fixed = Vec::new();
    for (n, p) in m.nodes.iter().enumerate() {
        let on_boundary = (0..dim).any(|a| p[a].abs() < 1e-12 || (p[a] - extents[a]).abs() < 1e-12);
        if on_boundary {
            let u = linear_field(p, dim);
            for c in 0..dim {
                fixed.push((n * dim + c, u[c]));
            }
        }
    }
    let sys = FemSystem::with_fixed(&m, &mat(), &fixed).unwrap();
    let psi = vec![1.0; m.n_elements()];
    let u = sys.solve_dense(&psi, &vec![0.0; m.n_dofs()]).unwrap();
    let gauss = m.gauss_points();
    let field = field_at_gauss(&m, &u, &gauss);
    let exact_grad = {
        let o = [0.0; 3];
        let u0 = linear_field(&o, dim);
        let mut g = [[0.0; 3]; 3];
        for k in 0..dim {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let uk = linear_field(&e, dim);
            for i in 0..dim {
                g[i][k] = uk[i] - u0[i];
            }
        }
        g
    };
    let (_, s_exact) = strain_and_solid_stress(&exact_grad, dim, &mat());
    let scale = s_exact.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for p in 0..gauss.len() {
        let (_, s) = strain_and_solid_stress(&gradient_at(&field, p), dim, &mat());
        for i in 0..3 {
            for k in 0..3 {
                worst = worst.max((s[i][k] - s_exact[i][k]).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn patch_test_reproduces_uniform_stress() {
    assert!(patch(2, [4, 3, 1], [2.0, 1.5, 0.0]) <= 1e-10);
    assert!(patch(3, [3, 2, 3], [1.5, 1.0, 1.2]) <= 1e-10);
}

fn cantilever(nx: usize, ny: usize) -> (Mesh, LoadCase) {
    let (lx, ly) = (nx as f64 * 0.5, ny as f64 * 0.5);
    let m = Mesh::new(2, [lx, ly, 0.0], [nx, ny, 1], &[]).unwrap();
    let sup = vec![Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, ly, 0.0]))];
    let tr = Traction::from_total(&m, Region::new([lx, 0.0, 0.0], [lx, 0.5, 0.0]), [0.0, -1.0, 0.0]).unwrap();
    (m, LoadCase { name: "c".into(), supports: sup, tractions: vec![tr], pseudo_load: None })
}

#[test]
fn cg_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (nx, ny) in [(8, 4), (10, 8)] {
        let (m, lc) = cantilever(nx, ny);
        assert!(m.n_dofs() <= 200);
        let sys = FemSystem::new(&m, &mat(), &lc.supports).unwrap();
        let f = load_vector(&m, &lc).unwrap();
        let psi: Vec<f64> = (0..m.n_elements()).map(|_| rng.gen_range(0.01..1.0)).collect();
        let cg = sys.solve(&psi, &f, None).unwrap();
        let dense = sys.solve_dense(&psi, &f).unwrap();
        let num: f64 = cg.u.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = dense.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den <= 1e-8, "relative difference {}", num / den);
    }
}

#[test]
fn energy_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, lc) = cantilever(12, 6);
    let sys = FemSystem::new(&m, &mat(), &lc.supports).unwrap();
    let f = load_vector(&m, &lc).unwrap();
    let psi: Vec<f64> = (0..m.n_elements()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let u = sys.solve(&psi, &f, None).unwrap().u;
    let half_uku = 0.5 * sys.energy_norm(&psi, &u);
    let gauss = m.gauss_points();
    let field = field_at_gauss(&m, &u, &gauss);
    let e = internal_energy(&field, &gauss, &psi, &mat(), m.n_elements()).unwrap();
    assert!((e.internal - half_uku).abs() <= 1e-10 * half_uku);
    let per_element = sys.element_energies(&u, m.n_elements());
    for (a, b) in per_element.iter().zip(&e.solid) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-30) + 1e-18);
    }
}

#[test]
fn reciprocity_of_probe_and_load() {
    use dcpinn_core::fem::{probe_value, probe_vector};
    use dcpinn_core::problem::Probe;
    let (m, lc) = cantilever(10, 4);
    let sys = FemSystem::new(&m, &mat(), &lc.supports).unwrap();
    let psi = vec![0.7; m.n_elements()];
    let t = load_vector(&m, &lc).unwrap();
    let probe = Probe { point: [5.0, 0.0, 0.0], direction: [0.0, -1.0, 0.0] };
    let l = probe_vector(&m, &probe);
    let u = sys.solve_dense(&psi, &t).unwrap();
    let lam = sys.solve_dense(&psi, &l).unwrap();
    let lu = probe_value(&m, &probe, &u);
    let tl: f64 = t.iter().zip(&lam).map(|(a, b)| a * b).sum();
    assert!((lu - tl).abs() <= 1e-8 * lu.abs());
}
