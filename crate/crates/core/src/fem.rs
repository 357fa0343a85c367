//! Finite-element reference: Q4/H8 element stiffness from the same Gauss rule
//! and constitutive law as the PINN energy, matrix-free assembly, Jacobi-
//! preconditioned conjugate gradients, and PINN-vs-FEM error metrics.

use ndarray::Array2;

use crate::energy::{mixed_energy_density, Material, Tensor3};
use crate::error::{Error, Result};
use crate::mesh::{gauss_xi, GaussPoint, Mesh};
use crate::net::FieldEval;
use crate::problem::{LoadCase, Probe, Support};

/// Sign of local node `a` along axis `k` in the reference element.
fn node_sign(a: usize, k: usize) -> f64 {
    const S2: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    match k {
        0 | 1 => S2[a % 4][k],
        _ => {
            if a < 4 {
                -1.0
            } else {
                1.0
            }
        }
    }
}

/// Shape function values at parametric point `xi`.
pub fn shape_values(dim: usize, xi: &[f64; 3]) -> Vec<f64> {
    let npe = 1 << dim;
    (0..npe)
        .map(|a| (0..dim).map(|k| 0.5 * (1.0 + node_sign(a, k) * xi[k])).product())
        .collect()
}

/// Physical shape-function gradients `[a][k]` at parametric point `xi`.
pub fn shape_gradients(dim: usize, xi: &[f64; 3], h: &[f64; 3]) -> Vec<[f64; 3]> {
    let npe = 1 << dim;
    (0..npe)
        .map(|a| {
            let mut g = [0.0; 3];
            for k in 0..dim {
                let mut v = 0.5 * node_sign(a, k) * (2.0 / h[k]);
                for m in 0..dim {
                    if m != k {
                        v *= 0.5 * (1.0 + node_sign(a, m) * xi[m]);
                    }
                }
                g[k] = v;
            }
            g
        })
        .collect()
}

/// Solid element stiffness k⁰ (8×8 or 24×24), DOF order `node * dim + component`.
pub fn element_stiffness(material: &Material, dim: usize, h: &[f64; 3]) -> Array2<f64> {
    let npe = 1 << dim;
    let nd = npe * dim;
    let vol: f64 = (0..dim).map(|k| h[k]).product();
    let kappa = vol / npe as f64;
    let mut ke = Array2::zeros((nd, nd));
    for q in 0..npe {
        let grads = shape_gradients(dim, &gauss_xi(dim, q), h);
        let mode = |a: usize, i: usize| -> Tensor3 {
            let mut t = [[0.0; 3]; 3];
            t[i] = grads[a];
            t
        };
        for a in 0..npe {
            for i in 0..dim {
                let ga = mode(a, i);
                for b in 0..npe {
                    for j in 0..dim {
                        ke[[a * dim + i, b * dim + j]] += kappa * mixed_energy_density(&ga, &mode(b, j), dim, material);
                    }
                }
            }
        }
    }
    // exact symmetry
    for r in 0..nd {
        for c in 0..r {
            let s = 0.5 * (ke[[r, c]] + ke[[c, r]]);
            ke[[r, c]] = s;
            ke[[c, r]] = s;
        }
    }
    ke
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSolution {
    pub u: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Matrix-free system K(ψ) = Σ_e ψ_e k⁰ over non-hole elements, with fixed DOFs.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub dim: usize,
    pub n_dofs: usize,
    pub ke: Array2<f64>,
    elements: Vec<usize>,
    conn: Vec<usize>,
    npe: usize,
    pub fixed: Vec<bool>,
    pub fixed_values: Vec<f64>,
    /// CG iteration cap; defaults to 20·√(dofs).
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl FemSystem {
    pub fn new(mesh: &Mesh, material: &Material, supports: &[Support]) -> Result<FemSystem> {
        let mut fixed = Vec::new();
        for (n, p) in mesh.nodes.iter().enumerate() {
            for s in supports {
                if s.region.contains(mesh.dim, p) {
                    for c in 0..mesh.dim {
                        if s.fixed[c] {
                            fixed.push((n * mesh.dim + c, s.value[c]));
                        }
                    }
                }
            }
        }
        if fixed.is_empty() {
            return Err(Error::InvalidInput("no support region contains a mesh node".into()));
        }
        FemSystem::with_fixed(mesh, material, &fixed)
    }

    /// System with an explicit list of `(dof, value)` prescriptions.
    pub fn with_fixed(mesh: &Mesh, material: &Material, prescribed: &[(usize, f64)]) -> Result<FemSystem> {
        let dim = mesh.dim;
        let n_dofs = mesh.n_dofs();
        let npe = mesh.nodes_per_element();
        let elements: Vec<usize> = mesh.design.clone();
        let mut fixed = vec![false; n_dofs];
        let mut fixed_values = vec![0.0; n_dofs];
        for &(d, v) in prescribed {
            if d >= n_dofs {
                return Err(Error::InvalidInput(format!("prescribed dof {d} out of range")));
            }
            fixed[d] = true;
            fixed_values[d] = v;
        }
        // nodes touched only by hole elements carry no stiffness
        let mut attached = vec![false; mesh.nodes.len()];
        for &e in &elements {
            for &n in mesh.element_nodes(e) {
                attached[n] = true;
            }
        }
        for (n, &a) in attached.iter().enumerate() {
            if !a {
                for c in 0..dim {
                    fixed[n * dim + c] = true;
                    fixed_values[n * dim + c] = 0.0;
                }
            }
        }
        let max_iterations = (20.0 * (n_dofs as f64).sqrt()).ceil() as usize;
        Ok(FemSystem {
            dim,
            n_dofs,
            ke: element_stiffness(material, dim, &mesh.h),
            elements,
            conn: mesh.conn.clone(),
            npe,
            fixed,
            fixed_values,
            max_iterations,
            tolerance: 1e-8,
        })
    }

    fn element_dofs(&self, e: usize, out: &mut [usize]) {
        for (a, &n) in self.conn[e * self.npe..(e + 1) * self.npe].iter().enumerate() {
            for c in 0..self.dim {
                out[a * self.dim + c] = n * self.dim + c;
            }
        }
    }

    /// y = K(ψ) x over all DOFs (no boundary treatment). `psi` is indexed by element id.
    pub fn apply(&self, psi: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let nd = self.npe * self.dim;
        let mut dofs = vec![0usize; nd];
        let mut xe = vec![0.0; nd];
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            for (k, &d) in dofs.iter().enumerate() {
                xe[k] = x[d];
            }
            let s = psi[e];
            for r in 0..nd {
                let row = self.ke.row(r);
                let mut acc = 0.0;
                for (kv, xv) in row.iter().zip(&xe) {
                    acc += kv * xv;
                }
                y[dofs[r]] += s * acc;
            }
        }
    }

    fn diagonal(&self, psi: &[f64]) -> Vec<f64> {
        let nd = self.npe * self.dim;
        let mut dofs = vec![0usize; nd];
        let mut d = vec![0.0; self.n_dofs];
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            for (k, &g) in dofs.iter().enumerate() {
                d[g] += psi[e] * self.ke[[k, k]];
            }
        }
        d
    }

    /// Solves K(ψ)u = f on the free DOFs by Jacobi-preconditioned CG, starting from `x0` if given.
    pub fn solve(&self, psi: &[f64], f: &[f64], x0: Option<&[f64]>) -> Result<SystemSolution> {
        let n = self.n_dofs;
        let mut u: Vec<f64> = match x0 {
            Some(x) => x.to_vec(),
            None => vec![0.0; n],
        };
        for i in 0..n {
            if self.fixed[i] {
                u[i] = self.fixed_values[i];
            }
        }
        let mut ku = vec![0.0; n];
        self.apply(psi, &u, &mut ku);
        let mut r: Vec<f64> = (0..n).map(|i| if self.fixed[i] { 0.0 } else { f[i] - ku[i] }).collect();
        // reference norm: free part of f plus the lifting of prescribed values
        let mut lift_src = vec![0.0; n];
        for i in 0..n {
            if self.fixed[i] {
                lift_src[i] = self.fixed_values[i];
            }
        }
        let mut lift = vec![0.0; n];
        self.apply(psi, &lift_src, &mut lift);
        let bnorm = (0..n).filter(|&i| !self.fixed[i]).map(|i| (f[i] - lift[i]).powi(2)).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            let u0: Vec<f64> = (0..n).map(|i| if self.fixed[i] { self.fixed_values[i] } else { 0.0 }).collect();
            return Ok(SystemSolution { u: u0, residual: 0.0, iterations: 0 });
        }
        if norm(&r) > bnorm && x0.is_some() {
            return self.solve(psi, f, None);
        }
        let diag = self.diagonal(psi);
        let inv: Vec<f64> = (0..n).map(|i| if self.fixed[i] || diag[i] <= 0.0 { 0.0 } else { 1.0 / diag[i] }).collect();
        let mut z: Vec<f64> = (0..n).map(|i| inv[i] * r[i]).collect();
        let mut p = z.clone();
        let mut rz: f64 = dot(&r, &z);
        let mut kp = vec![0.0; n];
        let mut res = norm(&r) / bnorm;
        let mut it = 0;
        while res > self.tolerance {
            if it >= self.max_iterations {
                return Err(Error::NoConvergence { iterations: it, residual: res });
            }
            self.apply(psi, &p, &mut kp);
            for i in 0..n {
                if self.fixed[i] {
                    kp[i] = 0.0;
                }
            }
            let pkp = dot(&p, &kp);
            if !(pkp > 0.0) {
                return Err(Error::NoConvergence { iterations: it, residual: res });
            }
            let alpha = rz / pkp;
            for i in 0..n {
                u[i] += alpha * p[i];
                r[i] -= alpha * kp[i];
            }
            for i in 0..n {
                z[i] = inv[i] * r[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            it += 1;
            res = norm(&r) / bnorm;
        }
        // recompute the true residual
        self.apply(psi, &u, &mut ku);
        let true_res = (0..n).filter(|&i| !self.fixed[i]).map(|i| (f[i] - ku[i]).powi(2)).sum::<f64>().sqrt() / bnorm;
        Ok(SystemSolution { u, residual: true_res, iterations: it })
    }

    /// Dense K(ψ) restricted to free DOFs, with the free-DOF index list.
    pub fn dense_free(&self, psi: &[f64]) -> (Array2<f64>, Vec<usize>) {
        let free: Vec<usize> = (0..self.n_dofs).filter(|&i| !self.fixed[i]).collect();
        let mut pos = vec![usize::MAX; self.n_dofs];
        for (k, &i) in free.iter().enumerate() {
            pos[i] = k;
        }
        let nd = self.npe * self.dim;
        let mut dofs = vec![0usize; nd];
        let mut k = Array2::zeros((free.len(), free.len()));
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            for r in 0..nd {
                for c in 0..nd {
                    let (pr, pc) = (pos[dofs[r]], pos[dofs[c]]);
                    if pr != usize::MAX && pc != usize::MAX {
                        k[[pr, pc]] += psi[e] * self.ke[[r, c]];
                    }
                }
            }
        }
        (k, free)
    }

    /// Direct dense solve (small systems and test oracles).
    pub fn solve_dense(&self, psi: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let (k, free) = self.dense_free(psi);
        let mut lift_src = vec![0.0; self.n_dofs];
        for i in 0..self.n_dofs {
            if self.fixed[i] {
                lift_src[i] = self.fixed_values[i];
            }
        }
        let mut lift = vec![0.0; self.n_dofs];
        self.apply(psi, &lift_src, &mut lift);
        let b: Vec<f64> = free.iter().map(|&i| f[i] - lift[i]).collect();
        let x = lu_solve(k, b)?;
        let mut u = lift_src;
        for (k, &i) in free.iter().enumerate() {
            u[i] = x[k];
        }
        Ok(u)
    }

    /// Direct solve by banded Cholesky on the free DOFs in natural order.
    /// Returns `None` when the band would need more than `max_entries` values.
    pub fn solve_banded(&self, psi: &[f64], f: &[f64], max_entries: usize) -> Result<Option<Vec<f64>>> {
        let n = self.n_dofs;
        let mut pos = vec![usize::MAX; n];
        let mut m = 0;
        for i in 0..n {
            if !self.fixed[i] {
                pos[i] = m;
                m += 1;
            }
        }
        let nd = self.npe * self.dim;
        let mut dofs = vec![0usize; nd];
        let mut bw = 0;
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            let free: Vec<usize> = dofs.iter().map(|&d| pos[d]).filter(|&p| p != usize::MAX).collect();
            if let (Some(lo), Some(hi)) = (free.iter().min(), free.iter().max()) {
                bw = bw.max(hi - lo);
            }
        }
        let w = bw + 1;
        if m.saturating_mul(w) > max_entries {
            return Ok(None);
        }
        // band[i * w + k] holds K[i][i - k]
        let mut band = vec![0.0; m * w];
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            for r in 0..nd {
                let pr = pos[dofs[r]];
                if pr == usize::MAX {
                    continue;
                }
                for c in 0..nd {
                    let pc = pos[dofs[c]];
                    if pc != usize::MAX && pc <= pr {
                        band[pr * w + (pr - pc)] += psi[e] * self.ke[[r, c]];
                    }
                }
            }
        }
        for i in 0..m {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = band[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::InvalidInput("stiffness matrix is not positive definite".into()));
                    }
                    band[i * w] = s.sqrt();
                } else {
                    band[i * w + (i - j)] = s / band[j * w];
                }
            }
        }
        let mut lift_src = vec![0.0; n];
        for i in 0..n {
            if self.fixed[i] {
                lift_src[i] = self.fixed_values[i];
            }
        }
        let mut lift = vec![0.0; n];
        self.apply(psi, &lift_src, &mut lift);
        let mut x = vec![0.0; m];
        for i in 0..n {
            if pos[i] != usize::MAX {
                x[pos[i]] = f[i] - lift[i];
            }
        }
        for i in 0..m {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= band[i * w + (i - k)] * x[k];
            }
            x[i] = s / band[i * w];
        }
        for i in (0..m).rev() {
            let mut s = x[i];
            for k in i + 1..m.min(i + w) {
                s -= band[k * w + (k - i)] * x[k];
            }
            x[i] = s / band[i * w];
        }
        let mut u = lift_src;
        for i in 0..n {
            if pos[i] != usize::MAX {
                u[i] = x[pos[i]];
            }
        }
        Ok(Some(u))
    }

    /// ½ u_eᵀ k⁰ u_e per element id (zero for holes).
    pub fn element_energies(&self, u: &[f64], n_elements: usize) -> Vec<f64> {
        let half: Vec<f64> = self.element_products(u, u, n_elements);
        half.into_iter().map(|v| 0.5 * v).collect()
    }

    /// a_eᵀ k⁰ b_e per element id.
    pub fn element_products(&self, a: &[f64], b: &[f64], n_elements: usize) -> Vec<f64> {
        let nd = self.npe * self.dim;
        let mut dofs = vec![0usize; nd];
        let mut out = vec![0.0; n_elements];
        for &e in &self.elements {
            self.element_dofs(e, &mut dofs);
            let mut s = 0.0;
            for r in 0..nd {
                let mut acc = 0.0;
                for c in 0..nd {
                    acc += self.ke[[r, c]] * b[dofs[c]];
                }
                s += a[dofs[r]] * acc;
            }
            out[e] = s;
        }
        out
    }

    /// uᵀ K(ψ) u.
    pub fn energy_norm(&self, psi: &[f64], u: &[f64]) -> f64 {
        let mut ku = vec![0.0; u.len()];
        self.apply(psi, u, &mut ku);
        dot(u, &ku)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gaussian elimination with partial pivoting.
pub fn lu_solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        if a[[piv, col]] == 0.0 {
            return Err(Error::InvalidInput("singular matrix".into()));
        }
        if piv != col {
            for c in 0..n {
                a.swap([col, c], [piv, c]);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let m = a[[r, col]] / a[[col, col]];
            if m != 0.0 {
                for c in col..n {
                    a[[r, c]] -= m * a[[col, c]];
                }
                b[r] -= m * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[[r, c]] * x[c]).sum();
        x[r] = (b[r] - s) / a[[r, r]];
    }
    Ok(x)
}

/// Element containing `p` and the parametric coordinates of `p` in it.
fn locate(mesh: &Mesh, p: &[f64; 3]) -> (usize, [f64; 3]) {
    let mut ijk = [0usize; 3];
    let mut xi = [0.0; 3];
    for a in 0..mesh.dim {
        let t = (p[a] / mesh.h[a]).floor().clamp(0.0, (mesh.counts[a] - 1) as f64);
        ijk[a] = t as usize;
        let lo = t * mesh.h[a];
        xi[a] = 2.0 * (p[a] - lo) / mesh.h[a] - 1.0;
    }
    (mesh.element_at(ijk[0], ijk[1], ijk[2]), xi)
}

/// Consistent nodal load vector: traction integrals plus the unit pseudo-load
/// attached to the node nearest the probe.
pub fn load_vector(mesh: &Mesh, load: &LoadCase) -> Result<Vec<f64>> {
    let dim = mesh.dim;
    let mut f = vec![0.0; mesh.n_dofs()];
    for t in &load.tractions {
        for (p, w) in mesh.boundary_quadrature(&t.region)? {
            let (e, xi) = locate(mesh, &p);
            let n = shape_values(dim, &xi);
            for (a, &node) in mesh.element_nodes(e).iter().enumerate() {
                for c in 0..dim {
                    f[node * dim + c] += w * n[a] * t.traction[c];
                }
            }
        }
    }
    if let Some(probe) = &load.pseudo_load {
        let l = probe_vector(mesh, probe);
        for (fi, li) in f.iter_mut().zip(l) {
            *fi += li;
        }
    }
    Ok(f)
}

/// One-hot extraction vector L for a probe (nearest node, probe direction).
pub fn probe_vector(mesh: &Mesh, probe: &Probe) -> Vec<f64> {
    let mut l = vec![0.0; mesh.n_dofs()];
    let node = mesh.nearest_node(&probe.point);
    for c in 0..mesh.dim {
        l[node * mesh.dim + c] = probe.direction[c];
    }
    l
}

pub fn probe_value(mesh: &Mesh, probe: &Probe, u: &[f64]) -> f64 {
    let node = mesh.nearest_node(&probe.point);
    (0..mesh.dim).map(|c| probe.direction[c] * u[node * mesh.dim + c]).sum()
}

/// FEM displacement and gradient evaluated at Gauss points, as a field evaluation.
pub fn field_at_gauss(mesh: &Mesh, u: &[f64], gauss: &[GaussPoint]) -> FieldEval {
    let dim = mesh.dim;
    let n = gauss.len();
    let mut uu = Array2::zeros((n, dim));
    let mut jac = vec![Array2::zeros((n, dim)); dim];
    for (p, g) in gauss.iter().enumerate() {
        let origin = mesh.element_origin(g.element);
        let mut xi = [0.0; 3];
        for a in 0..dim {
            xi[a] = 2.0 * (g.coords[a] - origin[a]) / mesh.h[a] - 1.0;
        }
        let nv = shape_values(dim, &xi);
        let ng = shape_gradients(dim, &xi, &mesh.h);
        for (a, &node) in mesh.element_nodes(g.element).iter().enumerate() {
            for i in 0..dim {
                let ui = u[node * dim + i];
                uu[[p, i]] += nv[a] * ui;
                for (k, jk) in jac.iter_mut().enumerate() {
                    jk[[p, i]] += ng[a][k] * ui;
                }
            }
        }
    }
    FieldEval { u: uu, jac }
}

/// Relative errors in percent: at the probe DOF and as a norm over free DOFs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub dof: Option<f64>,
    pub norm: Option<f64>,
}

pub fn error_metrics(u_pinn: &[f64], u_fe: &[f64], free: &[bool], probe_dof: Option<(usize, f64)>) -> ErrorMetrics {
    let dof = probe_dof.and_then(|(d, sign)| {
        let fe = sign * u_fe[d];
        let pi = sign * u_pinn[d];
        if fe.abs() < 1e-14 {
            None
        } else {
            Some((pi - fe).abs() / fe.abs() * 100.0)
        }
    });
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..u_fe.len() {
        if free[i] {
            num += (u_pinn[i] - u_fe[i]).powi(2);
            den += u_fe[i].powi(2);
        }
    }
    let norm = if den.sqrt() < 1e-14 { None } else { Some((num / den).sqrt() * 100.0) };
    ErrorMetrics { dof, norm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Region;
    use crate::problem::Traction;

    fn mat() -> Material {
        Material::new(210.0, 0.3).unwrap()
    }

    #[test]
    fn stiffness_symmetry_and_rigid_modes() {
        for dim in [2, 3] {
            let h = [0.5, 0.25, 0.4];
            let ke = element_stiffness(&mat(), dim, &h);
            let nd = ke.nrows();
            let scale = ke.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for r in 0..nd {
                for c in 0..nd {
                    assert_eq!(ke[[r, c]], ke[[c, r]]);
                }
            }
            for c in 0..dim {
                let v: Vec<f64> = (0..nd).map(|k| if k % dim == c { 1.0 } else { 0.0 }).collect();
                for r in 0..nd {
                    let kv: f64 = (0..nd).map(|k| ke[[r, k]] * v[k]).sum();
                    assert!(kv.abs() < 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn zero_load_gives_zero_field() {
        let m = Mesh::new(2, [4.0, 1.0, 0.0], [8, 2, 1], &[]).unwrap();
        let s = FemSystem::new(&m, &mat(), &[Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 1.0, 0.0]))]).unwrap();
        let sol = s.solve(&vec![1.0; m.n_elements()], &vec![0.0; m.n_dofs()], None).unwrap();
        assert!(sol.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bar_under_end_traction() {
        // rollers on the left edge, pinned corner: uniaxial stress state is exact
        let (l, hgt) = (10.0, 1.0);
        let m = Mesh::new(2, [l, hgt, 0.0], [40, 4, 1], &[]).unwrap();
        let left = Region::new([0.0, 0.0, 0.0], [0.0, hgt, 0.0]);
        let corner = Region::new([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]);
        let sup = vec![
            Support { region: left, fixed: [true, false, false], value: [0.0; 3] },
            Support { region: corner, fixed: [false, true, false], value: [0.0; 3] },
        ];
        let force = 3.0;
        let right = Region::new([l, 0.0, 0.0], [l, hgt, 0.0]);
        let lc = LoadCase {
            name: "bar".into(),
            supports: sup.clone(),
            tractions: vec![Traction::from_total(&m, right, [force, 0.0, 0.0]).unwrap()],
            pseudo_load: None,
        };
        let s = FemSystem::new(&m, &mat(), &sup).unwrap();
        let f = load_vector(&m, &lc).unwrap();
        let sol = s.solve(&vec![1.0; m.n_elements()], &f, None).unwrap();
        let tip = m.nearest_node(&[l, 0.5, 0.0]);
        let nu = 0.3;
        let exact = force * l * (1.0 - nu * nu) / (210.0 * hgt);
        assert!(((sol.u[tip * 2] - exact) / exact).abs() < 0.02);
        // doubling every ψ halves u
        let sol2 = s.solve(&vec![2.0; m.n_elements()], &f, None).unwrap();
        for (a, b) in sol.u.iter().zip(&sol2.u) {
            assert!((a - 2.0 * b).abs() <= 1e-7 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn poor_warm_start_falls_back_to_cold() {
        let m = Mesh::new(2, [6.0, 2.0, 0.0], [12, 4, 1], &[]).unwrap();
        let sup = vec![Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 2.0, 0.0]))];
        let s = FemSystem::new(&m, &mat(), &sup).unwrap();
        let lc = LoadCase { name: "w".into(), supports: sup, tractions: vec![Traction::from_total(&m, Region::new([6.0, 0.0, 0.0], [6.0, 2.0, 0.0]), [0.0, -1.0, 0.0]).unwrap()], pseudo_load: None };
        let f = load_vector(&m, &lc).unwrap();
        let psi: Vec<f64> = (0..m.n_elements()).map(|e| if e % 3 == 0 { 1e-6 } else { 1.0 }).collect();
        let cold = s.solve(&psi, &f, None).unwrap();
        let junk: Vec<f64> = (0..m.n_dofs()).map(|i| 1e3 * ((i * 7 % 5) as f64 - 2.0)).collect();
        let warm = s.solve(&psi, &f, Some(&junk)).unwrap();
        assert_eq!(warm.iterations, cold.iterations);
        assert_eq!(warm.u, cold.u);
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let m = Mesh::new(2, [6.0, 2.0, 0.0], [12, 4, 1], &[]).unwrap();
        let sup = vec![Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 2.0, 0.0]))];
        let s = FemSystem::new(&m, &mat(), &sup).unwrap();
        let lc = LoadCase { name: "w".into(), supports: sup, tractions: vec![Traction::from_total(&m, Region::new([6.0, 0.0, 0.0], [6.0, 2.0, 0.0]), [0.0, -1.0, 0.0]).unwrap()], pseudo_load: None };
        let f = load_vector(&m, &lc).unwrap();
        for (contrast, tol) in [(1.0, 1e-11), (1e-6, 1e-7)] {
            let psi: Vec<f64> = (0..m.n_elements()).map(|e| if e % 3 == 0 { contrast } else { 1.0 }).collect();
            let dense = s.solve_dense(&psi, &f).unwrap();
            let banded = s.solve_banded(&psi, &f, usize::MAX).unwrap().unwrap();
            let scale = dense.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in dense.iter().zip(&banded) {
                assert!((a - b).abs() <= tol * scale);
            }
        }
        let psi = vec![1.0; m.n_elements()];
        assert!(s.solve_banded(&psi, &f, 10).unwrap().is_none());
    }

    #[test]
    fn shape_functions_partition_unity() {
        for dim in [2, 3] {
            let xi = [0.3, -0.7, 0.1];
            let n = shape_values(dim, &xi);
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            let g = shape_gradients(dim, &xi, &[1.0, 2.0, 0.5]);
            for k in 0..dim {
                assert!(g.iter().map(|x| x[k]).sum::<f64>().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn error_metric_examples() {
        let fe = vec![0.0, 1.0, -2.0, 0.5];
        let free = vec![false, true, true, true];
        let same = error_metrics(&fe, &fe, &free, Some((2, -1.0)));
        assert_eq!(same.dof, Some(0.0));
        assert_eq!(same.norm, Some(0.0));
        let scaled: Vec<f64> = fe.iter().map(|x| 1.03 * x).collect();
        let e = error_metrics(&scaled, &fe, &free, Some((1, 1.0)));
        assert!((e.dof.unwrap() - 3.0).abs() < 1e-12);
        assert!((e.norm.unwrap() - 3.0).abs() < 1e-12);
        let zero = error_metrics(&fe, &[0.0; 4], &free, Some((1, 1.0)));
        assert_eq!(zero.dof, None);
        assert_eq!(zero.norm, None);
    }
}
