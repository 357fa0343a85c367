//! Density filter, Heaviside projection, active sampling and the chain rule
//! from physical back to design densities.
//!
//! All fields here are indexed by design element (see [`Mesh::design`]).

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::problem::OptConfig;

/// Stabilizer for the ρ_i division in the sensitivity filter.
pub const SENSITIVITY_GAMMA: f64 = 1e-3;
pub const THETA_MIN: f64 = 0.001;
pub const THETA_MAX: f64 = 0.999;

/// Linear-hat filter weights `max(0, r - ‖x_j - x_i‖)` in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub radius: f64,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub sums: Vec<f64>,
}

impl FilterKernel {
    /// `radius` in metres.
    pub fn new(mesh: &Mesh, radius: f64) -> Result<FilterKernel> {
        if !(radius > 0.0) {
            return Err(Error::InvalidInput(format!("filter radius {radius} must be positive")));
        }
        let dim = mesh.dim;
        let mut reach = [0i64; 3];
        for a in 0..dim {
            reach[a] = (radius / mesh.h[a]).ceil() as i64;
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        let mut sums = Vec::with_capacity(mesh.n_design());
        for &e in &mesh.design {
            let ijk = mesh.element_ijk(e);
            let ci = mesh.centers[e];
            let mut sum = 0.0;
            for dk in -reach[2]..=reach[2] {
                for dj in -reach[1]..=reach[1] {
                    for di in -reach[0]..=reach[0] {
                        let ii = ijk[0] as i64 + di;
                        let jj = ijk[1] as i64 + dj;
                        let kk = ijk[2] as i64 + dk;
                        if ii < 0 || jj < 0 || kk < 0 {
                            continue;
                        }
                        let (ii, jj, kk) = (ii as usize, jj as usize, kk as usize);
                        if ii >= mesh.counts[0] || jj >= mesh.counts[1] || (dim == 3 && kk >= mesh.counts[2]) || (dim == 2 && kk > 0) {
                            continue;
                        }
                        let f = mesh.element_at(ii, jj, kk);
                        let Some(fd) = mesh.design_index[f] else { continue };
                        let cf = mesh.centers[f];
                        let d = (0..dim).map(|a| (cf[a] - ci[a]).powi(2)).sum::<f64>().sqrt();
                        let w = radius - d;
                        if w > 0.0 {
                            neighbors.push(fd);
                            weights.push(w);
                            sum += w;
                        }
                    }
                }
            }
            offsets.push(neighbors.len());
            sums.push(sum);
        }
        Ok(FilterKernel { radius, offsets, neighbors, weights, sums })
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.neighbors[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }
}

pub fn density_filter(rho: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    (0..kernel.len())
        .map(|i| kernel.row(i).map(|(j, w)| w * rho[j]).sum::<f64>() / kernel.sums[i])
        .collect()
}

fn projection_denominator(beta: f64, theta: f64) -> f64 {
    (beta * theta).tanh() + (beta * (1.0 - theta)).tanh()
}

/// Smoothed Heaviside projection of one filtered density.
pub fn heaviside(x: f64, beta: f64, theta: f64) -> f64 {
    ((beta * theta).tanh() + (beta * (x - theta)).tanh()) / projection_denominator(beta, theta)
}

/// ∂ρ̃/∂ρᶠ of [`heaviside`].
pub fn heaviside_derivative(x: f64, beta: f64, theta: f64) -> f64 {
    let t = (beta * (x - theta)).tanh();
    beta * (1.0 - t * t) / projection_denominator(beta, theta)
}

pub fn project(filtered: &[f64], beta: f64, theta: f64) -> Vec<f64> {
    filtered.iter().map(|&x| heaviside(x, beta, theta)).collect()
}

/// Threshold θ_h ∈ [0.001, 0.999] at which the projected volume equals the
/// filtered volume, found by bisection (projected volume decreases in θ_h).
pub fn volume_preserving_threshold(filtered: &[f64], beta: f64, volumes: &[f64]) -> f64 {
    let target: f64 = filtered.iter().zip(volumes).map(|(x, v)| x * v).sum();
    let projected = |theta: f64| -> f64 { filtered.iter().zip(volumes).map(|(&x, v)| v * heaviside(x, beta, theta)).sum() };
    let tol = 1e-10 * target.abs().max(f64::MIN_POSITIVE);
    if (projected(0.5) - target).abs() <= tol {
        return 0.5;
    }
    let (mut lo, mut hi) = (THETA_MIN, THETA_MAX);
    if projected(lo) < target {
        return lo;
    }
    if projected(hi) > target {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = projected(mid) - target;
        if f.abs() <= tol {
            return mid;
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * 4.0 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// β for a 1-based cycle: doubled every `beta_period` cycles, capped.
pub fn beta_schedule(cycle: usize, opt: &OptConfig) -> f64 {
    let doublings = (cycle.max(1) - 1) / opt.beta_period.max(1);
    (opt.beta_start * 2f64.powi(doublings.min(1000) as i32)).min(opt.beta_max)
}

/// Design densities and the filter → projection state derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignField {
    pub rho: Vec<f64>,
    pub filtered: Vec<f64>,
    pub physical: Vec<f64>,
    pub beta: f64,
    pub theta: f64,
}

impl DesignField {
    pub fn new(rho: Vec<f64>, kernel: &FilterKernel, beta: f64, volumes: &[f64]) -> DesignField {
        let filtered = density_filter(&rho, kernel);
        let theta = volume_preserving_threshold(&filtered, beta, volumes);
        let physical = project(&filtered, beta, theta);
        DesignField { rho, filtered, physical, beta, theta }
    }

    /// Physical densities for `rho` with this field's β and θ_h held fixed.
    pub fn physical_for(&self, rho: &[f64], kernel: &FilterKernel) -> Vec<f64> {
        project(&density_filter(rho, kernel), self.beta, self.theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    /// Design indices with ρ̃ > τ.
    pub design: Vec<usize>,
    /// Corresponding element ids.
    pub elements: Vec<usize>,
    pub ratio: f64,
}

pub fn active_collocations(physical: &[f64], tau: f64, mesh: &Mesh) -> Result<ActiveSet> {
    let design: Vec<usize> = (0..physical.len()).filter(|&i| physical[i] > tau).collect();
    if design.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let elements = design.iter().map(|&i| mesh.design[i]).collect();
    let ratio = design.len() as f64 / physical.len() as f64;
    Ok(ActiveSet { design, elements, ratio })
}

/// Density-weighted sensitivity smoothing with ρ_i stabilized by γ.
pub fn sensitivity_filter(grad: &[f64], rho: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    (0..kernel.len())
        .map(|i| {
            let s: f64 = kernel.row(i).map(|(j, w)| w * rho[j] * grad[j]).sum();
            s / (rho[i].max(SENSITIVITY_GAMMA) * kernel.sums[i])
        })
        .collect()
}

/// Chain rule ∂(·)/∂ρ_e = Σ_i ∂(·)/∂ρ̃_i · ∂ρ̃_i/∂ρᶠ_i · w_i(x_e)/Σ_j w_i(x_j).
pub fn chain_to_design(grad_physical: &[f64], filtered: &[f64], beta: f64, theta: f64, kernel: &FilterKernel) -> Vec<f64> {
    let mut out = vec![0.0; grad_physical.len()];
    for i in 0..kernel.len() {
        let gi = grad_physical[i] * heaviside_derivative(filtered[i], beta, theta) / kernel.sums[i];
        for (e, w) in kernel.row(i) {
            out[e] += gi * w;
        }
    }
    out
}

/// Transpose of the density filter: ∂(·)/∂ρ_e = Σ_i ∂(·)/∂ρᶠ_i · w_i(x_e)/Σ_j w_i(x_j).
pub fn filter_adjoint(grad_filtered: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    let mut out = vec![0.0; grad_filtered.len()];
    for i in 0..kernel.len() {
        let gi = grad_filtered[i] / kernel.sums[i];
        for (e, w) in kernel.row(i) {
            out[e] += gi * w;
        }
    }
    out
}

/// ∂ρ̃/∂θ_h of [`heaviside`].
pub fn heaviside_theta_derivative(x: f64, beta: f64, theta: f64) -> f64 {
    let sech2 = |v: f64| 1.0 - v.tanh().powi(2);
    let num = (beta * theta).tanh() + (beta * (x - theta)).tanh();
    let den = projection_denominator(beta, theta);
    let dnum = beta * (sech2(beta * theta) - sech2(beta * (x - theta)));
    let dden = beta * (sech2(beta * theta) - sech2(beta * (1.0 - theta)));
    (dnum * den - num * dden) / (den * den)
}

/// Chain rule like [`chain_to_design`] but also differentiating the
/// volume-preserving threshold θ_h(ρᶠ). At a clamped threshold the two agree.
pub fn chain_to_design_adaptive(
    grad_physical: &[f64],
    filtered: &[f64],
    beta: f64,
    theta: f64,
    volumes: &[f64],
    kernel: &FilterKernel,
) -> Vec<f64> {
    let n = grad_physical.len();
    let dh: Vec<f64> = filtered.iter().map(|&x| heaviside_derivative(x, beta, theta)).collect();
    let mut g_filtered: Vec<f64> = (0..n).map(|i| grad_physical[i] * dh[i]).collect();
    if theta > THETA_MIN && theta < THETA_MAX {
        let dtheta: Vec<f64> = filtered.iter().map(|&x| heaviside_theta_derivative(x, beta, theta)).collect();
        let denom: f64 = (0..n).map(|i| volumes[i] * dtheta[i]).sum();
        if denom != 0.0 {
            let g_theta: f64 = (0..n).map(|i| grad_physical[i] * dtheta[i]).sum();
            for j in 0..n {
                g_filtered[j] += g_theta * volumes[j] * (1.0 - dh[j]) / denom;
            }
        }
    }
    filter_adjoint(&g_filtered, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(nx: usize, ny: usize) -> Mesh {
        Mesh::new(2, [nx as f64, ny as f64, 0.0], [nx, ny, 1], &[]).unwrap()
    }

    #[test]
    fn uniform_field_is_preserved() {
        let m = grid(10, 6);
        let k = FilterKernel::new(&m, 2.5).unwrap();
        let f = density_filter(&vec![0.37; m.n_design()], &k);
        assert!(f.iter().all(|x| (x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn small_radius_is_identity() {
        let m = grid(5, 4);
        let k = FilterKernel::new(&m, 1.0).unwrap();
        let rho: Vec<f64> = (0..m.n_design()).map(|i| (i as f64 * 0.37).fract()).collect();
        assert_eq!(density_filter(&rho, &k), rho);
        let g: Vec<f64> = (0..m.n_design()).map(|i| -(i as f64)).collect();
        let sf = sensitivity_filter(&g, &rho.iter().map(|r| r.max(0.01)).collect::<Vec<_>>(), &k);
        for (a, b) in sf.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_spike_center_value() {
        let m = grid(11, 11);
        let r = 2.5;
        let k = FilterKernel::new(&m, r).unwrap();
        let center = m.design_index[m.element_at(5, 5, 0)].unwrap();
        let mut rho = vec![0.0; m.n_design()];
        rho[center] = 1.0;
        let f = density_filter(&rho, &k);
        let mut neighbor_weights = 0.0;
        for di in -3i32..=3 {
            for dj in -3i32..=3 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let d = ((di * di + dj * dj) as f64).sqrt();
                neighbor_weights += (r - d).max(0.0);
            }
        }
        assert!((f[center] - r / (r + neighbor_weights)).abs() < 1e-14);
    }

    #[test]
    fn kernel_weights_are_symmetric() {
        let hole = crate::mesh::Hole::Circle { center: [4.0, 3.0, 0.0], radius: 1.2, axis: 2 };
        let m = Mesh::new(2, [8.0, 6.0, 0.0], [8, 6, 1], &[hole]).unwrap();
        let k = FilterKernel::new(&m, 2.2).unwrap();
        for i in 0..k.len() {
            for (j, w) in k.row(i) {
                let back = k.row(j).find(|(x, _)| *x == i).map(|(_, w)| w).unwrap();
                assert_eq!(w, back);
            }
            assert_eq!(k.row(i).find(|(j, _)| *j == i).unwrap().1, 2.2);
        }
    }

    #[test]
    fn heaviside_examples() {
        assert!(heaviside(0.0, 8.0, 0.3).abs() < 1e-15);
        assert!((heaviside(1.0, 8.0, 0.3) - 1.0).abs() < 1e-15);
        assert!((heaviside(0.5, 3.0, 0.5) - 0.5).abs() < 1e-15);
        let expect = (4f64.tanh() + 0.8f64.tanh()) / (2.0 * 4f64.tanh());
        assert!((heaviside(0.6, 8.0, 0.5) - expect).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let v = vec![1.0; 6];
        assert_eq!(volume_preserving_threshold(&[0.5; 6], 4.0, &v), 0.5);
        assert_eq!(volume_preserving_threshold(&[0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 16.0, &v), 0.5);
        let field = [0.05, 0.2, 0.33, 0.41, 0.72, 0.9];
        let t = volume_preserving_threshold(&field, 2.0, &v);
        let proj: f64 = project(&field, 2.0, t).iter().sum();
        let filt: f64 = field.iter().sum();
        assert!(((proj - filt) / filt).abs() <= 1e-8);
    }

    #[test]
    fn beta_schedule_examples() {
        let opt = OptConfig::default();
        for c in 1..=5 {
            assert_eq!(beta_schedule(c, &opt), 0.1);
        }
        assert_eq!(beta_schedule(6, &opt), 0.2);
        assert_eq!(beta_schedule(41, &opt), 24.0);
        assert!((beta_schedule(36, &opt) - 12.8).abs() < 1e-12);
    }

    #[test]
    fn active_set_examples() {
        let m = grid(4, 2);
        let all = active_collocations(&[0.4; 8], 1e-3, &m).unwrap();
        assert_eq!(all.ratio, 1.0);
        assert!(active_collocations(&[0.0; 8], 1e-3, &m).is_err());
    }

    #[test]
    fn sensitivity_filter_three_elements() {
        let m = Mesh::new(2, [3.0, 1.0, 0.0], [3, 1, 1], &[]).unwrap();
        let k = FilterKernel::new(&m, 1.5).unwrap();
        let rho = [0.2, 0.6, 0.9];
        let g = [-1.0, -2.0, -4.0];
        let out = sensitivity_filter(&g, &rho, &k);
        // weights: self 1.5, neighbour at distance 1 -> 0.5
        let e0 = (1.5 * 0.2 * -1.0 + 0.5 * 0.6 * -2.0) / (0.2 * 2.0);
        let e1 = (0.5 * 0.2 * -1.0 + 1.5 * 0.6 * -2.0 + 0.5 * 0.9 * -4.0) / (0.6 * 2.5);
        let e2 = (0.5 * 0.6 * -2.0 + 1.5 * 0.9 * -4.0) / (0.9 * 2.0);
        for (a, b) in out.iter().zip([e0, e1, e2]) {
            assert!((a - b).abs() < 1e-14);
        }
        let uni = sensitivity_filter(&[-3.0; 3], &[0.5; 3], &k);
        assert!(uni.iter().all(|x| (x + 3.0).abs() < 1e-14));
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let m = grid(6, 4);
        let k = FilterKernel::new(&m, 1.8).unwrap();
        let rho: Vec<f64> = (0..m.n_design()).map(|i| 0.1 + 0.8 * ((i * 7 % 11) as f64 / 11.0)).collect();
        let weights: Vec<f64> = (0..m.n_design()).map(|i| ((i * 5 % 7) as f64) - 3.0).collect();
        let field = DesignField::new(rho.clone(), &k, 6.0, &vec![1.0; m.n_design()]);
        let chained = chain_to_design(&weights, &field.filtered, field.beta, field.theta, &k);
        let objective = |r: &[f64]| -> f64 { field.physical_for(r, &k).iter().zip(&weights).map(|(a, b)| a * b).sum() };
        for e in 0..rho.len() {
            let h = 1e-6;
            let mut rp = rho.clone();
            let mut rm = rho.clone();
            rp[e] += h;
            rm[e] -= h;
            let fd = (objective(&rp) - objective(&rm)) / (2.0 * h);
            assert!((fd - chained[e]).abs() <= 1e-6 * fd.abs().max(1e-3), "element {e}: {fd} vs {}", chained[e]);
        }
        // identity filter: chain equals the pointwise projection slope
        let id = FilterKernel::new(&m, 1.0).unwrap();
        let c = chain_to_design(&vec![1.0; rho.len()], &rho, 6.0, 0.4, &id);
        for (ci, &r) in c.iter().zip(&rho) {
            assert!((ci - heaviside_derivative(r, 6.0, 0.4)).abs() < 1e-14);
        }
    }

    #[test]
    fn adaptive_chain_follows_the_threshold() {
        let m = grid(7, 4);
        let n = m.n_design();
        let k = FilterKernel::new(&m, 2.2).unwrap();
        let vols = vec![1.0; n];
        let rho: Vec<f64> = (0..n).map(|i| 0.15 + 0.7 * ((i * 5 % 13) as f64 / 13.0)).collect();
        let weights: Vec<f64> = (0..n).map(|i| ((i * 3 % 5) as f64) - 1.7).collect();
        let field = DesignField::new(rho.clone(), &k, 8.0, &vols);
        assert!(field.theta > THETA_MIN && field.theta < THETA_MAX);
        let chained = chain_to_design_adaptive(&weights, &field.filtered, field.beta, field.theta, &vols, &k);
        let objective = |r: &[f64]| -> f64 {
            DesignField::new(r.to_vec(), &k, 8.0, &vols).physical.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let scale = chained.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // θ_h comes from a bisection, so the step must stay well above its tolerance
        for e in 0..n {
            let h = 1e-3;
            let mut rp = rho.clone();
            let mut rm = rho.clone();
            rp[e] += h;
            rm[e] -= h;
            let fd = (objective(&rp) - objective(&rm)) / (2.0 * h);
            assert!((fd - chained[e]).abs() <= 1e-4 * scale, "element {e}: {fd} vs {}", chained[e]);
        }
        let x = 0.3;
        let h = 1e-6;
        let fd = (heaviside(x, 5.0, 0.4 + h) - heaviside(x, 5.0, 0.4 - h)) / (2.0 * h);
        assert!((fd - heaviside_theta_derivative(x, 5.0, 0.4)).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn heaviside_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0, beta in 0.05f64..30.0, theta in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (hl, hh) = (heaviside(lo, beta, theta), heaviside(hi, beta, theta));
            prop_assert!(hl <= hh);
            prop_assert!(hl >= -1e-15 && hh <= 1.0 + 1e-15);
        }

        #[test]
        fn active_set_shrinks_with_tau(seed in 0u64..1000, t1 in 0.0f64..0.5, dt in 0.0f64..0.5) {
            let m = grid(6, 3);
            let phys: Vec<f64> = (0..18).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
            if let (Ok(a1), Ok(a2)) = (active_collocations(&phys, t1, &m), active_collocations(&phys, t1 + dt, &m)) {
                prop_assert!(a2.design.iter().all(|d| a1.design.contains(d)));
            }
        }

        #[test]
        fn threshold_preserves_volume(vals in proptest::collection::vec(0.0f64..1.0, 4..40), beta in 0.1f64..24.0) {
            let v = vec![1.0; vals.len()];
            let t = volume_preserving_threshold(&vals, beta, &v);
            let filt: f64 = vals.iter().sum();
            let proj: f64 = project(&vals, beta, t).iter().sum();
            if t > THETA_MIN && t < THETA_MAX && filt > 1e-6 {
                prop_assert!(((proj - filt) / filt).abs() <= 1e-8);
            }
        }
    }
}
