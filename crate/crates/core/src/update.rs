//! Design updates: optimality criteria for a single volume constraint, the
//! method of moving asymptotes for several constraints, the relaxed
//! displacement limit and the compliance-history stopping rule.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OcResult {
    pub rho: Vec<f64>,
    pub multiplier: f64,
    /// Constraint value g_v of the accepted design.
    pub volume_constraint: f64,
    pub bisections: usize,
}

/// One optimality-criteria step. `dfdx` and `dgdx` are design-space
/// derivatives; `constraint(ρ')` returns g_v of the physical field for a
/// candidate design and must be non-decreasing in every ρ'_e.
pub fn oc_update(
    rho: &[f64],
    dfdx: &[f64],
    dgdx: &[f64],
    move_limit: f64,
    damping: f64,
    constraint: &dyn Fn(&[f64]) -> f64,
) -> Result<OcResult> {
    let n = rho.len();
    if dfdx.len() != n || dgdx.len() != n {
        return Err(Error::Shape(format!("oc_update: {} designs, {} and {} derivatives", n, dfdx.len(), dgdx.len())));
    }
    if dfdx.iter().chain(dgdx).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("oc_update derivatives".into()));
    }
    let scale = dfdx.iter().fold(0.0f64, |m, v| m.max(-v));
    let ratio: Vec<f64> = (0..n)
        .map(|e| {
            let f = if scale > 0.0 { (-dfdx[e]).max(0.0) / scale } else { 0.0 };
            if dgdx[e] > 0.0 {
                f / dgdx[e]
            } else {
                0.0
            }
        })
        .collect();
    let candidate = |lambda: f64| -> Vec<f64> {
        (0..n)
            .map(|e| {
                let lo = (rho[e] - move_limit).max(0.0);
                let hi = (rho[e] + move_limit).min(1.0);
                (rho[e] * (ratio[e] / lambda).powf(damping)).clamp(lo, hi)
            })
            .collect()
    };
    let tol = 1e-6 * n as f64;
    let (mut l1, mut l2) = (1e-10f64, 1e10f64);
    let mut widened = 0;
    loop {
        let low_ok = constraint(&candidate(l1)) >= 0.0;
        let high_ok = constraint(&candidate(l2)) <= 0.0;
        if low_ok && high_ok {
            break;
        }
        if widened == 5 {
            let g_lo = constraint(&candidate(l1));
            let g_hi = constraint(&candidate(l2));
            // the move limit may forbid reaching the target; accept the closest bound
            if !low_ok && g_lo.abs() <= tol {
                let r = candidate(l1);
                return Ok(OcResult { rho: r, multiplier: l1, volume_constraint: g_lo, bisections: 0 });
            }
            if !high_ok && g_hi.abs() <= tol {
                let r = candidate(l2);
                return Ok(OcResult { rho: r, multiplier: l2, volume_constraint: g_hi, bisections: 0 });
            }
            return Err(Error::NoConvergence { iterations: 0, residual: if low_ok { g_hi } else { g_lo } });
        }
        if !low_ok {
            l1 /= 10.0;
        }
        if !high_ok {
            l2 *= 10.0;
        }
        widened += 1;
    }
    let mut it = 0;
    loop {
        let mid = (l1 * l2).sqrt();
        let r = candidate(mid);
        let g = constraint(&r);
        it += 1;
        if g.abs() <= 1e-3 * tol || (l2 - l1) <= 1e-15 * l2 || it >= 300 {
            if g.abs() > tol {
                return Err(Error::NoConvergence { iterations: it, residual: g });
            }
            return Ok(OcResult { rho: r, multiplier: mid, volume_constraint: g, bisections: it });
        }
        if g > 0.0 {
            l1 = mid;
        } else {
            l2 = mid;
        }
    }
}

pub const MMA_ASYMPTOTE_INIT: f64 = 0.5;
pub const MMA_EXPANSION: f64 = 1.2;
pub const MMA_CONTRACTION: f64 = 0.7;
const MMA_ALBEFA: f64 = 0.1;
const MMA_RAA0: f64 = 1e-5;
const MMA_C: f64 = 1000.0;
const MMA_EPSIMIN: f64 = 1e-9;

/// Asymptotes and design history carried between MMA iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    pub iteration: usize,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub move_limit: f64,
}

impl MmaState {
    pub fn new(x: &[f64], move_limit: f64) -> MmaState {
        MmaState {
            iteration: 0,
            xold1: x.to_vec(),
            xold2: x.to_vec(),
            low: vec![0.0; x.len()],
            upp: vec![1.0; x.len()],
            move_limit,
        }
    }
}

/// Convex separable approximation built at the current design (standard form
/// with a₀=1, aᵢ=0, cᵢ=1000, dᵢ=1).
#[derive(Debug, Clone, PartialEq)]
pub struct MmaSubproblem {
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub alfa: Vec<f64>,
    pub beta: Vec<f64>,
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// Row-major m × n.
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub r0: f64,
}

impl MmaSubproblem {
    /// Updates the asymptotes in `state` and builds the approximation at `x`.
    pub fn build(x: &[f64], f0: f64, df0: &[f64], fval: &[f64], dfdx: &[Vec<f64>], state: &mut MmaState) -> Result<MmaSubproblem> {
        let n = x.len();
        let m = fval.len();
        if df0.len() != n || dfdx.len() != m || dfdx.iter().any(|r| r.len() != n) || state.xold1.len() != n {
            return Err(Error::Shape("mma: inconsistent sizes".into()));
        }
        if m == 0 {
            return Err(Error::InvalidInput("mma needs at least one constraint".into()));
        }
        if df0.iter().chain(fval).chain(dfdx.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mma inputs".into()));
        }
        let (xmin, xmax) = (0.0, 1.0);
        let span = xmax - xmin;
        let k = state.iteration + 1;
        let mut low = vec![0.0; n];
        let mut upp = vec![0.0; n];
        for j in 0..n {
            if k <= 2 {
                low[j] = x[j] - MMA_ASYMPTOTE_INIT * span;
                upp[j] = x[j] + MMA_ASYMPTOTE_INIT * span;
            } else {
                let zzz = (x[j] - state.xold1[j]) * (state.xold1[j] - state.xold2[j]);
                let factor = if zzz > 0.0 {
                    MMA_EXPANSION
                } else if zzz < 0.0 {
                    MMA_CONTRACTION
                } else {
                    1.0
                };
                low[j] = x[j] - factor * (state.xold1[j] - state.low[j]);
                upp[j] = x[j] + factor * (state.upp[j] - state.xold1[j]);
                low[j] = low[j].clamp(x[j] - 10.0 * span, x[j] - 0.01 * span);
                upp[j] = upp[j].clamp(x[j] + 0.01 * span, x[j] + 10.0 * span);
            }
        }
        let mut alfa = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut p0 = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        let mut p = vec![vec![0.0; n]; m];
        let mut q = vec![vec![0.0; n]; m];
        let mut r0 = f0;
        let mut b: Vec<f64> = fval.iter().map(|v| -v).collect();
        for j in 0..n {
            alfa[j] = (low[j] + MMA_ALBEFA * (x[j] - low[j])).max(x[j] - state.move_limit * span).max(xmin);
            beta[j] = (upp[j] - MMA_ALBEFA * (upp[j] - x[j])).min(x[j] + state.move_limit * span).min(xmax);
            let ux1 = upp[j] - x[j];
            let xl1 = x[j] - low[j];
            let xmami = span.max(1e-5);
            let approx = |g: f64| -> (f64, f64) {
                let (pp, qq) = (g.max(0.0), (-g).max(0.0));
                let pq = 0.001 * (pp + qq) + MMA_RAA0 / xmami;
                ((pp + pq) * ux1 * ux1, (qq + pq) * xl1 * xl1)
            };
            let (a, c) = approx(df0[j]);
            p0[j] = a;
            q0[j] = c;
            r0 -= a / ux1 + c / xl1;
            for i in 0..m {
                let (a, c) = approx(dfdx[i][j]);
                p[i][j] = a;
                q[i][j] = c;
                b[i] += a / ux1 + c / xl1;
            }
        }
        state.low = low.clone();
        state.upp = upp.clone();
        Ok(MmaSubproblem { low, upp, alfa, beta, p0, q0, p, q, b, r0 })
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.r0 + (0..x.len()).map(|j| self.p0[j] / (self.upp[j] - x[j]) + self.q0[j] / (x[j] - self.low[j])).sum::<f64>()
    }

    /// Approximated constraint value f̃ᵢ(x).
    pub fn constraint(&self, i: usize, x: &[f64]) -> f64 {
        (0..x.len()).map(|j| self.p[i][j] / (self.upp[j] - x[j]) + self.q[i][j] / (x[j] - self.low[j])).sum::<f64>() - self.b[i]
    }

    /// Primal-dual interior-point solution of the subproblem.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.alfa.len();
        let m = self.b.len();
        let (a0, c, d) = (1.0, MMA_C, 1.0);
        let mut v = Iterate {
            x: (0..n).map(|j| 0.5 * (self.alfa[j] + self.beta[j])).collect(),
            y: vec![1.0; m],
            z: 1.0,
            lam: vec![1.0; m],
            xsi: vec![0.0; n],
            eta: vec![0.0; n],
            mu: vec![(0.5 * c).max(1.0); m],
            zet: 1.0,
            s: vec![1.0; m],
        };
        for j in 0..n {
            v.xsi[j] = (1.0 / (v.x[j] - self.alfa[j])).max(1.0);
            v.eta[j] = (1.0 / (self.beta[j] - v.x[j])).max(1.0);
        }
        let mut epsi = 1.0;
        while epsi > MMA_EPSIMIN {
            let mut residu = self.residual(&v, epsi, a0, c, d);
            let mut resnorm = norm2(&residu);
            let mut resmax = normmax(&residu);
            let mut ittt = 0;
            while resmax > 0.9 * epsi && ittt < 200 {
                ittt += 1;
                let (ux1, xl1): (Vec<f64>, Vec<f64>) = (0..n).map(|j| (self.upp[j] - v.x[j], v.x[j] - self.low[j])).unzip();
                let plam: Vec<f64> = (0..n).map(|j| self.p0[j] + (0..m).map(|i| self.p[i][j] * v.lam[i]).sum::<f64>()).collect();
                let qlam: Vec<f64> = (0..n).map(|j| self.q0[j] + (0..m).map(|i| self.q[i][j] * v.lam[i]).sum::<f64>()).collect();
                let gvec: Vec<f64> = (0..m)
                    .map(|i| (0..n).map(|j| self.p[i][j] / ux1[j] + self.q[i][j] / xl1[j]).sum())
                    .collect();
                let gg: Vec<Vec<f64>> = (0..m)
                    .map(|i| (0..n).map(|j| self.p[i][j] / (ux1[j] * ux1[j]) - self.q[i][j] / (xl1[j] * xl1[j])).collect())
                    .collect();
                let mut delx = vec![0.0; n];
                let mut diagx = vec![0.0; n];
                for j in 0..n {
                    let dpsidx = plam[j] / (ux1[j] * ux1[j]) - qlam[j] / (xl1[j] * xl1[j]);
                    delx[j] = dpsidx - epsi / (v.x[j] - self.alfa[j]) + epsi / (self.beta[j] - v.x[j]);
                    diagx[j] = 2.0 * (plam[j] / ux1[j].powi(3) + qlam[j] / xl1[j].powi(3))
                        + v.xsi[j] / (v.x[j] - self.alfa[j])
                        + v.eta[j] / (self.beta[j] - v.x[j]);
                }
                let dely: Vec<f64> = (0..m).map(|i| c + d * v.y[i] - v.lam[i] - epsi / v.y[i]).collect();
                let delz = a0 - epsi / v.z;
                let dellam: Vec<f64> = (0..m).map(|i| gvec[i] - v.y[i] - self.b[i] + epsi / v.lam[i]).collect();
                let diagy: Vec<f64> = (0..m).map(|i| d + v.mu[i] / v.y[i]).collect();
                // reduced (m+1) system
                let mut aa = ndarray::Array2::<f64>::zeros((m + 1, m + 1));
                let mut bb = vec![0.0; m + 1];
                for i in 0..m {
                    bb[i] = dellam[i] + dely[i] / diagy[i] - (0..n).map(|j| gg[i][j] * delx[j] / diagx[j]).sum::<f64>();
                    for k in 0..m {
                        aa[[i, k]] = (0..n).map(|j| gg[i][j] * gg[k][j] / diagx[j]).sum();
                    }
                    aa[[i, i]] += v.s[i] / v.lam[i] + 1.0 / diagy[i];
                }
                aa[[m, m]] = -v.zet / v.z;
                bb[m] = delz;
                let sol = crate::fem::lu_solve(aa, bb)?;
                let dlam = &sol[..m];
                let dz = sol[m];
                let dx: Vec<f64> = (0..n)
                    .map(|j| -delx[j] / diagx[j] - (0..m).map(|i| gg[i][j] * dlam[i]).sum::<f64>() / diagx[j])
                    .collect();
                let dy: Vec<f64> = (0..m).map(|i| -dely[i] / diagy[i] + dlam[i] / diagy[i]).collect();
                let dxsi: Vec<f64> = (0..n)
                    .map(|j| -v.xsi[j] + epsi / (v.x[j] - self.alfa[j]) - v.xsi[j] * dx[j] / (v.x[j] - self.alfa[j]))
                    .collect();
                let deta: Vec<f64> = (0..n)
                    .map(|j| -v.eta[j] + epsi / (self.beta[j] - v.x[j]) + v.eta[j] * dx[j] / (self.beta[j] - v.x[j]))
                    .collect();
                let dmu: Vec<f64> = (0..m).map(|i| -v.mu[i] + epsi / v.y[i] - v.mu[i] * dy[i] / v.y[i]).collect();
                let dzet = -v.zet + epsi / v.z - v.zet * dz / v.z;
                let ds: Vec<f64> = (0..m).map(|i| -v.s[i] + epsi / v.lam[i] - v.s[i] * dlam[i] / v.lam[i]).collect();
                let dir = Iterate { x: dx, y: dy, z: dz, lam: dlam.to_vec(), xsi: dxsi, eta: deta, mu: dmu, zet: dzet, s: ds };

                let mut stm: f64 = 1.0;
                let mut bump = |val: f64, dval: f64| stm = stm.max(-1.01 * dval / val);
                for i in 0..m {
                    bump(v.y[i], dir.y[i]);
                    bump(v.lam[i], dir.lam[i]);
                    bump(v.mu[i], dir.mu[i]);
                    bump(v.s[i], dir.s[i]);
                }
                bump(v.z, dir.z);
                bump(v.zet, dir.zet);
                for j in 0..n {
                    bump(v.xsi[j], dir.xsi[j]);
                    bump(v.eta[j], dir.eta[j]);
                    bump(v.x[j] - self.alfa[j], dir.x[j]);
                    bump(self.beta[j] - v.x[j], -dir.x[j]);
                }
                let mut steg = 1.0 / stm;
                let old = v.clone();
                let mut itto = 0;
                let mut resinew = 2.0 * resnorm;
                while resinew > resnorm && itto < 50 {
                    itto += 1;
                    v = old.step(&dir, steg);
                    residu = self.residual(&v, epsi, a0, c, d);
                    resinew = norm2(&residu);
                    steg /= 2.0;
                }
                resnorm = resinew;
                resmax = normmax(&residu);
            }
            epsi *= 0.1;
        }
        if v.x.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mma subproblem solution".into()));
        }
        Ok(v.x)
    }

    fn residual(&self, v: &Iterate, epsi: f64, a0: f64, c: f64, d: f64) -> Vec<f64> {
        let n = v.x.len();
        let m = v.y.len();
        let mut r = Vec::with_capacity(3 * n + 4 * m + 2);
        for j in 0..n {
            let ux = self.upp[j] - v.x[j];
            let xl = v.x[j] - self.low[j];
            let plam = self.p0[j] + (0..m).map(|i| self.p[i][j] * v.lam[i]).sum::<f64>();
            let qlam = self.q0[j] + (0..m).map(|i| self.q[i][j] * v.lam[i]).sum::<f64>();
            r.push(plam / (ux * ux) - qlam / (xl * xl) - v.xsi[j] + v.eta[j]);
        }
        for i in 0..m {
            r.push(c + d * v.y[i] - v.mu[i] - v.lam[i]);
        }
        r.push(a0 - v.zet);
        for i in 0..m {
            let g: f64 = (0..n).map(|j| self.p[i][j] / (self.upp[j] - v.x[j]) + self.q[i][j] / (v.x[j] - self.low[j])).sum();
            r.push(g - v.y[i] + v.s[i] - self.b[i]);
        }
        for j in 0..n {
            r.push(v.xsi[j] * (v.x[j] - self.alfa[j]) - epsi);
            r.push(v.eta[j] * (self.beta[j] - v.x[j]) - epsi);
        }
        for i in 0..m {
            r.push(v.mu[i] * v.y[i] - epsi);
            r.push(v.lam[i] * v.s[i] - epsi);
        }
        r.push(v.zet * v.z - epsi);
        r
    }
}

#[derive(Debug, Clone)]
struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: f64,
    lam: Vec<f64>,
    xsi: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    zet: f64,
    s: Vec<f64>,
}

impl Iterate {
    fn step(&self, d: &Iterate, t: f64) -> Iterate {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + t * y).collect::<Vec<f64>>();
        Iterate {
            x: add(&self.x, &d.x),
            y: add(&self.y, &d.y),
            z: self.z + t * d.z,
            lam: add(&self.lam, &d.lam),
            xsi: add(&self.xsi, &d.xsi),
            eta: add(&self.eta, &d.eta),
            mu: add(&self.mu, &d.mu),
            zet: self.zet + t * d.zet,
            s: add(&self.s, &d.s),
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normmax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// One MMA iteration: constraints `fval[i] ≤ 0` with gradients `dfdx[i]`.
pub fn mma_update(x: &[f64], f0: f64, df0: &[f64], fval: &[f64], dfdx: &[Vec<f64>], state: &mut MmaState) -> Result<Vec<f64>> {
    let sub = MmaSubproblem::build(x, f0, df0, fval, dfdx, state)?;
    let xnew = sub.solve()?;
    state.xold2 = std::mem::replace(&mut state.xold1, x.to_vec());
    state.iteration += 1;
    Ok(xnew)
}

/// ū_k = max(0.9·u_prev, ū₀).
pub fn relax_displacement_limit(previous_probe: f64, floor: f64) -> f64 {
    (0.9 * previous_probe).max(floor)
}

/// τ_stop over the last 2·Ns entries; `None` until enough history exists.
pub fn stopping_measure(history: &[f64], window: usize) -> Option<f64> {
    let k = history.len();
    if window == 0 || k < 2 * window {
        return None;
    }
    let num: f64 = (0..window).map(|i| (history[k - 1 - i] - history[k - 1 - i - window]).abs()).sum();
    let den: f64 = (0..window).map(|i| history[k - 1 - i]).sum();
    if den == 0.0 {
        return Some(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Some(num / den)
}

pub fn should_stop(history: &[f64], window: usize, threshold: f64) -> (bool, Option<f64>) {
    let tau = stopping_measure(history, window);
    (tau.is_some_and(|t| t < threshold), tau)
}
