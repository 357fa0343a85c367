//! The two-subnetwork PINN: a Fourier-feature backbone producing base
//! displacements and a small residual coefficient network scaling them,
//! wrapped in a hard Dirichlet constraint.
//!
//! Spatial Jacobians are propagated as forward tangents (one per input axis)
//! built on the tape, so a single reverse sweep yields exact parameter
//! gradients of losses that depend on both displacements and strains.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{AdamConfig, AdamState, Group, LayoutBuilder, ParamSet, Subset, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Region};
use crate::problem::{OptConfig, Support};

const LN_EPS: f64 = 1e-5;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const PREDICT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub fourier_features: usize,
    pub fourier_scale: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub coef_width: usize,
    pub residual_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            fourier_features: 180,
            fourier_scale: 1.0,
            hidden_width: 360,
            hidden_layers: 3,
            coef_width: 48,
            residual_blocks: 2,
        }
    }
}

/// Whether the coefficient output is used (`Evaluate`) or replaced by one (`Bypass`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaPolicy {
    Bypass,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    BackboneOnly { epochs: usize, alpha: AlphaPolicy },
    CoefficientOnly { epochs: usize },
}

impl TrainingMode {
    pub fn epochs(&self) -> usize {
        match *self {
            TrainingMode::BackboneOnly { epochs, .. } | TrainingMode::CoefficientOnly { epochs } => epochs,
        }
    }

    pub fn subset(&self) -> Subset {
        match self {
            TrainingMode::BackboneOnly { .. } => Subset::Backbone,
            TrainingMode::CoefficientOnly { .. } => Subset::Coefficient,
        }
    }

    pub fn alpha(&self) -> AlphaPolicy {
        match *self {
            TrainingMode::BackboneOnly { alpha, .. } => alpha,
            TrainingMode::CoefficientOnly { .. } => AlphaPolicy::Evaluate,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrainingMode::BackboneOnly { alpha: AlphaPolicy::Bypass, .. } => "backbone",
            TrainingMode::BackboneOnly { alpha: AlphaPolicy::Evaluate, .. } => "backbone-frozen-coef",
            TrainingMode::CoefficientOnly { .. } => "coefficient",
        }
    }
}

/// Grayscale indicator 4 Σ ρ(1-ρ) / N.
pub fn grayscale(rho: &[f64]) -> Result<f64> {
    if rho.is_empty() {
        return Err(Error::InvalidInput("grayscale of an empty field".into()));
    }
    Ok(4.0 * rho.iter().map(|r| r * (1.0 - r)).sum::<f64>() / rho.len() as f64)
}

/// Training mode for `cycle` (1-based). `low_gray_entry` is the first cycle at or
/// below the grayscale limit, if one has occurred.
pub fn select_mode(gray: f64, cycle: usize, low_gray_entry: Option<usize>, opt: &OptConfig) -> TrainingMode {
    let backbone = |alpha| TrainingMode::BackboneOnly { epochs: opt.epochs_backbone, alpha };
    if gray > opt.gray_limit {
        return backbone(AlphaPolicy::Bypass);
    }
    let entry = low_gray_entry.unwrap_or(cycle).min(cycle);
    if (cycle - entry) % opt.period.max(1) == 0 {
        backbone(AlphaPolicy::Evaluate)
    } else {
        TrainingMode::CoefficientOnly { epochs: opt.epochs_coefficient }
    }
}

/// Hard Dirichlet constraint `u_i = g_i + l_i(χ) · raw_i`.
///
/// `l_i` is the product, over the supports fixing component `i`, of the
/// distance to the support region divided by the largest domain extent.
#[derive(Debug, Clone, PartialEq)]
pub struct HardConstraint {
    pub dim: usize,
    pub regions: Vec<Vec<Region>>,
    pub prescribed: [f64; 3],
    pub length: f64,
}

impl HardConstraint {
    pub fn new(mesh: &Mesh, supports: &[Support]) -> Result<HardConstraint> {
        let dim = mesh.dim;
        let mut regions = vec![Vec::new(); dim];
        let mut prescribed: [Option<f64>; 3] = [None; 3];
        for s in supports {
            for i in 0..dim {
                if s.fixed[i] {
                    regions[i].push(s.region.clone());
                    match prescribed[i] {
                        Some(v) if v != s.value[i] => {
                            return Err(Error::InvalidInput(format!(
                                "component {i} is prescribed to both {v} and {} on different supports",
                                s.value[i]
                            )))
                        }
                        _ => prescribed[i] = Some(s.value[i]),
                    }
                }
            }
        }
        let length = (0..dim).map(|a| mesh.extents[a]).fold(0.0, f64::max);
        let mut g = [0.0; 3];
        for i in 0..dim {
            g[i] = prescribed[i].unwrap_or(0.0);
        }
        Ok(HardConstraint { dim, regions, prescribed: g, length })
    }

    /// No constraint: `l ≡ 1`, `g ≡ 0`.
    pub fn free(dim: usize) -> HardConstraint {
        HardConstraint { dim, regions: vec![Vec::new(); dim], prescribed: [0.0; 3], length: 1.0 }
    }

    /// `(l_i, ∂l_i/∂χ_k)` at one point.
    pub fn eval(&self, p: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut l = [1.0; 3];
        let mut dl = [[0.0; 3]; 3];
        for i in 0..self.dim {
            let factors: Vec<(f64, [f64; 3])> = self.regions[i]
                .iter()
                .map(|r| {
                    let (d, g) = r.distance(self.dim, p);
                    (d / self.length, [g[0] / self.length, g[1] / self.length, g[2] / self.length])
                })
                .collect();
            l[i] = factors.iter().map(|f| f.0).product();
            for (j, (_, gj)) in factors.iter().enumerate() {
                let rest: f64 = factors.iter().enumerate().filter(|(m, _)| *m != j).map(|(_, f)| f.0).product();
                for k in 0..self.dim {
                    dl[i][k] += gj[k] * rest;
                }
            }
        }
        (l, dl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    ln1: (usize, usize),
    lin1: Linear,
    ln2: (usize, usize),
    lin2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: Vec<Linear>,
    out: Linear,
    coef_in: Linear,
    blocks: Vec<Block>,
    coef_out: Linear,
}

fn build_layout(cfg: &NetConfig, dim: usize) -> (Layout, ParamSet) {
    let mut lb = LayoutBuilder::default();
    let lin = |lb: &mut LayoutBuilder, name: &str, out: usize, inp: usize, g: Group| Linear {
        w: lb.push(format!("{name}.weight"), out, inp, g),
        b: lb.push(format!("{name}.bias"), 1, out, g),
    };
    let mut hidden = Vec::new();
    let mut width_in = 2 * cfg.fourier_features;
    for l in 0..cfg.hidden_layers {
        hidden.push(lin(&mut lb, &format!("backbone.hidden{l}"), cfg.hidden_width, width_in, Group::Backbone));
        width_in = cfg.hidden_width;
    }
    let out = lin(&mut lb, "backbone.out", dim, width_in, Group::Backbone);
    let cw = cfg.coef_width;
    let coef_in = lin(&mut lb, "coef.in", cw, 2 * dim, Group::Coefficient);
    let mut blocks = Vec::new();
    for k in 0..cfg.residual_blocks {
        let ln1 = (
            lb.push(format!("coef.block{k}.norm1.gain"), 1, cw, Group::Coefficient),
            lb.push(format!("coef.block{k}.norm1.bias"), 1, cw, Group::Coefficient),
        );
        let lin1 = lin(&mut lb, &format!("coef.block{k}.lin1"), cw, cw, Group::Coefficient);
        let ln2 = (
            lb.push(format!("coef.block{k}.norm2.gain"), 1, cw, Group::Coefficient),
            lb.push(format!("coef.block{k}.norm2.bias"), 1, cw, Group::Coefficient),
        );
        let lin2 = lin(&mut lb, &format!("coef.block{k}.lin2"), cw, cw, Group::Coefficient);
        blocks.push(Block { ln1, lin1, ln2, lin2 });
    }
    let coef_out = lin(&mut lb, "coef.out", dim, cw, Group::Coefficient);
    (Layout { hidden, out, coef_in, blocks, coef_out }, lb.finish())
}

/// Per-batch constants: Fourier features, normalized coordinates and the
/// hard-constraint factors, each with tangents along every input axis.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n: usize,
    features: Array2<f64>,
    feature_tangents: Vec<Array2<f64>>,
    xhat: Array2<f64>,
    xhat_tangents: Vec<Array2<f64>>,
    l: Array2<f64>,
    dl: Vec<Array2<f64>>,
    g: Array2<f64>,
    frozen_backbone: Option<(Array2<f64>, Vec<Array2<f64>>)>,
}

impl Prepared {
    pub fn has_frozen_backbone(&self) -> bool {
        self.frozen_backbone.is_some()
    }
}

/// Output of a forward pass: displacements (n×dim) and `jac[k][p, i] = ∂u_i/∂χ_k`.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub u: Array2<f64>,
    pub jac: Vec<Array2<f64>>,
}

/// Loss as a function of predicted displacements and their spatial Jacobians.
pub trait FieldLoss {
    fn evaluate(&self, field: &FieldEval) -> Result<LossEval>;
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub d_u: Array2<f64>,
    pub d_jac: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub dim: usize,
    pub config: NetConfig,
    pub extents: [f64; 3],
    /// Fourier matrix B (m_f × dim), fixed after initialization.
    pub fourier: Array2<f64>,
    pub params: ParamSet,
    pub hard: HardConstraint,
    pub alpha: AlphaPolicy,
    layout: Layout,
}

struct Graph {
    u: Var,
    jac: Vec<Var>,
    leaves: Vec<(usize, Var)>,
}

/// Value plus one tangent per input axis.
struct Dual {
    v: Var,
    t: Vec<Var>,
}

impl PinnModel {
    pub fn new(seed: u64, dim: usize, extents: [f64; 3], hard: HardConstraint, config: NetConfig) -> Result<PinnModel> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidInput(format!("network dimension must be 2 or 3, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.fourier_scale).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let fourier = Array2::from_shape_fn((config.fourier_features, dim), |_| normal.sample(&mut rng));
        let (layout, mut params) = build_layout(&config, dim);
        let mut glorot = |params: &mut ParamSet, lin: Linear| {
            let spec = &params.layout[lin.w];
            let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for w in params.tensor_mut(lin.w) {
                *w = rng.gen_range(-limit..limit);
            }
        };
        for &lin in &layout.hidden {
            glorot(&mut params, lin);
        }
        glorot(&mut params, layout.out);
        glorot(&mut params, layout.coef_in);
        for b in &layout.blocks {
            glorot(&mut params, b.lin1);
            glorot(&mut params, b.lin2);
            params.tensor_mut(b.ln1.0).fill(1.0);
            params.tensor_mut(b.ln2.0).fill(1.0);
        }
        params.tensor_mut(layout.coef_out.b).fill(1.0);
        Ok(PinnModel { dim, config, extents, fourier, params, hard, alpha: AlphaPolicy::Bypass, layout })
    }

    /// Fresh model for a mesh and its supports.
    pub fn for_mesh(seed: u64, mesh: &Mesh, supports: &[Support], config: NetConfig) -> Result<PinnModel> {
        let hard = HardConstraint::new(mesh, supports)?;
        PinnModel::new(seed, mesh.dim, mesh.extents, hard, config)
    }

    pub fn backbone_count(&self) -> usize {
        self.params.count(Subset::Backbone)
    }

    pub fn coefficient_count(&self) -> usize {
        self.params.count(Subset::Coefficient)
    }

    pub fn prepare(&self, points: &[[f64; 3]]) -> Prepared {
        let n = points.len();
        let dim = self.dim;
        let mf = self.config.fourier_features;
        let mut features = Array2::zeros((n, 2 * mf));
        let mut feature_tangents = vec![Array2::zeros((n, 2 * mf)); dim];
        let mut xhat = Array2::zeros((n, dim));
        let mut l = Array2::zeros((n, dim));
        let mut dl = vec![Array2::zeros((n, dim)); dim];
        let mut g = Array2::zeros((n, dim));
        // dz_f/dχ_k = 2π B[f,k] / extent_k
        let dz: Vec<Vec<f64>> =
            (0..dim).map(|k| (0..mf).map(|f| TWO_PI * self.fourier[[f, k]] / self.extents[k]).collect()).collect();
        for (p, pt) in points.iter().enumerate() {
            for k in 0..dim {
                xhat[[p, k]] = pt[k] / self.extents[k];
            }
            for f in 0..mf {
                let z: f64 = TWO_PI * (0..dim).map(|k| self.fourier[[f, k]] * xhat[[p, k]]).sum::<f64>();
                let (sz, cz) = z.sin_cos();
                features[[p, f]] = cz;
                features[[p, mf + f]] = sz;
                for k in 0..dim {
                    feature_tangents[k][[p, f]] = -sz * dz[k][f];
                    feature_tangents[k][[p, mf + f]] = cz * dz[k][f];
                }
            }
            let (lv, dlv) = self.hard.eval(pt);
            for i in 0..dim {
                l[[p, i]] = lv[i];
                g[[p, i]] = self.hard.prescribed[i];
                for k in 0..dim {
                    dl[k][[p, i]] = dlv[i][k];
                }
            }
        }
        let xhat_tangents = (0..dim)
            .map(|k| {
                let mut t = Array2::zeros((n, dim));
                t.column_mut(k).fill(1.0 / self.extents[k]);
                t
            })
            .collect();
        Prepared { n, features, feature_tangents, xhat, xhat_tangents, l, dl, g, frozen_backbone: None }
    }

    /// Caches the current backbone output on `prep` so coefficient-only passes skip it.
    /// The cache is only valid while the backbone parameters are unchanged.
    pub fn freeze_backbone(&self, prep: &mut Prepared) {
        let mut tape = Tape::new();
        let d = self.backbone_graph(&mut tape, prep, false, &mut Vec::new());
        let v = tape.value(d.v).clone();
        let t = d.t.iter().map(|x| tape.value(*x).clone()).collect();
        prep.frozen_backbone = Some((v, t));
    }

    pub fn clear_frozen_backbone(&self, prep: &mut Prepared) {
        prep.frozen_backbone = None;
    }

    fn leaf(&self, tape: &mut Tape, tensor: usize, trainable: bool, leaves: &mut Vec<(usize, Var)>) -> Var {
        let v = tape.leaf(self.params.view(tensor).to_owned(), trainable);
        if trainable {
            leaves.push((tensor, v));
        }
        v
    }

    fn linear(&self, tape: &mut Tape, x: &Dual, lin: Linear, trainable: bool, leaves: &mut Vec<(usize, Var)>) -> Dual {
        let w = self.leaf(tape, lin.w, trainable, leaves);
        let b = self.leaf(tape, lin.b, trainable, leaves);
        let xw = tape.matmul_t(x.v, w);
        let v = tape.add_row(xw, b);
        let t = x.t.iter().map(|&tk| tape.matmul_t(tk, w)).collect();
        Dual { v, t }
    }

    fn tanh(tape: &mut Tape, x: &Dual) -> Dual {
        let v = tape.tanh(x.v);
        let s = tape.one_minus_sq(v);
        let t = x.t.iter().map(|&tk| tape.mul(s, tk)).collect();
        Dual { v, t }
    }

    fn layer_norm(&self, tape: &mut Tape, x: &Dual, ln: (usize, usize), trainable: bool, leaves: &mut Vec<(usize, Var)>) -> Dual {
        let gain = self.leaf(tape, ln.0, trainable, leaves);
        let bias = self.leaf(tape, ln.1, trainable, leaves);
        let mu = tape.row_mean(x.v);
        let neg_mu = tape.scale(mu, -1.0);
        let xc = tape.add_col(x.v, neg_mu);
        let sq = tape.square(xc);
        let var = tape.row_mean(sq);
        let shifted = tape.add_scalar(var, LN_EPS);
        let r = tape.rsqrt(shifted);
        let xh = tape.mul_col(xc, r);
        let scaled = tape.mul_row(xh, gain);
        let v = tape.add_row(scaled, bias);
        let t = x
            .t
            .iter()
            .map(|&tk| {
                let tmu = tape.row_mean(tk);
                let neg = tape.scale(tmu, -1.0);
                let tc = tape.add_col(tk, neg);
                let prod = tape.mul(xh, tc);
                let proj = tape.row_mean(prod);
                let along = tape.mul_col(xh, proj);
                let inner = tape.sub(tc, along);
                let txh = tape.mul_col(inner, r);
                tape.mul_row(txh, gain)
            })
            .collect();
        Dual { v, t }
    }

    fn backbone_graph(&self, tape: &mut Tape, prep: &Prepared, trainable: bool, leaves: &mut Vec<(usize, Var)>) -> Dual {
        let v = tape.constant(prep.features.clone());
        let t = prep.feature_tangents.iter().map(|x| tape.constant(x.clone())).collect();
        let mut x = Dual { v, t };
        for &lin in &self.layout.hidden {
            let a = self.linear(tape, &x, lin, trainable, leaves);
            x = Self::tanh(tape, &a);
        }
        self.linear(tape, &x, self.layout.out, trainable, leaves)
    }

    fn coefficient_graph(&self, tape: &mut Tape, prep: &Prepared, base: &Dual, trainable: bool, leaves: &mut Vec<(usize, Var)>) -> Dual {
        let xh = tape.constant(prep.xhat.clone());
        let v = tape.concat_cols(&[base.v, xh]);
        let t = (0..self.dim)
            .map(|k| {
                let c = tape.constant(prep.xhat_tangents[k].clone());
                tape.concat_cols(&[base.t[k], c])
            })
            .collect();
        let input = Dual { v, t };
        let mut a = self.linear(tape, &input, self.layout.coef_in, trainable, leaves);
        for (k, block) in self.layout.blocks.iter().enumerate() {
            if k > 0 {
                a = Self::tanh(tape, &a);
            }
            let n1 = self.layer_norm(tape, &a, block.ln1, trainable, leaves);
            let l1 = self.linear(tape, &n1, block.lin1, trainable, leaves);
            let h = Self::tanh(tape, &l1);
            let n2 = self.layer_norm(tape, &h, block.ln2, trainable, leaves);
            let l2 = self.linear(tape, &n2, block.lin2, trainable, leaves);
            let sv = tape.add(a.v, l2.v);
            let st: Vec<Var> = a.t.iter().zip(&l2.t).map(|(&x, &y)| tape.add(x, y)).collect();
            a = Self::tanh(tape, &Dual { v: sv, t: st });
        }
        let a = Self::tanh(tape, &a);
        self.linear(tape, &a, self.layout.coef_out, trainable, leaves)
    }

    fn graph(&self, tape: &mut Tape, prep: &Prepared, subset: Option<Subset>, alpha: AlphaPolicy) -> Graph {
        let mut leaves = Vec::new();
        let train_bb = subset.is_some_and(|s| s.contains(Group::Backbone));
        let train_co = subset.is_some_and(|s| s.contains(Group::Coefficient));
        let base = match (&prep.frozen_backbone, train_bb) {
            (Some((v, t)), false) => Dual {
                v: tape.constant(v.clone()),
                t: t.iter().map(|x| tape.constant(x.clone())).collect(),
            },
            _ => self.backbone_graph(tape, prep, train_bb, &mut leaves),
        };
        let raw = match alpha {
            AlphaPolicy::Bypass => base,
            AlphaPolicy::Evaluate => {
                let a = self.coefficient_graph(tape, prep, &base, train_co, &mut leaves);
                let v = tape.mul(a.v, base.v);
                let t = (0..self.dim)
                    .map(|k| {
                        let p = tape.mul(a.t[k], base.v);
                        let q = tape.mul(a.v, base.t[k]);
                        tape.add(p, q)
                    })
                    .collect();
                Dual { v, t }
            }
        };
        let l = tape.constant(prep.l.clone());
        let g = tape.constant(prep.g.clone());
        let lr = tape.mul(l, raw.v);
        let u = tape.add(g, lr);
        let jac = (0..self.dim)
            .map(|k| {
                let dl = tape.constant(prep.dl[k].clone());
                let a = tape.mul(l, raw.t[k]);
                let b = tape.mul(dl, raw.v);
                tape.add(a, b)
            })
            .collect();
        Graph { u, jac, leaves }
    }

    /// Displacements and spatial Jacobians on a prepared batch.
    pub fn forward_with_jacobian(&self, prep: &Prepared, alpha: AlphaPolicy) -> Result<FieldEval> {
        self.params.check_finite()?;
        let mut tape = Tape::new();
        let gr = self.graph(&mut tape, prep, None, alpha);
        let u = tape.take_value(gr.u);
        let jac: Vec<_> = gr.jac.iter().map(|&j| tape.take_value(j)).collect();
        if u.iter().chain(jac.iter().flat_map(|j| j.iter())).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(FieldEval { u, jac })
    }

    /// Prediction at arbitrary points with the model's current coefficient policy.
    pub fn predict(&self, points: &[[f64; 3]]) -> Result<FieldEval> {
        let mut us = Vec::new();
        let mut jacs: Vec<Vec<Array2<f64>>> = vec![Vec::new(); self.dim];
        for chunk in points.chunks(PREDICT_CHUNK) {
            let prep = self.prepare(chunk);
            let f = self.forward_with_jacobian(&prep, self.alpha)?;
            us.push(f.u);
            for (k, j) in f.jac.into_iter().enumerate() {
                jacs[k].push(j);
            }
        }
        let cat = |parts: &[Array2<f64>]| -> Array2<f64> {
            if parts.is_empty() {
                return Array2::zeros((0, self.dim));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).expect("same widths")
        };
        Ok(FieldEval { u: cat(&us), jac: jacs.iter().map(|j| cat(j)).collect() })
    }

    /// Loss value and its gradient over all parameters (exactly zero outside `subset`).
    pub fn loss_gradient(&self, prep: &Prepared, subset: Subset, alpha: AlphaPolicy, loss: &dyn FieldLoss) -> Result<(f64, Vec<f64>)> {
        if prep.n == 0 {
            return Err(Error::InvalidInput("empty collocation batch".into()));
        }
        self.params.check_finite()?;
        let mut tape = Tape::new();
        let gr = self.graph(&mut tape, prep, Some(subset), alpha);
        let field = FieldEval {
            u: tape.value(gr.u).clone(),
            jac: gr.jac.iter().map(|&j| tape.value(j).clone()).collect(),
        };
        let le = loss.evaluate(&field)?;
        if !le.value.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", le.value)));
        }
        let mut seeds = vec![(gr.u, le.d_u)];
        for (j, d) in gr.jac.iter().zip(le.d_jac) {
            seeds.push((*j, d));
        }
        let mut grads = tape.backward(seeds);
        let mut out = vec![0.0; self.params.len()];
        for (tensor, var) in gr.leaves {
            if let Some(g) = grads.take(var) {
                let r = self.params.layout[tensor].range();
                for (o, gv) in out[r].iter_mut().zip(g.iter()) {
                    *o += gv;
                }
            }
        }
        Ok((le.value, out))
    }

    /// One Adam step of `subset` on `loss`; returns the loss before the step.
    pub fn adam_step(&mut self, prep: &Prepared, alpha: AlphaPolicy, loss: &dyn FieldLoss, state: &mut AdamState, subset: Subset) -> Result<f64> {
        let (value, grad) = self.loss_gradient(prep, subset, alpha, loss)?;
        state.step(&mut self.params.values, &grad)?;
        Ok(value)
    }

    pub fn adam_state(&self, subset: Subset, config: AdamConfig) -> AdamState {
        AdamState::new(config, self.params.indices(subset))
    }

    /// Carries every parameter over as the starting point of the next cycle.
    pub fn warm_start(&self) -> PinnModel {
        self.clone()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.dim,
            self.config.fourier_features,
            self.config.hidden_width,
            self.config.hidden_layers,
            self.config.coef_width,
            self.config.residual_blocks,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.config.fourier_scale.to_le_bytes())?;
        w.write_all(&[matches!(self.alpha, AlphaPolicy::Evaluate) as u8])?;
        for e in self.extents {
            w.write_all(&e.to_le_bytes())?;
        }
        for b in self.fourier.iter() {
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params.values {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`PinnModel::write_checkpoint`]. The hard
    /// constraint is not stored and must be supplied.
    pub fn read_checkpoint<R: Read>(mut r: R, hard: HardConstraint) -> Result<PinnModel> {
        let io = |e: std::io::Error| Error::InvalidInput(format!("checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidInput("checkpoint: bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        let mut f64b = [0u8; 8];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32b).map_err(io)?;
            Ok(u32::from_le_bytes(u32b))
        };
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!("checkpoint: unsupported version {version}")));
        }
        let mut h = [0usize; 6];
        for x in &mut h {
            *x = read_u32(&mut r)? as usize;
        }
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f64b).map_err(io)?;
            Ok(f64::from_le_bytes(f64b))
        };
        let fourier_scale = read_f64(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io)?;
        let mut extents = [0.0; 3];
        for e in &mut extents {
            *e = read_f64(&mut r)?;
        }
        let [dim, fourier_features, hidden_width, hidden_layers, coef_width, residual_blocks] = h;
        if hard.dim != dim {
            return Err(Error::Shape(format!("checkpoint dimension {dim} does not match constraint dimension {}", hard.dim)));
        }
        let config = NetConfig { fourier_features, fourier_scale, hidden_width, hidden_layers, coef_width, residual_blocks };
        let mut fourier = Array2::zeros((fourier_features, dim));
        for b in fourier.iter_mut() {
            *b = read_f64(&mut r)?;
        }
        let (layout, mut params) = build_layout(&config, dim);
        let mut n8 = [0u8; 8];
        r.read_exact(&mut n8).map_err(io)?;
        let n = u64::from_le_bytes(n8) as usize;
        if n != params.len() {
            return Err(Error::Shape(format!("checkpoint holds {n} parameters, layout needs {}", params.len())));
        }
        for p in &mut params.values {
            *p = read_f64(&mut r)?;
        }
        let alpha = if flag[0] == 1 { AlphaPolicy::Evaluate } else { AlphaPolicy::Bypass };
        Ok(PinnModel { dim, config, extents, fourier, params, hard, alpha, layout })
    }

    /// Raw backbone output ũ at points (no coefficient, no hard constraint).
    pub fn backbone_output(&self, points: &[[f64; 3]]) -> Array2<f64> {
        let prep = self.prepare(points);
        let mut tape = Tape::new();
        let d = self.backbone_graph(&mut tape, &prep, false, &mut Vec::new());
        tape.take_value(d.v)
    }

    /// Coefficient output α at points.
    pub fn coefficient_output(&self, points: &[[f64; 3]]) -> Array2<f64> {
        let prep = self.prepare(points);
        let mut tape = Tape::new();
        let base = self.backbone_graph(&mut tape, &prep, false, &mut Vec::new());
        let a = self.coefficient_graph(&mut tape, &prep, &base, false, &mut Vec::new());
        tape.value(a.v).slice(s![.., ..]).to_owned()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DCPN";
const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig { fourier_features: 6, fourier_scale: 1.0, hidden_width: 8, hidden_layers: 3, coef_width: 5, residual_blocks: 2 }
    }

    fn cantilever_mesh() -> Mesh {
        Mesh::new(2, [12.0, 4.0, 0.0], [12, 4, 1], &[]).unwrap()
    }

    fn left_clamp() -> Vec<Support> {
        vec![Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 4.0, 0.0]))]
    }

    #[test]
    fn init_coefficient_is_one() {
        let mesh = cantilever_mesh();
        let m = PinnModel::for_mesh(3, &mesh, &left_clamp(), NetConfig::default()).unwrap();
        assert_eq!(m.config.fourier_features * 2, 360);
        let a = m.coefficient_output(&[[1.0, 2.0, 0.0], [11.0, 0.3, 0.0]]);
        assert!(a.iter().all(|&x| x == 1.0));
        let again = PinnModel::for_mesh(3, &mesh, &left_clamp(), NetConfig::default()).unwrap();
        assert_eq!(m.fourier, again.fourier);
        assert_eq!(m.params, again.params);
        assert!((m.coefficient_count() as f64) < 0.1 * m.backbone_count() as f64);
    }

    #[test]
    fn dirichlet_points_are_exact() {
        let mesh = cantilever_mesh();
        let mut m = PinnModel::for_mesh(9, &mesh, &left_clamp(), small()).unwrap();
        for v in m.params.values.iter_mut() {
            *v *= 3.0;
        }
        m.alpha = AlphaPolicy::Evaluate;
        let pts: Vec<[f64; 3]> = (0..9).map(|j| [0.0, j as f64 * 0.5, 0.0]).collect();
        let f = m.predict(&pts).unwrap();
        assert!(f.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_composition_without_constraint() {
        let m = PinnModel::new(1, 2, [2.0, 1.0, 0.0], HardConstraint::free(2), small()).unwrap();
        let pts = [[0.3, 0.7, 0.0], [1.9, 0.1, 0.0]];
        let f = m.predict(&pts).unwrap();
        assert_eq!(f.u, m.backbone_output(&pts));
    }

    #[test]
    fn hard_constraint_factors() {
        let mesh = Mesh::new(2, [15.0, 3.0, 0.0], [15, 3, 1], &[]).unwrap();
        let sup = vec![
            Support::clamped(Region::new([0.0, 0.0, 0.0], [0.0, 3.0, 0.0])),
            Support::clamped(Region::new([15.0, 0.0, 0.0], [15.0, 3.0, 0.0])),
        ];
        let hc = HardConstraint::new(&mesh, &sup).unwrap();
        let (l, dl) = hc.eval(&[5.0, 1.0, 0.0]);
        assert!((l[0] - (5.0 / 15.0) * (10.0 / 15.0)).abs() < 1e-15);
        let expect = (10.0 - 5.0) / (15.0 * 15.0);
        assert!((dl[0][0] - expect).abs() < 1e-15);
        assert_eq!(dl[0][1], 0.0);
        let bad = vec![
            Support { region: sup[0].region.clone(), fixed: [true; 3], value: [0.1, 0.0, 0.0] },
            sup[1].clone(),
        ];
        assert!(HardConstraint::new(&mesh, &bad).is_err());
    }

    #[test]
    fn grayscale_examples() {
        assert_eq!(grayscale(&[0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(grayscale(&[0.5; 4]).unwrap(), 1.0);
        assert_eq!(grayscale(&[0.5, 0.5, 1.0, 1.0]).unwrap(), 0.5);
        assert!(grayscale(&[]).is_err());
    }

    #[test]
    fn mode_policy() {
        let opt = OptConfig::default();
        assert_eq!(
            select_mode(0.06, 10, None, &opt),
            TrainingMode::BackboneOnly { epochs: 3000, alpha: AlphaPolicy::Bypass }
        );
        assert_eq!(
            select_mode(0.04, 20, Some(20), &opt),
            TrainingMode::BackboneOnly { epochs: 3000, alpha: AlphaPolicy::Evaluate }
        );
        assert_eq!(select_mode(0.04, 21, Some(20), &opt), TrainingMode::CoefficientOnly { epochs: 1000 });
        assert_eq!(select_mode(0.04, 22, Some(20), &opt), TrainingMode::CoefficientOnly { epochs: 1000 });
        assert_eq!(
            select_mode(0.04, 23, Some(20), &opt),
            TrainingMode::BackboneOnly { epochs: 3000, alpha: AlphaPolicy::Evaluate }
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mesh = cantilever_mesh();
        let mut m = PinnModel::for_mesh(5, &mesh, &left_clamp(), small()).unwrap();
        m.alpha = AlphaPolicy::Evaluate;
        m.params.values[3] = f64::from_bits(0x3ff0_0000_0000_0001);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = PinnModel::read_checkpoint(&buf[..], m.hard.clone()).unwrap();
        assert_eq!(back, m);
        assert!(PinnModel::read_checkpoint(&buf[..10], m.hard.clone()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(PinnModel::read_checkpoint(&bad[..], m.hard.clone()).is_err());
    }
}
