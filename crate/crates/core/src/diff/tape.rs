//! Reverse-mode tape over dense 2-D arrays.
//!
//! Every node holds its value; `backward` sweeps the tape once in reverse and
//! returns gradients for leaves that were created with `requires_grad`.
//! Forward tangents (spatial derivatives) are ordinary nodes on the tape, so
//! the reverse sweep differentiates through them as well.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a · bᵀ with a (n×k), b (m×k).
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a + r, r a (1×m) row broadcast over rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// a + c, c a (n×1) column broadcast over columns.
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    /// 1 - a².
    OneMinusSq(Var),
    Square(Var),
    /// 1/√a.
    Rsqrt(Var),
    /// Row mean, result (n×1).
    RowMean(Var),
    /// Columns `[start, end)`.
    Columns(Var, usize, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves that required them, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Array2<f64> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) + self.value(col);
        let ng = self.ng(&[a, col]);
        self.push(v, Op::AddCol(a, col), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let ng = self.ng(&[a, col]);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn one_minus_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::OneMinusSq(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x.sqrt());
        let ng = self.ng(&[a]);
        self.push(v, Op::Rsqrt(a), ng)
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(1)).expect("row mean of empty matrix").insert_axis(Axis(1));
        let ng = self.ng(&[a]);
        self.push(v, Op::RowMean(a), ng)
    }

    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(&[a]);
        self.push(v, Op::Columns(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Reverse sweep from the given seeds (∂loss/∂node for each seeded node).
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads, v, g);
                start = start.max(v.0 + 1);
            }
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Array2<f64>, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => {}
            Op::MatMulT(a, b) => {
                if ng(b) {
                    let gb = g.t().dot(self.value(*a));
                    accumulate(grads, *b, gb);
                }
                if ng(a) {
                    let ga = g.dot(self.value(*b));
                    accumulate(grads, *a, ga);
                }
            }
            Op::Add(a, b) => {
                if ng(a) && ng(b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if ng(a) {
                    accumulate(grads, *a, g);
                } else if ng(b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if ng(b) {
                    accumulate(grads, *b, -&g);
                }
                if ng(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if ng(a) {
                    accumulate(grads, *a, &g * self.value(*b));
                }
                if ng(b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                if ng(r) {
                    accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ng(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulRow(a, r) => {
                if ng(r) {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *r, gr);
                }
                if ng(a) {
                    accumulate(grads, *a, g * self.value(*r));
                }
            }
            Op::AddCol(a, c) => {
                if ng(c) {
                    accumulate(grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                if ng(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulCol(a, c) => {
                if ng(c) {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(grads, *c, gc);
                }
                if ng(a) {
                    accumulate(grads, *a, g * self.value(*c));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Tanh(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|x, &y| *x *= 1.0 - y * y);
                accumulate(grads, *a, ga);
            }
            Op::OneMinusSq(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(self.value(*a)).for_each(|x, &y| *x *= -2.0 * y);
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(self.value(*a)).for_each(|x, &y| *x *= 2.0 * y);
                accumulate(grads, *a, ga);
            }
            Op::Rsqrt(a) => {
                // d(x^-1/2) = -1/2 x^-3/2 = -1/2 y³
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|x, &y| *x *= -0.5 * y * y * y);
                accumulate(grads, *a, ga);
            }
            Op::RowMean(a) => {
                let cols = self.value(*a).ncols();
                let ga = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]] / cols as f64);
                accumulate(grads, *a, ga);
            }
            Op::Columns(a, start, end) => {
                let shape = self.value(*a).raw_dim();
                let mut ga = Array2::zeros(shape);
                ga.slice_mut(s![.., *start..*end]).assign(&g);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if ng(p) {
                        accumulate(grads, *p, g.slice(s![.., c..c + w]).to_owned());
                    }
                    c += w;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_sum(t: &Tape, v: Var) -> f64 {
        t.value(v).sum()
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn fd(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn graph(x: &Array2<f64>, w: &Array2<f64>) -> (Tape, Var, Var, Var) {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let wv = t.leaf(w.clone(), true);
        let a = t.matmul_t(xv, wv);
        let h = t.tanh(a);
        let s = t.one_minus_sq(h);
        let m = t.row_mean(s);
        let c = t.add_col(h, m);
        let sq = t.square(c);
        let shifted = t.add_scalar(sq, 0.5);
        let r = t.rsqrt(shifted);
        let p = t.mul_col(r, m);
        let col = t.columns(p, 1, 2);
        let cat = t.concat_cols(&[p, col, h]);
        let sc = t.scale(cat, 0.7);
        let out = t.mul(sc, sc);
        (t, xv, wv, out)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]];
        let w = array![[0.2, -0.1, 0.3], [0.5, 0.2, -0.4], [-0.3, 0.1, 0.2]];
        let (t, xv, wv, out) = graph(&x, &w);
        let seed = Array2::ones(t.value(out).raw_dim());
        let g = t.backward(vec![(out, seed)]);
        let fx = fd(&x, |xx| {
            let (t, _, _, o) = graph(xx, &w);
            scalar_sum(&t, o)
        });
        let fw = fd(&w, |ww| {
            let (t, _, _, o) = graph(&x, ww);
            scalar_sum(&t, o)
        });
        for (a, b) in g.get(xv).unwrap().iter().zip(fx.iter()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
        for (a, b) in g.get(wv).unwrap().iter().zip(fw.iter()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn row_broadcasts_and_constants() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]], true);
        let r = t.leaf(array![[0.5, -1.0]], true);
        let k = t.constant(array![[2.0, 2.0], [2.0, 2.0]]);
        let m = t.mul_row(a, r);
        let s = t.add_row(m, r);
        let d = t.sub(s, k);
        let e = t.add(d, k);
        let g = t.backward(vec![(e, Array2::ones((2, 2)))]);
        assert_eq!(g.get(r).unwrap(), &array![[1.0 + 3.0 + 2.0, 2.0 + 4.0 + 2.0]]);
        assert_eq!(g.get(a).unwrap(), &array![[0.5, -1.0], [0.5, -1.0]]);
        assert!(g.get(k).is_none());
    }

    #[test]
    fn constants_do_not_need_grad() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0]]);
        let b = t.tanh(a);
        assert!(!t.requires_grad(b));
        let g = t.backward(vec![(b, array![[1.0]])]);
        assert!(g.get(a).is_none());
    }
}
