//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`] without copying; [`Graph::backward`]
//! returns gradients for every parameter that took part in the pass.

use ndarray::{Array2, Axis, Zip};

use super::params::ParamStore;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    LnClamped { x: Var, eps: f64 },
    SumAll(Var),
    RowSums(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Array2<f64>>,
    op: Op,
}

/// Gradients of a scalar with respect to every parameter of a store.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            params: vec![None; store.len()],
        }
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(scale, src),
                    None => *dst = Some(src * scale),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            *g *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    /// Parameter index -> node, so each parameter appears once per graph.
    param_nodes: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(i)) => self.store.get(*i),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(index) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[index] = Some(v);
        v
    }

    /// A constant copy of `x`: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows { x, inv_std })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(max(x, eps))`; no gradient flows through clamped entries.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).mapv(|v| v.max(eps).ln());
        self.push(v, Op::LnClamped { x, eps })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `N x 1` column of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Each row divided by `max(||row||, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row /= n.max(eps);
        }
        self.push(out, Op::NormalizeRows { x, norms, eps })
    }

    /// Gradients of the scalar node `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(acc) => *acc += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => out.params[*i] = Some(g),
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    send(*a, g.dot(self.value(*b)));
                    send(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, &g * self.value(*b));
                    send(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, gr);
                    send(*a, &g * self.value(*row));
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::AddConst(a) => send(*a, g),
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = &g * y;
                    let dots = d.sum_axis(Axis(1));
                    Zip::from(d.rows_mut()).and(y.rows()).and(&dots).for_each(|mut dr, yr, &s| {
                        dr.scaled_add(-s, &yr);
                    });
                    send(*a, d);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = node.value.as_ref().unwrap();
                    let cols = y.ncols() as f64;
                    let mut d = g.clone();
                    for ((mut dr, yr), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = dr.sum() / cols;
                        let mean_gy = dr.dot(&yr) / cols;
                        Zip::from(&mut dr).and(&yr).for_each(|dv, &yv| {
                            *dv = inv * (*dv - mean_g - yv * mean_gy);
                        });
                    }
                    send(*x, d);
                }
                Op::Gelu(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&gv, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    });
                    send(*a, d);
                }
                Op::Silu(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&gv, &x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * (s + x * s * (1.0 - s))
                    });
                    send(*a, d);
                }
                Op::Exp(a) => send(*a, &g * node.value.as_ref().unwrap()),
                Op::LnClamped { x, eps } => {
                    let d = Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gv, &xv| if xv > *eps { gv / xv } else { 0.0 });
                    send(*x, d);
                }
                Op::SumAll(a) => {
                    let dim = self.value(*a).dim();
                    send(*a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::RowSums(a) => {
                    let dim = self.value(*a).dim();
                    let d = Array2::from_shape_fn(dim, |(i, _)| g[[i, 0]]);
                    send(*a, d);
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        send(*p, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::NormalizeRows { x, norms, eps } => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g.clone();
                    for ((mut dr, yr), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        if n > *eps {
                            let proj = dr.dot(&yr);
                            dr.scaled_add(-proj, &yr);
                            dr /= n;
                        } else {
                            dr /= *eps;
                        }
                    }
                    send(*x, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(param 0) for a graph builder.
    fn check(build: impl Fn(&mut Graph) -> Var, shape: (usize, usize), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("p", rand_mat(&mut rng, shape.0, shape.1));
        let analytic = {
            let mut g = Graph::new(&store);
            let loss = build(&mut g);
            g.backward(loss).params[0].clone().unwrap()
        };
        let h = 1e-6;
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(0)[[i, j]] += delta;
                    let mut g = Graph::new(&s);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "({i},{j}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn weights(g: &mut Graph, r: usize, c: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(rand_mat(&mut rng, r, c))
    }

    #[test]
    fn matmul_family() {
        check(|g| {
            let p = g.param(0);
            let w = weights(g, 4, 3, 1);
            let y = g.matmul(p, w);
            let yt = g.matmul_t(y, y);
            let t = g.transpose(yt);
            let m = g.mul(t, yt);
            g.sum_all(m)
        }, (5, 4), 10);
    }

    #[test]
    fn softmax_and_layernorm() {
        check(|g| {
            let p = g.param(0);
            let w = weights(g, 3, 6, 2);
            let s = g.softmax_rows(p);
            let n = g.layer_norm_rows(p, 1e-5);
            let a = g.mul(s, w);
            let b = g.mul(n, w);
            let c = g.add(a, b);
            let d = g.mul(c, c);
            g.sum_all(d)
        }, (3, 6), 11);
    }

    #[test]
    fn pointwise_ops() {
        check(|g| {
            let p = g.param(0);
            let a = g.gelu(p);
            let b = g.silu(p);
            let c = g.exp(p);
            let sm = g.softmax_rows(p);
            let l = g.ln_clamped(sm, 1e-12);
            let s1 = g.sub(a, b);
            let s2 = g.mul(s1, c);
            let s3 = g.add(s2, l);
            let s4 = g.scale(s3, 0.7);
            let s5 = g.add_const(s4, 2.0);
            let rs = g.row_sums(s5);
            let sq = g.mul(rs, rs);
            g.mean_all(sq)
        }, (4, 5), 12);
    }

    #[test]
    fn broadcast_slice_concat_normalize() {
        check(|g| {
            let p = g.param(0);
            let row = g.slice_cols(p, 0, 3);
            let row = g.transpose(row);
            let row = g.slice_cols(row, 0, 1);
            let row = g.transpose(row);
            let x = weights(g, 5, 3, 3);
            let a = g.add_row(x, row);
            let b = g.mul_row(a, row);
            let c = g.concat_cols(&[a, b, p]);
            let n = g.normalize_rows(c, 1e-8);
            let s = g.matmul_t(n, n);
            let w = weights(g, 5, 5, 4);
            let m = g.mul(s, w);
            g.sum_all(m)
        }, (5, 3), 13);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        store.add("p", Array2::from_elem((2, 2), 1.5));
        let mut g = Graph::new(&store);
        let p = g.param(0);
        let d = g.detach(p);
        let m = g.mul(d, d);
        let s = g.sum_all(m);
        let p2 = g.sum_all(p);
        let loss = g.add(s, p2);
        let grads = g.backward(loss);
        assert_eq!(grads.params[0].as_ref().unwrap(), &Array2::<f64>::ones((2, 2)));
    }
}
