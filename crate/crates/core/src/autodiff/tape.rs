//! Reverse-mode tape over dense matrices.
//!
//! Every node holds a full `rows × cols` value so a whole batch of samples
//! flows through one node. Binary elementwise ops broadcast any axis of
//! length 1, and the backward pass sums gradients back over broadcast axes.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::real::{sigmoid, softplus};
use super::store::{ParamStore, SliceId};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(SliceId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sigmoid(Var),
    Powi(Var, i32),
    MaxConst(Var, f64),
    Abs(Var),
    Sum(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation over parameters drawn from a [`ParamStore`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    error: Option<AutodiffError>,
}

/// Sums `g` over the axes along which an input of `shape` was broadcast.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn row_logsumexp(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), 1));
    for (row, o) in x.rows().into_iter().zip(out.iter_mut()) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            *o = m;
            continue;
        }
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        *o = m + s.ln();
    }
    out
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let lse = row_logsumexp(x);
    let mut out = x.clone();
    for (mut row, l) in out.rows_mut().into_iter().zip(lse.iter()) {
        row.mapv_inplace(|v| (v - l).exp());
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            error: None,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn fail(&mut self, err: AutodiffError) {
        if self.error.is_none() {
            self.error = Some(err);
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes[v.0].value)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_view(&mut self, value: ArrayView2<'_, f64>) -> Var {
        self.push(value.to_owned(), Op::Const)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.push(Array2::from_elem((1, 1), v), Op::Const)
    }

    /// Leaf bound to a parameter slice; its gradient lands in the flat
    /// gradient vector returned by [`Tape::backward`].
    pub fn param(&mut self, id: SliceId) -> Var {
        let value = self.store.view(id).to_owned();
        self.push(value, Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let denom = &self.nodes[b.0].value;
        let bad = denom.iter().copied().find(|&d| d == 0.0);
        let v = &self.nodes[a.0].value / denom;
        if let Some(bad) = bad {
            self.fail(AutodiffError::Domain { op: "div", value: bad });
        }
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Adds the constant `c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::Shift(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `a` a batch of row vectors and `b` a weight matrix
    /// this is the usual dense layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let bad = x.iter().copied().find(|&v| v <= 0.0 || v.is_nan());
        let v = x.mapv(f64::ln);
        if let Some(bad) = bad {
            self.fail(AutodiffError::Domain { op: "ln", value: bad });
        }
        self.push(v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powi(n));
        self.push(v, Op::Powi(a, n))
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::MaxConst(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, `r × c → r × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Per-row `log Σ exp`, evaluated with the max-subtraction trick.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = row_logsumexp(&self.nodes[a.0].value);
        self.push(v, Op::LogSumExpRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = row_softmax(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Column `j` as an `r × 1` node.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = self.nodes[a.0].value.column(j).to_owned().insert_axis(Axis(1));
        self.push(v, Op::Column(a, j))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Reverse sweep from a `1 × 1` output. Returns the output value and
    /// the gradient with respect to every entry of the parameter store.
    pub fn backward(&self, output: Var) -> Result<(f64, Vec<f64>), AutodiffError> {
        if let Some(err) = &self.error {
            return Err(err.clone());
        }
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { rows: r, cols: c });
        }
        let value = self.scalar(output);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite);
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut flat = self.store.zeros_like();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let sl = self.store.slice(*id);
                    for (dst, src) in flat[sl.range()].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (shape_of(val(*a)), shape_of(val(*b)));
                    acc(&mut grads, *b, reduce_to(g.clone(), sb));
                    acc(&mut grads, *a, reduce_to(g, sa));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (shape_of(val(*a)), shape_of(val(*b)));
                    acc(&mut grads, *b, reduce_to(-&g, sb));
                    acc(&mut grads, *a, reduce_to(g, sa));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = reduce_to(&g * vb, shape_of(va));
                    let gb = reduce_to(&g * va, shape_of(vb));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = &g / vb;
                    let gb = -(&ga * &node.value);
                    acc(&mut grads, *a, reduce_to(ga, shape_of(va)));
                    acc(&mut grads, *b, reduce_to(gb, shape_of(vb)));
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(val(*b));
                    let gb = g.t().dot(val(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Ln(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &s| *g *= s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Powi(a, n) => {
                    let mut ga = g;
                    let n = *n;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|g, &x| *g *= if n == 0 { 0.0 } else { n as f64 * x.powi(n - 1) });
                    acc(&mut grads, *a, ga);
                }
                Op::MaxConst(a, k) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x < *k {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x < 0.0 {
                            *g = -*g
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(shape_of(val(*a)), s));
                }
                Op::RowSum(a) => {
                    let ga = g.broadcast(shape_of(val(*a))).expect("row broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let mut ga = x.clone();
                    for ((mut row, l), gr) in ga.rows_mut().into_iter().zip(node.value.iter()).zip(g.iter()) {
                        row.mapv_inplace(|v| gr * (v - l).exp());
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let gs = &g * s;
                    let dot = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = gs - &(s * &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        start += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Column(a, j) => {
                    let mut ga = Array2::zeros(shape_of(val(*a)));
                    ga.column_mut(*j).assign(&g.column(0));
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.reversed_axes()),
            }
        }
        Ok((value, flat))
    }
}

/// Evaluates a scalar objective built on a fresh tape and returns its value
/// together with the gradient over every parameter in `store`.
pub fn eval_with_param_grad<F>(store: &ParamStore, objective: F) -> Result<(f64, Vec<f64>), AutodiffError>
where
    F: FnOnce(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let out = objective(&mut tape);
    tape.backward(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store1(v: f64) -> (ParamStore, SliceId) {
        let mut s = ParamStore::new();
        let id = s.push("p", 1, 1, &[v]);
        (s, id)
    }

    #[test]
    fn square_at_three() {
        let (s, id) = store1(3.0);
        let (v, g) = eval_with_param_grad(&s, |t| {
            let p = t.param(id);
            t.mul(p, p)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let (s, id) = store1(0.0);
        let (v, g) = eval_with_param_grad(&s, |t| {
            let p = t.param(id);
            t.softplus(p)
        })
        .unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ln_of_nonpositive_is_domain_error() {
        let (s, id) = store1(-1.0);
        let err = eval_with_param_grad(&s, |t| {
            let p = t.param(id);
            t.ln(p)
        })
        .unwrap_err();
        assert!(matches!(err, AutodiffError::Domain { op: "ln", .. }));

        let (s, id) = store1(0.0);
        let err = eval_with_param_grad(&s, |t| {
            let one = t.scalar_constant(1.0);
            let p = t.param(id);
            t.div(one, p)
        })
        .unwrap_err();
        assert!(matches!(err, AutodiffError::Domain { op: "div", .. }));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut s = ParamStore::new();
        let id = s.push("w", 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let err = eval_with_param_grad(&s, |t| t.param(id)).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarOutput { rows: 2, cols: 2 }));
    }

    /// Central differences over every parameter of an objective exercising
    /// broadcasting, matrix products and the row-wise reductions.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut s = ParamStore::new();
        let w = s.push("w", 3, 2, &[0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        let b = s.push("b", 1, 3, &[0.05, -0.1, 0.2]);
        let k = s.push("k", 1, 1, &[1.3]);
        let x = array![[0.2, -1.0], [0.7, 0.4], [-0.3, 0.9], [1.1, -0.6]];

        let build = |t: &mut Tape<'_>| {
            let xv = t.constant(x.clone());
            let wv = t.param(w);
            let bv = t.param(b);
            let kv = t.param(k);
            let z = t.matmul_nt(xv, wv);
            let z = t.add(z, bv);
            let h = t.softplus(z);
            let s1 = t.sigmoid(z);
            let h = t.mul(h, s1);
            let kk = t.softplus(kv);
            let hz = t.mul(h, kk);
            let hz = t.neg(hz);
            let l = t.logsumexp_rows(hz);
            let sm = t.softmax_rows(hz);
            let c0 = t.column(sm, 0);
            let p = t.powi(c0, 3);
            let e = t.exp(l);
            let e = t.shift(e, 2.0);
            let lg = t.ln(e);
            let q = t.div(p, e);
            let tr = t.transpose(q);
            let rs = t.row_sum(tr);
            let m = t.max_const(lg, 0.7);
            let a = t.abs(l);
            let cat = t.concat_cols(&[m, a, q]);
            let cat = t.scale(cat, 0.5);
            let s_all = t.sum(cat);
            let s_rs = t.sum(rs);
            let both = t.sub(s_all, s_rs);
            let mm = t.matmul(tr, lg);
            let mm = t.sum(mm);
            t.add(both, mm)
        };
        let (v0, g) = eval_with_param_grad(&s, build).unwrap();
        let h = 1e-6;
        for (i, &gi) in g.iter().enumerate() {
            let mut sp = s.clone();
            sp.values_mut()[i] += h;
            let mut sm = s.clone();
            sm.values_mut()[i] -= h;
            let fp = eval_with_param_grad(&sp, build).unwrap().0;
            let fm = eval_with_param_grad(&sm, build).unwrap().0;
            let num = (fp - fm) / (2.0 * h);
            let rel = (num - gi).abs() / num.abs().max(gi.abs()).max(1e-8);
            assert!(rel < 1e-6, "param {i}: analytic {gi} numeric {num} (value {v0})");
        }
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let mut s = ParamStore::new();
        let row = s.push("row", 1, 3, &[1.0, 2.0, 3.0]);
        let col = s.push("col", 2, 1, &[10.0, 20.0]);
        let (_, g) = eval_with_param_grad(&s, |t| {
            let r = t.param(row);
            let c = t.param(col);
            let m = t.mul(r, c);
            t.sum(m)
        })
        .unwrap();
        // d/d row_j = Σ_i col_i = 30; d/d col_i = Σ_j row_j = 6.
        assert_eq!(g, vec![30.0, 30.0, 30.0, 6.0, 6.0]);
    }

    #[test]
    fn deterministic_bitwise() {
        let mut s = ParamStore::new();
        let w = s.push("w", 2, 2, &[0.1, 0.2, -0.3, 0.4]);
        let f = |t: &mut Tape<'_>| {
            let p = t.param(w);
            let e = t.exp(p);
            let l = t.logsumexp_rows(e);
            t.sum(l)
        };
        let a = eval_with_param_grad(&s, f).unwrap();
        let b = eval_with_param_grad(&s, f).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
