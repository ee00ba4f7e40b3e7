//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients on any set of outputs returns the
//! gradient of their (implicit) weighted sum with respect to every node.

use ndarray::{s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` with `b` a single row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Rows(Var, Vec<usize>),
    RowsOpt(Var, Vec<Option<usize>>),
    Cols(Var, usize, usize),
    SegmentMean {
        x: Var,
        segment: Vec<usize>,
        counts: Vec<usize>,
    },
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

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Rows(a, _)
            | Op::RowsOpt(a, _)
            | Op::Cols(a, _, _)
            | Op::SegmentMean { x: a, .. } => self.needs(*a),
            Op::LayerNorm { x, gain, bias, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*bias),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, by: f64) -> Var {
        let v = self.value(a) * by;
        self.push(v, Op::Scale(a, by))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learnable `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::Rows(a, idx.to_vec()))
    }

    /// Gathers rows; `None` produces a zero row.
    pub fn rows_opt(&mut self, a: Var, idx: &[Option<usize>]) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).assign(&src.row(i));
            }
        }
        self.push(v, Op::RowsOpt(a, idx.to_vec()))
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Cols(a, start, end))
    }

    /// Mean of the rows of `x` sharing a segment id, in ascending row order.
    ///
    /// Every id in `[0, count)` must occur at least once.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], count: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segment.len(), "one segment id per row");
        let mut out = Array2::zeros((count, xv.ncols()));
        let mut counts = vec![0usize; count];
        for (r, &sgm) in segment.iter().enumerate() {
            counts[sgm] += 1;
            let mut o = out.row_mut(sgm);
            o += &xv.row(r);
        }
        for (sgm, &c) in counts.iter().enumerate() {
            assert!(c > 0, "segment {sgm} has no rows");
            out.row_mut(sgm).mapv_inplace(|v| v / c as f64);
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                segment: segment.to_vec(),
                counts,
            },
        )
    }

    /// Back-propagates seed gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed shape must match its node");
            accumulate(&mut grads[v.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if need(b) {
                        accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                }
                Op::Scale(a, by) => accumulate(&mut grads[a.0], &g * *by),
                Op::Relu(a) => {
                    let mut da = g.clone();
                    da.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.dim());
                    for ((mut d, gr), yr) in da.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot = gr.dot(&yr);
                        for ((dv, &gv), &yv) in d.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let c = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        for j in 0..row.len() {
                            row[j] = inv_std[r] / c * (c * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                        }
                    }
                    if need(x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if need(gain) {
                        accumulate(&mut grads[gain.0], dgain);
                    }
                    if need(bias) {
                        accumulate(&mut grads[bias.0], dbias);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if need(p) {
                            accumulate(&mut grads[p.0], g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if need(p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::Rows(a, idx) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::RowsOpt(a, idx) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            let mut row = da.row_mut(i);
                            row += &g.row(r);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Cols(a, start, end) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[a.0], da);
                }
                Op::SegmentMean { x, segment, counts } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (r, &sgm) in segment.iter().enumerate() {
                        let scale = 1.0 / counts[sgm] as f64;
                        let mut row = dx.row_mut(r);
                        row.scaled_add(scale, &g.row(sgm));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            grads[idx] = Some(g);
        }
        Grads(grads)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {

    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(out ⊙ w))/d(input) against central differences for a
    /// graph built by `f` from a single input.
    fn check(input: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = crate::rng::stream(9, 9);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = f(&mut tape, x);
        let w = random(tape.value(y).nrows(), tape.value(y).ncols(), &mut rng);
        let grads = tape.backward(&[(y, w.clone())]);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
        let eval = |inp: &Array2<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(inp.clone());
            let y = f(&mut t, x);
            (t.value(y) * &w).sum()
        };
        let h = 1e-6;
        for idx in 0..input.len() {
            let mut p = input.clone();
            let mut m = input.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "idx {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn gradients_of_every_op() {
        let mut rng = crate::rng::stream(1, 2);
        let b = random(4, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        let x = random(5, 4, &mut rng);
        check(x.clone(), |t, x| {
            let b = t.leaf(b.clone());
            t.matmul(x, b)
        });
        check(x.clone(), |t, x| t.matmul_bt(x, x));
        check(x.clone(), |t, x| {
            let y = t.scale(x, -0.7);
            t.add(x, y)
        });
        check(random(5, 3, &mut rng), |t, x| {
            let r = t.leaf(row.clone());
            t.add_row(x, r)
        });
        check(x.clone(), |t, x| t.relu(x));
        check(x.clone(), |t, x| t.softmax_rows(x));
        check(x.clone(), |t, x| {
            let g = t.leaf(array![[1.0, 0.5, -2.0, 0.3]]);
            let b = t.leaf(array![[0.1, 0.2, 0.3, 0.4]]);
            t.layer_norm(x, g, b)
        });
        check(x.clone(), |t, x| {
            let a = t.rows(x, &[4, 0, 0]);
            let c = t.cols(x, 1, 3);
            let c = t.rows_opt(c, &[None, Some(2), Some(2)]);
            let d = t.concat_cols(&[a, c]);
            let e = x.clone_cols(t);
            t.concat_rows(&[d, e])
        });
        check(x, |t, x| t.segment_mean(x, &[1, 0, 1, 2, 1], 3));
    }

    trait CloneCols {
        fn clone_cols(self, t: &mut Tape) -> Var;
    }

    impl CloneCols for Var {
        fn clone_cols(self, t: &mut Tape) -> Var {
            let a = t.cols(self, 0, 2);
            let b = t.cols(self, 2, 4);
            let left = t.concat_cols(&[a, b]);
            let right = t.cols(self, 0, 2);
            t.concat_cols(&[left, right])
        }
    }

    #[test]
    fn softmax_single_element_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.7]]);
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y)[[0, 0]], 1.0);
    }

    #[test]
    fn segment_mean_averages() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 6.0], [5.0, 5.0]]);
        let y = t.segment_mean(x, &[0, 0, 1], 2);
        assert_eq!(t.value(y), &array![[2.0, 4.0], [5.0, 5.0]]);
    }

    #[test]
    fn empty_row_sets_flow_through() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((0, 3)));
        let q = t.leaf(array![[1.0, 2.0, 3.0]]);
        let y = t.concat_rows(&[x, q]);
        let s = t.matmul_bt(y, y);
        let p = t.softmax_rows(s);
        assert_eq!(t.value(p).dim(), (1, 1));
        let g = t.backward(&[(p, array![[1.0]])]);
        assert_eq!(g.get(x).unwrap().dim(), (0, 3));
    }
}
