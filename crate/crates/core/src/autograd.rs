//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every model in the crate (fusion autoencoder, meta-learner bodies, the
//! matching-network embedder) is written against this tape so that a single
//! backward implementation serves all of them and can be checked against
//! finite differences.

use ndarray::{concatenate, s, Array2, Axis};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    SegmentMean(Var, usize),
    SegmentMax(Var, usize, Vec<usize>),
    Maximum(Var, Var),
    BroadcastRows(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>, Matrix),
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`, or zeros if the output does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shapes[v.0]),
        }
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax; entries where `mask` is false receive weight 0.
pub fn softmax_rows(x: &Matrix, mask: Option<&Array2<bool>>) -> Matrix {
    let mut out = x.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let allowed = |c: usize| mask.is_none_or(|m| m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| allowed(*c))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, v) in row.iter_mut().enumerate() {
            if allowed(c) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
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

    /// `a + bias` with a `[1 × n]` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let v = softmax_rows(self.value(a), mask);
        self.push(v, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Mean over consecutive blocks of `seg` rows: `[k·seg × n] -> [k × n]`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = shape(x);
        assert!(seg > 0 && rows % seg == 0, "segment_mean: {rows} rows not divisible by {seg}");
        let mut v = Matrix::zeros((rows / seg, cols));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut out = v.row_mut(r / seg);
            out += &row;
        }
        v /= seg as f64;
        self.push(v, Op::SegmentMean(a, seg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).nrows();
        self.segment_mean(a, rows)
    }

    /// Max over consecutive blocks of `seg` rows; ties go to the first row.
    pub fn segment_max(&mut self, a: Var, seg: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = shape(x);
        assert!(seg > 0 && rows % seg == 0, "segment_max: {rows} rows not divisible by {seg}");
        let k = rows / seg;
        let mut v = Matrix::zeros((k, cols));
        let mut arg = vec![0usize; k * cols];
        for b in 0..k {
            for c in 0..cols {
                let mut best = b * seg;
                for r in b * seg + 1..(b + 1) * seg {
                    if x[[r, c]] > x[[best, c]] {
                        best = r;
                    }
                }
                v[[b, c]] = x[[best, c]];
                arg[b * cols + c] = best;
            }
        }
        self.push(v, Op::SegmentMax(a, seg, arg))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        self.push(v, Op::Maximum(a, b))
    }

    /// Replicate a `[1 × n]` row into `[rows × n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "broadcast_rows expects a single row");
        let v = x.broadcast((rows, x.ncols())).unwrap().to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean squared error over all elements, as a `[1 × 1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a) - self.value(b);
        let v = Matrix::from_elem((1, 1), d.mapv(|x| x * x).mean().unwrap_or(0.0));
        self.push(v, Op::Mse(a, b))
    }

    /// Mean softmax cross-entropy of `logits` against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), labels.len(), "cross_entropy: one label per row");
        let probs = softmax_rows(x, None);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Matrix::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec(), probs))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut v = x.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        self.push(v, Op::L2NormalizeRows(a, norms))
    }

    /// Back-propagate from `output`, seeding its gradient with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Matrix::ones(self.nodes[output.0].value.dim()));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, -&dy);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &dy * self.value(*b));
                    acc(&mut grads, *b, &dy * self.value(*a));
                }
                Op::AddRow(a, bias) => {
                    acc(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &dy * *f),
                Op::MulConst(a, c) => acc(&mut grads, *a, &dy * c),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let g = ndarray::Zip::from(&dy)
                        .and(x)
                        .map_collect(|&d, &x| if x > 0.0 { d } else { 0.0 });
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = ndarray::Zip::from(&dy).and(y).map_collect(|&d, &t| d * (1.0 - t * t));
                    acc(&mut grads, *a, g);
                }
                Op::Ln(a) => {
                    let g = &dy / self.value(*a);
                    acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = ndarray::Zip::from(&dy).and(y).map_collect(|&d, &s| d * s * (1.0 - s));
                    acc(&mut grads, *a, g);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dy.t().to_owned()),
                Op::Softmax(a) => {
                    let mut g = &dy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, dy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, dy.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, s0, e0) => {
                    let mut g = Matrix::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *s0..*e0]).assign(&dy);
                    acc(&mut grads, *a, g);
                }
                Op::SliceRows(a, s0, e0) => {
                    let mut g = Matrix::zeros(self.value(*a).dim());
                    g.slice_mut(s![*s0..*e0, ..]).assign(&dy);
                    acc(&mut grads, *a, g);
                }
                Op::SegmentMean(a, seg) => {
                    let (rows, cols) = self.value(*a).dim();
                    let mut g = Matrix::zeros((rows, cols));
                    for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                        row.assign(&dy.row(r / seg));
                    }
                    g /= *seg as f64;
                    acc(&mut grads, *a, g);
                }
                Op::SegmentMax(a, _seg, arg) => {
                    let cols = dy.ncols();
                    let mut g = Matrix::zeros(self.value(*a).dim());
                    for b in 0..dy.nrows() {
                        for c in 0..cols {
                            g[[arg[b * cols + c], c]] += dy[[b, c]];
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Maximum(a, b) => {
                    let xa = self.value(*a);
                    let xb = self.value(*b);
                    let ga = ndarray::Zip::from(&dy)
                        .and(xa)
                        .and(xb)
                        .map_collect(|&d, &p, &q| if p >= q { d } else { 0.0 });
                    let gb = &dy - &ga;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Sum(a) => {
                    let d = dy[[0, 0]];
                    acc(&mut grads, *a, Matrix::from_elem(self.value(*a).dim(), d));
                }
                Op::Mse(a, b) => {
                    let d = self.value(*a) - self.value(*b);
                    let n = d.len().max(1) as f64;
                    let g = d * (2.0 * dy[[0, 0]] / n);
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::CrossEntropy(logits, labels, probs) => {
                    let mut g = probs.clone();
                    for (r, &lab) in labels.iter().enumerate() {
                        g[[r, lab]] -= 1.0;
                    }
                    g *= dy[[0, 0]] / labels.len() as f64;
                    acc(&mut grads, *logits, g);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut g = dy.clone();
                    for ((mut grow, yrow), n) in g.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dot = grow.dot(&yrow);
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - yv * dot) / n);
                    }
                    acc(&mut grads, *a, g);
                }
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.dim()).collect();
        Gradients { grads, shapes }
    }
}
