//! Classifier bodies over latent traces.
//!
//! The transformer body treats the latent vectors of one forward call as a
//! token sequence: each latent trace is one token, self-attention mixes
//! information across the episode, and each token's input and attention
//! output are pooled (mean or elementwise max) before dropout and the
//! fully connected head. Query tokens only see the support tokens and
//! themselves, so evaluating all queries at once is equivalent to
//! evaluating them one at a time.

use ndarray::{s, Array2, Axis};
use rand::Rng as _;

use super::{Body, LearnerConfig, Pooling};
use crate::attention::{multihead_on, AttentionParams};
use crate::autograd::{softmax_rows, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, BoundParams, ParamSet};
use crate::rng::{self, Rng};

const ATTN: &str = "body.attn";

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLearnerParams {
    pub config: LearnerConfig,
    pub tensors: ParamSet,
}

/// Latent vectors to classify plus their labels.
///
/// Rows `[0, context)` are context tokens that attend to each other; every
/// later row attends to the context and to itself. Labels cover rows from
/// `target_start` on.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub context: usize,
    pub target_start: usize,
}

impl Batch {
    /// Every row is both context and target.
    pub fn support(x: Matrix, labels: Vec<usize>) -> Self {
        let n = x.nrows();
        Self {
            x,
            labels,
            context: n,
            target_start: 0,
        }
    }

    /// Query rows appended after the support rows, which act as context.
    pub fn query(support: &Matrix, query: &Matrix, labels: Vec<usize>) -> Self {
        let x = ndarray::concatenate(ndarray::Axis(0), &[support.view(), query.view()])
            .expect("support and query widths agree");
        Self {
            x,
            labels,
            context: support.nrows(),
            target_start: support.nrows(),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.x.nrows() - self.target_start
    }

    pub(crate) fn attention_mask(&self) -> Option<Array2<bool>> {
        let n = self.x.nrows();
        (self.context < n).then(|| Array2::from_shape_fn((n, n), |(r, c)| c < self.context || c == r))
    }
}

impl MetaLearnerParams {
    pub fn init(config: &LearnerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let n = config.n_classes;
        let mut r = rng::stream(config.seed, "learner.init", 0);
        let mut t = ParamSet::new();
        let head_in = match config.body {
            Body::TransformerEncoder => {
                AttentionParams::init(d, config.n_heads, &mut r)?.insert_into(ATTN, &mut t);
                d
            }
            Body::Linear => {
                t.insert("body.w", uniform_fan_in(d, d, d, &mut r));
                t.insert("body.b", uniform_fan_in(1, d, d, &mut r));
                d
            }
            Body::Rnn => {
                let h = config.hidden;
                t.insert("body.w_ih", uniform_fan_in(1, h, h, &mut r));
                t.insert("body.w_hh", uniform_fan_in(h, h, h, &mut r));
                t.insert("body.b_h", uniform_fan_in(1, h, h, &mut r));
                h
            }
            Body::Lstm => {
                let h = config.hidden;
                t.insert("body.w_ih", uniform_fan_in(1, 4 * h, h, &mut r));
                t.insert("body.w_hh", uniform_fan_in(h, 4 * h, h, &mut r));
                t.insert("body.b", uniform_fan_in(1, 4 * h, h, &mut r));
                h
            }
            Body::Cnn => {
                let c = config.conv_channels;
                t.insert("body.w_conv", uniform_fan_in(3, c, 3, &mut r));
                t.insert("body.b_conv", uniform_fan_in(1, c, 3, &mut r));
                c
            }
        };
        // A zero head treats every class alike before adaptation, so the
        // first inner step moves each class row toward its support mean.
        t.insert("fc.w", Matrix::zeros((head_in, n)));
        t.insert("fc.b", Matrix::zeros((1, n)));
        Ok(Self {
            config: config.clone(),
            tensors: t,
        })
    }

    pub fn with_tensors(&self, tensors: ParamSet) -> Self {
        Self {
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn attention(&self) -> Option<AttentionParams> {
        (self.config.body == Body::TransformerEncoder)
            .then(|| AttentionParams::from_params(ATTN, &self.tensors, self.config.n_heads).ok())
            .flatten()
    }
}

fn check_batch(cfg: &LearnerConfig, batch: &Batch) -> Result<()> {
    if batch.x.ncols() != cfg.d_model {
        return Err(Error::shape("learner input width", cfg.d_model, batch.x.ncols()));
    }
    if batch.x.nrows() == 0 || batch.target_start >= batch.x.nrows() {
        return Err(Error::shape("learner batch", "at least one target row", 0));
    }
    if batch.context == 0 || batch.context > batch.x.nrows() {
        return Err(Error::shape("learner context rows", format!("1..={}", batch.x.nrows()), batch.context));
    }
    if !batch.labels.is_empty() {
        if batch.labels.len() != batch.n_targets() {
            return Err(Error::shape("learner labels", batch.n_targets(), batch.labels.len()));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= cfg.n_classes) {
            return Err(Error::shape("learner label", format!("< {}", cfg.n_classes), bad));
        }
    }
    Ok(())
}

fn pool(g: &mut Graph, kind: Pooling, a: Var, b: Var) -> Var {
    match kind {
        Pooling::Mean => {
            let s = g.add(a, b);
            g.scale(s, 0.5)
        }
        Pooling::Max => g.maximum(a, b),
    }
}

/// Pool a time-ordered list of `[B × H]` states.
fn pool_sequence(g: &mut Graph, kind: Pooling, states: &[Var]) -> Var {
    match kind {
        Pooling::Mean => {
            let total = states[1..].iter().fold(states[0], |acc, &s| g.add(acc, s));
            g.scale(total, 1.0 / states.len() as f64)
        }
        Pooling::Max => states[1..].iter().fold(states[0], |acc, &s| g.maximum(acc, s)),
    }
}

fn recurrent(g: &mut Graph, p: &BoundParams, cfg: &LearnerConfig, x: Var, lstm: bool) -> Var {
    let (b, d) = g.value(x).dim();
    let hsz = cfg.hidden;
    let mut h = g.leaf(Matrix::zeros((b, hsz)));
    let mut c = g.leaf(Matrix::zeros((b, hsz)));
    let mut states = Vec::with_capacity(d);
    for t in 0..d {
        let xt = g.slice_cols(x, t, t + 1);
        let xi = g.matmul(xt, p.get("body.w_ih"));
        let hh = g.matmul(h, p.get("body.w_hh"));
        let pre = g.add(xi, hh);
        if lstm {
            let pre = g.add_row(pre, p.get("body.b"));
            let i = g.slice_cols(pre, 0, hsz);
            let f = g.slice_cols(pre, hsz, 2 * hsz);
            let gg = g.slice_cols(pre, 2 * hsz, 3 * hsz);
            let o = g.slice_cols(pre, 3 * hsz, 4 * hsz);
            let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
            let gg = g.tanh(gg);
            let fc = g.mul(f, c);
            let ig = g.mul(i, gg);
            c = g.add(fc, ig);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
        } else {
            let pre = g.add_row(pre, p.get("body.b_h"));
            h = g.tanh(pre);
        }
        states.push(h);
    }
    pool_sequence(g, cfg.pooling, &states)
}

/// Convolution (kernel 3, zero "same" padding) along the feature axis of
/// each latent vector, as an im2col product.
fn convolution(g: &mut Graph, p: &BoundParams, cfg: &LearnerConfig, x: &Matrix) -> Var {
    let (b, d) = x.dim();
    let cols = Matrix::from_shape_fn((b * d, 3), |(r, k)| {
        let (row, pos) = (r / d, r % d);
        let src = pos as isize + k as isize - 1;
        if src < 0 || src >= d as isize {
            0.0
        } else {
            x[[row, src as usize]]
        }
    });
    let cols = g.leaf(cols);
    let conv = g.matmul(cols, p.get("body.w_conv"));
    let conv = g.add_row(conv, p.get("body.b_conv"));
    let act = g.relu(conv);
    match cfg.pooling {
        Pooling::Mean => g.segment_mean(act, d),
        Pooling::Max => g.segment_max(act, d),
    }
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = Matrix::from_shape_fn(g.value(x).dim(), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

const STANDARDIZE_EPS: f64 = 1e-5;

/// Center and scale every column by the mean and variance of the context
/// rows, the way transductive batch normalization does. Latent codes share
/// a large common component; without this the class differences are too
/// small for a few gradient steps to pick up.
pub fn standardize_by_context(x: &Matrix, context: usize) -> Matrix {
    let ctx = x.slice(s![..context, ..]);
    let mean = ctx.mean_axis(Axis(0)).expect("context is non-empty");
    let var = ctx.var_axis(Axis(0), 0.0);
    let scale = var.mapv(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt());
    (x - &mean) * &scale
}

/// Logits `[n_targets × N]` for the target rows of `batch`. Dropout is
/// applied only when `dropout_rng` is given (train mode).
pub(crate) fn logits_on(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &LearnerConfig,
    batch: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Var {
    let n = batch.x.nrows();
    let x = standardize_by_context(&batch.x, batch.context);
    let features = match cfg.body {
        Body::TransformerEncoder => {
            let z = g.leaf(x);
            let mask = batch.attention_mask();
            let out = multihead_on(g, z, z, z, p, ATTN, cfg.n_heads, mask.as_ref());
            let pooled = pool(g, cfg.pooling, z, out);
            g.slice_rows(pooled, batch.target_start, n)
        }
        Body::Linear => {
            let z = g.leaf(x.slice(s![batch.target_start.., ..]).to_owned());
            let h = g.matmul(z, p.get("body.w"));
            let h = g.add_row(h, p.get("body.b"));
            g.relu(h)
        }
        Body::Rnn | Body::Lstm => {
            let z = g.leaf(x.slice(s![batch.target_start.., ..]).to_owned());
            recurrent(g, p, cfg, z, cfg.body == Body::Lstm)
        }
        Body::Cnn => convolution(g, p, cfg, &x.slice(s![batch.target_start.., ..]).to_owned()),
    };
    let features = dropout(g, features, cfg.dropout_rate, dropout_rng);
    let logits = g.matmul(features, p.get("fc.w"));
    g.add_row(logits, p.get("fc.b"))
}

/// Class probabilities `[n_targets × N]`.
pub fn predict_proba(params: &MetaLearnerParams, batch: &Batch, dropout_rng: Option<&mut Rng>) -> Result<Matrix> {
    check_batch(&params.config, batch)?;
    let mut g = Graph::new();
    let p = params.tensors.bind(&mut g);
    let logits = logits_on(&mut g, &p, &params.config, batch, dropout_rng);
    Ok(softmax_rows(g.value(logits), None))
}

/// Class probabilities with every row of `z_batch` acting as context.
/// `train_mode` enables dropout driven by `rng`.
pub fn forward(
    z_batch: &Matrix,
    params: &MetaLearnerParams,
    train_mode: bool,
    rng: Option<&mut Rng>,
) -> Result<Matrix> {
    let batch = Batch::support(z_batch.clone(), Vec::new());
    predict_proba(params, &batch, if train_mode { rng } else { None })
}

/// Argmax per row; ties go to the lowest class index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy over the target rows and its gradient.
pub fn loss_and_grad(
    tensors: &ParamSet,
    cfg: &LearnerConfig,
    batch: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, ParamSet)> {
    check_batch(cfg, batch)?;
    if batch.labels.is_empty() {
        return Err(Error::shape("learner labels", batch.n_targets(), 0));
    }
    let mut g = Graph::new();
    let p = tensors.bind(&mut g);
    let logits = logits_on(&mut g, &p, cfg, batch, dropout_rng);
    let loss = g.cross_entropy(logits, &batch.labels);
    let grads = p.grads(&g.backward(loss));
    Ok((g.scalar(loss), grads))
}

/// Fraction of target rows whose argmax matches the label.
pub fn accuracy(params: &MetaLearnerParams, batch: &Batch) -> Result<f64> {
    let probs = predict_proba(params, batch, None)?;
    let preds = argmax_rows(&probs);
    let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / batch.labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(body: Body, n_classes: usize) -> LearnerConfig {
        LearnerConfig {
            body,
            d_model: 8,
            n_heads: 2,
            n_classes,
            hidden: 4,
            conv_channels: 3,
            ..LearnerConfig::default()
        }
    }

    fn inputs() -> Matrix {
        Matrix::from_shape_fn((4, 8), |(r, c)| ((r * 8 + c) as f64 * 0.37).sin())
    }

    #[test]
    fn single_class_probability_is_one() {
        let p = MetaLearnerParams::init(&cfg(Body::TransformerEncoder, 1)).unwrap();
        let probs = forward(&inputs(), &p, false, None).unwrap();
        assert!(probs.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut p = MetaLearnerParams::init(&cfg(Body::Linear, 4)).unwrap();
        *p.tensors.get_mut("fc.w").unwrap() = Matrix::zeros((8, 4));
        *p.tensors.get_mut("fc.b").unwrap() = Matrix::zeros((1, 4));
        let probs = forward(&inputs().slice(s![0..1, ..]).to_owned(), &p, false, None).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn every_body_yields_probability_rows() {
        for body in [Body::TransformerEncoder, Body::Linear, Body::Rnn, Body::Lstm, Body::Cnn] {
            for pooling in [Pooling::Mean, Pooling::Max] {
                let c = LearnerConfig { pooling, ..cfg(body, 3) };
                let p = MetaLearnerParams::init(&c).unwrap();
                let mut r = rng::stream(0, "t", 0);
                let probs = forward(&inputs(), &p, true, Some(&mut r)).unwrap();
                assert_eq!(probs.dim(), (4, 3), "{body:?}");
                for row in probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn query_rows_do_not_see_each_other() {
        let p = MetaLearnerParams::init(&cfg(Body::TransformerEncoder, 3)).unwrap();
        let x = inputs();
        let support = x.slice(s![0..2, ..]).to_owned();
        let both = Batch::query(&support, &x.slice(s![2..4, ..]).to_owned(), vec![0, 1]);
        let joint = predict_proba(&p, &both, None).unwrap();
        for q in 2..4 {
            let one = Batch::query(&support, &x.slice(s![q..q + 1, ..]).to_owned(), vec![0]);
            let alone = predict_proba(&p, &one, None).unwrap();
            for (a, b) in joint.row(q - 2).iter().zip(alone.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax_rows(&array![[0.25, 0.25, 0.25, 0.25], [0.1, 0.45, 0.45, 0.0]]), vec![0, 1]);
    }

    #[test]
    fn bad_labels_and_widths_are_rejected() {
        let p = MetaLearnerParams::init(&cfg(Body::Linear, 2)).unwrap();
        let b = Batch::support(inputs(), vec![0, 1, 2, 0]);
        assert!(loss_and_grad(&p.tensors, &p.config, &b, None).is_err());
        let b = Batch::support(Matrix::zeros((2, 3)), vec![0, 1]);
        assert!(loss_and_grad(&p.tensors, &p.config, &b, None).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let c = LearnerConfig { dropout_rate: 0.5, ..cfg(Body::Linear, 3) };
        let mut p = MetaLearnerParams::init(&c).unwrap();
        let head = p.tensors.get_mut("fc.w").unwrap();
        *head = Matrix::from_shape_fn(head.dim(), |(i, j)| (i as f64 - j as f64) * 0.3);
        let a = forward(&inputs(), &p, false, None).unwrap();
        let mut r = rng::stream(1, "t", 0);
        let b = forward(&inputs(), &p, false, Some(&mut r)).unwrap();
        assert_eq!(a, b);
        let mut r = rng::stream(1, "t", 0);
        let c2 = forward(&inputs(), &p, true, Some(&mut r)).unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn standardization_uses_context_rows_only() {
        let x = array![[1.0, 10.0], [3.0, 10.0], [5.0, 4.0]];
        let out = standardize_by_context(&x, 2);
        assert!((out[[0, 0]] + 1.0).abs() < 1e-5 && (out[[1, 0]] - 1.0).abs() < 1e-5);
        // constant context column stays centered, not blown up by the query
        assert_eq!(out[[0, 1]], 0.0);
        assert!((out[[2, 0]] - 3.0).abs() < 1e-4);
        let again = standardize_by_context(&array![[1.0, 10.0], [3.0, 10.0], [-7.0, 0.0]], 2);
        assert_eq!(again.row(0), out.row(0));
    }
}
