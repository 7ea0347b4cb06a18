//! Scaled dot-product and multi-head attention.

use ndarray::Array2;

use crate::autograd::{softmax_rows, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, BoundParams, ParamSet};
use crate::rng::Rng;

/// Per-head query/key/value projections, each `[d_model × d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// Output projection `[d_model × d_model]` applied to the concatenated heads.
    pub w_o: Matrix,
}

impl AttentionParams {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                w_q: uniform_fan_in(d_model, d_k, d_model, rng),
                w_k: uniform_fan_in(d_model, d_k, d_model, rng),
                w_v: uniform_fan_in(d_model, d_k, d_model, rng),
            })
            .collect();
        Ok(Self {
            heads,
            w_o: uniform_fan_in(d_model, d_model, d_model, rng),
        })
    }

    /// One head with identity projections.
    pub fn identity(d_model: usize) -> Self {
        let eye = Matrix::eye(d_model);
        Self {
            heads: vec![HeadParams {
                w_q: eye.clone(),
                w_k: eye.clone(),
                w_v: eye.clone(),
            }],
            w_o: eye,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.ncols()
    }

    fn names(prefix: &str, i: usize) -> [String; 3] {
        [
            format!("{prefix}.head{i}.w_q"),
            format!("{prefix}.head{i}.w_k"),
            format!("{prefix}.head{i}.w_v"),
        ]
    }

    pub fn insert_into(&self, prefix: &str, params: &mut ParamSet) {
        for (i, h) in self.heads.iter().enumerate() {
            let [q, k, v] = Self::names(prefix, i);
            params.insert(q, h.w_q.clone());
            params.insert(k, h.w_k.clone());
            params.insert(v, h.w_v.clone());
        }
        params.insert(format!("{prefix}.w_o"), self.w_o.clone());
    }

    pub fn from_params(prefix: &str, params: &ParamSet, n_heads: usize) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let heads = (0..n_heads)
            .map(|i| {
                let [q, k, v] = Self::names(prefix, i);
                Ok(HeadParams {
                    w_q: get(&q)?,
                    w_k: get(&k)?,
                    w_v: get(&v)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            w_o: get(&format!("{prefix}.w_o"))?,
        })
    }
}

/// Attention over `q [m × d_k]`, `k [n × d_k]`, `v [n × d_v]` on the tape.
/// `mask[i][j] == false` excludes key `j` from query `i`.
pub fn attention_on(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
    mask: Option<&Array2<bool>>,
) -> Var {
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax(scaled, mask);
    g.matmul(weights, v)
}

/// Multi-head attention whose projection tensors live in `bound` under `prefix`.
pub fn multihead_on(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bound: &BoundParams,
    prefix: &str,
    n_heads: usize,
    mask: Option<&Array2<bool>>,
) -> Var {
    let heads: Vec<Var> = (0..n_heads)
        .map(|i| {
            let [nq, nk, nv] = AttentionParams::names(prefix, i);
            let (wq, wk, wv) = (bound.get(&nq), bound.get(&nk), bound.get(&nv));
            let d_k = g.value(wq).ncols();
            let qh = g.matmul(q, wq);
            let kh = g.matmul(k, wk);
            let vh = g.matmul(v, wv);
            attention_on(g, qh, kh, vh, d_k, mask)
        })
        .collect();
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let wo = bound.get(&format!("{prefix}.w_o"));
    g.matmul(cat, wo)
}

fn check_attention_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if k.nrows() == 0 {
        return Err(Error::shape("attention keys", "at least one row", 0));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::shape("attention query/key width", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape("attention key/value rows", k.nrows(), v.nrows()));
    }
    Ok(())
}

/// Attention weights `softmax(Q Kᵀ / sqrt(d_k))`.
pub fn attention_weights(q: &Matrix, k: &Matrix, d_k: usize) -> Matrix {
    softmax_rows(&(q.dot(&k.t()) / (d_k as f64).sqrt()), None)
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, d_k: usize) -> Result<Matrix> {
    check_attention_shapes(q, k, v)?;
    Ok(attention_weights(q, k, d_k).dot(v))
}

/// `Concatenate(head_1..head_h) W_O` with `head_i = Attention(Q W_Q_i, K W_K_i, V W_V_i)`.
pub fn multihead(q: &Matrix, k: &Matrix, v: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    let d = params.d_model();
    for (name, m) in [("query", q), ("key", k), ("value", v)] {
        if m.ncols() != d {
            return Err(Error::shape(format!("multihead {name} width"), d, m.ncols()));
        }
    }
    if k.nrows() == 0 || k.nrows() != v.nrows() {
        return Err(Error::shape("multihead key/value rows", k.nrows().max(1), v.nrows()));
    }
    let mut ps = ParamSet::new();
    params.insert_into("attn", &mut ps);
    let mut g = Graph::new();
    let bound = ps.bind(&mut g);
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let out = multihead_on(&mut g, qv, kv, vv, &bound, "attn", params.n_heads(), None);
    Ok(g.value(out).clone())
}
