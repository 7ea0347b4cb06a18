//! Multi-head attention autoencoder that fuses span and log feature
//! matrices into one latent vector per trace, plus the linear and gated
//! fusion variants.
//!
//! Forward pass for the attention variant:
//!
//! ```text
//! V'_span = g(V_span W_span + b_span)          [n_spans × d']
//! V'_log  = g(V_log  W_log  + b_log)           [n_logs  × d']
//! fused   = MultiHead(V'_span, V'_log, V'_log) [n_spans × d']
//! z       = mean over rows of fused            [d']
//! ```
//!
//! The decoder maps `z` back to one span row and one log row, which are
//! compared against the per-trace mean rows of the inputs.

use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{multihead_on, AttentionParams};
use crate::autograd::{Graph, Matrix, Var};
use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::featurize::{
    featurize_corpus, FeaturizeConfig, FeaturizedTrace, LogFeatureMatrix, SpanFeatureMatrix,
};
use crate::params::{uniform_fan_in, AdamW, BoundParams, ParamSet};
use crate::rng;
use crate::trace_model::TraceCorpus;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply_on(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    #[default]
    Multihead,
    Linear,
    Glu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AEConfig {
    pub d_common: usize,
    pub n_heads: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub variant: FusionVariant,
    /// Fraction of normal traces held out for validation loss.
    pub validation_fraction: f64,
    pub featurize: FeaturizeConfig,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            d_common: 64,
            n_heads: 4,
            activation: Activation::Relu,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            variant: FusionVariant::Multihead,
            validation_fraction: 0.15,
            featurize: FeaturizeConfig::default(),
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_common == 0 || self.n_heads == 0 || !self.d_common.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_common {} must be a positive multiple of n_heads {}",
                self.d_common, self.n_heads
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_common / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w_span: Matrix,
    pub b_span: Matrix,
    pub w_log: Matrix,
    pub b_log: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w_span_dec: Matrix,
    pub b_span_dec: Matrix,
    pub w_log_dec: Matrix,
    pub b_log_dec: Matrix,
}

/// All trainable tensors of the autoencoder plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct AEParams {
    pub config: AEConfig,
    pub d_span: usize,
    pub d_log: usize,
    pub tensors: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    pub trace_id: String,
    pub z: Vec<f64>,
}

const ATTN: &str = "attn";

impl AEParams {
    /// Seeded uniform fan-in initialization.
    pub fn init(config: &AEConfig, d_span: usize, d_log: usize) -> Result<Self> {
        config.validate()?;
        let d = config.d_common;
        let mut r = rng::stream(config.seed, "ae.init", 0);
        let mut t = ParamSet::new();
        t.insert("enc.w_span", uniform_fan_in(d_span, d, d_span, &mut r));
        t.insert("enc.b_span", uniform_fan_in(1, d, d_span, &mut r));
        t.insert("enc.w_log", uniform_fan_in(d_log, d, d_log, &mut r));
        t.insert("enc.b_log", uniform_fan_in(1, d, d_log, &mut r));
        match config.variant {
            FusionVariant::Multihead => {
                AttentionParams::init(d, config.n_heads, &mut r)?.insert_into(ATTN, &mut t);
            }
            FusionVariant::Linear => {
                t.insert("fuse.w", uniform_fan_in(2 * d, d, 2 * d, &mut r));
                t.insert("fuse.b", uniform_fan_in(1, d, 2 * d, &mut r));
            }
            FusionVariant::Glu => {
                t.insert("fuse.w_a", uniform_fan_in(2 * d, d, 2 * d, &mut r));
                t.insert("fuse.w_g", uniform_fan_in(2 * d, d, 2 * d, &mut r));
            }
        }
        t.insert("dec.w_span", uniform_fan_in(d, d_span, d, &mut r));
        t.insert("dec.b_span", uniform_fan_in(1, d_span, d, &mut r));
        t.insert("dec.w_log", uniform_fan_in(d, d_log, d, &mut r));
        t.insert("dec.b_log", uniform_fan_in(1, d_log, d, &mut r));
        Ok(Self {
            config: config.clone(),
            d_span,
            d_log,
            tensors: t,
        })
    }

    pub fn encoder(&self) -> EncoderParams {
        EncoderParams {
            w_span: self.tensors.tensor("enc.w_span").clone(),
            b_span: self.tensors.tensor("enc.b_span").clone(),
            w_log: self.tensors.tensor("enc.w_log").clone(),
            b_log: self.tensors.tensor("enc.b_log").clone(),
        }
    }

    pub fn decoder(&self) -> DecoderParams {
        DecoderParams {
            w_span_dec: self.tensors.tensor("dec.w_span").clone(),
            b_span_dec: self.tensors.tensor("dec.b_span").clone(),
            w_log_dec: self.tensors.tensor("dec.w_log").clone(),
            b_log_dec: self.tensors.tensor("dec.b_log").clone(),
        }
    }

    /// Attention parameters; `None` for the linear and gated variants.
    pub fn attention(&self) -> Option<AttentionParams> {
        (self.config.variant == FusionVariant::Multihead)
            .then(|| AttentionParams::from_params(ATTN, &self.tensors, self.config.n_heads).ok())
            .flatten()
    }

    fn check_inputs(&self, span: &Matrix, log: &Matrix) -> Result<()> {
        if span.ncols() != self.d_span {
            return Err(Error::shape("span feature width", self.d_span, span.ncols()));
        }
        if log.ncols() != self.d_log {
            return Err(Error::shape("log feature width", self.d_log, log.ncols()));
        }
        if span.nrows() == 0 || log.nrows() == 0 {
            return Err(Error::shape("feature rows", "at least one", 0));
        }
        Ok(())
    }
}

fn project_on(g: &mut Graph, x: Var, w: Var, b: Var, act: Activation) -> Var {
    let h = g.matmul(x, w);
    let h = g.add_row(h, b);
    act.apply_on(g, h)
}

/// Projections of one trace's span and log matrices into the common space.
fn encoder_projections(g: &mut Graph, p: &BoundParams, act: Activation, span: Var, log: Var) -> (Var, Var) {
    let s = project_on(g, span, p.get("enc.w_span"), p.get("enc.b_span"), act);
    let l = project_on(g, log, p.get("enc.w_log"), p.get("enc.b_log"), act);
    (s, l)
}

/// Latent row `[1 × d']` for one trace.
pub(crate) fn encode_on(g: &mut Graph, p: &BoundParams, cfg: &AEConfig, span: Var, log: Var) -> Var {
    let (s, l) = encoder_projections(g, p, cfg.activation, span, log);
    match cfg.variant {
        FusionVariant::Multihead => {
            let fused = multihead_on(g, s, l, l, p, ATTN, cfg.n_heads, None);
            g.mean_rows(fused)
        }
        FusionVariant::Linear => {
            let u = pooled_concat(g, s, l);
            let h = project_on(g, u, p.get("fuse.w"), p.get("fuse.b"), cfg.activation);
            g.mean_rows(h)
        }
        FusionVariant::Glu => {
            let u = pooled_concat(g, s, l);
            let a = g.matmul(u, p.get("fuse.w_a"));
            let gate = g.matmul(u, p.get("fuse.w_g"));
            let gate = g.sigmoid(gate);
            g.mul(a, gate)
        }
    }
}

fn pooled_concat(g: &mut Graph, s: Var, l: Var) -> Var {
    let ps = g.mean_rows(s);
    let pl = g.mean_rows(l);
    g.concat_cols(&[ps, pl])
}

/// Decoded `[1 × d_span]` and `[1 × d_log]` rows.
fn decode_on(g: &mut Graph, p: &BoundParams, act: Activation, z: Var) -> (Var, Var) {
    let s = project_on(g, z, p.get("dec.w_span"), p.get("dec.b_span"), act);
    let l = project_on(g, z, p.get("dec.w_log"), p.get("dec.b_log"), act);
    (s, l)
}

/// Reconstruction loss of one trace against its pooled targets.
pub(crate) fn trace_loss_on(g: &mut Graph, p: &BoundParams, cfg: &AEConfig, ft: &FeaturizedTrace) -> Var {
    let span = g.leaf(ft.span.values.clone());
    let log = g.leaf(ft.log.values.clone());
    let z = encode_on(g, p, cfg, span, log);
    let (hat_span, hat_log) = decode_on(g, p, cfg.activation, z);
    let target_span = g.mean_rows(span);
    let target_log = g.mean_rows(log);
    let ls = g.mse(hat_span, target_span);
    let ll = g.mse(hat_log, target_log);
    g.add(ls, ll)
}

/// `g(V W + b)` row-wise for both modalities.
pub fn project(
    span: &SpanFeatureMatrix,
    log: &LogFeatureMatrix,
    enc: &EncoderParams,
    act: Activation,
) -> Result<(Matrix, Matrix)> {
    let apply = |x: &Matrix, w: &Matrix, b: &Matrix, what: &str| -> Result<Matrix> {
        if x.ncols() != w.nrows() {
            return Err(Error::shape(format!("{what} projection"), w.nrows(), x.ncols()));
        }
        Ok((x.dot(w) + b).mapv(|v| act.apply(v)))
    };
    Ok((
        apply(&span.values, &enc.w_span, &enc.b_span, "span")?,
        apply(&log.values, &enc.w_log, &enc.b_log, "log")?,
    ))
}

/// Fuse one trace's feature matrices into its latent vector.
pub fn encode(span: &SpanFeatureMatrix, log: &LogFeatureMatrix, params: &AEParams) -> Result<Vec<f64>> {
    params.check_inputs(&span.values, &log.values)?;
    let mut g = Graph::new();
    let p = params.tensors.bind(&mut g);
    let s = g.leaf(span.values.clone());
    let l = g.leaf(log.values.clone());
    let z = encode_on(&mut g, &p, &params.config, s, l);
    Ok(g.value(z).row(0).to_vec())
}

pub fn encode_trace(ft: &FeaturizedTrace, params: &AEParams) -> Result<LatentTrace> {
    Ok(LatentTrace {
        trace_id: ft.trace_id.clone(),
        z: encode(&ft.span, &ft.log, params)?,
    })
}

/// Span-only representation: mean of the projected span rows, no log fusion.
pub fn encode_span_only(ft: &FeaturizedTrace, params: &AEParams) -> Result<LatentTrace> {
    params.check_inputs(&ft.span.values, &ft.log.values)?;
    let (s, _) = project(&ft.span, &ft.log, &params.encoder(), params.config.activation)?;
    Ok(LatentTrace {
        trace_id: ft.trace_id.clone(),
        z: s.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec(),
    })
}

/// Reconstruct both modalities from `z`, broadcasting the decoded row to
/// `n_spans` and `n_logs` rows.
pub fn decode(
    z: &[f64],
    dec: &DecoderParams,
    act: Activation,
    n_spans: usize,
    n_logs: usize,
) -> Result<(Matrix, Matrix)> {
    if z.len() != dec.w_span_dec.nrows() {
        return Err(Error::shape("latent width", dec.w_span_dec.nrows(), z.len()));
    }
    let z = Array1::from(z.to_vec()).insert_axis(ndarray::Axis(0));
    let row = |w: &Matrix, b: &Matrix| (z.dot(w) + b).mapv(|v| act.apply(v));
    let s = row(&dec.w_span_dec, &dec.b_span_dec);
    let l = row(&dec.w_log_dec, &dec.b_log_dec);
    let bs = s.broadcast((n_spans, s.ncols())).unwrap().to_owned();
    let bl = l.broadcast((n_logs, l.ncols())).unwrap().to_owned();
    Ok((bs, bl))
}

/// Mean-per-element squared error of each modality, summed.
pub fn reconstruction_loss(span: &Matrix, log: &Matrix, hat_span: &Matrix, hat_log: &Matrix) -> Result<f64> {
    if span.dim() != hat_span.dim() {
        return Err(Error::shape("span reconstruction", format!("{:?}", span.dim()), format!("{:?}", hat_span.dim())));
    }
    if log.dim() != hat_log.dim() {
        return Err(Error::shape("log reconstruction", format!("{:?}", log.dim()), format!("{:?}", hat_log.dim())));
    }
    let mse = |a: &Matrix, b: &Matrix| (a - b).mapv(|d| d * d).mean().unwrap_or(0.0);
    Ok(mse(span, hat_span) + mse(log, hat_log))
}

/// Training loss of one trace (pooled targets) and its gradient.
pub fn trace_loss_and_grad(params: &AEParams, ft: &FeaturizedTrace) -> (f64, ParamSet) {
    let mut g = Graph::new();
    let p = params.tensors.bind(&mut g);
    let loss = trace_loss_on(&mut g, &p, &params.config, ft);
    let grads = g.backward(loss);
    (g.scalar(loss), p.grads(&grads))
}

/// Mean per-trace loss; used for the loss curve.
pub fn mean_loss(params: &AEParams, data: &[FeaturizedTrace]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let total: f64 = data
        .iter()
        .map(|ft| {
            let mut g = Graph::new();
            let p = params.tensors.bind(&mut g);
            let l = trace_loss_on(&mut g, &p, &params.config, ft);
            g.scalar(l)
        })
        .sum();
    total / data.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

/// Per-epoch mean training and validation loss; epoch 0 is the initialization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    pub fn initial_train(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.train)
    }

    pub fn final_train(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.9e},{:.9e}\n", e.epoch, e.train, e.validation));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AEParams,
    pub curve: LossCurve,
    /// Wall-clock seconds per epoch; not part of the deterministic outputs.
    pub epoch_seconds: Vec<f64>,
}

/// Train on already featurized normal traces. Single-threaded and
/// deterministic for a fixed seed.
pub fn train_ae_features(features: &[FeaturizedTrace], cfg: &AEConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Config("no normal traces to train the autoencoder on".into()));
    }
    if features.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} normal traces is fewer than batch_size {}",
            features.len(),
            cfg.batch_size
        )));
    }
    let d_span = features[0].span.values.ncols();
    let d_log = features[0].log.values.ncols();
    let mut params = AEParams::init(cfg, d_span, d_log)?;
    for ft in features {
        params.check_inputs(&ft.span.values, &ft.log.values)?;
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "ae.split", 0));
    let n_val = ((features.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(features.len() - 1);
    let validation: Vec<FeaturizedTrace> = order[..n_val].iter().map(|&i| features[i].clone()).collect();
    let train: Vec<FeaturizedTrace> = order[n_val..].iter().map(|&i| features[i].clone()).collect();

    let mut curve = LossCurve::default();
    let record = |params: &AEParams, epoch: usize, curve: &mut LossCurve| -> Result<()> {
        let train_loss = mean_loss(params, &train);
        let val_loss = if validation.is_empty() { train_loss } else { mean_loss(params, &validation) };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::divergence(format!("autoencoder loss at epoch {epoch}")));
        }
        curve.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: val_loss,
        });
        Ok(())
    };
    record(&params, 0, &mut curve)?;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        idx.shuffle(&mut rng::stream(cfg.seed, "ae.epoch", epoch as u64));
        for batch in idx.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = params.tensors.bind(&mut g);
            let losses: Vec<Var> = batch
                .iter()
                .map(|&i| trace_loss_on(&mut g, &p, cfg, &train[i]))
                .collect();
            let total = losses[1..].iter().fold(losses[0], |acc, &l| g.add(acc, l));
            if !g.scalar(total).is_finite() {
                return Err(Error::divergence(format!("autoencoder batch loss at epoch {epoch}")));
            }
            let grads = p.grads(&g.backward(total));
            opt.step(&mut params.tensors, &grads);
            if !params.tensors.is_finite() {
                return Err(Error::divergence(format!("autoencoder parameters at epoch {epoch}")));
            }
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        record(&params, epoch, &mut curve)?;
        log::debug!(
            "ae epoch {epoch}: train {:.5} val {:.5}",
            curve.final_train(),
            curve.epochs.last().unwrap().validation
        );
    }
    Ok(TrainOutcome {
        params,
        curve,
        epoch_seconds,
    })
}

/// Featurize the unlabeled traces of `corpus` and train on them.
pub fn train_ae(corpus: &TraceCorpus, cfg: &AEConfig, embedder: &dyn TextEmbedder) -> Result<TrainOutcome> {
    let normal = corpus.unlabeled();
    let features = featurize_corpus(&normal, embedder, &cfg.featurize)?;
    train_ae_features(&features, cfg)
}
