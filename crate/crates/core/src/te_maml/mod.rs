//! Transformer-encoder meta-learner trained with first-order MAML.
//!
//! [`learner`] holds the classifier bodies and their forward pass;
//! [`maml`] holds the model-agnostic inner/outer loop engine and the
//! episode-level entry points.

pub mod learner;
pub mod maml;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub use learner::{Batch, MetaLearnerParams};
pub use maml::{inner_adapt, meta_test, meta_train, EpisodeTask, MetaOutcome, MetaObjective};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    #[default]
    TransformerEncoder,
    Linear,
    Rnn,
    Lstm,
    Cnn,
}

impl Body {
    pub fn name(self) -> &'static str {
        match self {
            Body::TransformerEncoder => "transformer_encoder",
            Body::Linear => "linear",
            Body::Rnn => "rnn",
            Body::Lstm => "lstm",
            Body::Cnn => "cnn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub body: Body,
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
    pub pooling: Pooling,
    pub seed: u64,
    /// Hidden width of the recurrent bodies.
    pub hidden: usize,
    /// Output channels of the convolutional body.
    pub conv_channels: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            body: Body::TransformerEncoder,
            d_model: 64,
            n_heads: 4,
            dropout_rate: 0.1,
            n_classes: 5,
            pooling: Pooling::Mean,
            seed: 0,
            hidden: 32,
            conv_channels: 16,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        if self.hidden == 0 || self.conv_channels == 0 {
            return Err(Error::Config("hidden and conv_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner-loop (support set) learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    /// Number of outer updates.
    pub meta_iterations: usize,
    /// Always true: second-order terms are dropped.
    pub first_order: bool,
    /// Decoupled weight decay of the outer optimizer.
    pub weight_decay: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1e-3,
            inner_steps: 5,
            meta_iterations: 100,
            first_order: true,
            weight_decay: 0.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if !self.first_order {
            return Err(Error::Config("only the first-order update is supported".into()));
        }
        Ok(())
    }
}

/// Task-specific parameters produced by inner-loop adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedParams {
    pub tensors: ParamSet,
    pub task_id: String,
    pub inner_steps: usize,
}
