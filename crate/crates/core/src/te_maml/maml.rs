//! First-order MAML.
//!
//! Inner loop: `theta'_i = theta - alpha * grad L_support(theta)`, repeated
//! `inner_steps` times with plain gradient descent. Outer loop: the
//! gradient of `sum_i L_query(theta'_i)` is taken with respect to
//! `theta'_i` and used as the gradient with respect to `theta` (the
//! first-order approximation), then applied with AdamW at rate `beta`.

use serde::{Deserialize, Serialize};

use super::learner::{self, loss_and_grad, Batch, MetaLearnerParams};
use super::{AdaptedParams, LearnerConfig, MetaConfig};
use crate::error::{Error, Result};
use crate::params::{sgd_step, AdamW, ParamSet};
use crate::rng::{self, Rng};

/// A differentiable per-task objective the MAML engine can optimize.
pub trait MetaObjective {
    type Task;

    fn support_loss_grad(&self, params: &ParamSet, task: &Self::Task, rng: Option<&mut Rng>)
        -> Result<(f64, ParamSet)>;

    fn query_loss_grad(&self, params: &ParamSet, task: &Self::Task, rng: Option<&mut Rng>)
        -> Result<(f64, ParamSet)>;
}

/// `steps` plain gradient-descent steps on the support loss. Pure in `params`.
pub fn adapt<O: MetaObjective>(
    objective: &O,
    params: &ParamSet,
    task: &O::Task,
    alpha: f64,
    steps: usize,
    mut rng: Option<&mut Rng>,
) -> Result<ParamSet> {
    let mut current = params.clone();
    for step in 0..steps {
        let (_, grads) = objective.support_loss_grad(&current, task, rng.as_deref_mut())?;
        if !grads.is_finite() {
            return Err(Error::divergence(format!("inner-loop gradient at step {step}")));
        }
        current = sgd_step(&current, &grads, alpha);
    }
    Ok(current)
}

/// Summed query loss and first-order meta-gradient over `tasks`.
/// `rng_for(task_index)` supplies the dropout stream for that task.
pub fn fomaml_gradient<O: MetaObjective>(
    objective: &O,
    params: &ParamSet,
    tasks: &[O::Task],
    mcfg: &MetaConfig,
    mut rng_for: impl FnMut(usize) -> Option<Rng>,
) -> Result<(f64, ParamSet)> {
    let mut total_loss = 0.0;
    let mut total_grad = params.zeros_like();
    for (i, task) in tasks.iter().enumerate() {
        let mut r = rng_for(i);
        let adapted = adapt(objective, params, task, mcfg.alpha, mcfg.inner_steps, r.as_mut())?;
        let (loss, grad) = objective.query_loss_grad(&adapted, task, r.as_mut())?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::divergence(format!("query loss of task {i}")));
        }
        total_loss += loss;
        total_grad.axpy(1.0, &grad);
    }
    Ok((total_loss, total_grad))
}

/// Run `mcfg.meta_iterations` outer updates from `initial`. Returns the
/// meta-trained parameters and the summed query loss of each iteration.
pub fn meta_train_objective<O: MetaObjective>(
    objective: &O,
    initial: &ParamSet,
    tasks: &[O::Task],
    mcfg: &MetaConfig,
    mut rng_for: impl FnMut(usize, usize) -> Option<Rng>,
) -> Result<(ParamSet, Vec<f64>)> {
    mcfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("meta-training needs at least one task".into()));
    }
    let mut params = initial.clone();
    let mut opt = AdamW::new(mcfg.beta, mcfg.weight_decay);
    let mut curve = Vec::with_capacity(mcfg.meta_iterations);
    for it in 0..mcfg.meta_iterations {
        let (loss, grad) = fomaml_gradient(objective, &params, tasks, mcfg, |i| rng_for(it, i))?;
        opt.step(&mut params, &grad);
        if !params.is_finite() {
            return Err(Error::divergence(format!("outer update at iteration {it}")));
        }
        curve.push(loss);
        if it % 10 == 0 {
            log::debug!("meta iteration {it}: query loss {loss:.5}");
        }
    }
    Ok((params, curve))
}

/// One few-shot classification task over latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    pub task_id: String,
    pub support: Batch,
    /// Query rows appended after the support rows (context = support).
    pub query: Batch,
}

/// Cross-entropy of the meta-learner on a task's support or query rows.
pub struct ClassifierObjective<'a> {
    pub config: &'a LearnerConfig,
}

impl MetaObjective for ClassifierObjective<'_> {
    type Task = EpisodeTask;

    fn support_loss_grad(&self, params: &ParamSet, task: &EpisodeTask, rng: Option<&mut Rng>) -> Result<(f64, ParamSet)> {
        loss_and_grad(params, self.config, &task.support, rng)
    }

    fn query_loss_grad(&self, params: &ParamSet, task: &EpisodeTask, rng: Option<&mut Rng>) -> Result<(f64, ParamSet)> {
        loss_and_grad(params, self.config, &task.query, rng)
    }
}

/// Adapt to `task`'s support set. Dropout is active only if `rng` is given.
pub fn inner_adapt(
    theta: &MetaLearnerParams,
    task: &EpisodeTask,
    mcfg: &MetaConfig,
    rng: Option<&mut Rng>,
) -> Result<AdaptedParams> {
    mcfg.validate()?;
    let objective = ClassifierObjective { config: &theta.config };
    let tensors = adapt(&objective, &theta.tensors, task, mcfg.alpha, mcfg.inner_steps, rng)?;
    Ok(AdaptedParams {
        tensors,
        task_id: task.task_id.clone(),
        inner_steps: mcfg.inner_steps,
    })
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub params: MetaLearnerParams,
    /// Summed query loss per outer iteration.
    pub query_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaCurve {
    pub query_losses: Vec<f64>,
}

/// Meta-train with dropout streams derived from the learner seed.
pub fn meta_train(theta0: &MetaLearnerParams, tasks: &[EpisodeTask], mcfg: &MetaConfig) -> Result<MetaOutcome> {
    let cfg = &theta0.config;
    let objective = ClassifierObjective { config: cfg };
    let seed = cfg.seed;
    let n_tasks = tasks.len() as u64;
    let (tensors, query_losses) = meta_train_objective(&objective, &theta0.tensors, tasks, mcfg, |it, i| {
        Some(rng::stream(seed, "meta.dropout", it as u64 * n_tasks + i as u64))
    })?;
    Ok(MetaOutcome {
        params: theta0.with_tensors(tensors),
        query_losses,
    })
}

/// Adapt on the support set, then score argmax accuracy on the query set.
/// `rng`, when given, drives dropout during adaptation only.
pub fn meta_test(
    theta: &MetaLearnerParams,
    task: &EpisodeTask,
    mcfg: &MetaConfig,
    rng: Option<&mut Rng>,
) -> Result<(f64, AdaptedParams)> {
    let adapted = inner_adapt(theta, task, mcfg, rng)?;
    let acc = learner::accuracy(&theta.with_tensors(adapted.tensors.clone()), &task.query)?;
    Ok((acc, adapted))
}
