//! End-to-end composition: corpus → autoencoder → latents → meta-learner
//! → evaluation report, for the main method and every baseline.

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Baseline, DecisionTree, EpisodicClassifier, MatchingTrainConfig, NearNeighbor, ProtoNet};
use crate::checkpoint::round_to_f32;
use crate::embed::{HashingEmbedder, SidecarEmbedder, TextEmbedder};
use crate::episodes::{self, Episode, LatentCorpus, LatentRecord};
use crate::error::{Error, Result};
use crate::eval::{time_phase, EvalReport, Setup, TaskResult, TimingSummary};
use crate::featurize::featurize_corpus;
use crate::fusion_ae::{self, AEConfig, AEParams, FusionVariant, LossCurve};
use crate::rng;
use crate::te_maml::{self, EpisodeTask, LearnerConfig, MetaConfig, MetaLearnerParams};
use crate::trace_model::{FaultCategory, TraceCorpus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Meta-testing tasks per experiment.
    pub n_tasks: usize,
    /// Meta-training tasks.
    pub n_meta_tasks: usize,
    pub n_novel: usize,
    /// Adaptation runs per meta-testing task; the best run counts.
    pub runs: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            m_query: episodes::DEFAULT_QUERY_SHOTS,
            n_tasks: 50,
            n_meta_tasks: 4,
            n_novel: 10,
            runs: 5,
        }
    }
}

impl EpisodeConfig {
    pub fn setup(&self) -> Setup {
        Setup {
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashing { dim: usize, n_hashes: usize },
    /// Precomputed `{"text", "vec"}` JSONL file.
    Sidecar { path: PathBuf },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let h = HashingEmbedder::default();
        EmbedderConfig::Hashing {
            dim: h.dim,
            n_hashes: h.n_hashes,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        Ok(match self {
            EmbedderConfig::Hashing { dim, n_hashes } => {
                if *dim == 0 || *n_hashes == 0 {
                    return Err(Error::Config("hashing embedder needs positive dim and n_hashes".into()));
                }
                Box::new(HashingEmbedder::new(*dim, *n_hashes))
            }
            EmbedderConfig::Sidecar { path } => Box::new(SidecarEmbedder::load(path)?),
        })
    }
}

/// Everything a run needs besides its input files. Component seeds are
/// derived from `seed` by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub ae: AEConfig,
    pub learner: LearnerConfig,
    pub meta: MetaConfig,
    pub episodes: EpisodeConfig,
    pub embedder: EmbedderConfig,
    /// Matching network embedder training; defaults follow `meta`.
    pub matching: Option<MatchingTrainConfig>,
    /// Include wall-clock timings in reports.
    pub timing: bool,
}


impl RunConfig {
    /// Copy with the autoencoder and learner seeds derived from the root
    /// seed (streams `ae` and `meta`).
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.ae.seed = rng::derive_seed(self.seed, "ae", 0);
        c.learner.seed = rng::derive_seed(self.seed, "meta", 0);
        c
    }

    pub fn episode_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "episodes", 0)
    }

    pub fn runs_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "runs", 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        self.meta.validate()?;
        let e = &self.episodes;
        if e.n_way == 0 || e.k_shot == 0 || e.m_query == 0 || e.runs == 0 || e.n_tasks == 0 {
            return Err(Error::Config("n_way, k_shot, m_query, n_tasks and runs must be positive".into()));
        }
        if e.n_meta_tasks == 0 {
            return Err(Error::Config("n_meta_tasks must be at least 1".into()));
        }
        Ok(())
    }

    fn matching(&self) -> MatchingTrainConfig {
        self.matching.clone().unwrap_or(MatchingTrainConfig {
            n_heads: self.learner.n_heads,
            iterations: self.meta.meta_iterations,
            learning_rate: self.meta.beta,
            seed: rng::derive_seed(self.seed, "matching", 0),
        })
    }
}

/// Train the autoencoder on the corpus's unlabeled traces. Parameters are
/// rounded to checkpoint precision so in-memory and reloaded models agree.
pub fn train_autoencoder(corpus: &TraceCorpus, ae: &AEConfig, embedder: &dyn TextEmbedder) -> Result<fusion_ae::TrainOutcome> {
    let mut out = fusion_ae::train_ae(corpus, ae, embedder)?;
    round_to_f32(&mut out.params.tensors);
    Ok(out)
}

/// Latent record for every trace of `corpus`.
pub fn encode_corpus(
    corpus: &TraceCorpus,
    params: &AEParams,
    embedder: &dyn TextEmbedder,
    span_only: bool,
) -> Result<LatentCorpus> {
    let features = featurize_corpus(corpus, embedder, &params.config.featurize)?;
    let records = features
        .par_iter()
        .map(|ft| {
            let z = if span_only {
                baselines::onlyspan_pipeline(ft, params)?
            } else {
                fusion_ae::encode_trace(ft, params)?
            };
            Ok(LatentRecord {
                trace_id: ft.trace_id.clone(),
                label: ft.label.clone(),
                system: corpus.system.clone(),
                n_spans: ft.n_spans,
                z: z.z,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentCorpus {
        system: corpus.system.clone(),
        records,
    })
}

/// Seeded base/novel split of the labeled categories in `latents`.
pub fn category_split(latents: &LatentCorpus, cfg: &RunConfig) -> Result<(Vec<FaultCategory>, Vec<FaultCategory>)> {
    episodes::split_by_lengths(
        &latents.system,
        &latents.span_lengths(),
        cfg.episodes.n_novel,
        cfg.episodes.n_way,
        cfg.episode_seed(),
    )
}

/// Meta-training episodes drawn from the base categories.
pub fn meta_training_episodes(latents: &LatentCorpus, cfg: &RunConfig) -> Result<Vec<Episode>> {
    let (base, _) = category_split(latents, cfg)?;
    let e = &cfg.episodes;
    (0..e.n_meta_tasks)
        .map(|i| episodes::sample_episode(latents, &base, e.n_way, e.k_shot, e.m_query, cfg.episode_seed(), i as u64))
        .collect()
}

/// Meta-testing suite over the novel categories.
pub fn meta_testing_episodes(latents: &LatentCorpus, cfg: &RunConfig) -> Result<Vec<Episode>> {
    let (_, novel) = category_split(latents, cfg)?;
    let e = &cfg.episodes;
    episodes::meta_test_suite(latents, &novel, e.n_way, e.n_tasks, e.k_shot, e.m_query, cfg.episode_seed())
}

fn learner_config(cfg: &RunConfig, d_model: usize) -> LearnerConfig {
    LearnerConfig {
        d_model,
        n_classes: cfg.episodes.n_way,
        ..cfg.learner.clone()
    }
}

pub struct MetaTrainOutput {
    pub params: MetaLearnerParams,
    pub query_losses: Vec<f64>,
    pub episodes: Vec<Episode>,
    pub seconds: f64,
}

/// Meta-train a learner (body taken from `cfg.learner`) on base-category
/// episodes of `latents`.
pub fn meta_train_latents(latents: &LatentCorpus, cfg: &RunConfig) -> Result<MetaTrainOutput> {
    let cfg = cfg.resolved();
    let episodes = meta_training_episodes(latents, &cfg)?;
    let tasks: Vec<EpisodeTask> = episodes.iter().map(Episode::to_task).collect();
    let theta0 = MetaLearnerParams::init(&learner_config(&cfg, latents.dim()))?;
    let (out, seconds) = time_phase(|| te_maml::meta_train(&theta0, &tasks, &cfg.meta));
    let mut out = out?;
    round_to_f32(&mut out.params.tensors);
    Ok(MetaTrainOutput {
        params: out.params,
        query_losses: out.query_losses,
        episodes,
        seconds,
    })
}

/// Adapt `theta` to each meta-testing task `runs` times (runs differ in
/// their dropout stream) and report the best run per task.
pub fn meta_test_latents(
    theta: &MetaLearnerParams,
    latents: &LatentCorpus,
    cfg: &RunConfig,
    experiment: &str,
    method: &str,
) -> Result<EvalReport> {
    if theta.config.d_model != latents.dim() {
        return Err(Error::shape("latent width vs meta-learner", theta.config.d_model, latents.dim()));
    }
    let suite = meta_testing_episodes(latents, cfg)?;
    let runs = cfg.episodes.runs;
    let runs_seed = cfg.runs_seed();
    let results: Vec<TaskResult> = suite
        .par_iter()
        .enumerate()
        .map(|(t, ep)| {
            let task = ep.to_task();
            let mut accs = Vec::with_capacity(runs);
            let mut seconds = 0.0;
            for r in 0..runs {
                let mut stream = rng::stream(runs_seed, "run", (t * runs + r) as u64);
                let (res, s) = time_phase(|| te_maml::meta_test(theta, &task, &cfg.meta, Some(&mut stream)));
                accs.push(res?.0);
                seconds += s;
            }
            let mut tr = TaskResult::new(ep.task_id.clone(), accs)?;
            if cfg.timing {
                tr.adapt_seconds = Some(seconds / runs as f64);
            }
            Ok(tr)
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::new(experiment, method, cfg.episodes.setup(), results)?;
    if cfg.timing {
        let adapt: Vec<f64> = report.tasks.iter().filter_map(|t| t.adapt_seconds).collect();
        report.timing = Some(TimingSummary {
            mean_adapt_seconds: Some(adapt.iter().sum::<f64>() / adapt.len() as f64),
            ..TimingSummary::default()
        });
    }
    Ok(report)
}

/// Accuracy of the un-meta-trained learner without adaptation, averaged
/// over the meta-testing suite. A chance-level reference.
pub fn untrained_accuracy(latents: &LatentCorpus, cfg: &RunConfig) -> Result<f64> {
    let cfg = cfg.resolved();
    let theta = MetaLearnerParams::init(&learner_config(&cfg, latents.dim()))?;
    let suite = meta_testing_episodes(latents, &cfg)?;
    let accs = suite
        .iter()
        .map(|ep| te_maml::learner::accuracy(&theta, &ep.to_task().query))
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Score a metric or tree baseline on the meta-testing suite of `test`.
/// The matching network's embedder is trained on episodes of `train`.
pub fn metric_report(
    baseline: Baseline,
    train: &LatentCorpus,
    test: &LatentCorpus,
    cfg: &RunConfig,
    experiment: &str,
) -> Result<EvalReport> {
    let suite = meta_testing_episodes(test, cfg)?;
    let matching = if baseline == Baseline::MatchingNet {
        let tasks: Vec<EpisodeTask> = meta_training_episodes(train, cfg)?.iter().map(Episode::to_task).collect();
        Some(baselines::train_matchingnet(&tasks, &cfg.matching())?)
    } else {
        None
    };
    let results = suite
        .par_iter()
        .map(|ep| {
            let mut clf: Box<dyn EpisodicClassifier> = match baseline {
                Baseline::ProtoNet => Box::new(ProtoNet::default()),
                Baseline::NearNeighbor => Box::new(NearNeighbor::default()),
                Baseline::DecisionTree => Box::new(DecisionTree::default()),
                Baseline::MatchingNet => Box::new(matching.clone().expect("trained above")),
                other => return Err(Error::Config(format!("{other} is not a metric baseline"))),
            };
            let (acc, s) = time_phase(|| baselines::episode_accuracy(clf.as_mut(), ep));
            let mut tr = TaskResult::new(ep.task_id.clone(), vec![acc?])?;
            if cfg.timing {
                tr.adapt_seconds = Some(s);
            }
            Ok(tr)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(experiment, format!("multihattenae+{baseline}"), cfg.episodes.setup(), results)
}

/// Method under evaluation: the full pipeline or one baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    TeMaml,
    Baseline(Baseline),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "te-maml" {
            Ok(Method::TeMaml)
        } else {
            Ok(Method::Baseline(s.parse()?))
        }
    }

    pub fn name(self) -> String {
        match self {
            Method::TeMaml => "multihattenae+te-maml".into(),
            Method::Baseline(b @ (Baseline::OnlySpan | Baseline::LinearAe | Baseline::GluAe)) => format!("{b}+te-maml"),
            Method::Baseline(b) => format!("multihattenae+{b}"),
        }
    }

    fn fusion(self) -> FusionVariant {
        match self {
            Method::TeMaml => FusionVariant::Multihead,
            Method::Baseline(b) => b.fusion(),
        }
    }

    fn span_only(self) -> bool {
        matches!(self, Method::Baseline(b) if b.span_only())
    }
}

/// Runs methods over a (train system, test system) pair, caching trained
/// autoencoders and latents across methods and shot counts.
pub struct Experiment<'a> {
    pub id: String,
    pub train: &'a TraceCorpus,
    pub test: &'a TraceCorpus,
    pub cfg: RunConfig,
    embedder: Box<dyn TextEmbedder>,
    autoencoders: HashMap<FusionVariant, (AEParams, LossCurve, Vec<f64>)>,
    latents: HashMap<(FusionVariant, bool), (LatentCorpus, LatentCorpus, f64)>,
}

impl<'a> Experiment<'a> {
    pub fn new(id: impl Into<String>, train: &'a TraceCorpus, test: &'a TraceCorpus, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = cfg.embedder.build()?;
        Ok(Self {
            id: id.into(),
            train,
            test,
            cfg,
            embedder,
            autoencoders: HashMap::new(),
            latents: HashMap::new(),
        })
    }

    pub fn cross_system(&self) -> bool {
        self.train.system != self.test.system
    }

    pub fn autoencoder(&mut self, variant: FusionVariant) -> Result<&(AEParams, LossCurve, Vec<f64>)> {
        if !self.autoencoders.contains_key(&variant) {
            let ae = AEConfig {
                variant,
                ..self.cfg.resolved().ae
            };
            let out = train_autoencoder(self.train, &ae, self.embedder.as_ref())?;
            self.autoencoders.insert(variant, (out.params, out.curve, out.epoch_seconds));
        }
        Ok(&self.autoencoders[&variant])
    }

    /// Train and test latents for a representation, plus seconds spent
    /// encoding them.
    pub fn latents(&mut self, variant: FusionVariant, span_only: bool) -> Result<&(LatentCorpus, LatentCorpus, f64)> {
        let key = (variant, span_only);
        if !self.latents.contains_key(&key) {
            self.autoencoder(variant)?;
            let params = &self.autoencoders[&variant].0;
            let (pair, secs) = time_phase(|| -> Result<_> {
                let train = encode_corpus(self.train, params, self.embedder.as_ref(), span_only)?;
                let test = if self.cross_system() {
                    encode_corpus(self.test, params, self.embedder.as_ref(), span_only)?
                } else {
                    train.clone()
                };
                Ok((train, test))
            });
            let (train, test) = pair?;
            self.latents.insert(key, (train, test, secs));
        }
        Ok(&self.latents[&key])
    }

    /// Evaluate `method` at `k_shot`. Alternative meta-learner bodies are
    /// refused on cross-system pairs unless `allow_cross_system_bodies`.
    pub fn run(&mut self, method: Method, k_shot: usize, allow_cross_system_bodies: bool) -> Result<EvalReport> {
        if let Method::Baseline(b) = method {
            if self.cross_system() && !b.cross_system() && !allow_cross_system_bodies {
                return Err(Error::Config(format!("{b} is only evaluated within one system")));
            }
        }
        let mut cfg = self.cfg.clone();
        cfg.episodes.k_shot = k_shot;
        let (train, test, encode_secs) = self.latents(method.fusion(), method.span_only())?.clone();
        let epoch_seconds = self.autoencoders[&method.fusion()].2.clone();
        let mut report = match method {
            Method::Baseline(b) if b.body().is_none() => metric_report(b, &train, &test, &cfg, &self.id)?,
            _ => {
                if let Method::Baseline(b) = method {
                    cfg.learner.body = b.body().expect("meta-learner baseline");
                }
                let trained = meta_train_latents(&train, &cfg)?;
                let mut r = meta_test_latents(&trained.params, &test, &cfg, &self.id, &method.name())?;
                if let Some(t) = r.timing.as_mut() {
                    t.meta_train_seconds = Some(trained.seconds);
                }
                r
            }
        };
        report.method = method.name();
        if cfg.timing {
            let t = report.timing.get_or_insert_with(TimingSummary::default);
            t.representation_seconds = Some(encode_secs);
            t.ae_epoch_seconds = epoch_seconds;
            if t.mean_adapt_seconds.is_none() {
                let adapt: Vec<f64> = report.tasks.iter().filter_map(|x| x.adapt_seconds).collect();
                t.mean_adapt_seconds = Some(adapt.iter().sum::<f64>() / adapt.len().max(1) as f64);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, injector_catalog, Effect, SystemProfile};

    fn small_cfg() -> RunConfig {
        RunConfig {
            seed: 1,
            ae: AEConfig {
                d_common: 8,
                n_heads: 2,
                epochs: 1,
                batch_size: 8,
                ..AEConfig::default()
            },
            learner: LearnerConfig {
                n_heads: 2,
                ..LearnerConfig::default()
            },
            meta: MetaConfig {
                meta_iterations: 2,
                inner_steps: 1,
                ..MetaConfig::default()
            },
            episodes: EpisodeConfig {
                n_way: 2,
                k_shot: 1,
                m_query: 2,
                n_tasks: 3,
                n_meta_tasks: 2,
                n_novel: 3,
                runs: 2,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let p = SystemProfile::onlineboutique_like();
        let inj = injector_catalog(&p, &[Effect::ServiceException, Effect::ConfigFault], 6, 2.0);
        let corpus = generate(&p, &inj, 16, 4, 3).unwrap();
        let run = || {
            let mut e = Experiment::new("E2", &corpus, &corpus, small_cfg()).unwrap();
            let a = e.run(Method::TeMaml, 1, false).unwrap();
            let b = e.run(Method::Baseline(Baseline::NearNeighbor), 1, false).unwrap();
            (a.to_json().unwrap(), b.to_json().unwrap())
        };
        let first = run();
        assert_eq!(first, run());
        let report = EvalReport::from_json(&first.0).unwrap();
        assert_eq!(report.tasks.len(), 3);
        assert!(report.tasks.iter().all(|t| t.n_runs == 2));
        assert_eq!(report.method, "multihattenae+te-maml");
    }

    #[test]
    fn method_names_parse() {
        assert_eq!(Method::parse("te-maml").unwrap(), Method::TeMaml);
        assert_eq!(Method::parse("glu-ae").unwrap().name(), "glu-ae+te-maml");
        assert_eq!(Method::parse("protonet").unwrap().name(), "multihattenae+protonet");
        assert!(Method::parse("bogus").is_err());
    }
}
