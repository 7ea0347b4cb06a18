//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a blocking criterion fails.
//!
//! A11 runs on external corpora when `METATRACE_TRAIN_CORPUS`,
//! `METATRACE_TEST_CORPUS` and `METATRACE_SIDECAR` are set, and on
//! synthetic stand-ins written in the same formats otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metatrace::attention::{attention, attention_weights, multihead, AttentionParams};
use metatrace::baselines::{self, nearneighbor_predict, protonet_predict, Baseline, NearNeighbor};
use metatrace::embed::{HashingEmbedder, TextEmbedder};
use metatrace::episodes::{self, enumerate_combinations, meta_test_suite, LatentCorpus};
use metatrace::eval::{aggregate, render_table, EvalReport, TaskResult};
use metatrace::featurize::{corpus_texts, FeaturizedTrace, LogFeatureMatrix, SpanFeatureMatrix};
use metatrace::fusion_ae::{self, AEConfig, AEParams};
use metatrace::params::ParamSet;
use metatrace::pipeline::{self, EmbedderConfig, EpisodeConfig, Experiment, Method, RunConfig};
use metatrace::rng;
use metatrace::synthgen::{generate, injector_catalog, Effect, SystemProfile};
use metatrace::te_maml::learner::loss_and_grad;
use metatrace::te_maml::maml::adapt;
use metatrace::te_maml::{inner_adapt, Batch, EpisodeTask, LearnerConfig, MetaConfig, MetaLearnerParams, MetaObjective};
use metatrace::trace_model::{load_corpus, sniff_system, TraceCorpus};
use metatrace::{Matrix, Result};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let (m, d) = q.dim();
    let n = k.nrows();
    let mut out = Matrix::zeros((m, v.ncols()));
    for i in 0..m {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        for j in 0..n {
            for c in 0..v.ncols() {
                out[[i, c]] += exp[j] / z * v[[j, c]];
            }
        }
    }
    out
}

fn a1() -> Result<Outcome> {
    let mut r = rng::stream(11, "a1", 0);
    let mut worst_row = 0.0f64;
    let mut worst_single = 0.0f64;
    let mut worst_multi = 0.0f64;
    for _ in 0..100 {
        let (m, n, d) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=16));
        let q = random_matrix(&mut r, m, d);
        let k = random_matrix(&mut r, n, d);
        let v = random_matrix(&mut r, n, d);
        let w = attention_weights(&q, &k, d);
        for row in w.rows() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
        let oracle = naive_attention(&q, &k, &v);
        let single = attention(&q, &k, &v, d)?;
        let multi = multihead(&q, &k, &v, &AttentionParams::identity(d))?;
        worst_single = worst_single.max((&single - &oracle).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
        worst_multi = worst_multi.max((&multi - &single).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
    }
    outcome(
        worst_row < 1e-6 && worst_single < 1e-6 && worst_multi < 1e-6,
        format!("row-sum err {worst_row:.1e}, single vs oracle {worst_single:.1e}, h=1 vs single {worst_multi:.1e}"),
    )
}

/// Max relative error between `analytic` and central differences of `f`.
fn fd_check(params: &ParamSet, analytic: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> f64 {
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for (name, m) in params.iter() {
        for idx in 0..m.len() {
            let (i, j) = (idx / m.ncols(), idx % m.ncols());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[[i, j]] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[[i, j]] -= eps;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let exact = analytic.tensor(name)[[i, j]];
            let rel = (numeric - exact).abs() / (numeric.abs() + exact.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn a2() -> Result<Outcome> {
    let mut r = rng::stream(12, "a2", 0);
    let cfg = AEConfig {
        d_common: 8,
        n_heads: 2,
        activation: fusion_ae::Activation::Tanh,
        ..AEConfig::default()
    };
    let ae = AEParams::init(&cfg, 5, 6)?;
    let ft = FeaturizedTrace {
        trace_id: "toy".into(),
        label: None,
        n_spans: 2,
        span: SpanFeatureMatrix {
            values: random_matrix(&mut r, 2, 5),
        },
        log: LogFeatureMatrix {
            values: random_matrix(&mut r, 2, 6),
        },
    };
    let (_, grads) = fusion_ae::trace_loss_and_grad(&ae, &ft);
    let ae_err = fd_check(&ae.tensors, &grads, |p| {
        let q = AEParams {
            tensors: p.clone(),
            ..ae.clone()
        };
        fusion_ae::trace_loss_and_grad(&q, &ft).0
    });

    let lcfg = LearnerConfig {
        d_model: 8,
        n_heads: 2,
        n_classes: 3,
        dropout_rate: 0.0,
        ..LearnerConfig::default()
    };
    let learner = MetaLearnerParams::init(&lcfg)?;
    let batch = Batch::support(random_matrix(&mut r, 3, 8), vec![0, 1, 2]);
    let (_, lgrads) = loss_and_grad(&learner.tensors, &lcfg, &batch, None)?;
    let learner_err = fd_check(&learner.tensors, &lgrads, |p| loss_and_grad(p, &lcfg, &batch, None).unwrap().0);
    outcome(
        ae_err < 1e-4 && learner_err < 1e-4,
        format!("max rel err: reconstruction {ae_err:.1e}, learner cross-entropy {learner_err:.1e}"),
    )
}

fn a3() -> Result<Outcome> {
    let profile = SystemProfile::trainticket_like();
    let corpus = generate(&profile, &[], 200, 0, 3)?;
    let cfg = AEConfig {
        epochs: 50,
        seed: 3,
        ..AEConfig::default()
    };
    let embedder = HashingEmbedder::default();
    let first = pipeline::train_autoencoder(&corpus, &cfg, &embedder)?;
    let second = pipeline::train_autoencoder(&corpus, &cfg, &embedder)?;
    let (init, last) = (first.curve.initial_train(), first.curve.final_train());
    let val = first.curve.epochs.last().map_or(f64::NAN, |e| e.validation);
    let repeat = (second.curve.final_train() - last).abs();
    outcome(
        last < 0.5 * init && val.is_finite() && repeat <= 1e-9,
        format!("train mse {init:.4} -> {last:.4} ({:.1}%), val {val:.4}, rerun diff {repeat:.1e}", 100.0 * last / init),
    )
}

/// Magnitude at which distinct-effect categories are separable by nearest
/// neighbour on the learned latents.
const SEPARABLE: f64 = 10.0;

fn fault_corpus(profile: &SystemProfile, effects: &[Effect], n_categories: usize, seed: u64) -> Result<TraceCorpus> {
    let injectors = injector_catalog(profile, effects, n_categories, SEPARABLE);
    generate(profile, &injectors, 200, 25, seed)
}

fn run_config(seed: u64, n_tasks: usize) -> RunConfig {
    RunConfig {
        seed,
        ae: AEConfig {
            epochs: 5,
            ..AEConfig::default()
        },
        meta: MetaConfig {
            inner_steps: 20,
            ..MetaConfig::default()
        },
        episodes: EpisodeConfig {
            n_tasks,
            ..EpisodeConfig::default()
        },
        ..RunConfig::default()
    }
}

fn a4(system_a: &TraceCorpus) -> Result<Outcome> {
    let cfg = run_config(4, 20);
    let mut exp = Experiment::new("E1", system_a, system_a, cfg.clone())?;
    let report = exp.run(Method::TeMaml, 5, false)?;
    let (_, test, _) = exp.latents(Default::default(), false)?;
    let untrained = pipeline::untrained_accuracy(test, &cfg)?;
    outcome(
        report.mean_accuracy >= 0.85 && untrained <= 0.30,
        format!("adapted {} over {} tasks, untrained {:.3}", report.cell(), report.tasks.len(), untrained),
    )
}

fn a5(system_a: &TraceCorpus, system_b: &TraceCorpus) -> Result<Outcome> {
    let mut exp = Experiment::new("E3", system_a, system_b, run_config(5, 20))?;
    let report = exp.run(Method::TeMaml, 10, false)?;
    outcome(
        report.mean_accuracy >= 0.70,
        format!("{} -> {} 10-shot: {}", system_a.system, system_b.system, report.cell()),
    )
}

/// Scalar quadratic objective `L(θ) = θ²` on both support and query.
struct Square;

impl MetaObjective for Square {
    type Task = ();

    fn support_loss_grad(&self, p: &ParamSet, _: &(), _: Option<&mut rng::Rng>) -> Result<(f64, ParamSet)> {
        let t = p.tensor("theta")[[0, 0]];
        let mut g = ParamSet::new();
        g.insert("theta", Matrix::from_elem((1, 1), 2.0 * t));
        Ok((t * t, g))
    }

    fn query_loss_grad(&self, p: &ParamSet, t: &(), r: Option<&mut rng::Rng>) -> Result<(f64, ParamSet)> {
        self.support_loss_grad(p, t, r)
    }
}

fn a6() -> Result<Outcome> {
    let mut theta = ParamSet::new();
    theta.insert("theta", Matrix::from_elem((1, 1), 1.0));
    let stepped = adapt(&Square, &theta, &(), 0.1, 1, None)?;
    let scalar_err = (stepped.tensor("theta")[[0, 0]] - 0.8).abs();

    let lcfg = LearnerConfig {
        d_model: 8,
        n_heads: 2,
        n_classes: 3,
        dropout_rate: 0.0,
        ..LearnerConfig::default()
    };
    let learner = MetaLearnerParams::init(&lcfg)?;
    let mut r = rng::stream(16, "a6", 0);
    let support = random_matrix(&mut r, 6, 8);
    let task = EpisodeTask {
        task_id: "toy".into(),
        support: Batch::support(support.clone(), vec![0, 1, 2, 0, 1, 2]),
        query: Batch::query(&support, &random_matrix(&mut r, 3, 8), vec![0, 1, 2]),
    };
    let alpha = 0.1;
    let mcfg = MetaConfig {
        alpha,
        inner_steps: 1,
        ..MetaConfig::default()
    };
    let adapted = inner_adapt(&learner, &task, &mcfg, None)?;
    let eps = 1e-5;
    let loss = |p: &ParamSet| loss_and_grad(p, &lcfg, &task.support, None).unwrap().0;
    let mut worst = 0.0f64;
    for (name, m) in learner.tensors.iter() {
        for idx in 0..m.len() {
            let (i, j) = (idx / m.ncols(), idx % m.ncols());
            let mut plus = learner.tensors.clone();
            plus.get_mut(name).unwrap()[[i, j]] += eps;
            let mut minus = learner.tensors.clone();
            minus.get_mut(name).unwrap()[[i, j]] -= eps;
            let grad = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let expected = m[[i, j]] - alpha * grad;
            worst = worst.max((adapted.tensors.tensor(name)[[i, j]] - expected).abs());
        }
    }
    outcome(
        worst < 1e-5 && scalar_err < 1e-12,
        format!("inner step vs finite-difference oracle {worst:.1e}, scalar example err {scalar_err:.1e}"),
    )
}

fn a7() -> Result<Outcome> {
    let mut records = Vec::new();
    for c in 0..10 {
        for i in 0..20 {
            records.push(episodes::LatentRecord {
                trace_id: format!("c{c}-{i}"),
                label: Some(format!("c{c}")),
                system: "toy".into(),
                n_spans: 3,
                z: vec![c as f64, i as f64],
            });
        }
    }
    let pool = LatentCorpus {
        system: "toy".into(),
        records,
    };
    let novel: Vec<_> = (0..10)
        .map(|c| metatrace::trace_model::FaultCategory {
            id: format!("c{c}"),
            system: "toy".into(),
            split: Some(metatrace::trace_model::Split::Novel),
        })
        .collect();
    let suite = meta_test_suite(&pool, &novel, 5, 50, 1, 1, 7)?;
    let mut combos: Vec<Vec<String>> = suite
        .iter()
        .map(|e| {
            let mut ids: Vec<String> = e.categories.iter().map(|c| c.id.clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    combos.sort();
    combos.dedup();
    let total = enumerate_combinations(10, 5).len();
    let over = meta_test_suite(&pool, &novel, 5, 253, 1, 1, 7);
    let msg = over.as_ref().err().map(|e| e.to_string()).unwrap_or_default();
    outcome(
        suite.len() == 50 && combos.len() == 50 && total == 252 && over.is_err(),
        format!("{} distinct of {}, {total} candidates, 253 -> {msg:?}", combos.len(), suite.len()),
    )
}

fn a8() -> Result<Outcome> {
    // one category per effect, so every episode holds five distinct effects
    let corpus = fault_corpus(&SystemProfile::trainticket_like(), &Effect::ALL, 5, 8)?;
    let cfg = run_config(8, 20);
    let mut exp = Experiment::new("E1", &corpus, &corpus, cfg.clone())?;
    let (latents, _, _) = exp.latents(Default::default(), false)?.clone();
    let cats: Vec<_> = corpus.categories.values().cloned().collect();
    let (mut nn_total, mut mismatches, mut checked) = (0.0, 0, 0);
    for t in 0..50u64 {
        let ep = episodes::episode_for(&latents, &cats, 10, 15, 8, t, format!("a8-{t}"))?;
        nn_total += baselines::episode_accuracy(&mut NearNeighbor::default(), &ep)?;
        let one = episodes::episode_for(&latents, &cats, 1, 15, 9, t, format!("a8-k1-{t}"))?;
        for (z, _) in &one.query.items {
            checked += 1;
            if protonet_predict(&one.support, &z.z)? != nearneighbor_predict(&one.support, &z.z)? {
                mismatches += 1;
            }
        }
    }
    let nn = nn_total / 50.0;
    outcome(
        nn >= 0.95 && mismatches == 0,
        format!("nearneighbor 5-way 10-shot mean {nn:.4} over 50 episodes; protonet K=1 disagrees on {mismatches}/{checked} queries"),
    )
}

fn a9() -> Result<Outcome> {
    let profile = SystemProfile::trainticket_like();
    let corpus = fault_corpus(&profile, &[Effect::ConfigFault], 20, 9)?;
    let mut exp = Experiment::new("E1", &corpus, &corpus, run_config(9, 20))?;
    let full = exp.run(Method::TeMaml, 5, false)?;
    let span = exp.run(Method::Baseline(Baseline::OnlySpan), 5, false)?;
    let gap = 100.0 * (full.mean_accuracy - span.mean_accuracy);
    outcome(gap >= 10.0, format!("full {} vs span-only {} ({gap:+.2} points)", full.cell(), span.cell()))
}

fn a10() -> Result<Outcome> {
    let tasks = vec![TaskResult::new("a", vec![0.8])?, TaskResult::new("b", vec![1.0])?];
    let cell = aggregate(&tasks)?.cell();
    let setup = metatrace::eval::Setup {
        n_way: 5,
        k_shot: 5,
        m_query: 15,
    };
    let report = EvalReport::new("E1", "multihattenae+te-maml", setup, tasks)?;
    let back = EvalReport::from_json(&report.to_json()?)?;
    outcome(
        cell == "90.00±19.60 (80.00-100.00)" && back == report,
        format!("cell {cell:?}, json round trip {}", back == report),
    )
}

fn write_sidecar(path: &Path, corpora: &[&TraceCorpus]) -> Result<()> {
    let embedder = HashingEmbedder::new(32, 2);
    let mut texts: Vec<String> = corpora.iter().flat_map(|c| corpus_texts(c)).collect();
    texts.sort();
    texts.dedup();
    let mut out = String::new();
    for t in texts {
        let line = serde_json::json!({ "text": t, "vec": embedder.embed(&t)? });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| metatrace::Error::io(path, e))
}

/// E1–E4 over two systems with a sidecar embedder; checks every table cell
/// has the expected shape.
fn a11() -> Result<Outcome> {
    let external = ["METATRACE_TRAIN_CORPUS", "METATRACE_TEST_CORPUS", "METATRACE_SIDECAR"].map(|k| std::env::var_os(k).map(PathBuf::from));
    let dir = tempfile::tempdir().map_err(|e| metatrace::Error::io("tempdir", e))?;
    let (a, b, sidecar, source) = match external {
        [Some(a), Some(b), Some(s)] => (load_corpus(&a, &sniff_system(&a)?)?, load_corpus(&b, &sniff_system(&b)?)?, s, "external corpora"),
        _ => {
            let a = fault_corpus(&SystemProfile::trainticket_like(), &Effect::ALL, 15, 21)?;
            let b = fault_corpus(&SystemProfile::onlineboutique_like(), &Effect::ALL, 15, 22)?;
            let s = dir.path().join("sidecar.jsonl");
            write_sidecar(&s, &[&a, &b])?;
            (a, b, s, "synthetic stand-ins (no external corpora supplied)")
        }
    };
    let mut cfg = run_config(11, 10);
    cfg.ae.epochs = 2;
    cfg.meta.meta_iterations = 20;
    cfg.episodes.runs = 2;
    cfg.embedder = EmbedderConfig::Sidecar { path: sidecar };
    let pairs: [(&str, &TraceCorpus, &TraceCorpus); 4] = [("E1", &a, &a), ("E2", &b, &b), ("E3", &a, &b), ("E4", &b, &a)];
    let mut reports = Vec::new();
    for (id, train, test) in pairs {
        let mut exp = Experiment::new(id, train, test, cfg.clone())?;
        reports.push(exp.run(Method::TeMaml, 5, false)?);
    }
    let cell = regex::Regex::new(r"^\d+\.\d{2}±\d+\.\d{2} \(\d+\.\d{2}-\d+\.\d{2}\)$").unwrap();
    let ok = reports.iter().all(|r| cell.is_match(&r.cell()));
    let table = render_table(&reports);
    let cells: BTreeMap<_, _> = reports.iter().map(|r| (r.experiment.clone(), r.cell())).collect();
    outcome(ok && table.lines().count() == 6, format!("{source}: {cells:?}"))
}

fn main() {
    let started = Instant::now();
    let system_a = fault_corpus(&SystemProfile::trainticket_like(), &Effect::ALL, 20, 1).expect("system A");
    let system_b = fault_corpus(&SystemProfile::onlineboutique_like(), &Effect::ALL, 15, 2).expect("system B");

    type Check<'a> = (&'static str, f64, bool, Box<dyn Fn() -> Result<Outcome> + 'a>);
    let checks: Vec<Check> = vec![
        ("A1", 10.0, true, Box::new(a1)),
        ("A2", 60.0, true, Box::new(a2)),
        ("A3", 300.0, true, Box::new(a3)),
        ("A4", 600.0, true, Box::new(|| a4(&system_a))),
        ("A5", 600.0, true, Box::new(|| a5(&system_a, &system_b))),
        ("A6", f64::INFINITY, true, Box::new(a6)),
        ("A7", f64::INFINITY, true, Box::new(a7)),
        ("A8", f64::INFINITY, true, Box::new(a8)),
        ("A9", f64::INFINITY, true, Box::new(a9)),
        ("A10", f64::INFINITY, true, Box::new(a10)),
        ("A11", f64::INFINITY, false, Box::new(a11)),
    ];
    let only: Option<Vec<String>> = std::env::args().nth(1).filter(|a| a.starts_with('A')).map(|a| a.split(',').map(str::to_owned).collect());
    let mut failed = Vec::new();
    for (id, budget, blocking, check) in &checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && secs < *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget_note = if budget.is_finite() { format!(" (limit {budget:.0}s)") } else { String::new() };
        println!("{id:<4}{} {detail} [{secs:.1}s{budget_note}]", if pass { "PASS" } else { "FAIL" });
        if !pass && *blocking {
            failed.push(*id);
        }
    }
    println!("acceptance finished in {:.1}s", started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
