use metatrace::checkpoint;
use metatrace::episodes::LatentCorpus;
use metatrace::pipeline::{self, Experiment, Method, RunConfig};
use metatrace::synthgen::{generate, injector_catalog, Effect, SystemProfile};
use metatrace::trace_model::{load_corpus, sniff_system, TraceCorpus};

fn corpus(profile: SystemProfile, seed: u64) -> TraceCorpus {
    let injectors = injector_catalog(&profile, &Effect::ALL, 15, 10.0);
    generate(&profile, &injectors, 40, 20, seed).unwrap()
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.ae.epochs = 1;
    cfg.meta.meta_iterations = 3;
    cfg.episodes.n_tasks = 4;
    cfg.episodes.runs = 2;
    cfg
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let c = corpus(SystemProfile::trainticket_like(), 1);
    c.save(&path).unwrap();
    let system = sniff_system(&path).unwrap();
    assert_eq!(system, c.system);
    let back = load_corpus(&path, &system).unwrap();
    assert_eq!(back.to_jsonl_string(), c.to_jsonl_string());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2).resolved();
    let c = corpus(SystemProfile::trainticket_like(), 2);
    let embedder = cfg.embedder.build().unwrap();
    let ae = pipeline::train_autoencoder(&c, &cfg.ae, embedder.as_ref()).unwrap().params;
    let ae_path = dir.path().join("ae.json");
    checkpoint::save_ae(&ae_path, &ae).unwrap();
    assert_eq!(checkpoint::load_ae(&ae_path).unwrap(), ae);

    let latents = pipeline::encode_corpus(&c, &ae, embedder.as_ref(), false).unwrap();
    let z_path = dir.path().join("z.jsonl");
    latents.save(&z_path).unwrap();
    let z_back = LatentCorpus::load(&z_path).unwrap();
    assert_eq!(z_back.records.len(), latents.records.len());

    let meta = pipeline::meta_train_latents(&latents, &cfg).unwrap().params;
    let m_path = dir.path().join("m.json");
    checkpoint::save_meta(&m_path, &meta).unwrap();
    assert_eq!(checkpoint::load_meta(&m_path).unwrap(), meta);

    // a reloaded learner reports exactly what the in-memory one does
    let a = pipeline::meta_test_latents(&meta, &latents, &cfg, "E1", "te-maml").unwrap();
    let b = pipeline::meta_test_latents(&checkpoint::load_meta(&m_path).unwrap(), &z_back, &cfg, "E1", "te-maml").unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn experiment_is_deterministic_and_bounded() {
    let train = corpus(SystemProfile::trainticket_like(), 4);
    let run = || {
        let mut exp = Experiment::new("E1", &train, &train, small_config(4)).unwrap();
        assert!(!exp.cross_system());
        exp.run(Method::TeMaml, 5, false).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.tasks.len(), 4);
    assert!(a.tasks.iter().all(|t| t.runs.len() == 2));
    assert!((0.0..=100.0).contains(&a.mean_accuracy));
    assert!(a.min_accuracy <= a.mean_accuracy && a.mean_accuracy <= a.max_accuracy);
}

#[test]
fn cross_system_runs_and_body_baselines_need_consent() {
    let train = corpus(SystemProfile::trainticket_like(), 5);
    let test = corpus(SystemProfile::onlineboutique_like(), 6);
    let mut exp = Experiment::new("E3", &train, &test, small_config(5)).unwrap();
    assert!(exp.cross_system());
    let nn = exp.run(Method::parse("nearneighbor").unwrap(), 5, false).unwrap();
    assert_eq!(nn.tasks.len(), 4);
    assert!(exp.run(Method::parse("lstm-maml").unwrap(), 5, false).is_err());
}

#[test]
fn too_many_tasks_are_refused() {
    let train = corpus(SystemProfile::trainticket_like(), 7);
    let mut cfg = small_config(7);
    cfg.episodes.n_tasks = 300;
    let err = Experiment::new("E1", &train, &train, cfg)
        .and_then(|mut e| e.run(Method::TeMaml, 5, false))
        .unwrap_err();
    assert!(err.to_string().contains("C(10,5)=252"), "{err}");
}
