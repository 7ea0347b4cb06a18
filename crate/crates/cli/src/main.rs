use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use metatrace::baselines::Baseline;
use metatrace::checkpoint;
use metatrace::episodes::LatentCorpus;
use metatrace::eval::{render_table, EvalReport};
use metatrace::pipeline::{self, Experiment, Method, RunConfig};
use metatrace::synthgen::{self, Effect, GenConfig, SystemProfile};
use metatrace::trace_model::{load_corpus, sniff_system, TraceCorpus};
use metatrace::Error;

/// Exit status for data, configuration and validation errors.
const EXIT_DATA: u8 = 3;
/// Exit status for numerical divergence during training.
const EXIT_DIVERGENCE: u8 = 4;
/// Exit status for usage errors detected after argument parsing.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "metatrace", version, about = "Few-shot abnormal trace classification")]
#[command(after_help = "Set METATRACE_LOG (error, warn, info, debug, trace) to control log output.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled trace corpus.
    Gen(GenArgs),
    /// Train the fusion autoencoder on the unlabeled traces of a corpus.
    TrainAe(TrainAeArgs),
    /// Encode every trace of a corpus into a latent vector.
    Encode(EncodeArgs),
    /// Meta-train the learner on episodes from base categories.
    MetaTrain(MetaTrainArgs),
    /// Adapt a meta-trained learner to novel-category tasks and report accuracy.
    MetaTest(MetaTestArgs),
    /// Run methods end to end over a pair of systems.
    Experiment(ExperimentArgs),
    /// Evaluate one baseline end to end.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed. Required unless the configuration file sets one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    /// Built-in profile (trainticket, onlineboutique) or a JSON generator config.
    #[arg(long)]
    profile: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_per_fault: Option<usize>,
    /// Fault categories to create for a built-in profile.
    #[arg(long, default_value_t = 20)]
    n_categories: usize,
    /// Effect strength; also the number of fault log lines per trace.
    #[arg(long, default_value_t = 10.0)]
    magnitude: f64,
    /// Comma-separated effects for a built-in profile.
    #[arg(long, value_delimiter = ',')]
    effects: Vec<String>,
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Autoencoder checkpoint.
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encode spans only, without log fusion.
    #[arg(long)]
    span_only: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EpisodeFlags {
    #[arg(long)]
    n_way: Option<usize>,
    /// Query examples per class.
    #[arg(long)]
    m_query: Option<usize>,
    /// Novel categories held out for meta-testing.
    #[arg(long)]
    n_novel: Option<usize>,
}

#[derive(Args)]
struct MetaTrainArgs {
    /// Support examples per class.
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Meta-training tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Learner body, for the alternative-body baselines.
    #[arg(long)]
    body: Option<String>,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MetaTestArgs {
    /// Support examples per class.
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    latents: PathBuf,
    /// Meta-learner checkpoint.
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Experiment label written into the report.
    #[arg(long, default_value = "custom")]
    id: String,
    /// Method label written into the report.
    #[arg(long, default_value = "multihattenae+te-maml")]
    method: String,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SystemPair {
    /// Corpus whose base categories train the models.
    #[arg(long)]
    train_system: PathBuf,
    /// Corpus whose novel categories are tested; defaults to the training corpus.
    #[arg(long)]
    test_system: Option<PathBuf>,
    /// Experiment label, e.g. E1.
    #[arg(long, default_value = "E1")]
    id: String,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Record wall-clock timings in the reports (makes them non-reproducible).
    #[arg(long)]
    timing: bool,
    /// Allow the alternative-body baselines on cross-system pairs.
    #[arg(long)]
    allow_cross_system_bodies: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    pair: SystemPair,
    /// Comma-separated methods: te-maml and any baseline name.
    #[arg(long, value_delimiter = ',', default_value = "te-maml")]
    methods: Vec<String>,
    /// Comma-separated support sizes.
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    k_shot: Vec<usize>,
    /// Output directory for reports and the summary table.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BaselineArgs {
    /// Support examples per class.
    #[arg(long)]
    k_shot: Option<usize>,
    /// One of: onlyspan, linear-ae, glu-ae, protonet, matchingnet,
    /// nearneighbor, decisiontree, linear-maml, rnn-maml, lstm-maml, cnn-maml.
    #[arg(long)]
    name: String,
    #[command(flatten)]
    pair: SystemPair,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("METATRACE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_DATA,
            })
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::TrainAe(a) => train_ae(a),
        Command::Encode(a) => encode(a),
        Command::MetaTrain(a) => meta_train(a),
        Command::MetaTest(a) => meta_test(a),
        Command::Experiment(a) => experiment(a),
        Command::Baseline(a) => baseline(a),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Core(Error::Config(format!("{}: {e}", path.display()))))
}

/// Configuration file merged with the seed flag. A seed must come from one
/// of the two.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let (mut cfg, file_seed) = match &common.config {
        Some(path) => {
            let value: serde_json::Value = read_json(path)?;
            let has_seed = value.get("seed").is_some();
            let cfg: RunConfig = serde_json::from_value(value)
                .map_err(|e| Failure::Core(Error::Config(format!("{}: {e}", path.display()))))?;
            (cfg, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    match common.seed {
        Some(s) => cfg.seed = s,
        None if !file_seed => return Err(Failure::Usage("a seed is required: pass --seed or set it in --config".into())),
        None => {}
    }
    Ok(cfg)
}

fn apply_episode_flags(cfg: &mut RunConfig, f: &EpisodeFlags) {
    let e = &mut cfg.episodes;
    if let Some(v) = f.n_way {
        e.n_way = v;
    }
    if let Some(v) = f.m_query {
        e.m_query = v;
    }
    if let Some(v) = f.n_novel {
        e.n_novel = v;
    }
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| Failure::Core(Error::io(path, e)))
}

fn read_corpus(path: &Path) -> CliResult<TraceCorpus> {
    require_file(path)?;
    let system = sniff_system(path)?;
    Ok(load_corpus(path, &system)?)
}

fn parse_effect(name: &str) -> CliResult<Effect> {
    Effect::ALL.into_iter().find(|e| e.name() == name).ok_or_else(|| {
        let names: Vec<&str> = Effect::ALL.iter().map(|e| e.name()).collect();
        Failure::Usage(format!("unknown effect {name:?}; expected one of {}", names.join(", ")))
    })
}

fn gen(a: GenArgs) -> CliResult<()> {
    let mut cfg = match SystemProfile::builtin(&a.profile) {
        Some(profile) => {
            let effects = if a.effects.is_empty() {
                Effect::ALL.to_vec()
            } else {
                a.effects.iter().map(|e| parse_effect(e)).collect::<CliResult<Vec<_>>>()?
            };
            let seed = a
                .seed
                .ok_or_else(|| Failure::Usage("a seed is required for a built-in profile: pass --seed".into()))?;
            GenConfig {
                injectors: synthgen::injector_catalog(&profile, &effects, a.n_categories, a.magnitude),
                profile,
                n_normal: 200,
                n_per_fault: 25,
                seed,
            }
        }
        None => read_json(Path::new(&a.profile))?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_normal {
        cfg.n_normal = n;
    }
    if let Some(n) = a.n_per_fault {
        cfg.n_per_fault = n;
    }
    let corpus = synthgen::generate_from(&cfg)?;
    create_parent(&a.out)?;
    corpus.save(&a.out)?;
    info!("wrote {} traces in {} categories to {}", corpus.len(), corpus.categories.len(), a.out.display());
    Ok(())
}

fn train_ae(a: TrainAeArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.ae.epochs = e;
    }
    cfg.validate()?;
    let corpus = read_corpus(&a.corpus)?;
    let embedder = cfg.embedder.build()?;
    let out = pipeline::train_autoencoder(&corpus, &cfg.resolved().ae, embedder.as_ref())?;
    create_parent(&a.out)?;
    checkpoint::save_ae(&a.out, &out.params)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write(&csv, out.curve.to_csv())?;
    info!(
        "autoencoder loss {:.6} -> {:.6}; wrote {}",
        out.curve.initial_train(),
        out.curve.final_train(),
        a.out.display()
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let corpus = read_corpus(&a.corpus)?;
    require_file(&a.ae)?;
    let params = checkpoint::load_ae(&a.ae)?;
    let embedder = cfg.embedder.build()?;
    let latents = pipeline::encode_corpus(&corpus, &params, embedder.as_ref(), a.span_only)?;
    create_parent(&a.out)?;
    latents.save(&a.out)?;
    Ok(())
}

fn read_latents(path: &Path) -> CliResult<LatentCorpus> {
    require_file(path)?;
    let latents = LatentCorpus::load(path)?;
    if latents.records.is_empty() {
        return Err(Failure::Core(Error::Config(format!("{}: no latent records", path.display()))));
    }
    Ok(latents)
}

fn meta_train(a: MetaTrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    apply_episode_flags(&mut cfg, &a.episodes);
    if let Some(k) = a.k_shot {
        cfg.episodes.k_shot = k;
    }
    if let Some(t) = a.tasks {
        cfg.episodes.n_meta_tasks = t;
    }
    if let Some(body) = &a.body {
        cfg.learner.body = serde_json::from_value(serde_json::Value::String(body.clone()))
            .map_err(|_| Failure::Usage(format!("unknown body {body:?}")))?;
    }
    cfg.validate()?;
    let latents = read_latents(&a.latents)?;
    let out = pipeline::meta_train_latents(&latents, &cfg)?;
    create_parent(&a.out)?;
    checkpoint::save_meta(&a.out, &out.params)?;
    info!("meta-trained on {} episodes; wrote {}", out.episodes.len(), a.out.display());
    Ok(())
}

fn meta_test(a: MetaTestArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    apply_episode_flags(&mut cfg, &a.episodes);
    if let Some(k) = a.k_shot {
        cfg.episodes.k_shot = k;
    }
    if let Some(n) = a.n_tasks {
        cfg.episodes.n_tasks = n;
    }
    if let Some(r) = a.runs {
        cfg.episodes.runs = r;
    }
    cfg.validate()?;
    let latents = read_latents(&a.latents)?;
    require_file(&a.meta)?;
    let theta = checkpoint::load_meta(&a.meta)?;
    if theta.config.n_classes != cfg.episodes.n_way {
        return Err(Failure::Core(Error::Config(format!(
            "checkpoint classifies {} classes but n_way is {}",
            theta.config.n_classes, cfg.episodes.n_way
        ))));
    }
    let report = pipeline::meta_test_latents(&theta, &latents, &cfg, &a.id, &a.method)?;
    write(&a.out, report.to_json()?)?;
    println!("{}", report.cell());
    Ok(())
}

fn pair_config(common: &Common, pair: &SystemPair, flags: &EpisodeFlags) -> CliResult<RunConfig> {
    let mut cfg = load_config(common)?;
    apply_episode_flags(&mut cfg, flags);
    if let Some(n) = pair.n_tasks {
        cfg.episodes.n_tasks = n;
    }
    if let Some(r) = pair.runs {
        cfg.episodes.runs = r;
    }
    cfg.timing |= pair.timing;
    Ok(cfg)
}

fn load_pair(pair: &SystemPair) -> CliResult<(TraceCorpus, Option<TraceCorpus>)> {
    let train = read_corpus(&pair.train_system)?;
    let test = match &pair.test_system {
        Some(p) if p != &pair.train_system => Some(read_corpus(p)?),
        _ => None,
    };
    Ok((train, test))
}

fn report_name(report: &EvalReport) -> String {
    format!("{}-{}-{}shot.json", report.experiment, report.method, report.setup.k_shot).replace('+', "_")
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let cfg = pair_config(&a.common, &a.pair, &a.episodes)?;
    let methods = a.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>()?;
    if a.k_shot.is_empty() {
        return Err(Failure::Usage("--k-shot needs at least one value".into()));
    }
    let (train, test) = load_pair(&a.pair)?;
    let mut exp = Experiment::new(a.pair.id.clone(), &train, test.as_ref().unwrap_or(&train), cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut reports = Vec::new();
    for &method in &methods {
        for &k in &a.k_shot {
            info!("running {} at {k}-shot", method.name());
            let report = exp.run(method, k, a.pair.allow_cross_system_bodies)?;
            write(&a.out.join(report_name(&report)), report.to_json()?)?;
            reports.push(report);
        }
    }
    let table = render_table(&reports);
    write(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn baseline(a: BaselineArgs) -> CliResult<()> {
    let b: Baseline = a.name.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let k = a.k_shot.unwrap_or(5);
    let cfg = pair_config(&a.common, &a.pair, &a.episodes)?;
    let (train, test) = load_pair(&a.pair)?;
    let mut exp = Experiment::new(a.pair.id.clone(), &train, test.as_ref().unwrap_or(&train), cfg)?;
    let report = exp.run(Method::Baseline(b), k, a.pair.allow_cross_system_bodies)?;
    write(&a.out, report.to_json()?)?;
    println!("{}", report.cell());
    Ok(())
}
