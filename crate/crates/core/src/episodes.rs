//! Base/novel category splits and N-way K-shot episode sampling over
//! latent traces.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use itertools::Itertools;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::fusion_ae::LatentTrace;
use crate::rng;
use crate::te_maml::{Batch, EpisodeTask};
use crate::trace_model::{FaultCategory, Split, TraceCorpus};

/// Query examples per class when not configured.
pub const DEFAULT_QUERY_SHOTS: usize = 15;

/// One line of a latent-trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub trace_id: String,
    pub label: Option<String>,
    pub system: String,
    /// Span count of the source trace, used to stratify category splits.
    pub n_spans: usize,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentCorpus {
    pub system: String,
    pub records: Vec<LatentRecord>,
}

impl LatentCorpus {
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.z.len())
    }

    /// Record indices per category, in file order.
    pub fn by_category(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(l) = &r.label {
                out.entry(l.clone()).or_default().push(i);
            }
        }
        out
    }

    pub fn span_lengths(&self) -> BTreeMap<String, Vec<usize>> {
        self.by_category()
            .into_iter()
            .map(|(k, idx)| (k, idx.iter().map(|&i| self.records[i].n_spans).collect()))
            .collect()
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<latent writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut out = LatentCorpus::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LatentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if out.records.is_empty() {
                out.system = rec.system.clone();
            } else if rec.z.len() != out.dim() {
                return Err(Error::shape(format!("latent on line {}", idx + 1), out.dim(), rec.z.len()));
            }
            out.records.push(rec);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// Labeled latent traces of one episode side; labels index the episode's
/// category list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub items: Vec<(LatentTrace, usize)>,
    pub way: usize,
    pub shots: usize,
}

pub type SupportSet = LabeledSet;
pub type QuerySet = LabeledSet;

impl LabeledSet {
    pub fn matrix(&self) -> Matrix {
        let d = self.items.first().map_or(0, |(z, _)| z.z.len());
        Matrix::from_shape_fn((self.items.len(), d), |(r, c)| self.items[r].0.z[c])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, y)| *y).collect()
    }

    pub fn trace_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(z, _)| z.trace_id.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: String,
    pub categories: Vec<FaultCategory>,
    pub support: SupportSet,
    pub query: QuerySet,
    pub system: String,
}

impl Episode {
    pub fn to_task(&self) -> EpisodeTask {
        let s = self.support.matrix();
        EpisodeTask {
            task_id: self.task_id.clone(),
            support: Batch::support(s.clone(), self.support.labels()),
            query: Batch::query(&s, &self.query.matrix(), self.query.labels()),
        }
    }

    pub fn manifest(&self) -> EpisodeManifest {
        EpisodeManifest {
            task_id: self.task_id.clone(),
            system: self.system.clone(),
            categories: self.categories.iter().map(|c| c.id.clone()).collect(),
            support: self.support.trace_ids().map(str::to_owned).collect(),
            query: self.query.trace_ids().map(str::to_owned).collect(),
        }
    }
}

/// Audit record of one episode's composition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub task_id: String,
    pub system: String,
    pub categories: Vec<String>,
    pub support: Vec<String>,
    pub query: Vec<String>,
}

pub fn write_manifests(episodes: &[Episode], w: &mut impl Write) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut *w, &e.manifest())?;
        w.write_all(b"\n").map_err(|e| Error::io("<manifest writer>", e))?;
    }
    Ok(())
}

fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

/// Seeded base/novel partition of the categories in `lengths` (category
/// id → span counts of its traces), stratified by trace length so that
/// short and long categories land in both splits when possible.
pub fn split_by_lengths(
    system: &str,
    lengths: &BTreeMap<String, Vec<usize>>,
    n_novel: usize,
    min_base: usize,
    seed: u64,
) -> Result<(Vec<FaultCategory>, Vec<FaultCategory>)> {
    let total = lengths.len();
    if total < n_novel + min_base {
        return Err(Error::Sampling(format!(
            "{total} labeled categories cannot provide {n_novel} novel and {min_base} base categories"
        )));
    }
    let mut all: Vec<usize> = lengths.values().flatten().copied().collect();
    let corpus_median = median(&mut all);
    let (mut long, mut short): (Vec<&String>, Vec<&String>) = (Vec::new(), Vec::new());
    for (id, v) in lengths {
        if median(&mut v.clone()) > corpus_median {
            long.push(id);
        } else {
            short.push(id);
        }
    }
    let mut r = rng::stream(seed, "split", 0);
    long.shuffle(&mut r);
    short.shuffle(&mut r);

    let (nl, ns) = (long.len(), short.len());
    let feasible_lo = n_novel.saturating_sub(ns);
    let feasible_hi = nl.min(n_novel);
    let proportional = ((n_novel * nl) as f64 / total as f64).round() as usize;
    // prefer at least one of each stratum on both sides
    let strat_lo = feasible_lo.max(1).max(n_novel.saturating_sub(ns.saturating_sub(1)));
    let strat_hi = feasible_hi.min(n_novel.saturating_sub(1)).min(nl.saturating_sub(1));
    let novel_long = if nl > 0 && ns > 0 && strat_lo <= strat_hi {
        proportional.clamp(strat_lo, strat_hi)
    } else {
        proportional.clamp(feasible_lo, feasible_hi)
    };
    let novel_short = n_novel - novel_long;

    let category = |id: &String, split| FaultCategory {
        id: id.clone(),
        system: system.to_owned(),
        split: Some(split),
    };
    let mut novel: Vec<FaultCategory> = long[..novel_long]
        .iter()
        .chain(&short[..novel_short])
        .map(|id| category(id, Split::Novel))
        .collect();
    let mut base: Vec<FaultCategory> = long[novel_long..]
        .iter()
        .chain(&short[novel_short..])
        .map(|id| category(id, Split::Base))
        .collect();
    novel.sort();
    base.sort();
    Ok((base, novel))
}

pub fn split_categories(
    corpus: &TraceCorpus,
    n_novel: usize,
    min_base: usize,
    seed: u64,
) -> Result<(Vec<FaultCategory>, Vec<FaultCategory>)> {
    let lengths: BTreeMap<String, Vec<usize>> = corpus
        .categories
        .keys()
        .map(|id| (id.clone(), corpus.traces_of(id).map(|t| t.spans.len()).collect()))
        .collect();
    split_by_lengths(&corpus.system, &lengths, n_novel, min_base, seed)
}

/// Build an episode over exactly `categories` (class index = position).
pub fn episode_for(
    pool: &LatentCorpus,
    categories: &[FaultCategory],
    shots: usize,
    query_shots: usize,
    seed: u64,
    task_index: u64,
    task_id: String,
) -> Result<Episode> {
    let by_cat = pool.by_category();
    let mut r = rng::stream(seed, "episode.traces", task_index);
    let mut support = Vec::with_capacity(categories.len() * shots);
    let mut query = Vec::with_capacity(categories.len() * query_shots);
    for (class, cat) in categories.iter().enumerate() {
        let members = by_cat.get(&cat.id).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < shots + query_shots {
            return Err(Error::Sampling(format!(
                "category {} has {} traces, needs {} support + {} query",
                cat.id,
                members.len(),
                shots,
                query_shots
            )));
        }
        let picked = index::sample(&mut r, members.len(), shots + query_shots);
        for (j, idx) in picked.iter().enumerate() {
            let rec = &pool.records[members[idx]];
            let item = (
                LatentTrace {
                    trace_id: rec.trace_id.clone(),
                    z: rec.z.clone(),
                },
                class,
            );
            if j < shots {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    let way = categories.len();
    Ok(Episode {
        task_id,
        categories: categories.to_vec(),
        support: LabeledSet {
            items: support,
            way,
            shots,
        },
        query: LabeledSet {
            items: query,
            way,
            shots: query_shots,
        },
        system: pool.system.clone(),
    })
}

/// Draw `n_way` categories from `categories` without replacement, then
/// `shots + query_shots` traces per category. Deterministic per
/// `(seed, task_index)`.
pub fn sample_episode(
    pool: &LatentCorpus,
    categories: &[FaultCategory],
    n_way: usize,
    shots: usize,
    query_shots: usize,
    seed: u64,
    task_index: u64,
) -> Result<Episode> {
    if n_way == 0 || n_way > categories.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {n_way} categories from a pool of {}",
            categories.len()
        )));
    }
    let mut r = rng::stream(seed, "episode.categories", task_index);
    let chosen: Vec<FaultCategory> = index::sample(&mut r, categories.len(), n_way)
        .iter()
        .map(|i| categories[i].clone())
        .collect();
    episode_for(pool, &chosen, shots, query_shots, seed, task_index, format!("train-{task_index}"))
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Every `n_way`-subset of `0..pool_size`, in lexicographic order.
pub fn enumerate_combinations(pool_size: usize, n_way: usize) -> Vec<Vec<usize>> {
    (0..pool_size).combinations(n_way).collect()
}

const ENUMERATION_LIMIT: u128 = 1_000_000;

/// `n_tasks` distinct category combinations drawn uniformly without
/// replacement from all `C(pool_size, n_way)` combinations.
pub fn distinct_combinations(pool_size: usize, n_way: usize, n_tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let available = binomial(pool_size, n_way);
    if n_way == 0 || (n_tasks as u128) > available {
        return Err(Error::Sampling(format!(
            "requested {n_tasks} distinct tasks but only C({pool_size},{n_way})={available} combinations exist"
        )));
    }
    let mut r = rng::stream(seed, "suite", 0);
    if available <= ENUMERATION_LIMIT {
        let all = enumerate_combinations(pool_size, n_way);
        return Ok(index::sample(&mut r, all.len(), n_tasks)
            .iter()
            .map(|i| all[i].clone())
            .collect());
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_tasks);
    while out.len() < n_tasks {
        let mut c: Vec<usize> = index::sample(&mut r, pool_size, n_way).into_vec();
        c.sort_unstable();
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Meta-testing tasks over the novel pool: pairwise-distinct category
/// combinations, each with `shots` support and `query_shots` query traces
/// per category.
pub fn meta_test_suite(
    pool: &LatentCorpus,
    novel: &[FaultCategory],
    n_way: usize,
    n_tasks: usize,
    shots: usize,
    query_shots: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let combos = distinct_combinations(novel.len(), n_way, n_tasks, seed)?;
    combos
        .iter()
        .enumerate()
        .map(|(t, combo)| {
            let cats: Vec<FaultCategory> = combo.iter().map(|&i| novel[i].clone()).collect();
            episode_for(pool, &cats, shots, query_shots, seed, 1_000_000 + t as u64, format!("test-{t}"))
        })
        .collect()
}
