//! Seeded synthetic trace corpora with injectable fault categories.
//!
//! A profile fixes a service topology (derived from the profile name), a
//! per-operation latency table, and a log template vocabulary. Normal
//! traces are random call trees over that topology; each fault injector
//! perturbs the spans and/or logs touching its target service.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trace_model::{LogRecord, SpanRecord, Trace, TraceCorpus};

const SERVICE_WORDS: &[&str] = &[
    "gateway", "auth", "user", "order", "payment", "cart", "catalog", "shipping", "station", "route",
    "ticket", "seat", "price", "notify", "inventory", "config", "contacts", "food", "travel", "assurance",
    "voucher", "admin", "security", "currency", "email", "recommend", "ad", "checkout", "consign", "rebook",
    "cancel", "execute", "preserve", "basic", "train", "news", "delivery", "verify", "avatar", "search",
];

const OPERATION_WORDS: &[&str] = &[
    "get", "list", "create", "update", "delete", "query", "check", "submit", "find", "validate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemProfile {
    pub name: String,
    /// Prefix of every generated service name, e.g. `ts` gives `ts-order-service`.
    pub service_prefix: String,
    pub n_services: usize,
    pub operations_per_service: usize,
    pub mean_spans_per_trace: usize,
    pub mean_logs_per_trace: usize,
    /// Log message templates; `{op}`, `{n}` and `{id}` are filled per log.
    pub vocab: Vec<String>,
    pub max_spans: usize,
}

impl SystemProfile {
    pub fn trainticket_like() -> Self {
        Self {
            name: "trainticket".into(),
            service_prefix: "ts".into(),
            n_services: 24,
            operations_per_service: 3,
            mean_spans_per_trace: 12,
            mean_logs_per_trace: 8,
            vocab: [
                "request {op} handled in {n} ms",
                "query {op} returned {n} rows",
                "cache lookup for key {id} hit",
                "session {id} validated",
                "forwarding {op} to downstream",
                "response serialized with {n} bytes",
            ]
            .map(String::from)
            .to_vec(),
            max_spans: 64,
        }
    }

    pub fn onlineboutique_like() -> Self {
        Self {
            name: "onlineboutique".into(),
            service_prefix: "ob".into(),
            n_services: 16,
            operations_per_service: 2,
            mean_spans_per_trace: 8,
            mean_logs_per_trace: 6,
            vocab: [
                "rpc {op} completed status ok",
                "received request {id}",
                "conversion took {n} us",
                "loaded {n} products from catalog",
                "emitting metrics batch {id}",
            ]
            .map(String::from)
            .to_vec(),
            max_spans: 64,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "trainticket" => Some(Self::trainticket_like()),
            "onlineboutique" => Some(Self::onlineboutique_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_services,
            self.operations_per_service,
            self.mean_spans_per_trace,
            self.mean_logs_per_trace,
            self.vocab.len(),
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("profile {}: all counts must be at least 1", self.name)));
        }
        if self.mean_spans_per_trace > self.max_spans {
            return Err(Error::Config(format!(
                "profile {}: mean_spans_per_trace {} exceeds max_spans {}",
                self.name, self.mean_spans_per_trace, self.max_spans
            )));
        }
        Ok(())
    }

    pub fn service_name(&self, index: usize) -> String {
        let word = SERVICE_WORDS[index % SERVICE_WORDS.len()];
        match index / SERVICE_WORDS.len() {
            0 => format!("{}-{word}-service", self.service_prefix),
            k => format!("{}-{word}{k}-service", self.service_prefix),
        }
    }

    pub fn operation_url(&self, service: usize, op: usize) -> String {
        let word = SERVICE_WORDS[service % SERVICE_WORDS.len()];
        let verb = OPERATION_WORDS[(service + op) % OPERATION_WORDS.len()];
        format!("/api/v1/{word}/{verb}")
    }

    /// Inclusive bounds on spans per generated normal trace.
    pub fn span_bounds(&self) -> (usize, usize) {
        let lo = (self.mean_spans_per_trace / 2).max(1);
        let hi = (self.mean_spans_per_trace * 3 / 2).max(lo).min(self.max_spans);
        (lo.min(hi), hi)
    }

    pub fn log_bounds(&self) -> (usize, usize) {
        (self.mean_logs_per_trace / 2, self.mean_logs_per_trace * 3 / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Slows the subtree under each target span; ancestors stretch to cover it.
    LatencyShift,
    /// Inflates durations of target spans and emits WARN logs.
    CpuContention,
    /// Emits ERROR logs and drops the subtree below target spans.
    ServiceException,
    /// Rewrites the URL of target spans and emits ERROR logs.
    MessageReturn,
    /// Renames the component of the target service's logs and emits WARN logs.
    ConfigFault,
}

impl Effect {
    pub const ALL: [Effect; 5] = [
        Effect::LatencyShift,
        Effect::CpuContention,
        Effect::ServiceException,
        Effect::MessageReturn,
        Effect::ConfigFault,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Effect::LatencyShift => "latency_shift",
            Effect::CpuContention => "cpu_contention",
            Effect::ServiceException => "service_exception",
            Effect::MessageReturn => "message_return",
            Effect::ConfigFault => "config_fault",
        }
    }

    /// Whether the effect changes spans (as opposed to logs only).
    pub fn touches_spans(self) -> bool {
        self != Effect::ConfigFault
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjector {
    pub category_id: String,
    pub effect: Effect,
    pub magnitude: f64,
    pub target_service: usize,
}

impl FaultInjector {
    pub fn new(profile: &SystemProfile, effect: Effect, target_service: usize, magnitude: f64) -> Self {
        let service = profile.service_name(target_service);
        Self {
            category_id: format!("{}:{}", effect.name(), service),
            effect,
            magnitude,
            target_service,
        }
    }

    fn validate(&self, profile: &SystemProfile) -> Result<()> {
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Config(format!("injector {}: magnitude must be positive", self.category_id)));
        }
        if self.target_service >= profile.n_services {
            return Err(Error::Config(format!(
                "injector {}: target service {} out of range for {} services",
                self.category_id, self.target_service, profile.n_services
            )));
        }
        Ok(())
    }
}

/// One injector per `(effect, service)` pair, walking services `1..` (the
/// gateway is skipped) and cycling through `effects`, until `n` categories
/// exist. Every category therefore has a distinct target service whenever
/// `n < n_services`.
pub fn injector_catalog(profile: &SystemProfile, effects: &[Effect], n: usize, magnitude: f64) -> Vec<FaultInjector> {
    let services = profile.n_services.saturating_sub(1).max(1);
    (0..n)
        .map(|i| {
            let effect = effects[i % effects.len()];
            let service = if profile.n_services == 1 { 0 } else { 1 + i % services };
            let mut inj = FaultInjector::new(profile, effect, service, magnitude);
            if i >= services {
                inj.category_id = format!("{}#{}", inj.category_id, i / services);
            }
            inj
        })
        .collect()
}

/// Full generator input, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub profile: SystemProfile,
    pub injectors: Vec<FaultInjector>,
    pub n_normal: usize,
    pub n_per_fault: usize,
    pub seed: u64,
}

struct Topology {
    /// Callees of each service.
    downstream: Vec<Vec<usize>>,
    /// Base duration in microseconds per (service, operation).
    base_us: Vec<Vec<i64>>,
}

impl Topology {
    fn of(profile: &SystemProfile) -> Self {
        let mut r = rng::stream(rng::fnv1a_str(&profile.name), "topology", 0);
        let n = profile.n_services;
        let downstream = (0..n)
            .map(|s| {
                let later: Vec<usize> = (s + 1..n).collect();
                let fanout = if s == 0 { later.len().min(6) } else { r.gen_range(0..=later.len().min(3)) };
                let mut picks: Vec<usize> = later.choose_multiple(&mut r, fanout).copied().collect();
                picks.sort_unstable();
                picks
            })
            .collect();
        let base_us = (0..n)
            .map(|_| (0..profile.operations_per_service).map(|_| r.gen_range(500..20_000)).collect())
            .collect();
        Self { downstream, base_us }
    }
}

struct Node {
    parent: Option<usize>,
    service: usize,
    op: usize,
    prefix: String,
    level: usize,
    children: usize,
}

fn hex_prefix(r: &mut Rng) -> String {
    format!("{:08x}", r.gen::<u32>())
}

/// Random call tree with `n` spans (fewer if the topology runs dry).
fn call_tree(profile: &SystemProfile, topo: &Topology, n: usize, r: &mut Rng) -> Vec<Node> {
    let mut nodes = vec![Node {
        parent: None,
        service: 0,
        op: r.gen_range(0..profile.operations_per_service),
        prefix: hex_prefix(r),
        level: 0,
        children: 0,
    }];
    let mut attempts = 0;
    while nodes.len() < n && attempts < 50 * n {
        attempts += 1;
        let p = r.gen_range(0..nodes.len());
        let callees = &topo.downstream[nodes[p].service];
        let service = match callees.choose(r) {
            Some(&s) => s,
            None => continue,
        };
        let node = child_of(&mut nodes, p, service, profile, r);
        nodes.push(node);
    }
    nodes
}

/// Children of `x.0` are `x.1`, `x.2`, ...; children of `x.k` (k > 0) open
/// a fresh prefix at `y.0`.
fn child_of(nodes: &mut [Node], p: usize, service: usize, profile: &SystemProfile, r: &mut Rng) -> Node {
    let op = r.gen_range(0..profile.operations_per_service);
    nodes[p].children += 1;
    let (prefix, level) = if nodes[p].level == 0 {
        (nodes[p].prefix.clone(), nodes[p].children)
    } else {
        (hex_prefix(r), 0)
    };
    Node {
        parent: Some(p),
        service,
        op,
        prefix,
        level,
        children: 0,
    }
}

fn fill_template(template: &str, op: &str, r: &mut Rng) -> String {
    template
        .replace("{op}", op)
        .replace("{n}", &r.gen_range(1..5000).to_string())
        .replace("{id}", &format!("{:x}", r.gen::<u64>()))
}

struct Draft {
    nodes: Vec<Node>,
    spans: Vec<SpanRecord>,
    logs: Vec<LogRecord>,
}

fn normal_draft(profile: &SystemProfile, topo: &Topology, r: &mut Rng) -> Draft {
    let (lo, hi) = profile.span_bounds();
    let n = r.gen_range(lo..=hi);
    let nodes = call_tree(profile, topo, n, r);
    let t0: i64 = r.gen_range(0..1_000_000_000);
    let mut spans: Vec<SpanRecord> = Vec::with_capacity(nodes.len());
    for node in &nodes {
        let jitter = r.gen_range(0.8..1.2);
        let own = (topo.base_us[node.service][node.op] as f64 * jitter) as i64;
        let (start, dur) = match node.parent {
            None => (t0, own.max(1) * 4),
            Some(p) => {
                let ps: &SpanRecord = &spans[p];
                let window = ps.duration().max(1);
                let dur = own.min(window * 4 / 5).max(1);
                (ps.start_time + r.gen_range(0..=(window - dur).max(0)), dur)
            }
        };
        spans.push(SpanRecord {
            span_id: format!("{}.{}", node.prefix, node.level),
            parent_id: node.parent.map(|p| format!("{}.{}", nodes[p].prefix, nodes[p].level)),
            start_time: start,
            end_time: start + dur,
            service_name: profile.service_name(node.service),
            url: profile.operation_url(node.service, node.op),
        });
    }
    let (llo, lhi) = profile.log_bounds();
    let n_logs = r.gen_range(llo..=lhi);
    let logs = (0..n_logs)
        .map(|_| {
            let i = r.gen_range(0..spans.len());
            let s = &spans[i];
            let op = s.url.rsplit('/').next().unwrap_or("").to_string();
            let template = profile.vocab.choose(r).expect("validated non-empty vocab");
            LogRecord {
                timestamp: r.gen_range(s.start_time..=s.end_time),
                severity: if r.gen_bool(0.85) { "INFO" } else { "DEBUG" }.into(),
                component: s.service_name.clone(),
                message: fill_template(template, &op, r),
                span_id: Some(s.span_id.clone()),
            }
        })
        .collect();
    Draft { nodes, spans, logs }
}

fn descendants(nodes: &[Node], root: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    // parents always precede children
    for i in root + 1..nodes.len() {
        if let Some(p) = nodes[i].parent {
            if p == root || out.contains(&p) {
                out.insert(i);
            }
        }
    }
    out
}

fn ensure_target(draft: &mut Draft, profile: &SystemProfile, service: usize, r: &mut Rng) {
    if draft.nodes.iter().any(|n| n.service == service) {
        return;
    }
    let p = r.gen_range(0..draft.nodes.len());
    let node = child_of(&mut draft.nodes, p, service, profile, r);
    let ps = &draft.spans[p];
    let dur = (ps.duration() / 2).max(1);
    let start = ps.start_time + r.gen_range(0..=(ps.duration() - dur).max(0));
    draft.spans.push(SpanRecord {
        span_id: format!("{}.{}", node.prefix, node.level),
        parent_id: Some(ps.span_id.clone()),
        start_time: start,
        end_time: start + dur,
        service_name: profile.service_name(service),
        url: profile.operation_url(service, node.op),
    });
    draft.nodes.push(node);
}

fn emit(draft: &mut Draft, at: usize, severity: &str, component: String, message: String, r: &mut Rng) {
    let s = &draft.spans[at];
    draft.logs.push(LogRecord {
        timestamp: r.gen_range(s.start_time..=s.end_time),
        severity: severity.into(),
        component,
        message,
        span_id: Some(s.span_id.clone()),
    });
}

fn stretch(draft: &mut Draft, i: usize, factor: f64) {
    let s = &mut draft.spans[i];
    s.end_time = s.start_time + ((s.duration().max(1) as f64) * factor).round() as i64;
    let mut child = i;
    while let Some(p) = draft.nodes[child].parent {
        let end = draft.spans[child].end_time;
        if draft.spans[p].end_time < end {
            draft.spans[p].end_time = end;
        }
        child = p;
    }
}

/// Time-dilate the subtree rooted at `i` around its start.
fn dilate(draft: &mut Draft, i: usize, factor: f64) {
    let origin = draft.spans[i].start_time;
    let at = |t: i64| origin + ((t - origin) as f64 * factor).round() as i64;
    let mut members = descendants(&draft.nodes, i);
    members.insert(i);
    for &m in &members {
        let s = &mut draft.spans[m];
        s.start_time = at(s.start_time);
        s.end_time = at(s.end_time).max(s.start_time + 1);
    }
    stretch(draft, i, 1.0);
}

fn inject(draft: &mut Draft, inj: &FaultInjector, profile: &SystemProfile, r: &mut Rng) {
    let service = profile.service_name(inj.target_service);
    let count = (inj.magnitude.round() as usize).max(1);
    if inj.effect.touches_spans() {
        ensure_target(draft, profile, inj.target_service, r);
    }
    let targets: Vec<usize> = (0..draft.nodes.len())
        .filter(|&i| draft.nodes[i].service == inj.target_service)
        .collect();
    let first = targets.first().copied().unwrap_or_else(|| r.gen_range(0..draft.spans.len()));
    match inj.effect {
        Effect::LatencyShift => {
            for &t in &targets {
                dilate(draft, t, inj.magnitude);
            }
        }
        Effect::CpuContention => {
            for &t in &targets {
                stretch(draft, t, 1.0 + inj.magnitude / 2.0);
            }
            for _ in 0..count {
                let msg = format!("cpu usage high on {service} request throttled for {} ms", r.gen_range(10..900));
                emit(draft, first, "WARN", service.clone(), msg, r);
            }
        }
        Effect::ServiceException => {
            let doomed = descendants(&draft.nodes, first);
            for _ in 0..count {
                let msg = format!("unhandled exception in {service} while processing request status 500");
                emit(draft, first, "ERROR", service.clone(), msg, r);
            }
            if !doomed.is_empty() {
                let dropped: BTreeSet<String> = doomed.iter().map(|&i| draft.spans[i].span_id.clone()).collect();
                let keep: Vec<bool> = (0..draft.nodes.len()).map(|i| !doomed.contains(&i)).collect();
                let mut k = keep.iter();
                draft.spans.retain(|_| *k.next().unwrap());
                // node parents are only consulted before truncation
                let mut k = keep.iter();
                draft.nodes.retain(|_| *k.next().unwrap());
                let root_id = draft.spans[0].span_id.clone();
                for log in &mut draft.logs {
                    if log.span_id.as_ref().is_some_and(|s| dropped.contains(s)) {
                        log.span_id = Some(root_id.clone());
                    }
                }
            }
        }
        Effect::MessageReturn => {
            for &t in &targets {
                draft.spans[t].url = format!("{}/fallback/error", draft.spans[t].url);
            }
            for _ in 0..count {
                let msg = format!("unexpected response returned from {service} message rejected");
                emit(draft, first, "ERROR", service.clone(), msg, r);
            }
        }
        Effect::ConfigFault => {
            let renamed = format!("{service}-misconfigured");
            for log in &mut draft.logs {
                if log.component == service {
                    log.component = renamed.clone();
                }
            }
            for _ in 0..count {
                let msg = format!("configuration key {} missing in {service} falling back to default", r.gen::<u16>());
                emit(draft, first, "WARN", renamed.clone(), msg, r);
            }
        }
    }
}

fn finish(draft: Draft, trace_id: String, label: Option<String>) -> Trace {
    let mut t = Trace {
        trace_id,
        spans: draft.spans,
        logs: draft.logs,
        label,
    };
    t.normalize_order();
    t
}

/// Generate `n_normal` unlabeled traces followed by `n_per_fault` traces per
/// injector. Output depends only on the arguments.
pub fn generate(
    profile: &SystemProfile,
    injectors: &[FaultInjector],
    n_normal: usize,
    n_per_fault: usize,
    seed: u64,
) -> Result<TraceCorpus> {
    profile.validate()?;
    let mut ids = BTreeSet::new();
    for inj in injectors {
        inj.validate(profile)?;
        if !ids.insert(&inj.category_id) {
            return Err(Error::Config(format!("duplicate category id {}", inj.category_id)));
        }
    }
    let topo = Topology::of(profile);
    let mut corpus = TraceCorpus::new(profile.name.clone());
    for i in 0..n_normal {
        let mut r = rng::stream(seed, "synth.normal", i as u64);
        let draft = normal_draft(profile, &topo, &mut r);
        corpus.push(finish(draft, format!("{}-n{i:05}", profile.name), None));
    }
    for inj in injectors {
        for j in 0..n_per_fault {
            let mut r = rng::stream(seed, &format!("synth.fault.{}", inj.category_id), j as u64);
            let mut draft = normal_draft(profile, &topo, &mut r);
            inject(&mut draft, inj, profile, &mut r);
            corpus.push(finish(draft, format!("{}-{}-{j:04}", profile.name, inj.category_id), Some(inj.category_id.clone())));
        }
    }
    Ok(corpus)
}

pub fn generate_from(cfg: &GenConfig) -> Result<TraceCorpus> {
    generate(&cfg.profile, &cfg.injectors, cfg.n_normal, cfg.n_per_fault, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::parse_corpus;

    fn mean_duration<'a>(traces: impl Iterator<Item = &'a Trace>) -> f64 {
        let d: Vec<i64> = traces.flat_map(|t| t.spans.iter().map(|s| s.duration())).collect();
        d.iter().sum::<i64>() as f64 / d.len() as f64
    }

    #[test]
    fn single_normal_trace() {
        let c = generate(&SystemProfile::trainticket_like(), &[], 1, 5, 7).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.categories.is_empty());
        assert!(c.traces[0].label.is_none());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let p = SystemProfile::onlineboutique_like();
        let inj = injector_catalog(&p, &Effect::ALL, 5, 3.0);
        let a = generate(&p, &inj, 10, 4, 3).unwrap().to_jsonl_string();
        let b = generate(&p, &inj, 10, 4, 3).unwrap().to_jsonl_string();
        let c = generate(&p, &inj, 10, 4, 4).unwrap().to_jsonl_string();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn every_trace_validates_and_round_trips() {
        let p = SystemProfile::trainticket_like();
        let inj = injector_catalog(&p, &Effect::ALL, 10, 3.0);
        let c = generate(&p, &inj, 20, 6, 11).unwrap();
        assert_eq!(c.categories.len(), 10);
        for t in &c.traces {
            t.validate().unwrap();
            assert!(t.spans.len() <= p.max_spans);
            assert!(t.spans.iter().all(|s| s.span_id.split_once('.').is_some()));
        }
        for id in c.categories.keys() {
            assert_eq!(c.traces_of(id).count(), 6);
        }
        let back = parse_corpus(c.to_jsonl_string().as_bytes(), &c.system).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn latency_shift_inflates_durations() {
        let p = SystemProfile::trainticket_like();
        let inj = FaultInjector::new(&p, Effect::LatencyShift, 0, 3.0);
        let c = generate(&p, &[inj], 50, 50, 5).unwrap();
        let normal = mean_duration(c.normal_traces());
        let faulty = mean_duration(c.traces.iter().filter(|t| t.label.is_some()));
        assert!(faulty >= 2.0 * normal, "{faulty} vs {normal}");
    }

    #[test]
    fn effects_leave_their_marks() {
        let p = SystemProfile::onlineboutique_like();
        let target = p.service_name(3);
        for effect in Effect::ALL {
            let inj = FaultInjector::new(&p, effect, 3, 2.0);
            let c = generate(&p, &[inj], 0, 5, 1).unwrap();
            for t in &c.traces {
                let errors = t.logs.iter().filter(|l| l.severity == "ERROR").count();
                let warns = t.logs.iter().filter(|l| l.severity == "WARN").count();
                match effect {
                    Effect::LatencyShift => assert_eq!(errors + warns, 0),
                    Effect::CpuContention | Effect::ConfigFault => assert_eq!(warns, 2),
                    Effect::ServiceException | Effect::MessageReturn => assert_eq!(errors, 2),
                }
                if effect.touches_spans() {
                    assert!(t.spans.iter().any(|s| s.service_name == target));
                }
                if effect == Effect::MessageReturn {
                    assert!(t.spans.iter().any(|s| s.url.ends_with("/fallback/error")));
                }
                if effect == Effect::ConfigFault {
                    assert!(t.logs.iter().all(|l| l.component != target));
                }
            }
        }
    }

    #[test]
    fn bad_injectors_are_rejected() {
        let p = SystemProfile::onlineboutique_like();
        let mut inj = FaultInjector::new(&p, Effect::ConfigFault, 1, 1.0);
        inj.magnitude = 0.0;
        assert!(generate(&p, &[inj.clone()], 1, 1, 0).is_err());
        inj.magnitude = 1.0;
        inj.target_service = 99;
        assert!(generate(&p, &[inj], 1, 1, 0).is_err());
    }
}
