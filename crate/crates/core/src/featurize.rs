//! Span and log feature matrices.
//!
//! A span row is `[norm_start, norm_end, norm_duration, norm_span_id,
//! operation_embedding..]`; a log row is the embedding of its log event
//! text. Numeric columns are min-max normalized across the spans of one
//! trace.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::trace_model::{LogRecord, SpanRecord, Trace, TraceCorpus};

/// Number of numeric columns that precede the operation embedding.
pub const NUMERIC_SPAN_COLS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub max_spans: usize,
    pub max_logs: usize,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            max_spans: 64,
            max_logs: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanFeatureMatrix {
    pub values: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogFeatureMatrix {
    pub values: Matrix,
}

/// Feature matrices of one trace together with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizedTrace {
    pub trace_id: String,
    pub label: Option<String>,
    /// Span count before truncation.
    pub n_spans: usize,
    pub span: SpanFeatureMatrix,
    pub log: LogFeatureMatrix,
}

/// Replace per-trace span-ID prefixes with 1, 2, 3.. in order of first
/// appearance, keeping the hierarchical level digit.
pub fn abstract_span_ids<S: AsRef<str>>(ids: &[S]) -> Result<Vec<String>> {
    let mut prefixes: HashMap<&str, usize> = HashMap::new();
    ids.iter()
        .map(|raw| {
            let raw = raw.as_ref();
            let (prefix, level) = split_span_id(raw)?;
            let next = prefixes.len() + 1;
            let major = *prefixes.entry(prefix).or_insert(next);
            Ok(format!("{major}.{level}"))
        })
        .collect()
}

fn split_span_id(raw: &str) -> Result<(&str, u32)> {
    let err = |message: &str| Error::Featurize {
        span_id: raw.to_owned(),
        message: message.to_owned(),
    };
    let (prefix, level) = raw
        .rsplit_once('.')
        .ok_or_else(|| err("span id has no '.' level separator"))?;
    let level = level
        .parse::<u32>()
        .map_err(|_| err("span id level is not an unsigned integer"))?;
    Ok((prefix, level))
}

/// `"major.minor"` as `major + minor / 100`.
pub fn span_id_scalar(abstracted: &str) -> f64 {
    let (major, minor) = abstracted.split_once('.').unwrap_or((abstracted, "0"));
    major.parse::<f64>().unwrap_or(0.0) + minor.parse::<f64>().unwrap_or(0.0) / 100.0
}

/// Min-max normalize in place; a constant column becomes all zeros.
fn min_max(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

fn numeric_features(spans: &[SpanRecord]) -> Result<Matrix> {
    let ids: Vec<&str> = spans.iter().map(|s| s.span_id.as_str()).collect();
    let abstracted = abstract_span_ids(&ids)?;
    let mut cols: [Vec<f64>; NUMERIC_SPAN_COLS] = [
        spans.iter().map(|s| s.start_time as f64).collect(),
        spans.iter().map(|s| s.end_time as f64).collect(),
        spans.iter().map(|s| s.duration() as f64).collect(),
        abstracted.iter().map(|a| span_id_scalar(a)).collect(),
    ];
    cols.iter_mut().for_each(|c| min_max(c));
    Ok(Matrix::from_shape_fn((spans.len(), NUMERIC_SPAN_COLS), |(r, c)| cols[c][r]))
}

/// Columns `[start, end, duration, span_id]`, normalized across the trace.
pub fn numeric_span_features(trace: &Trace) -> Result<Matrix> {
    numeric_features(&trace.spans)
}

fn uuid_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}").unwrap()
    })
}

fn normalize_token(token: &str) -> String {
    let has_digit = token.chars().any(|c| c.is_ascii_digit());
    if !has_digit {
        return token.to_owned();
    }
    let has_alpha = token.chars().any(|c| c.is_alphabetic());
    if has_alpha && token.len() >= 6 && token.chars().all(|c| c.is_ascii_hexdigit()) {
        return "id".to_owned();
    }
    let lead: String = token.chars().take_while(|c| c.is_alphabetic()).collect();
    if !lead.is_empty() {
        // letters followed by a variable part, e.g. "prod1234"
        return format!("{lead}id");
    }
    token.chars().filter(|c| c.is_alphabetic()).collect()
}

/// Lowercase, substitute variable-looking tokens with `id`, drop
/// non-alphabetic characters, and collapse whitespace.
pub fn preprocess(text: &str) -> String {
    let lower = text.to_lowercase();
    let lower = uuid_re().replace_all(&lower, " id ");
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn service_operation_text(span: &SpanRecord) -> String {
    preprocess(&format!("{} {}", span.service_name, span.url))
}

pub fn log_event_text(log: &LogRecord) -> String {
    preprocess(&format!("{} {} {}", log.severity, log.component, log.message))
}

fn embed_row(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f64>> {
    let v = embedder.embed(text)?;
    if v.len() != embedder.dim() {
        return Err(Error::shape("text embedding", embedder.dim(), v.len()));
    }
    Ok(v)
}

pub fn featurize_trace(
    trace: &Trace,
    embedder: &dyn TextEmbedder,
    cfg: &FeaturizeConfig,
) -> Result<(SpanFeatureMatrix, LogFeatureMatrix)> {
    let spans = &trace.spans[..trace.spans.len().min(cfg.max_spans)];
    let logs = &trace.logs[..trace.logs.len().min(cfg.max_logs)];
    let dim = embedder.dim();

    let numeric = numeric_features(spans)?;
    let mut span_values = Matrix::zeros((spans.len(), NUMERIC_SPAN_COLS + dim));
    for (r, span) in spans.iter().enumerate() {
        let emb = embed_row(embedder, &service_operation_text(span))?;
        let mut row = span_values.row_mut(r);
        for c in 0..NUMERIC_SPAN_COLS {
            row[c] = numeric[[r, c]];
        }
        for (c, v) in emb.into_iter().enumerate() {
            row[NUMERIC_SPAN_COLS + c] = v;
        }
    }

    // zero-log traces get one all-zero row so attention has a key
    let mut log_values = Matrix::zeros((logs.len().max(1), dim));
    for (r, log) in logs.iter().enumerate() {
        let emb = embed_row(embedder, &log_event_text(log))?;
        log_values.row_mut(r).assign(&ndarray::Array1::from(emb));
    }

    Ok((
        SpanFeatureMatrix { values: span_values },
        LogFeatureMatrix { values: log_values },
    ))
}

/// Featurize every trace of a corpus in parallel. Missing sidecar
/// embeddings across all traces are reported together.
pub fn featurize_corpus(
    corpus: &TraceCorpus,
    embedder: &dyn TextEmbedder,
    cfg: &FeaturizeConfig,
) -> Result<Vec<FeaturizedTrace>> {
    let results: Vec<Result<FeaturizedTrace>> = corpus
        .traces
        .par_iter()
        .map(|t| {
            let (span, log) = featurize_trace(t, embedder, cfg)?;
            Ok(FeaturizedTrace {
                trace_id: t.trace_id.clone(),
                label: t.label.clone(),
                n_spans: t.spans.len(),
                span,
                log,
            })
        })
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(f) => out.push(f),
            Err(Error::MissingEmbeddings { missing: m }) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingEmbeddings { missing });
    }
    Ok(out)
}

/// All preprocessed texts a corpus needs embeddings for.
pub fn corpus_texts(corpus: &TraceCorpus) -> Vec<String> {
    let mut texts: Vec<String> = corpus
        .traces
        .iter()
        .flat_map(|t| {
            t.spans
                .iter()
                .map(service_operation_text)
                .chain(t.logs.iter().map(log_event_text))
        })
        .filter(|t| !t.is_empty())
        .collect();
    texts.sort();
    texts.dedup();
    texts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashingEmbedder;

    fn span(id: &str, start: i64, end: i64) -> SpanRecord {
        SpanRecord {
            span_id: id.into(),
            parent_id: None,
            start_time: start,
            end_time: end,
            service_name: "svc".into(),
            url: "/op".into(),
        }
    }

    fn log(severity: &str, component: &str, message: &str) -> LogRecord {
        LogRecord {
            timestamp: 0,
            severity: severity.into(),
            component: component.into(),
            message: message.into(),
            span_id: None,
        }
    }

    fn trace(spans: Vec<SpanRecord>, logs: Vec<LogRecord>) -> Trace {
        Trace {
            trace_id: "t".into(),
            spans,
            logs,
            label: None,
        }
    }

    #[test]
    fn abstraction_examples() {
        let ids = ["a480f2.0", "a480f2.1", "a480f2.2", "a343mc.0", "a987gq.0"];
        assert_eq!(abstract_span_ids(&ids).unwrap(), ["1.0", "1.1", "1.2", "2.0", "3.0"]);
        assert_eq!(abstract_span_ids(&["x.0"]).unwrap(), ["1.0"]);
        assert_eq!(abstract_span_ids(&["b.1", "a.0", "b.0"]).unwrap(), ["1.1", "2.0", "1.0"]);
    }

    #[test]
    fn abstraction_rejects_ids_without_separator() {
        match abstract_span_ids(&["ok.0", "broken"]) {
            Err(Error::Featurize { span_id, .. }) => assert_eq!(span_id, "broken"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn numeric_features_examples() {
        let t = trace(vec![span("x.0", 5, 9)], vec![]);
        assert_eq!(numeric_span_features(&t).unwrap().row(0).to_vec(), vec![0.0; 4]);

        let t = trace(vec![span("a.0", 0, 5), span("a.1", 10, 15), span("a.2", 20, 25)], vec![]);
        let m = numeric_span_features(&t).unwrap();
        assert_eq!(m.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(m.column(2).to_vec(), vec![0.0, 0.0, 0.0]);

        // abstracted 1.0, 1.1, 2.0 -> 1.00, 1.01, 2.00
        let t = trace(vec![span("p.0", 0, 1), span("p.1", 1, 2), span("q.0", 2, 3)], vec![]);
        let ids = numeric_span_features(&t).unwrap().column(3).to_vec();
        assert_eq!(ids[0], 0.0);
        assert!((ids[1] - 0.01).abs() < 1e-12);
        assert_eq!(ids[2], 1.0);
    }

    #[test]
    fn text_preprocessing_examples() {
        let mut s = span("x.0", 0, 1);
        s.service_name = "Basic".into();
        s.url = "/getProd1234".into();
        assert_eq!(service_operation_text(&s), "basic getprodid");
        s.service_name = "".into();
        s.url = "".into();
        assert_eq!(service_operation_text(&s), "");
        s.service_name = "ts-order-service".into();
        s.url = "/order/query".into();
        assert_eq!(service_operation_text(&s), "ts order service order query");

        assert_eq!(log_event_text(&log("ERROR", "pay", "timeout after 30s")), "error pay timeout after s");
        assert_eq!(log_event_text(&log("INFO", "", "")), "info");
        assert_eq!(log_event_text(&log("WARN", "cart", "retry 3")), "warn cart retry");
    }

    #[test]
    fn identifiers_collapse_to_placeholder() {
        assert_eq!(preprocess("order 3f2a9c1b-1c2d-4e5f-8a9b-0c1d2e3f4a5b done"), "order id done");
        assert_eq!(preprocess("span a480f2 ok"), "span id ok");
        assert_eq!(preprocess("deadbeef"), "deadbeef");
    }

    #[test]
    fn featurize_shapes_and_zero_log_row() {
        let e = HashingEmbedder::new(4, 2);
        let t = trace(vec![span("x.0", 0, 3)], vec![]);
        let (s, l) = featurize_trace(&t, &e, &FeaturizeConfig::default()).unwrap();
        assert_eq!(s.values.dim(), (1, 8));
        assert_eq!(s.values.row(0).iter().take(4).copied().collect::<Vec<_>>(), vec![0.0; 4]);
        assert_eq!(l.values, Matrix::zeros((1, 4)));
    }

    #[test]
    fn log_change_affects_only_log_matrix() {
        let e = HashingEmbedder::default();
        let cfg = FeaturizeConfig::default();
        let spans = vec![span("a.0", 0, 10), span("a.1", 2, 5)];
        let a = trace(spans.clone(), vec![log("INFO", "cart", "added item"), log("INFO", "cart", "ok")]);
        let b = trace(spans, vec![log("INFO", "cart", "added item"), log("ERROR", "cart", "failure")]);
        let (sa, la) = featurize_trace(&a, &e, &cfg).unwrap();
        let (sb, lb) = featurize_trace(&b, &e, &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(la.values.row(0), lb.values.row(0));
        assert_ne!(la.values.row(1), lb.values.row(1));
        assert_eq!(featurize_trace(&a, &e, &cfg).unwrap(), (sa, la));
    }

    #[test]
    fn truncation_caps_rows() {
        let e = HashingEmbedder::new(8, 1);
        let spans = (0..10).map(|k| span(&format!("a.{k}"), k, k + 1)).collect();
        let logs = (0..10).map(|_| log("INFO", "c", "m")).collect();
        let cfg = FeaturizeConfig { max_spans: 3, max_logs: 2 };
        let (s, l) = featurize_trace(&trace(spans, logs), &e, &cfg).unwrap();
        assert_eq!(s.values.nrows(), 3);
        assert_eq!(l.values.nrows(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn timestamp_offset_and_prefix_renaming_leave_features_unchanged(
                starts in proptest::collection::vec(0i64..1_000, 2..8),
                offset in -10_000i64..10_000,
            ) {
                let e = HashingEmbedder::new(8, 2);
                let cfg = FeaturizeConfig::default();
                let spans: Vec<SpanRecord> = starts.iter().enumerate()
                    .map(|(k, &s)| span(&format!("p{}.{}", k % 3, k), s, s + 1 + (k as i64 * 7) % 11))
                    .collect();
                let base = trace(spans.clone(), vec![]);
                let shifted = trace(spans.iter().map(|s| SpanRecord {
                    start_time: s.start_time + offset,
                    end_time: s.end_time + offset,
                    ..s.clone()
                }).collect(), vec![]);
                let renamed = trace(spans.iter().map(|s| SpanRecord {
                    span_id: s.span_id.replace('p', "zz"),
                    ..s.clone()
                }).collect(), vec![]);
                let f0 = featurize_trace(&base, &e, &cfg).unwrap().0;
                let f1 = featurize_trace(&shifted, &e, &cfg).unwrap().0;
                let f2 = featurize_trace(&renamed, &e, &cfg).unwrap().0;
                for (a, b) in f0.values.iter().zip(f1.values.iter()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                prop_assert_eq!(&f0, &f2);
                let numeric = f0.values.slice(ndarray::s![.., ..NUMERIC_SPAN_COLS]);
                prop_assert!(numeric.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
