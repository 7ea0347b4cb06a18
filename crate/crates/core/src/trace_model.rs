//! Traces, spans, logs, and labeled corpora, plus the JSONL on-disk format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub span_id: String,
    pub parent_id: Option<String>,
    /// Microseconds since the corpus epoch.
    #[serde(rename = "start_time_us")]
    pub start_time: i64,
    #[serde(rename = "end_time_us")]
    pub end_time: i64,
    #[serde(rename = "service")]
    pub service_name: String,
    pub url: String,
}

impl SpanRecord {
    pub fn duration(&self) -> i64 {
        self.end_time - self.start_time
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(rename = "timestamp_us")]
    pub timestamp: i64,
    pub severity: String,
    pub component: String,
    pub message: String,
    pub span_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub trace_id: String,
    pub spans: Vec<SpanRecord>,
    pub logs: Vec<LogRecord>,
    /// Fault category id; `None` for normal traces.
    pub label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaultCategory {
    pub id: String,
    pub system: String,
    /// Assigned by `episodes::split_categories`; unassigned after loading.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceCorpus {
    pub system: String,
    pub traces: Vec<Trace>,
    /// Keyed by category id.
    pub categories: BTreeMap<String, FaultCategory>,
}

/// One JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    trace_id: String,
    label: Option<String>,
    system: String,
    spans: Vec<SpanRecord>,
    #[serde(default)]
    logs: Vec<LogRecord>,
}

impl Trace {
    /// Sort spans by (start_time, span_id) and logs by (timestamp, span_id).
    /// Both sorts are stable.
    pub fn normalize_order(&mut self) {
        self.spans
            .sort_by(|a, b| (a.start_time, &a.span_id).cmp(&(b.start_time, &b.span_id)));
        self.logs.sort_by(|a, b| {
            (a.timestamp, a.span_id.as_deref().unwrap_or(""))
                .cmp(&(b.timestamp, b.span_id.as_deref().unwrap_or("")))
        });
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            trace_id: self.trace_id.clone(),
            message,
        };
        if self.spans.is_empty() {
            return Err(fail("trace has no spans".into()));
        }
        for span in &self.spans {
            if span.span_id.is_empty() {
                return Err(fail("span with empty span_id".into()));
            }
            if span.end_time < span.start_time {
                return Err(fail(format!(
                    "span {} ends before it starts ({} < {})",
                    span.span_id, span.end_time, span.start_time
                )));
            }
        }
        if self.spans.iter().any(|s| s.parent_id.is_some()) {
            let roots = self.spans.iter().filter(|s| s.parent_id.is_none()).count();
            if roots != 1 {
                return Err(fail(format!("expected exactly one root span, found {roots}")));
            }
        }
        for log in &self.logs {
            if log.message.is_empty() && (log.severity.is_empty() || log.component.is_empty()) {
                return Err(fail(format!(
                    "log at {} has an empty message without both severity and component",
                    log.timestamp
                )));
            }
        }
        Ok(())
    }

    pub fn root_span(&self) -> Option<&SpanRecord> {
        self.spans.iter().find(|s| s.parent_id.is_none())
    }
}

impl TraceCorpus {
    pub fn new(system: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            traces: Vec::new(),
            categories: BTreeMap::new(),
        }
    }

    /// Add a trace, interning its label as a category.
    pub fn push(&mut self, trace: Trace) {
        if let Some(label) = &trace.label {
            self.categories
                .entry(label.clone())
                .or_insert_with(|| FaultCategory {
                    id: label.clone(),
                    system: self.system.clone(),
                    split: None,
                });
        }
        self.traces.push(trace);
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn normal_traces(&self) -> impl Iterator<Item = &Trace> {
        self.traces.iter().filter(|t| t.label.is_none())
    }

    pub fn traces_of<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a Trace> + 'a {
        self.traces
            .iter()
            .filter(move |t| t.label.as_deref() == Some(category))
    }

    /// Keep only the unlabeled traces.
    pub fn unlabeled(&self) -> TraceCorpus {
        let mut out = TraceCorpus::new(self.system.clone());
        for t in self.normal_traces() {
            out.push(t.clone());
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.traces {
            let line = TraceLine {
                trace_id: t.trace_id.clone(),
                label: t.label.clone(),
                system: self.system.clone(),
                spans: t.spans.clone(),
                logs: t.logs.clone(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<corpus writer>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parse a JSONL corpus. `system` must match each line's `system` field.
pub fn parse_corpus(reader: impl BufRead, system: &str) -> Result<TraceCorpus> {
    let mut corpus = TraceCorpus::new(system);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.system != system {
            return Err(Error::Validation {
                trace_id: rec.trace_id,
                message: format!("system {:?} does not match corpus system {system:?}", rec.system),
            });
        }
        let mut trace = Trace {
            trace_id: rec.trace_id,
            spans: rec.spans,
            logs: rec.logs,
            label: rec.label,
        };
        trace.validate()?;
        trace.normalize_order();
        corpus.push(trace);
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path, system: &str) -> Result<TraceCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), system)
}

/// Read the `system` field of the first record, for callers that do not know it.
pub fn sniff_system(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Head {
            system: String,
        }
        let head: Head = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        return Ok(head.system);
    }
    Err(Error::Parse {
        line: 0,
        message: "empty corpus file".into(),
    })
}

/// Integer summary in the style of a descriptive-statistics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: u64,
    pub min: u64,
    pub max: u64,
}

impl Summary {
    /// Arithmetic mean rounded half-up; `None` for an empty input.
    pub fn of(values: impl IntoIterator<Item = u64>) -> Option<Summary> {
        let v: Vec<u64> = values.into_iter().collect();
        let (&min, &max) = (v.iter().min()?, v.iter().max()?);
        let total: u64 = v.iter().sum();
        let n = v.len() as u64;
        // half-up: floor(total/n + 1/2)
        let mean = (2 * total + n) / (2 * n);
        Some(Summary { mean, min, max })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub traces: u64,
    pub spans_per_trace: Summary,
    pub logs_per_trace: Summary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub traces: u64,
    pub spans_per_trace: Summary,
    pub logs_per_trace: Summary,
    /// Traces per fault category; absent for an unlabeled corpus.
    pub traces_per_category: Option<Summary>,
    pub per_category: BTreeMap<String, CategoryStats>,
}

pub fn corpus_stats(corpus: &TraceCorpus) -> Option<CorpusStats> {
    let spans = |ts: &[&Trace]| Summary::of(ts.iter().map(|t| t.spans.len() as u64));
    let logs = |ts: &[&Trace]| Summary::of(ts.iter().map(|t| t.logs.len() as u64));
    let all: Vec<&Trace> = corpus.traces.iter().collect();
    let mut per_category = BTreeMap::new();
    for id in corpus.categories.keys() {
        let ts: Vec<&Trace> = corpus.traces_of(id).collect();
        if let (Some(s), Some(l)) = (spans(&ts), logs(&ts)) {
            per_category.insert(
                id.clone(),
                CategoryStats {
                    traces: ts.len() as u64,
                    spans_per_trace: s,
                    logs_per_trace: l,
                },
            );
        }
    }
    Some(CorpusStats {
        traces: all.len() as u64,
        spans_per_trace: spans(&all)?,
        logs_per_trace: logs(&all)?,
        traces_per_category: Summary::of(per_category.values().map(|c| c.traces)),
        per_category,
    })
}
