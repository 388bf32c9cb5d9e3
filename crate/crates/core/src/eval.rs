//! Batch evaluation: N rollouts per question, beam union, metric aggregation
//! and generation accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::QASample;
use crate::protocol::{AnswerSet, Executor, GraphExecutor};
use crate::retrieval::{ExecOptions, FormatMode, Observation};
use crate::reward::{f1, hit_at_1, retrieval_coverage, HitMode, MetricError, RewardConfig};
use crate::rollout::{collect_with, worker_pool, PolicyFactory, RolloutError, RolloutGroup, RolloutOptions, DEFAULT_CONTEXT_CAP};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no answer sets to combine")]
    EmptyRuns,
    #[error("dataset {0:?} is empty")]
    EmptyDataset(String),
    #[error("no datasets given")]
    NoDatasets,
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("sample {sample_id}: {source}")]
    Metric { sample_id: String, source: MetricError },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Union of answer sets under normalization. The first spelling seen wins and
/// entity order follows first appearance.
pub fn union_of_runs(sets: &[AnswerSet]) -> Result<AnswerSet, EvalError> {
    if sets.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let mut seen = BTreeSet::new();
    let mut entities = Vec::new();
    for e in sets.iter().flat_map(|s| &s.entities) {
        if seen.insert(e.normalized.clone()) {
            entities.push(e.clone());
        }
    }
    let raw_text = sets.iter().map(|s| s.raw_text.as_str()).collect::<Vec<_>>().join("\n");
    Ok(AnswerSet { raw_text, entities })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Every question of every dataset weighs the same.
    #[default]
    Micro,
    /// Every dataset weighs the same.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub max_turns: usize,
    pub reward: RewardConfig,
    pub hit_mode: HitMode,
    pub averaging: Averaging,
    pub format: FormatMode,
    pub result_cap: usize,
    pub context_cap: usize,
    /// Worker threads. Does not affect results.
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let exec = ExecOptions::default();
        Self {
            n: 1,
            max_turns: 5,
            reward: RewardConfig::default(),
            hit_mode: HitMode::Intersection,
            averaging: Averaging::Micro,
            format: exec.format,
            result_cap: exec.result_cap,
            context_cap: DEFAULT_CONTEXT_CAP,
            concurrency: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions { format: self.format, result_cap: self.result_cap }
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            n: self.n,
            max_turns: self.max_turns,
            exec: self.exec_options(),
            context_cap: self.context_cap,
            concurrency: self.concurrency,
            seed: self.seed,
            record_logprobs: false,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.to_owned()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.max_turns == 0 {
            return bad("max_turns must be at least 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.result_cap == 0 {
            return bad("result_cap must be at least 1");
        }
        self.reward.validate().map_err(EvalError::Config)
    }

    /// SHA-256 over every setting that can change a result.
    pub fn fingerprint(&self) -> String {
        let view = FingerprintView {
            n: self.n,
            max_turns: self.max_turns,
            reward: self.reward,
            hit_mode: self.hit_mode,
            averaging: self.averaging,
            format: self.format,
            result_cap: self.result_cap,
            context_cap: self.context_cap,
            seed: self.seed,
        };
        hex(&Sha256::digest(serde_json::to_vec(&view).expect("config serializes")))
    }
}

#[derive(Serialize)]
struct FingerprintView {
    n: usize,
    max_turns: usize,
    reward: RewardConfig,
    hit_mode: HitMode,
    averaging: Averaging,
    format: FormatMode,
    result_cap: usize,
    context_cap: usize,
    seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Counts tokens in generated and context text.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Where retrieval calls for a sample are executed.
pub trait ExecutorSource: Sync {
    fn executor_for<'a>(&'a self, sample: &'a QASample) -> Box<dyn Executor + Sync + 'a>;
}

/// Each sample's own in-memory graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalGraphs(pub ExecOptions);

impl ExecutorSource for LocalGraphs {
    fn executor_for<'a>(&'a self, sample: &'a QASample) -> Box<dyn Executor + Sync + 'a> {
        Box::new(GraphExecutor::new(&sample.graph, self.0))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub gen_tokens: f64,
    pub gen_chars: f64,
    pub total_tokens: f64,
    pub total_chars: f64,
    pub turns: f64,
}

impl Accounting {
    fn add(&mut self, o: &Accounting) {
        self.gen_tokens += o.gen_tokens;
        self.gen_chars += o.gen_chars;
        self.total_tokens += o.total_tokens;
        self.total_chars += o.total_chars;
        self.turns += o.turns;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.gen_tokens *= k;
        self.gen_chars *= k;
        self.total_tokens *= k;
        self.total_chars *= k;
        self.turns *= k;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub runs: usize,
    pub failed_runs: usize,
    /// Scored on the union of all runs.
    pub f1: f64,
    pub hit_at_1: u8,
    /// 1 iff any run retrieved a gold entity.
    pub retrieval: u8,
    pub per_run_f1: f64,
    pub per_run_hit_at_1: f64,
    /// Per-episode means over successful runs.
    pub accounting: Accounting,
    pub errors: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub hit_at_1: f64,
    pub retrieval_rate: f64,
    pub per_run_f1: f64,
    pub per_run_hit_at_1: f64,
    pub accounting: Accounting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub samples: usize,
    pub scored: usize,
    /// Samples whose rollouts all failed.
    pub excluded: usize,
    pub failed_rollouts: usize,
    pub metrics: Metrics,
    pub errors: BTreeMap<String, usize>,
    pub per_sample: Vec<SampleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub max_turns: usize,
    pub config: EvalConfig,
    pub fingerprint: String,
    pub overall: Metrics,
    pub samples: usize,
    pub scored: usize,
    pub excluded: usize,
    pub errors: BTreeMap<String, usize>,
    pub datasets: Vec<DatasetReport>,
}

/// A named list of samples.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub name: &'a str,
    pub samples: &'a [QASample],
}

pub fn evaluate(
    dataset: &[QASample],
    policies: &dyn PolicyFactory,
    executors: &dyn ExecutorSource,
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    evaluate_suite(&[Dataset { name: "dataset", samples: dataset }], policies, executors, cfg, &WhitespaceTokens)
}

pub fn evaluate_suite(
    datasets: &[Dataset<'_>],
    policies: &dyn PolicyFactory,
    executors: &dyn ExecutorSource,
    cfg: &EvalConfig,
    counter: &dyn TokenCounter,
) -> Result<MetricsReport, EvalError> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(EvalError::NoDatasets);
    }
    if let Some(d) = datasets.iter().find(|d| d.samples.is_empty()) {
        return Err(EvalError::EmptyDataset(d.name.to_owned()));
    }
    let pool = worker_pool(cfg.concurrency)?;
    let opts = cfg.rollout_options();
    let mut reports = Vec::with_capacity(datasets.len());
    for d in datasets {
        let results: Vec<Result<Option<SampleResult>, EvalError>> = pool.install(|| {
            d.samples
                .par_iter()
                .map(|s| evaluate_sample(s, policies, executors, &opts, cfg, counter))
                .collect()
        });
        let mut per_sample = Vec::with_capacity(results.len());
        let mut excluded = 0;
        for r in results {
            match r? {
                Some(x) => per_sample.push(x),
                None => excluded += 1,
            }
        }
        reports.push(dataset_report(d, per_sample, excluded));
    }
    Ok(combine(reports, cfg))
}

fn evaluate_sample(
    sample: &QASample,
    policies: &dyn PolicyFactory,
    executors: &dyn ExecutorSource,
    opts: &RolloutOptions,
    cfg: &EvalConfig,
    counter: &dyn TokenCounter,
) -> Result<Option<SampleResult>, EvalError> {
    let policy = match policies.policy_for(sample) {
        Ok(p) => p,
        Err(_) => return Ok(None),
    };
    let executor = executors.executor_for(sample);
    let group = match collect_with(sample, policy.as_ref(), executor.as_ref(), opts) {
        Ok(g) => g,
        Err(RolloutError::AllFailed(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    score_group(sample, &group, cfg, counter).map(Some)
}

/// Per-sample metrics for an already collected group.
pub fn score_group(sample: &QASample, group: &RolloutGroup, cfg: &EvalConfig, counter: &dyn TokenCounter) -> Result<SampleResult, EvalError> {
    let gold = sample.gold_set();
    let metric = |e| EvalError::Metric { sample_id: sample.sample_id.clone(), source: e };
    let ok: Vec<_> = group.succeeded().map(|r| &r.trajectory).collect();
    let predictions: Vec<AnswerSet> = ok.iter().map(|t| t.predicted.clone().unwrap_or_default()).collect();
    let union = union_of_runs(&predictions)?;
    let mut per_run_f1 = 0.0;
    let mut per_run_hit = 0.0;
    for p in &predictions {
        per_run_f1 += f1(p, &gold).map_err(metric)?;
        per_run_hit += f64::from(hit_at_1(p, &gold, cfg.hit_mode).map_err(metric)?);
    }
    let runs = ok.len() as f64;
    let mut accounting = Accounting::default();
    let mut errors = BTreeMap::new();
    for t in &ok {
        let generated: Vec<&str> = t.turns.iter().map(|x| x.message.as_str()).collect();
        let context = t.context();
        accounting.add(&Accounting {
            gen_tokens: generated.iter().map(|m| counter.count(m)).sum::<usize>() as f64,
            gen_chars: generated.iter().map(|m| m.chars().count()).sum::<usize>() as f64,
            total_tokens: counter.count(&context) as f64,
            total_chars: context.chars().count() as f64,
            turns: t.turns.len() as f64,
        });
        for kind in t.turns.iter().filter_map(|x| x.observation.as_ref()).filter_map(Observation::error_kind) {
            *errors.entry(kind.label()).or_insert(0) += 1;
        }
    }
    Ok(SampleResult {
        sample_id: sample.sample_id.clone(),
        runs: ok.len(),
        failed_runs: group.failed_count(),
        f1: f1(&union, &gold).map_err(metric)?,
        hit_at_1: hit_at_1(&union, &gold, cfg.hit_mode).map_err(metric)?,
        retrieval: u8::from(ok.iter().any(|t| retrieval_coverage(t, &gold) == 1)),
        per_run_f1: per_run_f1 / runs,
        per_run_hit_at_1: per_run_hit / runs,
        accounting: accounting.scaled(1.0 / runs),
        errors,
    })
}

fn dataset_report(d: &Dataset<'_>, per_sample: Vec<SampleResult>, excluded: usize) -> DatasetReport {
    let mut m = Metrics::default();
    let mut errors = BTreeMap::new();
    for s in &per_sample {
        m.f1 += s.f1;
        m.hit_at_1 += f64::from(s.hit_at_1);
        m.retrieval_rate += f64::from(s.retrieval);
        m.per_run_f1 += s.per_run_f1;
        m.per_run_hit_at_1 += s.per_run_hit_at_1;
        m.accounting.add(&s.accounting);
        for (k, v) in &s.errors {
            *errors.entry(k.clone()).or_insert(0) += v;
        }
    }
    let scored = per_sample.len();
    DatasetReport {
        name: d.name.to_owned(),
        samples: d.samples.len(),
        scored,
        excluded,
        failed_rollouts: per_sample.iter().map(|s| s.failed_runs).sum(),
        metrics: if scored == 0 { m } else { mean(&m, scored as f64) },
        errors,
        per_sample,
    }
}

fn mean(sum: &Metrics, k: f64) -> Metrics {
    Metrics {
        f1: sum.f1 / k,
        hit_at_1: sum.hit_at_1 / k,
        retrieval_rate: sum.retrieval_rate / k,
        per_run_f1: sum.per_run_f1 / k,
        per_run_hit_at_1: sum.per_run_hit_at_1 / k,
        accounting: sum.accounting.scaled(1.0 / k),
    }
}

fn weighted_sum(acc: &mut Metrics, m: &Metrics, w: f64) {
    acc.f1 += w * m.f1;
    acc.hit_at_1 += w * m.hit_at_1;
    acc.retrieval_rate += w * m.retrieval_rate;
    acc.per_run_f1 += w * m.per_run_f1;
    acc.per_run_hit_at_1 += w * m.per_run_hit_at_1;
    acc.accounting.add(&m.accounting.scaled(w));
}

fn combine(datasets: Vec<DatasetReport>, cfg: &EvalConfig) -> MetricsReport {
    let scored: usize = datasets.iter().map(|d| d.scored).sum();
    let overall = if datasets.len() == 1 {
        datasets[0].metrics.clone()
    } else {
        let mut acc = Metrics::default();
        let contributing: Vec<&DatasetReport> = datasets.iter().filter(|d| d.scored > 0).collect();
        for d in &contributing {
            let w = match cfg.averaging {
                Averaging::Micro => d.scored as f64 / scored as f64,
                Averaging::Macro => 1.0 / contributing.len() as f64,
            };
            weighted_sum(&mut acc, &d.metrics, w);
        }
        acc
    };
    let mut errors = BTreeMap::new();
    for d in &datasets {
        for (k, v) in &d.errors {
            *errors.entry(k.clone()).or_insert(0) += v;
        }
    }
    MetricsReport {
        n: cfg.n,
        max_turns: cfg.max_turns,
        config: *cfg,
        fingerprint: cfg.fingerprint(),
        overall,
        samples: datasets.iter().map(|d| d.samples).sum(),
        scored,
        excluded: datasets.iter().map(|d| d.excluded).sum(),
        errors,
        datasets,
    }
}

impl MetricsReport {
    /// Fixed-width table with F1, Hit@1, Total and Gen columns.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "N={} H={} averaging={} hit={} format={} seed={}",
            self.n,
            self.max_turns,
            enum_name(&c.averaging),
            enum_name(&c.hit_mode),
            enum_name(&c.format),
            c.seed
        );
        let _ = writeln!(out, "fingerprint {}", self.fingerprint);
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>8} {:>8} {:>8} {:>10} {:>10}",
            "dataset", "scored", "F1", "Hit@1", "Ret", "Total", "Gen"
        );
        let mut row = |name: &str, scored: usize, samples: usize, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<20} {:>9} {:>8.4} {:>8.4} {:>8.4} {:>10.1} {:>10.1}",
                name,
                format!("{scored}/{samples}"),
                m.f1,
                m.hit_at_1,
                m.retrieval_rate,
                m.accounting.total_tokens,
                m.accounting.gen_tokens
            );
        };
        for d in &self.datasets {
            row(&d.name, d.scored, d.samples, &d.metrics);
        }
        if self.datasets.len() > 1 {
            row("overall", self.scored, self.samples, &self.overall);
        }
        let _ = writeln!(
            out,
            "per-run F1 {:.4}  per-run Hit@1 {:.4}  turns {:.2}  gen chars {:.1}",
            self.overall.per_run_f1, self.overall.per_run_hit_at_1, self.overall.accounting.turns, self.overall.accounting.gen_chars
        );
        if self.excluded > 0 {
            let _ = writeln!(out, "excluded samples (all rollouts failed): {}", self.excluded);
        }
        if !self.errors.is_empty() {
            let _ = writeln!(out, "error observations:");
            for (k, v) in &self.errors {
                let _ = writeln!(out, "  {k}  {v}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}
