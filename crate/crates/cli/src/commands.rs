use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use kgenv_core::credit::{
    broadcast_to_tokens, group_credit, grpo_objective, CreditConfig, CreditMode, TokenBatchRecord, TokenValues,
};
use kgenv_core::dataset::{load_graph_file, DatasetLoader, QaRow};
use kgenv_core::eval::{evaluate_suite, Dataset, EvalConfig, ExecutorSource, LocalGraphs, WhitespaceTokens};
use kgenv_core::jsonl::{read_jsonl, write_jsonl};
use kgenv_core::protocol::{EpisodeStatus, Trajectory};
use kgenv_core::reward::{score_trajectory, RewardBreakdown};
use kgenv_core::rollout::{
    collect_with, worker_pool, OracleFactory, PolicyFactory, RandomFactory, ReplayFactory, Rollout, RolloutError, RolloutGroup, Shared,
};
use kgenv_core::QASample;
use kgenv_service::{Backend, KgClient, RemoteGraphs, RemotePolicy, SamplingParams, ServerConfig, ServerHandle};
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::{Ablation, Cli, Command, Global, PolicyArgs, PolicyKind};

struct Settings {
    eval: EvalConfig,
    credit: CreditConfig,
}

fn settings(g: &Global) -> Result<Settings> {
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut eval = file.eval();
    let mut credit = file.credit();
    if let Some(v) = g.seed {
        eval.seed = v;
    }
    if let Some(v) = g.concurrency {
        eval.concurrency = v;
    }
    if let Some(v) = g.max_turns {
        eval.max_turns = v;
    }
    if let Some(v) = g.n {
        eval.n = v;
    }
    if let Some(v) = g.format {
        eval.format = v.into();
    }
    if let Some(v) = g.result_cap {
        eval.result_cap = v;
    }
    for a in &g.ablations {
        match a {
            Ablation::TurnRewards => {
                eval.reward.w_fmt = 0.0;
                eval.reward.w_kg = 0.0;
                eval.reward.w_ans = 0.0;
            }
            Ablation::RetrievalReward => eval.reward.w_ret = 0.0,
            Ablation::TurnwiseAdvantage => credit.mode = CreditMode::Trajectory,
        }
    }
    eval.validate()?;
    credit.validate()?;
    Ok(Settings { eval, credit })
}

pub fn run(cli: Cli) -> Result<()> {
    let s = settings(&cli.global)?;
    match cli.command {
        Command::Serve { dataset, shared_graph, bind, timeout_ms } => serve(dataset, shared_graph, &bind, timeout_ms, &s.eval),
        Command::Ingest { triples, qa, out, radius } => ingest(&triples, &qa, &out, radius),
        Command::Rollout { dataset, policy, out, logprobs } => rollout(&cli.global, &s.eval, &dataset, &policy, out, logprobs),
        Command::Score { trajectories, dataset, out } => score(&s.eval, &trajectories, &dataset, out),
        Command::Credit { trajectories, dataset, tokens, out } => credit(&s, &trajectories, &dataset, tokens, out),
        Command::Evaluate { dataset, policy, out, json } => evaluate(&cli.global, &s.eval, &dataset, &policy, out, json),
    }
}

fn load_dataset(path: &Path) -> Result<Vec<QASample>> {
    let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    let mut loader = DatasetLoader::new();
    if let Some(dir) = path.parent() {
        loader = loader.with_base_dir(dir);
    }
    let load = loader.load(BufReader::new(file));
    for r in &load.rejected {
        log::warn!("{}:{}: rejected {}: {}", path.display(), r.line, r.sample_id.as_deref().unwrap_or("?"), r.reason);
    }
    if !load.rejected.is_empty() {
        eprintln!("warning: {} rows of {} rejected", load.rejected.len(), path.display());
    }
    if load.samples.is_empty() {
        bail!("dataset {} has no usable samples", path.display());
    }
    Ok(load.samples)
}

fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// A trajectory file line: a whole group or a single trajectory.
#[derive(Deserialize)]
#[serde(untagged)]
enum TrajectoryLine {
    Group(RolloutGroup),
    Single(Trajectory),
}

/// Consecutive single trajectories with the same sample id form one group.
fn read_groups(path: &Path) -> Result<Vec<RolloutGroup>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let lines: Vec<TrajectoryLine> = read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let mut groups: Vec<RolloutGroup> = Vec::new();
    for line in lines {
        match line {
            TrajectoryLine::Group(g) => groups.push(g),
            TrajectoryLine::Single(t) => match groups.last_mut() {
                Some(g) if g.sample_id == t.sample_id && g.rollouts.iter().all(|r| r.rewards.is_none()) && g.max_turns == t.max_turns => {
                    let index = g.rollouts.len();
                    g.rollouts.push(Rollout { index, trajectory: t, rewards: None, token_logprobs: None });
                }
                _ => groups.push(RolloutGroup {
                    sample_id: t.sample_id.clone(),
                    max_turns: t.max_turns,
                    rollouts: vec![Rollout { index: 0, trajectory: t, rewards: None, token_logprobs: None }],
                }),
            },
        }
    }
    Ok(groups)
}

fn by_id(samples: &[QASample]) -> BTreeMap<&str, &QASample> {
    samples.iter().map(|s| (s.sample_id.as_str(), s)).collect()
}

fn policies(args: &PolicyArgs, cfg: &EvalConfig, evaluation: bool) -> Result<Box<dyn PolicyFactory>> {
    Ok(match args.policy {
        PolicyKind::Oracle => Box::new(OracleFactory { max_turns: cfg.max_turns }),
        PolicyKind::Random => Box::new(RandomFactory),
        PolicyKind::Replay => {
            let path = args.transcript.as_ref().ok_or_else(|| anyhow!("--policy replay needs --transcript"))?;
            Box::new(ReplayFactory::from_groups(&read_groups(path)?))
        }
        PolicyKind::Remote => {
            let url = args.policy_url.as_ref().ok_or_else(|| anyhow!("--policy remote needs --policy-url"))?;
            let base = if evaluation { SamplingParams::evaluation() } else { SamplingParams::collection() };
            let sampling = SamplingParams {
                temperature: args.temperature.unwrap_or(base.temperature),
                top_p: args.top_p.unwrap_or(base.top_p),
                top_k: args.top_k.unwrap_or(base.top_k),
                max_tokens: args.max_tokens.unwrap_or(base.max_tokens),
            };
            let mut p = RemotePolicy::new(url.clone(), args.model.clone(), sampling, Duration::from_millis(args.policy_timeout_ms))
                .map_err(|e| anyhow!(e))?;
            p.request_logprobs = !evaluation;
            Box::new(Shared(p))
        }
    })
}

fn executors(g: &Global, cfg: &EvalConfig) -> Result<Box<dyn ExecutorSource>> {
    Ok(match &g.endpoint {
        Some(url) => {
            let client = KgClient::new(url)?;
            client.health().with_context(|| format!("retrieval service at {url} is not reachable"))?;
            Box::new(RemoteGraphs { client, format: Some(cfg.format) })
        }
        None => Box::new(LocalGraphs(cfg.exec_options())),
    })
}

fn serve(dataset: Option<PathBuf>, shared: Option<PathBuf>, bind: &str, timeout_ms: u64, cfg: &EvalConfig) -> Result<()> {
    if dataset.is_none() && shared.is_none() {
        bail!("serve needs --dataset, --shared-graph, or both");
    }
    let samples = match &dataset {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let shared = match &shared {
        Some(p) => Some(Arc::new(load_graph_file(p).map_err(|e| anyhow!("loading {}: {e}", p.display()))?)),
        None => None,
    };
    let backend = Backend::new(&samples, shared)?;
    let config = ServerConfig { format: cfg.format, result_cap: cfg.result_cap, timeout: Duration::from_millis(timeout_ms) };
    let handle = ServerHandle::spawn(backend, config, bind).with_context(|| format!("binding {bind}"))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "listening on {}", handle.url())?;
    stdout.flush()?;
    drop(stdout);
    handle.wait()?;
    Ok(())
}

fn ingest(triples: &Path, qa: &Path, out: &Path, radius: usize) -> Result<()> {
    let kg = load_graph_file(triples).map_err(|e| anyhow!("loading {}: {e}", triples.display()))?;
    let rows: Vec<QaRow> = read_jsonl(BufReader::new(File::open(qa).with_context(|| format!("opening {}", qa.display()))?))
        .with_context(|| format!("reading {}", qa.display()))?;
    std::fs::create_dir_all(out.join("graphs"))?;
    let mut cache: BTreeMap<Vec<String>, String> = BTreeMap::new();
    let mut staged = Vec::with_capacity(rows.len());
    for mut row in rows {
        if row.triples.is_none() && row.graph.is_none() {
            let mut anchors = row.anchor_entities.clone();
            anchors.sort();
            anchors.dedup();
            let next = cache.len();
            let name = match cache.get(&anchors) {
                Some(n) => n.clone(),
                None => {
                    let name = format!("graphs/{next:05}.tsv");
                    let sub = kg.extract_subgraph(anchors.iter().map(String::as_str), radius);
                    let file = File::create(out.join(&name))?;
                    let mut w = BufWriter::new(file);
                    sub.write_triples(&mut w, kgenv_core::TripleFormat::Tsv)?;
                    w.flush()?;
                    cache.insert(anchors, name.clone());
                    name
                }
            };
            row.graph = Some(name);
        }
        staged.push(row);
    }
    let mut loader = DatasetLoader::new().with_base_dir(out);
    let load = loader.load_rows(staged.iter().cloned());
    let accepted: std::collections::BTreeSet<&str> = load.samples.iter().map(|s| s.sample_id.as_str()).collect();
    let kept: Vec<&QaRow> = staged.iter().filter(|r| accepted.contains(r.sample_id.as_str())).collect();
    let mut w = BufWriter::new(File::create(out.join("dataset.jsonl"))?);
    write_jsonl(&mut w, kept.iter().copied())?;
    w.flush()?;
    let mut rej = BufWriter::new(File::create(out.join("rejected.jsonl"))?);
    for r in &load.rejected {
        serde_json::to_writer(&mut rej, &serde_json::json!({"row": r.line, "sample_id": r.sample_id, "reason": r.reason}))?;
        rej.write_all(b"\n")?;
    }
    rej.flush()?;
    println!(
        "ingested {} samples ({} rejected) into {} with {} distinct subgraphs",
        load.samples.len(),
        load.rejected.len(),
        out.display(),
        cache.len()
    );
    Ok(())
}

fn rollout(g: &Global, cfg: &EvalConfig, dataset: &Path, args: &PolicyArgs, out: Option<PathBuf>, logprobs: bool) -> Result<()> {
    let samples = load_dataset(dataset)?;
    let factory = policies(args, cfg, false)?;
    let source = executors(g, cfg)?;
    let mut opts = cfg.rollout_options();
    opts.record_logprobs = logprobs;
    let pool = worker_pool(cfg.concurrency)?;
    // Samples run one after another; rollouts within a sample share the pool.
    let groups = samples.iter().filter_map(|s| -> Option<Result<RolloutGroup>> {
        let policy = match factory.policy_for(s) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("warning: skipping sample {}: {e}", s.sample_id);
                return None;
            }
        };
        let executor = source.executor_for(s);
        Some(match pool.install(|| collect_with(s, policy.as_ref(), executor.as_ref(), &opts)) {
            Ok(g) => Ok(g),
            Err(RolloutError::AllFailed(g)) => {
                eprintln!("warning: every rollout for sample {} failed", s.sample_id);
                Ok(*g)
            }
            Err(e) => Err(e.into()),
        })
    });
    let mut w = open_out(out.as_ref())?;
    for group in groups {
        serde_json::to_writer(&mut w, &group?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    sample_id: &'a str,
    rollout: usize,
    status: EpisodeStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    rewards: Option<&'a RewardBreakdown>,
}

fn score_groups(cfg: &EvalConfig, groups: &mut [RolloutGroup], samples: &[QASample]) -> Result<()> {
    let index = by_id(samples);
    for g in groups {
        let sample = index.get(g.sample_id.as_str()).ok_or_else(|| anyhow!("sample {} is not in the dataset", g.sample_id))?;
        let gold = sample.gold_set();
        for r in &mut g.rollouts {
            r.rewards = match r.trajectory.status {
                EpisodeStatus::InfraFailed => None,
                _ => Some(
                    score_trajectory(&r.trajectory, &gold, &cfg.reward)
                        .with_context(|| format!("sample {} rollout {}", g.sample_id, r.index))?,
                ),
            };
        }
    }
    Ok(())
}

fn score(cfg: &EvalConfig, trajectories: &Path, dataset: &Path, out: Option<PathBuf>) -> Result<()> {
    let samples = load_dataset(dataset)?;
    let mut groups = read_groups(trajectories)?;
    score_groups(cfg, &mut groups, &samples)?;
    let mut w = open_out(out.as_ref())?;
    for g in &groups {
        for r in &g.rollouts {
            let rec = ScoreRecord { sample_id: &g.sample_id, rollout: r.index, status: r.trajectory.status, rewards: r.rewards.as_ref() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CreditRecord {
    sample_id: String,
    mode: CreditMode,
    lambda: f64,
    /// Indices of the rollouts that entered the group (failed ones are left out).
    rollouts: Vec<usize>,
    baseline: f64,
    std: f64,
    pool_size: usize,
    returns: Vec<Vec<f64>>,
    advantages: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_advantages: Option<TokenValues>,
}

fn credit(s: &Settings, trajectories: &Path, dataset: &Path, tokens: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let samples = load_dataset(dataset)?;
    let mut groups = read_groups(trajectories)?;
    score_groups(&s.eval, &mut groups, &samples)?;
    let mut batches: BTreeMap<String, TokenBatchRecord> = BTreeMap::new();
    if let Some(p) = &tokens {
        let records: Vec<TokenBatchRecord> =
            read_jsonl(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
                .with_context(|| format!("reading {}", p.display()))?;
        for r in records {
            if batches.contains_key(&r.sample_id) {
                bail!("token file has two batches for sample {}", r.sample_id);
            }
            batches.insert(r.sample_id.clone(), r);
        }
    }
    let c = &s.credit;
    let mut w = open_out(out.as_ref())?;
    for g in &groups {
        let scored: Vec<(usize, &RewardBreakdown)> = g.rollouts.iter().filter_map(|r| r.rewards.as_ref().map(|b| (r.index, b))).collect();
        let breakdowns: Vec<RewardBreakdown> = scored.iter().map(|(_, b)| (*b).clone()).collect();
        let table = group_credit(&breakdowns, c);
        let (objective, generated_tokens, token_advantages) = match batches.get(&g.sample_id) {
            Some(rec) => {
                let adv = broadcast_to_tokens(&table, &rec.batch).with_context(|| format!("sample {}", g.sample_id))?;
                let obj = grpo_objective(&rec.batch, &adv, c).with_context(|| format!("sample {}", g.sample_id))?;
                (Some(obj.value), Some(obj.generated_tokens), Some(adv))
            }
            None if tokens.is_some() => bail!("token file has no batch for sample {}", g.sample_id),
            None => (None, None, None),
        };
        let rec = CreditRecord {
            sample_id: g.sample_id.clone(),
            mode: c.mode,
            lambda: c.lambda,
            rollouts: scored.iter().map(|(i, _)| *i).collect(),
            baseline: table.baseline,
            std: table.std,
            pool_size: table.pool_size,
            returns: table.returns,
            advantages: table.advantages,
            objective,
            generated_tokens,
            token_advantages,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(g: &Global, cfg: &EvalConfig, paths: &[PathBuf], args: &PolicyArgs, out: Option<PathBuf>, json: bool) -> Result<()> {
    let mut loaded = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        loaded.push((name, load_dataset(p)?));
    }
    let sets: Vec<Dataset<'_>> = loaded.iter().map(|(n, s)| Dataset { name: n, samples: s }).collect();
    let factory = policies(args, cfg, true)?;
    let source = executors(g, cfg)?;
    let report = evaluate_suite(&sets, factory.as_ref(), source.as_ref(), cfg, &WhitespaceTokens)?;
    if let Some(p) = &out {
        std::fs::write(p, report.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    let mut stdout = std::io::stdout().lock();
    if json {
        writeln!(stdout, "{}", report.to_json())?;
    } else {
        write!(stdout, "{}", report.to_text())?;
    }
    Ok(())
}
