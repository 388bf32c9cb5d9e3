//! Episode state and the turn driver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::retrieval::{execute, ActionCall, ExecOptions, Observation};

use super::answer::{extract_answer_set, AnswerSet};
use super::parse::{parse_message, ParsedTurn, TurnAction};
use super::prompt::{build_initial_prompt, PromptError};
use super::wrap::wrap_observation;

/// Runs retrieval calls against one sample's graph.
pub trait Executor {
    fn execute(&self, call: &ActionCall) -> Result<Observation, ExecutorError>;

    /// Graph used to flag answer entities as resolved, when locally available.
    fn resolution_graph(&self) -> Option<&KnowledgeGraph> {
        None
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("retrieval backend failed: {0}")]
pub struct ExecutorError(pub String);

pub struct GraphExecutor<'g> {
    graph: &'g KnowledgeGraph,
    opts: ExecOptions,
}

impl<'g> GraphExecutor<'g> {
    pub fn new(graph: &'g KnowledgeGraph, opts: ExecOptions) -> Self {
        Self { graph, opts }
    }
}

impl Executor for GraphExecutor<'_> {
    fn execute(&self, call: &ActionCall) -> Result<Observation, ExecutorError> {
        Ok(execute(self.graph, call, self.opts))
    }

    fn resolution_graph(&self) -> Option<&KnowledgeGraph> {
        Some(self.graph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Answered,
    /// Turn budget spent without an answer; the prediction is empty.
    BudgetExhausted,
    /// Context grew past the configured cap; the prediction is empty.
    ContextOverflow,
    /// The policy endpoint or retrieval backend failed; excluded from metrics.
    InfraFailed,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != Self::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TurnRecordRepr")]
pub struct TurnRecord {
    pub message: String,
    pub parsed: ParsedTurn,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
}

#[derive(Deserialize)]
struct TurnRecordRepr {
    message: String,
    #[serde(default)]
    parsed: Option<ParsedTurn>,
    #[serde(default)]
    observation: Option<Observation>,
}

impl From<TurnRecordRepr> for TurnRecord {
    fn from(r: TurnRecordRepr) -> Self {
        let parsed = r.parsed.unwrap_or_else(|| parse_message(&r.message));
        Self { message: r.message, parsed, observation: r.observation }
    }
}

impl TurnRecord {
    pub fn wrapped_observation(&self) -> Option<String> {
        self.observation.as_ref().map(wrap_observation)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdvanceError {
    #[error("episode already terminated ({0:?})")]
    Terminated(EpisodeStatus),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
}

/// One episode: the prompt, every completed turn, and the outcome.
///
/// Serialized as one JSON line. `parsed` may be omitted from hand-written
/// records and is rebuilt from `message`; `predicted` is rebuilt from the
/// last answer block when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectoryRepr")]
pub struct Trajectory {
    pub sample_id: String,
    pub question: String,
    pub prompt: String,
    pub max_turns: usize,
    pub turns: Vec<TurnRecord>,
    pub status: EpisodeStatus,
    pub predicted: Option<AnswerSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Deserialize)]
struct TrajectoryRepr {
    sample_id: String,
    #[serde(default)]
    question: String,
    #[serde(default)]
    prompt: String,
    max_turns: usize,
    turns: Vec<TurnRecord>,
    status: EpisodeStatus,
    #[serde(default)]
    predicted: Option<AnswerSet>,
    #[serde(default)]
    failure: Option<String>,
}

impl From<TrajectoryRepr> for Trajectory {
    fn from(r: TrajectoryRepr) -> Self {
        let predicted = r.predicted.or_else(|| match r.status {
            EpisodeStatus::Answered => {
                r.turns.last().and_then(|t| t.parsed.answer_text()).map(|a| extract_answer_set(a, None))
            }
            EpisodeStatus::BudgetExhausted | EpisodeStatus::ContextOverflow => Some(AnswerSet::empty()),
            _ => None,
        });
        Self {
            sample_id: r.sample_id,
            question: r.question,
            prompt: r.prompt,
            max_turns: r.max_turns,
            turns: r.turns,
            status: r.status,
            predicted,
            failure: r.failure,
        }
    }
}

impl Trajectory {
    pub fn start(
        sample_id: impl Into<String>,
        question: &str,
        max_turns: usize,
        server_instruction: &str,
    ) -> Result<Self, PromptError> {
        let prompt = build_initial_prompt(question, max_turns, server_instruction)?;
        Ok(Self {
            sample_id: sample_id.into(),
            question: question.to_owned(),
            prompt,
            max_turns,
            turns: Vec::new(),
            status: EpisodeStatus::Running,
            predicted: None,
            failure: None,
        })
    }

    /// 1-based index of the next turn.
    pub fn turn_index(&self) -> usize {
        self.turns.len() + 1
    }

    pub fn is_terminated(&self) -> bool {
        self.status.is_terminal()
    }

    pub fn retrieval_count(&self) -> usize {
        self.turns.iter().filter(|t| t.observation.is_some()).count()
    }

    /// Prompt followed by every message and wrapped observation, newline-joined.
    pub fn context(&self) -> String {
        let mut ctx = self.prompt.clone();
        for turn in &self.turns {
            ctx.push('\n');
            ctx.push_str(&turn.message);
            if let Some(w) = turn.wrapped_observation() {
                ctx.push('\n');
                ctx.push_str(&w);
            }
        }
        ctx
    }

    /// Consumes one agent message.
    ///
    /// A retrieval action is executed and its observation recorded; an answer
    /// terminates the episode. When the budget is spent without an answer the
    /// episode ends with an empty prediction.
    pub fn advance(&mut self, message: impl Into<String>, executor: &dyn Executor) -> Result<(), AdvanceError> {
        if self.is_terminated() {
            return Err(AdvanceError::Terminated(self.status));
        }
        let message = message.into();
        let parsed = parse_message(&message);
        let at_budget = self.turn_index() >= self.max_turns;
        match &parsed.action {
            Some(TurnAction::Answer { text }) => {
                self.predicted = Some(extract_answer_set(text, executor.resolution_graph()));
                self.status = EpisodeStatus::Answered;
                self.turns.push(TurnRecord { message, parsed, observation: None });
            }
            Some(TurnAction::Query { call }) => {
                let observation = match executor.execute(call) {
                    Ok(o) => o,
                    Err(e) => {
                        self.turns.push(TurnRecord { message, parsed, observation: None });
                        self.mark_failed(e.to_string());
                        return Err(e.into());
                    }
                };
                self.turns.push(TurnRecord { message, parsed, observation: Some(observation) });
                if at_budget {
                    self.exhaust(EpisodeStatus::BudgetExhausted);
                }
            }
            None => {
                self.turns.push(TurnRecord { message, parsed, observation: None });
                if at_budget {
                    self.exhaust(EpisodeStatus::BudgetExhausted);
                }
            }
        }
        Ok(())
    }

    fn exhaust(&mut self, status: EpisodeStatus) {
        self.status = status;
        self.predicted = Some(AnswerSet::empty());
    }

    /// Ends the episode because the context outgrew its cap.
    pub fn abort_overflow(&mut self, context_len: usize) {
        self.failure = Some(format!("context length {context_len} exceeds cap"));
        self.exhaust(EpisodeStatus::ContextOverflow);
    }

    pub fn mark_failed(&mut self, reason: impl Into<String>) {
        self.status = EpisodeStatus::InfraFailed;
        self.predicted = None;
        self.failure = Some(reason.into());
    }

    /// Characters and whitespace-separated tokens across all agent messages.
    pub fn generated_counts(&self) -> (usize, usize) {
        self.turns.iter().fold((0, 0), |(c, w), t| {
            (c + t.message.chars().count(), w + t.message.split_whitespace().count())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_triples, TripleFormat};
    use crate::protocol::SERVER_INSTRUCTION;
    use crate::retrieval::ErrorKind;

    fn fixture() -> KnowledgeGraph {
        let tsv = "Chicago\tlocated_in_state\tIllinois\nIllinois\tcapital\tSpringfield\n";
        load_triples(tsv.as_bytes(), TripleFormat::Tsv).unwrap()
    }

    fn start(h: usize) -> Trajectory {
        Trajectory::start("s1", "what is the capital of the state where chicago is", h, SERVER_INSTRUCTION).unwrap()
    }

    #[test]
    fn retrieval_turn_appends_observation() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut t = start(5);
        t.advance("<think>start</think><kg-query>get_tail_relations(\"Chicago\")</kg-query>", &exec).unwrap();
        assert_eq!(t.turn_index(), 2);
        assert!(!t.is_terminated());
        let obs = t.turns[0].observation.as_ref().unwrap();
        assert_eq!(obs.labels(), ["located_in_state"]);
        assert!(t.context().ends_with("<information>Tail relations for entity \"Chicago\": located_in_state</information>"));
    }

    #[test]
    fn answer_terminates() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut t = start(5);
        t.advance("<think>done</think><answer>Springfield</answer>", &exec).unwrap();
        assert_eq!(t.status, EpisodeStatus::Answered);
        let p = t.predicted.as_ref().unwrap();
        assert_eq!(p.first(), Some("springfield"));
        assert!(p.entities[0].resolved_in_kg);
        assert_eq!(
            t.advance("<think>more</think><answer>x</answer>", &exec),
            Err(AdvanceError::Terminated(EpisodeStatus::Answered))
        );
    }

    #[test]
    fn budget_one_query_then_safeguard() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut t = start(1);
        t.advance("<think>x</think><kg-query>get_tail_relations(Chicago)</kg-query>", &exec).unwrap();
        assert_eq!(t.turns.len(), 1);
        assert!(t.turns[0].observation.is_some());
        assert_eq!(t.status, EpisodeStatus::BudgetExhausted);
        assert!(t.predicted.as_ref().unwrap().is_empty());
    }

    #[test]
    fn turn_without_action_consumes_budget() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut t = start(2);
        t.advance("just rambling", &exec).unwrap();
        assert!(!t.is_terminated());
        assert!(t.turns[0].observation.is_none());
        t.advance("<think>x</think><kg-query>nonsense</kg-query>", &exec).unwrap();
        assert_eq!(t.turns[1].observation.as_ref().unwrap().error_kind(), Some(ErrorKind::InvalidAction));
        assert_eq!(t.status, EpisodeStatus::BudgetExhausted);
    }

    struct Broken;
    impl Executor for Broken {
        fn execute(&self, _: &ActionCall) -> Result<Observation, ExecutorError> {
            Err(ExecutorError("connection refused".into()))
        }
    }

    #[test]
    fn executor_failure_marks_episode() {
        let mut t = start(5);
        let err = t.advance("<think>x</think><kg-query>get_tail_relations(a)</kg-query>", &Broken).unwrap_err();
        assert!(matches!(err, AdvanceError::Executor(_)));
        assert_eq!(t.status, EpisodeStatus::InfraFailed);
    }

    #[test]
    fn deterministic_successor() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut a = start(5);
        let mut b = a.clone();
        let m = "<think>x</think><kg-query>get_tail_entities(Illinois, capital)</kg-query>";
        a.advance(m, &exec).unwrap();
        b.advance(m, &exec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_written_record_rehydrates() {
        let json = r#"{"sample_id":"s1","max_turns":5,"status":"answered",
            "turns":[{"message":"<think>x</think><kg-query>get_tail_relations(Chicago)</kg-query>",
                      "observation":{"status":"ok","labels":["located_in_state"],"text":"Tail relations for entity \"Chicago\": located_in_state"}},
                     {"message":"<think>y</think><answer>Springfield</answer>"}]}"#;
        let t: Trajectory = serde_json::from_str(json).unwrap();
        assert!(t.turns[0].parsed.format_valid);
        assert_eq!(t.predicted.unwrap().first(), Some("springfield"));
    }

    #[test]
    fn serialization_round_trip() {
        let g = fixture();
        let exec = GraphExecutor::new(&g, ExecOptions::default());
        let mut t = start(5);
        t.advance("<think>x</think><kg-query>get_tail_relations(Chicago)</kg-query>", &exec).unwrap();
        t.advance("<think>y</think><answer>Springfield</answer>", &exec).unwrap();
        let line = serde_json::to_string(&t).unwrap();
        let back: Trajectory = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
    }
}
