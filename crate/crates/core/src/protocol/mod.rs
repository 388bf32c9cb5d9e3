//! Multi-turn dialogue grammar: prompt, message parsing, observation
//! wrapping, answer extraction and the episode driver.

mod answer;
mod episode;
mod parse;
mod prompt;
mod wrap;

pub use answer::{extract_answer_set, normalize, AnswerEntity, AnswerSet};
pub use episode::{AdvanceError, EpisodeStatus, Executor, ExecutorError, GraphExecutor, Trajectory, TurnRecord};
pub use parse::{parse_call, parse_message, ParsedTurn, TurnAction, Violation};
pub use prompt::{build_initial_prompt, PromptError, SERVER_INSTRUCTION};
pub use wrap::wrap_observation;
