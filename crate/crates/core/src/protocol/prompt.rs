use thiserror::Error;

/// Instruction block describing the retrieval functions to the agent.
pub const SERVER_INSTRUCTION: &str = "If you encounter a KG-related error, read the error message carefully and correct your query.\n\
Use exactly these query functions:\n\
- get_tail_relations(entity) : Returns relations where the entity is the subject/head.\n\
- get_head_relations(entity) : Returns relations where the entity is the object/tail.\n\
- get_tail_entities(entity, relation) : Returns entities connected to the given entity by the specified relation.\n\
- get_head_entities(entity, relation) : Returns entities from which the given entity is connected by the specified relation.";

const TEMPLATE_HEAD: &str = "You are a helpful assistant. Answer the given question. \
You can query from knowledge base provided to you to answer the question. \
You can query knowledge up to {H} times. \
You must first conduct reasoning inside <think>...</think>. \
If you need to query knowledge, you can set a query statement between <kg-query>...</kg-query> to query from knowledge base after <think>...</think>. \
When you have the final answer, you can output the answer inside <answer>...</answer>.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("turn budget must be at least 1")]
    ZeroBudget,
}

/// Renders the instruction prompt. Substitution is literal.
pub fn build_initial_prompt(question: &str, max_turns: usize, server_instruction: &str) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    if max_turns == 0 {
        return Err(PromptError::ZeroBudget);
    }
    Ok(format!(
        "{}\nKG Query Server Instruction: {server_instruction}\nQuestion: {question}.\nAssistant:",
        TEMPLATE_HEAD.replace("{H}", &max_turns.to_string())
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ActionKind;

    #[test]
    fn substitutes_budget_and_lists_functions() {
        let p = build_initial_prompt("what does jamaican people speak", 5, SERVER_INSTRUCTION).unwrap();
        assert!(p.contains("up to 5 times"));
        for kind in ActionKind::ALL {
            assert!(p.contains(kind.name()), "{kind}");
        }
        assert!(p.contains("Question: what does jamaican people speak."));
        assert!(p.ends_with("Assistant:"));
        assert_eq!(p, build_initial_prompt("what does jamaican people speak", 5, SERVER_INSTRUCTION).unwrap());
    }

    #[test]
    fn literal_budget_one() {
        assert!(build_initial_prompt("q", 1, SERVER_INSTRUCTION).unwrap().contains("up to 1 times"));
    }

    #[test]
    fn rejects_empty_question() {
        assert_eq!(build_initial_prompt("  ", 5, SERVER_INSTRUCTION), Err(PromptError::EmptyQuestion));
        assert_eq!(build_initial_prompt("q", 0, SERVER_INSTRUCTION), Err(PromptError::ZeroBudget));
    }
}
