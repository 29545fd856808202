//! Likelihood-based multiple-choice evaluation, response perplexity and
//! decoding.

mod fewshot;
mod generate;
mod report;
mod scoring;

pub use fewshot::{
    assemble_fewshot_prompt, choice_continuation, load_choice_tasks, ChoiceTask, FewShotSpec,
    TaskFormat,
};
pub use generate::{apply_repetition_penalty, generate, Generation, GenerationParams};
pub use report::{
    corpus_perplexity, evaluate_choice_tasks, load_perplexity_items, ChoiceEvalReport, EvalReport,
    OverflowCounts, PerplexityItem, PerplexityReport,
};
pub use scoring::{
    argmax_lowest, classify_by_likelihood, response_nll, response_perplexity, score_continuation,
    Classification, Score, ScoringMode,
};
