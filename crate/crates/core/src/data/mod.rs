//! Instruction records, tokenization and prompt rendering.

mod convert;
mod record;
mod template;
mod tokenizer;

pub use convert::{
    ConversionTemplates, QaPair, TypoPair, DEFAULT_QA_INSTRUCTION, DEFAULT_TYPO_INSTRUCTION,
};
pub use record::{
    dataset_stats, filter_by_category, load_records, parse_records, write_records, Category,
    DatasetManifest, InstructionRecord,
};
pub use template::{
    render_prompt, PromptFormat, PromptTemplate, PromptVersion, TemplateKind, HEADER_NO_INPUT,
    HEADER_V03_NO_INPUT, HEADER_V03_WITH_INPUT, HEADER_WITH_INPUT,
};
pub use tokenizer::{ByteTokenizer, TokenSequence, BOS, EOS, PAD, VOCAB_SIZE};
