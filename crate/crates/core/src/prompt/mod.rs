//! Dual-context prompts: domain-shared learnable context tokens and
//! class-specific tokens initialized from LLM-written descriptions, the
//! shared single-head attention adapter, and a frozen toy text encoder.

mod attention;
mod bank;
mod descriptions;
mod encoder;
mod tokens;

pub use attention::{attention_backward, attention_forward, AttentionGrads, AttentionParams};
pub use bank::{
    build_class_embeddings, BankGrads, ClassEmbeddings, ClassInit, ClassPrompts, ModelConfig, ParamGroup, PromptBank,
    Trainable,
};
pub use descriptions::{
    load_description_manifest, parse_descriptions, render_system_prompt, DescriptionFile, DescriptionManifest,
    EXPECTED_DESCRIPTIONS, SYSTEM_PROMPT,
};
pub use encoder::{encode_prompt, FrozenEncoder};
pub use tokens::{class_word, embed_word, tokenize, words};
