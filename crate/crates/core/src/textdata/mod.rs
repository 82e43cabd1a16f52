//! Tokenization, catalogues, synthetic corpora and entity-context enumeration.

pub mod bpe;
pub mod catalogue;
pub mod contexts;
pub mod corpus;
pub mod synth;

pub use bpe::{train_bpe, Vocabulary, BOS, BOS_ID, PAD_ID, UNK_ID};
pub use catalogue::{sample_entity, Catalogue, CatalogueEntry};
pub use contexts::enumerate_entity_contexts;
pub use corpus::{
    generate_corpus, load_corpus, save_corpus, tokenize, tokenize_all, LabeledUtterance, Span, Template,
    TokenSpan, Utterance,
};
