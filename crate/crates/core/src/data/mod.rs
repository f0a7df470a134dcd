//! Corpus loading, vocabularies, dialogue history and batching.

pub mod batch;
pub mod conll;
pub mod corpus;
pub mod synth;
pub mod vocab;

pub use batch::{make_batches, Batch, Example};
pub use conll::{parse_conll, read_conll};
pub use corpus::{
    load_corpus, load_split, read_raw, to_sessions, tokenize, write_corpus, write_raw, Corpus, CorpusFormat,
    DialogueSession, HistoryBundle, HistorySource, Prediction, RawDialogue, RawTurn, ResultToken,
    Turn,
};
pub use vocab::{parse_slot, Iob, LabelSets, Vocab, CLS, PAD, UNK};
