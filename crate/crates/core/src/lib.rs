//! Vocabulary transplant toolkit: subword vocabularies, embedding transfer,
//! corpus statistics and a small masked-language-model trainer.

pub mod bpe;
pub mod corpus_stats;
pub mod model_io;
pub mod toy_mlm;
pub mod vocab_transfer;
