//! Vocabulary, synthetic corpora, on-disk formats and error-rate scoring.

mod archive;
mod metrics;
mod synth;
mod vocab;

pub use archive::{
    load_corpus, read_features, read_manifest, save_corpora, read_split, read_transcripts, write_features, write_manifest, write_split,
    write_transcripts, LanguageEntry, Manifest, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use metrics::{cer, edit_distance, wer, words, ErrorCounts};
pub use synth::{
    generate_corpus, grapheme_embedding, Corpus, LanguageDef, SuiteSpec, SyntheticLanguageSpec,
};
pub use vocab::{build_vocab, Vocabulary, BLANK_SYMBOL, EOS_SYMBOL, SPACE, UNK_SYMBOL};

use crate::nn::Tensor;

/// One utterance: `T x D` features plus its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lang: String,
    pub features: Tensor<f64>,
    pub transcript: String,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}
