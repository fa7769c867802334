use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{build_vocab, Vocabulary, SPACE};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Generative description of one synthetic language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    /// Graphemes used in words (space is implicit).
    pub inventory: String,
    pub lexicon_size: usize,
    /// Inclusive word length range, in graphemes.
    pub word_len: [usize; 2],
    /// Inclusive number of words per utterance.
    pub words_per_utt: [usize; 2],
    /// Inclusive number of frames each grapheme occupies.
    pub frames_per_grapheme: [usize; 2],
    pub noise: f64,
    pub dim: usize,
    /// Seed of the grapheme emission embeddings; languages sharing it share
    /// the embedding of every common grapheme.
    pub embedding_seed: u64,
}

impl SyntheticLanguageSpec {
    fn validate(&self) -> Result<()> {
        let range_ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if self.inventory.is_empty() || self.inventory.contains(SPACE) {
            return Err(Error::Config(format!("{}: inventory must be nonempty and exclude space", self.name)));
        }
        if !range_ok(self.word_len) || !range_ok(self.words_per_utt) || !range_ok(self.frames_per_grapheme) {
            return Err(Error::Config(format!("{}: ranges must satisfy 1 <= lo <= hi", self.name)));
        }
        if self.dim == 0 || self.lexicon_size == 0 {
            return Err(Error::Config(format!("{}: dim and lexicon_size must be positive", self.name)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("{}: noise must be finite and >= 0", self.name)));
        }
        Ok(())
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Emission mean of a grapheme: a standard normal vector determined only
/// by `(c, seed)`.
pub fn grapheme_embedding(c: char, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(c as u64)));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// A generated language split 80/10/10.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub lang: String,
    pub lexicon: Vec<String>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.dev).chain(&self.eval)
    }

    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "eval" => Some(&self.eval),
            _ => None,
        }
    }
}

fn sample_lexicon(spec: &SyntheticLanguageSpec, inv: &[char], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut lexicon = Vec::with_capacity(spec.lexicon_size);
    // the space of words may be smaller than the requested lexicon
    let mut attempts = 0;
    while lexicon.len() < spec.lexicon_size && attempts < spec.lexicon_size * 100 {
        attempts += 1;
        let len = rng.gen_range(spec.word_len[0]..=spec.word_len[1]);
        let w: String = (0..len).map(|_| inv[rng.gen_range(0..inv.len())]).collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    lexicon
}

/// Samples `n` utterances: words drawn from a per-language lexicon, each
/// grapheme rendered as 2-5 (configurable) noisy copies of its embedding.
pub fn generate_corpus(spec: &SyntheticLanguageSpec, n: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    let inv: Vec<char> = spec.inventory.chars().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = sample_lexicon(spec, &inv, &mut rng);

    let mut emb_chars = inv.clone();
    emb_chars.push(SPACE);
    let table: std::collections::HashMap<char, Vec<f64>> = emb_chars
        .iter()
        .map(|&c| (c, grapheme_embedding(c, spec.dim, spec.embedding_seed)))
        .collect();

    let mut utts = Vec::with_capacity(n);
    for i in 0..n {
        let nw = rng.gen_range(spec.words_per_utt[0]..=spec.words_per_utt[1]);
        let words: Vec<&str> = (0..nw).map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str()).collect();
        let transcript = words.join(" ");
        let mut data = Vec::new();
        let mut frames = 0;
        for c in transcript.chars() {
            let k = rng.gen_range(spec.frames_per_grapheme[0]..=spec.frames_per_grapheme[1]);
            for _ in 0..k {
                for &m in &table[&c] {
                    let eps: f64 = rng.sample(StandardNormal);
                    data.push(m + spec.noise * eps);
                }
                frames += 1;
            }
        }
        utts.push(Utterance {
            id: format!("{}_{:05}", spec.name, i),
            lang: spec.name.clone(),
            features: Tensor::new(vec![frames, spec.dim], data)?,
            transcript,
        });
    }
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let eval = utts.split_off(n_train + n_dev);
    let dev = utts.split_off(n_train);
    Ok(Corpus { lang: spec.name.clone(), lexicon, train: utts, dev, eval })
}

/// One language of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageDef {
    pub name: String,
    pub inventory: String,
    pub utterances: usize,
}

/// The multilingual setup: several training languages and one target,
/// sharing generative settings and emission embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    pub seed: u64,
    pub dim: usize,
    pub noise: f64,
    pub frames_per_grapheme: [usize; 2],
    pub word_len: [usize; 2],
    pub words_per_utt: [usize; 2],
    pub lexicon_size: usize,
    pub train_languages: Vec<LanguageDef>,
    pub target: LanguageDef,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        let core = "aeilmnorstu";
        let lang = |name: &str, extra: &str, utterances| LanguageDef {
            name: name.into(),
            inventory: format!("{core}{extra}"),
            utterances,
        };
        Self {
            seed: 1,
            dim: 20,
            noise: 1.0,
            frames_per_grapheme: [2, 5],
            word_len: [2, 5],
            words_per_utt: [2, 4],
            lexicon_size: 40,
            train_languages: vec![
                lang("lang1", "bcdk", 300),
                lang("lang2", "fghp", 300),
                lang("lang3", "bcjv", 300),
                lang("lang4", "dfwy", 300),
            ],
            target: lang("target", "bdgqz", 500),
        }
    }
}

impl SuiteSpec {
    pub fn languages(&self) -> impl Iterator<Item = &LanguageDef> {
        self.train_languages.iter().chain(std::iter::once(&self.target))
    }

    pub fn language_spec(&self, def: &LanguageDef) -> SyntheticLanguageSpec {
        SyntheticLanguageSpec {
            name: def.name.clone(),
            inventory: def.inventory.clone(),
            lexicon_size: self.lexicon_size,
            word_len: self.word_len,
            words_per_utt: self.words_per_utt,
            frames_per_grapheme: self.frames_per_grapheme,
            noise: self.noise,
            dim: self.dim,
            embedding_seed: self.seed,
        }
    }

    /// Seed of the `idx`-th language (training languages first, target last).
    pub fn language_seed(&self, idx: usize) -> u64 {
        mix(self.seed.wrapping_add(mix(idx as u64 + 1)))
    }

    /// Union vocabulary over every language, target included.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        build_vocab(self.languages().map(|l| &l.inventory))
    }

    /// All corpora, training languages first and the target last.
    pub fn generate(&self) -> Result<Vec<Corpus>> {
        let mut names = BTreeSet::new();
        for l in self.languages() {
            let path_safe = !l.name.is_empty()
                && l.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !path_safe {
                return Err(Error::Config(format!("language name {:?} must be [A-Za-z0-9_-]+", l.name)));
            }
            if !names.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate language name {}", l.name)));
            }
        }
        self.languages()
            .enumerate()
            .map(|(i, l)| generate_corpus(&self.language_spec(l), l.utterances, self.language_seed(i)))
            .collect()
    }
}
