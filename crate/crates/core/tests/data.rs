use std::fs;

use ctcatt::data::{
    build_vocab, cer, edit_distance, generate_corpus, grapheme_embedding, load_corpus, read_features, read_manifest,
    read_split, save_corpora, wer, write_features, write_transcripts, ErrorCounts, SuiteSpec, SyntheticLanguageSpec,
};
use ctcatt::Error;
use proptest::prelude::*;

fn lang_spec(noise: f64, frames: [usize; 2]) -> SyntheticLanguageSpec {
    SyntheticLanguageSpec {
        name: "xx".into(),
        inventory: "abcde".into(),
        lexicon_size: 20,
        word_len: [2, 4],
        words_per_utt: [1, 3],
        frames_per_grapheme: frames,
        noise,
        dim: 6,
        embedding_seed: 9,
    }
}

/// Full-matrix Levenshtein, written independently of the library version.
fn dp_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn vocabulary_is_union_plus_space() {
    let v = build_vocab(["abc", "bcd"].iter()).unwrap();
    assert_eq!(v.graphemes(), &[' ', 'a', 'b', 'c', 'd']);
    assert_eq!(build_vocab(["bcd", "abc"].iter()).unwrap(), v);
}

#[test]
fn suite_vocabulary_includes_target_only_graphemes() {
    let suite = SuiteSpec::default();
    let v = suite.vocabulary().unwrap();
    let trained: String = suite.train_languages.iter().map(|l| l.inventory.as_str()).collect();
    let only_target: Vec<char> = suite.target.inventory.chars().filter(|c| !trained.contains(*c)).collect();
    assert!(!only_target.is_empty());
    assert!(only_target.iter().all(|&c| v.contains(c)));
    for l in suite.languages() {
        assert!(l.inventory.chars().all(|c| v.contains(c)));
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = lang_spec(0.5, [2, 5]);
    let a = generate_corpus(&spec, 30, 4).unwrap();
    let b = generate_corpus(&spec, 30, 4).unwrap();
    let c = generate_corpus(&spec, 30, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    write_features(&dir.path().join("a"), &a.train).unwrap();
    write_features(&dir.path().join("b"), &b.train).unwrap();
    assert_eq!(fs::read(dir.path().join("a")).unwrap(), fs::read(dir.path().join("b")).unwrap());
}

#[test]
fn noiseless_single_frames_are_embedding_lookups() {
    let spec = lang_spec(0.0, [1, 1]);
    let corpus = generate_corpus(&spec, 20, 1).unwrap();
    let mut table: Vec<(char, Vec<f64>)> =
        "abcde ".chars().map(|c| (c, grapheme_embedding(c, spec.dim, spec.embedding_seed))).collect();
    table.sort_by(|x, y| x.0.cmp(&y.0));
    for u in corpus.all() {
        assert_eq!(u.frames(), u.transcript.chars().count());
        let decoded: String = (0..u.frames())
            .map(|t| {
                let row = u.features.row_slice(t);
                let dist = |e: &[f64]| row.iter().zip(e).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                table
                    .iter()
                    .min_by(|x, y| dist(&x.1).partial_cmp(&dist(&y.1)).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        assert_eq!(decoded, u.transcript);
    }
}

#[test]
fn mean_frames_per_grapheme_is_three_and_a_half() {
    let corpus = generate_corpus(&lang_spec(1.0, [2, 5]), 1000, 11).unwrap();
    let frames: usize = corpus.all().map(|u| u.frames()).sum();
    let chars: usize = corpus.all().map(|u| u.transcript.chars().count()).sum();
    let ratio = frames as f64 / chars as f64;
    assert!((ratio / 3.5 - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn split_is_eighty_ten_ten() {
    let c = generate_corpus(&lang_spec(1.0, [2, 5]), 400, 2).unwrap();
    assert_eq!((c.train.len(), c.dev.len(), c.eval.len()), (320, 40, 40));
    let c = generate_corpus(&lang_spec(1.0, [2, 5]), 500, 2).unwrap();
    assert_eq!((c.train.len(), c.dev.len(), c.eval.len()), (400, 50, 50));
}

#[test]
fn shared_graphemes_share_embeddings_across_languages() {
    let mut a = lang_spec(0.0, [1, 1]);
    a.inventory = "ab".into();
    let mut b = a.clone();
    b.name = "yy".into();
    b.inventory = "bc".into();
    let ca = generate_corpus(&a, 30, 1).unwrap();
    let cb = generate_corpus(&b, 30, 2).unwrap();
    let frame_of = |c: &ctcatt::data::Corpus, g: char| {
        c.all()
            .find_map(|u| u.transcript.chars().position(|x| x == g).map(|t| u.features.row_slice(t).to_vec()))
            .unwrap()
    };
    assert_eq!(frame_of(&ca, 'b'), frame_of(&cb, 'b'));
    assert_eq!(frame_of(&ca, ' '), frame_of(&cb, ' '));
}

#[test]
fn invalid_specs_rejected() {
    let mut s = lang_spec(1.0, [3, 2]);
    assert!(matches!(generate_corpus(&s, 10, 1), Err(Error::Config(_))));
    s.frames_per_grapheme = [2, 5];
    assert!(generate_corpus(&s, 0, 1).is_err());
    s.inventory = "a b".into();
    assert!(generate_corpus(&s, 10, 1).is_err());
    let mut suite = SuiteSpec::default();
    suite.target.name = "lang1".into();
    assert!(suite.generate().is_err());
}

#[test]
fn archive_roundtrip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&lang_spec(0.7, [2, 5]), 20, 3).unwrap();
    let p1 = dir.path().join("one.feats");
    let p2 = dir.path().join("two.feats");
    write_features(&p1, &corpus.train).unwrap();
    let back = read_features(&p1).unwrap();
    assert_eq!(back.len(), corpus.train.len());
    for (x, y) in back.iter().zip(&corpus.train) {
        assert_eq!((&x.id, &x.lang, &x.features), (&y.id, &y.lang, &y.features));
    }
    write_features(&p2, &back).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let mut bytes = fs::read(&p1).unwrap();
    bytes[0] = b'X';
    fs::write(&p2, &bytes).unwrap();
    assert!(matches!(read_features(&p2), Err(Error::Data(_))));
    let bytes = fs::read(&p1).unwrap();
    fs::write(&p2, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_features(&p2).is_err());
}

#[test]
fn suite_saves_and_loads_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut suite = SuiteSpec::default();
    for l in suite.train_languages.iter_mut() {
        l.utterances = 10;
    }
    suite.target.utterances = 20;
    let corpora = suite.generate().unwrap();
    let vocab = suite.vocabulary().unwrap();
    let m = save_corpora(dir.path(), suite.seed, &vocab, &corpora, &suite.target.name).unwrap();
    let back = read_manifest(&dir.path().join("manifest.toml")).unwrap();
    assert_eq!(m, back);
    assert_eq!(back.languages.len(), 5);
    assert_eq!(back.target().unwrap().name, "target");
    assert_eq!(back.training_languages().count(), 4);
    let loaded = load_corpus(dir.path(), back.target().unwrap()).unwrap();
    assert_eq!(loaded.train, corpora[4].train);
    assert_eq!(loaded.eval, corpora[4].eval);

    // a transcript without features is a data error
    write_transcripts(&dir.path().join("target/dev.txt"), [("ghost", "ab")]).unwrap();
    assert!(matches!(read_split(dir.path(), "target", "dev"), Err(Error::Data(_))));
}

#[test]
fn metric_examples() {
    assert_eq!(cer("abcd", "abcd").unwrap(), 0.0);
    assert_eq!(cer("", "abcd").unwrap(), 100.0);
    assert_eq!(cer("abcd", "abed").unwrap(), 25.0);
    assert_eq!(wer("ab cd", "ab cd").unwrap(), 0.0);
    assert_eq!(wer("ab xx", "ab cd").unwrap(), 50.0);
    assert_eq!(wer("ab cd x", "ab cd").unwrap(), 50.0);
    assert!(matches!(cer("a", ""), Err(Error::Empty(_))));
    assert!(wer("a", "   ").is_err());
}

#[test]
fn corpus_rate_is_edit_sum_ratio() {
    let pairs = [("a", "ab"), ("abcd", "abcd")];
    let total: ErrorCounts = pairs.iter().map(|(h, r)| ErrorCounts::chars(h, r)).sum();
    assert_eq!(total, ErrorCounts { edits: 1, ref_len: 6 });
    assert!((total.rate().unwrap() - 100.0 / 6.0).abs() < 1e-12);
    // the mean of per-utterance rates would be 25
}

fn small_string() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('c'), Just(' ')], 0..12)
        .prop_map(|v| v.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn edit_distance_matches_dp_oracle(a in small_string(), b in small_string()) {
        let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(edit_distance(&x, &y), dp_oracle(&x, &y));
    }

    #[test]
    fn edit_distance_is_symmetric(a in small_string(), b in small_string()) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let lhs = cer(&a, &b).unwrap() * b.chars().count() as f64;
        let rhs = cer(&b, &a).unwrap() * a.chars().count() as f64;
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn edit_distance_triangle(a in small_string(), b in small_string(), c in small_string()) {
        let (x, y, z): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
        prop_assert!(edit_distance(&x, &z) <= edit_distance(&x, &y) + edit_distance(&y, &z));
        let (wx, wy, wz) = (ctcatt::data::words(&a), ctcatt::data::words(&b), ctcatt::data::words(&c));
        prop_assert!(edit_distance(&wx, &wz) <= edit_distance(&wx, &wy) + edit_distance(&wy, &wz));
    }
}
