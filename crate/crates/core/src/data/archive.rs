//! Feature archives, transcript files and the corpus manifest.
//!
//! Feature archive, all integers little-endian:
//! `b"HCFA"`, `u32` version, `u32` count, then per utterance
//! `u32` id length, id bytes (UTF-8), `u32` lang length, lang bytes,
//! `u32` T, `u32` D, and `T * D` `f64` values in row-major order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"HCFA";
pub const FEATURE_VERSION: u32 = 1;

// corrupt headers must not trigger huge allocations
const MAX_STRING: usize = 1 << 16;
const MAX_VALUES: usize = 1 << 28;

fn write_u32(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::TooLarge(format!("{what} = {v}")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len(), "string length")?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)?;
    if n > MAX_STRING {
        return Err(Error::Data(format!("string of {n} bytes in archive header")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_features(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    write_u32(&mut w, utts.len(), "utterance count")?;
    for u in utts {
        write_str(&mut w, &u.id)?;
        write_str(&mut w, &u.lang)?;
        let (t, d) = u.features.dims2("features")?;
        write_u32(&mut w, t, "frames")?;
        write_u32(&mut w, d, "dim")?;
        for v in u.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an archive; transcripts are left empty.
pub fn read_features(path: &Path) -> Result<Vec<Utterance>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Data(format!("{}: not a feature archive", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION as usize {
        return Err(Error::Data(format!("{}: unsupported archive version {version}", path.display())));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = read_str(&mut r)?;
        let lang = read_str(&mut r)?;
        let t = read_u32(&mut r)?;
        let d = read_u32(&mut r)?;
        if t == 0 || d == 0 || t.saturating_mul(d) > MAX_VALUES {
            return Err(Error::Data(format!("{id}: bad feature shape {t}x{d}")));
        }
        let mut buf = vec![0u8; t * d * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Utterance { id, lang, features: Tensor::new(vec![t, d], data)?, transcript: String::new() });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Data(format!("{}: trailing bytes after {count} utterances", path.display())));
    }
    Ok(out)
}

/// One `id<TAB>transcript` line per entry.
pub fn write_transcripts<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, text) in entries {
        if id.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
            return Err(Error::Data(format!("{id}: tab or newline inside a transcript field")));
        }
        writeln!(w, "{id}\t{text}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `id<TAB>transcript` lines, keeping file order. Duplicate ids are
/// an error.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: missing tab", path.display(), n + 1)))?;
        if seen.insert(id.to_string(), n).is_some() {
            return Err(Error::Data(format!("{}:{}: duplicate id {id}", path.display(), n + 1)));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn split_paths(dir: &Path, lang: &str, split: &str) -> (PathBuf, PathBuf) {
    let base = dir.join(lang);
    (base.join(format!("{split}.feats")), base.join(format!("{split}.txt")))
}

/// Writes `<dir>/<lang>/<split>.feats` and `<dir>/<lang>/<split>.txt`.
pub fn write_split(dir: &Path, lang: &str, split: &str, utts: &[Utterance]) -> Result<()> {
    let (feats, text) = split_paths(dir, lang, split);
    fs::create_dir_all(dir.join(lang))?;
    write_features(&feats, utts)?;
    write_transcripts(&text, utts.iter().map(|u| (u.id.as_str(), u.transcript.as_str())))
}

/// Reads a split and joins features with transcripts by id.
pub fn read_split(dir: &Path, lang: &str, split: &str) -> Result<Vec<Utterance>> {
    let (feats, text) = split_paths(dir, lang, split);
    let mut utts = read_features(&feats)?;
    let mut texts: HashMap<String, String> = read_transcripts(&text)?.into_iter().collect();
    for u in &mut utts {
        u.transcript = texts
            .remove(&u.id)
            .ok_or_else(|| Error::Data(format!("{}: no transcript for {}", text.display(), u.id)))?;
    }
    if let Some(id) = texts.keys().next() {
        return Err(Error::Data(format!("{}: transcript {id} has no features", text.display())));
    }
    Ok(utts)
}

/// A language listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub name: String,
    pub target: bool,
    pub inventory: String,
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

/// `manifest.toml` at the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub dim: usize,
    /// Union grapheme inventory, space included, sorted.
    pub vocabulary: String,
    pub languages: Vec<LanguageEntry>,
}

impl Manifest {
    pub fn target(&self) -> Result<&LanguageEntry> {
        let mut it = self.languages.iter().filter(|l| l.target);
        match (it.next(), it.next()) {
            (Some(t), None) => Ok(t),
            _ => Err(Error::Data("manifest must list exactly one target language".into())),
        }
    }

    pub fn training_languages(&self) -> impl Iterator<Item = &LanguageEntry> {
        self.languages.iter().filter(|l| !l.target)
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes every corpus and `manifest.toml` under `dir`.
pub fn save_corpora(
    dir: &Path,
    seed: u64,
    vocab: &Vocabulary,
    corpora: &[Corpus],
    target: &str,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut languages = Vec::new();
    let mut dim = None;
    for c in corpora {
        for (split, utts) in [("train", &c.train), ("dev", &c.dev), ("eval", &c.eval)] {
            for u in utts.iter() {
                if *dim.get_or_insert(u.dim()) != u.dim() {
                    return Err(Error::Data(format!("{}: feature dim {} differs", u.id, u.dim())));
                }
            }
            write_split(dir, &c.lang, split, utts)?;
        }
        let inventory: BTreeSet<char> = c.all().flat_map(|u| u.transcript.chars()).collect();
        languages.push(LanguageEntry {
            name: c.lang.clone(),
            target: c.lang == target,
            inventory: inventory.into_iter().collect(),
            train: c.train.len(),
            dev: c.dev.len(),
            eval: c.eval.len(),
        });
    }
    let m = Manifest { seed, dim: dim.unwrap_or(0), vocabulary: vocab.to_text(), languages };
    m.target()?;
    write_manifest(&dir.join("manifest.toml"), &m)?;
    Ok(m)
}

/// Reads one language listed in a manifest back into a [`Corpus`]
/// (the lexicon is not stored and comes back empty).
pub fn load_corpus(dir: &Path, entry: &LanguageEntry) -> Result<Corpus> {
    let train = read_split(dir, &entry.name, "train")?;
    let dev = read_split(dir, &entry.name, "dev")?;
    let eval = read_split(dir, &entry.name, "eval")?;
    if (train.len(), dev.len(), eval.len()) != (entry.train, entry.dev, entry.eval) {
        return Err(Error::Data(format!("{}: split sizes differ from the manifest", entry.name)));
    }
    Ok(Corpus { lang: entry.name.clone(), lexicon: Vec::new(), train, dev, eval })
}
