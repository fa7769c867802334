//! Experiment configuration and the transfer sweep: a multilingual prior,
//! then monolingual / stage-1 / stage-2 (optionally with LM fusion) per
//! target subset size.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, read_manifest, Corpus, ErrorCounts, SuiteSpec, Utterance, Vocabulary};
use crate::decode::{joint_beam_search, DecodeConfig, Hypothesis, LmScorer};
use crate::error::{Error, Result};
use crate::lm::{lm_train, CharRnnLm, LmTrainConfig};
use crate::model::{HybridModel, ModelArch};
use crate::train::{train_stage, EpochReport, Stage, TrainConfig, TrainOutcome};

/// Settings of the subset-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Target training utterances per condition, taken from the front of
    /// the target train split.
    pub subset_sizes: Vec<usize>,
    /// Candidate LM weights, picked per size by dev WER.
    pub lm_weights: Vec<f64>,
    pub with_lm: bool,
    /// Stage-0 epoch used as the prior; the best dev epoch when absent.
    pub prior_epoch: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { subset_sizes: vec![50, 100, 200, 400], lm_weights: vec![0.1, 0.3, 0.5], with_lm: false, prior_epoch: None }
    }
}

/// The whole experiment as one TOML document. Section seeds are derived
/// from the top-level `seed` by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Corpus directory written by `gen`; generated in memory from
    /// `suite` when absent.
    pub data_dir: Option<PathBuf>,
    pub suite: SuiteSpec,
    pub model: ModelArch,
    pub stage0: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub monolingual: TrainConfig,
    pub decode: DecodeConfig,
    pub lm: LmTrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data_dir: None,
            suite: SuiteSpec::default(),
            model: ModelArch::default(),
            stage0: TrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            monolingual: TrainConfig::default(),
            decode: DecodeConfig::default(),
            lm: LmTrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

// 63 bits so the resolved config stays representable in TOML
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        self.model.validate()?;
        for t in [&self.stage0, &self.stage1, &self.stage2, &self.monolingual] {
            t.validate()?;
        }
        self.decode.validate()?;
        if self.sweep.subset_sizes.is_empty() || self.sweep.subset_sizes.contains(&0) {
            return Err(Error::Config("sweep.subset_sizes must be non-empty and positive".into()));
        }
        if self.sweep.lm_weights.is_empty() || self.sweep.lm_weights.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("sweep.lm_weights must be non-empty, finite and >= 0".into()));
        }
        if self.sweep.prior_epoch == Some(0) || self.sweep.prior_epoch.is_some_and(|e| e > self.stage0.epochs) {
            return Err(Error::Config(format!("sweep.prior_epoch must be in 1..={}", self.stage0.epochs)));
        }
        if self.model.input_dim != self.suite.dim && self.data_dir.is_none() {
            return Err(Error::Config(format!(
                "model.input_dim {} differs from suite.dim {}",
                self.model.input_dim, self.suite.dim
            )));
        }
        Ok(())
    }

    /// Copy with every section seed derived from the top-level seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.suite.seed = self.seed;
        c.stage0.seed = derive_seed(self.seed, 1);
        c.stage1.seed = derive_seed(self.seed, 2);
        c.stage2.seed = derive_seed(self.seed, 3);
        c.monolingual.seed = derive_seed(self.seed, 4);
        c.lm.seed = derive_seed(self.seed, 5);
        c
    }

    /// Seed for freshly initialized models (prior and monolingual).
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 6)
    }

    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Stage0 => &self.stage0,
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
        }
    }
}

/// Training languages and the target, sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct SuiteData {
    pub vocab: Vocabulary,
    pub training: Vec<Corpus>,
    pub target: Corpus,
}

impl SuiteData {
    pub fn generate(suite: &SuiteSpec) -> Result<Self> {
        let mut corpora = suite.generate()?;
        let target = corpora.pop().expect("the suite always has a target");
        Ok(Self { vocab: suite.vocabulary()?, training: corpora, target })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(&dir.join("manifest.toml"))?;
        let vocab = Vocabulary::from_text(&m.vocabulary)?;
        let training = m.training_languages().map(|e| load_corpus(dir, e)).collect::<Result<Vec<_>>>()?;
        let target = load_corpus(dir, m.target()?)?;
        Ok(Self { vocab, training, target })
    }

    /// From `cfg.data_dir` when set, otherwise generated from `cfg.suite`.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => Self::load(dir),
            None => Self::generate(&cfg.suite),
        }
    }

    pub fn pooled(&self, split: &str) -> Vec<&Utterance> {
        self.training.iter().flat_map(|c| c.split(split).unwrap_or(&[])).collect()
    }

    /// The first `n` target training utterances.
    pub fn target_subset(&self, n: usize) -> Result<Vec<&Utterance>> {
        if n > self.target.train.len() {
            return Err(Error::Config(format!(
                "subset of {n} utterances, target has {} training utterances",
                self.target.train.len()
            )));
        }
        Ok(self.target.train[..n].iter().collect())
    }
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub text: String,
    pub hyp: Hypothesis,
    pub unfinished: bool,
}

pub const HYPOTHESIS_HEADER: &str = "id\ttext\tscore\tscore_att\tscore_ctc\tscore_lm\tfinished";

/// Tab-separated hypothesis file with a header line.
pub fn format_hypotheses(decoded: &[Decoded]) -> String {
    let mut out = String::from(HYPOTHESIS_HEADER);
    out.push('\n');
    for d in decoded {
        let h = &d.hyp;
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            d.id, d.text, h.score, h.score_att, h.score_ctc, h.score_lm, !d.unfinished
        );
    }
    out
}

/// `(id, text)` pairs from a hypothesis file.
pub fn parse_hypotheses(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HYPOTHESIS_HEADER => {}
        _ => return Err(Error::Data(format!("hypothesis file must start with {HYPOTHESIS_HEADER:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::Data(format!("hypothesis line {}: expected 7 fields, got {}", i + 2, fields.len())));
            }
            Ok((fields[0].to_string(), fields[1].to_string()))
        })
        .collect()
}

pub fn decode_set(
    model: &HybridModel,
    lm: Option<&dyn LmScorer>,
    utts: &[&Utterance],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    utts.iter()
        .map(|u| {
            let r = joint_beam_search(model, lm, &u.features, cfg)?;
            if r.unfinished {
                log::warn!("{}: no hypothesis ended within the length limit", u.id);
            }
            let hyp = r.best().clone();
            Ok(Decoded { id: u.id.clone(), text: model.vocab.decode(&hyp.labels)?, hyp, unfinished: r.unfinished })
        })
        .collect()
}

/// Corpus-level `(cer, wer)` of hypotheses against their references, in
/// the same order.
pub fn score_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(f64, f64)> {
    let (mut c, mut w) = (ErrorCounts::default(), ErrorCounts::default());
    for (hyp, reference) in pairs {
        c += ErrorCounts::chars(hyp, reference);
        w += ErrorCounts::words(hyp, reference);
    }
    Ok((c.rate()?, w.rate()?))
}

fn score_decoded(decoded: &[Decoded], utts: &[&Utterance]) -> Result<(f64, f64)> {
    score_pairs(decoded.iter().zip(utts).map(|(d, u)| (d.text.as_str(), u.transcript.as_str())))
}

/// Experimental condition of one results row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Monolingual,
    Stage1,
    Stage2,
    Stage2Lm,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Self::Monolingual => "monolingual",
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
            Self::Stage2Lm => "stage2+lm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub size: usize,
    pub condition: Condition,
    pub cer: f64,
    pub wer: f64,
    /// LM weight used, for fused rows.
    pub lm_weight: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub prior: HybridModel,
    pub prior_epoch: usize,
    /// Stage-1 models per subset size, for freezing checks.
    pub stage1_models: Vec<(usize, HybridModel)>,
    pub lm: Option<CharRnnLm>,
}

impl SweepOutput {
    pub fn row(&self, size: usize, condition: Condition) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.size == size && r.condition == condition)
    }

    /// `size  stage  cer  wer` with a header line.
    pub fn to_tsv(&self) -> String {
        results_tsv(&self.rows)
    }
}

pub fn results_tsv(rows: &[ResultRow]) -> String {
    let mut out = String::from("size\tstage\tcer\twer\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{:.2}\t{:.2}", r.size, r.condition.name(), r.cer, r.wer);
    }
    out
}

/// Trains the multilingual prior on the pooled training languages and
/// returns the selected epoch's model.
pub fn train_prior(
    cfg: &ExperimentConfig,
    data: &SuiteData,
    mut on_epoch: impl FnMut(&EpochReport, &HybridModel) -> Result<()>,
) -> Result<(HybridModel, usize, TrainOutcome)> {
    let model = HybridModel::new(cfg.model.clone(), data.vocab.clone(), cfg.init_seed())?;
    let mut picked = None;
    let outcome = train_stage(model, Stage::Stage0, &cfg.stage0, &data.pooled("train"), &data.pooled("dev"), |r, m| {
        if Some(r.epoch) == cfg.sweep.prior_epoch {
            picked = Some(m.clone());
        }
        on_epoch(r, m)
    })?;
    match picked {
        Some(m) => Ok((m, cfg.sweep.prior_epoch.expect("picked only when set"), outcome)),
        None => Ok((outcome.best.clone(), outcome.best_epoch, outcome)),
    }
}

/// Runs the whole sweep: prior, then per size a monolingual baseline,
/// stage 1 and stage 2 from the prior, and stage 2 with LM fusion when
/// enabled. Models are chosen by best dev accuracy and scored on the
/// target eval split.
pub fn run_sweep(cfg: &ExperimentConfig, data: &SuiteData, mut progress: impl FnMut(&str)) -> Result<SweepOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let max = *cfg.sweep.subset_sizes.iter().max().expect("validated non-empty");
    data.target_subset(max)?;
    let dev: Vec<&Utterance> = data.target.dev.iter().collect();
    let eval: Vec<&Utterance> = data.target.eval.iter().collect();

    let (prior, prior_epoch, _) = train_prior(&cfg, data, |r, _| {
        progress(&format!("prior epoch {}: dev accuracy {:.4}", r.epoch, r.dev_accuracy));
        Ok(())
    })?;
    info!("prior: epoch {prior_epoch}");

    let lm = if cfg.sweep.with_lm {
        let texts = |u: &[Utterance]| u.iter().map(|u| u.transcript.clone()).collect::<Vec<_>>();
        let (lm, hist) = lm_train(&texts(&data.target.train), &texts(&data.target.dev), &data.vocab, &cfg.lm)?;
        if let Some(last) = hist.last() {
            progress(&format!("lm: dev perplexity {:.4}", last.dev_perplexity));
        }
        Some(lm)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut stage1_models = Vec::new();
    let plain = DecodeConfig { beta: 0.0, ..cfg.decode.clone() };
    for &size in &cfg.sweep.subset_sizes {
        let subset = data.target_subset(size)?;

        let fresh = HybridModel::new(cfg.model.clone(), data.vocab.clone(), cfg.init_seed())?;
        let mono = train_stage(fresh, Stage::Stage0, &cfg.monolingual, &subset, &dev, |_, _| Ok(()))?.best;
        let s1 = train_stage(prior.clone(), Stage::Stage1, &cfg.stage1, &subset, &dev, |_, _| Ok(()))?.best;
        let s2 = train_stage(s1.clone(), Stage::Stage2, &cfg.stage2, &subset, &dev, |_, _| Ok(()))?.best;

        for (condition, model) in [(Condition::Monolingual, &mono), (Condition::Stage1, &s1), (Condition::Stage2, &s2)] {
            let (cer, wer) = score_decoded(&decode_set(model, None, &eval, &plain)?, &eval)?;
            progress(&format!("size {size} {}: cer {cer:.2} wer {wer:.2}", condition.name()));
            rows.push(ResultRow { size, condition, cer, wer, lm_weight: None });
        }
        if let Some(lm) = &lm {
            let mut best: Option<(f64, f64)> = None;
            for &beta in &cfg.sweep.lm_weights {
                let dc = DecodeConfig { beta, ..plain.clone() };
                let (_, dev_wer) = score_decoded(&decode_set(&s2, Some(lm), &dev, &dc)?, &dev)?;
                if best.map_or(true, |(_, w)| dev_wer < w) {
                    best = Some((beta, dev_wer));
                }
            }
            let (beta, _) = best.expect("validated non-empty weights");
            let dc = DecodeConfig { beta, ..plain.clone() };
            let (cer, wer) = score_decoded(&decode_set(&s2, Some(lm), &eval, &dc)?, &eval)?;
            progress(&format!("size {size} stage2+lm (weight {beta}): cer {cer:.2} wer {wer:.2}"));
            rows.push(ResultRow { size, condition: Condition::Stage2Lm, cer, wer, lm_weight: Some(beta) });
        }
        stage1_models.push((size, s1));
    }
    Ok(SweepOutput { rows, prior, prior_epoch, stage1_models, lm })
}
