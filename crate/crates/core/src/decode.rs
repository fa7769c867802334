//! Label-synchronous joint CTC/attention beam search with optional
//! shallow fusion of a character language model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBranch, DecoderSnapshot};
use crate::ctc::{ctc_prefix_scores_all, greedy_decode, PrefixState};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::lm::{CharRnnLm, LmState};
use crate::model::{HybridModel, ATTENTION_GROUP};
use crate::nn::{argmax, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// CTC weight in `[0, 1]`; attention gets `1 - alpha`.
    pub alpha: f64,
    /// LM weight, `>= 0`; zero disables fusion.
    pub beta: f64,
    /// Maximum number of search steps as a fraction of encoded frames.
    pub max_len_ratio: f64,
    /// Stop once no live hypothesis can still enter the finished pool.
    /// Exact when every score increment is `<= 0`, which holds for
    /// normalized models.
    pub early_stop: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 20, alpha: 0.3, beta: 0.0, max_len_ratio: 1.0, early_stop: true }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("ctc weight {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("lm weight {} must be finite and >= 0", self.beta)));
        }
        if !(self.max_len_ratio > 0.0 && self.max_len_ratio.is_finite()) {
            return Err(Error::Config(format!("max_len_ratio {} must be positive", self.max_len_ratio)));
        }
        Ok(())
    }

    /// Number of search steps for `frames` encoded frames.
    pub fn max_len(&self, frames: usize) -> usize {
        ((self.max_len_ratio * frames as f64).floor() as usize).max(1)
    }
}

/// `(1 - alpha) * att + alpha * ctc + beta * lm`. A term whose weight is
/// zero is left out entirely, so an infinite component cannot turn into
/// NaN.
pub fn fused_score(score_att: f64, score_ctc: f64, score_lm: f64, cfg: &DecodeConfig) -> f64 {
    let mut s = 0.0;
    if cfg.alpha < 1.0 {
        s += (1.0 - cfg.alpha) * score_att;
    }
    if cfg.alpha > 0.0 {
        s += cfg.alpha * score_ctc;
    }
    if cfg.beta > 0.0 {
        s += cfg.beta * score_lm;
    }
    s
}

/// Stepwise next-symbol scorer for shallow fusion. Ids follow the model
/// vocabulary: graphemes, then sos/eos at `num_graphemes`.
pub trait LmScorer {
    fn vocab(&self) -> &Vocabulary;
    fn initial_state(&self) -> LmState;
    /// Log-scores of every next symbol after consuming `c`.
    fn step(&self, state: &LmState, c: usize) -> Result<(Vec<f64>, LmState)>;
}

impl LmScorer for CharRnnLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn initial_state(&self) -> LmState {
        CharRnnLm::initial_state(self)
    }

    fn step(&self, state: &LmState, c: usize) -> Result<(Vec<f64>, LmState)> {
        CharRnnLm::step(self, state, c)
    }
}

/// One decoded sequence with its score breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub score: f64,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_lm: f64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Best first.
    pub hyps: Vec<Hypothesis>,
    /// Nothing reached eos within the length limit; `hyps` holds the best
    /// unfinished hypothesis instead.
    pub unfinished: bool,
}

impl DecodeResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

/// Live search state of one hypothesis. The recurrent states are those
/// before consuming `last`.
#[derive(Clone, Debug)]
struct BeamHypothesis {
    hyp: Hypothesis,
    last: usize,
    att_state: DecoderSnapshot<f64>,
    ctc_state: PrefixState<f64>,
    lm_state: Option<LmState>,
}

/// Descending score, then ascending label sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels))
}

struct Candidate {
    parent: usize,
    /// `None` is eos.
    label: Option<usize>,
    hyp: Hypothesis,
}

/// Joint beam search over one utterance.
pub fn joint_beam_search(
    model: &HybridModel,
    lm: Option<&dyn LmScorer>,
    features: &Tensor<f64>,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    if cfg.beta > 0.0 && lm.is_none() {
        return Err(Error::Config("lm weight > 0 needs a language model".into()));
    }
    let lm = if cfg.beta > 0.0 { lm } else { None };
    if let Some(lm) = lm {
        if lm.vocab() != &model.vocab {
            return Err(Error::Vocabulary("language model and recognizer vocabularies differ".into()));
        }
    }
    let num_g = model.vocab.num_graphemes();
    let eos = model.vocab.eos();

    let mut g = Graph::inference(&model.params);
    let x = g.input(features.clone());
    let enc = model.encode(&mut g, x)?;
    let lp = model.ctc.log_probs(&mut g, enc)?;
    let ctc_lp = g.value(lp).clone();
    let branch = &model.attention;
    let mem = branch.memory(&mut g, enc)?;
    for id in model.params.group(ATTENTION_GROUP) {
        g.param(id);
    }
    let init = branch.initial_state(&mut g, &mem);
    let mark = g.mark();

    let max_len = cfg.max_len(mem.frames);
    let mut live = vec![BeamHypothesis {
        hyp: Hypothesis {
            labels: Vec::new(),
            score: 0.0,
            score_att: 0.0,
            score_ctc: 0.0,
            score_lm: 0.0,
            finished: false,
        },
        last: model.vocab.sos(),
        att_state: AttentionBranch::snapshot(&g, &init),
        ctc_state: PrefixState::initial(&ctc_lp)?,
        lm_state: lm.map(|l| l.initial_state()),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut last_live: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(live.len() * (num_g + 1));
        let mut expansions = Vec::with_capacity(live.len());
        for (pi, bh) in live.iter().enumerate() {
            let state = AttentionBranch::restore(&mut g, &bh.att_state);
            let (log_dist, next) = branch.step(&mut g, &mem, state, bh.last)?;
            let att = g.value(log_dist).data().to_vec();
            let att_next = AttentionBranch::snapshot(&g, &next);
            g.rewind(mark);

            let (ctc_ext, ctc_end) = ctc_prefix_scores_all(&bh.ctc_state, &ctc_lp)?;
            let lm_out = match (lm, &bh.lm_state) {
                (Some(l), Some(s)) => Some(l.step(s, bh.last)?),
                _ => None,
            };
            for c in 0..=num_g {
                let score_att = bh.hyp.score_att + att[c];
                let score_ctc = if c == eos { ctc_end } else { ctc_ext[c].0 };
                let score_lm = bh.hyp.score_lm + lm_out.as_ref().map_or(0.0, |(d, _)| d[c]);
                let score = fused_score(score_att, score_ctc, score_lm, cfg);
                if score == f64::NEG_INFINITY {
                    continue;
                }
                let mut labels = bh.hyp.labels.clone();
                let label = (c != eos).then_some(c);
                if let Some(c) = label {
                    labels.push(c);
                }
                candidates.push(Candidate {
                    parent: pi,
                    label,
                    hyp: Hypothesis { labels, score, score_att, score_ctc, score_lm, finished: c == eos },
                });
            }
            expansions.push((att_next, ctc_ext, lm_out.map(|(_, s)| s)));
        }
        candidates.sort_by(|a, b| rank(&a.hyp, &b.hyp).then_with(|| a.label.is_some().cmp(&b.label.is_some())));
        candidates.truncate(cfg.beam);

        last_live = live.iter().map(|b| b.hyp.clone()).collect();
        let mut next_live = Vec::with_capacity(cfg.beam);
        for cand in candidates {
            match cand.label {
                None => finished.push(cand.hyp),
                Some(c) => {
                    let (att_next, ctc_ext, lm_next) = &expansions[cand.parent];
                    next_live.push(BeamHypothesis {
                        hyp: cand.hyp,
                        last: c,
                        att_state: att_next.clone(),
                        ctc_state: ctc_ext[c].1.clone(),
                        lm_state: lm_next.clone(),
                    });
                }
            }
        }
        finished.sort_by(rank);
        finished.truncate(cfg.beam);
        live = next_live;
        if live.is_empty() {
            break;
        }
        if cfg.early_stop && finished.len() == cfg.beam {
            let worst = finished.last().map_or(f64::NEG_INFINITY, |h| h.score);
            let best_live = live.iter().map(|b| b.hyp.score).fold(f64::NEG_INFINITY, f64::max);
            if worst > best_live {
                break;
            }
        }
    }

    if !finished.is_empty() {
        return Ok(DecodeResult { hyps: finished, unfinished: false });
    }
    let mut pool: Vec<Hypothesis> = live.into_iter().map(|b| b.hyp).collect();
    if pool.is_empty() {
        pool = last_live;
    }
    pool.sort_by(rank);
    pool.truncate(1);
    Ok(DecodeResult { hyps: pool, unfinished: true })
}

/// Attention-only greedy decoding: argmax at each step (lowest id on
/// ties) until eos or `max_len` steps.
pub fn greedy_attention(model: &HybridModel, features: &Tensor<f64>, max_len: usize) -> Result<Vec<usize>> {
    let mut g = Graph::inference(&model.params);
    let x = g.input(features.clone());
    let enc = model.encode(&mut g, x)?;
    let mem = model.attention.memory(&mut g, enc)?;
    let mut state = model.attention.initial_state(&mut g, &mem);
    let mut prev = model.vocab.sos();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (ld, next) = model.attention.step(&mut g, &mem, state, prev)?;
        let c = argmax(g.value(ld).data());
        if c == model.vocab.eos() {
            break;
        }
        out.push(c);
        state = next;
        prev = c;
    }
    Ok(out)
}

/// Per-frame argmax of the CTC head, repeats collapsed and blanks removed.
pub fn ctc_greedy(model: &HybridModel, features: &Tensor<f64>) -> Result<Vec<usize>> {
    greedy_decode(&model.ctc_log_probs(features)?)
}
