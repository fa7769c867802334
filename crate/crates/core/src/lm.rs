//! Two-layer LSTM character language model over the union vocabulary.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::{LinearParams, LstmParams, INIT_RANGE};
use crate::nn::{GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::scalar::log_sum_exp;

pub const LM_KIND: &str = "lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmArch {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for LmArch {
    fn default() -> Self {
        Self { embed_dim: 64, hidden: 256 }
    }
}

/// Hidden and cell vectors of both layers after some history.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub h: [Vec<f64>; 2],
    pub c: [Vec<f64>; 2],
}

#[derive(Clone, Debug)]
pub struct CharRnnLm {
    pub arch: LmArch,
    pub vocab: Vocabulary,
    pub params: ParamStore<f64>,
    pub embedding: ParamId,
    pub layers: [LstmParams; 2],
    pub output: LinearParams,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x` for `W: [rows, cols]` row-major, accumulated onto `out`.
fn gemv_add(w: &Tensor<f64>, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.data().chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl CharRnnLm {
    pub fn new(arch: LmArch, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if arch.embed_dim == 0 || arch.hidden == 0 {
            return Err(Error::Config("lm embed_dim and hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let n = vocab.num_graphemes() + 1;
        let embedding = ps.uniform("lm.embed", &[n, arch.embed_dim], INIT_RANGE, &mut rng)?;
        let l0 = LstmParams::new(&mut ps, "lm.lstm0", arch.embed_dim, arch.hidden, &mut rng)?;
        let l1 = LstmParams::new(&mut ps, "lm.lstm1", arch.hidden, arch.hidden, &mut rng)?;
        let output = LinearParams::new(&mut ps, "lm.out", arch.hidden, n, true, &mut rng)?;
        Ok(Self { arch, vocab, params: ps, embedding, layers: [l0, l1], output })
    }

    pub fn sos(&self) -> usize {
        self.vocab.sos()
    }

    pub fn eos(&self) -> usize {
        self.vocab.eos()
    }

    pub fn initial_state(&self) -> LmState {
        let z = vec![0.0; self.arch.hidden];
        LmState { h: [z.clone(), z.clone()], c: [z.clone(), z] }
    }

    /// Consumes `c` (a grapheme or sos) and returns the log-distribution
    /// over the next symbol (graphemes, then eos) and the advanced state.
    pub fn step(&self, state: &LmState, c: usize) -> Result<(Vec<f64>, LmState)> {
        if c > self.sos() {
            return Err(Error::UnknownLabel(c));
        }
        let hsz = self.arch.hidden;
        let emb = self.params.get(self.embedding);
        let mut x = emb.row_slice(c).to_vec();
        let mut next = state.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = self.params.get(layer.bias).data().to_vec();
            gemv_add(self.params.get(layer.w_ih), &x, &mut z);
            gemv_add(self.params.get(layer.w_hh), &state.h[k], &mut z);
            for j in 0..hsz {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[hsz + j]);
                let g = z[2 * hsz + j].tanh();
                let o = sigmoid(z[3 * hsz + j]);
                let cell = f * state.c[k][j] + i * g;
                next.c[k][j] = cell;
                next.h[k][j] = o * cell.tanh();
            }
            x = next.h[k].clone();
        }
        let mut logits = match self.output.bias {
            Some(b) => self.params.get(b).data().to_vec(),
            None => vec![0.0; self.output.out_dim],
        };
        gemv_add(self.params.get(self.output.weight), &x, &mut logits);
        let z = log_sum_exp(&logits);
        logits.iter_mut().for_each(|v| *v -= z);
        Ok((logits, next))
    }

    /// `log p(text, eos)` by chaining [`CharRnnLm::step`].
    pub fn log_prob(&self, text: &str) -> Result<f64> {
        let ids = self.vocab.encode(text)?;
        let mut state = self.initial_state();
        let mut prev = self.sos();
        let mut total = 0.0;
        for target in ids.into_iter().chain(std::iter::once(self.eos())) {
            let (ld, next) = self.step(&state, prev)?;
            total += ld[target];
            state = next;
            prev = target;
        }
        Ok(total)
    }

    /// Teacher-forced `-log p(ids, eos)` on the tape.
    pub fn sequence_loss(&self, g: &mut Graph<f64>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.num_graphemes()) {
            return Err(Error::UnknownLabel(bad));
        }
        let table = g.param(self.embedding);
        let inputs: Vec<usize> = std::iter::once(self.sos()).chain(ids.iter().copied()).collect();
        let rows = inputs.iter().map(|&i| g.row(table, i)).collect::<Result<Vec<_>>>()?;
        let mut h = g.concat(&rows, 0)?;
        for layer in &self.layers {
            h = layer.sequence(g, h, false)?;
        }
        let logits = self.output.forward(g, h)?;
        let lp = g.log_softmax(logits);
        let width = self.vocab.num_graphemes() + 1;
        let mut total: Option<Var> = None;
        for (t, target) in ids.iter().copied().chain(std::iter::once(self.eos())).enumerate() {
            let p = g.pick(lp, t * width + target)?;
            total = Some(match total {
                Some(acc) => g.add(acc, p)?,
                None => p,
            });
        }
        Ok(g.scale(total.expect("at least the eos term"), -1.0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: LM_KIND.into(),
            arch: serde_json::to_string(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?,
            vocab: self.vocab.to_text(),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(LM_KIND)?;
        let arch: LmArch = serde_json::from_str(&ckpt.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut lm = Self::new(arch, Vocabulary::from_text(&ckpt.vocab)?, 0)?;
        lm.params.load_from(&ckpt.params)?;
        Ok(lm)
    }
}

/// Per-symbol perplexity over `texts`, eos counted as a symbol.
pub fn perplexity(lm: &CharRnnLm, texts: &[String]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty("perplexity texts"));
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for t in texts {
        nll -= lm.log_prob(t)?;
        n += t.chars().count() + 1;
    }
    Ok((nll / n as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub arch: LmArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { arch: LmArch::default(), epochs: 20, batch_size: 30, optimizer: OptimizerSpec::default(), seed: 1 }
    }
}

/// One epoch of LM training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    /// Mean per-symbol training loss, nats.
    pub train_loss: f64,
    pub dev_perplexity: f64,
}

/// Trains on `train`, reporting dev perplexity after every epoch. Batches
/// average per-sequence losses; the order is reshuffled each epoch from
/// the seed.
pub fn lm_train(
    train: &[String],
    dev: &[String],
    vocab: &Vocabulary,
    cfg: &LmTrainConfig,
) -> Result<(CharRnnLm, Vec<LmEpoch>)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("lm corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let encoded = train.iter().map(|t| vocab.encode(t)).collect::<Result<Vec<_>>>()?;
    for t in dev {
        vocab.encode(t)?;
    }
    let mut lm = CharRnnLm::new(cfg.arch.clone(), vocab.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &lm.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut symbols = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradBuffer::new(&lm.params);
            for &i in batch {
                let mut g = Graph::new(&lm.params);
                let loss = lm.sequence_loss(&mut g, &encoded[i])?;
                total += g.value(loss).item();
                symbols += encoded[i].len() + 1;
                g.backward(loss)?;
                g.collect_grads(&mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Err(e) = opt.step(&mut lm.params, &grads) {
                log::warn!("lm epoch {epoch}: skipped batch: {e}");
            }
        }
        let dev_perplexity = perplexity(&lm, dev)?;
        let train_loss = total / symbols as f64;
        info!("lm epoch {epoch}: train loss {train_loss:.4}, dev perplexity {dev_perplexity:.4}");
        history.push(LmEpoch { epoch, train_loss, dev_perplexity });
    }
    Ok((lm, history))
}
