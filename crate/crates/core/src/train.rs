//! Mini-batch training of the hybrid model and the three transfer stages.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ErrorCounts, Utterance};
use crate::decode::greedy_attention;
use crate::error::{Error, Result};
use crate::model::{HybridModel, ATTENTION_GROUP, CTC_GROUP, ENCODER_GROUP};
use crate::nn::{GradBuffer, Graph};
use crate::optim::{Optimizer, OptimizerSpec};

/// Which parameters a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Everything, from scratch: pooled multilingual or monolingual.
    Stage0,
    /// CTC head and attention branch; the encoder is frozen.
    Stage1,
    /// Everything, starting from a stage-1 model.
    Stage2,
}

impl Stage {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Self::Stage0),
            1 => Ok(Self::Stage1),
            2 => Ok(Self::Stage2),
            _ => Err(Error::Config(format!("unknown stage {i}, expected 0, 1 or 2"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Self::Stage0 => 0,
            Self::Stage1 => 1,
            Self::Stage2 => 2,
        }
    }

    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            Self::Stage1 => &[CTC_GROUP, ATTENTION_GROUP],
            Self::Stage0 | Self::Stage2 => &[ENCODER_GROUP, CTC_GROUP, ATTENTION_GROUP],
        }
    }

    /// AdaDelta for training from scratch, SGD at 1e-4 for decoder
    /// retraining and 1e-2 for full fine-tuning.
    pub fn default_optimizer(self) -> OptimizerSpec {
        match self {
            Self::Stage0 => OptimizerSpec::default(),
            Self::Stage1 => OptimizerSpec::sgd(1e-4),
            Self::Stage2 => OptimizerSpec::sgd(1e-2),
        }
    }

    pub fn needs_init(self) -> bool {
        self != Self::Stage0
    }
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// CTC weight in the interpolated loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stage default when absent.
    pub optimizer: Option<OptimizerSpec>,
    pub seed: u64,
    /// Consecutive non-finite batches tolerated before giving up.
    pub max_nonfinite_batches: usize,
    /// Also decode the dev set greedily each epoch to report CER.
    pub dev_cer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            batch_size: 30,
            epochs: 15,
            optimizer: None,
            seed: 1,
            max_nonfinite_batches: 3,
            dev_cer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_nonfinite_batches == 0 {
            return Err(Error::Config("batch_size, epochs and max_nonfinite_batches must be positive".into()));
        }
        if let Some(o) = &self.optimizer {
            o.validate()?;
        }
        Ok(())
    }

    pub fn optimizer_for(&self, stage: Stage) -> OptimizerSpec {
        self.optimizer.clone().unwrap_or_else(|| stage.default_optimizer())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// `train`, `dev`, or `dev:<lang>`.
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    pub lr: f64,
    pub eps: f64,
    /// Utterances or batches left out (infeasible, non-finite).
    pub skipped: usize,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Outcome of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub records: Vec<LogRecord>,
    pub dev_accuracy: f64,
    /// The optimizer decayed after this epoch.
    pub decayed: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: HybridModel,
    /// Parameters of the epoch with the best dev accuracy (earliest on ties).
    pub best: HybridModel,
    pub best_epoch: usize,
    pub history: Vec<EpochReport>,
}

/// Mean loss and teacher-forced accuracy over a set of utterances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub skipped: usize,
}

/// Mean interpolated loss and next-label accuracy of the attention
/// decoder under teacher forcing.
pub fn evaluate(model: &HybridModel, utts: &[&Utterance], lambda: f64) -> Result<Evaluation> {
    let (mut loss, mut used, mut correct, mut steps, mut skipped) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for u in utts {
        let labels = model.labels(&u.transcript)?;
        let mut g = Graph::inference(&model.params);
        match model.mol_loss(&mut g, &u.features, &labels, lambda) {
            Ok(l) => {
                loss += g.value(l.total).item();
                used += 1;
                if lambda < 1.0 {
                    correct += l.correct;
                    steps += l.steps;
                }
            }
            Err(Error::InfeasibleAlignment { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Empty("evaluation utterances"));
    }
    let accuracy = if steps == 0 { 0.0 } else { correct as f64 / steps as f64 };
    Ok(Evaluation { loss: loss / used as f64, accuracy, skipped })
}

/// Corpus CER of greedy attention decoding, at most one label per frame.
pub fn greedy_cer(model: &HybridModel, utts: &[&Utterance]) -> Result<f64> {
    let mut counts = ErrorCounts::default();
    for u in utts {
        let max_len = model.arch.encoded_frames(u.frames()).max(1);
        let hyp = model.vocab.decode(&greedy_attention(model, &u.features, max_len)?)?;
        counts += ErrorCounts::chars(&hyp, &u.transcript);
    }
    counts.rate()
}

/// Checks that every transcript is covered by the model vocabulary.
pub fn check_coverage(model: &HybridModel, utts: &[&Utterance]) -> Result<()> {
    for u in utts {
        if let Some(c) = u.transcript.chars().find(|&c| !model.vocab.contains(c)) {
            return Err(Error::Vocabulary(format!("utterance {} uses {c:?}, absent from the model vocabulary", u.id)));
        }
    }
    Ok(())
}

/// Running best of validation accuracy; a strict drop below it triggers
/// an optimizer decay.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecayTrigger {
    best: Option<f64>,
}

impl DecayTrigger {
    /// Records `accuracy`; true iff it is strictly below the best so far.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        let drop = self.best.is_some_and(|b| accuracy < b);
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
        }
        drop
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Per-utterance result of one forward/backward pass.
enum UttStep {
    Used { loss: f64, correct: usize, steps: usize, grads: GradBuffer<f64> },
    Infeasible,
    NonFinite,
}

fn utterance_step(model: &HybridModel, mask: &[bool], u: &Utterance, lambda: f64) -> Result<UttStep> {
    let labels = model.labels(&u.transcript)?;
    let mut g = Graph::with_mask(&model.params, mask);
    let l = match model.mol_loss(&mut g, &u.features, &labels, lambda) {
        Ok(l) => l,
        Err(Error::InfeasibleAlignment { .. }) => return Ok(UttStep::Infeasible),
        Err(e) => return Err(e),
    };
    let loss = g.value(l.total).item();
    if !loss.is_finite() {
        return Ok(UttStep::NonFinite);
    }
    g.backward(l.total)?;
    let mut grads = GradBuffer::new(&model.params);
    g.collect_grads(&mut grads);
    Ok(UttStep::Used { loss, correct: l.correct, steps: l.steps, grads })
}

/// Trains `model` for one stage. `train` is shuffled every epoch from the
/// seed; `dev` is grouped by language for the per-language records and
/// pooled for the decay decision. `on_epoch` sees every epoch's report and
/// parameters, e.g. to write checkpoints and logs.
pub fn train_stage(
    model: HybridModel,
    stage: Stage,
    cfg: &TrainConfig,
    train: &[&Utterance],
    dev: &[&Utterance],
    mut on_epoch: impl FnMut(&EpochReport, &HybridModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("training or dev utterances"));
    }
    check_coverage(&model, train)?;
    check_coverage(&model, dev)?;
    let mut model = model;
    let mask = model.group_mask(stage.trainable_groups());
    let mut opt = Optimizer::new(cfg.optimizer_for(stage), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut langs: Vec<&str> = dev.iter().map(|u| u.lang.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, HybridModel)> = None;
    let mut trigger = DecayTrigger::default();
    let mut nonfinite_run = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (lr, eps) = (opt.lr(), opt.eps());
        let (mut loss_sum, mut used, mut correct, mut steps, mut skipped) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradBuffer::new(&model.params);
            let (mut b_loss, mut b_used, mut b_correct, mut b_steps) = (0.0, 0usize, 0usize, 0usize);
            let mut nonfinite = false;
            for &i in batch {
                match utterance_step(&model, &mask, train[i], cfg.lambda)? {
                    UttStep::Used { loss, correct, steps, grads: g } => {
                        grads.merge(&g);
                        b_loss += loss;
                        b_used += 1;
                        b_correct += correct;
                        b_steps += steps;
                    }
                    UttStep::Infeasible => {
                        warn!("epoch {epoch}: skipped {}: too few frames for its transcript", train[i].id);
                        skipped += 1;
                    }
                    UttStep::NonFinite => {
                        nonfinite = true;
                        break;
                    }
                }
            }
            if b_used == 0 && !nonfinite {
                continue;
            }
            if !nonfinite {
                grads.scale(1.0 / b_used as f64);
                match opt.step(&mut model.params, &grads) {
                    Ok(()) => {}
                    Err(Error::NonFinite(_)) => nonfinite = true,
                    Err(e) => return Err(e),
                }
            }
            if nonfinite {
                nonfinite_run += 1;
                skipped += 1;
                warn!("epoch {epoch}: skipped a batch with a non-finite loss or gradient ({nonfinite_run} in a row)");
                if nonfinite_run >= cfg.max_nonfinite_batches {
                    return Err(Error::Divergence(format!(
                        "{nonfinite_run} consecutive non-finite batches in epoch {epoch}"
                    )));
                }
                continue;
            }
            nonfinite_run = 0;
            loss_sum += b_loss;
            used += b_used;
            correct += b_correct;
            steps += b_steps;
        }
        let train_loss = if used == 0 { f64::NAN } else { loss_sum / used as f64 };
        let train_acc = if steps == 0 { 0.0 } else { correct as f64 / steps as f64 };
        let mut records = vec![LogRecord {
            epoch,
            split: "train".into(),
            loss: train_loss,
            accuracy: train_acc,
            cer: None,
            lr,
            eps,
            skipped,
        }];

        let pooled = evaluate(&model, dev, cfg.lambda)?;
        let pooled_cer = if cfg.dev_cer { Some(greedy_cer(&model, dev)?) } else { None };
        records.push(LogRecord {
            epoch,
            split: "dev".into(),
            loss: pooled.loss,
            accuracy: pooled.accuracy,
            cer: pooled_cer,
            lr,
            eps,
            skipped: pooled.skipped,
        });
        if langs.len() > 1 {
            for lang in &langs {
                let part: Vec<&Utterance> = dev.iter().copied().filter(|u| u.lang == *lang).collect();
                let ev = evaluate(&model, &part, cfg.lambda)?;
                let cer = if cfg.dev_cer { Some(greedy_cer(&model, &part)?) } else { None };
                records.push(LogRecord {
                    epoch,
                    split: format!("dev:{lang}"),
                    loss: ev.loss,
                    accuracy: ev.accuracy,
                    cer,
                    lr,
                    eps,
                    skipped: ev.skipped,
                });
            }
        }

        let acc = pooled.accuracy;
        let decayed = trigger.observe(acc);
        if decayed {
            opt.decay();
        }
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.clone()));
        }
        info!(
            "stage {} epoch {epoch}: train loss {train_loss:.4}, dev loss {:.4}, dev acc {:.4}{}",
            stage.index(),
            pooled.loss,
            acc,
            if decayed { ", decayed" } else { "" }
        );
        let report = EpochReport { epoch, records, dev_accuracy: acc, decayed };
        on_epoch(&report, &model)?;
        history.push(report);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { last: model, best: best_model, best_epoch, history })
}
