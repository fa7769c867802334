//! The hybrid CTC/attention model: shared encoder, CTC head, attention
//! branch, and the interpolated training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBranch, AttentionDecoderParams, LocationAttentionParams};
use crate::checkpoint::Checkpoint;
use crate::ctc::{ctc_loss, min_frames, CtcHead};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::{BlstmpStack, VggBlock, VggChannels};
use crate::nn::{Graph, ParamStore, Tensor, Var};

pub const MODEL_KIND: &str = "hybrid";

/// Parameter-name prefixes of the three groups.
pub const ENCODER_GROUP: &str = "enc.";
pub const CTC_GROUP: &str = "ctc.";
pub const ATTENTION_GROUP: &str = "att.";

/// Sizes of every component. Defaults are the full-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArch {
    pub input_dim: usize,
    pub vgg: bool,
    pub vgg_channels: VggChannels,
    pub encoder_layers: usize,
    pub encoder_units: usize,
    pub projection_units: usize,
    pub attention_dim: usize,
    pub conv_channels: usize,
    pub conv_width: usize,
    pub decoder_units: usize,
    pub embed_dim: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            input_dim: 20,
            vgg: false,
            vgg_channels: VggChannels::default(),
            encoder_layers: 5,
            encoder_units: 320,
            projection_units: 320,
            attention_dim: 320,
            conv_channels: 10,
            conv_width: 100,
            decoder_units: 300,
            embed_dim: 300,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_units", self.encoder_units),
            ("projection_units", self.projection_units),
            ("attention_dim", self.attention_dim),
            ("conv_channels", self.conv_channels),
            ("conv_width", self.conv_width),
            ("decoder_units", self.decoder_units),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.vgg && (self.input_dim < 4 || self.vgg_channels.first == 0 || self.vgg_channels.second == 0) {
            return Err(Error::Config("vgg front-end needs input_dim >= 4 and positive channels".into()));
        }
        Ok(())
    }

    /// Frames seen by the heads for `t` input frames.
    pub fn encoded_frames(&self, t: usize) -> usize {
        if self.vgg {
            t.div_ceil(4)
        } else {
            t
        }
    }
}

/// Loss terms of one utterance, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct MolLoss {
    pub total: Var,
    pub ctc: Option<Var>,
    pub att: Option<Var>,
    /// Teacher-forced steps (labels plus eos) whose argmax was correct.
    pub correct: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub arch: ModelArch,
    pub vocab: Vocabulary,
    pub params: ParamStore<f64>,
    pub vgg: Option<VggBlock>,
    pub encoder: BlstmpStack,
    pub ctc: CtcHead,
    pub attention: AttentionBranch,
}

impl HybridModel {
    pub fn new(arch: ModelArch, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let g = vocab.num_graphemes();
        let vgg = if arch.vgg { Some(VggBlock::new(&mut ps, "enc.vgg", arch.vgg_channels, &mut rng)?) } else { None };
        let enc_in = vgg.as_ref().map_or(arch.input_dim, |v| v.out_dim(arch.input_dim));
        let encoder = BlstmpStack::new(
            &mut ps,
            "enc.blstmp",
            enc_in,
            arch.encoder_units,
            arch.projection_units,
            arch.encoder_layers,
            &mut rng,
        )?;
        let enc_dim = encoder.out_dim();
        let ctc = CtcHead::new(&mut ps, "ctc", enc_dim, g, &mut rng)?;
        let loc = LocationAttentionParams::new(
            &mut ps,
            "att.loc",
            enc_dim,
            arch.decoder_units,
            arch.attention_dim,
            arch.conv_channels,
            arch.conv_width,
            &mut rng,
        )?;
        let dec = AttentionDecoderParams::new(&mut ps, "att.dec", g, arch.embed_dim, enc_dim, arch.decoder_units, &mut rng)?;
        Ok(Self {
            arch,
            vocab,
            params: ps,
            vgg,
            encoder,
            ctc,
            attention: AttentionBranch { attention: loc, decoder: dec },
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: MODEL_KIND.into(),
            arch: serde_json::to_string(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?,
            vocab: self.vocab.to_text(),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let arch: ModelArch = serde_json::from_str(&ckpt.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vocab = Vocabulary::from_text(&ckpt.vocab)?;
        let mut model = Self::new(arch, vocab, 0)?;
        model.params.load_from(&ckpt.params)?;
        Ok(model)
    }

    /// Trainable mask selecting the parameters whose names start with any
    /// of `groups`.
    pub fn group_mask(&self, groups: &[&str]) -> Vec<bool> {
        self.params.iter().map(|(_, name, _)| groups.iter().any(|g| name.starts_with(g))).collect()
    }

    pub fn labels(&self, transcript: &str) -> Result<Vec<usize>> {
        self.vocab.encode(transcript)
    }

    /// `[T, D] -> [T', P]`, through the VGG block first when configured.
    pub fn encode(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2("encode")?;
        if d != self.arch.input_dim {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("feature dim {d}, model expects {}", self.arch.input_dim),
            });
        }
        let h = match &self.vgg {
            Some(v) => v.forward(g, x)?,
            None => x,
        };
        self.encoder.forward(g, h)
    }

    /// Encoder output for inference, off any tape the caller keeps.
    pub fn encode_features(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::inference(&self.params);
        let x = g.input(features.clone());
        let h = self.encode(&mut g, x)?;
        Ok(g.value(h).clone())
    }

    /// CTC log-probabilities `[T', G + 1]` for inference.
    pub fn ctc_log_probs(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::inference(&self.params);
        let x = g.input(features.clone());
        let h = self.encode(&mut g, x)?;
        let lp = self.ctc.log_probs(&mut g, h)?;
        Ok(g.value(lp).clone())
    }

    /// Teacher-forced `-log p_att(C|X)` given the encoder output.
    pub fn attention_loss(&self, g: &mut Graph<f64>, enc: Var, labels: &[usize]) -> Result<(Var, usize)> {
        let mem = self.attention.memory(g, enc)?;
        self.attention.teacher_forced(g, &mem, labels)
    }

    /// `-log p_ctc(C|X)` given the encoder output.
    pub fn ctc_loss(&self, g: &mut Graph<f64>, enc: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.ctc.log_probs(g, enc)?;
        ctc_loss(g, lp, labels)
    }

    /// `lambda * ctc + (1 - lambda) * att` over one shared encoder pass.
    /// A term whose weight is zero is not computed. Fails with
    /// [`Error::InfeasibleAlignment`] when the CTC term is needed but the
    /// encoded sequence is too short for the labels.
    pub fn mol_loss(&self, g: &mut Graph<f64>, features: &Tensor<f64>, labels: &[usize], lambda: f64) -> Result<MolLoss> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        if labels.is_empty() {
            return Err(Error::Empty("labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.vocab.num_graphemes()) {
            return Err(Error::UnknownLabel(bad));
        }
        let frames = self.arch.encoded_frames(features.shape()[0]);
        if lambda > 0.0 && frames < min_frames(labels) {
            return Err(Error::InfeasibleAlignment { frames, required: min_frames(labels) });
        }
        let x = g.input(features.clone());
        let enc = self.encode(g, x)?;
        let ctc = if lambda > 0.0 { Some(self.ctc_loss(g, enc, labels)?) } else { None };
        let (att, correct) = if lambda < 1.0 {
            let (a, c) = self.attention_loss(g, enc, labels)?;
            (Some(a), c)
        } else {
            (None, 0)
        };
        let total = match (ctc, att) {
            (Some(c), Some(a)) => {
                let c = g.scale(c, lambda);
                let a = g.scale(a, 1.0 - lambda);
                g.add(c, a)?
            }
            (Some(c), None) => c,
            (None, Some(a)) => a,
            (None, None) => unreachable!("lambda is in [0, 1]"),
        };
        Ok(MolLoss { total, ctc, att, correct, steps: labels.len() + 1 })
    }
}
