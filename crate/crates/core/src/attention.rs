//! Location-aware attention and the single-layer LSTM attention decoder.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{LinearParams, LstmParams, LstmState, INIT_RANGE};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Energies `e_t = g^T tanh(W_q q + W_h h_t + W_f f_t + b)` where `f_t` is
/// the previous alignment convolved with `channels` filters of `width` taps.
#[derive(Clone, Debug)]
pub struct LocationAttentionParams {
    /// `[channels, 1, 1, width]`
    pub conv: ParamId,
    /// `[1, att_dim]`
    pub g: ParamId,
    pub lin_q: LinearParams,
    pub lin_h: LinearParams,
    pub lin_f: LinearParams,
    pub channels: usize,
    pub width: usize,
}

impl LocationAttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        enc_dim: usize,
        dec_dim: usize,
        att_dim: usize,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ps.uniform(format!("{name}.conv"), &[channels, 1, 1, width], INIT_RANGE, rng)?;
        let g = ps.uniform(format!("{name}.g"), &[1, att_dim], INIT_RANGE, rng)?;
        let lin_q = LinearParams::new(ps, &format!("{name}.lin_q"), dec_dim, att_dim, false, rng)?;
        let lin_h = LinearParams::new(ps, &format!("{name}.lin_h"), enc_dim, att_dim, false, rng)?;
        let lin_f = LinearParams::new(ps, &format!("{name}.lin_f"), channels, att_dim, true, rng)?;
        Ok(Self { conv, g, lin_q, lin_h, lin_f, channels, width })
    }

    /// Content projection of the encoder output, shared by every step.
    pub fn project_encoder<S: Scalar>(&self, g: &mut Graph<S>, enc: Var) -> Result<Var> {
        self.lin_h.forward(g, enc)
    }

    /// New alignment `[1, T]` from the previous one, the previous decoder
    /// state `[1, dec_dim]` and the projected encoder output `[T, att_dim]`.
    pub fn attend_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        a_prev: Var,
        q_prev: Var,
        enc_proj: Var,
    ) -> Result<Var> {
        let (frames, _) = g.value(enc_proj).dims2("attend")?;
        if g.value(a_prev).len() != frames {
            return shape_err(
                "attend",
                format!("previous alignment has {} frames, encoder {frames}", g.value(a_prev).len()),
            );
        }
        let a = g.reshape(a_prev, &[1, 1, frames])?;
        let k = g.param(self.conv);
        let f = g.conv2d(a, k, None)?;
        let f = g.reshape(f, &[self.channels, frames])?;
        let f = g.transpose(f)?;
        let f = self.lin_f.forward(g, f)?;
        let q = self.lin_q.forward(g, q_prev)?;
        let pre = g.add(enc_proj, f)?;
        let pre = g.add_row(pre, q)?;
        let act = g.tanh(pre);
        let gv = g.param(self.g);
        let e = g.matmul_t(act, gv)?;
        let e = g.reshape(e, &[1, frames])?;
        Ok(g.softmax(e))
    }

    pub fn attend<S: Scalar>(&self, g: &mut Graph<S>, a_prev: Var, q_prev: Var, enc: Var) -> Result<Var> {
        if g.value(enc).dims2("attend")?.0 == 0 {
            return Err(Error::Empty("encoder output"));
        }
        let proj = self.project_encoder(g, enc)?;
        self.attend_projected(g, a_prev, q_prev, proj)
    }
}

/// Context vector `r = a H`: `[1, T] x [T, P] -> [1, P]`.
pub fn context<S: Scalar>(g: &mut Graph<S>, align: Var, enc: Var) -> Result<Var> {
    g.matmul(align, enc)
}

/// Label embedding, one LSTM layer on `[embedding; context]`, and the
/// output projection. Input ids `0..=num_labels` where `num_labels` is
/// sos; output ids `0..=num_labels` where `num_labels` is eos.
#[derive(Clone, Debug)]
pub struct AttentionDecoderParams {
    /// `[num_labels + 1, embed_dim]`
    pub embedding: ParamId,
    pub cell: LstmParams,
    pub output: LinearParams,
    pub num_labels: usize,
    pub embed_dim: usize,
}

impl AttentionDecoderParams {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        num_labels: usize,
        embed_dim: usize,
        enc_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = ps.uniform(format!("{name}.embed"), &[num_labels + 1, embed_dim], INIT_RANGE, rng)?;
        let cell = LstmParams::new(ps, &format!("{name}.lstm"), embed_dim + enc_dim, hidden, rng)?;
        let output = LinearParams::new(ps, &format!("{name}.out"), hidden, num_labels + 1, true, rng)?;
        Ok(Self { embedding, cell, output, num_labels, embed_dim })
    }

    pub fn sos(&self) -> usize {
        self.num_labels
    }

    pub fn eos(&self) -> usize {
        self.num_labels
    }

    /// One decoder step. Returns the log-distribution over the next output
    /// `[1, num_labels + 1]` and the new state.
    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        context: Var,
        prev: LstmState,
        prev_label: usize,
    ) -> Result<(Var, LstmState)> {
        if prev_label > self.num_labels {
            return Err(Error::UnknownLabel(prev_label));
        }
        let table = g.param(self.embedding);
        let emb = g.row(table, prev_label)?;
        let x = g.concat(&[emb, context], 1)?;
        let state = self.cell.step(g, x, prev)?;
        let logits = self.output.forward(g, state.h)?;
        Ok((g.log_softmax(logits), state))
    }
}

/// Encoder output and its attention projection for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct EncoderMemory {
    pub enc: Var,
    pub enc_proj: Var,
    pub frames: usize,
}

/// Decoder recursion state on the graph.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub align: Var,
    pub lstm: LstmState,
}

/// Graph-independent snapshot of [`DecoderVars`], for beam hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSnapshot<S> {
    pub align: Tensor<S>,
    pub h: Tensor<S>,
    pub c: Tensor<S>,
}

/// Attention plus decoder: everything on the attention branch.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub attention: LocationAttentionParams,
    pub decoder: AttentionDecoderParams,
}

impl AttentionBranch {
    pub fn memory<S: Scalar>(&self, g: &mut Graph<S>, enc: Var) -> Result<EncoderMemory> {
        let (frames, _) = g.value(enc).dims2("attention")?;
        let enc_proj = self.attention.project_encoder(g, enc)?;
        Ok(EncoderMemory { enc, enc_proj, frames })
    }

    /// Uniform alignment and zero decoder state.
    pub fn initial_state<S: Scalar>(&self, g: &mut Graph<S>, mem: &EncoderMemory) -> DecoderVars {
        let align = g.input(Tensor::full(&[1, mem.frames], S::one() / S::of(mem.frames as f64)));
        let lstm = self.decoder.cell.zero_state(g);
        DecoderVars { align, lstm }
    }

    /// Attend with the previous state, read the context, advance the decoder.
    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        mem: &EncoderMemory,
        state: DecoderVars,
        prev_label: usize,
    ) -> Result<(Var, DecoderVars)> {
        let align = self.attention.attend_projected(g, state.align, state.lstm.h, mem.enc_proj)?;
        let r = context(g, align, mem.enc)?;
        let (log_dist, lstm) = self.decoder.step(g, r, state.lstm, prev_label)?;
        Ok((log_dist, DecoderVars { align, lstm }))
    }

    /// Teacher-forced `-log p(labels, eos | X)`.
    pub fn teacher_forced_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        mem: &EncoderMemory,
        labels: &[usize],
    ) -> Result<Var> {
        let (loss, _) = self.teacher_forced(g, mem, labels)?;
        Ok(loss)
    }

    /// Teacher-forced loss and the number of steps whose argmax equals the
    /// reference (eos included).
    pub fn teacher_forced<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        mem: &EncoderMemory,
        labels: &[usize],
    ) -> Result<(Var, usize)> {
        let eos = self.decoder.eos();
        let mut state = self.initial_state(g, mem);
        let mut prev = self.decoder.sos();
        let mut picks = Vec::with_capacity(labels.len() + 1);
        let mut correct = 0;
        for &target in labels.iter().chain(std::iter::once(&eos)) {
            if target > eos {
                return Err(Error::UnknownLabel(target));
            }
            let (log_dist, next) = self.step(g, mem, state, prev)?;
            if g.value(log_dist).argmax() == target {
                correct += 1;
            }
            picks.push(g.pick(log_dist, target)?);
            state = next;
            prev = target;
        }
        let mut total = picks[0];
        for &p in &picks[1..] {
            total = g.add(total, p)?;
        }
        Ok((g.scale(total, -S::one()), correct))
    }

    pub fn snapshot<S: Scalar>(g: &Graph<S>, state: &DecoderVars) -> DecoderSnapshot<S> {
        DecoderSnapshot {
            align: g.value(state.align).clone(),
            h: g.value(state.lstm.h).clone(),
            c: g.value(state.lstm.c).clone(),
        }
    }

    pub fn restore<S: Scalar>(g: &mut Graph<S>, snap: &DecoderSnapshot<S>) -> DecoderVars {
        let align = g.input(snap.align.clone());
        let h = g.input(snap.h.clone());
        let c = g.input(snap.c.clone());
        DecoderVars { align, lstm: LstmState { h, c } }
    }
}
