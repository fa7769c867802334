//! Connectionist temporal classification: the alignment-marginalized loss,
//! an enumeration oracle, and label-synchronous prefix scoring.
//!
//! Log-probability matrices are `T x (V + 1)` with the blank in the last
//! column. Labels are ids in `0..V`.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::LinearParams;
use crate::nn::{Graph, ParamStore, Tape, Tensor, Var};
use crate::scalar::{log_add_exp, Scalar};

/// Linear projection from encoder states to `V + 1` CTC classes.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: LinearParams,
}

impl CtcHead {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        enc_dim: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { proj: LinearParams::new(ps, &format!("{name}.proj"), enc_dim, num_labels + 1, true, rng)? })
    }

    pub fn blank(&self) -> usize {
        self.proj.out_dim - 1
    }

    /// `[T, P] -> [T, V + 1]` log-distributions.
    pub fn log_probs<S: Scalar>(&self, g: &mut Graph<S>, enc: Var) -> Result<Var> {
        let z = self.proj.forward(g, enc)?;
        Ok(g.log_softmax(z))
    }
}

/// Frames needed to emit `labels`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels<S: Scalar>(log_probs: &Tensor<S>, labels: &[usize]) -> Result<(usize, usize)> {
    let (t, k) = log_probs.dims2("ctc")?;
    if k < 2 {
        return shape_err("ctc", format!("need at least one label plus blank, got {k} columns"));
    }
    let blank = k - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::UnknownLabel(bad));
    }
    Ok((t, blank))
}

/// Forward/backward lattices over the blank-augmented label sequence.
struct Lattice<S> {
    ext: Vec<usize>,
    alpha: Vec<S>,
    beta: Vec<S>,
    log_p: S,
}

fn lattice<S: Scalar>(lp: &Tensor<S>, labels: &[usize], blank: usize, with_beta: bool) -> Lattice<S> {
    let (t_len, k) = (lp.shape()[0], lp.shape()[1]);
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = S::neg_infinity();
    let at = |t: usize, c: usize| lp.data()[t * k + c];
    // skip transition s-2 -> s allowed for labels differing from s-2
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + at(t, ext[s]) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 { log_add_exp(last[s_len - 1], last[s_len - 2]) } else { last[0] };

    let mut beta = Vec::new();
    if with_beta {
        beta = vec![ninf; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = S::zero();
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = S::zero();
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let next = |s2: usize| beta[(t + 1) * s_len + s2] + at(t + 1, ext[s2]);
                let mut acc = next(s);
                if s + 1 < s_len {
                    acc = log_add_exp(acc, next(s + 1));
                }
                if s + 2 < s_len && skip(s + 2) {
                    acc = log_add_exp(acc, next(s + 2));
                }
                beta[t * s_len + s] = acc;
            }
        }
    }
    Lattice { ext, alpha, beta, log_p }
}

/// `-log p_ctc(labels | X)` by the forward recursion.
pub fn ctc_neg_log_likelihood<S: Scalar>(log_probs: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (t, blank) = check_labels(log_probs, labels)?;
    let need = min_frames(labels);
    if t < need {
        return Err(Error::InfeasibleAlignment { frames: t, required: need });
    }
    let lat = lattice(log_probs, labels, blank, false);
    if lat.log_p == S::neg_infinity() {
        return Err(Error::InfeasibleAlignment { frames: t, required: need });
    }
    Ok(-lat.log_p)
}

/// Differentiable CTC loss on the tape. The gradient with respect to the
/// log-probability matrix is the negated state-occupation posterior from
/// the forward/backward recursions.
pub fn ctc_loss<S: Scalar>(tape: &mut Tape<S>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.value(log_probs);
    let (t_len, blank) = check_labels(lp, labels)?;
    let need = min_frames(labels);
    if t_len < need {
        return Err(Error::InfeasibleAlignment { frames: t_len, required: need });
    }
    if !tape.requires_grad(log_probs) {
        let loss = ctc_neg_log_likelihood(lp, labels)?;
        return Ok(tape.constant(Tensor::scalar(loss)));
    }
    let lat = lattice(lp, labels, blank, true);
    if lat.log_p == S::neg_infinity() {
        return Err(Error::InfeasibleAlignment { frames: t_len, required: need });
    }
    let k = lp.shape()[1];
    let s_len = lat.ext.len();
    let mut grad = vec![S::zero(); t_len * k];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = lat.alpha[t * s_len + s] + lat.beta[t * s_len + s] - lat.log_p;
            if occ > S::neg_infinity() {
                grad[t * k + lat.ext[s]] -= occ.exp();
            }
        }
    }
    let partial = Tensor::new(vec![t_len, k], grad)?;
    tape.fused_scalar(-lat.log_p, &[log_probs], vec![partial])
}

/// Collapse a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Largest lattice [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// `p_ctc(labels | X)` by enumerating every frame-level path. Oracle only.
pub fn ctc_brute_force<S: Scalar>(log_probs: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (t_len, blank) = check_labels(log_probs, labels)?;
    let k = blank + 1;
    let total = (k as f64).powi(t_len as i32);
    if total > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::TooLarge(format!("{k}^{t_len} paths")));
    }
    let mut path = vec![0usize; t_len];
    let mut prob = S::zero();
    loop {
        if collapse(&path, blank) == labels {
            let lp: S = path.iter().enumerate().map(|(t, &c)| log_probs.data()[t * k + c]).sum();
            prob += lp.exp();
        }
        let mut d = t_len;
        loop {
            if d == 0 {
                return Ok(prob);
            }
            d -= 1;
            path[d] += 1;
            if path[d] < k {
                break;
            }
            path[d] = 0;
        }
    }
}

/// Candidate extension of a prefix during decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extension {
    Label(usize),
    /// End of sequence: the prefix is complete.
    End,
}

/// Blank-ending and label-ending path masses of one prefix, per frame.
/// Index 0 is the empty time before the first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState<S> {
    prefix: Vec<usize>,
    nonblank: Vec<S>,
    blank: Vec<S>,
    log_prefix_prob: S,
}

impl<S: Scalar> PrefixState<S> {
    /// State of the empty prefix.
    pub fn initial(log_probs: &Tensor<S>) -> Result<Self> {
        let (t_len, blank) = check_labels(log_probs, &[])?;
        let k = blank + 1;
        let mut b = vec![S::zero(); t_len + 1];
        for t in 1..=t_len {
            b[t] = b[t - 1] + log_probs.data()[(t - 1) * k + blank];
        }
        Ok(Self {
            prefix: Vec::new(),
            nonblank: vec![S::neg_infinity(); t_len + 1],
            blank: b,
            log_prefix_prob: S::zero(),
        })
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// Log mass of all label sequences that start with this prefix.
    pub fn log_prefix_prob(&self) -> S {
        self.log_prefix_prob
    }

    /// Log probability that the prefix is the complete label sequence.
    pub fn log_complete_prob(&self) -> S {
        let t = self.blank.len() - 1;
        log_add_exp(self.nonblank[t], self.blank[t])
    }

    fn frames(&self) -> usize {
        self.blank.len() - 1
    }
}

/// Prefix score of `prefix + next` and the state of the extended prefix.
///
/// For a label, the score is the log mass of every label sequence starting
/// with the extended prefix. For [`Extension::End`] it is the probability of
/// `prefix` as a complete sequence and the state is returned unchanged.
pub fn ctc_prefix_score<S: Scalar>(
    state: &PrefixState<S>,
    prefix: &[usize],
    next: Extension,
    log_probs: &Tensor<S>,
) -> Result<(S, PrefixState<S>)> {
    if state.prefix != prefix {
        return Err(Error::PrefixMismatch(format!(
            "state holds {:?}, caller passed {:?}",
            state.prefix, prefix
        )));
    }
    let (t_len, blank) = check_labels(log_probs, prefix)?;
    if t_len != state.frames() {
        return shape_err("ctc_prefix_score", format!("state has {} frames, input {t_len}", state.frames()));
    }
    match next {
        Extension::End => Ok((state.log_complete_prob(), state.clone())),
        Extension::Label(c) => {
            if c >= blank {
                return Err(Error::UnknownLabel(c));
            }
            Ok(extend(state, c, log_probs, blank))
        }
    }
}

fn extend<S: Scalar>(state: &PrefixState<S>, c: usize, log_probs: &Tensor<S>, blank: usize) -> (S, PrefixState<S>) {
    let t_len = state.frames();
    let k = blank + 1;
    let ninf = S::neg_infinity();
    let repeat = state.prefix.last() == Some(&c);
    let mut n = vec![ninf; t_len + 1];
    let mut b = vec![ninf; t_len + 1];
    let mut psi = ninf;
    for t in 1..=t_len {
        let row = &log_probs.data()[(t - 1) * k..t * k];
        let phi = if repeat { state.blank[t - 1] } else { log_add_exp(state.blank[t - 1], state.nonblank[t - 1]) };
        let enter = if phi == ninf { ninf } else { phi + row[c] };
        psi = log_add_exp(psi, enter);
        let stay = log_add_exp(n[t - 1], phi);
        n[t] = if stay == ninf { ninf } else { stay + row[c] };
        let bl = log_add_exp(b[t - 1], n[t - 1]);
        b[t] = if bl == ninf { ninf } else { bl + row[blank] };
    }
    let mut prefix = state.prefix.clone();
    prefix.push(c);
    (psi, PrefixState { prefix, nonblank: n, blank: b, log_prefix_prob: psi })
}

/// Scores every label extension and the end-of-sequence completion of one
/// prefix. Entry `c` of the returned vector extends with label `c`.
pub fn ctc_prefix_scores_all<S: Scalar>(
    state: &PrefixState<S>,
    log_probs: &Tensor<S>,
) -> Result<(Vec<(S, PrefixState<S>)>, S)> {
    let (t_len, blank) = check_labels(log_probs, &state.prefix)?;
    if t_len != state.frames() {
        return shape_err("ctc_prefix_score", format!("state has {} frames, input {t_len}", state.frames()));
    }
    let ext = (0..blank).map(|c| extend(state, c, log_probs, blank)).collect();
    Ok((ext, state.log_complete_prob()))
}

/// Per-frame argmax, collapsed.
pub fn greedy_decode<S: Scalar>(log_probs: &Tensor<S>) -> Result<Vec<usize>> {
    let (t_len, blank) = check_labels(log_probs, &[])?;
    let path: Vec<usize> = (0..t_len).map(|t| crate::nn::argmax(log_probs.row_slice(t))).collect();
    Ok(collapse(&path, blank))
}
