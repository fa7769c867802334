//! Affine maps, LSTM cells, the bidirectional projected LSTM encoder stack,
//! and the convolutional front-end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.1;

/// `y = x W^T (+ b)` with `W: out x in`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.uniform(format!("{name}.weight"), &[out_dim, in_dim], INIT_RANGE, rng)?;
        let bias = if bias {
            Some(ps.uniform(format!("{name}.bias"), &[out_dim], INIT_RANGE, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// `[m, in] -> [m, out]`
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Single LSTM layer. Gate blocks of the stacked matrices are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Recurrent state `(h, c)`, each `[1, H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = ps.uniform(format!("{name}.w_ih"), &[4 * hidden, in_dim], INIT_RANGE, rng)?;
        let w_hh = ps.uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], INIT_RANGE, rng)?;
        let bias = ps.uniform(format!("{name}.bias"), &[4 * hidden], INIT_RANGE, rng)?;
        Ok(Self { w_ih, w_hh, bias, in_dim, hidden })
    }

    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>) -> LstmState {
        let h = g.input(crate::nn::Tensor::zeros(&[1, self.hidden]));
        let c = g.input(crate::nn::Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    /// Input projection `x W_ih^T + b` for every row of `x: [T, in]`.
    pub fn project_inputs<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2("lstm")?;
        if d != self.in_dim {
            return shape_err("lstm", format!("input dim {d}, cell expects {}", self.in_dim));
        }
        let w = g.param(self.w_ih);
        let b = g.param(self.bias);
        let z = g.matmul_t(x, w)?;
        g.add_row(z, b)
    }

    /// One step from a precomputed input projection row `[1, 4H]`.
    pub fn step_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        zx: Var,
        prev: LstmState,
    ) -> Result<LstmState> {
        let hsz = self.hidden;
        if g.value(prev.h).shape() != [1, hsz] || g.value(prev.c).shape() != [1, hsz] {
            return shape_err(
                "lstm",
                format!(
                    "state {:?}/{:?}, hidden size {hsz}",
                    g.value(prev.h).shape(),
                    g.value(prev.c).shape()
                ),
            );
        }
        let whh = g.param(self.w_hh);
        let zh = g.matmul_t(prev.h, whh)?;
        let z = g.add(zx, zh)?;
        let i = g.slice(z, 1, 0, hsz)?;
        let f = g.slice(z, 1, hsz, hsz)?;
        let cand = g.slice(z, 1, 2 * hsz, hsz)?;
        let o = g.slice(z, 1, 3 * hsz, hsz)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// One step on a raw input row `x: [1, in]`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, x: Var, prev: LstmState) -> Result<LstmState> {
        let zx = self.project_inputs(g, x)?;
        self.step_projected(g, zx, prev)
    }

    /// Runs over all rows of `x: [T, in]`, forward or reversed in time.
    /// Returns the hidden states in time order, `[T, H]`.
    pub fn sequence<S: Scalar>(&self, g: &mut Graph<S>, x: Var, reverse: bool) -> Result<Var> {
        let steps = g.value(x).rows();
        let zx = self.project_inputs(g, x)?;
        let mut state = self.zero_state(g);
        let mut hs = vec![state.h; steps];
        let order: Box<dyn Iterator<Item = usize>> =
            if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let row = g.row(zx, t)?;
            state = self.step_projected(g, row, state)?;
            hs[t] = state.h;
        }
        g.concat(&hs, 0)
    }
}

/// One bidirectional LSTM layer followed by a tanh projection.
#[derive(Clone, Debug)]
pub struct BlstmpLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub proj: LinearParams,
}

impl BlstmpLayer {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let f = self.fwd.sequence(g, x, false)?;
        let b = self.bwd.sequence(g, x, true)?;
        let both = g.concat(&[f, b], 1)?;
        let p = self.proj.forward(g, both)?;
        Ok(g.tanh(p))
    }
}

#[derive(Clone, Debug)]
pub struct BlstmpStack {
    pub layers: Vec<BlstmpLayer>,
}

impl BlstmpStack {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        proj: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        let mut d = in_dim;
        for k in 0..depth {
            let fwd = LstmParams::new(ps, &format!("{name}.{k}.fwd"), d, hidden, rng)?;
            let bwd = LstmParams::new(ps, &format!("{name}.{k}.bwd"), d, hidden, rng)?;
            let p = LinearParams::new(ps, &format!("{name}.{k}.proj"), 2 * hidden, proj, true, rng)?;
            layers.push(BlstmpLayer { fwd, bwd, proj: p });
            d = proj;
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fwd.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim(), |l| l.proj.out_dim)
    }

    /// `[T, D] -> [T, P]`
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (steps, d) = g.value(x).dims2("blstmp")?;
        if steps == 0 {
            return Err(Error::Empty("blstmp input sequence"));
        }
        if d != self.in_dim() {
            return shape_err("blstmp", format!("input dim {d}, stack expects {}", self.in_dim()));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Channel plan of the convolutional front-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggChannels {
    pub first: usize,
    pub second: usize,
}

impl Default for VggChannels {
    fn default() -> Self {
        Self { first: 64, second: 128 }
    }
}

/// Four 3x3 convolutions (ReLU) with a 2x2 stride-2 max pool after the
/// second and the fourth: 1 -> 64 -> 64 -> pool -> 128 -> 128 -> pool.
#[derive(Clone, Debug)]
pub struct VggBlock {
    pub convs: [(ParamId, ParamId); 4],
    pub channels: VggChannels,
}

impl VggBlock {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamStore<S>,
        name: &str,
        channels: VggChannels,
        rng: &mut R,
    ) -> Result<Self> {
        let plan = [
            (1, channels.first),
            (channels.first, channels.first),
            (channels.first, channels.second),
            (channels.second, channels.second),
        ];
        let mut convs = Vec::with_capacity(4);
        for (k, (cin, cout)) in plan.into_iter().enumerate() {
            let w = ps.uniform(format!("{name}.conv{k}.weight"), &[cout, cin, 3, 3], INIT_RANGE, rng)?;
            let b = ps.uniform(format!("{name}.conv{k}.bias"), &[cout], INIT_RANGE, rng)?;
            convs.push((w, b));
        }
        let convs = [convs[0], convs[1], convs[2], convs[3]];
        Ok(Self { convs, channels })
    }

    /// Output feature dimension for input dimension `d`.
    pub fn out_dim(&self, d: usize) -> usize {
        d.div_ceil(4) * self.channels.second
    }

    /// `[T, D] -> [ceil(T/4), ceil(D/4) * C]`, frame rows laid out as
    /// `(frequency, channel)` with channel fastest.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (t, d) = g.value(x).dims2("vgg")?;
        if t < 4 || d < 4 {
            return shape_err("vgg", format!("input {t}x{d}; both axes need at least 4"));
        }
        let mut h = g.reshape(x, &[1, t, d])?;
        for (k, &(w, b)) in self.convs.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            h = g.conv2d(h, w, Some(b))?;
            h = g.relu(h);
            if k % 2 == 1 {
                h = g.max_pool2d(h)?;
            }
        }
        let (tq, dq) = (t.div_ceil(4), d.div_ceil(4));
        let h = g.permute(h, &[1, 2, 0])?;
        g.reshape(h, &[tq, dq * self.channels.second])
    }
}
