//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::nn::params::{GradBuffer, Graph, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let denom = analytic.abs().max(numeric.abs()).max(S::of(1e-8));
    (analytic - numeric).abs() / denom
}

fn eval_scalar<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<S> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with the given step, over all coordinates of `x`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, step: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let fx = eval_scalar(&tape, out)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {fx}")));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval_at = |xp: Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let v = t.constant(xp);
        let o = f(&mut t, v)?;
        eval_scalar(&t, o)
    };
    let two = S::one() + S::one();
    let mut worst = S::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (two * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Gradient check over model parameters. At most `max_coords` evenly spaced
/// coordinates of each parameter are perturbed.
pub fn grad_check_params<S, F>(
    store: &ParamStore<S>,
    ids: &[ParamId],
    step: S,
    max_coords: usize,
    f: F,
) -> Result<Vec<ParamCheck>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let fx = eval_scalar(&g, out)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {fx}")));
    }
    g.backward(out)?;
    let mut grads = GradBuffer::new(store);
    g.collect_grads(&mut grads);
    drop(g);

    let eval_with = |ps: &ParamStore<S>| -> Result<S> {
        let mut g = Graph::inference(ps);
        let o = f(&mut g)?;
        eval_scalar(&g, o)
    };
    let two = S::one() + S::one();
    let mut work = store.clone();
    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let mut worst = S::zero();
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let fp = eval_with(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let fm = eval_with(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (two * step);
            let analytic = grads.get(id).map_or(S::zero(), |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst.as_f64(),
            coords_checked: checked,
        });
    }
    Ok(report)
}
