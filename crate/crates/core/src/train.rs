//! One optimisation step over a batch.

use fedpet_autodiff::{GradientMap, Tape, Tensor};

use crate::delta::DeltaState;
use crate::error::Result;
use crate::model::{forward, Batch, Bindings, Input, Mode, ParameterStore};
use crate::optim::Optimizer;

/// Mean cross-entropy of `batch` and its gradient over the trainable set.
pub fn loss_and_gradients(
    store: &ParameterStore,
    delta: &DeltaState,
    batch: &Batch,
    mode: Mode<'_>,
) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::with_precision(store.config().precision);
    let mut p = Bindings::new(&mut tape, store, Some(delta))?;
    let logits = forward(&mut tape, &mut p, Input::Tokens(batch), mode)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Applies one optimizer step to the trainable tensors; returns the batch loss.
pub fn train_step(
    store: &mut ParameterStore,
    delta: &mut DeltaState,
    batch: &Batch,
    opt: &mut Optimizer,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(store, delta, batch, Mode::Train(rng))?;
    apply(store, delta, &grads, opt)?;
    Ok(loss)
}

pub(crate) fn apply(
    store: &mut ParameterStore,
    delta: &mut DeltaState,
    grads: &GradientMap,
    opt: &mut Optimizer,
) -> Result<()> {
    opt.begin_step();
    for (name, g) in grads.iter() {
        if let Some(t) = delta.get(name) {
            let next = opt.update(name, t, g)?;
            delta.set(name, next)?;
        } else {
            let next = opt.update(name, store.tensor(name)?, g)?;
            store.set(name, next)?;
        }
    }
    Ok(())
}

/// Gradient norms below this are compared in absolute terms; the central
/// difference of an f64 loss cannot resolve them relatively.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Worst relative error, per trainable tensor in the 2-norm, between tape
/// gradients and central differences of the eval-mode loss.
pub fn gradient_check(store: &ParameterStore, delta: &DeltaState, batch: &Batch, step: f64) -> Result<f64> {
    let (_, grads) = loss_and_gradients(store, delta, batch, Mode::Eval)?;
    let loss_at = |s: &ParameterStore, d: &DeltaState| -> Result<f64> {
        Ok(loss_and_gradients(s, d, batch, Mode::Eval)?.0)
    };
    let mut worst: f64 = 0.0;
    for (name, ad) in grads.iter() {
        let mut s = store.clone();
        let mut d = delta.clone();
        let in_delta = d.get(name).is_some();
        let base = if in_delta {
            d.get(name).cloned()
        } else {
            s.get(name).cloned()
        }
        .ok_or_else(|| crate::error::Error::Contract(format!("gradient for unknown tensor {name}")))?;
        let mut fd = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut probe = |delta_v: f64| -> Result<f64> {
                let mut v = base.to_vec();
                v[i] += delta_v;
                let t = Tensor::new(base.shape().to_vec(), v)?;
                if in_delta {
                    d.set(name, t)?;
                } else {
                    s.set(name, t)?;
                }
                loss_at(&s, &d)
            };
            let up = probe(step)?;
            let down = probe(-step)?;
            fd.push((up - down) / (2.0 * step));
        }
        let diff = ad
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = ad.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(GRADIENT_FLOOR));
    }
    Ok(worst)
}
