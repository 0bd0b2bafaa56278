use rayon::prelude::*;

use super::data::mix;
use super::optim::AdamW;
use super::TrainResult;
use crate::error::ModelResult;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// One example's loss on a fresh training graph, or `None` when the example
/// contributes nothing (e.g. no masked positions).
pub(crate) type ExampleLoss<'a> = dyn Fn(&Graph, usize) -> ModelResult<Option<Var>> + Sync + 'a;

/// Runs one epoch over `order` in mini-batches. Each example gets its own
/// graph; gradients are summed in example order, so the update does not
/// depend on how rayon schedules the batch. Returns the mean example loss.
pub(crate) fn train_epoch(
    store: &mut ParamStore,
    adam: &mut AdamW,
    order: &[usize],
    batch: usize,
    rates: &[f64],
    dropout_seed: u64,
    loss: &ExampleLoss,
) -> TrainResult<Option<f64>> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for chunk in order.chunks(batch.max(1)) {
        let shared: &ParamStore = store;
        let results: Vec<ModelResult<Option<(f64, Vec<(ParamId, Tensor)>)>>> = chunk
            .par_iter()
            .map(|&i| {
                let g = Graph::new(shared).with_dropout(mix(dropout_seed, i as u64));
                match loss(&g, i)? {
                    None => Ok(None),
                    Some(l) => {
                        let value = g.value(l).item();
                        Ok(Some((value, g.backward(l)?.params())))
                    }
                }
            })
            .collect();
        let mut acc: Vec<Option<Tensor>> = vec![None; shared.len()];
        let mut used = 0usize;
        for r in results {
            let Some((value, grads)) = r? else { continue };
            total += value;
            used += 1;
            for (id, g) in grads {
                match &mut acc[id.index()] {
                    Some(sum) => {
                        for (s, x) in sum.data_mut().iter_mut().zip(g.data()) {
                            *s += x;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        if used == 0 {
            continue;
        }
        counted += used;
        let inv = 1.0 / used as f64;
        let grads: Vec<(ParamId, Tensor)> = acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| {
                t.map(|mut t| {
                    t.data_mut().iter_mut().for_each(|x| *x *= inv);
                    (ParamId(i), t)
                })
            })
            .collect();
        adam.step(store, &grads, |id| rates[id.index()]);
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// Learning rate per parameter index.
pub(crate) fn rates_by_group(store: &ParamStore, encoder: f64, other: f64) -> Vec<f64> {
    store
        .iter()
        .map(|(_, name, _)| match super::optim::param_group(name) {
            super::optim::ParamGroup::Encoder => encoder,
            super::optim::ParamGroup::Other => other,
        })
        .collect()
}
