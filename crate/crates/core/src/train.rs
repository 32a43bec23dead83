//! Mini-batch Adam loop shared by the proposal network and the classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, ParameterStore, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Runs `opts.epochs` epochs of shuffled mini-batch Adam. The per-sample loss
/// is averaged over each batch; the returned history holds the mean sample
/// loss of every epoch. Parameters are rounded to `f32` at the end so that the
/// result survives a checkpoint round trip bit for bit.
pub(crate) fn fit<S>(
    store: &mut ParameterStore,
    samples: &[S],
    opts: &TrainOptions,
    mut record: impl FnMut(&ParameterStore, &S) -> Result<(Graph, Var)>,
) -> Result<Vec<f64>> {
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut adam = AdamState::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                let (graph, loss) = record(store, &samples[k])?;
                total += graph.value(loss).item()?;
                graph.backward(loss, scale, store)?;
            }
            adam_step(store, &mut adam)?;
        }
        history.push(total / samples.len() as f64);
    }
    if opts.epochs > 0 {
        store.round_to_f32();
    }
    store.zero_grad();
    Ok(history)
}
