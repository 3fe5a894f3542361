//! Plain stochastic gradient descent on the answer cross-entropy.

use super::{argmax, graph, ModelConfig, ToyVlm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tape;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub struct TrainOutcome {
    pub model: ToyVlm,
    /// Exact-match accuracy on the training dataset after the final epoch, in [0, 100].
    pub final_train_accuracy: f64,
}

/// Gradients are averaged over minibatches of this size before each update.
pub const BATCH_SIZE: usize = 16;

/// Incremental SGD driver with seeded shuffling; one `epoch()` call per pass.
pub struct Trainer {
    pub model: ToyVlm,
    shuffle_rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    /// Model weights are seeded by `cfg.seed`; shuffling by `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Trainer> {
        Ok(Trainer {
            model: ToyVlm::init(cfg.clone())?,
            shuffle_rng: substream(seed, &[0x736774]),
            epochs_done: 0,
        })
    }

    /// One pass over the dataset in shuffled minibatches; returns the mean
    /// training loss. Per-sample gradients are computed independently (in
    /// parallel) and summed in shuffled-index order, so the result does not
    /// depend on thread count.
    pub fn epoch(&mut self, dataset: &Dataset, learning_rate: f64) -> Result<f64> {
        if dataset.samples.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(BATCH_SIZE) {
            use rayon::prelude::*;
            let results: Vec<Result<(f64, Vec<crate::tensor::Tensor>)>> = batch
                .par_iter()
                .map(|&i| sample_grads(&self.model, &dataset.samples[i]))
                .collect();

            let mut grad_sum: Option<Vec<Vec<f64>>> = None;
            for (&i, res) in batch.iter().zip(results) {
                let (loss, grads) = res.map_err(|e| {
                    Error::Divergence(format!("epoch {}, sample {i}: {e}", self.epochs_done))
                })?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "epoch {}, sample {i}: loss became {loss}",
                        self.epochs_done
                    )));
                }
                total += loss;
                match &mut grad_sum {
                    None => grad_sum = Some(grads.into_iter().map(|g| g.data().to_vec()).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (av, gv) in a.iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }

            let scale = learning_rate / batch.len() as f64;
            let grad_sum = grad_sum.expect("non-empty batch");
            for (tensor, grad) in self.model.params.tensors_mut().into_iter().zip(grad_sum) {
                let mut data = tensor.data().to_vec();
                for (p, g) in data.iter_mut().zip(grad) {
                    *p -= scale * g;
                }
                *tensor = crate::tensor::Tensor::new(tensor.shape(), data)?;
            }
        }
        self.epochs_done += 1;
        Ok(total / dataset.samples.len() as f64)
    }

    /// Exact-match accuracy of the current model on a dataset, in [0, 100].
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for sample in &dataset.samples {
            let (logits, _) = self.model.forward(&sample.image, &sample.question)?;
            if argmax(logits.data()) == sample.answer_label {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / dataset.samples.len() as f64)
    }
}

/// Per-epoch multiplicative learning-rate decay used by [`train`].
pub const LR_DECAY: f64 = 0.97;

/// Train a freshly initialized model (weights seeded by `cfg.seed`) with
/// minibatch SGD and seeded shuffling; `learning_rate` is the initial rate,
/// decayed by [`LR_DECAY`] each epoch. Deterministic given all arguments.
pub fn train(
    cfg: &ModelConfig,
    dataset: &Dataset,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if dataset.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut lr = learning_rate;
    for _ in 0..epochs {
        trainer.epoch(dataset, lr)?;
        lr *= LR_DECAY;
    }
    let final_train_accuracy = trainer.accuracy(dataset)?;
    Ok(TrainOutcome {
        model: trainer.model,
        final_train_accuracy,
    })
}

/// Loss and parameter gradients for one sample, in `ModelParams::tensors` order.
fn sample_grads(
    model: &ToyVlm,
    sample: &crate::data::Sample,
) -> Result<(f64, Vec<crate::tensor::Tensor>)> {
    let mut tape = Tape::new();
    let image = tape.constant(sample.image.clone());
    let params = graph::ParamVars::register(&mut tape, &model.params, true);
    let out = graph::build(&mut tape, &model.cfg, &params, image, &sample.question)?;
    let loss = tape.cross_entropy(out.logits, sample.answer_label)?;
    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = params
        .vars()
        .into_iter()
        .map(|v| tape.grad(v).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, grads))
}
