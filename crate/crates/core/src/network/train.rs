use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_model, checkpoint, cross_entropy_loss, graph_for, lr_at_epoch, Adam, Model, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::knn::KnnGraph;
use crate::layers::{apply_stat_updates, BatchLayout, Mode, Session};
use crate::tensor::Tensor;

/// One network input with its static graph and supervision.
#[derive(Clone, Debug)]
pub struct TrainBlock {
    pub features: Tensor,
    pub graph: KnnGraph,
    pub labels: Vec<usize>,
    /// Points that count toward loss and accuracy; `None` means all.
    pub mask: Option<Vec<bool>>,
}

impl TrainBlock {
    pub fn new(features: Tensor, labels: Vec<usize>, mask: Option<Vec<bool>>, k: usize) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if labels.len() != n || mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(Error::contract(format!("block has {n} points but labels or mask differ in length")));
        }
        let graph = graph_for(&features, k)?;
        Ok(TrainBlock {
            features,
            graph,
            labels,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Loss before the update.
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

/// Model plus optimizer state and progress; what a checkpoint stores.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Block preparation tag the data came from (`p1`, `p2`, `p3`).
    pub setup: String,
}

impl Trainer {
    pub fn new(config: &RunConfig, seed: u64, setup: &str) -> Result<Self> {
        let model = build_model(&config.network, seed)?;
        let adam = Adam::new(&model.store, config.train.weight_decay);
        Ok(Trainer {
            model,
            adam,
            train: config.train.clone(),
            epoch: 0,
            setup: setup.to_string(),
        })
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            network: self.model.config.clone(),
            train: self.train.clone(),
        }
    }
}

pub(crate) fn stack_features(blocks: &[&TrainBlock]) -> Result<Tensor> {
    let width = blocks[0].features.shape()[1];
    let rows: usize = blocks.iter().map(|b| b.len()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for b in blocks {
        if b.features.shape()[1] != width {
            return Err(Error::contract("blocks in a batch must share their feature width"));
        }
        data.extend_from_slice(b.features.data());
    }
    Tensor::new(vec![rows, width], data)
}

/// Forward, backward and one Adam update on a batch of blocks stacked
/// row-wise.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&TrainBlock], lr: f64, dropout_seed: u64) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let x = stack_features(batch)?;
    let graphs: Vec<&KnnGraph> = batch.iter().map(|b| &b.graph).collect();
    let layout = BatchLayout::stack(&graphs)?;
    let labels: Vec<usize> = batch.iter().flat_map(|b| b.labels.iter().copied()).collect();
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|b| match &b.mask {
            Some(m) => m.clone(),
            None => vec![true; b.len()],
        })
        .collect();
    let (stats, grads, updates) = {
        let sess = Session::new(&model.store, Mode::Train { dropout_seed });
        let logits = model.forward_var(&sess, sess.input(x), &layout)?;
        let loss = cross_entropy_loss(logits, &labels, Some(&mask))?;
        let pred = super::argmax_rows(&logits.value());
        let (mut correct, mut counted) = (0, 0);
        for ((p, l), &m) in pred.iter().zip(&labels).zip(&mask) {
            if m {
                counted += 1;
                correct += usize::from(p == l);
            }
        }
        let loss_value = loss.item();
        sess.backward(loss)?;
        let stats = StepStats {
            loss: loss_value,
            correct,
            counted,
        };
        (stats, sess.param_grads(), sess.stat_updates())
    };
    adam.step(&mut model.store, &grads, lr)?;
    apply_stat_updates(&mut model.store, &updates)?;
    Ok(stats)
}

/// Shuffled mini-batch training until `trainer.train.epochs` epochs are
/// complete. The shuffle and dropout streams derive from the model seed
/// and the epoch number, so runs are reproducible and resumable.
pub fn train(trainer: &mut Trainer, data: &[TrainBlock], checkpoint_path: Option<&Path>) -> Result<TrainingReport> {
    if data.is_empty() {
        return Err(Error::contract("training needs at least one block"));
    }
    if trainer.train.batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut report = TrainingReport::default();
    while trainer.epoch < trainer.train.epochs {
        let started = Instant::now();
        let epoch = trainer.epoch;
        let lr = lr_at_epoch(trainer.train.learning_rate, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(trainer.model.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight, mut correct, mut counted) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(trainer.train.batch_size) {
            let batch: Vec<&TrainBlock> = chunk.iter().map(|&i| &data[i]).collect();
            let s = train_step(&mut trainer.model, &mut trainer.adam, &batch, lr, rng.gen())?;
            loss_sum += s.loss * s.counted as f64;
            weight += s.counted;
            correct += s.correct;
            counted += s.counted;
            report.steps += 1;
        }
        trainer.epoch += 1;
        let stats = EpochStats {
            epoch: trainer.epoch,
            loss: loss_sum / weight.max(1) as f64,
            accuracy: correct as f64 / counted.max(1) as f64,
            learning_rate: lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} acc {:.4} lr {} ({:.1}s)",
            stats.epoch,
            stats.loss,
            stats.accuracy,
            stats.learning_rate,
            stats.seconds
        );
        report.epochs.push(stats);
        if let Some(path) = checkpoint_path {
            let every = trainer.train.checkpoint_every;
            if every > 0 && trainer.epoch.is_multiple_of(every) && trainer.epoch < trainer.train.epochs {
                checkpoint::save(trainer, path)?;
            }
        }
    }
    if let Some(path) = checkpoint_path {
        checkpoint::save(trainer, path)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Variant;
    use crate::network::NetworkConfig;

    fn config(epochs: usize) -> RunConfig {
        RunConfig {
            network: NetworkConfig {
                num_encoders: 1,
                k_neighbors: 4,
                num_clusters: 2,
                f0: 0,
                num_classes: 2,
                head_widths: vec![16, 8],
                dropout_p: 0.3,
                variant: Variant::Full,
            },
            train: TrainConfig {
                epochs,
                batch_size: 2,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
        }
    }

    fn blocks() -> Vec<TrainBlock> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..3)
            .map(|_| {
                let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let labels = data.chunks(3).map(|p| usize::from(p[0] > 0.0)).collect();
                TrainBlock::new(Tensor::new(vec![10, 3], data).unwrap(), labels, None, 4).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut t = Trainer::new(&config(0), 1, "p1").unwrap();
        let before = t.model.store.clone();
        let report = train(&mut t, &blocks(), None).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(t.model.store, before);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut t = Trainer::new(&config(1), 1, "p1").unwrap();
        assert!(matches!(train(&mut t, &[], None), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_result() {
        let data = blocks();
        let run = || {
            let mut t = Trainer::new(&config(2), 3, "p1").unwrap();
            let r = train(&mut t, &data, None).unwrap();
            (t.model.store, r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_points_excluded_from_accuracy() {
        let mut data = blocks();
        data[0].mask = Some((0..10).map(|i| i < 4).collect());
        let mut t = Trainer::new(&config(1), 3, "p2").unwrap();
        let s = train_step(&mut t.model, &mut t.adam, &[&data[0]], 0.01, 0).unwrap();
        assert_eq!(s.counted, 4);
    }
}
