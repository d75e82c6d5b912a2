use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::tensor::{Tape, Tensor};

use super::{argmax, Classifier, ModelError, ViTConfig, ViTWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 50,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: ViTWeights,
    pub log: Vec<EpochLog>,
    pub reached_target: bool,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_good: Box<ViTWeights>,
        log: Vec<EpochLog>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn sample_gradient(
    weights: &ViTWeights,
    image: &Tensor,
    label: usize,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, true);
    let x = tape.constant(image.clone());
    let fv = weights.build_forward(&mut tape, &params, x)?;
    let loss = tape.cross_entropy(fv.logits, label)?;
    let grads = tape.gradients(loss)?;
    let per_param = params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(p).len()])
        })
        .collect();
    Ok((tape.value(loss).data()[0], per_param))
}

/// Fraction of samples whose top-1 prediction equals the label.
pub fn evaluate_accuracy<C: Classifier>(model: &C, data: &Dataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .samples
        .par_iter()
        .map(|s| model.logits(&s.image).map(|z| usize::from(argmax(&z) == s.label)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Mini-batch SGD with momentum on softmax cross-entropy. Stops as soon as
/// the end-of-epoch training accuracy reaches the target.
pub fn train_toy(
    data: &Dataset,
    cfg: &ViTConfig,
    hp: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(TrainError::BadLabel {
            label: s.label,
            classes: cfg.num_classes,
        });
    }
    let mut weights = ViTWeights::init(cfg, hp.seed)?;
    let mut velocity: Vec<Vec<f64>> = weights.tensors().map(|t| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let batch = hp.batch_size.max(1);

    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let results = chunk
                .par_iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    sample_gradient(&weights, &s.image, s.label)
                })
                .collect::<Result<Vec<_>, _>>();
            let results = match results {
                Ok(r) => r,
                Err(ModelError::NonFinite { .. }) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step,
                        last_good: Box::new(weights),
                        log,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let batch_loss: f64 = results.iter().map(|(l, _)| l).sum();
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_good: Box::new(weights),
                    log,
                });
            }
            loss_sum += batch_loss;
            let inv = 1.0 / chunk.len() as f64;
            let mut results = results.into_iter();
            let (_, mut total) = results.next().expect("non-empty batch");
            for (_, g) in results {
                for (t, gp) in total.iter_mut().zip(g) {
                    for (a, b) in t.iter_mut().zip(gp) {
                        *a += b;
                    }
                }
            }
            for (vel, g) in velocity.iter_mut().zip(&total) {
                for (v, g) in vel.iter_mut().zip(g) {
                    *v = hp.momentum * *v + g * inv;
                }
            }
            let previous = weights.clone();
            let lr = hp.lr;
            weights.update(|p, t| {
                for (w, v) in t.data_mut().iter_mut().zip(&velocity[p]) {
                    *w -= lr * v;
                }
            });
            if !weights.tensors().all(Tensor::is_finite) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_good: Box::new(previous),
                    log,
                });
            }
        }
        let acc = evaluate_accuracy(&weights, data)?;
        log::info!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.3}",
            loss_sum / data.len() as f64,
            acc
        );
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: acc,
        });
        if acc >= hp.target_accuracy {
            return Ok(TrainOutcome { weights, log, reached_target: true });
        }
    }
    Ok(TrainOutcome { weights, log, reached_target: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_side: 8,
            channels: 1,
            patch_side: 4,
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_hidden: 8,
            num_classes: 3,
        }
    }

    fn one_sample() -> Dataset {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| (i % 5) as f64 / 4.0).collect())
            .unwrap();
        Dataset {
            samples: vec![Sample { id: "a".into(), image: img, label: 2 }],
        }
    }

    #[test]
    fn single_sample_is_memorized() {
        let hp = TrainConfig {
            lr: 0.05,
            batch_size: 1,
            max_epochs: 50,
            target_accuracy: 1.0,
            ..Default::default()
        };
        let out = train_toy(&one_sample(), &tiny_cfg(), &hp).unwrap();
        assert!(out.reached_target);
        assert_eq!(out.log.last().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let hp = TrainConfig {
            lr: 0.0,
            batch_size: 1,
            max_epochs: 3,
            target_accuracy: 2.0,
            seed: 7,
            ..Default::default()
        };
        let cfg = tiny_cfg();
        let out = train_toy(&one_sample(), &cfg, &hp).unwrap();
        assert!(!out.reached_target);
        assert_eq!(out.log.len(), 3);
        let init = ViTWeights::init(&cfg, 7).unwrap();
        for (a, b) in out.weights.tensors().zip(init.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn diverging_run_reports_last_good_weights() {
        let hp = TrainConfig {
            lr: 1e200,
            batch_size: 1,
            max_epochs: 5,
            target_accuracy: 2.0,
            ..Default::default()
        };
        let mut data = one_sample();
        data.samples.push(Sample { label: 0, ..data.samples[0].clone() });
        match train_toy(&data, &tiny_cfg(), &hp) {
            Err(TrainError::NonFiniteLoss { last_good, .. }) => {
                assert!(last_good.tensors().all(|t| t.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut data = one_sample();
        data.samples[0].label = 9;
        assert!(matches!(
            train_toy(&data, &tiny_cfg(), &TrainConfig::default()),
            Err(TrainError::BadLabel { .. })
        ));
    }
}
