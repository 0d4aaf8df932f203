// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{loss_on_tape, Batch};
use super::TransformerParams;
use crate::error::{ProbeError, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays linearly to `learning_rate * final_lr_fraction`
    /// over the run; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            shuffle_seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ProbeError::InvalidConfig(format!("invalid training hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Token-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &TransformerParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut TransformerParams, grads: &[Tensor], lr: f64, h: &TrainHyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t);
        let c2 = 1.0 - h.beta2.powi(self.t);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + h.adam_eps);
            }
        }
    }
}

/// Mini-batch Adam with global-norm clipping. Sequences are reshuffled each
/// epoch from a stream seeded by `hyper.shuffle_seed`, so the result depends
/// only on the inputs.
///
/// On a non-finite loss or gradient the update is skipped and the parameters
/// reached so far are returned inside [`ProbeError::Divergence`].
pub fn train(
    params: &TransformerParams,
    data: &[Vec<usize>],
    hyper: &TrainHyper,
) -> Result<(TransformerParams, TrainReport)> {
    hyper.validate()?;
    let mut params = params.clone();
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(hyper.batch_size);
    let total_steps = (steps_per_epoch * hyper.epochs).max(1);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(hyper.epochs),
        steps: 0,
    };
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let batch = Batch::from_sequences(&seqs);
            let n = batch.n_targets();
            if n == 0 {
                continue;
            }
            let (tape, loss_var) = loss_on_tape(&params, &batch)?;
            let loss = tape.value(loss_var).item().unwrap_or(f64::NAN);
            let mut grads: Vec<Tensor> = tape.backward(loss_var)?.into_values().collect();
            let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(ProbeError::Divergence {
                    epoch,
                    step: report.steps,
                    last_finite: Box::new(params),
                });
            }
            if norm > hyper.grad_clip {
                let s = hyper.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
            let progress = report.steps as f64 / total_steps as f64;
            let lr = hyper.learning_rate * (1.0 - (1.0 - hyper.final_lr_fraction) * progress);
            adam.step(&mut params, &grads, lr, hyper);
            report.steps += 1;
            loss_sum += loss * n as f64;
            token_sum += n;
        }
        let mean = if token_sum == 0 { 0.0 } else { loss_sum / token_sum as f64 };
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, hyper.epochs);
        report.epoch_losses.push(mean);
    }
    Ok((params, report))
}

/// Hyperparameters of the three training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHypers {
    pub base: TrainHyper,
    pub mix: TrainHyper,
    pub clean: TrainHyper,
}

/// A base model and its two continuations from identical starting weights.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub base: TransformerParams,
    pub mix: TransformerParams,
    pub clean: TransformerParams,
    pub base_report: TrainReport,
    pub mix_report: TrainReport,
    pub clean_report: TrainReport,
}

/// Trains the base model on `base_data`, then continues one copy on
/// `mix_data` and another on `clean_data`.
pub fn train_triplet(
    init: &TransformerParams,
    base_data: &[Vec<usize>],
    mix_data: &[Vec<usize>],
    clean_data: &[Vec<usize>],
    hypers: &PhaseHypers,
) -> Result<Triplet> {
    let (base, base_report) = train(init, base_data, &hypers.base)?;
    let (mix, mix_report) = train(&base, mix_data, &hypers.mix)?;
    let (clean, clean_report) = train(&base, clean_data, &hypers.clean)?;
    Ok(Triplet {
        base,
        mix,
        clean,
        base_report,
        mix_report,
        clean_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TransformerParams {
        TransformerParams::init(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 12,
            max_seq_len: 10,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let p = tiny();
        let data = vec![vec![1, 2, 3, 4], vec![4, 3, 2]];
        let hyper = TrainHyper {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainHyper::default()
        };
        let (q, report) = train(&p, &data, &hyper).unwrap();
        assert_eq!(p.to_bytes(), q.to_bytes());
        assert_eq!(report.epoch_losses.len(), 2);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let p = tiny();
        let data = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8], vec![9, 10, 11, 1]];
        let hyper = TrainHyper {
            epochs: 3,
            batch_size: 2,
            ..TrainHyper::default()
        };
        let (a, ra) = train(&p, &data, &hyper).unwrap();
        let (b, rb) = train(&p, &data, &hyper).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
    }

    #[test]
    fn non_finite_weights_report_divergence() {
        let mut p = tiny();
        p.unembed.data_mut()[0] = f64::NAN;
        let err = train(&p, &[vec![1, 2, 3]], &TrainHyper::default()).unwrap_err();
        assert!(matches!(err, ProbeError::Divergence { epoch: 0, step: 0, .. }));
    }
}
