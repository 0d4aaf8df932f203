// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{loss_on_tape, Batch};
use super::{forward, TransformerParams};
use crate::error::{ProbeError, Result};
use crate::nn::kernels;

/// Step of the five-point central difference. Its truncation error is
/// fourth order in the step, so a fairly large step keeps round-off in the
/// loss differences small without biasing the estimate.
pub const FD_STEP: f64 = 1e-3;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(tensor index, element index)` of each probed coordinate.
    pub coords: Vec<(usize, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Loss of each segment evaluated independently by the inference path, then
/// averaged over scored tokens like the training loss.
fn reference_loss(params: &TransformerParams, batch: &Batch) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in &batch.segments {
        let range = s.start..s.start + s.len;
        let logits = forward(params, &batch.tokens[range.clone()])?;
        let (l, _, n) = kernels::cross_entropy(&logits, &batch.targets[range])?;
        total += l * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Compares taped gradients with central differences at `n_coords`
/// coordinates drawn uniformly over all parameters.
pub fn grad_check(params: &TransformerParams, batch: &Batch, n_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let (tape, loss) = loss_on_tape(params, batch)?;
    let grads: Vec<_> = tape.backward(loss)?.into_values().collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(ProbeError::InvalidInput("model has no parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coords: Vec::with_capacity(n_coords),
        analytic: Vec::with_capacity(n_coords),
        numeric: Vec::with_capacity(n_coords),
        max_rel_error: 0.0,
    };
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let orig = params.tensors()[ti].data()[flat];
        let mut at = |offset: f64| -> Result<f64> {
            probe.tensors_mut()[ti].data_mut()[flat] = orig + offset;
            reference_loss(&probe, batch)
        };
        let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
        let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
        probe.tensors_mut()[ti].data_mut()[flat] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
        let analytic = grads[ti].data()[flat];
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.coords.push((ti, flat));
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn fully_masked_batch_has_zero_gradient() {
        let p = TransformerParams::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            max_seq_len: 8,
            seed: 2,
        })
        .unwrap();
        let mut batch = Batch::from_sequences(&[vec![1, 2, 3]]);
        batch.targets.iter_mut().for_each(|t| *t = None);
        let r = grad_check(&p, &batch, 50, 0).unwrap();
        assert!(r.analytic.iter().chain(&r.numeric).all(|&g| g == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }
}
