//! Comparison defenses: random data dropping, magnitude pruning of the
//! fine-tuned weights, and the oracle that filters every poisoned sample.
//!
//! Each is deliberately simple; they bracket the defense space (blind data
//! reduction, blind weight reduction, perfect detection) that the
//! saliency-guided purification competes against.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{Dataset, Sample};
use crate::error::{CoreError, Result};
use crate::model::ModelParams;
use crate::rng::DetRng;

/// Removes ⌊ratio·n⌋ samples uniformly at random; survivors are untouched
/// and keep their original order.
pub fn random_drop(data: &[Sample], ratio: f64, rng: &mut DetRng) -> Result<Dataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CoreError::InvalidConfig { detail: format!("drop ratio {ratio} outside [0, 1)") });
    }
    let n = data.len();
    let k = libm::floor(ratio * n as f64) as usize;
    let mut dropped = [false].repeat(n);
    for i in rng.sample_indices(n, k) {
        dropped[i] = true;
    }
    Ok(data
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped[*i])
        .map(|(_, s)| s.clone())
        .collect())
}

/// Zeroes the ⌊ratio·N⌋ smallest-magnitude entries among the projector
/// weights and bias (the trainable group); ties resolve toward the smaller
/// flat index. Surviving entries are bit-identical.
pub fn magnitude_prune(params: &ModelParams, ratio: f64) -> Result<ModelParams> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CoreError::InvalidConfig { detail: format!("prune ratio {ratio} outside [0, 1)") });
    }
    let mut out = params.clone();
    let n = out.proj_w.len() + out.proj_b.len();
    let k = libm::floor(ratio * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mag = |i: usize| {
        let w = params.proj_w.len();
        if i < w {
            libm::fabs(params.proj_w.data[i])
        } else {
            libm::fabs(params.proj_b.data[i - w])
        }
    };
    order.sort_unstable_by(|&a, &b| mag(a).total_cmp(&mag(b)).then(a.cmp(&b)));
    for &i in order.iter().take(k) {
        let w = out.proj_w.len();
        if i < w {
            out.proj_w.data[i] = 0.0;
        } else {
            out.proj_b.data[i - w] = 0.0;
        }
    }
    Ok(out)
}

/// Perfect-detection upper bound: removes every sample whose poisoning
/// flag is set. The caller retrains on the remainder.
pub fn oracle_filter(data: &[Sample]) -> Dataset {
    data.iter().filter(|s| !s.is_poisoned).cloned().collect()
}
