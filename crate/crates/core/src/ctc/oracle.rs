//! Path-enumeration CTC oracle. Deliberately independent of the DP in the
//! parent module: it walks every frame-label path, collapses it and sums
//! the probabilities of the matching ones.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest path count the oracle will enumerate.
pub const MAX_PATHS: u64 = 10_000_000;

/// `−ln Σ p(path)` over paths collapsing to `label`; `+∞` when none do.
pub fn ctc_loss_bruteforce(logits: &Tensor<f64>, label: &[usize]) -> Result<f64> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected [T, C] logits, got {:?}",
            logits.shape()
        )));
    }
    let frames = logits.shape()[0];
    let classes = logits.shape()[1];
    let blank = classes - 1;
    let paths = (classes as u64).checked_pow(frames as u32).filter(|&p| p <= MAX_PATHS);
    let Some(paths) = paths else {
        return Err(Error::Size(format!(
            "{classes}^{frames} paths exceed the enumeration limit of {MAX_PATHS}"
        )));
    };

    // Per-frame probabilities in linear space.
    let probs: Vec<Vec<f64>> = logits
        .data()
        .chunks(classes)
        .map(|row| {
            let top = row.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect();

    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    for _ in 0..paths {
        let mut emitted = Vec::with_capacity(frames);
        let mut last: Option<usize> = None;
        for &c in &path {
            if c != blank && last != Some(c) {
                emitted.push(c);
            }
            last = Some(c);
        }
        if emitted == label {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        // odometer increment
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < classes {
                break;
            }
            *slot = 0;
        }
    }
    Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY })
}
