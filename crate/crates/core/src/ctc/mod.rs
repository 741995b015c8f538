//! CTC loss (log-space forward/backward DP), greedy decoding and word accuracy.
//!
//! The blank is the last class: logits are `[T, N_c + 1]` and class `N_c`
//! is blank, so charset indices never collide with it.

pub mod oracle;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Stand-in for log(0) inside the DP.
pub const NEG_INF: f64 = -1e30;

fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= NEG_INF {
        return NEG_INF;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `label`: one per character plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &c in label {
        ext.push(c);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log-space forward table over the blank-interleaved label.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// `[T, 2L+1]` log-probabilities; unreachable cells hold [`NEG_INF`].
    pub alpha: Tensor<f64>,
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn loss(&self) -> f64 {
        -self.log_likelihood
    }
}

fn validate(frames: usize, classes: usize, label: &[usize]) -> Result<()> {
    if classes < 2 {
        return Err(Error::Input("CTC needs at least one character class plus blank".into()));
    }
    if label.is_empty() {
        return Err(Error::Input("CTC label must be nonempty".into()));
    }
    let blank = classes - 1;
    if let Some(&bad) = label.iter().find(|&&c| c >= blank) {
        return Err(Error::Input(format!(
            "label index {bad} is not a character class (blank is {blank})"
        )));
    }
    let required = min_frames(label);
    if frames < required {
        return Err(Error::InfeasibleAlignment {
            frames,
            label_len: label.len(),
            required,
        });
    }
    Ok(())
}

fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn forward_table(lp: &[f64], frames: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let blank = classes - 1;
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let prev = (t - 1) * s_len;
        let cur = t * s_len;
        for s in 0..s_len {
            let mut acc = alpha[prev + s];
            if s >= 1 {
                acc = lse2(acc, alpha[prev + s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = lse2(acc, alpha[prev + s - 2]);
            }
            alpha[cur + s] = if acc <= NEG_INF {
                NEG_INF
            } else {
                acc + lp[t * classes + ext[s]]
            };
        }
    }
    alpha
}

/// Forward DP over raw logits `[T, C]` (log-softmax applied per frame).
pub fn ctc_lattice<T: Scalar>(logits: &Tensor<T>, label: &[usize]) -> Result<CtcLattice> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "CTC logits must be [T, C], got {:?}",
            logits.shape()
        )));
    }
    let (frames, classes) = (logits.shape()[0], logits.shape()[1]);
    validate(frames, classes, label)?;
    let raw: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let lp = log_softmax_rows(&raw, classes);
    let ext = extended(label, classes - 1);
    let alpha = forward_table(&lp, frames, classes, &ext);
    let s_len = ext.len();
    let last = (frames - 1) * s_len;
    let ll = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    Ok(CtcLattice {
        alpha: Tensor::new(&[frames, s_len], alpha)?,
        log_likelihood: ll,
    })
}

/// `−log p(label | logits)` for logits `[T, N_c + 1]`.
pub fn ctc_loss<T: Scalar>(logits: &Tensor<T>, label: &[usize]) -> Result<f64> {
    Ok(ctc_lattice(logits, label)?.loss())
}

/// Loss and its gradient with respect to the raw logits of one sample.
pub fn ctc_loss_and_grad(logits: &[f64], frames: usize, classes: usize, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    validate(frames, classes, label)?;
    let blank = classes - 1;
    let lp = log_softmax_rows(logits, classes);
    let ext = extended(label, blank);
    let s_len = ext.len();
    let alpha = forward_table(&lp, frames, classes, &ext);
    // beta[t][s]: log-prob of completing the label from state s after
    // frame t, excluding frame t's emission.
    let mut beta = vec![NEG_INF; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    beta[last + s_len - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        let cur = t * s_len;
        let nxt = (t + 1) * s_len;
        let (head, tail) = beta.split_at_mut(nxt);
        let emit = |s: usize| tail[s] + lp[(t + 1) * classes + ext[s]];
        for s in 0..s_len {
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = lse2(acc, emit(s + 1));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                acc = lse2(acc, emit(s + 2));
            }
            head[cur + s] = if acc <= NEG_INF / 2.0 { NEG_INF } else { acc };
        }
    }
    let ll = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if ll <= NEG_INF / 2.0 {
        return Err(Error::InfeasibleAlignment {
            frames,
            label_len: label.len(),
            required: min_frames(label),
        });
    }
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = &mut grad[t * classes..(t + 1) * classes];
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp[t * classes + k].exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a <= NEG_INF || b <= NEG_INF {
                continue;
            }
            row[ext[s]] -= (a + b - ll).exp();
        }
    }
    Ok((-ll, grad))
}

/// Per-sample CTC losses recorded on the tape.
///
/// `logits` is `[B, T, N_c + 1]`. Samples whose label cannot be aligned in
/// `T` frames contribute zero loss and zero gradient; they are reported as
/// `false` in the returned mask.
pub fn ctc_loss_batch<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[Vec<usize>]) -> Result<(Var, Vec<bool>)> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[0] != labels.len() {
        return Err(Error::dim("ctc_loss_batch", &s, &[labels.len()]));
    }
    let (b, frames, classes) = (s[0], s[1], s[2]);
    let block = frames * classes;
    let data: Vec<f64> = tape.data(logits).iter().map(|v| v.as_f64()).collect();
    let mut losses = Vec::with_capacity(b);
    let mut jac = Vec::with_capacity(b * block);
    let mut feasible = Vec::with_capacity(b);
    for (i, label) in labels.iter().enumerate() {
        match ctc_loss_and_grad(&data[i * block..(i + 1) * block], frames, classes, label) {
            Ok((l, g)) => {
                losses.push(T::from_f64(l));
                jac.extend(g.into_iter().map(T::from_f64));
                feasible.push(true);
            }
            Err(Error::InfeasibleAlignment { .. }) => {
                losses.push(T::zero());
                jac.extend(std::iter::repeat_n(T::zero(), block));
                feasible.push(false);
            }
            Err(e) => return Err(e),
        }
    }
    let out = tape.rowwise_loss(logits, losses, jac)?;
    Ok((out, feasible))
}

/// Collapsed best-path output.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedText {
    pub indices: Vec<usize>,
    /// Per-frame argmax, blanks included.
    pub trace: Vec<usize>,
    /// Mean max-probability over the frames that emitted a character
    /// (1.0 for empty output).
    pub confidence: f64,
}

/// Greedy CTC decoding: per-frame argmax, merge runs, drop blanks.
/// Ties resolve to the lowest class index.
pub fn greedy_decode<T: Scalar>(logits: &Tensor<T>) -> Result<DecodedText> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "decode expects [T, C] logits, got {:?}",
            logits.shape()
        )));
    }
    let classes = logits.shape()[1];
    let blank = classes - 1;
    let mut trace = Vec::new();
    let mut probs = Vec::new();
    for row in logits.data().chunks(classes) {
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        let mx = row[best].as_f64();
        let z: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
        trace.push(best);
        probs.push(1.0 / z);
    }
    let mut indices = Vec::new();
    let mut conf = Vec::new();
    let mut prev = None;
    for (t, &c) in trace.iter().enumerate() {
        if Some(c) != prev && c != blank {
            indices.push(c);
            conf.push(probs[t]);
        }
        prev = Some(c);
    }
    let confidence = if conf.is_empty() {
        1.0
    } else {
        conf.iter().sum::<f64>() / conf.len() as f64
    };
    Ok(DecodedText {
        indices,
        trace,
        confidence,
    })
}

/// Collapses an explicit argmax trace.
pub fn collapse(trace: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in trace {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Lowercases and keeps only alphanumeric characters.
pub fn normalize_word(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Exact-match rate after case folding and special-character filtering.
pub fn word_accuracy<S: AsRef<str>, R: AsRef<str>>(predictions: &[S], references: &[R]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("word accuracy over an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| normalize_word(p.as_ref()) == normalize_word(r.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn single_forced_path() {
        // p(c) = 1 at the only frame
        let logits = t(&[1, 2], &[0.0, -1e4]);
        assert!(ctc_loss(&logits, &[0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_three_frames_single_char() {
        // 6 of the 8 length-3 paths over {a, blank} collapse to "a"
        let logits = Tensor::<f64>::zeros(&[3, 2]);
        let l = ctc_loss(&logits, &[0]).unwrap();
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn repeat_needs_separator() {
        assert_eq!(min_frames(&[0, 0]), 3);
        assert_eq!(min_frames(&[0, 1, 1, 1]), 6);
        let logits = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            ctc_loss(&logits, &[0, 0]),
            Err(Error::InfeasibleAlignment { required: 3, .. })
        ));
    }

    #[test]
    fn lattice_is_log_probabilities() {
        let logits = t(&[4, 3], &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3, -0.7, 0.2, 0.9, 0.0, 0.0, 0.4]);
        let lat = ctc_lattice(&logits, &[0, 1]).unwrap();
        assert_eq!(lat.alpha.shape(), &[4, 5]);
        assert!(lat.alpha.data().iter().all(|&a| a <= 0.0));
        assert!(lat.loss() >= 0.0);
    }

    #[test]
    fn rejects_blank_in_label() {
        let logits = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(ctc_loss(&logits, &[2]), Err(Error::Input(_))));
    }

    fn one_hot_trace(trace: &[usize], classes: usize) -> Tensor<f64> {
        let mut v = vec![0.0; trace.len() * classes];
        for (t, &c) in trace.iter().enumerate() {
            v[t * classes + c] = 5.0;
        }
        t(&[trace.len(), classes], &v)
    }

    #[test]
    fn greedy_collapse_rules() {
        // classes: a=0, b=1, blank=2
        let d = greedy_decode(&one_hot_trace(&[2, 0, 0, 2, 1], 3)).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        let d = greedy_decode(&one_hot_trace(&[2, 2, 2], 3)).unwrap();
        assert!(d.indices.is_empty());
        let d = greedy_decode(&one_hot_trace(&[0, 2, 0], 3)).unwrap();
        assert_eq!(d.indices, vec![0, 0]);
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let d = greedy_decode(&Tensor::<f64>::zeros(&[2, 3])).unwrap();
        assert_eq!(d.trace, vec![0, 0]);
        assert_eq!(d.indices, vec![0]);
    }

    #[test]
    fn word_accuracy_rules() {
        assert_eq!(word_accuracy(&["ab", "c"], &["ab", "c"]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&["CAT"], &["cat"]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&["a-b!"], &["ab"]).unwrap(), 1.0);
        assert_eq!(
            word_accuracy(&["a", "b", "c", "x"], &["a", "b", "c", "d"]).unwrap(),
            0.75
        );
        assert!(word_accuracy(&["a"], &["a", "b"]).is_err());
    }
}
