//! Order contrastive pretraining: was the second half of a contiguous
//! sequence moved in front of the first?
//!
//! Time encoding. Let the halves be `A = a_1..a_h` and `B = b_1..b_m` in
//! original order. Both orders are re-timed so that the first placed half
//! ends at 0 and the junction gap equals the original `b_1 - a_h`:
//!
//! * unswapped `A B`: `t - a_h`
//! * swapped `B A`: `B` gets `t - b_m`; `A` gets `t - a_1 + (b_1 - a_h)`
//!
//! With this anchor both orders produce the same relative-time layout for
//! the positions of the two halves, so the time channel alone carries no
//! label information.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::Dense;
use crate::error::{Error, Result};
use crate::event_stream::Observation;
use crate::featurizer::{encode_with_times, BoundVocab, TokenRow};

/// Smallest allowed half.
pub const MIN_HALF: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct OcpExample {
    pub row: TokenRow,
    /// 1 iff the halves were swapped.
    pub label: u8,
}

/// Relative times (days) and order for a contiguous sequence, see module docs.
pub fn ocp_layout(times: &[f64], swapped: bool) -> (Vec<usize>, Vec<f64>) {
    let n = times.len();
    let h = n / 2;
    if !swapped {
        let anchor = times[h - 1];
        return ((0..n).collect(), times.iter().map(|t| t - anchor).collect());
    }
    let gap = times[h] - times[h - 1];
    let (a1, bm) = (times[0], times[n - 1]);
    let mut order: Vec<usize> = (h..n).collect();
    order.extend(0..h);
    let rel = order
        .iter()
        .map(|&i| {
            if i >= h {
                times[i] - bm
            } else {
                times[i] - a1 + gap
            }
        })
        .collect();
    (order, rel)
}

/// Draws a contiguous window of at most `max_len` observations and swaps its
/// halves with probability one half. `None` when fewer than `2 * MIN_HALF`
/// observations are available or too few survive tokenisation.
pub fn ocp_make_example(
    observations: &[Observation],
    vocab: &BoundVocab,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<OcpExample> {
    let n = observations.len();
    // Even length keeps the zero at the same position in both orders.
    let len = n.min(max_len) & !1;
    if len < 2 * MIN_HALF {
        return None;
    }
    let start = rng.random_range(0..=n - len);
    let window = &observations[start..start + len];
    let swapped = rng.random::<bool>();
    let times: Vec<f64> = window.iter().map(|o| o.time).collect();
    let (order, rel) = ocp_layout(&times, swapped);
    let ordered: Vec<Observation> = order.iter().map(|&i| window[i].clone()).collect();
    let row = encode_with_times(&ordered, &rel, vocab, max_len, 2 * MIN_HALF)?;
    Some(OcpExample {
        row,
        label: swapped as u8,
    })
}

/// Binary cross-entropy of a linear head on pooled embeddings `[B, d]`.
pub fn ocp_loss(tape: &mut Tape, embedding: Var, labels: &[u8], head: &Dense) -> Result<Var> {
    let b = tape.shape(embedding).0;
    if b == 0 {
        return Err(Error::invalid("OCP batch is empty"));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let logits = head.apply(tape, embedding);
    let targets: Vec<f64> = labels.iter().map(|l| *l as f64).collect();
    Ok(tape.bce_with_logits(logits, &targets, &vec![1.0; b]))
}
