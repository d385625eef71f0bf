//! Prediction head and the per-visit loss terms.

use crate::attention::sigmoid;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::tape::{Tape, Var};

/// Probability clamp used by the cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

/// `σ(Z Wᵀ + b)` for a batch of representations `Z` (rows × 3·dim).
pub fn predict_tape(tape: &mut Tape, z: Var, w: Var, b: Var) -> Var {
    let logits = tape.matmul_bt(z, w);
    let logits = tape.add_row(logits, b);
    tape.sigmoid(logits)
}

/// Per-medication probabilities for one representation vector.
pub fn predict(z: &[f64], w: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != z.len() || w.rows() != b.len() {
        return Err(Error::Structure(format!(
            "head is {}x{} with {} biases but the representation has length {}",
            w.rows(),
            w.cols(),
            b.len(),
            z.len()
        )));
    }
    Ok((0..w.rows())
        .map(|k| {
            let s: f64 = w.row(k).iter().zip(z).map(|(a, x)| a * x).sum();
            sigmoid(s + b[k])
        })
        .collect())
}

/// Summed binary cross-entropy over medications for one visit.
pub fn bce_loss(probs: &[f64], truth: &[bool]) -> f64 {
    probs
        .iter()
        .zip(truth)
        .map(|(&p, &m)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if m {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Pairwise hinge between positives and negatives, divided by |M|.
pub fn margin_loss(probs: &[f64], truth: &[bool]) -> f64 {
    let n = probs.len() as f64;
    let mut total = 0.0;
    for (i, &pi) in probs.iter().enumerate() {
        if !truth[i] {
            continue;
        }
        for (j, &pj) in probs.iter().enumerate() {
            if !truth[j] {
                total += (1.0 - (pi - pj)).max(0.0);
            }
        }
    }
    total / n
}
