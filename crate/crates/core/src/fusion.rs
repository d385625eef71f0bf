//! Convex gate between ontology and co-occurrence embeddings:
//! `β = σ(wᵀ[hie; co] + b)`, `fused = β·hie + (1 − β)·co`.

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::tape::{Tape, Var};

/// Returns (fused rows, β column). `w` is 2·dim × 1 and `b` is 1×1.
pub fn fuse_tape(tape: &mut Tape, hie: Var, co: Var, w: Var, b: Var) -> (Var, Var) {
    let both = tape.concat_cols(&[hie, co]);
    let logits = tape.matmul(both, w);
    let logits = tape.add_row(logits, b);
    let beta = tape.sigmoid(logits);
    let diff = tape.sub(hie, co);
    let moved = tape.mul_col(diff, beta);
    (tape.add(co, moved), beta)
}

/// Plain average of the two pathways.
pub fn average_tape(tape: &mut Tape, hie: Var, co: Var) -> Var {
    let s = tape.add(hie, co);
    tape.scale(s, 0.5)
}

pub fn fuse(hie: &Mat, co: &Mat, w: &[f64], b: f64) -> Result<(Mat, Vec<f64>)> {
    if hie.shape() != co.shape() {
        return Err(Error::Structure(format!(
            "hierarchical table is {:?} but co-occurrence table is {:?}",
            hie.shape(),
            co.shape()
        )));
    }
    if w.len() != 2 * hie.cols() {
        return Err(Error::Structure(format!(
            "gate vector has length {}, expected {}",
            w.len(),
            2 * hie.cols()
        )));
    }
    let mut t = Tape::new();
    let hv = t.constant(hie.clone());
    let cv = t.constant(co.clone());
    let wv = t.constant(Mat::column(w.to_vec()));
    let bv = t.constant(Mat::scalar(b));
    let (f, beta) = fuse_tape(&mut t, hv, cv, wv, bv);
    Ok((t.value(f).clone(), t.value(beta).data().to_vec()))
}
