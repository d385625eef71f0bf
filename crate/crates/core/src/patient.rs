//! Visit embeddings and the three two-layer GRUs that turn a visit history
//! into the per-visit representation `z_t = [z_d^t ; z_p^t ; z_m^{t−1}]`.

use std::rc::Rc;

use crate::corpus::IndexedPatient;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::ontology::EntityType;
use crate::tape::{Tape, Var};

/// One GRU layer with separate input and hidden paths for the reset (0),
/// update (1) and candidate (2) transforms. Weights are `hidden × input`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub w_i: [Mat; 3],
    pub w_h: [Mat; 3],
    pub b_i: [Mat; 3],
    pub b_h: [Mat; 3],
}

impl GruLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruLayer {
            w_i: std::array::from_fn(|_| Mat::zeros(hidden, input)),
            w_h: std::array::from_fn(|_| Mat::zeros(hidden, hidden)),
            b_i: std::array::from_fn(|_| Mat::zeros(1, hidden)),
            b_h: std::array::from_fn(|_| Mat::zeros(1, hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h[0].rows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruLayerVars {
    pub w_i: [Var; 3],
    pub w_h: [Var; 3],
    pub b_i: [Var; 3],
    pub b_h: [Var; 3],
}

impl GruLayerVars {
    pub fn constants(tape: &mut Tape, l: &GruLayer) -> Self {
        GruLayerVars {
            w_i: std::array::from_fn(|k| tape.constant(l.w_i[k].clone())),
            w_h: std::array::from_fn(|k| tape.constant(l.w_h[k].clone())),
            b_i: std::array::from_fn(|k| tape.constant(l.b_i[k].clone())),
            b_h: std::array::from_fn(|k| tape.constant(l.b_h[k].clone())),
        }
    }
}

/// One recurrence step for a batch: `x` is B×input, `h` is B×hidden.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, l: &GruLayerVars) -> Var {
    let mut gi = [x; 3];
    let mut gh = [h; 3];
    for k in 0..3 {
        let a = tape.matmul_bt(x, l.w_i[k]);
        gi[k] = tape.add_row(a, l.b_i[k]);
        let c = tape.matmul_bt(h, l.w_h[k]);
        gh[k] = tape.add_row(c, l.b_h[k]);
    }
    let r = tape.add(gi[0], gh[0]);
    let r = tape.sigmoid(r);
    let z = tape.add(gi[1], gh[1]);
    let z = tape.sigmoid(z);
    let rh = tape.mul(r, gh[2]);
    let n = tape.add(gi[2], rh);
    let n = tape.tanh(n);
    let back = tape.sub(h, n);
    let keep = tape.mul(z, back);
    tape.add(n, keep)
}

/// Runs a stacked GRU over a batch of sequences given as per-step inputs.
/// Returns the top-layer hidden state after each step (`out[k]` after k
/// steps; `out[0]` is the zero initial state).
pub fn gru_states(tape: &mut Tape, inputs: &[Var], layers: &[GruLayerVars], batch: usize) -> Vec<Var> {
    let hidden = tape.value(layers[0].w_h[0]).rows();
    let zero = tape.constant(Mat::zeros(batch, hidden));
    let mut state = vec![zero; layers.len()];
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(zero);
    for &x in inputs {
        let mut input = x;
        for (l, layer) in layers.iter().enumerate() {
            state[l] = gru_cell(tape, input, state[l], layer);
            input = state[l];
        }
        out.push(input);
    }
    out
}

/// Rows of the batched representation matrix: (patient position in batch, visit index).
pub type RowOrder = Vec<(usize, usize)>;

/// Batched encoder over several patients. Rows of the returned matrix are
/// grouped by visit index, then by patient position.
pub fn encode_batch(
    tape: &mut Tape,
    tables: [Var; 3],
    grus: [&[GruLayerVars]; 3],
    patients: &[&IndexedPatient],
) -> (Var, RowOrder) {
    let b = patients.len();
    let t_max = patients.iter().map(|p| p.visits.len()).max().unwrap_or(0);
    let mut states: Vec<Vec<Var>> = Vec::with_capacity(3);
    for ty in EntityType::ALL {
        let table = tables[ty.index()];
        let width = tape.value(table).rows();
        // medications of the current visit never feed its own representation
        let steps = if ty == EntityType::Medication {
            t_max.saturating_sub(1)
        } else {
            t_max
        };
        let inputs: Vec<Var> = (0..steps)
            .map(|k| {
                let mut hot = Mat::zeros(b, width);
                for (row, p) in patients.iter().enumerate() {
                    if let Some(v) = p.visits.get(k) {
                        for &c in v.get(ty) {
                            hot.set(row, c, 1.0);
                        }
                    }
                }
                let hot = tape.constant(hot);
                tape.matmul(hot, table)
            })
            .collect();
        states.push(gru_states(tape, &inputs, grus[ty.index()], b));
    }
    let mut order = Vec::new();
    let mut parts = Vec::new();
    for k in 0..t_max {
        let rows: Vec<usize> = (0..b).filter(|&i| patients[i].visits.len() > k).collect();
        order.extend(rows.iter().map(|&i| (i, k)));
        let rows: Rc<[usize]> = rows.into();
        let d = tape.gather_rows(states[0][k + 1], rows.clone());
        let p = tape.gather_rows(states[1][k + 1], rows.clone());
        let m = tape.gather_rows(states[2][k], rows);
        parts.push(tape.concat_cols(&[d, p, m]));
    }
    let z = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    };
    (z, order)
}

/// Sum of the table rows of the active codes.
pub fn visit_embed(codes: &[usize], table: &Mat) -> Result<Vec<f64>> {
    let mut out = vec![0.0; table.cols()];
    for &c in codes {
        if c >= table.rows() {
            return Err(Error::Lookup(format!("code index {c} outside a table of {} rows", table.rows())));
        }
        for (o, v) in out.iter_mut().zip(table.row(c)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Final top-layer hidden state after feeding `seq`; zeros for an empty sequence.
pub fn gru_forward(seq: &[Vec<f64>], layers: &[GruLayer]) -> Vec<f64> {
    let mut t = Tape::new();
    let vars: Vec<GruLayerVars> = layers.iter().map(|l| GruLayerVars::constants(&mut t, l)).collect();
    let inputs: Vec<Var> = seq.iter().map(|x| t.constant(Mat::row_vector(x.clone()))).collect();
    let states = gru_states(&mut t, &inputs, &vars, 1);
    t.value(*states.last().expect("initial state present")).data().to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitRepresentation {
    pub h_d: Vec<f64>,
    pub h_p: Vec<f64>,
    pub h_m: Vec<f64>,
    pub z: Vec<f64>,
}

/// Representation of visit `t` (1-based) computed prefix by prefix.
pub fn encode_patient(
    patient: &IndexedPatient,
    tables: [&Mat; 3],
    grus: [&[GruLayer]; 3],
    t: usize,
) -> Result<VisitRepresentation> {
    if t == 0 || t > patient.visits.len() {
        return Err(Error::Lookup(format!(
            "visit {t} out of range 1..={}",
            patient.visits.len()
        )));
    }
    let prefix = |ty: EntityType, len: usize| -> Result<Vec<f64>> {
        let seq = patient.visits[..len]
            .iter()
            .map(|v| visit_embed(v.get(ty), tables[ty.index()]))
            .collect::<Result<Vec<_>>>()?;
        Ok(gru_forward(&seq, grus[ty.index()]))
    };
    let h_d = prefix(EntityType::Diagnosis, t)?;
    let h_p = prefix(EntityType::Procedure, t)?;
    let h_m = prefix(EntityType::Medication, t - 1)?;
    let z = [h_d.as_slice(), &h_p, &h_m].concat();
    Ok(VisitRepresentation { h_d, h_p, h_m, z })
}
