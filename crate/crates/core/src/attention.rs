//! Prior-guided graph attention with hard-concrete edge gates.
//!
//! Scores: `s_ij = leaky(aᵀ[W h_i ; W h_j]) + η·ln p_ij`. Gates on non-self
//! edges: `z = σ((logit u + ln κ̄)/β)` with `ln κ̄ = ln κ + γ·ln p` in training
//! and the hard threshold `z = 1{ln κ̄ ≥ 0}` at evaluation. Self-loops are
//! always open. Attention is the gated softmax of `s/τ` over each node's
//! out-neighborhood, and the layer update is `h_i' = elu(Σ_j α_ij W h_j)`.

use std::rc::Rc;

use rand::distributions::Open01;
use rand::Rng;

use crate::config::AttentionConfig;
use crate::cooccurrence::CooccurrenceGraph;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::tape::{Tape, Var};

/// Floor applied to prior weights before taking logarithms.
pub const PRIOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one attention layer. `a` stacks the source and target
/// halves of the scorer vector (2·dim × 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Mat,
    pub a: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub a: Var,
}

impl LayerVars {
    pub fn constants(tape: &mut Tape, p: &LayerParams) -> Self {
        LayerVars {
            w: tape.constant(p.w.clone()),
            a: tape.constant(p.a.clone()),
        }
    }
}

/// Graph indices and prior terms in the shapes the tape ops need.
#[derive(Debug, Clone)]
pub struct GraphPlan {
    n_nodes: usize,
    offsets: Rc<[usize]>,
    sources: Rc<[usize]>,
    targets: Rc<[usize]>,
    non_self: Rc<[usize]>,
    /// `ln max(p, floor)` per edge (E×1).
    log_prior: Mat,
    /// Same, restricted to non-self edges.
    log_prior_gated: Vec<f64>,
    /// 1 on self-loops, 0 elsewhere (E×1).
    self_mask: Mat,
}

impl GraphPlan {
    pub fn new(graph: &CooccurrenceGraph) -> Self {
        let log_prior: Vec<f64> = graph
            .weights()
            .iter()
            .map(|&p| p.max(PRIOR_FLOOR).ln())
            .collect();
        let non_self = graph.non_self_edges();
        let log_prior_gated = non_self.iter().map(|&e| log_prior[e]).collect();
        let self_mask = (0..graph.n_edges())
            .map(|e| if graph.is_self(e) { 1.0 } else { 0.0 })
            .collect();
        GraphPlan {
            n_nodes: graph.n_nodes(),
            offsets: graph.offsets().into(),
            sources: graph.sources().into(),
            targets: graph.targets().into(),
            non_self: non_self.into(),
            log_prior: Mat::column(log_prior),
            log_prior_gated,
            self_mask: Mat::column(self_mask),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.sources.len()
    }

    /// Number of gated (non-self) edges; one `ln κ` per such edge.
    pub fn n_gated(&self) -> usize {
        self.non_self.len()
    }

    pub fn non_self(&self) -> &[usize] {
        &self.non_self
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `ln κ̄ = ln κ + γ·ln p` for every gated edge.
    pub fn log_kappa_bar(&self, log_kappa: &[f64], gamma: f64) -> Vec<f64> {
        log_kappa
            .iter()
            .zip(&self.log_prior_gated)
            .map(|(k, lp)| k + gamma * lp)
            .collect()
    }

    /// Expands gated-edge gate values to all edges, self-loops set to 1.
    pub fn expand_gates(&self, gated: &[f64]) -> Vec<f64> {
        let mut z = self.self_mask.data().to_vec();
        for (&e, &g) in self.non_self.iter().zip(gated) {
            z[e] = g;
        }
        z
    }

    /// Edge gates on the tape. Train mode needs one `logit u` per gated edge.
    pub fn gates(
        &self,
        tape: &mut Tape,
        log_kappa: Var,
        cfg: &AttentionConfig,
        mode: Mode,
        noise: Option<&[f64]>,
    ) -> Result<Var> {
        if !(cfg.beta > 0.0) {
            return Err(Error::Config(format!("concrete temperature must be > 0, got {}", cfg.beta)));
        }
        match mode {
            Mode::Eval => {
                let kbar = self.log_kappa_bar(tape.value(log_kappa).data(), cfg.gamma);
                let hard: Vec<f64> = kbar.iter().map(|&k| if k >= 0.0 { 1.0 } else { 0.0 }).collect();
                Ok(tape.constant(Mat::column(self.expand_gates(&hard))))
            }
            Mode::Train => {
                let noise = noise.ok_or_else(|| Error::Invariant("train-mode gates need noise".into()))?;
                assert_eq!(noise.len(), self.n_gated(), "one noise draw per gated edge");
                let shift: Vec<f64> = self
                    .log_prior_gated
                    .iter()
                    .zip(noise)
                    .map(|(lp, n)| cfg.gamma * lp + n)
                    .collect();
                let shift = tape.constant(Mat::column(shift));
                let pre = tape.add(log_kappa, shift);
                let pre = tape.scale(pre, 1.0 / cfg.beta);
                let z = tape.sigmoid(pre);
                let spread = tape.scatter_add_rows(z, self.non_self.clone(), self.n_edges());
                let ones = tape.constant(self.self_mask.clone());
                Ok(tape.add(spread, ones))
            }
        }
    }

    /// `Σ σ(ln κ̄)` over gated edges.
    pub fn sparsity_penalty(&self, tape: &mut Tape, log_kappa: Var, gamma: f64) -> Var {
        let lp = tape.constant(Mat::column(
            self.log_prior_gated.iter().map(|v| gamma * v).collect(),
        ));
        let kbar = tape.add(log_kappa, lp);
        let pi = tape.sigmoid(kbar);
        tape.sum(pi)
    }

    /// Raw scores (E×1) and the transformed features `h W` (N×dim).
    pub fn raw_scores(
        &self,
        tape: &mut Tape,
        h: Var,
        layer: &LayerVars,
        cfg: &AttentionConfig,
    ) -> (Var, Var) {
        let dim = tape.value(layer.w).cols();
        let wh = tape.matmul(h, layer.w);
        let a_src = tape.slice_rows(layer.a, 0, dim);
        let a_dst = tape.slice_rows(layer.a, dim, dim);
        let ss = tape.matmul(wh, a_src);
        let sd = tape.matmul(wh, a_dst);
        let gs = tape.gather_rows(ss, self.sources.clone());
        let gd = tape.gather_rows(sd, self.targets.clone());
        let pair = tape.add(gs, gd);
        let g = tape.leaky_relu(pair, cfg.leaky_slope);
        let prior = tape.constant(self.log_prior.map(|v| cfg.eta * v));
        (tape.add(g, prior), wh)
    }

    /// One layer: returns (updated features, attention coefficients E×1).
    pub fn layer(
        &self,
        tape: &mut Tape,
        h: Var,
        layer: &LayerVars,
        gates: Var,
        cfg: &AttentionConfig,
    ) -> Result<(Var, Var)> {
        let (scores, wh) = self.raw_scores(tape, h, layer, cfg);
        if !tape.value(scores).is_finite() {
            return Err(Error::Diverged("attention scores became non-finite".into()));
        }
        let alpha = tape
            .segment_softmax(scores, gates, self.offsets.clone(), cfg.tau)
            .ok_or_else(|| Error::Invariant("a node has no open gate in its neighborhood".into()))?;
        let msgs = tape.gather_rows(wh, self.targets.clone());
        let weighted = tape.mul_col(msgs, alpha);
        let summed = tape.scatter_add_rows(weighted, self.sources.clone(), self.n_nodes);
        Ok((tape.elu(summed), alpha))
    }

    /// Stacks all layers starting from `h0`, sharing one gate vector.
    pub fn encode(
        &self,
        tape: &mut Tape,
        h0: Var,
        layers: &[LayerVars],
        gates: Var,
        cfg: &AttentionConfig,
    ) -> Result<Var> {
        let mut h = h0;
        for layer in layers {
            h = self.layer(tape, h, layer, gates, cfg)?.0;
        }
        Ok(h)
    }
}

/// `logit u` for `u ~ Uniform(0, 1)`, one per gated edge.
pub fn sample_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            (u / (1.0 - u)).ln()
        })
        .collect()
}

/// Gate values for every edge of the graph (self-loops fixed at 1).
pub fn sample_gates(
    graph: &CooccurrenceGraph,
    log_kappa: &[f64],
    cfg: &AttentionConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let plan = GraphPlan::new(graph);
    check_gated(&plan, log_kappa)?;
    let noise = match mode {
        Mode::Train => Some(sample_noise(rng, plan.n_gated())),
        Mode::Eval => None,
    };
    let mut t = Tape::new();
    let lk = t.constant(Mat::column(log_kappa.to_vec()));
    let z = plan.gates(&mut t, lk, cfg, mode, noise.as_deref())?;
    Ok(t.value(z).data().to_vec())
}

fn check_gated(plan: &GraphPlan, log_kappa: &[f64]) -> Result<()> {
    if log_kappa.len() != plan.n_gated() {
        return Err(Error::Structure(format!(
            "{} gate parameters for {} gated edges",
            log_kappa.len(),
            plan.n_gated()
        )));
    }
    Ok(())
}

/// Inclusion probabilities `σ(ln κ̄)` of the gated edges.
pub fn inclusion_probabilities(graph: &CooccurrenceGraph, log_kappa: &[f64], gamma: f64) -> Vec<f64> {
    GraphPlan::new(graph)
        .log_kappa_bar(log_kappa, gamma)
        .into_iter()
        .map(sigmoid)
        .collect()
}

pub fn sparsity_penalty(graph: &CooccurrenceGraph, log_kappa: &[f64], gamma: f64) -> f64 {
    inclusion_probabilities(graph, log_kappa, gamma).iter().sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw per-edge scores for features `h`.
pub fn raw_scores(
    graph: &CooccurrenceGraph,
    h: &Mat,
    layer: &LayerParams,
    cfg: &AttentionConfig,
) -> Vec<f64> {
    let plan = GraphPlan::new(graph);
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let lv = LayerVars::constants(&mut t, layer);
    let (s, _) = plan.raw_scores(&mut t, hv, &lv, cfg);
    t.value(s).data().to_vec()
}

/// One attention layer with explicit gates over all edges. Returns the
/// updated features and the attention coefficients.
pub fn masked_softmax_layer(
    graph: &CooccurrenceGraph,
    h: &Mat,
    gates: &[f64],
    layer: &LayerParams,
    cfg: &AttentionConfig,
) -> Result<(Mat, Vec<f64>)> {
    let plan = GraphPlan::new(graph);
    if gates.len() != plan.n_edges() {
        return Err(Error::Structure(format!(
            "{} gates for {} edges",
            gates.len(),
            plan.n_edges()
        )));
    }
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let lv = LayerVars::constants(&mut t, layer);
    let z = t.constant(Mat::column(gates.to_vec()));
    let (out, alpha) = plan.layer(&mut t, hv, &lv, z, cfg)?;
    Ok((t.value(out).clone(), t.value(alpha).data().to_vec()))
}

/// Full co-occurrence encoder. Returns E^co and the gates used.
pub fn encode(
    graph: &CooccurrenceGraph,
    h0: &Mat,
    layers: &[LayerParams],
    log_kappa: &[f64],
    cfg: &AttentionConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Mat, Vec<f64>)> {
    let plan = GraphPlan::new(graph);
    check_gated(&plan, log_kappa)?;
    let noise = match mode {
        Mode::Train => Some(sample_noise(rng, plan.n_gated())),
        Mode::Eval => None,
    };
    let mut t = Tape::new();
    let hv = t.constant(h0.clone());
    let lk = t.constant(Mat::column(log_kappa.to_vec()));
    let z = plan.gates(&mut t, lk, cfg, mode, noise.as_deref())?;
    let lvs: Vec<LayerVars> = layers.iter().map(|l| LayerVars::constants(&mut t, l)).collect();
    let out = plan.encode(&mut t, hv, &lvs, z, cfg)?;
    Ok((t.value(out).clone(), t.value(z).data().to_vec()))
}
