//! Metrics, the unseen-medication protocol, learned-graph analysis and the
//! rank-sum test.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{EvalConfig, TrainConfig, Variant};
use crate::cooccurrence::CooccurrenceGraph;
use crate::corpus::{IndexedCorpus, IndexedPatient, VisitCorpus};
use crate::error::{Error, Result};
use crate::model::{GateRecord, Model};
use crate::ontology::{EntityType, OntologyForest};

/// Per-visit probabilities and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Vec<Vec<f64>>,
    truth: Vec<Vec<bool>>,
    threshold: f64,
}

impl PredictionBatch {
    pub fn new(probs: Vec<Vec<f64>>, truth: Vec<Vec<bool>>, threshold: f64) -> Result<Self> {
        if probs.len() != truth.len() {
            return Err(Error::Structure(format!(
                "{} prediction rows for {} truth rows",
                probs.len(),
                truth.len()
            )));
        }
        let width = truth.first().map_or(0, Vec::len);
        if probs.iter().zip(&truth).any(|(p, t)| p.len() != width || t.len() != width) {
            return Err(Error::Structure("prediction rows differ in length".into()));
        }
        Ok(PredictionBatch {
            probs,
            truth,
            threshold,
        })
    }

    /// Runs the model in evaluation mode over every visit of the corpus.
    pub fn from_model(model: &Model, corpus: &IndexedCorpus, threshold: f64) -> Result<Self> {
        let patients: Vec<&IndexedPatient> = corpus.patients.iter().collect();
        let preds = model.predict(&patients)?;
        let n = model.n_meds();
        let mut probs = Vec::with_capacity(corpus.n_visits());
        let mut truth = Vec::with_capacity(corpus.n_visits());
        for (p, per_visit) in corpus.patients.iter().zip(preds) {
            for (v, pr) in p.visits.iter().zip(per_visit) {
                let mut t = vec![false; n];
                for &m in v.get(EntityType::Medication) {
                    t[m] = true;
                }
                probs.push(pr);
                truth.push(t);
            }
        }
        PredictionBatch::new(probs, truth, threshold)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn truth(&self) -> &[Vec<bool>] {
        &self.truth
    }

    /// Thresholded prediction set of visit `i`.
    pub fn predicted(&self, i: usize) -> Vec<bool> {
        self.probs[i].iter().map(|&p| p >= self.threshold).collect()
    }
}

fn counts(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let np = pred.iter().filter(|&&p| p).count();
    let nt = truth.iter().filter(|&&t| t).count();
    (tp, np, nt)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Visit-averaged Jaccard; a visit with an empty union scores 1.
pub fn jaccard(batch: &PredictionBatch) -> f64 {
    mean((0..batch.len()).map(|i| {
        let (tp, np, nt) = counts(&batch.predicted(i), &batch.truth[i]);
        let union = np + nt - tp;
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    }))
}

/// Visit-averaged F1; 0/0 ratios count as 0.
pub fn f1(batch: &PredictionBatch) -> f64 {
    mean((0..batch.len()).map(|i| {
        let (tp, np, nt) = counts(&batch.predicted(i), &batch.truth[i]);
        harmonic(ratio(tp, np), ratio(tp, nt))
    }))
}

/// Mean size of the thresholded prediction set.
pub fn med_count_mean(batch: &PredictionBatch) -> f64 {
    mean((0..batch.len()).map(|i| batch.predicted(i).iter().filter(|&&p| p).count() as f64))
}

/// Average precision of one ranking; tied scores share a threshold. `None`
/// when there are no positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut new_tp = 0;
        while k < order.len() && scores[order[k]] == s {
            seen += 1;
            if truth[order[k]] {
                new_tp += 1;
            }
            k += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            ap += new_tp as f64 / positives as f64 * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

/// Visit-averaged average precision; visits without positives are skipped.
pub fn prauc(batch: &PredictionBatch) -> f64 {
    let mut skipped = 0;
    let value = mean((0..batch.len()).filter_map(|i| {
        let ap = average_precision(&batch.probs[i], &batch.truth[i]);
        if ap.is_none() {
            skipped += 1;
        }
        ap
    }));
    if skipped > 0 {
        log::warn!("average precision skipped {skipped} visit(s) without positive labels");
    }
    value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision, recall and F1 of one medication across all visits.
pub fn target_scores(batch: &PredictionBatch, target: usize) -> TargetScores {
    let (mut tp, mut np, mut nt) = (0, 0, 0);
    for i in 0..batch.len() {
        let p = batch.probs[i][target] >= batch.threshold;
        let t = batch.truth[i][target];
        tp += usize::from(p && t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    let precision = ratio(tp, np);
    let recall = ratio(tp, nt);
    TargetScores {
        f1: harmonic(precision, recall),
        precision,
        recall,
    }
}

pub fn tf1(batch: &PredictionBatch, target: usize) -> f64 {
    target_scores(batch, target).f1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jaccard: f64,
    pub prauc: f64,
    pub f1: f64,
    /// Mean number of medications in the thresholded prediction set.
    pub med_count_mean: f64,
    pub tf1: Option<f64>,
    pub tprec: Option<f64>,
    pub trecall: Option<f64>,
    pub visits: usize,
}

pub fn report(batch: &PredictionBatch, target: Option<usize>) -> MetricReport {
    let t = target.map(|m| target_scores(batch, m));
    MetricReport {
        jaccard: jaccard(batch),
        prauc: prauc(batch),
        f1: f1(batch),
        med_count_mean: med_count_mean(batch),
        tf1: t.map(|s| s.f1),
        tprec: t.map(|s| s.precision),
        trecall: t.map(|s| s.recall),
        visits: batch.len(),
    }
}

pub fn evaluate(model: &Model, corpus: &IndexedCorpus, threshold: f64, target: Option<usize>) -> Result<MetricReport> {
    let batch = PredictionBatch::from_model(model, corpus, threshold)?;
    Ok(report(&batch, target))
}

/// Configuration wired for one ablation variant.
pub fn ablate(config: &TrainConfig, variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        ..config.clone()
    }
}

/// Target medication and the codes masked from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenSpec {
    pub target: String,
    /// Masked codes in graph node order (diagnoses, procedures, medications).
    pub sources: Vec<String>,
    pub forward_threshold: f64,
    pub reverse_threshold: f64,
}

/// Selects codes s ≠ target with `a(s→target) > forward` and
/// `a(target→s) > reverse` on the prior built from `train`.
pub fn build_unseen(forest: &OntologyForest, train: &VisitCorpus, target: &str, cfg: &EvalConfig) -> Result<UnseenSpec> {
    let target_leaf = forest.leaf(EntityType::Medication, target)?;
    let graph = CooccurrenceGraph::build_prior(&train.index(forest)?)?;
    let layout = graph.layout();
    let t = layout.global(EntityType::Medication, target_leaf);
    if graph.occurrences()[t] == 0 {
        return Err(Error::Lookup(format!("target {target:?} never occurs in the training visits")));
    }
    let mut sources = Vec::new();
    for (s, w_ts) in graph.neighborhood(t)? {
        if s == t || w_ts <= cfg.unseen_reverse {
            continue;
        }
        if graph.weight(s, t).is_some_and(|w| w > cfg.unseen_forward) {
            sources.push(layout.code(forest, s).to_string());
        }
    }
    if sources.is_empty() {
        log::warn!("no code passes the unseen thresholds for {target:?}; evaluation is the standard setting");
    }
    Ok(UnseenSpec {
        target: target.to_string(),
        sources,
        forward_threshold: cfg.unseen_forward,
        reverse_threshold: cfg.unseen_reverse,
    })
}

/// Removes every source code from every visit of `corpus`.
pub fn apply_mask(corpus: &VisitCorpus, spec: &UnseenSpec) -> VisitCorpus {
    let masked: BTreeSet<&str> = spec.sources.iter().map(String::as_str).collect();
    let mut out = corpus.clone();
    for p in &mut out.patients {
        for v in &mut p.visits {
            for ty in EntityType::ALL {
                v.codes_mut(ty).retain(|c| !masked.contains(c.as_str()));
            }
        }
    }
    out
}

/// Masks only the first `n_train` patients; later patients are returned as is.
pub fn mask_training_part(corpus: &VisitCorpus, n_train: usize, spec: &UnseenSpec) -> VisitCorpus {
    let head = VisitCorpus::new(corpus.patients[..n_train].to_vec());
    let mut out = apply_mask(&head, spec);
    out.patients.extend_from_slice(&corpus.patients[n_train..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample: pairs (x, y) with x > y, ties counting one half.
    pub u: f64,
    pub mean: f64,
    pub variance: f64,
    pub z: f64,
    /// Two-sided normal-approximation p-value with tie-corrected variance.
    pub p_value: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// Ranks 1..=n with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[k]] {
            end += 1;
        }
        let r = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            ranks[i] = r;
        }
        k = end + 1;
    }
    ranks
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Undefined(format!(
            "rank-sum test needs at least 2 samples per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("rank-sum test received a non-finite value".into()));
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&all);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let n = nx + ny;
    let rx: f64 = ranks[..x.len()].iter().sum();
    let u = rx - nx * (nx + 1.0) / 2.0;
    let mean = nx * ny / 2.0;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let mut end = k;
        while end + 1 < sorted.len() && sorted[end + 1] == sorted[k] {
            end += 1;
        }
        let t = (end - k + 1) as f64;
        ties += t * t * t - t;
        k = end + 1;
    }
    let variance = nx * ny / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let (z, p_value) = if variance <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = (u - mean) / variance.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (z, (2.0 * normal.cdf(-z.abs())).min(1.0))
    };
    Ok(MannWhitney {
        u,
        mean,
        variance,
        z,
        p_value,
        n_x: x.len(),
        n_y: y.len(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub strong_prior_threshold: f64,
    pub gated_edges: usize,
    pub retained_strong: usize,
    pub retained_weak: usize,
    pub pruned_strong: usize,
    pub pruned_weak: usize,
    /// Distinct target nodes of pruned edges.
    pub pruned_targets: usize,
    pub median_out_degree_pruned_targets: Option<f64>,
    pub median_out_degree_all: f64,
    /// Pruned-edge targets versus all nodes; absent when a group is too small.
    pub mann_whitney: Option<MannWhitney>,
    pub note: String,
}

/// Edge-refinement summary. Out-degree counts non-self edges of the prior graph.
pub fn analyze_graph(graph: &CooccurrenceGraph, gates: &[GateRecord], strong_prior: f64) -> Result<GraphReport> {
    let w = graph.weights();
    let mut r = GraphReport {
        strong_prior_threshold: strong_prior,
        gated_edges: gates.len(),
        retained_strong: 0,
        retained_weak: 0,
        pruned_strong: 0,
        pruned_weak: 0,
        pruned_targets: 0,
        median_out_degree_pruned_targets: None,
        median_out_degree_all: 0.0,
        mann_whitney: None,
        note: "two-sided p-value from the normal approximation to U with tie-corrected variance; \
               unreliable for very small groups"
            .into(),
    };
    let mut targets = BTreeSet::new();
    for g in gates {
        if g.edge >= graph.n_edges() || graph.is_self(g.edge) {
            return Err(Error::Structure(format!("gate record for invalid edge {}", g.edge)));
        }
        let strong = w[g.edge] >= strong_prior;
        match (g.retained, strong) {
            (true, true) => r.retained_strong += 1,
            (true, false) => r.retained_weak += 1,
            (false, true) => r.pruned_strong += 1,
            (false, false) => r.pruned_weak += 1,
        }
        if !g.retained {
            targets.insert(graph.targets()[g.edge]);
        }
    }
    let degrees: Vec<f64> = graph.out_degrees().into_iter().map(|d| d as f64).collect();
    let pruned: Vec<f64> = targets.iter().map(|&t| degrees[t]).collect();
    r.pruned_targets = pruned.len();
    r.median_out_degree_pruned_targets = median(&pruned);
    r.median_out_degree_all = median(&degrees).unwrap_or(0.0);
    r.mann_whitney = match mann_whitney_u(&pruned, &degrees) {
        Ok(m) => Some(m),
        Err(Error::Undefined(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(r)
}
