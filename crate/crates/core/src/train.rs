//! Optimization loop with early stopping on validation Jaccard.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::sample_noise;
use crate::config::TrainConfig;
use crate::cooccurrence::{csv_err, CooccurrenceGraph};
use crate::corpus::{IndexedCorpus, IndexedPatient};
use crate::error::{Error, Result};
use crate::eval::{jaccard, PredictionBatch};
use crate::matrix::Mat;
use crate::model::{seeded_rng, streams, LossParts, Model, ParameterStore};
use crate::ontology::OntologyForest;
use crate::tape::Tape;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParameterStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Option<Mat>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g.data()[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g.data()[k] * g.data()[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_jaccard: f64,
    pub retained_edges: usize,
    pub mean_beta_d: f64,
    pub mean_beta_p: f64,
    pub mean_beta_m: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_jaccard: f64,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.log[self.best_epoch - 1]
    }
}

/// Loss and gradients of one batch with the given gate noise.
pub fn loss_and_gradients(
    model: &Model,
    patients: &[&IndexedPatient],
    noise: &[f64],
) -> Result<(LossParts, Vec<Option<Mat>>)> {
    let mut tape = Tape::new();
    let (root, bound, parts) = model.loss(&mut tape, patients, noise)?;
    let mut grads = tape.backward(root);
    let grads: Vec<Option<Mat>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    for (i, g) in grads.iter().enumerate() {
        if g.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite gradient for {}",
                model.params.names()[i]
            )));
        }
    }
    Ok((parts, grads))
}

/// Trains from scratch: builds the prior from `train`, then optimizes
/// until the epoch limit or until validation Jaccard stops improving.
pub fn train(
    forest: &OntologyForest,
    train: &IndexedCorpus,
    val: &IndexedCorpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.patients.is_empty() || val.patients.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits (train {}, validation {})",
            train.patients.len(),
            val.patients.len()
        )));
    }
    let graph = CooccurrenceGraph::build_prior(train)?;
    let mut model = Model::new(forest, &graph, config)?;
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut shuffle_rng = seeded_rng(config.seed, streams::SHUFFLE);
    let mut gate_rng = seeded_rng(config.seed, streams::GATES);

    let mut order: Vec<usize> = (0..train.patients.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_patients) {
            let batch: Vec<&IndexedPatient> = chunk.iter().map(|&i| &train.patients[i]).collect();
            let noise = sample_noise(&mut gate_rng, model.n_gated());
            let (parts, grads) = loss_and_gradients(&model, &batch, &noise)?;
            adam.step(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Diverged(format!("parameters became non-finite in epoch {epoch}")));
            }
            loss_sum += parts.total;
            steps += 1;
        }
        let val_jaccard = jaccard(&PredictionBatch::from_model(&model, val, 0.5)?);
        let betas = model.mean_betas()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_jaccard,
            retained_edges: model.retained_edges(),
            mean_beta_d: betas[0],
            mean_beta_p: betas[1],
            mean_beta_m: betas[2],
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val_jaccard {:.4} retained {}",
            record.train_loss,
            record.val_jaccard,
            record.retained_edges
        );
        log.push(record);
        if best.as_ref().map_or(true, |b| val_jaccard > b.1) {
            best = Some((epoch, val_jaccard, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val_jaccard, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_jaccard,
    })
}

pub fn write_log(records: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
