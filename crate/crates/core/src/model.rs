//! Parameter storage and the full forward pass: ontology encoder,
//! co-occurrence attention, fusion, patient GRUs and prediction head.

use std::rc::Rc;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, GraphPlan, LayerVars, Mode};
use crate::config::{TrainConfig, Variant};
use crate::cooccurrence::CooccurrenceGraph;
use crate::corpus::IndexedPatient;
use crate::error::{Error, Result};
use crate::fusion;
use crate::hierarchy::TreePlan;
use crate::matrix::Mat;
use crate::objective::{self, PROB_EPS};
use crate::ontology::{EntityType, OntologyForest};
use crate::patient::{self, GruLayerVars, RowOrder};
use crate::tape::{Tape, Var};

/// Independent random streams derived from the configured seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const GATES: u64 = 2;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named parameter matrices in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParameterStore {
    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total number of scalar entries.
    pub fn size(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }
}

/// Indices of each parameter inside the store.
#[derive(Debug, Clone)]
struct Layout {
    emb: [usize; 3],
    log_kappa: usize,
    attn: Vec<(usize, usize)>,
    fusion_w: usize,
    fusion_b: usize,
    /// Per type, per layer: w_i[3], w_h[3], b_i[3], b_h[3].
    gru: [Vec<[usize; 12]>; 3],
    head_w: usize,
    head_b: usize,
}

const GRU_LAYERS: usize = 2;
const GRU_NAMES: [&str; 12] = [
    "w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn",
];

/// Parameters bound to a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles produced by the embedding stage.
pub struct Embedded {
    /// Fused leaf embeddings per type.
    pub tables: [Var; 3],
    /// Fused leaf embeddings of all nodes (N×dim).
    pub fused: Var,
    pub hie: Option<Var>,
    pub co: Option<Var>,
    pub beta: Option<Var>,
    pub gates: Option<Var>,
    pub hyp: Option<Var>,
    pub sparse: Option<Var>,
}

/// Scalar values of the loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub bce: f64,
    pub margin: f64,
    pub hyp: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: TrainConfig,
    forest: OntologyForest,
    graph: CooccurrenceGraph,
    trees: [TreePlan; 3],
    plan: GraphPlan,
    layout: Layout,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh model with parameters drawn from the init stream of the seed.
    pub fn new(forest: &OntologyForest, graph: &CooccurrenceGraph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_graph(forest, graph)?;
        let plan = GraphPlan::new(graph);
        let mut rng = seeded_rng(config.seed, streams::INIT);
        let (params, layout) = init_params(forest, &plan, config, &mut rng);
        Ok(Model {
            config: config.clone(),
            forest: forest.clone(),
            graph: graph.clone(),
            trees: EntityType::ALL.map(|ty| TreePlan::new(forest.tree(ty))),
            plan,
            layout,
            params,
        })
    }

    /// Model with given parameters; names and shapes must match the layout.
    pub fn with_params(
        forest: &OntologyForest,
        graph: &CooccurrenceGraph,
        config: &TrainConfig,
        params: ParameterStore,
    ) -> Result<Self> {
        let mut m = Model::new(forest, graph, config)?;
        if params.names() != m.params.names() {
            return Err(Error::Structure("parameter names do not match the model layout".into()));
        }
        for (i, (a, b)) in params.values().iter().zip(m.params.values()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names()[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn forest(&self) -> &OntologyForest {
        &self.forest
    }

    pub fn graph(&self) -> &CooccurrenceGraph {
        &self.graph
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_meds(&self) -> usize {
        self.graph.sizes()[EntityType::Medication.index()]
    }

    pub fn log_kappa(&self) -> &[f64] {
        self.params.get(self.layout.log_kappa).data()
    }

    /// Places every parameter on the tape, differentiable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .values()
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Leaf embeddings per variant. `all_paths` forces both pathways to be
    /// computed (for export) without changing how they are combined.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mode: Mode,
        noise: Option<&[f64]>,
        all_paths: bool,
    ) -> Result<Embedded> {
        let l = &self.layout;
        let variant = self.config.variant;
        let cfg = &self.config.attention;

        let (hie, hyp) = if variant.uses_hierarchy() || all_paths {
            let mut leaves = Vec::with_capacity(3);
            let mut losses = Vec::with_capacity(3);
            for ty in EntityType::ALL {
                let plan = &self.trees[ty.index()];
                let (h, loss) = plan.encode(tape, bound.var(l.emb[ty.index()]));
                leaves.push(tape.gather_rows(h, plan.leaves()));
                losses.push(loss);
            }
            let a = tape.add(losses[0], losses[1]);
            let total = tape.add(a, losses[2]);
            (Some(tape.concat_rows(&leaves)), Some(total))
        } else {
            (None, None)
        };

        let (co, gates, sparse) = if variant.uses_cooccurrence() || all_paths {
            let h0: Vec<Var> = EntityType::ALL
                .iter()
                .map(|&ty| {
                    let plan = &self.trees[ty.index()];
                    tape.gather_rows(bound.var(l.emb[ty.index()]), plan.leaves())
                })
                .collect();
            let h0 = tape.concat_rows(&h0);
            let lk = bound.var(l.log_kappa);
            let gates = self.plan.gates(tape, lk, cfg, mode, noise)?;
            let layers: Vec<LayerVars> = l
                .attn
                .iter()
                .map(|&(w, a)| LayerVars {
                    w: bound.var(w),
                    a: bound.var(a),
                })
                .collect();
            let co = self.plan.encode(tape, h0, &layers, gates, cfg)?;
            let sparse = self.plan.sparsity_penalty(tape, lk, cfg.gamma);
            (Some(co), Some(gates), Some(sparse))
        } else {
            (None, None, None)
        };

        let (fused, beta) = match variant {
            Variant::Full => {
                let (f, b) = fusion::fuse_tape(
                    tape,
                    hie.expect("hierarchy path"),
                    co.expect("co-occurrence path"),
                    bound.var(l.fusion_w),
                    bound.var(l.fusion_b),
                );
                (f, Some(b))
            }
            Variant::NoFus => (
                fusion::average_tape(tape, hie.expect("hierarchy path"), co.expect("co-occurrence path")),
                None,
            ),
            Variant::NoHie => (co.expect("co-occurrence path"), None),
            Variant::NoCo => (hie.expect("hierarchy path"), None),
        };
        let layout = self.graph.layout();
        let tables = EntityType::ALL.map(|ty| tape.slice_rows(fused, layout.start(ty), layout.sizes[ty.index()]));
        Ok(Embedded {
            tables,
            fused,
            hie,
            co,
            beta,
            gates,
            hyp: if variant.uses_hierarchy() { hyp } else { None },
            sparse: if variant.uses_cooccurrence() { sparse } else { None },
        })
    }

    /// Probabilities (rows × |M|) for every visit of the given patients.
    pub fn head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        emb: &Embedded,
        patients: &[&IndexedPatient],
    ) -> (Var, RowOrder) {
        let l = &self.layout;
        let grus: Vec<Vec<GruLayerVars>> = l
            .gru
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|ids| GruLayerVars {
                        w_i: [0, 1, 2].map(|k| bound.var(ids[k])),
                        w_h: [0, 1, 2].map(|k| bound.var(ids[3 + k])),
                        b_i: [0, 1, 2].map(|k| bound.var(ids[6 + k])),
                        b_h: [0, 1, 2].map(|k| bound.var(ids[9 + k])),
                    })
                    .collect()
            })
            .collect();
        let (z, order) = patient::encode_batch(tape, emb.tables, [&grus[0], &grus[1], &grus[2]], patients);
        let probs = objective::predict_tape(tape, z, bound.var(l.head_w), bound.var(l.head_b));
        (probs, order)
    }

    /// Medication targets in the row order of [`Model::head`].
    pub fn targets(&self, patients: &[&IndexedPatient], order: &RowOrder) -> Mat {
        let mut t = Mat::zeros(order.len(), self.n_meds());
        for (row, &(p, k)) in order.iter().enumerate() {
            for &m in patients[p].visits[k].get(EntityType::Medication) {
                t.set(row, m, 1.0);
            }
        }
        t
    }

    /// Training objective on a batch with fixed gate noise. Returns the root
    /// variable, the parameter bindings and the term values.
    pub fn loss(
        &self,
        tape: &mut Tape,
        patients: &[&IndexedPatient],
        noise: &[f64],
    ) -> Result<(Var, Bound, LossParts)> {
        let bound = self.bind(tape, true);
        let emb = self.embed(tape, &bound, Mode::Train, Some(noise), false)?;
        let (probs, order) = self.head(tape, &bound, &emb, patients);
        let targets = Rc::new(self.targets(patients, &order));
        let n_visits = order.len().max(1) as f64;
        let w = self.config.loss;
        let bce = tape.bce(probs, targets.clone(), PROB_EPS);
        let margin = tape.margin(probs, targets);
        let mut parts = LossParts {
            bce: tape.value(bce).item() / n_visits,
            margin: tape.value(margin).item() / n_visits,
            ..LossParts::default()
        };
        let a = tape.scale(bce, w.bce / n_visits);
        let b = tape.scale(margin, w.margin / n_visits);
        let mut total = tape.add(a, b);
        if let Some(h) = emb.hyp {
            parts.hyp = tape.value(h).item();
            let t = tape.scale(h, w.hyp);
            total = tape.add(total, t);
        }
        if let Some(s) = emb.sparse {
            parts.sparse = tape.value(s).item();
            let t = tape.scale(s, w.sparse);
            total = tape.add(total, t);
        }
        parts.total = tape.value(total).item();
        if !parts.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss: {parts:?}")));
        }
        Ok((total, bound, parts))
    }

    /// Number of gated noise draws needed per training step.
    pub fn n_gated(&self) -> usize {
        self.plan.n_gated()
    }

    /// Evaluation-mode probabilities for every visit, grouped per patient.
    pub fn predict(&self, patients: &[&IndexedPatient]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out: Vec<Vec<Vec<f64>>> = patients.iter().map(|p| vec![Vec::new(); p.visits.len()]).collect();
        if patients.is_empty() {
            return Ok(out);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let emb = self.embed(&mut tape, &bound, Mode::Eval, None, false)?;
        let (probs, order) = self.head(&mut tape, &bound, &emb, patients);
        let pm = tape.value(probs);
        for (row, &(p, k)) in order.iter().enumerate() {
            out[p][k] = pm.row(row).to_vec();
        }
        Ok(out)
    }

    /// Mean fusion weight per entity type in evaluation mode. Ablations
    /// report the fixed weight their wiring implies.
    pub fn mean_betas(&self) -> Result<[f64; 3]> {
        Ok(match self.config.variant {
            Variant::NoFus => [0.5; 3],
            Variant::NoHie => [0.0; 3],
            Variant::NoCo => [1.0; 3],
            Variant::Full => {
                let e = self.export_embeddings()?;
                let layout = self.graph.layout();
                EntityType::ALL.map(|ty| {
                    let s = layout.start(ty);
                    let n = layout.sizes[ty.index()];
                    if n == 0 {
                        0.0
                    } else {
                        e.beta[s..s + n].iter().sum::<f64>() / n as f64
                    }
                })
            }
        })
    }

    /// `ln κ̄` of every gated edge.
    pub fn log_kappa_bar(&self) -> Vec<f64> {
        self.plan.log_kappa_bar(self.log_kappa(), self.config.attention.gamma)
    }

    /// Gated edges kept by the evaluation-mode threshold.
    pub fn retained_edges(&self) -> usize {
        self.log_kappa_bar().iter().filter(|&&k| k >= 0.0).count()
    }

    /// Per gated edge: (edge id, inclusion probability, retained).
    pub fn gate_report(&self) -> Vec<GateRecord> {
        let kbar = self.log_kappa_bar();
        self.plan
            .non_self()
            .iter()
            .zip(kbar)
            .map(|(&edge, k)| GateRecord {
                edge,
                pi: attention::sigmoid(k),
                retained: k >= 0.0,
            })
            .collect()
    }

    /// Evaluation-mode embeddings of all leaf codes from both pathways.
    pub fn export_embeddings(&self) -> Result<EmbeddingExport> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let emb = self.embed(&mut tape, &bound, Mode::Eval, None, true)?;
        let hie = tape.value(emb.hie.expect("all paths")).clone();
        let co = tape.value(emb.co.expect("all paths")).clone();
        let fused = tape.value(emb.fused).clone();
        let beta = match (self.config.variant, emb.beta) {
            (Variant::Full, Some(b)) => tape.value(b).data().to_vec(),
            (v, _) => {
                let fixed = match v {
                    Variant::NoHie => 0.0,
                    Variant::NoCo => 1.0,
                    _ => 0.5,
                };
                vec![fixed; fused.rows()]
            }
        };
        Ok(EmbeddingExport { hie, co, fused, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub edge: usize,
    pub pi: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub hie: Mat,
    pub co: Mat,
    pub fused: Mat,
    pub beta: Vec<f64>,
}

fn check_graph(forest: &OntologyForest, graph: &CooccurrenceGraph) -> Result<()> {
    let sizes = EntityType::ALL.map(|ty| forest.n_leaves(ty));
    if sizes != graph.sizes() {
        return Err(Error::Structure(format!(
            "graph covers {:?} leaves but the ontology has {:?}",
            graph.sizes(),
            sizes
        )));
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(dist)).collect())
}

fn init_params(
    forest: &OntologyForest,
    plan: &GraphPlan,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> (ParameterStore, Layout) {
    let dim = cfg.dim;
    let mut s = ParameterStore::default();
    let emb = EntityType::ALL.map(|ty| {
        let n = forest.tree(ty).len();
        s.push(format!("emb.{}", ty.short()), uniform(rng, n, dim, 0.01))
    });
    let log_kappa = s.push(
        "gate.log_kappa",
        Mat::filled(plan.n_gated(), 1, cfg.attention.init_log_kappa),
    );
    let glorot_w = (3.0 / dim as f64).sqrt();
    let glorot_a = (6.0 / (2 * dim + 1) as f64).sqrt();
    let attn = (0..cfg.attention.layers)
        .map(|k| {
            let w = s.push(format!("attn.{k}.w"), uniform(rng, dim, dim, glorot_w));
            let a = s.push(format!("attn.{k}.a"), uniform(rng, 2 * dim, 1, glorot_a));
            (w, a)
        })
        .collect();
    let fusion_w = s.push("fusion.w", Mat::zeros(2 * dim, 1));
    let fusion_b = s.push("fusion.b", Mat::zeros(1, 1));
    let gru_bound = 1.0 / (dim as f64).sqrt();
    let gru = EntityType::ALL.map(|ty| {
        (0..GRU_LAYERS)
            .map(|layer| {
                std::array::from_fn(|k| {
                    let (rows, cols) = if k < 6 { (dim, dim) } else { (1, dim) };
                    let name = format!("gru.{}.{layer}.{}", ty.short(), GRU_NAMES[k]);
                    s.push(name, uniform(rng, rows, cols, gru_bound))
                })
            })
            .collect()
    });
    let n_meds = forest.n_leaves(EntityType::Medication);
    let head_w = s.push("head.w", uniform(rng, n_meds, 3 * dim, 1.0 / (3.0 * dim as f64).sqrt()));
    let head_b = s.push("head.b", Mat::zeros(1, n_meds));
    (
        s,
        Layout {
            emb,
            log_kappa,
            attn,
            fusion_w,
            fusion_b,
            gru,
            head_w,
            head_b,
        },
    )
}
