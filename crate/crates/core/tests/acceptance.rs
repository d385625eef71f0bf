//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::cell::OnceCell;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

use medrec_core::attention::{self, inclusion_probabilities, masked_softmax_layer, raw_scores, sample_gates, LayerParams, Mode};
use medrec_core::checkpoint;
use medrec_core::config::{AttentionConfig, EvalConfig, LossWeights, TrainConfig, Variant};
use medrec_core::cooccurrence::CooccurrenceGraph;
use medrec_core::corpus::{IndexedCorpus, IndexedPatient, IndexedVisit, Patient, Visit, VisitCorpus};
use medrec_core::eval::{self, apply_mask, average_precision, build_unseen, evaluate, mann_whitney_u, PredictionBatch};
use medrec_core::geometry::{self, BallPoint};
use medrec_core::matrix::Mat;
use medrec_core::model::Model;
use medrec_core::objective::{bce_loss, margin_loss};
use medrec_core::ontology::{EntityType, OntologyFile, OntologyForest};
use medrec_core::synthetic::{build_tree, generate, plant_unseen_scenario, GeneratorSpec};
use medrec_core::tape::Tape;
use medrec_core::train::{loss_and_gradients, train, TrainOutcome};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ball_point(r: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = geometry::norm(&v).max(1e-12);
    let radius = max_norm * r.gen::<f64>().powf(1.0 / dim as f64);
    v.iter().map(|c| c * radius / n).collect()
}

fn geometry_suite() -> Outcome {
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..1000 {
        let dim = r.gen_range(1..=6);
        let x = ball_point(&mut r, dim, 0.95);
        let y = ball_point(&mut r, dim, 0.95);
        let z = ball_point(&mut r, dim, 0.95);
        let dxy = geometry::distance(&x, &y).unwrap();
        let dyx = geometry::distance(&y, &x).unwrap();
        let dxz = geometry::distance(&x, &z).unwrap();
        let dyz = geometry::distance(&y, &z).unwrap();
        worst[0] = worst[0].max((dxy - dyx).abs());
        if dxy < 0.0 || (x != y && dxy == 0.0) {
            return outcome(false, "distance is not positive on distinct points");
        }
        worst[1] = worst[1].max(dxz - dxy - dyz);

        let px = BallPoint::new(x.clone()).unwrap();
        let neg = BallPoint::new(x.iter().map(|c| -c).collect()).unwrap();
        let o = BallPoint::origin(dim);
        let left = geometry::mobius_add(&o, &px).unwrap();
        let right = geometry::mobius_add(&px, &o).unwrap();
        let inv = geometry::mobius_add(&neg, &px).unwrap();
        let e = left
            .coords()
            .iter()
            .zip(right.coords())
            .zip(&x)
            .map(|((a, b), c)| (a - c).abs().max((b - c).abs()))
            .fold(inv.norm(), f64::max);
        worst[2] = worst[2].max(e);

        let projected = geometry::exp_project(&x).unwrap();
        let back = geometry::exp_origin(geometry::log_origin(&projected).coords());
        let e = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[3] = worst[3].max(e);
    }
    let ln3 = (geometry::distance(&[0.0, 0.0], &[0.5, 0.0]).unwrap() - 3f64.ln()).abs();
    let lo = geometry::log_origin(&BallPoint::new(vec![0.9, 0.0]).unwrap());
    let atanh = (geometry::norm(lo.coords()) - 2.0 * 0.9f64.atanh()).abs();
    let pass = worst[0] <= 1e-9 && worst[1] <= 1e-9 && worst[2] <= 1e-12 && worst[3] <= 1e-9 && ln3 <= 1e-9 && atanh <= 1e-9;
    outcome(
        pass,
        format!(
            "symmetry {:.1e}, triangle slack {:.1e}, mobius {:.1e}, round trip {:.1e}, ln3 {:.1e}, artanh {:.1e}",
            worst[0], worst[1], worst[2], worst[3], ln3, atanh
        ),
    )
}

fn toy_problem() -> (OntologyForest, IndexedCorpus) {
    let forest = OntologyForest::from_file(&OntologyFile {
        diagnosis: build_tree("D", &[2, 2]),
        procedure: build_tree("P", &[2]),
        medication: build_tree("M", &[3]),
    })
    .unwrap();
    let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let visit = |d: &[&str], p: &[&str], m: &[&str]| Visit::new(s(d), s(p), s(m));
    let corpus = VisitCorpus::new(vec![
        Patient {
            patient_id: "a".into(),
            visits: vec![
                visit(&["D0.0", "D1.1"], &["P0"], &["M0", "M2"]),
                visit(&["D0.1"], &["P0", "P1"], &["M1"]),
            ],
        },
        Patient {
            patient_id: "b".into(),
            visits: vec![
                visit(&["D1.0"], &["P1"], &["M2"]),
                visit(&["D1.0", "D0.0"], &[], &["M0"]),
                visit(&["D1.1"], &["P0"], &["M1", "M2"]),
            ],
        },
        Patient {
            patient_id: "c".into(),
            visits: vec![
                visit(&["D0.1", "D1.1"], &["P1"], &["M0", "M1"]),
                visit(&["D0.0"], &["P0"], &["M2"]),
            ],
        },
    ]);
    let idx = corpus.index(&forest).unwrap();
    (forest, idx)
}

fn gradient_oracle() -> Outcome {
    let (forest, corpus) = toy_problem();
    let graph = CooccurrenceGraph::build_prior(&corpus).unwrap();
    let patients: Vec<&IndexedPatient> = corpus.patients.iter().collect();
    let weightings = [
        ("bce", LossWeights { bce: 1.0, margin: 0.0, hyp: 0.0, sparse: 0.0 }),
        ("margin", LossWeights { bce: 0.0, margin: 1.0, hyp: 0.0, sparse: 0.0 }),
        ("hyp", LossWeights { bce: 0.0, margin: 0.0, hyp: 1.0, sparse: 0.0 }),
        ("sparse", LossWeights { bce: 0.0, margin: 0.0, hyp: 0.0, sparse: 1.0 }),
        ("total", LossWeights::default()),
    ];
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checks = 0usize;
    for draw in 0..100u64 {
        let mut r = rng(10_000 + draw);
        let base = TrainConfig {
            seed: draw,
            dim: 4,
            ..Default::default()
        };
        let mut params = Model::new(&forest, &graph, &base).unwrap().params;
        for i in 0..params.len() {
            let name = params.names()[i].clone();
            let spread = if name.starts_with("emb.") {
                Some(0.35)
            } else if name == "gate.log_kappa" {
                Some(2.0)
            } else if name.starts_with("fusion.") || name == "head.b" {
                Some(0.5)
            } else {
                None
            };
            if let Some(s) = spread {
                for v in params.get_mut(i).data_mut() {
                    *v = r.gen_range(-s..s);
                }
            }
        }
        let noise = attention::sample_noise(&mut r, graph.non_self_edges().len());
        for (term, weights) in &weightings {
            let cfg = TrainConfig { loss: *weights, ..base.clone() };
            let model = Model::with_params(&forest, &graph, &cfg, params.clone()).unwrap();
            let (_, grads) = loss_and_gradients(&model, &patients, &noise).unwrap();
            for (i, g) in grads.iter().enumerate() {
                let len = model.params.get(i).len();
                let k = r.gen_range(0..len);
                let analytic = g.as_ref().map_or(0.0, |g| g.data()[k]);
                let eval_at = |delta: f64| {
                    let mut m = model.clone();
                    m.params.get_mut(i).data_mut()[k] += delta;
                    m.loss(&mut Tape::new(), &patients, &noise).unwrap().2.total
                };
                let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                checks += 1;
                if rel > worst.0 {
                    worst = (rel, format!("{term} {}[{k}] draw {draw}", model.params.names()[i]));
                }
            }
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!("{checks} coordinates, worst relative error {:.2e} at {}", worst.0, worst.1),
    )
}

fn small_graph(seed: u64, patients: usize) -> CooccurrenceGraph {
    let g = generate(&GeneratorSpec {
        seed,
        patients,
        ..Default::default()
    })
    .unwrap();
    CooccurrenceGraph::build_prior(&g.corpus.index(&g.forest).unwrap()).unwrap()
}

fn uniform_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-s..s)).collect())
}

fn attention_invariants() -> Outcome {
    let graph = small_graph(3, 60);
    let mut r = rng(3);
    let dim = 8;
    let n = graph.n_nodes();
    let h = uniform_mat(&mut r, n, dim, 1.0);
    let layer = LayerParams {
        w: uniform_mat(&mut r, dim, dim, 0.6),
        a: uniform_mat(&mut r, 2 * dim, 1, 0.6),
    };
    let cfg = AttentionConfig::default();
    let gates: Vec<f64> = (0..graph.n_edges())
        .map(|e| {
            if graph.is_self(e) {
                1.0
            } else if r.gen_bool(0.3) {
                0.0
            } else {
                r.gen_range(0.01..1.0)
            }
        })
        .collect();
    let (_, alpha) = masked_softmax_layer(&graph, &h, &gates, &layer, &cfg).unwrap();
    let offsets = graph.offsets();
    let row_err = offsets
        .windows(2)
        .map(|w| (alpha[w[0]..w[1]].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // a realizable rescaling of the non-self priors shifts their scores by η·ln c
    let s = raw_scores(&graph, &h, &layer, &cfg);
    let halved: Vec<f64> = (0..graph.n_edges())
        .map(|e| if graph.is_self(e) { 1.0 } else { graph.weights()[e] * 0.5 })
        .collect();
    let g2 = CooccurrenceGraph::from_edges(graph.sizes(), graph.sources().to_vec(), graph.targets().to_vec(), halved).unwrap();
    let s2 = raw_scores(&g2, &h, &layer, &cfg);
    let shift_err = (0..graph.n_edges())
        .map(|e| {
            let expect = if graph.is_self(e) { 0.0 } else { cfg.eta * 0.5f64.ln() };
            (s2[e] - s[e] - expect).abs()
        })
        .fold(0.0, f64::max);
    let mut scale_err: f64 = 0.0;
    for c in [0.1f64, 10.0] {
        let mut t = Tape::new();
        let sv = t.constant(Mat::column(s.iter().map(|v| v + cfg.eta * c.ln()).collect()));
        let zv = t.constant(Mat::column(gates.clone()));
        let a = t.segment_softmax(sv, zv, offsets.to_vec().into(), cfg.tau).unwrap();
        let e = t.value(a).data().iter().zip(&alpha).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        scale_err = scale_err.max(e);
    }

    let sharp = AttentionConfig { tau: 1e-3, ..cfg };
    let open = vec![1.0; graph.n_edges()];
    let (_, alpha) = masked_softmax_layer(&graph, &h, &open, &layer, &sharp).unwrap();
    let (mut rows, mut worst) = (0, 1.0f64);
    for w in offsets.windows(2) {
        let seg = &s[w[0]..w[1]];
        let (top, best) = seg.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let runner = seg.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        if best - runner >= 20.0 * sharp.tau {
            rows += 1;
            worst = worst.min(alpha[w[0] + top]);
        }
    }
    let pass = row_err <= 1e-12 && shift_err <= 1e-12 && scale_err <= 1e-10 && rows > 0 && worst >= 0.999;
    outcome(
        pass,
        format!(
            "row sums {row_err:.1e}, prior shift {shift_err:.1e}, scaling {scale_err:.1e}, min top weight {worst:.6} over {rows} unique-max rows"
        ),
    )
}

fn hard_concrete_law() -> Outcome {
    let graph = small_graph(4, 40);
    let gated = graph.non_self_edges().len();
    let cfg = AttentionConfig { gamma: 0.0, ..Default::default() };
    let mut r = rng(4);
    let mut parts = Vec::new();
    let mut pass = true;
    for lk in [-2.0f64, 0.0, 2.0] {
        let kappa = vec![lk; gated];
        let (mut above, mut total) = (0usize, 0usize);
        while total < 100_000 {
            let z = sample_gates(&graph, &kappa, &cfg, Mode::Train, &mut r).unwrap();
            for e in graph.non_self_edges() {
                if total == 100_000 {
                    break;
                }
                above += usize::from(z[e] > 0.5);
                total += 1;
            }
        }
        let freq = above as f64 / total as f64;
        let expect = 1.0 / (1.0 + (-lk).exp());
        pass &= (freq - expect).abs() <= 0.01;
        parts.push(format!("ln κ̄={lk}: {freq:.4} vs {expect:.4}"));
    }
    let full = AttentionConfig::default();
    let mut kappa: Vec<f64> = (0..gated).map(|_| r.gen_range(-3.0..3.0)).collect();
    kappa[0] = 0.0;
    let pi = inclusion_probabilities(&graph, &kappa, full.gamma);
    let z = sample_gates(&graph, &kappa, &full, Mode::Eval, &mut r).unwrap();
    let agree = graph
        .non_self_edges()
        .iter()
        .zip(&pi)
        .all(|(&e, &p)| (z[e] == 1.0) == (p >= 0.5) && (z[e] == 0.0 || z[e] == 1.0));
    pass &= agree;
    parts.push(format!("eval threshold agrees with π ≥ ½: {agree}"));
    outcome(pass, parts.join(", "))
}

fn prior_recount() -> Outcome {
    let mut compared = 0usize;
    for seed in 0..50u64 {
        let g = generate(&GeneratorSpec {
            seed,
            patients: 15 + seed as usize,
            ..Default::default()
        })
        .unwrap();
        let idx = g.corpus.index(&g.forest).unwrap();
        let graph = CooccurrenceGraph::build_prior(&idx).unwrap();
        let layout = graph.layout();
        let n = layout.n_nodes();
        let mut occ = vec![0usize; n];
        let mut joint = vec![vec![0usize; n]; n];
        for v in idx.visits() {
            let nodes: BTreeSet<usize> = EntityType::ALL
                .iter()
                .flat_map(|&ty| v.get(ty).iter().map(move |&l| layout.global(ty, l)))
                .collect();
            for &i in &nodes {
                occ[i] += 1;
                for &j in &nodes {
                    joint[i][j] += 1;
                }
            }
        }
        let mut edges = 0;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j {
                    Some(1.0)
                } else if joint[i][j] > 0 {
                    Some(joint[i][j] as f64 / occ[i] as f64)
                } else {
                    None
                };
                edges += usize::from(expect.is_some());
                if graph.weight(i, j) != expect {
                    return outcome(false, format!("corpus {seed}: a[{i}][{j}] = {:?}, recount {expect:?}", graph.weight(i, j)));
                }
                compared += 1;
            }
        }
        if edges != graph.n_edges() {
            return outcome(false, format!("corpus {seed}: {} edges, recount {edges}", graph.n_edges()));
        }
    }
    let hand = IndexedCorpus {
        patients: vec![IndexedPatient {
            id: "h".into(),
            visits: vec![
                IndexedVisit { codes: [vec![0], vec![], vec![]] },
                IndexedVisit { codes: [vec![0, 1], vec![], vec![]] },
            ],
        }],
        sizes: [2, 0, 0],
    };
    let g = CooccurrenceGraph::build_prior(&hand).unwrap();
    let ok = g.weight(0, 1) == Some(0.5) && g.weight(1, 0) == Some(1.0);
    outcome(ok, format!("{compared} weights on 50 corpora match exactly; hand example a_AB={:?} a_BA={:?}", g.weight(0, 1), g.weight(1, 0)))
}

fn oracle_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &k in &pos {
        let at: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[k]).collect();
        let hits = at.iter().filter(|&&j| truth[j]).count();
        total += hits as f64 / at.len() as f64;
    }
    Some(total / pos.len() as f64)
}

fn metric_oracles() -> Outcome {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = r.gen_range(1..=5);
        let visits = r.gen_range(1..=8);
        let probs: Vec<Vec<f64>> = (0..visits).map(|_| (0..m).map(|_| r.gen_range(0..=10) as f64 / 10.0).collect()).collect();
        let truth: Vec<Vec<bool>> = (0..visits).map(|_| (0..m).map(|_| r.gen_bool(0.4)).collect()).collect();
        let batch = PredictionBatch::new(probs.clone(), truth.clone(), 0.5).unwrap();
        let (mut jac, mut f1) = (0.0, 0.0);
        let mut aps = Vec::new();
        for (p, t) in probs.iter().zip(&truth) {
            let pred: BTreeSet<usize> = (0..m).filter(|&i| p[i] >= 0.5).collect();
            let gold: BTreeSet<usize> = (0..m).filter(|&i| t[i]).collect();
            let inter = pred.intersection(&gold).count() as f64;
            let union = pred.union(&gold).count() as f64;
            jac += if union == 0.0 { 1.0 } else { inter / union };
            f1 += if inter == 0.0 { 0.0 } else { 2.0 * inter / (pred.len() + gold.len()) as f64 };
            if let Some(ap) = oracle_ap(p, t) {
                aps.push(ap);
            }
            let got = average_precision(p, t);
            match (got, oracle_ap(p, t)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return outcome(false, "average precision disagrees on visits without positives"),
            }
        }
        let n = visits as f64;
        worst = worst.max((eval::jaccard(&batch) - jac / n).abs());
        worst = worst.max((eval::f1(&batch) - f1 / n).abs());
        let pr = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        worst = worst.max((eval::prauc(&batch) - pr).abs());
    }
    let jb = PredictionBatch::new(vec![vec![0.9, 0.9, 0.1]], vec![vec![false, true, true]], 0.5).unwrap();
    let examples = [
        (eval::jaccard(&jb), 1.0 / 3.0),
        (average_precision(&[0.2, 0.9], &[true, false]).unwrap(), 0.5),
        (margin_loss(&[0.9, 0.2], &[true, false]), 0.15),
        (bce_loss(&[0.5], &[true]), 2f64.ln()),
    ];
    let ex = examples.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && ex <= 1e-12,
        format!("200 batches, worst oracle gap {worst:.1e}; worked examples within {ex:.1e}"),
    )
}

/// Trainings on the default corpus shared by the sparsity and ablation criteria.
struct DefaultRuns {
    /// Per seed: best validation Jaccard of full, no_fus, no_hie, no_co.
    jaccard: Vec<[f64; 4]>,
    /// Per seed: retained edges at λ_sparse = 0.001, 0.01, 0.1.
    retained: Vec<[usize; 3]>,
}

fn default_split(seed: u64) -> (OntologyForest, IndexedCorpus, IndexedCorpus) {
    let g = generate(&GeneratorSpec { seed, ..Default::default() }).unwrap();
    let (tr, va, _) = g.corpus.split(Default::default()).unwrap();
    let (tr, va) = (tr.index(&g.forest).unwrap(), va.index(&g.forest).unwrap());
    (g.forest, tr, va)
}

fn default_runs() -> DefaultRuns {
    let mut runs = DefaultRuns {
        jaccard: Vec::new(),
        retained: Vec::new(),
    };
    let run = |f: &OntologyForest, tr: &IndexedCorpus, va: &IndexedCorpus, cfg: TrainConfig| -> TrainOutcome { train(f, tr, va, &cfg).unwrap() };
    for seed in 1..=3u64 {
        let (f, tr, va) = default_split(seed);
        let base = TrainConfig { seed, ..Default::default() };
        let mut jac = [0.0; 4];
        let mut kept = [0usize; 3];
        for (k, v) in [Variant::Full, Variant::NoFus, Variant::NoHie, Variant::NoCo].into_iter().enumerate() {
            let out = run(&f, &tr, &va, TrainConfig { variant: v, ..base.clone() });
            jac[k] = out.best_val_jaccard;
            if v == Variant::Full && base.loss.sparse == 0.01 {
                kept[1] = out.model.retained_edges();
            }
        }
        for (k, sparse) in [(0, 0.001), (2, 0.1)] {
            let mut cfg = base.clone();
            cfg.loss.sparse = sparse;
            kept[k] = run(&f, &tr, &va, cfg).model.retained_edges();
        }
        if base.loss.sparse != 0.01 {
            let mut cfg = base.clone();
            cfg.loss.sparse = 0.01;
            kept[1] = run(&f, &tr, &va, cfg).model.retained_edges();
        }
        runs.jaccard.push(jac);
        runs.retained.push(kept);
    }
    runs
}

fn sparsity_monotonicity(runs: &DefaultRuns) -> Outcome {
    let ok = runs.retained.iter().filter(|k| k[0] >= k[1] && k[1] >= k[2]).count();
    let detail: Vec<String> = runs.retained.iter().map(|k| format!("{:?}", k)).collect();
    outcome(ok >= 2, format!("retained edges at λ = 0.001/0.01/0.1 per seed: {}; {ok} of 3 non-increasing", detail.join(" ")))
}

fn ablation_ordering(runs: &DefaultRuns) -> Outcome {
    let mean: Vec<f64> = (0..4).map(|k| runs.jaccard.iter().map(|j| j[k]).sum::<f64>() / runs.jaccard.len() as f64).collect();
    let tol = 0.005;
    let pass = mean[0] + tol >= mean[1] && mean[1] + tol >= mean[2] && mean[1] + tol >= mean[3];
    outcome(
        pass,
        format!("mean validation Jaccard full {:.4}, no_fus {:.4}, no_hie {:.4}, no_co {:.4}", mean[0], mean[1], mean[2], mean[3]),
    )
}

fn overfit() -> Outcome {
    let g = generate(&GeneratorSpec {
        seed: 1,
        patients: 10,
        ..Default::default()
    })
    .unwrap();
    let idx = g.corpus.index(&g.forest).unwrap();
    let cfg = TrainConfig { seed: 1, ..Default::default() };
    let out = train(&g.forest, &idx, &idx, &cfg).unwrap();
    let j = evaluate(&out.model, &idx, 0.5, None).unwrap().jaccard;
    outcome(j > 0.9, format!("training Jaccard {j:.4} at epoch {} of {}", out.best_epoch, out.log.len()))
}

fn unseen_direction() -> Outcome {
    let mut full = Vec::new();
    let mut no_hie = Vec::new();
    for seed in 1..=3u64 {
        let spec = plant_unseen_scenario(
            &GeneratorSpec {
                seed,
                patients: 400,
                ..Default::default()
            },
            "M1.1.4",
        )
        .unwrap();
        let g = generate(&spec).unwrap();
        let target_code = g.scenario.as_ref().unwrap().target.clone();
        let (tr, va, te) = g.corpus.split(Default::default()).unwrap();
        let mask = build_unseen(&g.forest, &tr, &target_code, &EvalConfig::default()).unwrap();
        let tr = apply_mask(&tr, &mask).index(&g.forest).unwrap();
        let (va, te) = (va.index(&g.forest).unwrap(), te.index(&g.forest).unwrap());
        let target = g.forest.leaf(EntityType::Medication, &target_code).unwrap();
        for (variant, sink) in [(Variant::Full, &mut full), (Variant::NoHie, &mut no_hie)] {
            let cfg = TrainConfig { seed, variant, ..Default::default() };
            let out = train(&g.forest, &tr, &va, &cfg).unwrap();
            sink.push(evaluate(&out.model, &te, 0.5, Some(target)).unwrap().tf1.unwrap());
        }
    }
    let mf = full.iter().sum::<f64>() / 3.0;
    let mh = no_hie.iter().sum::<f64>() / 3.0;
    outcome(
        mf - mh >= 0.1 && mf >= 0.7,
        format!("mean tF1 full {mf:.3} {full:.3?}, no_hie {mh:.3} {no_hie:.3?}"),
    )
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn pair_u(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in x {
        for b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

fn rank_sum() -> Outcome {
    let mut r = rng(11);
    let (mut cases, mut worst_p) = (0usize, 0.0f64);
    for nx in 2..=6 {
        for ny in 2..=6 {
            for trial in 0..4 {
                let draw = |r: &mut ChaCha8Rng| if trial == 0 { r.gen::<f64>() } else { r.gen_range(0..4) as f64 };
                let x: Vec<f64> = (0..nx).map(|_| draw(&mut r)).collect();
                let y: Vec<f64> = (0..ny).map(|_| draw(&mut r)).collect();
                let got = mann_whitney_u(&x, &y).unwrap();
                let u = pair_u(&x, &y);
                if got.u != u {
                    return outcome(false, format!("U {} vs pair count {u} for {x:?} / {y:?}", got.u));
                }
                let pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
                let perms: Vec<f64> = combinations(nx + ny, nx)
                    .iter()
                    .map(|pick| {
                        let (a, b): (Vec<(usize, f64)>, Vec<(usize, f64)>) = pooled.iter().copied().enumerate().partition(|(i, _)| pick.contains(i));
                        let a: Vec<f64> = a.into_iter().map(|p| p.1).collect();
                        let b: Vec<f64> = b.into_iter().map(|p| p.1).collect();
                        pair_u(&a, &b)
                    })
                    .collect();
                let k = perms.len() as f64;
                let mu = perms.iter().sum::<f64>() / k;
                let var = perms.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / k;
                let p_ref = if var <= 0.0 { 1.0 } else { erfc((u - mu).abs() / (2.0 * var).sqrt()).min(1.0) };
                worst_p = worst_p.max((got.p_value - p_ref).abs()).max((got.mean - mu).abs()).max((got.variance - var).abs());
                cases += 1;
            }
        }
    }
    outcome(
        worst_p <= 1e-9,
        format!("{cases} samples up to (6, 6): U exact, worst gap to permutation moments and p {worst_p:.1e}"),
    )
}

fn determinism_and_leakage() -> Outcome {
    let spec = GeneratorSpec {
        seed: 12,
        patients: 120,
        ..Default::default()
    };
    let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
    let same_corpus = a.corpus.to_jsonl() == b.corpus.to_jsonl();
    let (tr, va, te) = a.corpus.split(Default::default()).unwrap();
    let (tr, va, te) = (tr.index(&a.forest).unwrap(), va.index(&a.forest).unwrap(), te.index(&a.forest).unwrap());
    let cfg = TrainConfig {
        seed: 12,
        dim: 16,
        max_epochs: 4,
        patience: 4,
        ..Default::default()
    };
    let m1 = train(&a.forest, &tr, &va, &cfg).unwrap().model;
    let m2 = train(&a.forest, &tr, &va, &cfg).unwrap().model;
    let same_ckpt = checkpoint::to_bytes(&m1).unwrap() == checkpoint::to_bytes(&m2).unwrap();
    let pats: Vec<&IndexedPatient> = te.patients.iter().collect();
    let p1 = m1.predict(&pats).unwrap();
    let same_pred = p1 == m2.predict(&pats).unwrap();

    let mut r = rng(12);
    let sizes = te.sizes;
    let random_codes = |ty: usize, r: &mut ChaCha8Rng| {
        let mut v: Vec<usize> = (0..sizes[ty]).filter(|_| r.gen_bool(0.3)).collect();
        if v.is_empty() {
            v.push(r.gen_range(0..sizes[ty]));
        }
        v
    };
    let (mut probes, mut leaks) = (0usize, 0usize);
    for p in &te.patients {
        let base = m1.predict(&[p]).unwrap().remove(0);
        for t in 0..p.visits.len() {
            let mut meds = p.clone();
            meds.visits[t].codes[2] = random_codes(2, &mut r);
            let mut variants = vec![meds];
            if t + 1 < p.visits.len() {
                let mut next = p.clone();
                next.visits[t + 1].codes = [random_codes(0, &mut r), random_codes(1, &mut r), random_codes(2, &mut r)];
                variants.push(next);
            }
            for q in &variants {
                let got = m1.predict(&[q]).unwrap().remove(0);
                probes += 1;
                if got[t] != base[t] {
                    leaks += 1;
                }
            }
        }
    }
    let pass = same_corpus && same_ckpt && same_pred && probes > 0 && leaks == 0;
    outcome(
        pass,
        format!("corpus identical {same_corpus}, checkpoint identical {same_ckpt}, predictions identical {same_pred}; {leaks} of {probes} perturbations changed the visit prediction"),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let runs: OnceCell<DefaultRuns> = OnceCell::new();

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "geometry suite", Box::new(geometry_suite)),
        (2, "gradient oracle", Box::new(gradient_oracle)),
        (3, "attention invariants", Box::new(attention_invariants)),
        (4, "hard-concrete law", Box::new(hard_concrete_law)),
        (5, "prior correctness", Box::new(prior_recount)),
        (6, "metric oracles", Box::new(metric_oracles)),
        (7, "sparsity monotonicity", Box::new(|| sparsity_monotonicity(runs.get_or_init(default_runs)))),
        (8, "overfit sanity", Box::new(overfit)),
        (9, "unseen-setting direction", Box::new(unseen_direction)),
        (10, "ablation ordering", Box::new(|| ablation_ordering(runs.get_or_init(default_runs)))),
        (11, "rank-sum correctness", Box::new(rank_sum)),
        (12, "determinism and leakage", Box::new(determinism_and_leakage)),
    ];
    let mut failed = 0;
    for (k, name, check) in &criteria {
        if !wanted(*k) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {k:>2} {name}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
