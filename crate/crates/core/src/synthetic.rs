//! Deterministic synthetic ontologies and patient corpora.
//!
//! Trees have a fixed shape per level. Codes are named by path: the diagnosis
//! root is `D`, its children `D0`, `D1`, …, their children `D0.0`, and so on.
//! Patients carry a small set of conditions (parents of diagnosis leaves);
//! each visit draws diagnoses under its active conditions, some procedures,
//! and medications from rules keyed on diagnosis ancestors plus uniform noise.
//!
//! The optional unseen scenario adds one leaf under a chosen ancestor plus a
//! target medication to a random share of visits. The ancestor gets three kinds of extra
//! children: many rare ones, each used at most once in the training region so
//! it stays unmasked, a few frequent visible ones that appear in the training
//! region and get masked, and held-out ones that only appear after it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Patient, Visit, VisitCorpus};
use crate::error::{Error, Result};
use crate::model::seeded_rng;
use crate::ontology::{EntityType, NodeSpec, OntologyFile, OntologyForest, Tree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    /// Diagnosis node; the rule is active when any visit diagnosis descends from it (or is it).
    pub ancestor: String,
    pub medication: String,
    pub propensity: f64,
    #[serde(default)]
    pub requires_procedure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnseenPlan {
    /// Target medication leaf; defaults to the last medication leaf.
    pub target: Option<String>,
    /// Diagnosis parent-of-leaves node; defaults to the last such node.
    pub ancestor: Option<String>,
    pub rare_siblings: usize,
    pub visible_siblings: usize,
    pub held_out_siblings: usize,
    /// Probability that a visit carries planted codes, before the training-region cap.
    pub rate: f64,
    /// Fraction of patients (in order) treated as the training region.
    pub holdout_start: f64,
}

impl Default for UnseenPlan {
    fn default() -> Self {
        UnseenPlan {
            target: None,
            ancestor: None,
            rare_siblings: 480,
            visible_siblings: 2,
            held_out_siblings: 2,
            rate: 0.45,
            holdout_start: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    /// Children per node at each depth, per tree.
    pub diagnosis: Vec<usize>,
    pub procedure: Vec<usize>,
    pub medication: Vec<usize>,
    pub patients: usize,
    /// Inclusive range of visits per patient.
    pub visits: [usize; 2],
    /// Inclusive range of conditions per patient.
    pub conditions: [usize; 2],
    /// Probability that each patient condition is active in a visit.
    pub condition_activity: f64,
    /// Inclusive range of diagnosis leaves drawn per active condition.
    pub diagnoses_per_condition: [usize; 2],
    /// Inclusive range of procedures per visit.
    pub procedures: [usize; 2],
    /// Probability that a procedure comes from the group linked to a condition.
    pub procedure_affinity: f64,
    /// Explicit rules; when empty, two rules per condition are derived.
    pub rules: Vec<Rule>,
    /// Independent per-medication probability of a spurious prescription.
    pub noise_rate: f64,
    pub unseen: Option<UnseenPlan>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 42,
            diagnosis: vec![3, 4, 5],
            procedure: vec![3, 2, 5],
            medication: vec![2, 2, 5],
            patients: 200,
            visits: [2, 5],
            conditions: [1, 2],
            condition_activity: 0.7,
            diagnoses_per_condition: [1, 2],
            procedures: [1, 2],
            procedure_affinity: 0.7,
            rules: Vec::new(),
            noise_rate: 0.02,
            unseen: None,
        }
    }
}

/// Ground truth of a planted unseen scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedScenario {
    pub target: String,
    pub ancestor: String,
    /// Leaves under the ancestor that stay unmasked in training.
    pub anchors: Vec<String>,
    pub visible: Vec<String>,
    pub held_out: Vec<String>,
    /// First patient index of the held-out region.
    pub holdout_start: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub forest: OntologyForest,
    pub corpus: VisitCorpus,
    pub rules: Vec<Rule>,
    pub scenario: Option<PlantedScenario>,
}

fn range_ok(r: [usize; 2]) -> bool {
    r[0] <= r[1]
}

fn prob_ok(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, b) in [
            ("diagnosis", &self.diagnosis),
            ("procedure", &self.procedure),
            ("medication", &self.medication),
        ] {
            if b.is_empty() || b.contains(&0) {
                return fail(format!("generator.{name} branching must be non-empty and positive"));
            }
        }
        if self.patients == 0 {
            return fail("generator.patients must be positive".into());
        }
        if !range_ok(self.visits) || self.visits[0] < 2 {
            return fail("generator.visits must be a range starting at 2 or more".into());
        }
        for (name, r) in [
            ("conditions", self.conditions),
            ("diagnoses_per_condition", self.diagnoses_per_condition),
            ("procedures", self.procedures),
        ] {
            if !range_ok(r) {
                return fail(format!("generator.{name} must satisfy min <= max"));
            }
        }
        if self.conditions[0] == 0 || self.diagnoses_per_condition[0] == 0 {
            return fail("generator.conditions and diagnoses_per_condition must start at 1 or more".into());
        }
        for (name, p) in [
            ("condition_activity", self.condition_activity),
            ("procedure_affinity", self.procedure_affinity),
            ("noise_rate", self.noise_rate),
        ] {
            if !prob_ok(p) {
                return fail(format!("generator.{name} must be a probability"));
            }
        }
        for r in &self.rules {
            if !prob_ok(r.propensity) {
                return fail(format!("rule propensity {} is not a probability", r.propensity));
            }
        }
        if let Some(u) = &self.unseen {
            if !prob_ok(u.rate) || !(u.holdout_start > 0.0 && u.holdout_start < 1.0) {
                return fail("generator.unseen rate and holdout_start must lie in (0, 1)".into());
            }
            if u.visible_siblings == 0 || u.held_out_siblings == 0 {
                return fail("generator.unseen needs at least one visible and one held-out sibling".into());
            }
            if self.diagnosis.len() < 2 {
                return fail("the unseen scenario needs a diagnosis tree of depth 2 or more".into());
            }
        }
        Ok(())
    }
}

/// Path-named tree with the given branching per level, in breadth-first order.
pub fn build_tree(prefix: &str, branching: &[usize]) -> Vec<NodeSpec> {
    let mut specs = vec![NodeSpec {
        code: prefix.to_string(),
        parent: None,
    }];
    let mut frontier = vec![prefix.to_string()];
    for (depth, &b) in branching.iter().enumerate() {
        let mut next = Vec::with_capacity(frontier.len() * b);
        for parent in &frontier {
            for k in 0..b {
                let code = if depth == 0 {
                    format!("{parent}{k}")
                } else {
                    format!("{parent}.{k}")
                };
                specs.push(NodeSpec {
                    code: code.clone(),
                    parent: Some(parent.clone()),
                });
                next.push(code);
            }
        }
        frontier = next;
    }
    specs
}

/// Marks the spec to plant the unseen scenario around medication `target`.
pub fn plant_unseen_scenario(spec: &GeneratorSpec, target: &str) -> Result<GeneratorSpec> {
    if spec.diagnosis.len() < 2 {
        return Err(Error::Config(
            "diagnosis tree is too shallow to hold sibling codes under a shared ancestor".into(),
        ));
    }
    let meds = Tree::from_specs(EntityType::Medication, &build_tree("M", &spec.medication))?;
    let ok = meds.node(target).map(|n| meds.leaf_index(n).is_some()).unwrap_or(false);
    if !ok {
        return Err(Error::Lookup(format!("{target:?} is not a medication leaf")));
    }
    let mut out = spec.clone();
    let mut plan = out.unseen.take().unwrap_or_default();
    plan.target = Some(target.to_string());
    out.unseen = Some(plan);
    Ok(out)
}

/// Nodes whose children are leaves (the condition level).
fn condition_nodes(tree: &Tree) -> Vec<usize> {
    let depth = tree.max_depth();
    (0..tree.len())
        .filter(|&i| tree.depth(i) + 1 == depth)
        .collect()
}

fn leaves_under(tree: &Tree, node: usize) -> Vec<usize> {
    tree.leaves()
        .iter()
        .copied()
        .filter(|&l| l == node || tree.is_descendant(l, node))
        .collect()
}

fn resolve(tree: &Tree, code: &str, what: &str) -> Result<usize> {
    tree.node(code)
        .ok_or_else(|| Error::Config(format!("{what} {code:?} is not in the {} tree", what)))
}

/// Highest share of its training visits in which a background code may meet
/// the planted target; kept under the 0.5 forward threshold of the unseen mask.
const PLANT_CAP: f64 = 0.45;

/// Visit types of the planted scenario; each adds one leaf under the ancestor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Planted {
    Anchor,
    Visible,
    HeldOut,
}

const TRAIN_CYCLE: [Planted; 10] = {
    use Planted::*;
    [Anchor, Anchor, Anchor, Anchor, Visible, Anchor, Anchor, Anchor, Anchor, Anchor]
};

const HOLDOUT_CYCLE: [Planted; 4] = {
    use Planted::*;
    [HeldOut, Visible, HeldOut, Anchor]
};

struct Scenario {
    target: usize,
    ancestor: usize,
    anchors: Vec<usize>,
    visible: Vec<usize>,
    held_out: Vec<usize>,
    holdout_start: usize,
    rate: f64,
}

pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    spec.validate()?;
    let mut file = OntologyFile {
        diagnosis: build_tree("D", &spec.diagnosis),
        procedure: build_tree("P", &spec.procedure),
        medication: build_tree("M", &spec.medication),
    };
    let base_d = Tree::from_specs(EntityType::Diagnosis, &file.diagnosis)?;
    let base_p = Tree::from_specs(EntityType::Procedure, &file.procedure)?;
    let base_m = Tree::from_specs(EntityType::Medication, &file.medication)?;

    // planted codes are appended before the forest is frozen
    let mut planted_names = None;
    if let Some(plan) = &spec.unseen {
        let conds = condition_nodes(&base_d);
        let ancestor = match &plan.ancestor {
            Some(c) => resolve(&base_d, c, "diagnosis")?,
            None => *conds.last().expect("tree has a condition level"),
        };
        if !conds.contains(&ancestor) {
            return Err(Error::Config(format!(
                "unseen ancestor {:?} must be a parent of diagnosis leaves",
                base_d.code(ancestor)
            )));
        }
        let a = base_d.code(ancestor).to_string();
        let visible: Vec<String> = (0..plan.visible_siblings).map(|k| format!("{a}.v{k}")).collect();
        let held: Vec<String> = (0..plan.held_out_siblings).map(|k| format!("{a}.h{k}")).collect();
        let rare: Vec<String> = (0..plan.rare_siblings).map(|k| format!("{a}.r{k}")).collect();
        for code in rare.iter().chain(&visible).chain(&held) {
            file.diagnosis.push(NodeSpec {
                code: code.clone(),
                parent: Some(a.clone()),
            });
        }
        planted_names = Some((a, visible, held));
    }
    let forest = OntologyForest::from_file(&file)?;
    let dt = forest.tree(EntityType::Diagnosis);
    let pt = forest.tree(EntityType::Procedure);
    let mt = forest.tree(EntityType::Medication);

    let scenario = match (&spec.unseen, &planted_names) {
        (Some(plan), Some((a, visible, held))) => {
            let target = match &plan.target {
                Some(c) => resolve(mt, c, "medication")?,
                None => *mt.leaves().last().expect("medication leaves"),
            };
            if mt.leaf_index(target).is_none() {
                return Err(Error::Config("unseen target must be a medication leaf".into()));
            }
            let ancestor = dt.node(a).expect("ancestor present");
            let lookup = |codes: &[String]| -> Vec<usize> {
                codes.iter().map(|c| dt.node(c).expect("planted code")).collect()
            };
            let (visible, held_out) = (lookup(visible), lookup(held));
            let anchors = leaves_under(dt, ancestor)
                .into_iter()
                .filter(|l| !visible.contains(l) && !held_out.contains(l))
                .collect();
            Some(Scenario {
                target,
                ancestor,
                anchors,
                visible,
                held_out,
                holdout_start: (spec.patients as f64 * plan.holdout_start).round() as usize,
                rate: plan.rate,
            })
        }
        _ => None,
    };

    let mut conditions = condition_nodes(&base_d);
    if let Some(s) = &scenario {
        conditions.retain(|&c| c != s.ancestor);
    }
    if conditions.is_empty() {
        return Err(Error::Config("no diagnosis conditions left to sample from".into()));
    }
    if spec.conditions[1] > conditions.len() {
        return Err(Error::Config(format!(
            "generator.conditions allows {} per patient but only {} exist",
            spec.conditions[1],
            conditions.len()
        )));
    }
    let cond_leaves: Vec<Vec<usize>> = conditions.iter().map(|&c| leaves_under(&base_d, c)).collect();
    let min_leaves = cond_leaves.iter().map(Vec::len).min().unwrap_or(0);
    if spec.diagnoses_per_condition[1] > min_leaves {
        return Err(Error::Config(format!(
            "generator.diagnoses_per_condition allows {} but a condition has only {} leaves",
            spec.diagnoses_per_condition[1], min_leaves
        )));
    }

    let proc_pool: Vec<usize> = base_p.leaves().to_vec();
    let mut med_pool: Vec<usize> = base_m.leaves().to_vec();
    if let Some(s) = &scenario {
        med_pool.retain(|&m| m != s.target);
    }
    if spec.procedures[1] > proc_pool.len() {
        return Err(Error::Config(format!(
            "generator.procedures allows {} per visit but only {} procedures are available",
            spec.procedures[1],
            proc_pool.len()
        )));
    }
    let proc_groups: Vec<Vec<usize>> = condition_nodes(&base_p)
        .iter()
        .map(|&g| leaves_under(&base_p, g).into_iter().filter(|p| proc_pool.contains(p)).collect::<Vec<_>>())
        .filter(|g: &Vec<usize>| !g.is_empty())
        .collect();

    let rules = if spec.rules.is_empty() {
        default_rules(dt, mt, &conditions, &med_pool)
    } else {
        spec.rules.clone()
    };
    struct Compiled {
        ancestor: usize,
        med: usize,
        p: f64,
        proc: Option<usize>,
    }
    let mut compiled = Vec::with_capacity(rules.len());
    for r in &rules {
        let ancestor = resolve(dt, &r.ancestor, "diagnosis")?;
        let med = resolve(mt, &r.medication, "medication")?;
        if mt.leaf_index(med).is_none() {
            return Err(Error::Config(format!("rule medication {:?} is not a leaf", r.medication)));
        }
        if scenario.as_ref().is_some_and(|s| s.target == med) {
            return Err(Error::Config(format!(
                "rule medication {:?} is the planted target",
                r.medication
            )));
        }
        let proc = match &r.requires_procedure {
            Some(c) => Some(resolve(pt, c, "procedure")?),
            None => None,
        };
        compiled.push(Compiled {
            ancestor,
            med,
            p: r.propensity,
            proc,
        });
    }

    let mut rng = seeded_rng(spec.seed, 0);
    let mut counters = [0usize; 2];
    let mut picks = [[0usize; 3]; 2];
    // per type and node: training visits seen, and how many of them carry the target
    let mut seen_with_target = [dt.len(), pt.len(), mt.len()].map(|n| vec![[0usize; 2]; n]);
    let mut patients = Vec::with_capacity(spec.patients);
    for pi in 0..spec.patients {
        let n_cond = rng.gen_range(spec.conditions[0]..=spec.conditions[1]);
        let profile: Vec<usize> = rand::seq::index::sample(&mut rng, conditions.len(), n_cond).into_vec();
        let n_visits = rng.gen_range(spec.visits[0]..=spec.visits[1]);
        let mut visits = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let mut active: Vec<usize> = profile
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(spec.condition_activity))
                .collect();
            if active.is_empty() {
                active.push(*profile.choose(&mut rng).expect("non-empty profile"));
            }
            let mut diags: Vec<usize> = Vec::new();
            for &c in &active {
                let n = rng.gen_range(spec.diagnoses_per_condition[0]..=spec.diagnoses_per_condition[1]);
                diags.extend(cond_leaves[c].choose_multiple(&mut rng, n).copied());
            }
            let n_proc = rng.gen_range(spec.procedures[0]..=spec.procedures[1]);
            let mut procs: Vec<usize> = Vec::new();
            while procs.len() < n_proc {
                let linked = !proc_groups.is_empty() && rng.gen_bool(spec.procedure_affinity);
                let pick = if linked {
                    let c = *active.choose(&mut rng).expect("active condition");
                    *proc_groups[c % proc_groups.len()].choose(&mut rng).expect("non-empty group")
                } else {
                    *proc_pool.choose(&mut rng).expect("procedure pool")
                };
                if !procs.contains(&pick) {
                    procs.push(pick);
                }
            }
            let mut meds: Vec<usize> = Vec::new();
            for r in &compiled {
                let fires = diags.iter().any(|&d| d == r.ancestor || dt.is_descendant(d, r.ancestor))
                    && r.proc.map_or(true, |p| procs.contains(&p));
                if fires && rng.gen_bool(r.p) && !meds.contains(&r.med) {
                    meds.push(r.med);
                }
            }
            for &m in &med_pool {
                if rng.gen_bool(spec.noise_rate) && !meds.contains(&m) {
                    meds.push(m);
                }
            }
            // a planted visit adds one leaf under the ancestor and the target
            if let Some(s) = &scenario {
                let region = usize::from(pi >= s.holdout_start);
                let mut base: Vec<(usize, usize)> = [&diags, &procs, &meds]
                    .iter()
                    .enumerate()
                    .flat_map(|(ty, codes)| codes.iter().map(move |&c| (ty, c)))
                    .collect();
                base.sort_unstable();
                base.dedup();
                let wanted = rng.gen_bool(s.rate);
                // in the training region, no background code may meet the target too often
                let capped = region == 0
                    && base.iter().any(|&(ty, c)| {
                        let [n, with] = seen_with_target[ty][c];
                        (with + 1) as f64 > PLANT_CAP * (n + 1) as f64
                    });
                let planted = wanted && !capped;
                if region == 0 {
                    for &(ty, c) in &base {
                        seen_with_target[ty][c][0] += 1;
                        seen_with_target[ty][c][1] += usize::from(planted);
                    }
                }
                if planted {
                    let k = counters[region];
                    counters[region] += 1;
                    let kind = if region == 0 {
                        TRAIN_CYCLE[k % TRAIN_CYCLE.len()]
                    } else {
                        HOLDOUT_CYCLE[k % HOLDOUT_CYCLE.len()]
                    };
                    let list: &[usize] = match kind {
                        Planted::Anchor => &s.anchors,
                        Planted::Visible => &s.visible,
                        Planted::HeldOut => &s.held_out,
                    };
                    // rotate through the codes of each kind separately
                    let seen = &mut picks[region][kind as usize];
                    let code = list[*seen % list.len()];
                    *seen += 1;
                    diags.push(code);
                    meds.push(s.target);
                }
            }
            let names = |tree: &Tree, v: &[usize]| v.iter().map(|&i| tree.code(i).to_string()).collect();
            visits.push(Visit::new(names(dt, &diags), names(pt, &procs), names(mt, &meds)));
        }
        patients.push(Patient {
            patient_id: format!("p{pi:05}"),
            visits,
        });
    }

    if let Some(s) = &scenario {
        // every rare sibling must meet the target in at most 1% of its training visits
        let anchor_visits = picks[0][Planted::Anchor as usize];
        if counters[0] <= 100 || anchor_visits > s.anchors.len() {
            return Err(Error::Config(format!(
                "planted scenario has {} target visits and {} anchor visits over {} anchors in the \
                 training region; it needs more than 100 target visits and no more anchor visits than anchors",
                counters[0],
                anchor_visits,
                s.anchors.len()
            )));
        }
    }
    let scenario = scenario.map(|s| {
        let names = |v: &[usize]| v.iter().map(|&i| dt.code(i).to_string()).collect();
        PlantedScenario {
            target: mt.code(s.target).to_string(),
            ancestor: dt.code(s.ancestor).to_string(),
            anchors: names(&s.anchors),
            visible: names(&s.visible),
            held_out: names(&s.held_out),
            holdout_start: s.holdout_start,
        }
    });
    Ok(Generated {
        forest,
        corpus: VisitCorpus::new(patients),
        rules,
        scenario,
    })
}

/// Two rules per condition: a strong primary and a weaker secondary medication.
fn default_rules(dt: &Tree, mt: &Tree, conditions: &[usize], meds: &[usize]) -> Vec<Rule> {
    let n = meds.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rules = Vec::with_capacity(2 * conditions.len());
    for (k, &c) in conditions.iter().enumerate() {
        let primary = meds[k % n];
        let secondary = meds[(k * 7 + 3) % n];
        rules.push(Rule {
            ancestor: dt.code(c).to_string(),
            medication: mt.code(primary).to_string(),
            propensity: 0.9,
            requires_procedure: None,
        });
        if secondary != primary {
            rules.push(Rule {
                ancestor: dt.code(c).to_string(),
                medication: mt.code(secondary).to_string(),
                propensity: 0.5,
                requires_procedure: None,
            });
        }
    }
    rules
}
