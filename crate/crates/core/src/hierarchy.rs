//! Ontology encoder: ball projection of the base tables, the ancestry loss,
//! Möbius aggregation along ancestor chains and the log-map export.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{self, BallPoint};
use crate::matrix::Mat;
use crate::ontology::{OntologyForest, Tree};
use crate::tape::{Tape, Var};

/// Index plan for running the encoder of one tree on a tape.
#[derive(Debug, Clone)]
pub struct TreePlan {
    n_nodes: usize,
    /// Nodes of each depth, in node order.
    levels: Vec<Rc<[usize]>>,
    /// For each level ≥ 1, position of every node's parent in the previous level.
    parent_pos: Vec<Rc<[usize]>>,
    /// Maps node index to its row in the level-concatenated aggregate.
    unlevel: Rc<[usize]>,
    pair_desc: Rc<[usize]>,
    pair_anc: Rc<[usize]>,
    leaves: Rc<[usize]>,
}

impl TreePlan {
    pub fn new(tree: &Tree) -> Self {
        let n = tree.len();
        let mut levels: Vec<Vec<usize>> = vec![Vec::new(); tree.max_depth() + 1];
        for i in 0..n {
            levels[tree.depth(i)].push(i);
        }
        let mut pos = vec![0; n];
        for level in &levels {
            for (k, &i) in level.iter().enumerate() {
                pos[i] = k;
            }
        }
        let parent_pos = levels
            .iter()
            .skip(1)
            .map(|level| {
                level
                    .iter()
                    .map(|&i| pos[tree.parent(i).expect("non-root has a parent")])
                    .collect()
            })
            .collect();
        let mut unlevel = vec![0; n];
        let mut row = 0;
        for level in &levels {
            for &i in level {
                unlevel[i] = row;
                row += 1;
            }
        }
        let pairs = tree.ancestor_pairs();
        TreePlan {
            n_nodes: n,
            levels: levels.into_iter().map(Into::into).collect(),
            parent_pos,
            unlevel: unlevel.into(),
            pair_desc: pairs.iter().map(|p| p.0).collect(),
            pair_anc: pairs.iter().map(|p| p.1).collect(),
            leaves: tree.leaves().into(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_desc.len()
    }

    pub fn leaves(&self) -> Rc<[usize]> {
        self.leaves.clone()
    }

    /// Sum of ball distances over all (descendant, ancestor) pairs.
    pub fn ancestry_loss(&self, tape: &mut Tape, ball: Var) -> Var {
        if self.pair_desc.is_empty() {
            return tape.constant(Mat::scalar(0.0));
        }
        let d = tape.gather_rows(ball, self.pair_desc.clone());
        let a = tape.gather_rows(ball, self.pair_anc.clone());
        let dist = tape.poincare_distance(d, a);
        tape.sum(dist)
    }

    /// Root-first left fold `e_root ⊕ … ⊕ e_parent ⊕ e_i` for every node,
    /// computed one depth level at a time.
    pub fn aggregate(&self, tape: &mut Tape, ball: Var) -> Var {
        let mut agg = tape.gather_rows(ball, self.levels[0].clone());
        let mut parts = vec![agg];
        for (level, parents) in self.levels[1..].iter().zip(&self.parent_pos) {
            let from_parent = tape.gather_rows(agg, parents.clone());
            let own = tape.gather_rows(ball, level.clone());
            agg = tape.mobius_add(from_parent, own);
            parts.push(agg);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        tape.gather_rows(stacked, self.unlevel.clone())
    }

    /// Runs the encoder on a base table. Returns (E^hie over all nodes, ancestry loss).
    pub fn encode(&self, tape: &mut Tape, table: Var) -> (Var, Var) {
        let ball = tape.exp_project(table);
        let loss = self.ancestry_loss(tape, ball);
        let agg = self.aggregate(tape, ball);
        (tape.log_origin(agg), loss)
    }
}

fn check_rows(tree: &Tree, table: &Mat) -> Result<()> {
    if table.rows() != tree.len() {
        return Err(Error::Structure(format!(
            "table has {} rows but the tree has {} nodes",
            table.rows(),
            tree.len()
        )));
    }
    Ok(())
}

/// Projects every row of a base table into the ball.
pub fn project_table(table: &Mat) -> Result<Vec<BallPoint>> {
    (0..table.rows()).map(|r| geometry::exp_project(table.row(r))).collect()
}

/// Sum of ball distances over all (descendant, ancestor) pairs of all three trees.
pub fn ancestry_loss(forest: &OntologyForest, tables: [&Mat; 3]) -> Result<f64> {
    let mut total = 0.0;
    for ty in crate::ontology::EntityType::ALL {
        let tree = forest.tree(ty);
        let table = tables[ty.index()];
        check_rows(tree, table)?;
        let points = project_table(table)?;
        for (i, j) in tree.ancestor_pairs() {
            total += geometry::poincare_distance(&points[i], &points[j])?;
        }
    }
    Ok(total)
}

/// Möbius fold along each node's ancestor chain, root first.
pub fn aggregate_ancestors(tree: &Tree, points: &[BallPoint]) -> Result<Vec<BallPoint>> {
    if points.len() != tree.len() {
        return Err(Error::Structure(format!(
            "{} points for a tree of {} nodes",
            points.len(),
            tree.len()
        )));
    }
    (0..tree.len())
        .map(|i| {
            let mut acc: Option<BallPoint> = None;
            for &a in tree.ancestors(i).iter().chain(std::iter::once(&i)) {
                acc = Some(match acc {
                    None => points[a].clone(),
                    Some(x) => geometry::mobius_add(&x, &points[a])?,
                });
            }
            Ok(acc.expect("chain contains the node itself"))
        })
        .collect()
}

/// Row i is `log_origin` of the aggregated ball point of node i.
pub fn export_hierarchical(tree: &Tree, table: &Mat) -> Result<Mat> {
    check_rows(tree, table)?;
    let agg = aggregate_ancestors(tree, &project_table(table)?)?;
    let rows: Vec<Vec<f64>> = agg
        .iter()
        .map(|p| geometry::log_origin(p).into_inner())
        .collect();
    Ok(Mat::from_vec(
        table.rows(),
        table.cols(),
        rows.into_iter().flatten().collect(),
    ))
}
