//! Directed co-occurrence prior over all leaf codes.
//!
//! Nodes are the leaves of the three trees laid out as diagnoses, then
//! procedures, then medications. `a_ij = |occ(i) ∩ occ(j)| / |occ(i)|` where
//! `occ(i)` is the set of visits containing code i. Every node has a self-loop
//! with weight 1. Edges are stored CSR-style, grouped by source with targets
//! ascending.

use std::collections::BTreeMap;
use std::io::Write;

use crate::corpus::IndexedCorpus;
use crate::error::{Error, Result};
use crate::ontology::{EntityType, OntologyForest};

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    sizes: [usize; 3],
    offsets: Vec<usize>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    occurrences: Vec<usize>,
}

/// Global node index layout shared by the graph and the attention encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeLayout {
    pub sizes: [usize; 3],
}

impl NodeLayout {
    pub fn new(sizes: [usize; 3]) -> Self {
        NodeLayout { sizes }
    }

    pub fn n_nodes(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn start(&self, ty: EntityType) -> usize {
        self.sizes[..ty.index()].iter().sum()
    }

    pub fn global(&self, ty: EntityType, leaf: usize) -> usize {
        self.start(ty) + leaf
    }

    pub fn locate(&self, node: usize) -> (EntityType, usize) {
        let mut rest = node;
        for ty in EntityType::ALL {
            if rest < self.sizes[ty.index()] {
                return (ty, rest);
            }
            rest -= self.sizes[ty.index()];
        }
        panic!("node {node} out of range");
    }

    pub fn code<'a>(&self, forest: &'a OntologyForest, node: usize) -> &'a str {
        let (ty, leaf) = self.locate(node);
        forest.tree(ty).leaf_code(leaf)
    }
}

impl CooccurrenceGraph {
    pub fn build_prior(corpus: &IndexedCorpus) -> Result<Self> {
        if corpus.n_visits() == 0 {
            return Err(Error::Config("co-occurrence prior needs a non-empty corpus".into()));
        }
        let layout = NodeLayout::new(corpus.sizes);
        let n = layout.n_nodes();
        let mut occurrences = vec![0usize; n];
        let mut joint: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];
        let mut nodes = Vec::new();
        for visit in corpus.visits() {
            nodes.clear();
            for ty in EntityType::ALL {
                nodes.extend(visit.get(ty).iter().map(|&l| layout.global(ty, l)));
            }
            for &i in &nodes {
                occurrences[i] += 1;
                for &j in &nodes {
                    if i != j {
                        *joint[i].entry(j).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let (mut sources, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        offsets.push(0);
        for i in 0..n {
            joint[i].insert(i, occurrences[i]);
            for (&j, &count) in &joint[i] {
                let w = if i == j {
                    1.0
                } else {
                    count as f64 / occurrences[i] as f64
                };
                sources.push(i);
                targets.push(j);
                weights.push(w);
            }
            offsets.push(targets.len());
        }
        Ok(CooccurrenceGraph {
            sizes: corpus.sizes,
            offsets,
            sources,
            targets,
            weights,
            occurrences,
        })
    }

    /// Rebuilds a graph from a stored edge list (sorted by source, then target).
    pub fn from_edges(
        sizes: [usize; 3],
        sources: Vec<usize>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n: usize = sizes.iter().sum();
        if sources.len() != targets.len() || sources.len() != weights.len() {
            return Err(Error::Structure("edge arrays differ in length".into()));
        }
        let ordered = sources
            .iter()
            .zip(&targets)
            .zip(sources.iter().zip(&targets).skip(1))
            .all(|(a, b)| a < b);
        if !ordered || targets.iter().chain(&sources).any(|&x| x >= n) {
            return Err(Error::Structure("edge list is not a sorted list over known nodes".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Structure("prior weights must lie in (0, 1]".into()));
        }
        let mut offsets = vec![0; n + 1];
        for &s in &sources {
            offsets[s + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let g = CooccurrenceGraph {
            sizes,
            offsets,
            sources,
            targets,
            weights,
            occurrences: Vec::new(),
        };
        for i in 0..n {
            if g.weight(i, i) != Some(1.0) {
                return Err(Error::Structure(format!("node {i} lacks its unit self-loop")));
            }
        }
        Ok(g)
    }

    pub fn layout(&self) -> NodeLayout {
        NodeLayout::new(self.sizes)
    }

    pub fn sizes(&self) -> [usize; 3] {
        self.sizes
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    /// Row pointer: edges of node i are `offsets[i]..offsets[i+1]`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Visit counts per node; empty for graphs rebuilt from an edge list.
    pub fn occurrences(&self) -> &[usize] {
        &self.occurrences
    }

    pub fn is_self(&self, edge: usize) -> bool {
        self.sources[edge] == self.targets[edge]
    }

    /// Edge ids of all non-self edges, in edge order.
    pub fn non_self_edges(&self) -> Vec<usize> {
        (0..self.n_edges()).filter(|&e| !self.is_self(e)).collect()
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.n_nodes() {
            return None;
        }
        let lo = self.offsets[i];
        let hi = self.offsets[i + 1];
        self.targets[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edge(i, j).map(|e| self.weights[e])
    }

    /// Out-neighbors of node i with their prior weights, ascending by target.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<(usize, f64)>> {
        if i >= self.n_nodes() {
            return Err(Error::Lookup(format!("node {i} is not in the graph")));
        }
        let r = self.offsets[i]..self.offsets[i + 1];
        Ok(self.targets[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
            .collect())
    }

    /// Non-self out-degree of every node.
    pub fn out_degrees(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .map(|i| self.offsets[i + 1] - self.offsets[i] - 1)
            .collect()
    }

    pub fn write_csv(&self, forest: &OntologyForest, out: impl Write) -> Result<()> {
        let layout = self.layout();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source_code", "target_code", "prior_weight"])
            .map_err(csv_err)?;
        for e in 0..self.n_edges() {
            w.write_record([
                layout.code(forest, self.sources[e]),
                layout.code(forest, self.targets[e]),
                &self.weights[e].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Invariant(format!("csv: {other:?}")),
    }
}
