//! Ontology trees for the three entity types and their JSON file format.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Diagnosis,
    Procedure,
    Medication,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [
        EntityType::Diagnosis,
        EntityType::Procedure,
        EntityType::Medication,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityType::Diagnosis => "diagnosis",
            EntityType::Procedure => "procedure",
            EntityType::Medication => "medication",
        }
    }

    /// One-letter tag used in parameter names and corpus files.
    pub fn short(self) -> &'static str {
        match self {
            EntityType::Diagnosis => "d",
            EntityType::Procedure => "p",
            EntityType::Medication => "m",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `{"code", "parent"}` entry of the ontology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub code: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OntologyFile {
    pub diagnosis: Vec<NodeSpec>,
    pub procedure: Vec<NodeSpec>,
    pub medication: Vec<NodeSpec>,
}

impl OntologyFile {
    pub fn nodes(&self, ty: EntityType) -> &[NodeSpec] {
        match ty {
            EntityType::Diagnosis => &self.diagnosis,
            EntityType::Procedure => &self.procedure,
            EntityType::Medication => &self.medication,
        }
    }
}

/// A rooted tree. Node order follows the source file; leaves are the nodes
/// without children and are the only codes allowed in visits.
#[derive(Debug, Clone)]
pub struct Tree {
    codes: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    /// Root-first ancestor chain of each node (ends at the direct parent).
    ancestors: Vec<Vec<usize>>,
    leaves: Vec<usize>,
    leaf_of: Vec<Option<usize>>,
    index: HashMap<String, usize>,
    root: usize,
}

impl Tree {
    pub fn from_specs(ty: EntityType, specs: &[NodeSpec]) -> Result<Self> {
        let n = specs.len();
        if n == 0 {
            return Err(Error::Structure(format!("{ty} tree is empty")));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.code.clone(), i).is_some() {
                return Err(Error::Structure(format!("{ty}: duplicate code {:?}", s.code)));
            }
        }
        let mut parent = vec![None; n];
        let mut roots = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            match &s.parent {
                None => roots.push(i),
                Some(p) => {
                    let pi = *index.get(p).ok_or_else(|| {
                        Error::Structure(format!("{ty}: parent {p:?} of {:?} not found", s.code))
                    })?;
                    if pi == i {
                        return Err(Error::Structure(format!("{ty}: {:?} is its own parent", s.code)));
                    }
                    parent[i] = Some(pi);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Structure(format!(
                "{ty}: expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];

        let mut ancestors = vec![Vec::new(); n];
        let mut depth = vec![0; n];
        for i in 0..n {
            let mut chain = Vec::new();
            let mut cur = parent[i];
            while let Some(p) = cur {
                if chain.len() >= n {
                    return Err(Error::Structure(format!(
                        "{ty}: cycle through {:?}",
                        specs[i].code
                    )));
                }
                chain.push(p);
                cur = parent[p];
            }
            if chain.last().copied().unwrap_or(i) != root {
                return Err(Error::Structure(format!(
                    "{ty}: {:?} is not connected to the root",
                    specs[i].code
                )));
            }
            chain.reverse();
            depth[i] = chain.len();
            ancestors[i] = chain;
        }

        let mut has_child = vec![false; n];
        for p in parent.iter().flatten() {
            has_child[*p] = true;
        }
        let leaves: Vec<usize> = (0..n).filter(|&i| !has_child[i]).collect();
        let mut leaf_of = vec![None; n];
        for (li, &node) in leaves.iter().enumerate() {
            leaf_of[node] = Some(li);
        }
        Ok(Tree {
            codes: specs.iter().map(|s| s.code.clone()).collect(),
            parent,
            depth,
            ancestors,
            leaves,
            leaf_of,
            index,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn code(&self, node: usize) -> &str {
        &self.codes[node]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn ancestors(&self, node: usize) -> &[usize] {
        &self.ancestors[node]
    }

    pub fn node(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Node indices of the leaves, in node order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_index(&self, node: usize) -> Option<usize> {
        self.leaf_of[node]
    }

    pub fn leaf_code(&self, leaf: usize) -> &str {
        &self.codes[self.leaves[leaf]]
    }

    pub fn is_descendant(&self, node: usize, ancestor: usize) -> bool {
        self.ancestors[node].contains(&ancestor)
    }

    /// All (descendant, ancestor) pairs of the transitive closure.
    pub fn ancestor_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .flat_map(|i| self.ancestors[i].iter().map(move |&a| (i, a)))
            .collect()
    }

    pub fn to_specs(&self) -> Vec<NodeSpec> {
        (0..self.len())
            .map(|i| NodeSpec {
                code: self.codes[i].clone(),
                parent: self.parent[i].map(|p| self.codes[p].clone()),
            })
            .collect()
    }
}

/// The diagnosis, procedure and medication trees.
#[derive(Debug, Clone)]
pub struct OntologyForest {
    trees: [Tree; 3],
}

impl OntologyForest {
    pub fn from_file(file: &OntologyFile) -> Result<Self> {
        let trees = [
            Tree::from_specs(EntityType::Diagnosis, &file.diagnosis)?,
            Tree::from_specs(EntityType::Procedure, &file.procedure)?,
            Tree::from_specs(EntityType::Medication, &file.medication)?,
        ];
        // codes double as node labels in exported graph files
        let mut seen: HashMap<&str, EntityType> = HashMap::new();
        for ty in EntityType::ALL {
            for code in trees[ty.index()].codes() {
                if let Some(prev) = seen.insert(code, ty) {
                    return Err(Error::Structure(format!(
                        "code {code:?} appears in both {prev} and {ty} trees"
                    )));
                }
            }
        }
        Ok(OntologyForest { trees })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let file: OntologyFile = serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> OntologyFile {
        OntologyFile {
            diagnosis: self.trees[0].to_specs(),
            procedure: self.trees[1].to_specs(),
            medication: self.trees[2].to_specs(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn tree(&self, ty: EntityType) -> &Tree {
        &self.trees[ty.index()]
    }

    /// Leaf index of a code of the given type.
    pub fn leaf(&self, ty: EntityType, code: &str) -> Result<usize> {
        let tree = self.tree(ty);
        let node = tree
            .node(code)
            .ok_or_else(|| Error::Lookup(format!("unknown {ty} code {code:?}")))?;
        tree.leaf_index(node)
            .ok_or_else(|| Error::Lookup(format!("{ty} code {code:?} is not a leaf")))
    }

    pub fn n_leaves(&self, ty: EntityType) -> usize {
        self.tree(ty).n_leaves()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(code: &str, parent: Option<&str>) -> NodeSpec {
        NodeSpec {
            code: code.into(),
            parent: parent.map(Into::into),
        }
    }

    fn chain() -> Vec<NodeSpec> {
        vec![spec("r", None), spec("a", Some("r")), spec("b", Some("a")), spec("c", Some("r"))]
    }

    #[test]
    fn ancestors_and_pairs() {
        let t = Tree::from_specs(EntityType::Diagnosis, &chain()).unwrap();
        assert_eq!(t.ancestors(2), &[0, 1]);
        assert_eq!(t.leaves(), &[2, 3]);
        let mut pairs = t.ancestor_pairs();
        pairs.sort();
        assert_eq!(pairs, vec![(1, 0), (2, 0), (2, 1), (3, 0)]);
        for i in 0..t.len() {
            assert_eq!(t.ancestors(i).last().copied(), t.parent(i));
        }
    }

    #[test]
    fn rejects_malformed_trees() {
        let two_roots = vec![spec("r", None), spec("s", None)];
        assert!(Tree::from_specs(EntityType::Procedure, &two_roots).is_err());
        let missing = vec![spec("r", None), spec("a", Some("zz"))];
        assert!(Tree::from_specs(EntityType::Procedure, &missing).is_err());
        let cycle = vec![spec("r", None), spec("a", Some("b")), spec("b", Some("a"))];
        assert!(Tree::from_specs(EntityType::Procedure, &cycle).is_err());
        let dup = vec![spec("r", None), spec("r", Some("r"))];
        assert!(Tree::from_specs(EntityType::Procedure, &dup).is_err());
    }

    #[test]
    fn forest_rejects_codes_shared_across_types() {
        let file = OntologyFile {
            diagnosis: chain(),
            procedure: vec![spec("x", None)],
            medication: vec![spec("r", None)],
        };
        assert!(matches!(OntologyForest::from_file(&file), Err(Error::Structure(_))));
    }

    #[test]
    fn leaf_lookup() {
        let file = OntologyFile {
            diagnosis: chain(),
            procedure: vec![spec("P", None), spec("p1", Some("P"))],
            medication: vec![spec("M", None), spec("m1", Some("M"))],
        };
        let f = OntologyForest::from_file(&file).unwrap();
        assert_eq!(f.leaf(EntityType::Diagnosis, "c").unwrap(), 1);
        assert!(matches!(f.leaf(EntityType::Diagnosis, "a"), Err(Error::Lookup(_))));
        assert!(matches!(f.leaf(EntityType::Diagnosis, "q"), Err(Error::Lookup(_))));
    }
}
