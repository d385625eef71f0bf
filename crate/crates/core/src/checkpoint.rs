//! Checkpoint container: an 8-byte little-endian manifest length, a JSON
//! manifest, then every parameter as little-endian `f64` in row-major order.
//! Offsets in the manifest are byte offsets into the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::cooccurrence::CooccurrenceGraph;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::model::{Model, ParameterStore};
use crate::ontology::OntologyForest;

const FORMAT: &str = "medrec-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub sizes: [usize; 3],
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub graph: GraphEntry,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let g = model.graph();
    let mut offset = 0;
    let params = model
        .params
        .names()
        .iter()
        .zip(model.params.values())
        .map(|(name, m)| {
            let e = ParamEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
            };
            offset += m.len() * 8;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        graph: GraphEntry {
            sizes: g.sizes(),
            sources: g.sources().to_vec(),
            targets: g.targets().to_vec(),
            weights: g.weights().to_vec(),
        },
        params,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in model.params.values() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let bad = |m: &str| Error::parse("checkpoint", m);
    if bytes.len() < 8 {
        return Err(bad("file is shorter than its header"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(bad("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len])
        .map_err(|e| Error::parse(format!("checkpoint manifest:{}", e.column()), e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad("unsupported checkpoint format or version"));
    }
    Ok((manifest, &rest[len..]))
}

pub fn from_bytes(bytes: &[u8], forest: &OntologyForest) -> Result<Model> {
    let (manifest, data) = read_manifest(bytes)?;
    let mut params = ParameterStore::default();
    for e in &manifest.params {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + n * 8;
        if end > data.len() {
            return Err(Error::parse(
                format!("checkpoint param {}", e.name),
                "data section is truncated",
            ));
        }
        let values = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], values));
    }
    let g = manifest.graph;
    let graph = CooccurrenceGraph::from_edges(g.sizes, g.sources, g.targets, g.weights)?;
    Model::with_params(forest, &graph, &manifest.config, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load(path: &Path, forest: &OntologyForest) -> Result<Model> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?, forest)
}
