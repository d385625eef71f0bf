//! Patient visit corpora: the JSONL file format, validation against the
//! ontology, and the patient-level split.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{EntityType, OntologyForest};

/// One visit as stored on disk. Codes are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Visit {
    pub d: Vec<String>,
    pub p: Vec<String>,
    pub m: Vec<String>,
}

impl Visit {
    pub fn new(d: Vec<String>, p: Vec<String>, m: Vec<String>) -> Self {
        let mut v = Visit { d, p, m };
        v.canonicalize();
        v
    }

    pub fn codes(&self, ty: EntityType) -> &[String] {
        match ty {
            EntityType::Diagnosis => &self.d,
            EntityType::Procedure => &self.p,
            EntityType::Medication => &self.m,
        }
    }

    pub fn codes_mut(&mut self, ty: EntityType) -> &mut Vec<String> {
        match ty {
            EntityType::Diagnosis => &mut self.d,
            EntityType::Procedure => &mut self.p,
            EntityType::Medication => &mut self.m,
        }
    }

    pub fn canonicalize(&mut self) {
        for ty in EntityType::ALL {
            let c = self.codes_mut(ty);
            c.sort();
            c.dedup();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VisitCorpus {
    pub patients: Vec<Patient>,
}

impl VisitCorpus {
    pub fn new(patients: Vec<Patient>) -> Self {
        VisitCorpus { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.patients.iter().flat_map(|p| p.visits.iter())
    }

    /// Parses JSONL text. Duplicate codes within a set are rejected; codes
    /// are sorted on the way in so serialization is canonical.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::read(BufReader::new(text.as_bytes()), source)
    }

    pub fn read(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut patients = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("{source}:{}", lineno + 1);
            let mut patient: Patient = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{loc}:{}", e.column()), e.to_string()))?;
            for (vi, visit) in patient.visits.iter_mut().enumerate() {
                for ty in EntityType::ALL {
                    let codes = visit.codes(ty);
                    let unique: BTreeSet<&String> = codes.iter().collect();
                    if unique.len() != codes.len() {
                        return Err(Error::parse(
                            format!("{loc}: visits[{vi}].{}", ty.short()),
                            "duplicate code in visit",
                        ));
                    }
                }
                visit.canonicalize();
            }
            patients.push(patient);
        }
        Ok(VisitCorpus { patients })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read(BufReader::new(file), &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.patients {
            out.push_str(&serde_json::to_string(p).expect("patient serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?);
        f.write_all(self.to_jsonl().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Checks every patient against the ontology and resolves codes to leaf
    /// indices.
    pub fn index(&self, forest: &OntologyForest) -> Result<IndexedCorpus> {
        let mut patients = Vec::with_capacity(self.patients.len());
        for p in &self.patients {
            if p.visits.len() < 2 {
                return Err(Error::Ingestion(format!(
                    "patient {:?} has {} visit(s); at least 2 are required",
                    p.patient_id,
                    p.visits.len()
                )));
            }
            let mut visits = Vec::with_capacity(p.visits.len());
            for v in &p.visits {
                let mut codes: [Vec<usize>; 3] = Default::default();
                for ty in EntityType::ALL {
                    let mut idx = Vec::with_capacity(v.codes(ty).len());
                    for code in v.codes(ty) {
                        let leaf = forest.leaf(ty, code).map_err(|e| {
                            Error::Ingestion(format!("patient {:?}: {e}", p.patient_id))
                        })?;
                        idx.push(leaf);
                    }
                    idx.sort_unstable();
                    if idx.windows(2).any(|w| w[0] == w[1]) {
                        return Err(Error::Ingestion(format!(
                            "patient {:?}: duplicate {ty} code in a visit",
                            p.patient_id
                        )));
                    }
                    codes[ty.index()] = idx;
                }
                visits.push(IndexedVisit { codes });
            }
            patients.push(IndexedPatient {
                id: p.patient_id.clone(),
                visits,
            });
        }
        Ok(IndexedCorpus {
            patients,
            sizes: [
                forest.n_leaves(EntityType::Diagnosis),
                forest.n_leaves(EntityType::Procedure),
                forest.n_leaves(EntityType::Medication),
            ],
        })
    }

    /// Contiguous split by patient order. Returns (train, validation, test).
    pub fn split(&self, fractions: SplitFractions) -> Result<(VisitCorpus, VisitCorpus, VisitCorpus)> {
        let [a, b] = fractions.boundaries(self.len())?;
        Ok((
            VisitCorpus::new(self.patients[..a].to_vec()),
            VisitCorpus::new(self.patients[a..b].to_vec()),
            VisitCorpus::new(self.patients[b..].to_vec()),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 2.0 / 3.0,
            validation: 1.0 / 6.0,
        }
    }
}

impl SplitFractions {
    /// Patient indices where validation and test begin. Every part must be
    /// non-empty.
    pub fn boundaries(&self, n: usize) -> Result<[usize; 2]> {
        let ok = self.train > 0.0 && self.validation > 0.0 && self.train + self.validation < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "split fractions train={} validation={} must be positive and leave room for a test part",
                self.train, self.validation
            )));
        }
        let a = (n as f64 * self.train).round() as usize;
        let b = (n as f64 * (self.train + self.validation)).round() as usize;
        if a == 0 || b <= a || b >= n {
            return Err(Error::Config(format!(
                "split of {n} patients leaves an empty part (train {a}, validation {}, test {})",
                b.saturating_sub(a),
                n.saturating_sub(b)
            )));
        }
        Ok([a, b])
    }
}

/// Leaf indices of one visit, per entity type, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedVisit {
    pub codes: [Vec<usize>; 3],
}

impl IndexedVisit {
    pub fn get(&self, ty: EntityType) -> &[usize] {
        &self.codes[ty.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedPatient {
    pub id: String,
    pub visits: Vec<IndexedVisit>,
}

/// A corpus resolved against an ontology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedCorpus {
    pub patients: Vec<IndexedPatient>,
    /// Leaf counts per entity type.
    pub sizes: [usize; 3],
}

impl IndexedCorpus {
    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn n_meds(&self) -> usize {
        self.sizes[EntityType::Medication.index()]
    }

    pub fn visits(&self) -> impl Iterator<Item = &IndexedVisit> {
        self.patients.iter().flat_map(|p| p.visits.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"patient_id":"p1","visits":[{"d":["b","a"],"p":[],"m":["x"]},{"d":[],"p":["q"],"m":[]}]}"#;

    #[test]
    fn parse_sorts_codes_and_round_trips() {
        let c = VisitCorpus::parse(LINE, "mem").unwrap();
        assert_eq!(c.patients[0].visits[0].d, vec!["a", "b"]);
        let once = c.to_jsonl();
        let again = VisitCorpus::parse(&once, "mem").unwrap().to_jsonl();
        assert_eq!(once, again);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = format!("{LINE}\n{{\"patient_id\": 3}}\n");
        match VisitCorpus::parse(&text, "c.jsonl") {
            Err(Error::Parse { location, .. }) => assert!(location.starts_with("c.jsonl:2"), "{location}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let dup = r#"{"patient_id":"p","visits":[{"d":["a","a"],"p":[],"m":[]}]}"#;
        assert!(matches!(VisitCorpus::parse(dup, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_is_contiguous() {
        let patients: Vec<Patient> = (0..12)
            .map(|i| Patient {
                patient_id: format!("p{i}"),
                visits: vec![],
            })
            .collect();
        let c = VisitCorpus::new(patients);
        let (tr, va, te) = c.split(SplitFractions::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 2, 2));
        assert_eq!(va.patients[0].patient_id, "p8");
        let tiny = VisitCorpus::new(c.patients[..2].to_vec());
        assert!(matches!(tiny.split(SplitFractions::default()), Err(Error::Config(_))));
    }
}
