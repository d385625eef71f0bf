use medrec_core::checkpoint;
use medrec_core::config::{EvalConfig, TrainConfig};
use medrec_core::corpus::{IndexedPatient, VisitCorpus};
use medrec_core::eval::{apply_mask, build_unseen};
use medrec_core::export;
use medrec_core::ontology::OntologyForest;
use medrec_core::synthetic::{generate, plant_unseen_scenario, GeneratorSpec};
use medrec_core::train::train;

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        dim: 8,
        max_epochs: 2,
        patience: 2,
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let g = generate(&GeneratorSpec {
        seed: 5,
        patients: 30,
        ..Default::default()
    })
    .unwrap();
    let (tr, va, te) = g.corpus.split(Default::default()).unwrap();
    let (tr, va, te) = (
        tr.index(&g.forest).unwrap(),
        va.index(&g.forest).unwrap(),
        te.index(&g.forest).unwrap(),
    );
    let model = train(&g.forest, &tr, &va, &quick_config(5)).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path, &g.forest).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.config(), model.config());
    let pats: Vec<&IndexedPatient> = te.patients.iter().collect();
    assert_eq!(back.predict(&pats).unwrap(), model.predict(&pats).unwrap());
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3], &g.forest).is_err());
    assert!(checkpoint::from_bytes(&bytes[..4], &g.forest).is_err());
}

#[test]
fn saved_corpus_and_ontology_reload_byte_for_byte() {
    let g = generate(&GeneratorSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (cp, op) = (dir.path().join("c.jsonl"), dir.path().join("o.json"));
    g.corpus.save(&cp).unwrap();
    g.forest.save(&op).unwrap();
    let corpus = VisitCorpus::load(&cp).unwrap();
    let forest = OntologyForest::load(&op).unwrap();
    assert_eq!(corpus, g.corpus);
    assert_eq!(corpus.to_jsonl(), std::fs::read_to_string(&cp).unwrap());
    forest.save(&op).unwrap();
    let again = OntologyForest::load(&op).unwrap();
    assert_eq!(again.to_file(), g.forest.to_file());
}

#[test]
fn planted_masks_are_exactly_the_visible_siblings() {
    for seed in 1..=6 {
        let spec = plant_unseen_scenario(
            &GeneratorSpec {
                seed,
                patients: 300,
                ..Default::default()
            },
            "M1.1.4",
        )
        .unwrap();
        let g = generate(&spec).unwrap();
        let sc = g.scenario.clone().unwrap();
        let (tr, _, _) = g.corpus.split(Default::default()).unwrap();
        let mask = build_unseen(&g.forest, &tr, &sc.target, &EvalConfig::default()).unwrap();
        let mut visible = sc.visible.clone();
        visible.sort();
        let mut sources = mask.sources.clone();
        sources.sort();
        assert_eq!(sources, visible, "seed {seed}");

        let masked = apply_mask(&tr, &mask);
        for v in masked.visits() {
            assert!(v.d.iter().all(|c| !sc.visible.contains(c) && !sc.held_out.contains(c)));
        }
        let test_has_held_out = g.corpus.patients[sc.holdout_start..]
            .iter()
            .flat_map(|p| &p.visits)
            .any(|v| v.d.iter().any(|c| sc.held_out.contains(c)));
        assert!(test_has_held_out);
    }
}

#[test]
fn gate_export_lists_every_non_self_edge() {
    let g = generate(&GeneratorSpec {
        seed: 2,
        patients: 30,
        ..Default::default()
    })
    .unwrap();
    let (tr, va, _) = g.corpus.split(Default::default()).unwrap();
    let out = train(
        &g.forest,
        &tr.index(&g.forest).unwrap(),
        &va.index(&g.forest).unwrap(),
        &quick_config(2),
    )
    .unwrap();
    let mut buf = Vec::new();
    export::write_gates(&out.model, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("source_code,target_code,prior_weight,pi,retained"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), out.model.graph().non_self_edges().len());
    let kept = rows.iter().filter(|r| r.ends_with(",1")).count();
    assert_eq!(kept, out.model.retained_edges());
}
