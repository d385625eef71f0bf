use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use medrec_core::checkpoint;
use medrec_core::config::RunConfig;
use medrec_core::corpus::VisitCorpus;
use medrec_core::eval::{analyze_graph, build_unseen, evaluate, mask_training_part};
use medrec_core::export;
use medrec_core::model::Model;
use medrec_core::ontology::{EntityType, OntologyForest};
use medrec_core::synthetic::{generate, plant_unseen_scenario};
use medrec_core::train::{train, write_log};
use medrec_core::{Error, Result};
use serde::Serialize;

fn out_path(config: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io_at(&config.out_dir, e))?;
    Ok(config.out_dir.join(name))
}

fn ontology_path(config: &RunConfig) -> PathBuf {
    config.paths.ontology.clone().unwrap_or_else(|| config.out_dir.join("ontology.json"))
}

fn corpus_path(config: &RunConfig) -> PathBuf {
    config.paths.corpus.clone().unwrap_or_else(|| config.out_dir.join("corpus.jsonl"))
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config.paths.checkpoint.clone().unwrap_or_else(|| config.out_dir.join("model.ckpt"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?))
}

fn load_model(config: &RunConfig) -> Result<(OntologyForest, Model)> {
    let forest = OntologyForest::load(&ontology_path(config))?;
    let model = checkpoint::load(&checkpoint_path(config), &forest)?;
    Ok((forest, model))
}

pub fn gen_data(config: &RunConfig) -> Result<()> {
    let spec = match &config.target_med {
        Some(target) => plant_unseen_scenario(&config.generator, target)?,
        None => config.generator.clone(),
    };
    let g = generate(&spec)?;
    let ontology = out_path(config, "ontology.json")?;
    g.forest.save(&ontology)?;
    info!("wrote {}", ontology.display());
    let corpus = out_path(config, "corpus.jsonl")?;
    g.corpus.save(&corpus)?;
    info!("wrote {} ({} patients, {} visits)", corpus.display(), g.corpus.len(), g.corpus.n_visits());
    if let Some(s) = &g.scenario {
        write_json(&out_path(config, "scenario.json")?, s)?;
    }
    Ok(())
}

pub fn train_cmd(config: &RunConfig) -> Result<()> {
    let forest = OntologyForest::load(&ontology_path(config))?;
    let corpus = VisitCorpus::load(&corpus_path(config))?;
    let (tr, va, _) = corpus.split(config.train.split)?;
    let outcome = train(&forest, &tr.index(&forest)?, &va.index(&forest)?, &config.train)?;
    info!(
        "best epoch {} with validation Jaccard {:.4}",
        outcome.best_epoch, outcome.best_val_jaccard
    );
    let ckpt = checkpoint_path(config);
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    checkpoint::save(&outcome.model, &ckpt)?;
    info!("wrote {}", ckpt.display());
    let log_path = out_path(config, "train_log.csv")?;
    write_log(&outcome.log, create(&log_path)?)?;
    info!("wrote {}", log_path.display());
    Ok(())
}

pub fn eval_cmd(config: &RunConfig) -> Result<()> {
    let (forest, model) = load_model(config)?;
    let corpus = VisitCorpus::load(&corpus_path(config))?;
    let (_, _, test) = corpus.split(config.train.split)?;
    let target = match &config.target_med {
        Some(code) => Some(forest.leaf(EntityType::Medication, code)?),
        None => None,
    };
    let report = evaluate(&model, &test.index(&forest)?, config.eval.threshold, target)?;
    write_json(&out_path(config, "metrics.json")?, &report)
}

pub fn mask_unseen(config: &RunConfig) -> Result<()> {
    let target = config
        .target_med
        .as_deref()
        .ok_or_else(|| Error::Config("mask-unseen needs --target-med".into()))?;
    let forest = OntologyForest::load(&ontology_path(config))?;
    let corpus = VisitCorpus::load(&corpus_path(config))?;
    let [n_train, _] = config.train.split.boundaries(corpus.len())?;
    let (tr, _, _) = corpus.split(config.train.split)?;
    let spec = build_unseen(&forest, &tr, target, &config.eval)?;
    info!("masking {} codes: {:?}", spec.sources.len(), spec.sources);
    let masked = mask_training_part(&corpus, n_train, &spec);
    let path = out_path(config, "corpus.masked.jsonl")?;
    masked.save(&path)?;
    info!("wrote {}", path.display());
    write_json(&out_path(config, "unseen.json")?, &spec)
}

pub fn export_graph(config: &RunConfig) -> Result<()> {
    let (_, model) = load_model(config)?;
    let path = out_path(config, "gates.csv")?;
    export::write_gates(&model, create(&path)?)?;
    info!("wrote {}", path.display());
    let report = analyze_graph(model.graph(), &model.gate_report(), config.eval.strong_prior)?;
    write_json(&out_path(config, "graph_report.json")?, &report)
}

pub fn export_embeddings(config: &RunConfig) -> Result<()> {
    let (_, model) = load_model(config)?;
    let path = out_path(config, "embeddings.csv")?;
    export::write_embeddings(&model, create(&path)?)?;
    info!("wrote {}", path.display());
    let path = out_path(config, "betas.csv")?;
    export::write_betas(&model, create(&path)?)?;
    info!("wrote {}", path.display());
    Ok(())
}
