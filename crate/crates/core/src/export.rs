//! CSV exports of learned gates, fusion weights and embeddings.

use std::io::Write;

use crate::cooccurrence::csv_err;
use crate::error::Result;
use crate::model::Model;

/// One row per gated (non-self) edge.
pub fn write_gates(model: &Model, out: impl Write) -> Result<()> {
    let graph = model.graph();
    let layout = graph.layout();
    let forest = model.forest();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source_code", "target_code", "prior_weight", "pi", "retained"])
        .map_err(csv_err)?;
    for g in model.gate_report() {
        let (i, j) = (graph.sources()[g.edge], graph.targets()[g.edge]);
        w.write_record([
            layout.code(forest, i),
            layout.code(forest, j),
            &graph.weights()[g.edge].to_string(),
            &g.pi.to_string(),
            if g.retained { "1" } else { "0" },
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-code fusion weight β.
pub fn write_betas(model: &Model, out: impl Write) -> Result<()> {
    let e = model.export_embeddings()?;
    let layout = model.graph().layout();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["code", "type", "beta"]).map_err(csv_err)?;
    for (node, b) in e.beta.iter().enumerate() {
        let (ty, _) = layout.locate(node);
        w.write_record([layout.code(model.forest(), node), ty.name(), &b.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of `code,type,space,v0..` with space in {hie, co, fused}, leaves in node order.
pub fn write_embeddings(model: &Model, out: impl Write) -> Result<()> {
    let e = model.export_embeddings()?;
    let layout = model.graph().layout();
    let dim = e.fused.cols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["code".to_string(), "type".into(), "space".into()];
    header.extend((0..dim).map(|k| format!("v{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for node in 0..e.fused.rows() {
        let (ty, _) = layout.locate(node);
        let code = layout.code(model.forest(), node);
        for (space, m) in [("hie", &e.hie), ("co", &e.co), ("fused", &e.fused)] {
            let mut rec = vec![code.to_string(), ty.name().to_string(), space.to_string()];
            rec.extend(m.row(node).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
