//! CSV outputs. Headers are always written, even with no rows.

use std::io::Write;
use std::path::Path;

use embodiflow_core::adapt::CurveRow;
use embodiflow_core::analysis::DistanceMatrix;
use embodiflow_core::trainer::MetricRow;
use serde::Serialize;

pub const METRICS_HEADER: [&str; 6] = ["iter", "domain", "loss_mse", "loss_bce", "grad_norm", "val_l1"];
pub const CURVE_HEADER: [&str; 4] = ["iter", "mode", "val_l1", "success_rate"];

pub fn write_rows<W: Write, R: Serialize>(w: W, header: &[&str], rows: &[R]) -> csv::Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> csv::Result<()> {
    write_rows(std::fs::File::create(path)?, &METRICS_HEADER, rows)
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> csv::Result<()> {
    write_rows(std::fs::File::create(path)?, &CURVE_HEADER, rows)
}

pub fn read_metrics(path: &Path) -> csv::Result<Vec<MetricRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

pub fn read_curve(path: &Path) -> csv::Result<Vec<CurveRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Square matrix with a leading `domain` column.
pub fn write_matrix<W: Write>(w: W, ids: &[String], m: &[Vec<f64>]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["domain".to_string()];
    head.extend(ids.iter().cloned());
    wr.write_record(&head)?;
    for (id, row) in ids.iter().zip(m) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_distances(dir: &Path, d: &DistanceMatrix) -> csv::Result<()> {
    write_matrix(std::fs::File::create(dir.join("distances_euclidean.csv"))?, &d.ids, &d.euclidean)?;
    write_matrix(std::fs::File::create(dir.join("distances_cosine.csv"))?, &d.ids, &d.cosine)
}
