//! JSON and CSV report emission. Column layouts are listed in `docs/formats.md`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::DataError;
use crate::model::train::TracePoint;
use crate::recipes::RecipeRun;
use crate::spectra::SpectraReport;
use crate::theory::CertifiedMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// One CSV table. The first table of a report goes to the requested path;
/// later ones go to `<stem>_<name>.csv` next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

pub trait Report: Serialize {
    fn tables(&self) -> Vec<Table>;
}

fn f(x: f64) -> String {
    format!("{x}")
}

impl Report for SpectraReport {
    fn tables(&self) -> Vec<Table> {
        let mut long = Vec::with_capacity(self.layers * self.heads);
        for l in 0..self.layers {
            for h in 0..self.heads {
                long.push(vec![l.to_string(), h.to_string(), f(self.rank[h][l]), f(self.mass[h][l]), self.lazy[l].to_string()]);
            }
        }
        let layers = (0..self.layers)
            .map(|l| vec![l.to_string(), f(self.max_rank[l]), f(self.avg_mass[l]), self.lazy[l].to_string()])
            .collect();
        vec![
            Table {
                name: "heads",
                header: vec!["layer", "head", "rank", "mass", "lazy"],
                rows: long,
            },
            Table {
                name: "layers",
                header: vec!["layer", "max_rank", "avg_mass", "lazy"],
                rows: layers,
            },
        ]
    }
}

impl Report for [CertifiedMatrix] {
    fn tables(&self) -> Vec<Table> {
        let opt = |x: Option<usize>| x.map_or(String::new(), |v| v.to_string());
        vec![Table {
            name: "certificates",
            header: vec![
                "index", "seq", "layer", "head", "j_star", "epsilon", "T", "frobenius_defect", "sigma2", "bound", "argmax_agreement", "holds",
            ],
            rows: self
                .iter()
                .map(|c| {
                    vec![
                        c.index.to_string(),
                        opt(c.seq),
                        opt(c.layer),
                        opt(c.head),
                        c.certificate.j_star.to_string(),
                        f(c.certificate.epsilon),
                        c.certificate.t.to_string(),
                        f(c.certificate.frobenius_defect),
                        f(c.certificate.sigma2),
                        f(c.certificate.bound),
                        f(c.certificate.argmax_agreement),
                        c.holds.to_string(),
                    ]
                })
                .collect(),
        }]
    }
}

impl Report for Vec<CertifiedMatrix> {
    fn tables(&self) -> Vec<Table> {
        self.as_slice().tables()
    }
}

fn trace_rows(points: &[TracePoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| vec![p.step.to_string(), f(p.train_loss), f(p.val_loss), f(p.lr)])
        .collect()
}

const TRACE_HEADER: [&str; 4] = ["step", "train_loss", "val_loss", "lr"];

impl Report for RecipeRun {
    fn tables(&self) -> Vec<Table> {
        vec![
            Table {
                name: "rounds",
                header: vec!["round", "layers", "steps", "train_loss", "val_loss", "digest"],
                rows: self
                    .rounds
                    .iter()
                    .map(|r| vec![r.round.to_string(), r.layers.to_string(), r.steps.to_string(), f(r.train_loss), f(r.val_loss), r.digest.clone()])
                    .collect(),
            },
            Table {
                name: "trace",
                header: TRACE_HEADER.to_vec(),
                rows: trace_rows(&self.cumulative_trace()),
            },
        ]
    }
}

fn write_table(path: &Path, t: &Table) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report` to `path`; CSV output may add sibling files for extra
/// tables. Returns every path written.
pub fn emit_report<R: Report + ?Sized>(report: &R, format: ReportFormat, path: impl AsRef<Path>) -> Result<Vec<PathBuf>, DataError> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => {
            std::fs::write(path, serde_json::to_string_pretty(report)?)?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let mut out = Vec::new();
            for (i, t) in report.tables().iter().enumerate() {
                let p = if i == 0 { path.to_path_buf() } else { path.with_file_name(format!("{stem}_{}.csv", t.name)) };
                write_table(&p, t)?;
                out.push(p);
            }
            Ok(out)
        }
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, points: &[TracePoint]) -> Result<(), DataError> {
    write_table(
        path.as_ref(),
        &Table {
            name: "trace",
            header: TRACE_HEADER.to_vec(),
            rows: trace_rows(points),
        },
    )
}
