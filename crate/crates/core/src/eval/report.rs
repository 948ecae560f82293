// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::RankMethod;

/// One line of the per-feature report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetricsRow {
    pub layer: usize,
    pub head: usize,
    pub feature: usize,
    pub method: RankMethod,
    pub top_n: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Layer,
    Head,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Grouping::Layer),
            "head" => Ok(Grouping::Head),
            other => Err(Error::InvalidArgument(format!("unknown grouping `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `L{layer}` or `L{layer}H{head}`.
    pub group: String,
    pub method: RankMethod,
    pub top_n: usize,
    pub features: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mean precision, recall and F1 per `(group, method, top_n)`, sorted by
/// layer, head, method and `top_n`.
pub fn aggregate_report(rows: &[FeatureMetricsRow], grouping: Grouping) -> Vec<AggregateRow> {
    type Key = (usize, usize, RankMethod, usize);
    let mut acc: BTreeMap<Key, (usize, f64, f64, f64)> = BTreeMap::new();
    for r in rows {
        let head = match grouping {
            Grouping::Layer => 0,
            Grouping::Head => r.head,
        };
        let e = acc
            .entry((r.layer, head, r.method, r.top_n))
            .or_insert((0, 0.0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r.precision;
        e.2 += r.recall;
        e.3 += r.f1;
    }
    acc.into_iter()
        .map(|((layer, head, method, top_n), (n, p, rc, f))| {
            let k = n as f64;
            AggregateRow {
                group: match grouping {
                    Grouping::Layer => format!("L{layer}"),
                    Grouping::Head => format!("L{layer}H{head}"),
                },
                method,
                top_n,
                features: n,
                precision: p / k,
                recall: rc / k,
                f1: f / k,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub const FEATURE_CSV_HEADER: [&str; 8] = ["layer", "head", "feature", "method", "top_n", "precision", "recall", "f1"];
pub const AGGREGATE_CSV_HEADER: [&str; 7] = ["group", "method", "top_n", "features", "precision", "recall", "f1"];

pub fn write_feature_csv(path: &Path, rows: &[FeatureMetricsRow]) -> Result<()> {
    write_csv(path, rows, &FEATURE_CSV_HEADER)
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureMetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_csv(path, rows, &AGGREGATE_CSV_HEADER)
}

/// One line of the intervention report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub feature: String,
    pub seq: usize,
    pub repeats: usize,
    pub activation: f32,
}

pub fn write_intervention_csv(path: &Path, rows: &[InterventionRow]) -> Result<()> {
    write_csv(path, rows, &["feature", "seq", "repeats", "activation"])
}
