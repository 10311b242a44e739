//! CSV reports.

use std::path::Path;

use serde::Serialize;
use srstereo_core::metrics::{MetricReport, Region};
use srstereo_core::train::StepLog;

use crate::error::AppResult;

#[derive(Serialize)]
struct StepRow {
    step: usize,
    learning_rate: f64,
    loss_total: f64,
    loss_init: f64,
    loss_delta: f64,
    loss_full: f64,
    extra_loss: f64,
    epe: f64,
    clip_saturation: f64,
    grad_norm: f64,
}

pub fn write_step_log(path: &Path, rows: &[StepLog]) -> AppResult<()> {
    write_rows(
        path,
        rows.iter().map(|r| StepRow {
            step: r.step,
            learning_rate: r.learning_rate,
            loss_total: r.loss.total,
            loss_init: r.loss.init,
            loss_delta: r.loss.delta,
            loss_full: r.loss.full,
            extra_loss: r.extra_loss,
            epe: r.epe,
            clip_saturation: r.clip_saturation,
            grad_norm: r.grad_norm,
        }),
    )
}

pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-sample metrics of one region.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetricRow {
    pub index: usize,
    pub domain: String,
    pub region: String,
    pub pixels: usize,
    pub epe: f64,
    pub gt_density: f64,
    pub err_1px: f64,
    pub err_2px: f64,
    pub err_3px: f64,
    pub d1: f64,
}

fn sample_row(index: usize, domain: &str, r: &MetricReport) -> SampleMetricRow {
    let err = |t: f64| r.err_rate(t).unwrap_or(f64::NAN);
    SampleMetricRow {
        index,
        domain: domain.to_string(),
        region: r.region.name().to_string(),
        pixels: r.pixels,
        epe: r.epe,
        gt_density: r.gt_density,
        err_1px: err(1.0),
        err_2px: err(2.0),
        err_3px: err(3.0),
        d1: r.d1,
    }
}

/// Rows for a report and its splits; omitted regions get no row.
pub fn sample_rows(index: usize, domain: &str, r: &MetricReport) -> Vec<SampleMetricRow> {
    let mut rows = vec![sample_row(index, domain, r)];
    rows.extend(r.splits.iter().map(|s| sample_row(index, domain, s)));
    rows
}

/// Pixel-weighted accumulation of per-sample metrics.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    pixels: usize,
    sums: [f64; 5],
}

impl Accumulator {
    pub fn add(&mut self, r: &SampleMetricRow) {
        let n = r.pixels as f64;
        self.pixels += r.pixels;
        for (s, v) in self.sums.iter_mut().zip([r.epe, r.err_1px, r.err_2px, r.err_3px, r.d1]) {
            *s += n * v;
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// Weighted means of epe, >1px, >2px, >3px and D1; NaN when empty.
    pub fn means(&self) -> [f64; 5] {
        let n = self.pixels as f64;
        self.sums.map(|s| if self.pixels == 0 { f64::NAN } else { s / n })
    }
}

/// Aggregate row of one domain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub domain: String,
    pub samples: usize,
    pub pixels: usize,
    pub epe: f64,
    pub err_1px: f64,
    pub err_2px: f64,
    pub err_3px: f64,
    pub d1: f64,
    pub edge_epe: f64,
    pub non_edge_epe: f64,
    pub noc_epe: f64,
    pub occ_epe: f64,
}

/// Groups per-sample rows by domain (in first-appearance order).
pub fn aggregate(rows: &[SampleMetricRow]) -> Vec<AggregateRow> {
    let mut domains: Vec<String> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain) {
            domains.push(r.domain.clone());
        }
    }
    domains
        .into_iter()
        .map(|d| {
            let of = |region: Region| {
                let mut acc = Accumulator::default();
                rows.iter().filter(|r| r.domain == d && r.region == region.name()).for_each(|r| acc.add(r));
                acc
            };
            let all = of(Region::All);
            let m = all.means();
            let samples = rows.iter().filter(|r| r.domain == d && r.region == Region::All.name()).count();
            AggregateRow {
                domain: d.clone(),
                samples,
                pixels: all.pixels(),
                epe: m[0],
                err_1px: m[1],
                err_2px: m[2],
                err_3px: m[3],
                d1: m[4],
                edge_epe: of(Region::Edge).means()[0],
                non_edge_epe: of(Region::NonEdge).means()[0],
                noc_epe: of(Region::Noc).means()[0],
                occ_epe: of(Region::Occ).means()[0],
            }
        })
        .collect()
}
