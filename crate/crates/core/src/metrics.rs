//! Disparity error metrics, region splits and edge F1.

use alloc::vec::Vec;

use crate::edge::EdgeMap;
use crate::error::{ensure, Error, Result};
use crate::field::{DisparityMap, Mask, ScalarField};

/// Thresholds reported by [`MetricReport::err_rates`].
pub const ERROR_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];

fn check_pair(pred: &ScalarField, gt: &DisparityMap) -> Result<()> {
    ensure!(pred.dims() == gt.dims(), Shape, "prediction {:?} vs gt {:?}", pred.dims(), gt.dims());
    Ok(())
}

fn errors_over(pred: &ScalarField, gt: &DisparityMap, region: Option<&Mask>) -> Result<Vec<(f64, f64)>> {
    check_pair(pred, gt)?;
    let out: Vec<(f64, f64)> = (0..gt.values.len())
        .filter(|&i| gt.valid.as_slice()[i] && region.is_none_or(|r| r.as_slice()[i]))
        .map(|i| ((pred.values.as_slice()[i] - gt.values.as_slice()[i]).abs(), gt.values.as_slice()[i]))
        .collect();
    if out.is_empty() {
        return Err(Error::NoValidPixels("no valid ground-truth pixels".into()));
    }
    Ok(out)
}

/// Mean absolute error over valid gt pixels.
pub fn epe(pred: &ScalarField, gt: &DisparityMap) -> Result<f64> {
    let e = errors_over(pred, gt, None)?;
    Ok(e.iter().map(|p| p.0).sum::<f64>() / e.len() as f64)
}

/// Fraction of valid pixels with error strictly above `tau`.
pub fn err_rate(pred: &ScalarField, gt: &DisparityMap, tau: f64) -> Result<f64> {
    ensure!(tau > 0.0, Contract, "threshold must be > 0, got {tau}");
    let e = errors_over(pred, gt, None)?;
    Ok(e.iter().filter(|p| p.0 > tau).count() as f64 / e.len() as f64)
}

fn is_d1_outlier(err: f64, gt: f64) -> bool {
    err > 3.0 && err > 0.05 * gt
}

/// KITTI outlier rate: error above 3 px and above 5% of the gt.
pub fn d1(pred: &ScalarField, gt: &DisparityMap) -> Result<f64> {
    let e = errors_over(pred, gt, None)?;
    Ok(e.iter().filter(|p| is_d1_outlier(p.0, p.1)).count() as f64 / e.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    All,
    /// 3x3-dilated ground-truth edges.
    Edge,
    NonEdge,
    /// Non-occluded.
    Noc,
    Occ,
}

impl Region {
    pub const SPLITS: [Region; 4] = [Region::Edge, Region::NonEdge, Region::Noc, Region::Occ];

    pub fn name(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Edge => "edge",
            Region::NonEdge => "non_edge",
            Region::Noc => "noc",
            Region::Occ => "occ",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub region: Region,
    /// Pixels that are valid in the gt and inside the region.
    pub pixels: usize,
    pub epe: f64,
    /// Valid-gt fraction of the region.
    pub gt_density: f64,
    /// `(threshold, rate)` for each of [`ERROR_THRESHOLDS`].
    pub err_rates: Vec<(f64, f64)>,
    pub d1: f64,
    pub splits: Vec<MetricReport>,
    /// Regions left out because they had no valid pixels.
    pub omitted: Vec<Region>,
}

impl MetricReport {
    pub fn split(&self, region: Region) -> Option<&MetricReport> {
        self.splits.iter().find(|s| s.region == region)
    }

    pub fn err_rate(&self, tau: f64) -> Option<f64> {
        self.err_rates.iter().find(|e| e.0 == tau).map(|e| e.1)
    }
}

fn report(pred: &ScalarField, gt: &DisparityMap, region: Region, mask: Option<&Mask>) -> Result<MetricReport> {
    let e = errors_over(pred, gt, mask)?;
    let n = e.len() as f64;
    let area = mask.map_or(gt.values.len(), Mask::count);
    Ok(MetricReport {
        region,
        pixels: e.len(),
        epe: e.iter().map(|p| p.0).sum::<f64>() / n,
        gt_density: n / area as f64,
        err_rates: ERROR_THRESHOLDS.iter().map(|&t| (t, e.iter().filter(|p| p.0 > t).count() as f64 / n)).collect(),
        d1: e.iter().filter(|p| is_d1_outlier(p.0, p.1)).count() as f64 / n,
        splits: Vec::new(),
        omitted: Vec::new(),
    })
}

/// Metrics over all valid pixels, with splits for the dilated edge band,
/// its complement, and the non-occluded / occluded pixels.
pub fn region_split_eval(
    pred: &ScalarField,
    gt: &DisparityMap,
    edge_gt: &EdgeMap,
    occlusion: &Mask,
) -> Result<MetricReport> {
    check_pair(pred, gt)?;
    ensure!(
        edge_gt.dims() == gt.dims() && occlusion.dims() == gt.dims(),
        Shape,
        "edge {:?} / occlusion {:?} vs gt {:?}",
        edge_gt.dims(),
        occlusion.dims(),
        gt.dims()
    );
    let mut all = report(pred, gt, Region::All, None)?;
    let edge = edge_gt.binarize(0.5).dilate3();
    for region in Region::SPLITS {
        let mask = match region {
            Region::Edge => edge.clone(),
            Region::NonEdge => edge.map(|&e| !e),
            Region::Noc => occlusion.map(|&o| !o),
            Region::Occ => occlusion.clone(),
            Region::All => unreachable!(),
        };
        match report(pred, gt, region, Some(&mask)) {
            Ok(r) => all.splits.push(r),
            Err(Error::NoValidPixels(_)) => all.omitted.push(region),
            Err(e) => return Err(e),
        }
    }
    Ok(all)
}

/// F1 of `edge_pred > bin_thresh` against a binary ground truth.
pub fn edge_f1(edge_pred: &EdgeMap, edge_gt: &EdgeMap, bin_thresh: f64) -> Result<f64> {
    ensure!(
        edge_pred.dims() == edge_gt.dims(),
        Shape,
        "edge maps {:?} vs {:?}",
        edge_pred.dims(),
        edge_gt.dims()
    );
    ensure!(
        edge_gt.values.as_slice().iter().all(|&v| v == 0.0 || v == 1.0),
        Contract,
        "edge ground truth must be binary"
    );
    let (tp, fp, fn_) = f1_counts(edge_pred, edge_gt, bin_thresh);
    if tp + fn_ == 0 {
        return Err(Error::NoValidPixels("edge ground truth has no edge pixels".into()));
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// True positives, false positives and false negatives.
pub fn f1_counts(edge_pred: &EdgeMap, edge_gt: &EdgeMap, bin_thresh: f64) -> (usize, usize, usize) {
    let p = edge_pred.binarize(bin_thresh);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&a, &b) in p.as_slice().iter().zip(edge_gt.values.as_slice()) {
        match (a, b == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}
