//! Scene datasets on disk: a `manifest.csv` plus one set of image files per
//! sample.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srstereo_core::edge::edge_gt_extract;
use srstereo_core::scene::{generate_scene, make_domain_suite, scene_set, sparsify_gt, EdgeSource, StereoSample};
use srstereo_core::{DisparityMap, Image, Mask, ScalarField};

use crate::config::ScenesSection;
use crate::error::{AppError, AppResult};
use crate::formats;

pub const MANIFEST: &str = "manifest.csv";

/// One manifest row. Paths are relative to the dataset directory; the
/// sparse columns are empty when sparsification was off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub domain: String,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
    pub left: String,
    pub right: String,
    pub disparity: String,
    pub occlusion: String,
    pub sparse: String,
    pub sparse_valid: String,
}

/// A sample read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub row: ManifestRow,
    pub left: Image,
    pub right: Image,
    pub disparity_gt: DisparityMap,
    pub occlusion: Mask,
    pub sparse_gt: Option<DisparityMap>,
}

/// Label of a disparity range, e.g. `d0-24`.
pub fn domain_label(range: [f64; 2]) -> String {
    format!("d{}-{}", range[0], range[1])
}

/// Seed of the sparsification draw for a scene.
fn sparsify_seed(scene_seed: u64) -> u64 {
    scene_seed ^ 0x5a5a_5a5a_5a5a_5a5a
}

/// Renders every configured domain and writes the dataset to `dir`, which
/// must exist. Returns the manifest rows.
pub fn write_dataset(dir: &Path, scenes: &ScenesSection, seed: u64) -> AppResult<Vec<ManifestRow>> {
    if scenes.domains.is_empty() {
        return Err(AppError::Usage("scenes.domains is empty".into()));
    }
    let base = scenes.base_spec(seed);
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir)?;
    let mut rows = Vec::new();
    for domain in make_domain_suite(&base, &scenes.domains) {
        domain.validate()?;
        let label = domain_label(domain.disparity_range);
        for spec in scene_set(&domain, scenes.count) {
            let index = rows.len();
            let s = generate_scene(&spec)?;
            let name = |suffix: &str| format!("samples/{index:05}_{suffix}");
            let mut row = ManifestRow {
                index,
                domain: label.clone(),
                d_min: domain.disparity_range[0],
                d_max: domain.disparity_range[1],
                seed: spec.seed,
                left: name("left.ppm"),
                right: name("right.ppm"),
                disparity: name("disp.pfm"),
                occlusion: name("occ.pgm"),
                sparse: String::new(),
                sparse_valid: String::new(),
            };
            formats::write_ppm(&dir.join(&row.left), &s.left)?;
            formats::write_ppm(&dir.join(&row.right), &s.right)?;
            formats::write_pfm(&dir.join(&row.disparity), &s.disparity_gt.values)?;
            formats::write_pgm(&dir.join(&row.occlusion), &s.occlusion_mask)?;
            if scenes.sparsify {
                let sparse = sparse_labels(&s, scenes.drop_prob, spec.seed)?;
                row.sparse = name("sparse.pfm");
                row.sparse_valid = name("sparse_valid.pgm");
                formats::write_pfm(&dir.join(&row.sparse), &sparse.values)?;
                formats::write_pgm(&dir.join(&row.sparse_valid), &sparse.valid)?;
            }
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Sparse labels of a scene: ground-truth edges erased, then random drops.
pub fn sparse_labels(s: &StereoSample, drop_prob: f64, scene_seed: u64) -> AppResult<DisparityMap> {
    let edge = edge_gt_extract(&s.disparity_gt)?.binarize(0.5);
    Ok(sparsify_gt(&s.disparity_gt, &edge, drop_prob, sparsify_seed(scene_seed), EdgeSource::GroundTruth)?.map)
}

pub fn read_manifest(dir: &Path) -> AppResult<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(AppError::Usage(format!("no dataset manifest at {}", path.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let rows = r.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
    if rows.is_empty() {
        return Err(AppError::Format(format!("{}: no samples", path.display())));
    }
    Ok(rows)
}

fn check_dims(path: &Path, got: (usize, usize), want: (usize, usize)) -> AppResult<()> {
    if got != want {
        return Err(AppError::Format(format!("{}: size {got:?} does not match the left image {want:?}", path.display())));
    }
    Ok(())
}

pub fn load_sample(dir: &Path, row: &ManifestRow) -> AppResult<LoadedSample> {
    let p = |rel: &str| -> PathBuf { dir.join(rel) };
    let left = formats::read_ppm(&p(&row.left))?;
    let dims = (left.height(), left.width());
    let right = formats::read_ppm(&p(&row.right))?;
    check_dims(&p(&row.right), (right.height(), right.width()), dims)?;
    let disp = formats::read_pfm(&p(&row.disparity))?;
    check_dims(&p(&row.disparity), disp.dims(), dims)?;
    let occlusion = formats::read_pgm(&p(&row.occlusion))?;
    check_dims(&p(&row.occlusion), occlusion.dims(), dims)?;
    let sparse_gt = if row.sparse.is_empty() {
        None
    } else {
        let values = formats::read_pfm(&p(&row.sparse))?;
        let valid = formats::read_pgm(&p(&row.sparse_valid))?;
        check_dims(&p(&row.sparse), values.dims(), dims)?;
        Some(ScalarField::new(values, valid)?)
    };
    Ok(LoadedSample { row: row.clone(), left, right, disparity_gt: ScalarField::dense(disp), occlusion, sparse_gt })
}

/// Reads the manifest and every sample of a dataset directory.
pub fn load_dataset(dir: &Path) -> AppResult<Vec<LoadedSample>> {
    read_manifest(dir)?.iter().map(|r| load_sample(dir, r)).collect()
}
