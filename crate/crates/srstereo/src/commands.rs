//! The subcommands. Each one resolves its configuration, prepares an output
//! directory holding `config.toml`, and writes its artifacts there.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use srstereo_core::backbone::disparity_levels;
use srstereo_core::edge::{
    dape_finetune, edge_gt_extract, edge_samples, pseudo_label_select, train_edge_estimator, DapeConfig, EdgeEstimator,
    PseudoLabel, TargetSample,
};
use srstereo_core::grad_suite::run_suite;
use srstereo_core::metrics::{region_split_eval, Region};
use srstereo_core::model::StereoModel;
use srstereo_core::train::{train_stereo, StepLog, TrainConfig, TrainSample};
use srstereo_core::{DisparityMap, ScalarField};

use crate::checkpoint::{self, Checkpoint};
use crate::colormap::colorize;
use crate::config::{resolve_path, RunConfig};
use crate::dataset::{self, LoadedSample};
use crate::error::{AppError, AppResult};
use crate::formats;
use crate::report::{self, SampleMetricRow};

pub const CONFIG_FILE: &str = "config.toml";
pub const STEREO_KIND: &str = "stereo";
pub const EDGE_KIND: &str = "edge";

/// Creates the output directory (refusing a non-empty one unless `force`)
/// and archives the resolved configuration in it.
pub fn prepare_output(cfg: &RunConfig, force: bool) -> AppResult<PathBuf> {
    let dir = resolve_path(&cfg.output);
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)?.next().is_some();
        if non_empty && !force {
            return Err(AppError::Usage(format!("output directory {} is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(dir)
}

fn progress(label: &str, r: &StepLog, total: usize) {
    if (r.step + 1) % 100 == 0 || r.step + 1 == total {
        eprintln!("{label} step {}/{total} loss {:.4} epe {:.3}", r.step + 1, r.loss.total + r.extra_loss, r.epe);
    }
}

/// Config embedded in checkpoints: the run config without its output
/// directory, so equal runs give equal files wherever they are written.
fn checkpoint_config(cfg: &RunConfig) -> String {
    RunConfig { output: String::new(), ..cfg.clone() }.to_toml()
}

pub fn save_stereo(path: &Path, cfg: &RunConfig, model: &StereoModel) -> AppResult<String> {
    let ck = Checkpoint { kind: STEREO_KIND.into(), config: checkpoint_config(cfg), params: model.store.clone() };
    checkpoint::save(path, &ck)
}

pub fn save_edge(path: &Path, cfg: &RunConfig, est: &EdgeEstimator) -> AppResult<String> {
    let ck = Checkpoint { kind: EDGE_KIND.into(), config: checkpoint_config(cfg), params: est.store.clone() };
    checkpoint::save(path, &ck)
}

fn load_kind(path: &Path, kind: &str) -> AppResult<(Checkpoint, RunConfig)> {
    let ck = checkpoint::load(path)?;
    if ck.kind != kind {
        return Err(AppError::Usage(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind)));
    }
    let cfg = RunConfig::resolve(&ck.config, &[])?;
    Ok((ck, cfg))
}

/// A stereo model rebuilt from the configuration stored in its checkpoint.
pub fn load_stereo(path: &Path) -> AppResult<StereoModel> {
    let (ck, cfg) = load_kind(path, STEREO_KIND)?;
    let mut model = StereoModel::new(cfg.model_config()?)?;
    model.store.load_from(&ck.params)?;
    Ok(model)
}

pub fn load_edge(path: &Path) -> AppResult<EdgeEstimator> {
    let (ck, cfg) = load_kind(path, EDGE_KIND)?;
    let mut est = EdgeEstimator::new(cfg.edge_config());
    est.store.load_from(&ck.params)?;
    Ok(est)
}

fn train_samples(data: &[LoadedSample]) -> Vec<TrainSample> {
    data.iter()
        .map(|s| TrainSample { left: s.left.clone(), right: s.right.clone(), gt: s.disparity_gt.clone() })
        .collect()
}

pub fn gen_scenes(cfg: &RunConfig, force: bool) -> AppResult<()> {
    let dir = prepare_output(cfg, force)?;
    let rows = dataset::write_dataset(&dir, &cfg.scenes, cfg.seed)?;
    eprintln!("wrote {} samples to {}", rows.len(), dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, force: bool) -> AppResult<()> {
    let model_cfg = cfg.model_config()?;
    let mut model = StereoModel::new(model_cfg)?;
    let data = dataset::load_dataset(&resolve_path(&cfg.train.dataset))?;
    let dir = prepare_output(cfg, force)?;
    let samples = train_samples(&data);
    let tc = cfg.train_config();
    let mut logs = Vec::with_capacity(tc.steps);
    train_stereo(&mut model, &samples, &tc, |r| {
        progress("train", r, tc.steps);
        logs.push(r.clone());
    })?;
    report::write_step_log(&dir.join("train_log.csv"), &logs)?;
    let hash = save_stereo(&dir.join("model.ckpt"), cfg, &model)?;
    eprintln!("model.ckpt sha256 {hash}");
    if cfg.train.edge_steps > 0 {
        let mut est = EdgeEstimator::new(cfg.edge_config());
        let es = edge_samples(&model, &samples, cfg.train.max_disparity)?;
        let ec = TrainConfig {
            steps: cfg.train.edge_steps,
            optim: cfg.optim.to_core(cfg.train.edge_learning_rate),
            seed: cfg.seed.wrapping_add(1),
            ..tc.clone()
        };
        let mut logs = Vec::with_capacity(ec.steps);
        train_edge_estimator(&mut est, &es, &ec, |r| {
            progress("edge", r, ec.steps);
            logs.push(r.clone());
        })?;
        report::write_step_log(&dir.join("edge_log.csv"), &logs)?;
        let hash = save_edge(&dir.join("edge.ckpt"), cfg, &est)?;
        eprintln!("edge.ckpt sha256 {hash}");
    }
    Ok(())
}

/// Region-split metrics of `predict` on every sample, against the dense
/// ground truth.
pub fn evaluate_samples(
    data: &[LoadedSample],
    mut predict: impl FnMut(&LoadedSample) -> AppResult<DisparityMap>,
    mut on_prediction: impl FnMut(&LoadedSample, &DisparityMap) -> AppResult<()>,
) -> AppResult<Vec<SampleMetricRow>> {
    let mut rows = Vec::new();
    for s in data {
        let pred = predict(s)?;
        let edge = edge_gt_extract(&s.disparity_gt)?;
        let r = region_split_eval(&pred, &s.disparity_gt, &edge, &s.occlusion)?;
        rows.extend(report::sample_rows(s.row.index, &s.row.domain, &r));
        on_prediction(s, &pred)?;
    }
    Ok(rows)
}

fn model_predictor(model: &StereoModel, max_disparity: f64) -> impl FnMut(&LoadedSample) -> AppResult<DisparityMap> + '_ {
    let levels = disparity_levels(max_disparity);
    move |s| Ok(model.predict(&s.left, &s.right, levels)?)
}

fn dump_images(dir: &Path, s: &LoadedSample, pred: &DisparityMap, max_disparity: f64) -> AppResult<()> {
    let (h, w) = pred.dims();
    let name = |suffix: &str| dir.join(format!("{:05}_{suffix}.ppm", s.row.index));
    formats::write_ppm_rgb8(&name("pred"), w, h, &colorize(pred, 0.0, max_disparity))?;
    formats::write_ppm_rgb8(&name("gt"), w, h, &colorize(&s.disparity_gt, 0.0, max_disparity))?;
    let err = ScalarField {
        values: pred.values.zip_map(&s.disparity_gt.values, |p, g| (p - g).abs()),
        valid: s.disparity_gt.valid.clone(),
    };
    formats::write_ppm_rgb8(&name("err"), w, h, &colorize(&err, 0.0, 3.0))
}

pub fn eval(cfg: &RunConfig, force: bool) -> AppResult<()> {
    let model = load_stereo(&resolve_path(&cfg.eval.checkpoint))?;
    let data = dataset::load_dataset(&resolve_path(&cfg.eval.dataset))?;
    let dir = prepare_output(cfg, force)?;
    let image_dir = dir.join("images");
    if cfg.eval.dump_images {
        fs::create_dir_all(&image_dir)?;
    }
    let maxd = cfg.eval.max_disparity;
    let rows = evaluate_samples(&data, model_predictor(&model, maxd), |s, pred| {
        if cfg.eval.dump_images {
            dump_images(&image_dir, s, pred, maxd)?;
        }
        Ok(())
    })?;
    report::write_rows(&dir.join("per_sample.csv"), &rows)?;
    let agg = report::aggregate(&rows);
    for a in &agg {
        eprintln!("{}: epe {:.4} edge {:.4} d1 {:.4}", a.domain, a.epe, a.edge_epe, a.d1);
    }
    report::write_rows(&dir.join("aggregate.csv"), &agg)
}

/// One row of the paired DAPE comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub t: f64,
    pub label_coverage: f64,
    pub plain_epe: f64,
    pub dape_epe: f64,
    pub plain_edge_epe: f64,
    pub dape_edge_epe: f64,
    pub plain_non_edge_epe: f64,
    pub dape_non_edge_epe: f64,
    pub plain_noc_epe: f64,
    pub dape_noc_epe: f64,
    pub plain_occ_epe: f64,
    pub dape_occ_epe: f64,
    pub plain_d1: f64,
    pub dape_d1: f64,
}

#[derive(Serialize)]
struct DapeSidecar {
    t: f64,
    edge_weight: f64,
    steps: usize,
    stereo_checkpoint_sha256: String,
    edge_checkpoint_sha256: String,
    checkpoint_sha256: String,
    control_checkpoint_sha256: String,
    cache_generations: usize,
}

fn region_epe(rows: &[SampleMetricRow], region: Region) -> f64 {
    let mut acc = report::Accumulator::default();
    rows.iter().filter(|r| r.region == region.name()).for_each(|r| acc.add(r));
    acc.means()[0]
}

fn region_d1(rows: &[SampleMetricRow]) -> f64 {
    let mut acc = report::Accumulator::default();
    rows.iter().filter(|r| r.region == Region::All.name()).for_each(|r| acc.add(r));
    acc.means()[4]
}

fn t_label(t: f64) -> String {
    format!("t{t}")
}

pub fn dape(cfg: &RunConfig, force: bool) -> AppResult<()> {
    let d = &cfg.dape;
    if d.thresholds.is_empty() {
        return Err(AppError::Usage("dape.thresholds is empty".into()));
    }
    let stereo_path = resolve_path(&d.checkpoint);
    let edge_path = resolve_path(&d.edge_checkpoint);
    let model = load_stereo(&stereo_path)?;
    let est = load_edge(&edge_path)?;
    let target = dataset::load_dataset(&resolve_path(&d.dataset))?;
    let eval_data = dataset::load_dataset(&resolve_path(&d.eval_dataset))?;
    let targets = target
        .iter()
        .map(|s| {
            let sparse = s.sparse_gt.clone().ok_or_else(|| {
                AppError::Usage(format!("sample {} of {} has no sparse labels", s.row.index, d.dataset))
            })?;
            Ok(TargetSample { left: s.left.clone(), right: s.right.clone(), sparse_gt: sparse })
        })
        .collect::<AppResult<Vec<_>>>()?;

    // predicted edge maps, generated once and shared by every threshold
    let levels = disparity_levels(d.max_disparity);
    let mut edge_maps = Vec::with_capacity(targets.len());
    for s in &targets {
        let pred = model.predict(&s.left, &s.right, levels)?;
        edge_maps.push(est.estimate(&pred, &s.left)?);
    }
    let cache_generations = 1;
    let labels: Vec<Vec<PseudoLabel>> = d
        .thresholds
        .iter()
        .map(|&t| edge_maps.iter().map(|e| pseudo_label_select(e, t)).collect())
        .collect::<Result<_, _>>()?;

    let dir = prepare_output(cfg, force)?;
    let cache_dir = dir.join("edge_cache");
    fs::create_dir_all(&cache_dir)?;
    for (s, e) in target.iter().zip(&edge_maps) {
        formats::write_pfm(&cache_dir.join(format!("{:05}_edge.pfm", s.row.index)), &e.values)?;
    }
    let stereo_hash = checkpoint::file_hash(&stereo_path)?;
    let edge_hash = checkpoint::file_hash(&edge_path)?;
    let dcfg = DapeConfig {
        train: TrainConfig {
            steps: d.steps,
            optim: cfg.optim.to_core(d.learning_rate),
            loss: cfg.loss_config(),
            max_disparity: d.max_disparity,
            seed: cfg.seed,
        },
        edge_weight: d.edge_weight,
    };

    let run = |labels: Option<&[PseudoLabel]>, name: &str| -> AppResult<(Vec<SampleMetricRow>, String)> {
        let mut m = model.clone();
        let mut logs = Vec::with_capacity(d.steps);
        dape_finetune(&mut m, &targets, labels, &dcfg, |r| {
            progress(name, r, d.steps);
            logs.push(r.clone());
        })?;
        report::write_step_log(&dir.join(format!("{name}_log.csv")), &logs)?;
        let hash = save_stereo(&dir.join(format!("{name}.ckpt")), cfg, &m)?;
        let rows = evaluate_samples(&eval_data, model_predictor(&m, d.max_disparity), |_, _| Ok(()))?;
        report::write_rows(&dir.join(format!("{name}_eval.csv")), &rows)?;
        Ok((rows, hash))
    };

    let (plain, plain_hash) = run(None, "plain")?;
    let mut paired = Vec::new();
    for (&t, labels) in d.thresholds.iter().zip(&labels) {
        let name = format!("dape_{}", t_label(t));
        let (rows, hash) = run(Some(labels), &name)?;
        let coverage = labels.iter().map(|l| l.valid.count()).sum::<usize>() as f64
            / labels.iter().map(|l| l.valid.len()).sum::<usize>() as f64;
        let sidecar = DapeSidecar {
            t,
            edge_weight: d.edge_weight,
            steps: d.steps,
            stereo_checkpoint_sha256: stereo_hash.clone(),
            edge_checkpoint_sha256: edge_hash.clone(),
            checkpoint_sha256: hash,
            control_checkpoint_sha256: plain_hash.clone(),
            cache_generations,
        };
        fs::write(dir.join(format!("{name}.toml")), toml::to_string(&sidecar).expect("sidecar serializes"))?;
        let row = PairedRow {
            t,
            label_coverage: coverage,
            plain_epe: region_epe(&plain, Region::All),
            dape_epe: region_epe(&rows, Region::All),
            plain_edge_epe: region_epe(&plain, Region::Edge),
            dape_edge_epe: region_epe(&rows, Region::Edge),
            plain_non_edge_epe: region_epe(&plain, Region::NonEdge),
            dape_non_edge_epe: region_epe(&rows, Region::NonEdge),
            plain_noc_epe: region_epe(&plain, Region::Noc),
            dape_noc_epe: region_epe(&rows, Region::Noc),
            plain_occ_epe: region_epe(&plain, Region::Occ),
            dape_occ_epe: region_epe(&rows, Region::Occ),
            plain_d1: region_d1(&plain),
            dape_d1: region_d1(&rows),
        };
        eprintln!(
            "t={t}: edge epe {:.4} vs plain {:.4}, epe {:.4} vs plain {:.4}",
            row.dape_edge_epe, row.plain_edge_epe, row.dape_epe, row.plain_epe
        );
        paired.push(row);
    }
    report::write_rows(&dir.join("paired.csv"), &paired)
}

#[derive(Serialize)]
struct GradcheckRow {
    stage: String,
    instances: usize,
    instances_passed: usize,
    coordinates_checked: usize,
    skipped_nonsmooth: usize,
    max_rel_error: f64,
    passed: bool,
}

pub fn gradcheck(cfg: &RunConfig, force: bool) -> AppResult<()> {
    let dir = prepare_output(cfg, force)?;
    let opts = cfg.gradcheck.to_core();
    let results = run_suite(cfg.gradcheck.instances, cfg.seed, &opts);
    let rows: Vec<GradcheckRow> = results
        .iter()
        .map(|r| GradcheckRow {
            stage: r.stage.clone(),
            instances: r.instances,
            instances_passed: r.instances_passed,
            coordinates_checked: r.outcome.checked,
            skipped_nonsmooth: r.outcome.skipped_nonsmooth,
            max_rel_error: r.outcome.max_rel_error,
            passed: r.passed(),
        })
        .collect();
    for r in &rows {
        println!(
            "{} {:<28} {}/{} max rel err {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.stage,
            r.instances_passed,
            r.instances,
            r.max_rel_error
        );
    }
    report::write_rows(&dir.join("gradcheck.csv"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.stage.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Acceptance(format!("gradient check failed for {}", failed.join(", "))))
    }
}
