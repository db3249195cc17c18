//! End-to-end stages with their on-disk artifacts.
//!
//! Each function reads its inputs, runs one stage and writes every output
//! with the provenance header of the resolved [`RunConfig`]. The command
//! line tool is a thin layer over these.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifact::{self, Provenance};
use crate::calibration::{fit_rigid_transform, residual_rms, Correspondences, RigidTransform};
use crate::compensation::{
    compensate, read_targets, results_to_csv, select_targets, summarize, write_targets, CompensationResult,
    CompensationSummary, Target,
};
use crate::config::RunConfig;
use crate::dataset::{generate_world, read_dataset, sample_dataset, write_dataset, ErrorWorld, SampleSet, Split};
use crate::error::{Error, Result};
use crate::kinematics::Position3;
use crate::loss::distance_maps;
use crate::model::BoterModel;
use crate::training::{evaluate, predict_samples, train_with_progress, EpochRecord, MetricsReport, TrainOutcome};

/// `data.csv` → `data.world.json`.
pub fn world_path_for(data: &Path) -> PathBuf {
    sibling(data, "world.json")
}

/// `data.csv` → `data.targets.csv`.
pub fn targets_path_for(data: &Path) -> PathBuf {
    sibling(data, "targets.csv")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub struct Generated {
    pub world: ErrorWorld,
    pub set: SampleSet,
    pub targets: Vec<Target>,
}

/// Builds the error world, samples the dataset and picks solver targets.
/// Writes the dataset to `out`, the world and targets next to it.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Generated> {
    let prov = cfg.provenance();
    let (_, nominal) = cfg.kinematics.table()?;
    let world = generate_world(cfg.seeds.world, &nominal, &cfg.world)?;
    let set = sample_dataset(&world, cfg.data.samples, cfg.seeds.data, &cfg.data.joint_ranges_deg)?;
    let targets = select_targets(&set, cfg.data.targets.min(set.counts().2), cfg.seeds.targets)?;
    write_dataset(&set, out, &prov)?;
    world.save(&world_path_for(out), &prov)?;
    write_targets(&targets, &targets_path_for(out), &prov)?;
    Ok(Generated { world, set, targets })
}

pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<SampleSet> {
    let (_, nominal) = cfg.kinematics.table()?;
    read_dataset(path, &nominal)
}

pub const CHECKPOINT_FILE: &str = "best";
pub const HISTORY_FILE: &str = "history.csv";

pub fn metrics_file(split: Split) -> String {
    format!("metrics_{split}.txt")
}

/// Trains a fresh model and writes the best checkpoint, the per-epoch
/// history and a metrics table for each split into `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    set: &SampleSet,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let prov = cfg.provenance();
    let (table_id, table) = cfg.kinematics.table()?;
    let train_cfg = cfg.train_config();
    let mut model = BoterModel::with_table(cfg.model.clone(), &table_id, table, train_cfg.seed)?;
    let outcome = train_with_progress(&mut model, set, &train_cfg, on_epoch)?;
    outcome.model.save(&out_dir.join(CHECKPOINT_FILE), &prov)?;
    artifact::write_text(&out_dir.join(HISTORY_FILE), &prov, &outcome.history.to_csv())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let report = evaluate(&outcome.model, &set.subset(split))?;
        let body = format!("# best epoch {}\n{}", outcome.history.best_epoch, report.table(&split.to_string()));
        artifact::write_text(&out_dir.join(metrics_file(split)), &prov, &body)?;
    }
    Ok(outcome)
}

pub fn eval_run(model: &BoterModel, set: &SampleSet, split: Split) -> Result<MetricsReport> {
    evaluate(model, &set.subset(split))
}

pub struct CompensationRun {
    pub results: Vec<CompensationResult>,
    pub summary: Option<CompensationSummary>,
}

/// Solves every target and writes the per-target CSV to `out`. With a world
/// the true-arm residuals are summarized into `<out stem>.summary.txt`.
pub fn compensate_run(
    cfg: &RunConfig,
    model: BoterModel,
    targets: &[Target],
    world: Option<&ErrorWorld>,
    out: &Path,
) -> Result<CompensationRun> {
    let prov = cfg.provenance();
    let frozen = model.freeze();
    let results = targets
        .iter()
        .map(|t| compensate(&frozen, t.theta_initial_deg, t.position, &cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    artifact::write_text(out, &prov, &results_to_csv(&results))?;
    let summary = match world {
        Some(world) => {
            let s = summarize(world, targets, &results)?;
            artifact::write_text(&sibling(out, "summary.txt"), &prov, &s.table())?;
            Some(s)
        }
        None => None,
    };
    Ok(CompensationRun { results, summary })
}

pub fn load_targets(path: &Path) -> Result<Vec<Target>> {
    read_targets(path)
}

/// Reads `qx,qy,qz,px,py,pz` rows (an optional header is skipped).
pub fn read_correspondences(path: &Path) -> Result<Correspondences> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut base = Vec::new();
    let mut world = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.first() == Some(&"qx") {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if cells.len() != 6 {
            return Err(parse_err(format!("expected 6 columns, found {}", cells.len())));
        }
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = cells[k]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(format!("column {}: `{}` is not a finite number", k + 1, cells[k])))?;
        }
        base.push([v[0], v[1], v[2]]);
        world.push([v[3], v[4], v[5]]);
    }
    Correspondences::new(base, world)
}

pub fn transform_report(t: &RigidTransform, rms: f64) -> String {
    let mut out = String::from("# rotation (row-major)\n");
    for row in &t.rotation {
        let _ = writeln!(out, "{},{},{}", row[0], row[1], row[2]);
    }
    out.push_str("# translation (mm)\n");
    let _ = writeln!(out, "{},{},{}", t.translation[0], t.translation[1], t.translation[2]);
    let _ = writeln!(out, "# residual rms (mm) {rms}");
    out
}

pub fn calibrate_run(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(RigidTransform, f64)> {
    let c = read_correspondences(input)?;
    let t = fit_rigid_transform(&c)?;
    let rms = residual_rms(&t, &c);
    artifact::write_text(out, &cfg.provenance(), &transform_report(&t, rms))?;
    Ok((t, rms))
}

fn matrix_csv(m: &crate::autodiff::Array) -> String {
    let n = m.shape()[0];
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub const DISTANCE_MAP_FILES: [&str; 3] = ["dm_theory.csv", "dm_pred.csv", "dm_abs_diff.csv"];

/// Writes the normalized distance matrices of the first `limit` samples of
/// `split` and their absolute difference.
pub fn export_distance_maps(
    cfg: &RunConfig,
    model: &BoterModel,
    set: &SampleSet,
    split: Split,
    limit: usize,
    out_dir: &Path,
) -> Result<()> {
    let mut samples = set.subset(split);
    samples.truncate(limit);
    if samples.len() < 2 {
        return Err(Error::InvalidInput("distance maps need at least 2 samples".into()));
    }
    let pred: Vec<[f64; 3]> = predict_samples(model, &samples)?.into_iter().map(Position3::to_array).collect();
    let theory: Vec<[f64; 3]> = samples.iter().map(|s| s.theoretical.to_array()).collect();
    let maps = distance_maps(&pred, &theory)?;
    let prov: Provenance = cfg.provenance();
    for (name, m) in DISTANCE_MAP_FILES.iter().zip([&maps.theory, &maps.prediction, &maps.abs_diff]) {
        artifact::write_text(&out_dir.join(name), &prov, &matrix_csv(m))?;
    }
    Ok(())
}
