//! The experiment commands behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rrp_core::data::{synth_scene, Sample};
use rrp_core::evaluation::{
    estimate_count, evaluate, metrics_from, render_heatmap, ImageResult, Metrics,
};
use rrp_core::labeling::{build_location_map, make_class_map, make_count_map, make_density_map};
use rrp_core::model::ModelParams;
use rrp_core::training::{fit, make_targets, TrainRecord};

use crate::annotations::{annotation_line, load_annotations, ANNOTATIONS_FILE};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::labelfile::{self, LabelFileKind};
use crate::netpbm;

pub const CHECKPOINT_FILE: &str = "checkpoint.rrpc";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `data.n_images` scenes as P5 files plus `annotations.jsonl`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.scene.validate()?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    cfg.echo(out)?;
    let mut lines = String::new();
    let mut written = Vec::new();
    for i in 0..cfg.data.n_images as u64 {
        let (img, ann) = synth_scene(&cfg.scene, i)?;
        let name = format!("{}.pgm", ann.image_id);
        let path = out.join(&name);
        netpbm::save_image(&img, &path)?;
        lines.push_str(&annotation_line(&name, &ann));
        lines.push('\n');
        written.push(path);
    }
    write_file(&out.join(ANNOTATIONS_FILE), lines)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub images: usize,
    /// Count maps whose integral equals `k^2 m` exactly.
    pub exact: usize,
    /// Largest `|sum - m| / max(m, 1)` over density maps.
    pub density_rel_error: f64,
}

/// Writes the requested label grids for every annotated image in `data`.
pub fn cmd_label(cfg: &RunConfig, data: &Path, kinds: &[LabelFileKind]) -> Result<LabelSummary> {
    cfg.label.validate()?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    cfg.echo(out)?;
    let anns = load_annotations(&data.join(ANNOTATIONS_FILE))?;
    let mut summary = LabelSummary {
        images: anns.len(),
        exact: 0,
        density_rel_error: 0.0,
    };
    let k = cfg.label.coverage();
    for a in &anns {
        let ann = &a.annotation;
        let m = ann.count();
        let count = make_count_map(&build_location_map(ann, cfg.label.stride())?, &cfg.label)?;
        if count.grid.sum() == (k * k * m) as f64 && estimate_count(&count.grid, k) == m as f64 {
            summary.exact += 1;
        }
        let path = |kind: LabelFileKind| out.join(format!("{}.{}", ann.image_id, kind.extension()));
        for &kind in kinds {
            match kind {
                LabelFileKind::Count => labelfile::save(kind, &count.grid, &path(kind))?,
                LabelFileKind::Density => {
                    let d = make_density_map(ann, &cfg.label)?;
                    let err = (d.grid.sum() - m as f64).abs() / (m.max(1) as f64);
                    summary.density_rel_error = summary.density_rel_error.max(err);
                    labelfile::save(kind, &d.grid, &path(kind))?;
                }
                LabelFileKind::Class => labelfile::save(
                    kind,
                    &make_class_map(&count, &cfg.label).to_tensor(),
                    &path(kind),
                )?,
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub metrics: Metrics,
    pub checkpoint: PathBuf,
}

/// Trains from the config's initialization, then scores the saved (binary32)
/// parameters on the test set, or on the training set if there is none.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    cfg.echo(out)?;
    let model = cfg.model()?;
    let train = cfg.train_set()?;
    let test = cfg.test_set()?;
    let mut params = model.init_params(cfg.train.seed);
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let start = Instant::now();
    let mut log_err = None;
    let records = fit(
        &model,
        &cfg.train,
        &mut params,
        &train,
        &test,
        &mut || start.elapsed().as_secs_f64(),
        &mut |r, _| {
            let line = serde_json::to_string(r).expect("records serialize");
            println!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(Error::io(log_path, e));
    }
    params.quantize_f32();
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&params, &checkpoint)?;
    let scored = if test.is_empty() { &train } else { &test };
    let metrics = score(cfg, &params, scored)?;
    write_metrics(&metrics, &out.join(METRICS_FILE))?;
    Ok(TrainSummary {
        records,
        metrics,
        checkpoint,
    })
}

fn score(cfg: &RunConfig, params: &ModelParams, samples: &[Sample]) -> Result<Metrics> {
    let model = cfg.model()?;
    Ok(evaluate(
        &model,
        params,
        samples,
        cfg.train.label_kind.coverage(&cfg.label),
    )?)
}

pub fn write_metrics(m: &Metrics, path: &Path) -> Result<()> {
    write_file(
        path,
        serde_json::to_string_pretty(m).expect("metrics serialize") + "\n",
    )
}

/// Scores a checkpoint on `data` (or the configured test set) and optionally
/// writes one prediction/ground-truth heatmap per image.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    heatmap: bool,
) -> Result<Metrics> {
    cfg.validate()?;
    let model = cfg.model()?;
    let params = load_checkpoint(checkpoint)?;
    model.check_params(&params)?;
    let samples = match data {
        Some(dir) => crate::annotations::load_dataset(dir)?,
        None => cfg.test_set()?,
    };
    let out = &cfg.paths.out;
    create_dir(out)?;
    cfg.echo(out)?;
    let k = cfg.train.label_kind.coverage(&cfg.label);
    let mut results = Vec::with_capacity(samples.len());
    for s in &samples {
        let (pred, _) = model.predict(&params, &s.image)?;
        results.push(ImageResult {
            id: s.annotation.image_id.clone(),
            z: s.annotation.count() as f64,
            zhat: estimate_count(&pred, k),
        });
        if heatmap {
            let gt = make_targets(&s.annotation, &cfg.label, cfg.train.label_kind)?.regression;
            let img = render_heatmap(&pred, &gt)?;
            netpbm::save_gray(
                &img,
                &out.join(format!("{}_heatmap.pgm", s.annotation.image_id)),
            )?;
        }
    }
    let metrics = metrics_from(results)?;
    write_metrics(&metrics, &out.join(METRICS_FILE))?;
    Ok(metrics)
}
