//! The subcommands, callable without going through the binary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use candle_core::DType;
use fuseg_core::data::dataset::{list_ids, load_scene, load_scene_pair, read_palette, write_palette, write_scene};
use fuseg_core::data::io::{save_image, save_label};
use fuseg_core::data::{reattach_chroma, synth_scene, AlignedPair, Image, LabelMap, Palette, Sample};
use fuseg_core::metrics::{class_scores, write_fusion_csv, write_seg_csv, ConfusionMatrix, FusionScores};
use fuseg_core::model::{Batch, Model};
use fuseg_core::scheduler::{CsvLog, LogRow, RoundReport, Scene, Trainer, WeightRecord};
use fuseg_core::seg::argmax_classes;
use fuseg_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{round_dir, Checkpoint};
use crate::config::Config;

pub const TRAINING_LOG: &str = "training_log.csv";
pub const WEIGHTS_LOG: &str = "weights.csv";
pub const FINAL_DIR: &str = "final";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// Scene id of the `i`-th generated scene.
pub fn scene_id(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Writes `train_count` and `val_count` scenes under `out/<split>/`.
pub fn synth(cfg: &Config, out: &Path) -> Result<()> {
    if cfg.synth.train_count == 0 {
        return Err(Error::Config("synth.train_count must be positive".into()));
    }
    cfg.synth.scene.validate()?;
    let palette = Palette::default_for(cfg.data.num_classes, cfg.data.ignore_index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.scene.seed);
    for (split, count) in [
        (&cfg.data.train_split, cfg.synth.train_count),
        (&cfg.data.val_split, cfg.synth.val_count),
    ] {
        let dir = out.join(split);
        write_palette(&dir, &palette)?;
        for i in 0..count {
            let (pair, label) = synth_scene(&cfg.synth.scene, &mut rng)?;
            write_scene(&dir, &scene_id(i), &pair, Some(&label), &palette)?;
        }
        log::info!("wrote {count} scenes to {}", dir.display());
    }
    cfg.echo(out)?;
    Ok(())
}

/// Every labelled scene of a dataset split.
pub fn load_scenes(cfg: &Config, dir: &Path) -> Result<Vec<Scene>> {
    let palette = read_palette(dir, cfg.data.num_classes, cfg.data.ignore_index)?;
    let ids = list_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no image pairs"),
        });
    }
    ids.iter()
        .map(|id| {
            let (pair, label) = load_scene(dir, id, cfg.data.num_classes, &palette, cfg.data.ignore_index)?;
            Ok(Scene { pair, label })
        })
        .collect()
}

/// Keeps the header and the rows before `iteration` of an existing log.
fn truncate_log(path: &Path, iteration: u64) -> Result<bool> {
    if !path.is_file() {
        return Ok(false);
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|it| it < iteration);
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(true)
}

pub fn new_trainer(cfg: &Config) -> Result<Trainer> {
    let model = Model::new(&cfg.model, cfg.seed, DType::F32)?;
    Trainer::new(model, cfg.settings())
}

/// A finished training run and the reports of the rounds it ran.
pub struct TrainRun {
    pub trainer: Trainer,
    pub reports: Vec<RoundReport>,
}

/// Runs the remaining rounds of the plan on the training split, writing a
/// checkpoint per round, `final/`, the training log and the λ history.
pub fn train(cfg: &Config, out: &Path, resume: Option<&Path>) -> Result<TrainRun> {
    let scenes = load_scenes(cfg, &cfg.data.split_dir(&cfg.data.train_split))?;
    let mut trainer = new_trainer(cfg)?;
    if let Some(dir) = resume {
        Checkpoint::load(dir)?.restore(&mut trainer)?;
        log::info!("resuming after round {}", trainer.state.round);
    }
    cfg.echo(out)?;
    let log_path = out.join(TRAINING_LOG);
    let append = resume.is_some() && truncate_log(&log_path, trainer.state.iteration)?;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = CsvLog::new(BufWriter::new(file), !append);
    let mut reports = Vec::new();
    while !trainer.finished() {
        let report = trainer.train_round(&scenes, &mut log)?;
        log.flush()?;
        for f in &report.freeze {
            if !f.held() {
                return Err(Error::Numerical(format!(
                    "frozen parameters changed during the {} phase of round {}",
                    f.phase.as_str(),
                    f.round + 1
                )));
            }
        }
        let ck = Checkpoint::capture(&trainer, cfg.to_json())?;
        ck.save(&round_dir(out, trainer.state.round))?;
        log::info!(
            "round {} done: fusion epoch means {:?}, lambdas {:?}",
            report.round,
            report.fusion_epoch_means,
            trainer.state.lambdas
        );
        reports.push(report);
    }
    Checkpoint::capture(&trainer, cfg.to_json())?.save(&out.join(FINAL_DIR))?;
    write_weights(&trainer.state.weight_log, &out.join(WEIGHTS_LOG))?;
    Ok(TrainRun { trainer, reports })
}

/// A model restored from a checkpoint, built from the checkpoint's own
/// config snapshot.
pub fn load_model(checkpoint: &Path) -> Result<(Config, Model)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = Config::from_json(&ck.manifest.config)?;
    let mut trainer = new_trainer(&cfg)?;
    ck.restore(&mut trainer)?;
    Ok((cfg, trainer.model))
}

fn fuse_one(model: &Model, pair: &AlignedPair) -> Result<(Vec<f32>, Sample)> {
    let sample = Sample::new(pair, None)?;
    let batch = Batch::new(&[&sample], model.dtype())?;
    let out = model.fuse(&batch.visible, &batch.infrared)?;
    let fused = out.fused.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("fused image of {} is not finite", pair.id)));
    }
    Ok((fused, sample))
}

fn segment_fused(model: &Model, fused: &[f32], h: usize, w: usize) -> Result<Vec<u16>> {
    let t = candle_core::Tensor::from_slice(fused, (1, 1, h, w), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
    Ok(argmax_classes(&model.segment(&t)?)?.remove(0))
}

/// Fuses every pair of `dir`, writing `out/gray/<id>.png` and
/// `out/color/<id>.png`.
pub fn fuse(checkpoint: &Path, dir: &Path, out: &Path) -> Result<usize> {
    let (cfg, model) = load_model(checkpoint)?;
    let ids = list_ids(dir)?;
    for id in &ids {
        let pair = load_scene_pair(dir, id)?;
        let (fused, _) = fuse_one(&model, &pair)?;
        let gray = Image::gray(pair.height(), pair.width(), fused)?;
        let color = reattach_chroma(&gray, &pair.visible)?;
        save_image(&out.join("gray").join(format!("{id}.png")), &gray)?;
        save_image(&out.join("color").join(format!("{id}.png")), &color)?;
    }
    cfg.echo(out)?;
    Ok(ids.len())
}

/// Writes palette-rendered label maps for every pair of `dir`.
pub fn segment(checkpoint: &Path, dir: &Path, out: &Path) -> Result<usize> {
    let (cfg, model) = load_model(checkpoint)?;
    let palette = read_palette(dir, cfg.data.num_classes, cfg.data.ignore_index)?;
    let ids = list_ids(dir)?;
    for id in &ids {
        let pair = load_scene_pair(dir, id)?;
        let (fused, _) = fuse_one(&model, &pair)?;
        let classes = segment_fused(&model, &fused, pair.height(), pair.width())?;
        let label = LabelMap::new(
            pair.height(),
            pair.width(),
            classes,
            cfg.data.num_classes,
            cfg.data.ignore_index,
        )?;
        save_label(&out.join(format!("{id}.png")), &label, &palette)?;
    }
    cfg.echo(out)?;
    Ok(ids.len())
}

pub struct EvalReport {
    pub fusion: Vec<FusionScores>,
    pub confusion: ConfusionMatrix,
}

/// Fusion metrics per image and one confusion matrix over all labelled
/// scenes of `dir`.
pub fn evaluate(model: &Model, cfg: &Config, dir: &Path) -> Result<EvalReport> {
    let scenes = load_scenes(cfg, dir)?;
    evaluate_scenes(model, cfg.data.num_classes, &scenes)
}

pub fn evaluate_scenes(model: &Model, num_classes: usize, scenes: &[Scene]) -> Result<EvalReport> {
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut fusion = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (h, w) = (scene.pair.height(), scene.pair.width());
        let (fused, sample) = fuse_one(model, &scene.pair)?;
        fusion.push(FusionScores::compute(
            &scene.pair.id,
            &fused,
            &sample.visible,
            &sample.infrared,
            h,
            w,
        )?);
        let pred = segment_fused(model, &fused, h, w)?;
        confusion.add(&pred, scene.label.classes(), scene.label.ignore_index())?;
    }
    Ok(EvalReport { fusion, confusion })
}

/// Scores `dir` (default: the configured metrics split) and writes both CSVs
/// into `out`.
pub fn eval(checkpoint: &Path, dir: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let (cfg, model) = load_model(checkpoint)?;
    let dir: PathBuf = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.data.split_dir(&cfg.metrics.split));
    let report = evaluate(&model, &cfg, &dir)?;
    let scores = class_scores(&report.confusion)?;
    let fusion_path = out.join(&cfg.metrics.fusion_csv);
    write_fusion_csv(create(&fusion_path)?, &report.fusion)?;
    let seg_path = out.join(&cfg.metrics.segmentation_csv);
    write_seg_csv(create(&seg_path)?, &scores)?;
    log::info!("mAcc {:.4}, mIoU {:.4}", scores.macc, scores.miou);
    cfg.echo(out)?;
    Ok(report)
}

fn write_weights(records: &[WeightRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if records.is_empty() {
        w.write_record([
            "round",
            "epoch",
            "fusion_step",
            "mean_l_fusion",
            "mean_l_seg",
            "r_fusion",
            "r_seg",
            "lambda1",
            "lambda2",
        ])
        .map_err(|e| io_err(path, e.into()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| io_err(path, e.into()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Dumps the λ / convergence-rate history of a checkpoint as CSV.
pub fn inspect_weights(checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let path = out.join(WEIGHTS_LOG);
    write_weights(&ck.manifest.state.weight_log, &path)?;
    Ok(path)
}

/// Reads a training log back into rows.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| io_err(path, e.into())))
        .collect()
}
