//! End-to-end runs behind the command-line tool.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::{self, FilterType};

use crate::config::{RunConfig, SynthConfig};
use crate::data::{
    self, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, summarize, write_dataset, EvalRow,
    EvalSummary, SegPair,
};
use crate::error::{Error, Result};
use crate::eval::{binarize, compute_cdr, seg_metrics, CdrResult, Grade, Mask};
use crate::network::{UtNet, CUP, DISC};
use crate::nn::{Mode, ParamStore, Session};
use crate::tensor::{Tape, Tensor};
use crate::train::{train, write_log, TrainOutcome};

pub const THRESHOLD: f64 = 0.5;

/// Eval-mode probabilities for `N×3×H×W` images, as `N×2×H×W`.
pub fn predict_batch(net: &UtNet, store: &ParamStore<f32>, images: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, Mode::Eval);
    let x = s.tape.constant(images);
    let y = net.forward(&mut s, x)?;
    Ok(s.tape.value(y).clone())
}

/// Per-sample `2×H×W` probabilities, `chunk` images per forward.
pub fn predict(net: &UtNet, store: &ParamStore<f32>, samples: &[SegPair], chunk: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let refs: Vec<&SegPair> = group.iter().collect();
        let (images, _) = data::batch(&refs)?;
        let probs = predict_batch(net, store, images)?;
        let sh = probs.shape().to_vec();
        let per = sh[1] * sh[2] * sh[3];
        for i in 0..sh[0] {
            out.push(Tensor::new(&sh[1..], probs.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

/// Disc and cup masks of one `2×H×W` probability map.
pub fn masks_from_probs(probs: &Tensor<f32>) -> Result<(Mask, Mask)> {
    let [c, h, w] = <[usize; 3]>::try_from(probs.shape())
        .map_err(|_| Error::dim("masks_from_probs", format!("expected 2×H×W, got {:?}", probs.shape())))?;
    if c != 2 {
        return Err(Error::dim("masks_from_probs", format!("expected 2 channels, got {c}")));
    }
    let plane = |k: usize| Tensor::new([h, w], probs.data()[k * h * w..(k + 1) * h * w].to_vec());
    Ok((binarize(&plane(DISC)?, THRESHOLD)?, binarize(&plane(CUP)?, THRESHOLD)?))
}

fn defined(r: Result<CdrResult>) -> Result<Option<CdrResult>> {
    match r {
        Ok(c) => Ok(Some(c)),
        Err(Error::UndefinedCdr(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Disc and cup rows for one sample. The ground-truth CDR is the stored label
/// when present, otherwise measured on the ground-truth masks.
pub fn rows_for(sample: &SegPair, disc: &Mask, cup: &Mask) -> Result<[EvalRow; 2]> {
    let gt = match sample.cdr {
        Some(c) => Some((c, sample.grade.unwrap_or(Grade::of(c)))),
        None => defined(compute_cdr(&sample.disc, &sample.cup))?.map(|r| (r.cdr, r.grade)),
    };
    let pred = defined(compute_cdr(disc, cup))?;
    let row = |structure: &str, p: &Mask, g: &Mask| -> Result<EvalRow> {
        let m = seg_metrics(p, g)?;
        Ok(EvalRow {
            image_id: sample.id.clone(),
            structure: structure.into(),
            dsc: m.dsc,
            iou: m.iou,
            precision: m.precision,
            sensitivity: m.sensitivity,
            accuracy: m.accuracy,
            cdr_gt: gt.map(|g| g.0),
            cdr_pred: pred.map(|r| r.cdr),
            grade_gt: gt.map(|g| g.1),
            grade_pred: pred.map(|r| r.grade),
        })
    };
    Ok([row("disc", disc, &sample.disc)?, row("cup", cup, &sample.cup)?])
}

/// Per-image rows and the mean forward time per image in milliseconds.
pub fn evaluate(net: &UtNet, store: &ParamStore<f32>, samples: &[SegPair], chunk: usize) -> Result<(Vec<EvalRow>, f64)> {
    let t0 = Instant::now();
    let probs = predict(net, store, samples, chunk)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3 / samples.len().max(1) as f64;
    let mut rows = Vec::with_capacity(2 * samples.len());
    for (s, p) in samples.iter().zip(&probs) {
        let (d, c) = masks_from_probs(p)?;
        rows.extend(rows_for(s, &d, &c)?);
    }
    Ok((rows, ms))
}

/// Mean disc and cup DSC over `samples` in eval mode.
pub fn training_dsc(net: &UtNet, store: &ParamStore<f32>, samples: &[SegPair]) -> Result<(f64, f64)> {
    let (rows, _) = evaluate(net, store, samples, 8)?;
    let s = summarize(&rows)?;
    Ok((s.disc.dsc, s.cup.dsc))
}

pub fn run_synth(cfg: &SynthConfig, out: &Path) -> Result<Vec<SegPair>> {
    let samples: Vec<SegPair> = generate_synthetic(cfg)?.into_iter().map(|s| s.pair).collect();
    write_dataset(out, &samples)?;
    Ok(samples)
}

/// Training samples named by the run configuration.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<SegPair>> {
    let size = cfg.arch.image_size;
    match (&cfg.io.dataset, &cfg.io.synthetic) {
        (Some(root), None) => {
            let mut index = data::DatasetIndex::scan(root)?;
            index.assign_splits(cfg.io.val_fraction, cfg.io.test_fraction, cfg.train.seed)?;
            index.load(index.split(data::Split::Train), Some(size))
        }
        (None, Some(s)) => {
            if s.size != size {
                return Err(Error::Config(format!(
                    "synthetic size {} differs from arch.image_size {size}",
                    s.size
                )));
            }
            Ok(generate_synthetic(s)?.into_iter().map(|s| s.pair).collect())
        }
        _ => Err(Error::Config("set exactly one of io.dataset and io.synthetic".into())),
    }
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn best_checkpoint_path(final_path: &Path) -> PathBuf {
    let stem = final_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    final_path.with_file_name(format!("{stem}-best.utnc"))
}

/// Trains per `cfg` and writes the final and best checkpoints, the step log
/// and the resolved configuration under the output directory.
pub fn run_train(cfg: &RunConfig, on_step: impl FnMut(&crate::train::StepLog)) -> Result<TrainRun> {
    cfg.validate()?;
    let samples = training_samples(cfg)?;
    if samples.is_empty() {
        return Err(Error::Contract("no training samples found".into()));
    }
    let out = &cfg.io.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let (net, mut store) = UtNet::init(&cfg.arch, cfg.train.seed)?;
    let log_path = out.join("train_log.csv");
    let outcome = train(&net, &mut store, &samples, &cfg.train, on_step)?;
    write_log(&log_path, &outcome.log)?;
    let checkpoint = cfg.io.checkpoint_path();
    let best_checkpoint = best_checkpoint_path(&checkpoint);
    save_checkpoint(&checkpoint, &cfg.arch, &store)?;
    save_checkpoint(&best_checkpoint, &cfg.arch, &outcome.best)?;
    Ok(TrainRun {
        outcome,
        checkpoint,
        best_checkpoint,
        log: log_path,
    })
}

pub struct EvalRun {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
    pub report: PathBuf,
    pub summary_path: PathBuf,
}

/// Evaluates a checkpoint on every entry of a dataset directory.
pub fn run_eval(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<EvalRun> {
    let (net, store) = load_checkpoint(checkpoint)?;
    let (_, samples) = load_dataset(dataset, Some(net.config.image_size))?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("dataset {} has no entries", dataset.display())));
    }
    let (rows, ms) = evaluate(&net, &store, &samples, 8)?;
    let mut summary = summarize(&rows)?;
    summary.mean_inference_ms = Some(ms);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = out.join("report.csv");
    let summary_path = out.join("summary.json");
    EvalRow::write_csv(&report, &rows)?;
    summary.write_json(&summary_path)?;
    Ok(EvalRun {
        rows,
        summary,
        report,
        summary_path,
    })
}

pub struct InferRun {
    pub cdr: Option<CdrResult>,
    pub disc_path: PathBuf,
    pub cup_path: PathBuf,
    pub overlay_path: Option<PathBuf>,
    /// Set when the input was resampled to the model extent.
    pub resized_from: Option<(u32, u32)>,
}

fn resize_mask(m: &Mask, w: u32, h: u32) -> Mask {
    data::gray_to_mask(&imageops::resize(&data::mask_to_gray(m), w, h, FilterType::Nearest))
}

/// Segments one image. Masks are written at the input extent and the CDR is
/// measured on the written masks.
pub fn run_infer(checkpoint: &Path, image: &Path, out: &Path, overlay: bool) -> Result<InferRun> {
    let (net, store) = load_checkpoint(checkpoint)?;
    let rgb = data::read_rgb(image)?;
    let (w, h) = rgb.dimensions();
    let size = net.config.image_size as u32;
    let resized_from = ((w, h) != (size, size)).then_some((w, h));
    let input = match resized_from {
        Some(_) => imageops::resize(&rgb, size, size, FilterType::Triangle),
        None => rgb.clone(),
    };
    let x = data::rgb_to_tensor(&input).reshape([1, 3, size as usize, size as usize])?;
    let probs = predict_batch(&net, &store, x)?.reshape([2, size as usize, size as usize])?;
    let (mut disc, mut cup) = masks_from_probs(&probs)?;
    if resized_from.is_some() {
        disc = resize_mask(&disc, w, h);
        cup = resize_mask(&cup, w, h);
    }
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let disc_path = out.join(format!("{stem}_disc.png"));
    let cup_path = out.join(format!("{stem}_cup.png"));
    data::write_png_mask(&disc_path, &disc)?;
    data::write_png_mask(&cup_path, &cup)?;
    let overlay_path = if overlay {
        let p = out.join(format!("{stem}_overlay.png"));
        data::write_png_rgb(&p, &data::overlay(&rgb, &disc, &cup)?)?;
        Some(p)
    } else {
        None
    };
    Ok(InferRun {
        cdr: defined(compute_cdr(&disc, &cup))?,
        disc_path,
        cup_path,
        overlay_path,
        resized_from,
    })
}
