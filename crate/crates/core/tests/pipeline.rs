use std::fs;
use std::path::Path;

use utnet::config::{ArchConfig, RunConfig, SynthConfig, TrainConfig, Variant};
use utnet::data::{read_gray, read_rgb, save_checkpoint, summarize, EvalRow, EvalSummary};
use utnet::eval::compute_cdr;
use utnet::network::UtNet;
use utnet::pipeline::{best_checkpoint_path, rows_for, run_eval, run_infer, run_synth, run_train};
use utnet::train::{train, LOG_HEADER};
use utnet::Error;

fn synth(count: usize, size: usize) -> SynthConfig {
    SynthConfig {
        count,
        size,
        ..Default::default()
    }
}

fn untrained_checkpoint(dir: &Path, size: usize) -> std::path::PathBuf {
    let cfg = ArchConfig::desk(Variant::Full, size);
    let (_, store) = UtNet::init(&cfg, 1).unwrap();
    let path = dir.join("untrained.utnc");
    save_checkpoint(&path, &cfg, &store).unwrap();
    path
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let samples = run_synth(&synth(10, 64), &tempfile::tempdir().unwrap().path().join("d")).unwrap();
    let rows: Vec<EvalRow> = samples.iter().flat_map(|s| rows_for(s, &s.disc, &s.cup).unwrap()).collect();
    assert!(rows.iter().all(|r| r.metrics().values() == [1.0; 5]));
    let s = summarize(&rows).unwrap();
    assert_eq!(s.delta_cdr, Some(0.0));
    assert!((s.pcc.unwrap() - 1.0).abs() < 1e-12);
    assert!(s.auc.is_some() != s.auc_note.is_some());
}

#[test]
fn summary_is_a_fold_of_the_report() {
    let dir = tempfile::tempdir().unwrap();
    run_synth(&synth(5, 64), &dir.path().join("data")).unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 64);
    let out = dir.path().join("eval");
    let run = run_eval(&ckpt, &dir.path().join("data"), &out).unwrap();
    let rows = EvalRow::read_csv(&run.report).unwrap();
    assert_eq!(rows.len(), 10);
    let again = summarize(&rows).unwrap();
    let json: EvalSummary = serde_json::from_str(&fs::read_to_string(&run.summary_path).unwrap()).unwrap();
    for s in [&run.summary, &json] {
        assert_eq!(s.images, again.images);
        assert_eq!(s.disc, again.disc);
        assert_eq!(s.cup, again.cup);
        assert_eq!(s.delta_cdr, again.delta_cdr);
    }
    let header = fs::read_to_string(&run.report).unwrap();
    assert!(header.starts_with("image_id,structure,dsc,iou,precision,sensitivity,accuracy,cdr_gt,cdr_pred,grade_gt,grade_pred"));
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 64);
    fs::create_dir_all(dir.path().join("empty")).unwrap();
    let r = run_eval(&ckpt, &dir.path().join("empty"), &dir.path().join("out"));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn training_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.arch = ArchConfig::desk(Variant::Full, 64);
    cfg.train.steps = 3;
    cfg.train.batch_size = 2;
    cfg.io.synthetic = Some(synth(4, 64));
    cfg.io.output_dir = dir.path().to_path_buf();
    let mut seen = 0;
    let run = run_train(&cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    assert_eq!(run.best_checkpoint, best_checkpoint_path(&run.checkpoint));
    assert!(run.checkpoint.is_file() && run.best_checkpoint.is_file());
    let log = fs::read_to_string(&run.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER.join(","));
    assert_eq!(lines.len(), 4);
    let written = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(written, cfg);

    // untrained outputs sit near 0.5, so the BCE terms start near ln 2
    let first = run.outcome.log[0].loss;
    for bce in [first.disc.bce, first.cup.bce] {
        assert!((bce - std::f64::consts::LN_2).abs() < 0.15, "{bce}");
    }
}

#[test]
fn mismatched_synthetic_size_is_a_config_error() {
    let mut cfg = RunConfig::default();
    cfg.arch = ArchConfig::desk(Variant::Full, 64);
    cfg.io.synthetic = Some(synth(2, 128));
    assert!(matches!(run_train(&cfg, |_| {}), Err(Error::Config(_))));
}

#[test]
fn divergent_training_aborts_with_step() {
    let samples = utnet::data::generate_synthetic(&synth(2, 64)).unwrap();
    let samples: Vec<_> = samples.into_iter().map(|s| s.pair).collect();
    let (net, mut store) = UtNet::init(&ArchConfig::desk(Variant::UnetOnly, 64), 0).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 2,
        learning_rate: 1e38,
        ..Default::default()
    };
    match train(&net, &mut store, &samples, &cfg, |_| {}) {
        Err(Error::NumericalAbort { step, detail }) => assert!(step > 0 && !detail.is_empty()),
        other => panic!("{:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn inference_is_deterministic_and_reports_written_masks() {
    let dir = tempfile::tempdir().unwrap();
    run_synth(&synth(1, 64), &dir.path().join("data")).unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 64);
    let image = dir.path().join("data/images/synth_000.png");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let ra = run_infer(&ckpt, &image, &a, true).unwrap();
    let rb = run_infer(&ckpt, &image, &b, true).unwrap();
    for (x, y) in [(&ra.disc_path, &rb.disc_path), (&ra.cup_path, &rb.cup_path)] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(fs::read(ra.overlay_path.as_ref().unwrap()).unwrap(), fs::read(rb.overlay_path.unwrap()).unwrap());
    assert!(ra.resized_from.is_none());
    let disc = utnet::data::gray_to_mask(&read_gray(&ra.disc_path).unwrap());
    let cup = utnet::data::gray_to_mask(&read_gray(&ra.cup_path).unwrap());
    assert_eq!(compute_cdr(&disc, &cup).ok(), ra.cdr);
}

#[test]
fn inference_resizes_odd_extents_back() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 64);
    let image = dir.path().join("odd.png");
    image::RgbImage::from_fn(50, 70, |x, y| image::Rgb([x as u8 * 3, y as u8 * 2, 40])).save(&image).unwrap();
    let r = run_infer(&ckpt, &image, dir.path(), false).unwrap();
    assert_eq!(r.resized_from, Some((50, 70)));
    assert_eq!(read_gray(&r.disc_path).unwrap().dimensions(), (50, 70));
    assert!(r.overlay_path.is_none());
    assert!(read_rgb(&dir.path().join("missing.png")).is_err());
}

#[test]
fn overlay_draws_disc_red_and_cup_green() {
    let samples = run_synth(&synth(1, 64), &tempfile::tempdir().unwrap().path().join("d")).unwrap();
    let s = &samples[0];
    let rgb = utnet::data::tensor_to_rgb(&s.image).unwrap();
    let out = utnet::data::overlay(&rgb, &s.disc, &s.cup).unwrap();
    let disc_edge = utnet::data::boundary(&s.disc);
    let cup_edge = utnet::data::boundary(&s.cup);
    let (mut red, mut green) = (0, 0);
    for y in 0..64 {
        for x in 0..64 {
            let p = out.get_pixel(x as u32, y as u32).0;
            if cup_edge.get(y, x) {
                assert_eq!(p, [0, 255, 0]);
                green += 1;
            } else if disc_edge.get(y, x) {
                assert_eq!(p, [255, 0, 0]);
                red += 1;
            }
        }
    }
    assert!(red > 0 && green > 0);
}
