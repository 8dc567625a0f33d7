use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use utnet::config::RunConfig;
use utnet::data::{gray_to_mask, read_gray};
use utnet::eval::compute_cdr;

fn utnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_utnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = utnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks_disc", "masks_cup"] {
        for e in fs::read_dir(root.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out.push(("labels.csv".into(), fs::read(root.join("labels.csv")).unwrap()));
    out.sort();
    out
}

#[test]
fn synth_writes_reproducible_labelled_triples() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", d.to_str().unwrap(), "--count", "8", "--size", "128", "--seed", "7"]);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 3 * 8 + 1);
    assert_eq!(ta, tree(&b));

    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    let mut rows = 0;
    for line in labels.lines().skip(1) {
        let rec: Vec<&str> = line.split(',').collect();
        let id = rec[0];
        let cdr: f64 = rec[1].parse().unwrap();
        let disc = gray_to_mask(&read_gray(&a.join(format!("masks_disc/{id}.png"))).unwrap());
        let cup = gray_to_mask(&read_gray(&a.join(format!("masks_cup/{id}.png"))).unwrap());
        let r = compute_cdr(&disc, &cup).unwrap();
        assert_eq!(r.cdr, cdr);
        assert_eq!(r.grade.name(), rec[2]);
        rows += 1;
    }
    assert_eq!(rows, 8);
}

#[test]
fn config_prints_a_parseable_default() {
    let text = ok(&["config"]);
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    ok(&["synth", "--out", &p("data"), "--count", "4", "--size", "64"]);
    let out = ok(&[
        "train", "--dataset", &p("data"), "--image-size", "64", "--steps", "2", "--batch-size", "2", "--output-dir", &p("run"),
    ]);
    assert!(out.contains("steps 2"), "{out}");
    let ckpt = p("run/model.utnc");
    assert!(Path::new(&ckpt).is_file(), "{out}");
    assert!(Path::new(&p("run/model-best.utnc")).is_file());
    assert!(Path::new(&p("run/train_log.csv")).is_file());

    let out = ok(&["eval", "--checkpoint", &ckpt, "--dataset", &p("data"), "--out", &p("eval")]);
    assert!(out.contains("images 4"), "{out}");
    assert!(Path::new(&p("eval/report.csv")).is_file() && Path::new(&p("eval/summary.json")).is_file());

    let image = p("data/images/synth_001.png");
    fs::create_dir_all(p("i1")).unwrap();
    fs::create_dir_all(p("i2")).unwrap();
    let first = ok(&["infer", "--checkpoint", &ckpt, "--image", &image, "--out", &p("i1"), "--overlay"]);
    let second = ok(&["infer", "--checkpoint", &ckpt, "--image", &image, "--out", &p("i2"), "--overlay"]);
    for f in ["synth_001_disc.png", "synth_001_cup.png", "synth_001_overlay.png"] {
        assert_eq!(fs::read(p(&format!("i1/{f}"))).unwrap(), fs::read(p(&format!("i2/{f}"))).unwrap());
    }
    assert_eq!(first.replace("i1", "i2"), second);
    let disc = gray_to_mask(&read_gray(Path::new(&p("i1/synth_001_disc.png"))).unwrap());
    let cup = gray_to_mask(&read_gray(Path::new(&p("i1/synth_001_cup.png"))).unwrap());
    match compute_cdr(&disc, &cup) {
        Ok(r) => assert!(first.contains(&format!("cdr {:.4} grade {}", r.cdr, r.grade)), "{first}"),
        Err(_) => assert!(first.contains("cdr undefined"), "{first}"),
    }
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();

    fs::write(p("bad.toml"), "[train]\nsteps = 3\nmystery = 1\n").unwrap();
    assert_eq!(utnet(&["train", "--config", &p("bad.toml")]).status.code(), Some(2));
    assert_eq!(utnet(&["train", "--synthetic", "--steps", "0"]).status.code(), Some(2));

    ok(&["synth", "--out", &p("data"), "--count", "1", "--size", "64"]);
    ok(&["train", "--dataset", &p("data"), "--image-size", "64", "--steps", "1", "--batch-size", "1", "--output-dir", &p("run")]);
    let ckpt = p("run/model.utnc");
    fs::create_dir_all(p("empty")).unwrap();
    assert_eq!(utnet(&["eval", "--checkpoint", &ckpt, "--dataset", &p("empty")]).status.code(), Some(2));

    fs::write(p("junk.png"), b"not an image").unwrap();
    assert_eq!(utnet(&["infer", "--checkpoint", &ckpt, "--image", &p("junk.png")]).status.code(), Some(3));
    assert_eq!(
        utnet(&["eval", "--checkpoint", &p("absent.utnc"), "--dataset", &p("data")]).status.code(),
        Some(3)
    );
    assert_eq!(utnet(&["frobnicate"]).status.code(), Some(2));
}
