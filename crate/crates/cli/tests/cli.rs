use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jointdet::data::{read_pgm_image, write_pgm};
use jointdet::loss::init_model;
use jointdet::model::{load_weights, parse_cfg, save_weights, Model};
use jointdet::postprocess::read_detections;
use jointdet::render::RgbImage;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(&run(&["synth", "--n", &n.to_string(), "--size", "64", "--seed", "3", "--out", s(&corpus)]));
    corpus
}

fn train(corpus: &Path, out: &Path, lr: &str) -> PathBuf {
    ok(&run(&[
        "train-toy",
        "--index",
        s(&corpus.join("index.csv")),
        "--cfg",
        s(&corpus.join("toy.cfg")),
        "--epochs",
        "2",
        "--batch",
        "4",
        "--lr",
        lr,
        "--seed",
        "5",
        "--out",
        s(out),
    ]));
    out.join("model.weights")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_is_reproducible_and_writes_cfg() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = synth(a.path(), 6);
    let cb = synth(b.path(), 6);
    assert_eq!(files(&ca), files(&cb));
    let cfg = parse_cfg(&fs::read_to_string(ca.join("toy.cfg")).unwrap()).unwrap();
    assert_eq!(cfg.input_shape(), (1, 64, 64));
    assert_eq!(fs::read_to_string(ca.join("index.csv")).unwrap().lines().count(), 7);
}

#[test]
fn split_writes_fold_csv() {
    let d = tempfile::tempdir().unwrap();
    let corpus = synth(d.path(), 20);
    let out1 = d.path().join("f1.csv");
    let out2 = d.path().join("f2.csv");
    for out in [&out1, &out2] {
        ok(&run(&["split", "--index", s(&corpus.join("index.csv")), "--folds", "5", "--seed", "1", "--out", s(out)]));
    }
    let text = fs::read_to_string(&out1).unwrap();
    assert_eq!(text, fs::read_to_string(&out2).unwrap());
    assert!(text.starts_with("image_path,fold\n"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn train_detect_eval_render() {
    let d = tempfile::tempdir().unwrap();
    let corpus = synth(d.path(), 8);
    let weights = train(&corpus, &d.path().join("run"), "0.01");

    let cfg = parse_cfg(&fs::read_to_string(corpus.join("toy.cfg")).unwrap()).unwrap();
    let bytes = fs::read(&weights).unwrap();
    let model = load_weights(&cfg, &bytes).unwrap();
    assert_eq!(save_weights(&model), bytes);
    let loss = fs::read_to_string(d.path().join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,giou_term,obj_term,noobj_term,cls_term,total\n"));
    assert_eq!(loss.lines().count(), 3);

    let dets = d.path().join("dets");
    let images = corpus.join("images");
    ok(&run(&["detect", "--cfg", s(&corpus.join("toy.cfg")), "--weights", s(&weights), "--images", s(&images), "--conf", "0.05", "--out", s(&dets)]));
    let produced = walk(&dets);
    assert_eq!(produced.len(), 8);
    for p in &produced {
        read_detections(&fs::read_to_string(p).unwrap()).unwrap();
    }
    let first = dets.join("img_00000.txt");
    let again = fs::read(&first).unwrap();

    let dets_hi = d.path().join("dets_hi");
    ok(&run(&["detect", "--cfg", s(&corpus.join("toy.cfg")), "--weights", s(&weights), "--images", s(&images), "--conf", "1", "--out", s(&dets_hi)]));
    for p in walk(&dets_hi) {
        assert!(fs::read_to_string(p).unwrap().is_empty());
    }
    ok(&run(&["detect", "--cfg", s(&corpus.join("toy.cfg")), "--weights", s(&weights), "--images", s(&images), "--conf", "0.05", "--out", s(&dets)]));
    assert_eq!(fs::read(&first).unwrap(), again);

    let report = d.path().join("report.json");
    ok(&run(&["eval", "--preds", s(&dets), "--index", s(&corpus.join("index.csv")), "--out", s(&report)]));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"mean_matched_iou\""));

    let ppm = d.path().join("overlay.ppm");
    ok(&run(&["render", "--image", s(&images.join("img_00000.pgm")), "--detections", s(&first), "--out", s(&ppm)]));
    assert!(fs::read(&ppm).unwrap().starts_with(b"P6\n64 64\n255\n"));
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let d = tempfile::tempdir().unwrap();
    let corpus = synth(d.path(), 4);
    let weights = train(&corpus, &d.path().join("run"), "0");
    let cfg = parse_cfg(&fs::read_to_string(corpus.join("toy.cfg")).unwrap()).unwrap();
    let trained = load_weights(&cfg, &fs::read(weights).unwrap()).unwrap();
    assert_eq!(trained.convs, init_model(&cfg, 5).unwrap().convs);
}

#[test]
fn perfect_predictions_score_one() {
    let d = tempfile::tempdir().unwrap();
    let corpus = synth(d.path(), 6);
    let preds = d.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    for p in walk(&corpus.join("labels")) {
        let labels = jointdet::data::read_labels(&fs::read_to_string(&p).unwrap(), 4).unwrap();
        let boxes: Vec<jointdet::postprocess::ScoredBox> = labels
            .iter()
            .map(|a| jointdet::postprocess::ScoredBox {
                class_id: a.class_id,
                score: 0.9,
                bbox: jointdet::geometry::norm_to_abs(&a.bbox, 64, 64).unwrap(),
            })
            .collect();
        fs::write(preds.join(p.file_name().unwrap()), jointdet::postprocess::write_detections(&boxes)).unwrap();
    }
    let out = run(&["eval", "--preds", s(&preds), "--index", s(&corpus.join("index.csv"))]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["precision", "recall", "map", "f1"] {
        assert_eq!(v["overall"][key], serde_json::json!(1.0), "{key}");
    }
    assert_eq!(v["mean_matched_iou"], serde_json::json!(1.0));

    fs::write(preds.join("stray.txt"), "").unwrap();
    let out = run(&["eval", "--preds", s(&preds), "--index", s(&corpus.join("index.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::remove_file(preds.join("stray.txt")).unwrap();
    fs::remove_file(preds.join("img_00000.txt")).unwrap();
    let out = run(&["eval", "--preds", s(&preds), "--index", s(&corpus.join("index.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_without_boxes_is_plain_conversion() {
    let d = tempfile::tempdir().unwrap();
    let img = d.path().join("a.pgm");
    let pixels: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
    fs::write(&img, write_pgm(8, 6, &pixels)).unwrap();
    let empty = d.path().join("none.txt");
    fs::write(&empty, "").unwrap();
    let out = d.path().join("a.ppm");
    ok(&run(&["render", "--image", s(&img), "--detections", s(&empty), "--out", s(&out)]));
    let expected = RgbImage::from_gray(&read_pgm_image(&fs::read(&img).unwrap()).unwrap()).to_ppm();
    assert_eq!(fs::read(&out).unwrap(), expected);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["detect"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["split", "--index", "x.csv", "--folds", "five"]).status.code(), Some(1));

    let corpus = synth(d.path(), 2);
    let cfg_path = corpus.join("toy.cfg");
    let missing = d.path().join("missing.weights");
    let out = run(&["detect", "--cfg", s(&cfg_path), "--weights", s(&missing), "--images", s(&corpus.join("images")), "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.weights"));
    assert_eq!(run(&["detect", "--cfg", s(&cfg_path), "--weights", s(&missing), "--images", "x", "--conf", "1.5", "--out", "o"]).status.code(), Some(1));

    // Huge positive weights overflow the size exponent during decode.
    let cfg = parse_cfg(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let mut m = Model::zeroed(cfg);
    for w in m.convs.iter_mut().flatten() {
        w.kernel.iter_mut().for_each(|v| *v = 1e30);
    }
    let blown = d.path().join("blown.weights");
    fs::write(&blown, save_weights(&m)).unwrap();
    let out = run(&["detect", "--cfg", s(&cfg_path), "--weights", s(&blown), "--images", s(&corpus.join("images")), "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
