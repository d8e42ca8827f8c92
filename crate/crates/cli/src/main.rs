use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use jointdet::data::{
    kfold_split, kmeans_anchors, load_index_file, read_labels, read_pgm_image, synth_generate, toy_cfg,
    ClassSchema, GrayImage,
};
use jointdet::engine::Network;
use jointdet::eval::{evaluate, GtBox};
use jointdet::geometry::{norm_to_abs, BBox};
use jointdet::loss::{history_csv, train_toy, LossWeights, TrainHyperparams, TrainSample};
use jointdet::model::{load_weights, parse_cfg, save_weights, NetworkConfig};
use jointdet::postprocess::{detect, grids_for, read_detections, write_detections, ScoredBox};
use jointdet::render::render_overlay;

/// Knee-joint region detector toolkit: inference, evaluation, splitting,
/// synthetic data and small-scale training.
#[derive(Parser)]
#[command(name = "jointdet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the detector over PGM images and write one detection file per image.
    Detect(DetectArgs),
    /// Score detection files against an annotated index.
    Eval(EvalArgs),
    /// Patient-grouped, gender-stratified k-fold split of an index.
    Split(SplitArgs),
    /// Generate a synthetic annotated corpus and a matching toy cfg.
    Synth(SynthArgs),
    /// Train a small network on an index with Adam.
    TrainToy(TrainArgs),
    /// Draw boxes from a detection or label file onto an image (PPM output).
    Render(RenderArgs),
}

fn unit_open(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite non-negative number"))
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    cfg: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// PGM files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Minimum objectness x class probability.
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    conf: f64,
    /// IoU above which a lower-scored same-class box is suppressed.
    #[arg(long, default_value_t = 0.45, value_parser = unit_open)]
    nms: f64,
    /// Output directory; one `<image stem>.txt` per image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<image stem>.txt` detection files.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    iou: f64,
    /// Report path (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fold CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Anchors fitted to the corpus for the toy cfg.
    #[arg(long, default_value_t = 3)]
    anchors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    cfg: PathBuf,
    #[arg(long, default_value_t = 48)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001, value_parser = positive_f64)]
    lr: f64,
    /// Anchor IoU above which a slot is exempt from the no-object term.
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    ignore_iou: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    lambda_box: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    lambda_obj: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    lambda_noobj: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `model.weights` and `loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    /// Detection file (`class score x1 y1 x2 y2`).
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    detections: Option<PathBuf>,
    /// Label file (`class cx cy w h`, normalized).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_cfg(path: &Path) -> Result<NetworkConfig> {
    Ok(parse_cfg(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?)
}

fn load_image(path: &Path) -> Result<GrayImage> {
    Ok(read_pgm_image(&read(path)?).with_context(|| format!("decoding {}", path.display()))?)
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no file name", path.display()))
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let cfg = load_cfg(&a.cfg)?;
    let model = load_weights(&cfg, &read(&a.weights)?)
        .with_context(|| format!("loading {}", a.weights.display()))?;
    let net = Network::from_model(&model)?;
    let grids = grids_for(&cfg)?;
    let images = collect_images(&a.images)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    images.par_iter().try_for_each(|path| -> Result<()> {
        let img = load_image(path)?;
        let dets = detect(&net, &grids, &img.to_tensor(), a.conf, a.nms)
            .with_context(|| format!("detecting on {}", path.display()))?;
        let scored: Vec<ScoredBox> = dets.iter().map(|d| d.scored()).collect();
        write_atomic(&a.out.join(format!("{}.txt", stem(path)?)), write_detections(&scored).as_bytes())
    })?;
    log::info!("wrote detections for {} images to {}", images.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let schema = ClassSchema::default();
    let index = load_index_file(&a.index, schema.len())?;
    let mut expected = std::collections::BTreeSet::new();
    let mut preds = Vec::with_capacity(index.len());
    let mut gts = Vec::with_capacity(index.len());
    for rec in &index.records {
        let image_path = index.resolve(&rec.image_path);
        let img = load_image(&image_path)?;
        let name = stem(Path::new(&rec.image_path))?;
        let pred_path = a.preds.join(format!("{name}.txt"));
        if !pred_path.is_file() {
            return Err(jointdet::Error::InvalidInput(format!(
                "no detection file {} for indexed image {}",
                pred_path.display(),
                rec.image_path
            ))
            .into());
        }
        let dets = read_detections(&read_text(&pred_path)?)
            .with_context(|| format!("parsing {}", pred_path.display()))?;
        preds.push(dets);
        let boxes = rec
            .annotations
            .iter()
            .map(|an| {
                Ok(GtBox {
                    class_id: an.class_id,
                    bbox: norm_to_abs(&an.bbox, img.width as u32, img.height as u32)?,
                })
            })
            .collect::<jointdet::Result<Vec<_>>>()?;
        gts.push(boxes);
        expected.insert(format!("{name}.txt"));
    }
    for entry in fs::read_dir(&a.preds).with_context(|| format!("listing {}", a.preds.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".txt") && !expected.contains(&name) {
            return Err(jointdet::Error::InvalidInput(format!(
                "detection file {name} has no image in the index"
            ))
            .into());
        }
    }
    let report = evaluate(&preds, &gts, &schema, a.iou)?;
    write_or_print(a.out.as_deref(), &report.to_json_string())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    if a.folds < 2 {
        bail!(jointdet::Error::InvalidInput("--folds must be at least 2".into()));
    }
    let index = load_index_file(&a.index, ClassSchema::default().len())?;
    let folds = kfold_split(&index, a.folds, a.seed)?;
    for w in &folds.warnings {
        log::warn!("{w}");
    }
    write_or_print(a.out.as_deref(), &folds.to_csv(&index))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let corpus = synth_generate(a.n, a.size, a.seed)?;
    corpus.write_to(&a.out)?;
    let shapes = corpus.box_shapes();
    if !shapes.is_empty() && a.anchors > 0 {
        let anchors = kmeans_anchors(&shapes, a.anchors.min(shapes.len()), a.seed)?;
        let text = toy_cfg(a.size, &anchors, ClassSchema::default().len());
        write_atomic(&a.out.join("toy.cfg"), text.as_bytes())?;
    }
    log::info!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_cfg(&a.cfg)?;
    let schema = ClassSchema::default();
    let index = load_index_file(&a.index, schema.len())?;
    let samples = index
        .records
        .iter()
        .map(|rec| {
            let img = load_image(&index.resolve(&rec.image_path))?;
            Ok(TrainSample {
                image: img.to_tensor(),
                annotations: rec.annotations.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hp = TrainHyperparams {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        ignore_iou: a.ignore_iou,
        ..Default::default()
    };
    let weights = LossWeights {
        giou: a.lambda_box,
        obj: a.lambda_obj,
        noobj: a.lambda_noobj,
        cls: a.lambda_cls,
    };
    let out = train_toy(&samples, &cfg, &hp, weights, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_atomic(&a.out.join("model.weights"), &save_weights(&out.model))?;
    write_atomic(&a.out.join("loss.csv"), history_csv(&out.history).as_bytes())?;
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let boxes: Vec<(usize, BBox)> = if let Some(p) = &a.detections {
        read_detections(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))?
            .into_iter()
            .map(|d| (d.class_id, d.bbox))
            .collect()
    } else {
        let p = a.labels.as_ref().expect("clap enforces one source");
        read_labels(&read_text(p)?, ClassSchema::default().len())
            .with_context(|| format!("parsing {}", p.display()))?
            .into_iter()
            .map(|an| Ok((an.class_id, norm_to_abs(&an.bbox, img.width as u32, img.height as u32)?)))
            .collect::<jointdet::Result<_>>()?
    };
    write_atomic(&a.out, &render_overlay(&img, &boxes).to_ppm())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<jointdet::Error>()) {
        Some(e) if e.is_numeric_fault() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::Detect(a) => cmd_detect(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::TrainToy(a) => cmd_train(a),
        Cmd::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
