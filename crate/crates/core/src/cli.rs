//! Command-line front end: `synth`, `train`, `eval`, `detect` and `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bbox::{BBox, Units};
use crate::checkpoint;
use crate::config::{keys_help, RunConfig};
use crate::dataio::image::{letterbox, read_image, write_png, Letterbox};
use crate::dataio::{load_split, write_synthetic_dataset, DatasetManifest, Sample, Split};
use crate::detector::Model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Detector, EvalReport, PostConfig};
use crate::postprocess::{postprocess, Detection};
use crate::train::{train, TrainOptions, TrainingRun, BEST_CHECKPOINT};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CBAM_DETECT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "cbam-detect",
    version,
    about = "Small-object detector with channel and spatial attention",
    after_long_help = keys_help()
)]
pub struct Cli {
    /// TOML configuration file; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for scenes, splits, initialisation and data order.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Network input size (multiple of 32).
    #[arg(long, global = true, value_name = "N")]
    pub input_size: Option<usize>,
    /// Build the model without attention blocks.
    #[arg(long, global = true)]
    pub no_cbam: bool,
    /// Detection confidence threshold.
    #[arg(long, global = true, value_name = "F")]
    pub conf_thresh: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long, global = true, value_name = "F")]
    pub iou_thresh: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with labels and a split manifest.
    Synth {
        #[arg(long, value_name = "N")]
        num_images: Option<usize>,
    },
    /// Train on a dataset directory, writing checkpoints and a log.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split and write the report.
    Eval {
        /// Defaults to best.ckpt in the run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Detect objects in images, writing annotated copies and box lists.
    Detect {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
    },
    /// Train with and without attention and tabulate both scores.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(s) = cli.input_size {
        cfg.model.input_size = s;
    }
    if cli.no_cbam {
        cfg.model.cbam_enabled = false;
    }
    if let Some(c) = cli.conf_thresh {
        cfg.postprocess.conf_thresh = c;
    }
    if let Some(i) = cli.iou_thresh {
        cfg.postprocess.iou_thresh = i;
    }
    match &cli.command {
        Command::Synth { num_images: Some(n) } => cfg.dataset.num_images = *n,
        Command::Train { epochs: Some(e), .. } | Command::Ablate { epochs: Some(e), .. } => cfg.train.epochs = *e,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(dir, e)),
    }
}

fn require_empty(dir: &Path, force: bool) -> Result<()> {
    if !force && !is_empty_dir(dir)? {
        return Err(Error::invalid(
            "output",
            format!("{} is not empty; pass --force to overwrite", dir.display()),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `cfg.dataset.num_images` synthetic scenes into `dir`.
pub fn cmd_synth(cfg: &RunConfig, dir: &Path, force: bool) -> Result<DatasetManifest> {
    require_empty(dir, force)?;
    // only what a previous synth wrote, so stale images cannot linger
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let manifest = write_synthetic_dataset(dir, &cfg.synth, cfg.dataset.num_images)?;
    println!(
        "wrote {} images to {} (train {} / val {} / test {})",
        manifest.entries.len(),
        dir.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(manifest)
}

fn load_dataset(dir: &Path, split: Split, model: &crate::detector::ModelConfig) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(dir)?;
    load_split(dir, &manifest, split, model.input_size, model.num_classes)
}

pub fn train_options(cfg: &RunConfig, out_dir: Option<PathBuf>) -> TrainOptions {
    TrainOptions {
        loss: cfg.loss,
        post: cfg.postprocess.eval(),
        eval_interval: cfg.postprocess.eval_interval,
        out_dir,
    }
}

/// Trains from scratch on `data` and writes checkpoints, log and the
/// resolved config into `run_dir`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, run_dir: &Path, force: bool) -> Result<TrainingRun> {
    let train_set = load_dataset(data, Split::Train, &cfg.model)?;
    let val_set = load_dataset(data, Split::Val, &cfg.model)?;
    require_empty(run_dir, force)?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "model: {} parameters ({} in attention blocks); {} train / {} val images",
        model.num_parameters(),
        model.attention_parameters(),
        train_set.len(),
        val_set.len()
    );
    let run = train(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train,
        &train_options(cfg, Some(run_dir.to_path_buf())),
    )?;
    match (run.best_epoch, run.best_val_map50) {
        (Some(e), Some(m)) => println!("best val map50 {m:.6} at epoch {e}"),
        _ => println!("no validation score recorded"),
    }
    Ok(run)
}

/// Scores `detector` on `samples`, writes `<stem>.txt/json` into `out`, and
/// returns the report.
pub fn eval_detector(
    detector: &dyn Detector,
    samples: &[Sample],
    model: &crate::detector::ModelConfig,
    post: &PostConfig,
    batch_size: usize,
    out: &Path,
    stem: &str,
) -> Result<EvalReport> {
    let (report, _) = evaluate(detector, samples, model.num_classes, model.input_size, post, batch_size)?;
    report.write(out, stem)?;
    Ok(report)
}

pub fn map50_line(report: &EvalReport) -> String {
    format!("map50: {:.6}", report.map50)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, data: &Path, split: Split, out: &Path) -> Result<EvalReport> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    if model.cfg.input_size != cfg.model.input_size {
        log::warn!(
            "evaluating at the checkpoint's input size {} (config says {})",
            model.cfg.input_size,
            cfg.model.input_size
        );
    }
    let samples = load_dataset(data, split, &model.cfg)?;
    let stem = format!("eval_{}", format!("{split:?}").to_lowercase());
    let report = eval_detector(
        &model,
        &samples,
        &model.cfg,
        &cfg.postprocess.eval(),
        cfg.train.batch_size,
        out,
        &stem,
    )?;
    println!("{}", map50_line(&report));
    Ok(report)
}

/// Maps a box from letterboxed network pixels back to source pixels.
pub fn unletterbox(b: &BBox, lb: &Letterbox, width: usize, height: usize) -> BBox {
    let [x1, y1, x2, y2] = b.to_corner().coords;
    let fx = |x: f64| ((x - lb.pad_x as f64) / lb.scale).clamp(0.0, width as f64);
    let fy = |y: f64| ((y - lb.pad_y as f64) / lb.scale).clamp(0.0, height as f64);
    BBox::corner(fx(x1), fy(y1), fx(x2), fy(y2), Units::Pixels)
}

/// One `class conf x1 y1 x2 y2` line per detection.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.to_corner().coords;
        let _ = writeln!(
            s,
            "{} {:.6} {:.2} {:.2} {:.2} {:.2}",
            d.class_id, d.confidence, x1, y1, x2, y2
        );
    }
    s
}

const BOX_COLOUR: [u8; 3] = [255, 40, 40];

/// Runs the model on each image and writes `<stem>.png` (boxes drawn) and
/// `<stem>.txt` into `out`. Returns detections in source pixels.
pub fn cmd_detect(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    images: &[PathBuf],
    out: &Path,
) -> Result<Vec<Vec<Detection>>> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let post = cfg.postprocess.detect();
    let size = model.cfg.input_size;
    let mut all = Vec::with_capacity(images.len());
    for path in images {
        let mut img = read_image(path)?;
        let (tensor, lb) = letterbox(&img, size);
        let batch = tensor.reshape(&[1, 3, size, size])?;
        let preds = model.predict(&batch)?;
        let dets: Vec<Detection> = postprocess(&preds, 0, &model.cfg, post.conf_thresh, post.iou_thresh)
            .into_iter()
            .map(|d| Detection {
                bbox: unletterbox(&d.bbox, &lb, img.width, img.height),
                ..d
            })
            .collect();
        for d in &dets {
            let [x1, y1, x2, y2] = d.bbox.coords;
            let (x1, y1) = (x1.floor() as i64, y1.floor() as i64);
            let (x2, y2) = (x2.ceil() as i64 - 1, y2.ceil() as i64 - 1);
            img.draw_rect(x1, y1, x2, y2, BOX_COLOUR);
            let label = format!("{} {:.2}", d.class_id, d.confidence);
            let ty = if y1 >= 7 { y1 - 6 } else { y2 + 2 };
            img.draw_text(x1, ty, &label, BOX_COLOUR);
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let png = out.join(format!("{stem}.png"));
        if fs::canonicalize(&png).ok() == fs::canonicalize(path).ok() && png.exists() {
            return Err(Error::invalid(
                "detect",
                format!("refusing to overwrite input {}", path.display()),
            ));
        }
        write_png(&png, &img)?;
        let txt = out.join(format!("{stem}.txt"));
        fs::write(&txt, format_detections(&dets)).map_err(|e| Error::io(&txt, e))?;
        println!("{}: {} detections", path.display(), dets.len());
        all.push(dets);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub parameters: usize,
    pub attention_parameters: usize,
    pub map50: f64,
    pub map50_95: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | parameters | attention parameters | mAP@0.5 | mAP@0.5:0.95 |\n");
    s.push_str("|---|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} |",
            r.variant, r.parameters, r.attention_parameters, r.map50, r.map50_95
        );
    }
    s
}

/// Trains the configured model with and without attention on the same
/// data and seed, scores both on the test split, and writes
/// `ablation.md` into `out`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    require_empty(out, force)?;
    let mut rows = Vec::new();
    for (variant, enabled) in [("cbam", true), ("no-cbam", false)] {
        let mut c = cfg.clone();
        c.model.cbam_enabled = enabled;
        let train_set = load_dataset(data, Split::Train, &c.model)?;
        let val_set = load_dataset(data, Split::Val, &c.model)?;
        let test_set = load_dataset(data, Split::Test, &c.model)?;
        let dir = out.join(variant);
        let mut model = Model::new(c.model.clone(), c.train.seed)?;
        let run = train(
            &mut model,
            &train_set,
            &val_set,
            &c.train,
            &train_options(&c, Some(dir.clone())),
        )?;
        let best = match &run.best_checkpoint {
            Some(p) => checkpoint::load(p)?.0,
            None => model,
        };
        let report = eval_detector(
            &best,
            &test_set,
            &c.model,
            &c.postprocess.eval(),
            c.train.batch_size,
            &dir,
            "eval_test",
        )?;
        rows.push(AblationRow {
            variant,
            parameters: best.num_parameters(),
            attention_parameters: best.attention_parameters(),
            map50: report.map50,
            map50_95: report.map50_95,
        });
    }
    let table = ablation_table(&rows);
    let path = out.join("ablation.md");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(rows)
}

/// Entry point shared by the binary and the tests.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Synth { .. } => {
            let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            cmd_synth(&cfg, &dir, cli.force).map(|_| ())
        }
        Command::Train { data, .. } => {
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let dir = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            cmd_train(&cfg, &data, &dir, cli.force).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.run_dir.join(BEST_CHECKPOINT));
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let dir = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            cmd_eval(&cfg, &ckpt, &data, split.into(), &dir).map(|_| ())
        }
        Command::Detect { checkpoint, images } => {
            let dir = out.unwrap_or_else(|| cfg.paths.run_dir.join("detect"));
            cmd_detect(&cfg, &checkpoint, &images, &dir).map(|_| ())
        }
        Command::Ablate { data, .. } => {
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let dir = out.unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
            cmd_ablate(&cfg, &data, &dir, cli.force).map(|_| ())
        }
    }
}

/// Thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cbam-detect").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn help_lists_every_config_key() {
        let help = Cli::command().render_long_help().to_string();
        for (key, _) in crate::config::CONFIG_KEYS {
            assert!(help.contains(key), "--help is missing {key}");
        }
        for flag in [
            "--config",
            "--seed",
            "--out",
            "--force",
            "--input-size",
            "--no-cbam",
            "--conf-thresh",
            "--iou-thresh",
        ] {
            assert!(help.contains(flag), "--help is missing {flag}");
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[model]\ninput_size = 64\ncbam_enabled = true\n[postprocess]\nconf_thresh = 0.5\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve_config(&parse(&["--config", p, "train"])).unwrap();
        assert_eq!((cfg.model.input_size, cfg.postprocess.conf_thresh), (64, 0.5));
        let cli = parse(&[
            "train",
            "--config",
            p,
            "--input-size",
            "96",
            "--no-cbam",
            "--conf-thresh",
            "0.3",
            "--seed",
            "7",
            "--epochs",
            "3",
        ]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.model.input_size, 96);
        assert!(!cfg.model.cbam_enabled);
        assert_eq!(cfg.postprocess.conf_thresh, 0.3);
        assert_eq!((cfg.train.seed, cfg.synth.seed, cfg.train.epochs), (7, 7, 3));
    }

    #[test]
    fn invalid_overrides_fail_before_work() {
        assert!(resolve_config(&parse(&["--input-size", "100", "synth"])).is_err());
        assert!(resolve_config(&parse(&["--iou-thresh", "2", "synth"])).is_err());
        assert!(Cli::try_parse_from(["cbam-detect", "detect", "--checkpoint", "x"]).is_err());
    }

    #[test]
    fn synth_refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let mut cfg = RunConfig::default();
        cfg.dataset.num_images = 3;
        cfg.synth.image_size = 32;
        assert!(cmd_synth(&cfg, dir.path(), false)
            .unwrap_err()
            .to_string()
            .contains("--force"));
        cmd_synth(&cfg, dir.path(), true).unwrap();
        assert!(dir.path().join("keep.txt").exists());
    }

    #[test]
    fn detection_lines() {
        let d = Detection::new(0, 1.0, 2.5, 10.0, 20.25, 0.875);
        assert_eq!(format_detections(&[d]), "0 0.875000 1.00 2.50 10.00 20.25\n");
    }

    #[test]
    fn unletterbox_inverts_letterbox() {
        let lb = Letterbox::compute(200, 100, 64);
        let src = BBox::corner(20.0, 10.0, 120.0, 90.0, Units::Pixels);
        let [x1, y1, x2, y2] = src.coords;
        let net = BBox::corner(
            x1 * lb.scale + lb.pad_x as f64,
            y1 * lb.scale + lb.pad_y as f64,
            x2 * lb.scale + lb.pad_x as f64,
            y2 * lb.scale + lb.pad_y as f64,
            Units::Pixels,
        );
        let back = unletterbox(&net, &lb, 200, 100);
        for (a, b) in back.coords.iter().zip(src.coords) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
