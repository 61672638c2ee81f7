//! Command-line front end. Exit codes: 0 success, 1 usage errors,
//! 2 data/runtime errors. The seed resolves from `--seed`, then the
//! `ACMIXKIT_SEED` environment variable, then 0.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::anchors::kmeans_cluster;
use crate::blocks::{rep_forward_train, rep_reparameterize, RepBranchParams};
use crate::data::{
    dataset_stats, letterbox, load_manifest, read_netpbm, split_dataset, stats_pixel_boxes,
    synth_fixture_generate, LabeledImage,
};
use crate::metrics::{evaluate, fps_benchmark, BBox, Detection, GroundTruth};
use crate::model::{build_model, decode_boxes, nms, validate_input, Model, ModelConfig};
use crate::tensor::{conv2d_same, Shape, Tensor};
use crate::{Error, Result};

pub const SEED_ENV: &str = "ACMIXKIT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "acmixkit", version, about = "Underwater detector toolkit")]
pub struct Cli {
    /// RNG seed; falls back to $ACMIXKIT_SEED, then 0
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Weight archive produced by a previous run; fresh seeded weights if absent
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 640)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub width_multiple: f32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster dataset boxes into 9 anchors with k-means++ under 1-IoU
    Anchors {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 640)]
        input_size: usize,
        #[arg(long, default_value_t = 9)]
        k: usize,
    },
    /// Per-class dataset statistics
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Seeded 7:3 train/val split; writes train.tsv and val.tsv
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the detector over a manifest and print detections
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        #[arg(long, default_value_t = 0.45)]
        iou: f32,
    },
    /// Evaluate detections against manifest labels (mAP@0.5 and 0.5:0.95)
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        #[arg(long, default_value_t = 0.45)]
        iou: f32,
    },
    /// Verify branch fusion: train-time vs reparameterized output
    ReparamCheck {
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Forward-pass throughput of the toy model
    Bench {
        #[arg(long, default_value_t = 64)]
        input_size: usize,
        #[arg(long, default_value_t = 0.25)]
        width_multiple: f32,
        #[arg(long, default_value_t = 15)]
        iters: usize,
    },
    /// Deterministic smoke checks with a canonical summary
    Selftest,
    /// Generate a synthetic labeled fixture dataset
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

/// Parses `argv` and runs; all output goes to `out`. Returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successful exits
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion => 0,
                _ => 1,
            };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    let seed = resolve_seed(cli.seed);
    match execute(&cli, seed, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            match e {
                Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_or_build(margs: &ModelArgs, seed: u64) -> Result<Model> {
    match &margs.weights {
        Some(path) => {
            let (model, warnings) = Model::load_weights(path)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok(model)
        }
        None => build_model(&ModelConfig::new(
            margs.num_classes,
            margs.input_size,
            margs.width_multiple,
            seed,
        )),
    }
}

fn run_detector(
    model: &Model,
    items: &[LabeledImage],
    conf: f32,
    iou: f32,
) -> Result<Vec<Detection>> {
    let size = model.config.input_size;
    let mut all = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let img = read_netpbm(&item.image_path)?;
        let (input, _) = letterbox(&img, size)?;
        validate_input(&input)?;
        let heads = model.forward(&input)?;
        let mut dets = decode_boxes(&heads, &model.config.anchors, conf, size)?;
        for d in dets.iter_mut() {
            d.image_id = idx;
        }
        all.extend(nms(&dets, iou));
    }
    Ok(all)
}

fn ground_truths(items: &[LabeledImage], input_size: usize) -> Vec<GroundTruth> {
    // labels are normalized; the letterboxed fixture images are square so
    // the mapping to input pixels is a plain scale
    let s = input_size as f32;
    let mut gts = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        for l in &item.labels {
            let x1 = (l.cx - l.w / 2.0) * s;
            let y1 = (l.cy - l.h / 2.0) * s;
            let x2 = (l.cx + l.w / 2.0) * s;
            let y2 = (l.cy + l.h / 2.0) * s;
            if let Ok(bbox) = BBox::new(x1.max(0.0), y1.max(0.0), x2.min(s), y2.min(s)) {
                gts.push(GroundTruth {
                    image_id: idx,
                    class_id: l.class_id,
                    bbox,
                });
            }
        }
    }
    gts
}

fn execute(cli: &Cli, seed: u64, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Anchors { manifest, input_size, k } => {
            let items = load_manifest(manifest)?;
            let stats = dataset_stats(&items);
            let boxes = stats_pixel_boxes(&stats, *input_size);
            let result = kmeans_cluster(&boxes, *k, seed)?;
            match cli.format {
                Format::Json => {
                    let v = json!({
                        "seed": seed,
                        "input_size": input_size,
                        "anchors": result.centers.iter().map(|b| [b.w, b.h]).collect::<Vec<_>>(),
                        "mean_iou": result.mean_iou,
                        "iterations": result.iterations,
                    });
                    writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
                }
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "boxes: {}", boxes.len())?;
                    for (i, c) in result.centers.iter().enumerate() {
                        writeln!(out, "anchor {i}: {:.1} x {:.1}", c.w, c.h)?;
                    }
                    writeln!(out, "mean IoU: {:.4}", result.mean_iou)?;
                }
            }
            Ok(())
        }
        Command::Stats { manifest } => {
            let items = load_manifest(manifest)?;
            let stats = dataset_stats(&items);
            match cli.format {
                Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?,
                Format::Text => {
                    writeln!(out, "images: {}", stats.num_images)?;
                    writeln!(out, "boxes: {}", stats.num_boxes)?;
                    writeln!(out, "boxes/image: {:.2}", stats.mean_boxes_per_image)?;
                    for (cls, n) in &stats.class_counts {
                        writeln!(out, "class {cls}: {n}")?;
                    }
                }
            }
            Ok(())
        }
        Command::Split { manifest, out_dir } => {
            let items = load_manifest(manifest)?;
            let (train, val) = split_dataset(&items, seed);
            std::fs::create_dir_all(out_dir)?;
            let render = |items: &[LabeledImage]| -> String {
                items
                    .iter()
                    .map(|i| {
                        format!("{}\t{}\n", i.image_path.display(), i.label_path.display())
                    })
                    .collect()
            };
            std::fs::write(out_dir.join("train.tsv"), render(&train))?;
            std::fs::write(out_dir.join("val.tsv"), render(&val))?;
            match cli.format {
                Format::Json => writeln!(
                    out,
                    "{}",
                    json!({"seed": seed, "train": train.len(), "val": val.len()})
                )?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "train: {} items", train.len())?;
                    writeln!(out, "val: {} items", val.len())?;
                }
            }
            Ok(())
        }
        Command::Detect { manifest, model, conf, iou } => {
            let items = load_manifest(manifest)?;
            let m = load_or_build(model, seed)?;
            let dets = run_detector(&m, &items, *conf, *iou)?;
            match cli.format {
                Format::Json => {
                    let v: Vec<_> = dets
                        .iter()
                        .map(|d| {
                            json!({
                                "image": d.image_id,
                                "class": d.class_id,
                                "box": [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                                "confidence": d.confidence,
                            })
                        })
                        .collect();
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string_pretty(&json!({"seed": seed, "detections": v}))?
                    )?;
                }
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "conf {conf} iou {iou} input {}", m.config.input_size)?;
                    for d in &dets {
                        writeln!(
                            out,
                            "image {} class {} conf {:.4} box {:.1} {:.1} {:.1} {:.1}",
                            d.image_id, d.class_id, d.confidence, d.bbox.x1, d.bbox.y1,
                            d.bbox.x2, d.bbox.y2
                        )?;
                    }
                    writeln!(out, "total: {} detections", dets.len())?;
                }
            }
            Ok(())
        }
        Command::Eval { manifest, model, conf, iou } => {
            let items = load_manifest(manifest)?;
            let m = load_or_build(model, seed)?;
            let dets = run_detector(&m, &items, *conf, *iou)?;
            let gts = ground_truths(&items, m.config.input_size);
            let report = evaluate(&dets, &gts, m.config.num_classes)?;
            match cli.format {
                Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "mAP@0.5: {:.4}", report.map50)?;
                    writeln!(out, "mAP@0.5:0.95: {:.4}", report.map50_95)?;
                    let mut classes: Vec<_> = report.per_class_ap.iter().collect();
                    classes.sort_by_key(|(c, _)| **c);
                    for (cls, ap) in classes {
                        writeln!(out, "AP class {cls}: {ap:.4}")?;
                    }
                }
            }
            Ok(())
        }
        Command::ReparamCheck { channels, trials } => {
            let mut worst = 0f32;
            for t in 0..*trials {
                let rng = &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let mut params = RepBranchParams::init(*channels, *channels, rng);
                // non-trivial BN statistics
                for bn in [&mut params.bn3, &mut params.bn1]
                    .into_iter()
                    .chain(params.identity_bn.as_mut())
                {
                    for v in bn.running_mean.iter_mut() {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                    for v in bn.running_var.iter_mut() {
                        *v = rng.gen_range(0.5..2.0);
                    }
                    for v in bn.gamma.iter_mut() {
                        *v = rng.gen_range(0.5..1.5);
                    }
                    for v in bn.beta.iter_mut() {
                        *v = rng.gen_range(-0.3..0.3);
                    }
                }
                let x = Tensor::from_vec(
                    Shape::new(1, *channels, 6, 6)?,
                    (0..*channels * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )?;
                let train = rep_forward_train(&x, &params)?;
                let fused = rep_reparameterize(&params)?;
                let infer = conv2d_same(&x, &fused, 1)?;
                for (a, b) in train.data.iter().zip(&infer.data) {
                    worst = worst.max((a - b).abs());
                }
            }
            let pass = worst <= 1e-4;
            match cli.format {
                Format::Json => writeln!(
                    out,
                    "{}",
                    json!({"seed": seed, "trials": trials, "max_abs_diff": worst, "pass": pass})
                )?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "trials: {trials} channels: {channels}")?;
                    writeln!(out, "max |train - fused|: {worst:.2e}")?;
                    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" })?;
                }
            }
            if pass {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "fusion mismatch {worst:.2e} exceeds 1e-4"
                )))
            }
        }
        Command::Bench { input_size, width_multiple, iters } => {
            let cfg = ModelConfig::new(4, *input_size, *width_multiple, seed);
            let m = build_model(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_vec(
                Shape::new(1, 3, *input_size, *input_size)?,
                (0..3 * input_size * input_size)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
            )?;
            let start = Instant::now();
            let (fps, cv) = fps_benchmark(|| { m.forward(&img).unwrap(); }, 2, *iters)?;
            let elapsed = start.elapsed().as_secs_f64();
            match cli.format {
                Format::Json => writeln!(
                    out,
                    "{}",
                    json!({
                        "seed": seed, "input_size": input_size,
                        "width_multiple": width_multiple, "iters": iters,
                        "fps": fps, "cv": cv, "wall_seconds": elapsed,
                    })
                )?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "input {input_size} width x{width_multiple} iters {iters}")?;
                    writeln!(out, "fps: {fps:.2} (cv {cv:.3})")?;
                }
            }
            Ok(())
        }
        Command::Selftest => {
            // deterministic pipeline: synth fixture -> anchors -> tiny model
            let dir = tempfile::tempdir()?;
            let manifest = synth_fixture_generate(dir.path(), 6, 32, 4, seed)?;
            let items = load_manifest(&manifest)?;
            let stats = dataset_stats(&items);
            let boxes = stats_pixel_boxes(&stats, 64);
            let cluster = kmeans_cluster(&boxes, 3.min(boxes.len()), seed)?;
            let cfg = ModelConfig::new(4, 64, 0.25, seed);
            let m = build_model(&cfg)?;
            let img = read_netpbm(&items[0].image_path)?;
            let (input, _) = letterbox(&img, 64)?;
            let heads = m.forward(&input)?;
            let checksum: f64 = heads
                .iter()
                .flat_map(|h| h.raw.data.iter())
                .map(|&v| v as f64)
                .sum();
            match cli.format {
                Format::Json => writeln!(
                    out,
                    "{}",
                    json!({
                        "seed": seed,
                        "images": stats.num_images,
                        "boxes": stats.num_boxes,
                        "cluster_mean_iou": format!("{:.6}", cluster.mean_iou),
                        "head_checksum": format!("{checksum:.6}"),
                        "status": "ok",
                    })
                )?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "fixture: {} images, {} boxes", stats.num_images, stats.num_boxes)?;
                    writeln!(out, "cluster mean IoU: {:.6}", cluster.mean_iou)?;
                    writeln!(out, "head checksum: {checksum:.6}")?;
                    writeln!(out, "selftest ok")?;
                }
            }
            Ok(())
        }
        Command::Synth { out_dir, count, size, classes } => {
            let manifest = synth_fixture_generate(out_dir, *count, *size, *classes, seed)?;
            match cli.format {
                Format::Json => writeln!(
                    out,
                    "{}",
                    json!({
                        "seed": seed,
                        "manifest": manifest.display().to_string(),
                        "count": count, "size": size, "classes": classes,
                    })
                )?,
                Format::Text => {
                    writeln!(out, "seed: {seed}")?;
                    writeln!(out, "wrote {count} images to {}", out_dir.display())?;
                    writeln!(out, "manifest: {}", manifest.display())?;
                }
            }
            Ok(())
        }
    }
}
