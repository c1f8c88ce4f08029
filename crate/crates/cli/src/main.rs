//! `t2d`: train the text-to-patch projection, segment images, evaluate
//! benchmarks and inspect `.t2d` containers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use t2d_core::config::RunConfig;
use t2d_core::engine::{ClassVocabulary, Engine, TextEmbeddings};
use t2d_core::eval::{self, BenchmarkOptions, ClassList};
use t2d_core::io;
use t2d_core::projection::ProjectionParams;
use t2d_core::sample::SampleRecord;
use t2d_core::synthetic::{SyntheticSpec, SyntheticWorld};
use t2d_core::tensor_store::{self, Container, DType, TensorRecord};
use t2d_core::trainer;

#[derive(Parser, Debug)]
#[command(
    name = "t2d",
    version,
    about = "Open-vocabulary segmentation from frozen backbone tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the projection on a directory of sample containers.
    Train(TrainArgs),
    /// Segment one image from its feature container.
    Segment(SegmentArgs),
    /// Evaluate mIoU over a dataset directory.
    Eval(EvalArgs),
    /// Print the records of a `.t2d` container.
    Inspect(InspectArgs),
    /// Write a synthetic dataset (features, annotations, images, vocabulary).
    Synth(SynthArgs),
}

/// Flags shared by every pipeline subcommand. Applied on top of `--config`.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// max_head, mean_heads or cls_only.
    #[arg(long)]
    aggregation: Option<String>,
    /// tanh or linear.
    #[arg(long)]
    projection: Option<String>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    threshold: Option<f32>,
    /// Sliding window side in pixels.
    #[arg(long)]
    window: Option<usize>,
    /// Sliding window stride in pixels.
    #[arg(long)]
    stride: Option<usize>,
    /// Enable background cleaning.
    #[arg(long, overrides_with = "no_clean")]
    clean: bool,
    #[arg(long)]
    no_clean: bool,
    /// Enable PAMR mask refinement (needs the RGB image).
    #[arg(long, overrides_with = "no_refine")]
    refine: bool,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    pamr_iterations: Option<usize>,
    /// Template applied to class names before embedding lookup, e.g. "a photo of a {}.".
    #[arg(long)]
    prompt_template: Option<String>,
    /// Ground-truth label to skip; "none" disables.
    #[arg(long)]
    ignore_index: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: String| cfg.set(key, &value);
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    set(stringify!($field), v.to_string())?;
                })*
            };
        }
        apply!(
            lr,
            batch_size,
            epochs,
            max_steps,
            temperature,
            seed,
            aggregation,
            projection,
            lambda,
            threshold,
            window,
            stride,
            pamr_iterations,
            prompt_template,
            ignore_index
        );
        if self.clean {
            set("background_cleaning", "true".into())?;
        }
        if self.no_clean {
            set("background_cleaning", "false".into())?;
        }
        if self.refine {
            set("mask_refinement", "true".into())?;
        }
        if self.no_refine {
            set("mask_refinement", "false".into())?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            set(k, v.to_owned())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of `.t2d` sample containers.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint (conventionally `*.psi.t2d`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL training log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Sample container of the image to segment.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Text-embedding container holding the class embeddings.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Class names file, one per line; a leading `background` enables the background class.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// RGB image, used for the overlay and for refinement.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output directory; files are named after the image id.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overlay mask opacity.
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset root with `features/`, `annotations/`, optional `images/` and `classes.txt`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Defaults to `<dataset>/classes.txt`.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Report path; defaults to `report.json` in the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    file: PathBuf,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 32)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace one region of every scene with background clutter.
    #[arg(long)]
    background: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Patch grid side.
    #[arg(long, default_value_t = 8)]
    grid: usize,
}

fn required<'a>(
    value: &'a Option<PathBuf>,
    fallback: &'a Option<PathBuf>,
    what: &str,
) -> Result<&'a Path> {
    value
        .as_deref()
        .or(fallback.as_deref())
        .with_context(|| format!("missing {what}: pass --{what} or set `{what}` in the config"))
}

fn sample_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".t2d") && !name.ends_with(".psi.t2d")
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = required(&args.data, &cfg.dataset, "data")?;
    let out = required(&args.out, &cfg.checkpoint, "out")?;
    let paths = sample_paths(data)?;
    if paths.is_empty() {
        bail!("no .t2d sample containers in {}", data.display());
    }
    let dataset = paths
        .iter()
        .map(|p| SampleRecord::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let name = out
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("checkpoint");
        let stem = name
            .strip_suffix(".psi.t2d")
            .or_else(|| name.strip_suffix(".t2d"))
            .unwrap_or(name);
        out.with_file_name(format!("{stem}.log.jsonl"))
    });
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let outcome = trainer::train_with_progress(&dataset, &cfg.train_config(), |e| {
        let line = json!({
            "epoch": e.epoch,
            "steps": e.steps,
            "mean_loss": e.mean_loss,
            "head_counts": e.head_counts,
            "head_histogram": e.head_histogram,
        });
        eprintln!(
            "epoch {:>4}  steps {:>5}  loss {:.6}",
            e.epoch, e.steps, e.mean_loss
        );
        if let Err(err) = writeln!(log, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    outcome.params.save(out)?;
    println!(
        "trained on {} samples for {} epochs; checkpoint {} log {}",
        dataset.len(),
        outcome.log.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn build_engine(
    cfg: &RunConfig,
    checkpoint: &Path,
    vocab: &Path,
    classes: &ClassList,
) -> Result<Engine> {
    let params = ProjectionParams::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let embeddings = TextEmbeddings::read(vocab)
        .with_context(|| format!("reading vocabulary {}", vocab.display()))?;
    let vocab = ClassVocabulary::from_names(
        &params,
        &classes.foreground,
        &embeddings,
        &cfg.prompt_template,
        classes.has_background,
    )?;
    Ok(Engine::new(params, vocab, cfg.engine_options())?)
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    let checkpoint = required(&args.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let vocab = required(&args.vocab, &cfg.vocab, "vocab")?;
    let classes_path = required(&args.classes, &cfg.classes, "classes")?;
    let out_dir = required(&args.out, &cfg.output, "out")?;
    let classes = ClassList::read(classes_path)?;
    let engine = build_engine(&cfg, checkpoint, vocab, &classes)?;

    let sample = SampleRecord::read(&args.features)
        .with_context(|| format!("reading {}", args.features.display()))?;
    let image = args
        .image
        .as_ref()
        .map(|p| io::load_rgb(p, Some(sample.image_size)))
        .transpose()?;
    if cfg.mask_refinement && image.is_none() {
        bail!("mask refinement needs --image");
    }
    let out = engine.segment(&sample, image.as_ref())?;
    let mask = &out.mask;

    fs::create_dir_all(out_dir)?;
    let stem = sanitize(&sample.image_id);
    let mask_path = out_dir.join(format!("{stem}.mask.png"));
    let overlay_path = out_dir.join(format!("{stem}.overlay.png"));
    let sidecar_path = out_dir.join(format!("{stem}.json"));
    io::save_index_mask(&mask_path, mask.height, mask.width, &mask.labels)?;
    io::save_rgb(
        &overlay_path,
        &io::render_overlay(mask, image.as_ref(), args.alpha)?,
    )?;

    let mut names: Vec<String> = classes.foreground.clone();
    if let Some(bg) = mask.background {
        names.insert(bg as usize, "background".into());
    }
    let sidecar = json!({
        "image_id": sample.image_id,
        "height": mask.height,
        "width": mask.width,
        "classes": names,
        "background_index": mask.background,
        "windows": out.windows.len(),
        "features": args.features,
        "config": cfg.to_json(),
    });
    fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    println!("{}", mask_path.display());
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let mut cfg = args.config.resolve()?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    let root = required(&args.dataset, &cfg.dataset, "dataset")?.to_path_buf();
    let checkpoint = required(&args.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let vocab = required(&args.vocab, &cfg.vocab, "vocab")?;
    let classes_path = args
        .classes
        .clone()
        .or(cfg.classes.clone())
        .unwrap_or_else(|| root.join("classes.txt"));
    let classes = ClassList::read(&classes_path)?;
    let engine = build_engine(&cfg, checkpoint, vocab, &classes)?;
    let options = BenchmarkOptions {
        ignore_index: cfg.ignore_index,
        config: cfg.to_json(),
    };
    let report = eval::run_benchmark(&root, &engine, &classes, &options)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("report.json"));
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.table());
    for m in &report.missing {
        eprintln!("missing features: {m}");
    }
    for f in &report.failures {
        eprintln!("failed: {}: {}", f.image, f.reason);
    }
    Ok(if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn record_json(r: &TensorRecord) -> serde_json::Value {
    let mut v = json!({
        "name": r.name,
        "dtype": r.dtype.name(),
        "shape": r.shape,
        "bytes": r.payload.len(),
    });
    if r.dtype == DType::U8 && r.shape.len() == 1 {
        if let Ok(text) = r.to_text() {
            v["text"] = json!(text);
        }
    } else if r.dtype == DType::I32 && r.numel() <= 8 {
        v["values"] = json!(r.to_i32().unwrap_or_default());
    }
    v
}

fn container_kind(c: &Container) -> &'static str {
    if c.get("meta").is_some() && c.get("W_a").is_some() {
        "checkpoint"
    } else if c.get("features").is_some() && c.get("attn_logits").is_some() {
        "sample"
    } else if !c.records().is_empty()
        && c.records()
            .iter()
            .all(|r| r.shape.len() == 1 && matches!(r.dtype, DType::F32 | DType::F16))
    {
        "text-embeddings"
    } else {
        "generic"
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let container =
        Container::read(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let kind = container_kind(&container);
    if args.json {
        let records: Vec<_> = container.records().iter().map(record_json).collect();
        let doc = json!({ "file": args.file, "kind": kind, "records": records });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!(
        "{}  ({kind}, {} records)",
        args.file.display(),
        container.records().len()
    );
    for r in container.records() {
        let shape = r
            .shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        let detail = match record_json(r) {
            v if v.get("text").is_some() => format!("  {:?}", v["text"].as_str().unwrap_or("")),
            v if v.get("values").is_some() => format!("  {}", v["values"]),
            _ => String::new(),
        };
        println!("  {:<32} {:<4} [{shape}]{detail}", r.name, r.dtype.name());
    }
    if kind == "text-embeddings" {
        let dims: Vec<usize> = container.records().iter().map(|r| r.shape[0]).collect();
        println!("  D_t = {}", dims[0]);
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let world = SyntheticWorld::new(SyntheticSpec {
        classes: args.classes,
        grid: (args.grid, args.grid),
        with_background: args.background,
        seed: args.seed,
        ..SyntheticSpec::default()
    })?;
    let root = &args.out;
    for sub in ["features", "annotations", "images"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for (i, scene) in world.scenes(args.seed + 1, args.scenes)?.iter().enumerate() {
        let stem = format!("scene_{i:04}");
        let (h, w) = scene.record.image_size;
        scene
            .record
            .write(root.join("features").join(format!("{stem}.t2d")), false)?;
        io::save_index_mask(
            root.join("annotations").join(format!("{stem}.png")),
            h,
            w,
            &scene.pixel_labels,
        )?;
        io::save_rgb_image(
            root.join("images").join(format!("{stem}.png")),
            &scene.image,
        )?;
    }
    let mut names = world.class_names();
    let vocab: Vec<TensorRecord> = names
        .iter()
        .zip(&world.class_text)
        .map(|(n, e)| TensorRecord::from_f32(n.clone(), vec![e.len()], e))
        .collect::<t2d_core::Result<_>>()?;
    tensor_store::write_container(root.join("vocab.t2d"), &vocab)?;
    if args.background {
        names.insert(0, "background".into());
    }
    fs::write(root.join("classes.txt"), names.join("\n") + "\n")?;
    println!("wrote {} scenes to {}", args.scenes, root.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Segment(a) => cmd_segment(a)?,
        Command::Eval(a) => return cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a)?,
        Command::Synth(a) => cmd_synth(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
