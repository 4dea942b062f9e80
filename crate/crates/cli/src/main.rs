//! `ddseg`: synthesize RGB-D data, train the diffusion segmenter, run
//! inference, evaluate, and sweep ablations.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod config;
mod viz;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddseg_core::data::{
    ignore_class_ids, invalid_subset, load_dataset, low_light, save_dataset, small_objects_config,
    synth_dataset, Dataset, SceneSpec,
};
use ddseg_core::diffusion::{NoiseSchedule, SamplerConfig};
use ddseg_core::metrics::{mean_iou, EvalReport};
use ddseg_core::model::{inputs_from_sample, Model, ModelConfig};
use ddseg_core::trainer::{fit, TrainConfig};
use ddseg_core::{checkpoint, pnm, Tape};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "ddseg", version, about = "Diffusion-based RGB-D semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB-D dataset with train/test splits
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Sample segmentation masks from a checkpoint
    Predict(PredictArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Sweep noise schedules and encoding scales
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training split size
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Test split size
    #[arg(long, default_value_t = 50)]
    test_count: usize,
    /// Image size as HxW
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0.03)]
    invalid_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (manifest.json + PPM/PGM files)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and loss.csv
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; flags take precedence over its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// cosine | linear
    #[arg(long)]
    schedule: Option<String>,
    /// Label encoding scale s
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for NNNN_pred.pgm files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    td: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write color masks and sampling-point overlays here
    #[arg(long)]
    viz: Option<PathBuf>,
    /// Darken inputs with gamma correction before predicting
    #[arg(long)]
    lowlight: bool,
    #[arg(long, default_value_t = 2.0)]
    gamma: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of NNNN_pred.pgm (falls back to NNNN_label.pgm)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset directory
    #[arg(long)]
    gt: PathBuf,
    /// invalid | lowlight | small
    #[arg(long)]
    subset: Option<String>,
    /// Fraction kept by the invalid-depth subset
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    /// Comma-separated class names excluded from the mean
    #[arg(long)]
    ignore_classes: Option<String>,
    /// Protocol name for the small-objects ignore list
    #[arg(long, default_value = "synthetic")]
    dataset_name: String,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    td: usize,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e);
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<ddseg_core::Error>() {
        Some(ddseg_core::Error::InvalidArgument(_)) => 2,
        Some(ddseg_core::Error::Numeric(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| ddseg_core::Error::InvalidArgument(format!("size '{}' is not HxW", s)))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| ddseg_core::Error::InvalidArgument(format!("bad size component '{}'", v)))
    };
    Ok((parse(h)?, parse(w)?))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let (h, w) = parse_size(&a.size)?;
    let spec = SceneSpec {
        classes: a.classes,
        width: w,
        height: h,
        invalid_rate: a.invalid_rate,
        reflective_class: (a.classes >= 2).then(|| a.classes as u8 - 1),
        ..SceneSpec::desk()
    };
    for (name, count, seed) in [("train", a.count, a.seed), ("test", a.test_count, a.seed + 1)] {
        let ds = synth_dataset(&spec, count, seed)?;
        save_dataset(&ds, &a.out.join(name))?;
        let mean: f64 =
            ds.samples.iter().map(|s| s.invalid_fraction()).sum::<f64>() / count.max(1) as f64;
        println!("{}: {} samples, mean invalid-depth fraction {:.4}", name, count, mean);
    }
    Ok(())
}

fn square_input(ds: &Dataset) -> Result<usize> {
    let s = ds.samples.first().ok_or_else(|| ddseg_core::Error::Data("empty dataset".into()))?;
    if s.width != s.height || s.width % 32 != 0 {
        return Err(anyhow!(ddseg_core::Error::InvalidArgument(format!(
            "model needs square images with side divisible by 32, got {}x{}",
            s.width, s.height
        ))));
    }
    Ok(s.width)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::empty(),
    };
    let epochs = file.resolve(a.epochs, "epochs", 40)?;
    let batch = file.resolve(a.batch, "batch", 4)?;
    let lr = file.resolve(a.lr, "lr", 3e-4)?;
    let weight_decay = file.resolve(a.weight_decay, "weight_decay", 0.01)?;
    let schedule = file.resolve(a.schedule, "schedule", "cosine".to_string())?;
    let scale = file.resolve(a.scale, "scale", 0.01)?;
    let seed = file.resolve(a.seed, "seed", 0)?;

    let ds = load_dataset(&a.data)?;
    let side = square_input(&ds)?;
    let mut mcfg = ModelConfig::desk(ds.classes.len());
    mcfg.input_hw = side;
    mcfg.schedule = NoiseSchedule::parse(&schedule)?;
    mcfg.scale = scale;
    let model = Model::init(mcfg, seed)?;

    let tcfg = TrainConfig {
        lr0: lr,
        weight_decay,
        epochs,
        batch,
        seed,
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    let log = fit(&model, &ds, &tcfg, Some(&a.out))?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} steps), final loss {:.4}; wrote {}",
        epochs,
        log.len(),
        last,
        a.out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let side = square_input(&ds)?;
    if side != model.cfg.input_hw {
        return Err(anyhow!(ddseg_core::Error::InvalidArgument(format!(
            "checkpoint expects {0}x{0} inputs, dataset is {1}x{1}",
            model.cfg.input_hw, side
        ))));
    }
    std::fs::create_dir_all(&a.out)?;
    if let Some(v) = &a.viz {
        std::fs::create_dir_all(v)?;
    }
    for (i, sample) in ds.samples.iter().enumerate() {
        let darkened;
        let sample = if a.lowlight {
            darkened = low_light(sample, a.gamma);
            &darkened
        } else {
            sample
        };
        let (rgb, depth) = inputs_from_sample(sample)?;
        let scfg = SamplerConfig { steps: a.steps, td: a.td, seed: a.seed.wrapping_add(i as u64) };
        let mask = model.sample(&rgb, &depth, &scfg)?;
        pnm::write_pgm8(&a.out.join(format!("{:04}_pred.pgm", i)), side, side, &mask)?;
        if let Some(vdir) = &a.viz {
            viz::write_mask_ppm(&vdir.join(format!("{:04}_mask.ppm", i)), &mask, side, side)?;
            let mut tape = Tape::<f32>::new();
            let img = tape.leaf(rgb.clone());
            let points = model.encoder.rgb.probe_points(&mut tape, img)?;
            viz::write_points_overlay(
                &vdir.join(format!("{:04}_points.ppm", i)),
                &rgb,
                &points,
                side,
                side,
            )?;
        }
    }
    println!("predicted {} masks into {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn read_pred(pred_dir: &Path, i: usize) -> Result<(usize, usize, Vec<u8>)> {
    let primary = pred_dir.join(format!("{:04}_pred.pgm", i));
    if primary.exists() {
        return Ok(pnm::read_pgm8(&primary)?);
    }
    let fallback = pred_dir.join(format!("{:04}_label.pgm", i));
    pnm::read_pgm8(&fallback)
        .with_context(|| format!("no prediction {:04}_pred.pgm or {:04}_label.pgm", i, i))
}

fn print_report(rep: &EvalReport, classes: &[String], ignored: &[usize]) {
    println!("{:<18} {:>8}", "class", "IoU");
    for (c, iou) in rep.per_class_iou.iter().enumerate() {
        let name = classes.get(c).map(String::as_str).unwrap_or("?");
        let tag = if ignored.contains(&c) { " (excluded)" } else { "" };
        match iou {
            Some(v) => println!("{:<18} {:>8.4}{}", name, v, tag),
            None => println!("{:<18} {:>8}{}", name, "absent", tag),
        }
    }
    println!("{:<18} {:>8.4}", "meanIoU", rep.mean_iou);
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let gt = load_dataset(&a.gt)?;
    let k = gt.classes.len();

    let explicit: Option<Vec<String>> = a
        .ignore_classes
        .as_ref()
        .map(|s| s.split(',').map(|v| v.trim().to_string()).collect());
    let mut ignored: Vec<usize> = Vec::new();
    let indices: Vec<usize> = match a.subset.as_deref() {
        None | Some("lowlight") => (0..gt.samples.len()).collect(),
        Some("invalid") => invalid_subset(&gt, a.fraction)?,
        Some("small") => {
            let names = small_objects_config(&a.dataset_name, explicit.as_deref())?;
            ignored = ignore_class_ids(&names, &gt.classes)?;
            (0..gt.samples.len()).collect()
        }
        Some(other) => {
            return Err(anyhow!(ddseg_core::Error::InvalidArgument(format!(
                "unknown subset '{}': expected invalid, lowlight or small",
                other
            ))))
        }
    };
    if a.subset.as_deref() != Some("small") {
        if let Some(names) = &explicit {
            ignored = ignore_class_ids(names, &gt.classes)?;
        }
    }

    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut invalid = Vec::new();
    for &i in &indices {
        let s = &gt.samples[i];
        let (w, h, p) = read_pred(&a.pred, i)?;
        if (w, h) != (s.width, s.height) {
            bail!(ddseg_core::Error::shape(
                "eval",
                format!("prediction {} is {}x{}, ground truth {}x{}", i, w, h, s.width, s.height)
            ));
        }
        preds.push(p);
        gts.push(s.label.clone());
        invalid.push(s.invalid_fraction());
    }
    let mut rep = mean_iou(&preds, &gts, k, 255, &ignored)?;
    rep.invalid_fraction = invalid;

    println!(
        "evaluated {} of {} samples{}",
        indices.len(),
        gt.samples.len(),
        a.subset.as_deref().map(|s| format!(" (subset: {})", s)).unwrap_or_default()
    );
    print_report(&rep, &gt.classes, &ignored);

    if let Some(csv) = &a.csv {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        writeln!(f, "class,iou")?;
        for (c, iou) in rep.per_class_iou.iter().enumerate() {
            let name = gt.classes.get(c).map(String::as_str).unwrap_or("?");
            match iou {
                Some(v) => writeln!(f, "{},{}", name, v)?,
                None => writeln!(f, "{},", name)?,
            }
        }
        writeln!(f, "mean,{}", rep.mean_iou)?;
    }
    Ok(())
}

const ABLATE_SCALES: [f64; 5] = [0.001, 0.01, 0.03, 0.05, 0.1];

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    use std::io::Write;
    let train_ds = load_dataset(&a.data)?;
    let test_ds = load_dataset(&a.test)?;
    let side = square_input(&train_ds)?;

    let mut rows = Vec::new();
    for schedule in [NoiseSchedule::Cosine, NoiseSchedule::linear_default()] {
        for s in ABLATE_SCALES {
            let mut mcfg = ModelConfig::desk(train_ds.classes.len());
            mcfg.input_hw = side;
            mcfg.schedule = schedule;
            mcfg.scale = s;
            let model = Model::init(mcfg, a.seed)?;
            let tcfg = TrainConfig {
                lr0: a.lr,
                epochs: a.epochs,
                batch: a.batch,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let log = fit(&model, &train_ds, &tcfg, None)?;
            let final_loss = log.last().map(|r| r.loss).unwrap_or(f64::NAN);

            let scfg = SamplerConfig { steps: a.steps, td: a.td, seed: a.seed };
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for sample in &test_ds.samples {
                let (rgb, depth) = inputs_from_sample(sample)?;
                preds.push(model.sample(&rgb, &depth, &scfg)?);
                gts.push(sample.label.clone());
            }
            let rep = mean_iou(&preds, &gts, train_ds.classes.len(), 255, &[])?;
            eprintln!(
                "ablate {} s={}: loss {:.4}, mIoU {:.4}",
                schedule.name(),
                s,
                final_loss,
                rep.mean_iou
            );
            rows.push((schedule.name(), s, final_loss, rep.mean_iou));
        }
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    writeln!(f, "schedule,scale,final_loss,miou")?;
    for (name, s, loss, miou) in &rows {
        writeln!(f, "{},{},{},{}", name, s, loss, miou)?;
    }
    println!("wrote {} ablation rows to {}", rows.len(), a.out.display());
    Ok(())
}
