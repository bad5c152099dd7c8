use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use transattunet::data::image::{mask_image, read_gray, write_pgm, GrayImage};
use transattunet::data::{
    load_dataset, resize_plane, save_dataset, split, stack, synth_generate, SegSample, Split, SplitName,
};
use transattunet::metrics::binarize;
use transattunet::nn::Mode;
use transattunet::suite::run_gradcheck_suite;
use transattunet::train::{
    evaluate, prepare_data, write_predictions, write_report, Checkpoint, Model, RunConfig, Trainer,
};
use transattunet::Tensor;

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

/// Segmentation with transformer and spatial self-attention at the U-Net
/// bottleneck and multi-scale skip connections.
#[derive(Parser, Debug)]
#[command(name = "transattunet", version)]
struct Cli {
    /// Flat JSON run configuration; unspecified fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for model init and training order (for `synth`: the data seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (images/, masks/, manifest.csv).
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Canvas size: `S` for S×S, or `HxW`.
        #[arg(long, value_parser = parse_size)]
        size: Option<[usize; 2]>,
    },
    /// Train a model; writes config.json, log.csv, last.ckpt, best.ckpt and
    /// test-split metrics from the best checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics.csv and metrics.json.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Write `<id>_prob.pgm` and `<id>_mask.pgm` for each input image.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// An image, a directory of images, or a dataset directory (with
        /// manifest.csv). Defaults to the checkpoint's test split.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits 2 on any breach.
    Gradcheck {
        /// Only run cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Write `stage_<k>.pgm` channel-mean decoder activations for one image.
    ExportActivations {
        /// Trained weights; a freshly initialized model is used otherwise.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Input image; defaults to the first test sample of the run's data.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (overrides `data_dir` in the config).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let v = parse(s)?;
            Ok([v, v])
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let Device::Cpu = cli.device;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Synth { n, size } => synth(&cli, *n, *size, &out)?,
        Command::Train { data, epochs, resume } => train(&cli, data, *epochs, resume.as_deref(), &out)?,
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(checkpoint, data, *split, &out)?,
        Command::Predict { checkpoint, input } => predict(checkpoint, input.as_deref(), &out)?,
        Command::Gradcheck { filter } => return gradcheck(filter.as_deref()),
        Command::ExportActivations { checkpoint, input } => {
            export_activations(&cli, checkpoint.as_deref(), input.as_deref(), &out)?
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Defaults, then `--config`, then `--seed` as the model seed.
fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn synth(cli: &Cli, n: Option<usize>, size: Option<[usize; 2]>, out: &Path) -> CliResult {
    let mut cfg = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
    }
    if let Some(size) = size {
        cfg.synth.size = size;
    }
    let n = n.unwrap_or(cfg.n_samples);
    cfg.synth.validate()?;
    let data = split(synth_generate(&cfg.synth, n)?, cfg.split_fractions, cfg.synth.seed)?;
    save_dataset(out, &data)?;
    println!(
        "wrote {n} samples to {} (train {}, val {}, test {})",
        out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

fn train(cli: &Cli, data: &DataArgs, epochs: Option<usize>, resume: Option<&Path>, out: &Path) -> CliResult {
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if let Some(e) = epochs {
                t.cfg.optim.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = load_config(cli)?;
            if let Some(dir) = &data.data {
                cfg.data_dir = Some(dir.clone());
            }
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            Trainer::new(cfg)?
        }
    };
    let split = prepare_data(&trainer.cfg)?;
    if split.train.is_empty() {
        return Err("the training split is empty".into());
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), trainer.cfg.to_json()?)?;
    println!(
        "training {} parameters on {} samples for {} epochs",
        trainer.model.param_count(),
        split.train.len(),
        trainer.cfg.optim.epochs
    );
    let start = Instant::now();
    for entry in trainer.fit(&split, Some(out), None)? {
        let val = entry.val_dice.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.5}  val_dice {val}",
            entry.epoch, entry.lr, entry.train_loss
        );
    }
    println!("finished in {:.1?}", start.elapsed());
    // a resumed run that never improved writes no best.ckpt of its own
    let best = out.join("best.ckpt");
    let model = if best.is_file() {
        model_from(&Checkpoint::load(&best)?)?
    } else {
        trainer.model.clone()
    };
    let held_out = if split.test.is_empty() { &split.val } else { &split.test };
    if !held_out.is_empty() {
        let report = evaluate(&model, held_out, trainer.cfg.threshold)?;
        write_report(&report, out)?;
        println!(
            "held-out dice {:.4}  iou {:.4}",
            report.aggregate.dice, report.aggregate.iou
        );
    }
    Ok(())
}

fn model_from(ckpt: &Checkpoint) -> CliResult<Model> {
    let mut model = Model::new(ckpt.header.config.model.clone())?;
    model.load_state(&ckpt.model)?;
    Ok(model)
}

/// The checkpoint's data, or `--data` resized to the model input.
fn data_for(ckpt: &Checkpoint, data: &DataArgs) -> CliResult<Split> {
    let mut cfg = ckpt.header.config.clone();
    if let Some(dir) = &data.data {
        cfg.data_dir = Some(dir.clone());
    }
    Ok(prepare_data(&cfg)?)
}

fn eval(checkpoint: &Path, data: &DataArgs, name: SplitName, out: &Path) -> CliResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = model_from(&ckpt)?;
    let split = data_for(&ckpt, data)?;
    let samples = split.get(name);
    if samples.is_empty() {
        return Err(format!("the {name} split is empty").into());
    }
    let report = evaluate(&model, samples, ckpt.header.config.threshold)?;
    write_report(&report, out)?;
    let m = &report.aggregate;
    println!(
        "{name}: {} images  dice {:.4}  iou {:.4}  acc {:.4}  rec {:.4}  pre {:.4}",
        samples.len(),
        m.dice,
        m.iou,
        m.acc,
        m.rec,
        m.pre
    );
    Ok(())
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")));
    files.sort();
    Ok(files)
}

fn predict(checkpoint: &Path, input: Option<&Path>, out: &Path) -> CliResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = model_from(&ckpt)?;
    let cfg = &ckpt.header.config;
    let files = match input {
        None => {
            let split = prepare_data(cfg)?;
            let written = write_predictions(&model, &split.test, cfg.threshold, out)?;
            println!("wrote {} files to {}", written.len(), out.display());
            return Ok(());
        }
        Some(p) if p.join("manifest.csv").is_file() => {
            let split = load_dataset(p)?;
            let mut files = Vec::new();
            for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
                for s in split.get(name) {
                    files.push(find_image(&p.join("images"), &s.id)?);
                }
            }
            files
        }
        Some(p) if p.is_dir() => image_files(p)?,
        Some(p) => vec![p.to_path_buf()],
    };
    fs::create_dir_all(out)?;
    let size = (cfg.model.image_size[0], cfg.model.image_size[1]);
    for path in &files {
        let img = read_gray(path)?;
        let native = (img.height, img.width);
        let unit: Tensor<f32> = img.to_unit_tensor()?;
        let x = Tensor::from_vec(resize_plane(unit.data(), native, size)?, &[1, 1, size.0, size.1])?;
        let prob = model.forward(&x, Mode::Eval)?;
        let prob = resize_plane(prob.data(), size, native)?;
        let mask: Vec<f32> = binarize(&prob, cfg.threshold).into_iter().map(f32::from).collect();
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or("input file name is not UTF-8")?;
        write_pgm(
            &out.join(format!("{id}_prob.pgm")),
            &GrayImage::from_unit(&prob, native.0, native.1)?,
        )?;
        write_pgm(
            &out.join(format!("{id}_mask.pgm")),
            &mask_image(&mask, native.0, native.1)?,
        )?;
    }
    println!("wrote predictions for {} images to {}", files.len(), out.display());
    Ok(())
}

fn find_image(dir: &Path, id: &str) -> CliResult<PathBuf> {
    ["pgm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| format!("no image for id '{id}' in {}", dir.display()).into())
}

fn gradcheck(filter: Option<&str>) -> CliResult<ExitCode> {
    let start = Instant::now();
    let results = run_gradcheck_suite(filter)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} cases, {failed} failed, {:.1?}", results.len(), start.elapsed());
    Ok(if failed == 0 && !results.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn export_activations(cli: &Cli, checkpoint: Option<&Path>, input: Option<&Path>, out: &Path) -> CliResult {
    let (model, cfg) = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            (model_from(&ckpt)?, ckpt.header.config)
        }
        None => {
            let cfg = load_config(cli)?;
            (Model::new(cfg.model.clone())?, cfg)
        }
    };
    let size = (cfg.model.image_size[0], cfg.model.image_size[1]);
    let x = match input {
        Some(p) => {
            let img = read_gray(p)?;
            let unit: Tensor<f32> = img.to_unit_tensor()?;
            Tensor::from_vec(
                resize_plane(unit.data(), (img.height, img.width), size)?,
                &[1, 1, size.0, size.1],
            )?
        }
        None => {
            let split = prepare_data(&cfg)?;
            let sample: &SegSample = split
                .test
                .first()
                .or(split.val.first())
                .or(split.train.first())
                .ok_or("the run's dataset is empty")?;
            stack::<f32>(&[sample])?.0
        }
    };
    // a fresh model has no running statistics yet, so use batch statistics
    let mode = if checkpoint.is_some() { Mode::Eval } else { Mode::Train };
    let written = model.export_activations(&x, mode, out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
