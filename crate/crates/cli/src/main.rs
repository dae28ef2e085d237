use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvlr::checkpoint::{load_checkpoint, save_checkpoint};
use mvlr::data::{make_dataset, Dataset, DatasetSpec};
use mvlr::model::{tiny_gradcheck, Model};
use mvlr::prior::{load_prior, synth_prior, PriorEmbedding};
use mvlr::train::{datasets, evaluate, evaluation_csv, loss_csv, prepare_pairs, summarize, Trainer};
use mvlr::{io, Ablation, DegradationSpec, Dtype, Error, Result, Scalar, TrainConfig, Weather, WeatherMix};

#[derive(Parser)]
#[command(name = "mvlr", version, about = "Adverse-weather image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of clean/degraded PPM pairs plus manifest.csv.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// `uniform` or weights such as `rain:1,haze:2`.
        #[arg(long, default_value = "uniform")]
        mix: WeatherMix,
        #[arg(long, default_value_t = 0.3)]
        severity_min: f64,
        #[arg(long, default_value_t = 0.9)]
        severity_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        imb_capacity: Option<usize>,
        #[arg(long)]
        imb_topk: Option<usize>,
        /// Train on a `synth-data` directory instead of generating pairs.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Restore one PPM image with a trained checkpoint.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `synth:<weather>:<severity>`, `file:<path>` or `none`.
        #[arg(long, default_value = "none")]
        prior: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a `synth-data` directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients of a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::SynthData {
            out,
            count,
            size,
            mix,
            severity_min,
            severity_max,
            seed,
        } => {
            let dataset = make_dataset(&DatasetSpec {
                count,
                mix,
                height: size,
                width: size,
                severity: (severity_min, severity_max),
                seed,
            })?;
            dataset.write_dir(&out)?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Command::Train {
            config,
            seed,
            out,
            ablation,
            imb_capacity,
            imb_topk,
            data,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(a) = ablation {
                cfg.model = cfg.model.with_ablation(a);
            }
            if let Some(k) = imb_capacity {
                cfg.model.imb_capacity = k;
            }
            if let Some(k) = imb_topk {
                cfg.model.imb_topk = k;
            }
            cfg.validate()?;
            match cfg.precision {
                Dtype::F32 => train::<f32>(cfg, data.as_deref(), &out)?,
                Dtype::F64 => train::<f64>(cfg, data.as_deref(), &out)?,
            }
        }
        Command::Restore {
            ckpt,
            input,
            out,
            prior,
            seed,
        } => {
            let (model, _) = load_checkpoint::<f64>(&ckpt)?;
            restore(model, &input, &out, &prior, seed)?;
        }
        Command::Evaluate { ckpt, data, out } => {
            let (mut model, _) = load_checkpoint::<f64>(&ckpt)?;
            model.bank.freeze();
            let dataset = Dataset::read_dir(&data)?;
            let pairs = prepare_pairs(&dataset, &model)?;
            let csv = evaluation_csv(&evaluate(&model, &pairs)?);
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { seed } => {
            let check = tiny_gradcheck(seed)?;
            println!(
                "max relative error {:.3e} over {} parameters (top-k margin {:.3e})",
                check.report.max_rel_error, check.parameters, check.selection_margin
            );
            if check.report.max_rel_error >= GRADCHECK_TOLERANCE {
                eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train<T: Scalar>(cfg: TrainConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let (generated, val) = datasets(&cfg)?;
    let train_set = match data {
        Some(dir) => Dataset::read_dir(dir)?,
        None => generated,
    };
    let mut trainer = Trainer::<T>::new(cfg.clone())?;
    let train_pairs = prepare_pairs(&train_set, &trainer.model)?;
    let val_pairs = prepare_pairs(&val, &trainer.model)?;
    let total = cfg.total_steps;
    let stats = trainer.fit(&train_pairs, |s| {
        if (s.step + 1) % 100 == 0 || s.step + 1 == total {
            eprintln!("step {}/{total} loss {:.5} lr {:.3e}", s.step + 1, s.loss.total, s.lr);
        }
    })?;
    trainer.model.bank.freeze();
    save_checkpoint(out, &trainer.model, &cfg)?;
    let log = out.join("loss.csv");
    std::fs::write(&log, loss_csv(&stats)).map_err(|e| Error::io(&log, e))?;
    let rows = evaluate(&trainer.model, &val_pairs)?;
    let m = summarize(&rows).expect("validation set is non-empty");
    println!(
        "validation PSNR {:.3} dB (input {:.3} dB), SSIM {:.4} (input {:.4})",
        m.psnr_restored, m.psnr_deg, m.ssim_restored, m.ssim_deg
    );
    Ok(())
}

fn parse_prior(arg: &str, model: &Model<f64>, seed: u64) -> Result<Option<PriorEmbedding<f64>>> {
    let bad = || {
        Error::invalid(
            "prior",
            format!("{arg:?}: expected synth:<weather>:<severity>, file:<path> or none"),
        )
    };
    if arg == "none" {
        return Ok(None);
    }
    if let Some(path) = arg.strip_prefix("file:") {
        return load_prior(path).map(Some);
    }
    let rest = arg.strip_prefix("synth:").ok_or_else(bad)?;
    let (weather, severity) = rest.split_once(':').ok_or_else(bad)?;
    let weather: Weather = weather.parse()?;
    let severity: f64 = severity.parse().map_err(|_| bad())?;
    let spec = DegradationSpec::new(weather, severity, seed)?;
    synth_prior(&spec, seed, model.config.prior).map(Some)
}

fn restore(mut model: Model<f64>, input: &Path, out: &Path, prior: &str, seed: u64) -> Result<()> {
    model.bank.freeze();
    let prior = parse_prior(prior, &model, seed)?;
    let prior = if model.config.use_prior { prior } else { None };
    let img = io::read_ppm(input)?;
    let restored = model.restore(&img, prior.as_ref())?;
    io::write_ppm(out, &restored)
}
