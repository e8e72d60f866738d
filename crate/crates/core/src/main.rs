use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use m2unet::data::{read_pnm, synth_polyp_raw, write_pnm, write_raw_dataset};
use m2unet::gradcheck;
use m2unet::kv::KvConfig;
use m2unet::model::M2UNet;
use m2unet::trainer::{
    evaluate_checkpoint, load_training_data, predict_image, Checkpoint, EpochLog, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "m2unet", version, about = "Train and run the M2UNet polyp segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` settings applied over the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an 8-bit probability map for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Run only checks whose name starts or ends with this.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train_config(config: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut kv = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            KvConfig::parse(&text)?
        }
        None => KvConfig::new(),
    };
    let extra = KvConfig::parse(&overrides.join("\n"))?;
    kv.merge(&extra);
    Ok(TrainConfig::from_kv(&kv)?)
}

fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let cfg = train_config(config, overrides)?;
    let data = load_training_data(&cfg)?;
    eprintln!("{} samples, model {}×{}", data.len(), cfg.target_size, cfg.target_size);
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, data, Checkpoint::load(path)?)?,
        None => Trainer::new(cfg, data)?,
    };
    eprintln!("{} parameters, {} steps", trainer.model.param_count(), trainer.total_steps());
    let start = Instant::now();
    println!("{}", EpochLog::tsv_header());
    trainer.run(|log| {
        println!("{}", log.to_tsv());
        eprintln!("epoch {} done after {:.1}s", log.epoch, start.elapsed().as_secs_f64());
    })?;
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let report = evaluate_checkpoint(ckpt, data)?;
    let table = report.to_tsv();
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn predict(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = M2UNet { config: ck.config, params: ck.params };
    let raw = read_pnm(image)?;
    write_pnm(out, &predict_image(&model, &raw)?)?;
    Ok(())
}

fn run_gradcheck(module: Option<&str>, seeds: u64) -> Result<bool> {
    let names = gradcheck::select(module);
    if names.is_empty() {
        bail!("no gradient check matches `{}`", module.unwrap_or(""));
    }
    println!("check\tseed\tprobes\tmax_rel_err\ttolerance\tresult");
    let mut ok = true;
    for name in names {
        for seed in 0..seeds {
            let r = gradcheck::run(name, seed)?;
            ok &= r.passed();
            let verdict = if r.passed() { "pass" } else { "FAIL" };
            println!("{}\t{}\t{}\t{:.3e}\t{:.0e}\t{verdict}", r.name, r.seed, r.probes, r.max_rel_err, r.tolerance);
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, overrides, resume } => train(config.as_deref(), overrides, resume.as_deref()),
        Command::Eval { ckpt, data, out } => eval(ckpt, data, out.as_deref()),
        Command::Predict { ckpt, image, out } => predict(ckpt, image, out),
        Command::Gradcheck { module, seeds } => match run_gradcheck(module.as_deref(), *seeds) {
            Ok(true) => Ok(()),
            Ok(false) => Err(anyhow::anyhow!("gradient check failed")),
            Err(e) => Err(e),
        },
        Command::Synth { n, size, seed, out } => {
            synth_polyp_raw(*n, *size, *seed).and_then(|items| write_raw_dataset(out, &items)).map_err(Into::into)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
