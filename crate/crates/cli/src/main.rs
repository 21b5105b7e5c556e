//! Command-line driver: train, calibrate, generate, evaluate, and ablate.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ditquant::calib::{build_calib_dataset, calibrate, collect_layer_stats, CalibrationMode};
use ditquant::diffusion::train_fp;
use ditquant::eval::{
    generate, reference_set, run_ablation, toy_frechet, trajectory_divergence, trajectory_label,
    AblationConfig,
};
use ditquant::io::{
    load_archive, load_checkpoint, save_archive, save_checkpoint, write_file, Checkpoint,
    QuantSidecar, RunConfig, SampleSource,
};
use ditquant::quant::QuantizedModel;

/// Environment variable holding the worker thread count.
const WORKERS_ENV: &str = "DITQUANT_WORKERS";

#[derive(Parser)]
#[command(name = "ditquant", version, about = "Post-training quantization of a miniature diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate quantizers for a checkpoint and write a sidecar.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Sample images from a checkpoint, quantized when a sidecar is given.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Number of images to generate.
        #[arg(long, default_value_t = 128)]
        num_samples: usize,
    },
    /// Toy-FD of a sample archive against a reference archive or the dataset,
    /// plus trajectory divergence when a checkpoint and sidecar are given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Sample archive directory.
        archive: PathBuf,
        /// Reference archive; defaults to held-out dataset images.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Run the four-configuration ablation ladder plus the full-precision row.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed the command consumes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibArgs {
    /// Weight and activation bit widths as `<kW>:<kA>`.
    #[arg(long, value_parser = parse_bits)]
    bits: Option<(u32, u32)>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    samples_per_group: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    mode: Option<CalibrationMode>,
}

fn parse_bits(s: &str) -> Result<(u32, u32), String> {
    let (w, a) = s.split_once(':').ok_or_else(|| format!("expected <kW>:<kA>, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad bit width {v:?}: {e}"));
    Ok((parse(w)?, parse(a)?))
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let config = RunConfig::load(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| config.output.dir.clone());
        Ok((config, out))
    }
}

impl CalibArgs {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        let c = &mut config.calibration;
        if let Some((w, a)) = self.bits {
            c.weight_bits = w;
            c.act_bits = a;
        }
        if let Some(g) = self.groups {
            c.groups = g;
        }
        if let Some(n) = self.samples_per_group {
            c.samples_per_group = n;
        }
        if let Some(r) = self.rounds {
            c.rounds = r;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        config.validate()?;
        Ok(())
    }
}

fn open_checkpoint(path: &Path, config: &RunConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.model.config() != &config.model {
        bail!(
            "checkpoint {} was trained for {:?}, config describes {:?}",
            path.display(),
            ckpt.model.config(),
            config.model
        );
    }
    Ok(ckpt)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_train(common: &Common) -> Result<()> {
    let (mut config, out) = common.load()?;
    if let Some(seed) = common.seed {
        config.seeds.training = seed;
    }
    let schedule = config.schedule()?;
    let dataset = config.dataset()?;
    let (model, log) = train_fp(&config.model, &schedule, &dataset, &config.train, config.seeds.training)?;
    let digest = save_checkpoint(&model, &out.join("checkpoint"))?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &log.losses {
        csv.push_str(&format!("{step},{loss:e}\n"));
    }
    write_text(&out.join("train_log.csv"), &csv)?;
    write_text(&out.join("config.toml"), &config.to_toml())?;
    println!("checkpoint {} digest {digest}", out.join("checkpoint").display());
    Ok(())
}

fn cmd_calibrate(common: &Common, checkpoint: &Path, calib: &CalibArgs) -> Result<()> {
    let (mut config, out) = common.load()?;
    calib.apply(&mut config)?;
    let seed = common.seed.unwrap_or(config.seeds.calibration);
    let ckpt = open_checkpoint(checkpoint, &config)?;
    let schedule = config.schedule()?;
    let c = &config.calibration;
    let data = build_calib_dataset(
        &ckpt.model,
        &schedule,
        &config.dataset()?,
        c.groups,
        c.samples_per_group,
        c.mode,
        seed,
    )?;
    let stats = collect_layer_stats(&ckpt.model, &data)?;
    let (_, report) = calibrate(&ckpt.model, &stats, &c.options())?;
    let sidecar = QuantSidecar::new(&ckpt.digest, &data, seed, &report);
    sidecar.save(&out.join("sidecar.json"))?;
    write_text(&out.join("calibration_report.txt"), &report.to_text())?;
    println!(
        "W{}A{} mean objective {:e}; sidecar {} digest {}",
        c.weight_bits,
        c.act_bits,
        report.mean_objective(),
        out.join("sidecar.json").display(),
        sidecar.digest
    );
    Ok(())
}

fn quantized(ckpt: &Checkpoint, sidecar: Option<&Path>) -> Result<(QuantizedModel, Option<String>)> {
    match sidecar {
        None => Ok((QuantizedModel::new(ckpt.model.clone()), None)),
        Some(path) => {
            let s = QuantSidecar::load(path).with_context(|| format!("refusing sidecar {}", path.display()))?;
            Ok((s.apply(ckpt)?, Some(s.digest)))
        }
    }
}

fn cmd_generate(common: &Common, checkpoint: &Path, sidecar: Option<&Path>, num_samples: usize) -> Result<()> {
    let (config, out) = common.load()?;
    let seed = common.seed.unwrap_or(config.seeds.sampling);
    let ckpt = open_checkpoint(checkpoint, &config)?;
    let (qm, sidecar_digest) = quantized(&ckpt, sidecar)?;
    let c = &config.model;
    let samples = generate(&qm, &config.schedule()?, &c.image_shape(), c.num_classes, num_samples, seed)?;
    let labels: Vec<usize> = (0..num_samples).map(|i| trajectory_label(i, c.num_classes)).collect();
    let source = SampleSource {
        seed,
        checkpoint_digest: &ckpt.digest,
        sidecar_digest: sidecar_digest.as_deref(),
    };
    let digest = save_archive(&out, &samples, &labels, &source)?;
    println!("{num_samples} samples in {} digest {digest}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    archive: String,
    reference: String,
    toy_fd: f64,
    divergence: Option<Vec<f64>>,
    mean_divergence: Option<f64>,
}

fn cmd_evaluate(
    common: &Common,
    archive: &Path,
    reference: Option<&Path>,
    checkpoint: Option<&Path>,
    sidecar: Option<&Path>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut need = |p: &Path, what: &str| {
        if !p.exists() {
            missing.push(format!("{what} {}", p.display()));
        }
    };
    need(&common.config, "config");
    need(archive, "archive");
    for (p, what) in [(reference, "reference archive"), (checkpoint, "checkpoint"), (sidecar, "sidecar")] {
        if let Some(p) = p {
            need(p, what);
        }
    }
    if sidecar.is_some() && checkpoint.is_none() {
        missing.push("checkpoint (required with --sidecar)".into());
    }
    if !missing.is_empty() {
        bail!("missing inputs: {}", missing.join(", "));
    }

    let (config, out) = common.load()?;
    let samples = load_archive(archive)?.samples;
    let (reference_samples, reference_name) = match reference {
        Some(p) => (load_archive(p)?.samples, p.display().to_string()),
        None => (
            reference_set(&config.dataset()?, config.ablation.num_samples),
            "dataset".to_string(),
        ),
    };
    let toy_fd = toy_frechet(&samples, &reference_samples, config.seeds.projection)?;
    let divergence = match checkpoint {
        Some(ckpt_path) => {
            let ckpt = open_checkpoint(ckpt_path, &config)?;
            let (qm, _) = quantized(&ckpt, sidecar)?;
            let seed = common.seed.unwrap_or(config.seeds.sampling);
            Some(trajectory_divergence(
                &ckpt.model,
                &qm,
                &config.schedule()?,
                config.ablation.num_trajectories,
                seed,
            )?)
        }
        None => None,
    };
    let mean_divergence = divergence
        .as_ref()
        .map(|d| d.iter().sum::<f64>() / d.len().max(1) as f64);
    let report = Evaluation {
        archive: archive.display().to_string(),
        reference: reference_name,
        toy_fd,
        divergence,
        mean_divergence,
    };
    let mut csv = format!("metric,value\ntoy_fd,{toy_fd:e}\n");
    let mut text = format!("toy-FD {} vs {}: {toy_fd:.6e}\n", report.archive, report.reference);
    if let Some(m) = mean_divergence {
        csv.push_str(&format!("mean_divergence,{m:e}\n"));
        text.push_str(&format!("mean trajectory divergence: {m:.6e}\n"));
    }
    write_text(&out.join("evaluation.csv"), &csv)?;
    write_text(&out.join("evaluation.json"), &json(&report))?;
    write_text(&out.join("evaluation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(common: &Common, checkpoint: &Path, calib: &CalibArgs) -> Result<()> {
    let (mut config, out) = common.load()?;
    calib.apply(&mut config)?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => config.ablation.seeds.clone(),
    };
    let ckpt = open_checkpoint(checkpoint, &config)?;
    let table = run_ablation(
        &ckpt.model,
        &config.schedule()?,
        &config.dataset()?,
        &AblationConfig::ladder(),
        &seeds,
        &config.ablation_settings(),
    )?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_text(&out.join("ablation.json"), &json(&table))?;
    let text = table.to_text();
    write_text(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{WORKERS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_workers()?;
    match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Calibrate { common, checkpoint, calib } => cmd_calibrate(common, checkpoint, calib),
        Command::Generate { common, checkpoint, sidecar, num_samples } => {
            cmd_generate(common, checkpoint, sidecar.as_deref(), *num_samples)
        }
        Command::Evaluate { common, archive, reference, checkpoint, sidecar } => cmd_evaluate(
            common,
            archive,
            reference.as_deref(),
            checkpoint.as_deref(),
            sidecar.as_deref(),
        ),
        Command::Ablate { common, checkpoint, calib } => cmd_ablate(common, checkpoint, calib),
    }
}
