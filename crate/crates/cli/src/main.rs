use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand};
use vcp_core::backbone::{BackboneConfig, MixTransformer};
use vcp_core::config::Config;
use vcp_core::data::{self, ToyConfig};
use vcp_core::harness;
use vcp_core::metrics;

#[derive(Parser)]
#[command(name = "vcp", version, about = "Prompt-tuned co-salient object detection on a frozen encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tunable modules; writes a checkpoint and a loss log to `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        img_root: PathBuf,
        #[arg(long)]
        gt_root: PathBuf,
        /// Frozen encoder weights (safetensors).
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict maps for one group directory, or for every group under it.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        group_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the encoder path recorded in the checkpoint.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Fails unless the checkpoint was trained with this model configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score prediction PNGs against masks; optionally write CSV reports.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "dataset")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tunable parameter budget of a configuration.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic shapes dataset as `<out>/images` and `<out>/gt`.
    MakeToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        groups: usize,
        #[arg(long, default_value_t = 12)]
        images_per_group: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Index of the first group; use 6 or more for unseen groups.
        #[arg(long, default_value_t = 0)]
        first_group: usize,
        #[arg(long)]
        no_distractors: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write randomly initialised encoder weights (for smoke runs without a download).
    InitBackbone {
        #[arg(long, default_value = "tiny", help = "tiny or mit_b4")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete configuration file.
    PrintConfig {
        /// The small setup used with the toy dataset.
        #[arg(long)]
        toy: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn train(
    config: Option<&Path>,
    img_root: &Path,
    gt_root: &Path,
    backbone: &Path,
    out: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if steps.is_some() {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let device = Device::Cpu;
    let dtype = cfg.train.precision.dtype();
    let groups = data::scan_dataset(img_root, gt_root)?;
    log::info!("{} groups, {} images", groups.len(), groups.iter().map(|g| g.len()).sum::<usize>());
    let bb = MixTransformer::load(backbone, &cfg.model.backbone, dtype, &device)
        .with_context(|| format!("loading encoder weights {}", backbone.display()))?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let outcome = harness::train(&cfg, &groups, &bb, &device, |_| {})?;
    harness::write_loss_log(&out.join("loss.csv"), &outcome.log)?;
    let ckpt = out.join("checkpoint.safetensors");
    let bb_path = std::fs::canonicalize(backbone).unwrap_or_else(|_| backbone.to_path_buf());
    harness::save_checkpoint(&ckpt, &outcome.model, &cfg, outcome.steps, Some(&bb_path.to_string_lossy()))?;
    let size = std::fs::metadata(&ckpt)?.len();
    println!(
        "trained {} steps; checkpoint {} ({:.2} MB)",
        outcome.steps,
        ckpt.display(),
        size as f64 / 1e6
    );
    Ok(())
}

fn infer(ckpt: &Path, group_dir: &Path, out: &Path, backbone: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let device = Device::Cpu;
    let expected = config.map(|p| load_config(Some(p))).transpose()?;
    let (meta, model) = {
        let (meta, _) = harness::read_checkpoint(ckpt, &device)?;
        let dtype = meta.config.train.precision.dtype();
        harness::load_model(ckpt, expected.as_ref(), dtype, &device)?
    };
    let bb_path = match (backbone, &meta.backbone) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("checkpoint does not record its encoder; pass --backbone"),
    };
    let bb = MixTransformer::load(&bb_path, &meta.config.model.backbone, model.dtype(), &device)
        .with_context(|| format!("loading encoder weights {}", bb_path.display()))?;
    let size = meta.config.train.input_size;
    let chunk = meta.config.train.chunk_size;
    let mut subgroups: Vec<PathBuf> = std::fs::read_dir(group_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subgroups.sort();
    let written = if subgroups.is_empty() {
        harness::infer_group(&model, &bb, group_dir, out, size, chunk)?.len()
    } else {
        let mut n = 0;
        for g in &subgroups {
            let name = g.file_name().expect("directory entry has a name");
            n += harness::infer_group(&model, &bb, g, &out.join(name), size, chunk)?.len();
        }
        n
    };
    println!("wrote {written} maps to {}", out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, name: &str, out: Option<&Path>) -> Result<()> {
    let eval = metrics::evaluate_dataset(pred, gt, name)?;
    let r = &eval.record;
    println!("dataset  images  S_m     E_m     E_max   F_m     F_max   MAE");
    println!(
        "{:<8} {:>6}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
        eval.name, r.images, r.s_m, r.e_m, r.e_m_max, r.f_m, r.f_m_max, r.mae
    );
    if let Some(out) = out {
        metrics::write_reports(out, &eval)?;
        println!("reports written to {}", out.display());
    }
    Ok(())
}

fn make_toy(cfg: ToyConfig, out: &Path) -> Result<()> {
    data::synthesize_toy_dataset(out, &cfg)?;
    println!(
        "wrote {} groups x {} images to {}",
        cfg.groups,
        cfg.images_per_group,
        out.display()
    );
    Ok(())
}

fn init_backbone(preset: &str, seed: u64, out: &Path) -> Result<()> {
    let cfg = BackboneConfig::preset(preset)?;
    let bb = MixTransformer::random(&cfg, seed, candle_core::DType::F32, &Device::Cpu)?;
    bb.save(out)?;
    println!("wrote {} random encoder parameters to {}", bb.num_params(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            img_root,
            gt_root,
            backbone,
            out,
            steps,
        } => train(config.as_deref(), &img_root, &gt_root, &backbone, &out, steps),
        Command::Infer {
            ckpt,
            group_dir,
            out,
            backbone,
            config,
        } => infer(&ckpt, &group_dir, &out, backbone.as_deref(), config.as_deref()),
        Command::Eval { pred, gt, name, out } => eval(&pred, &gt, &name, out.as_deref()),
        Command::Params { config } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            print!("{}", harness::report_params(&cfg.model)?);
            Ok(())
        }
        Command::MakeToy {
            seed,
            groups,
            images_per_group,
            size,
            first_group,
            no_distractors,
            out,
        } => make_toy(
            ToyConfig {
                seed,
                groups,
                images_per_group,
                size,
                distractors: !no_distractors,
                first_group,
            },
            &out,
        ),
        Command::InitBackbone { preset, seed, out } => init_backbone(&preset, seed, &out),
        Command::PrintConfig { toy } => {
            let cfg = if toy { harness::toy_config() } else { Config::default() };
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}
