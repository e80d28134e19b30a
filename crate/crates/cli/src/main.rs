//! `bdgd` command-line interface.
//!
//! Every command works on a run directory (`--out`, default `run`). The
//! resolved configuration is written to `<out>/config.txt`; later commands
//! reuse it unless `--config` points elsewhere.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bdgd_core::experiment::{
    decompose, evaluate, generate_data, masked_mean, reconstruct_method, save_mask, train_method, wedge_bands, write_config,
    DecomposeTarget, ExperimentConfig, GeometryPreset, Method, RunLayout,
};
use bdgd_core::inference::save_uncertainty_maps;
use bdgd_core::tomo::save_image;

#[derive(Parser)]
#[command(name = "bdgd", version, about = "Unrolled Bayesian gradient-descent CT reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training and Monte-Carlo inference.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for phantoms and measurement noise.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Sparse-view setting with this many directions.
    #[arg(long, conflicts_with = "angle_range")]
    dirs: Option<usize>,
    /// Limited-angle setting `START:END` in degrees.
    #[arg(long, value_name = "A:B")]
    angle_range: Option<String>,
    /// Monte-Carlo samples.
    #[arg(long = "T", value_name = "N")]
    samples: Option<usize>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/validation/test splits and the Shepp–Logan record.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a learned method (dgd, bdgd, bdgd+) block by block.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Reconstruct the test split with a method (fbp, tv, dgd, bdgd, bdgd+).
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Tabulate PSNR of stored reconstructions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods; defaults to all five.
        #[arg(long)]
        method: Option<String>,
    },
    /// Aleatoric/epistemic uncertainty maps for one input.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "bdgd+")]
        method: String,
        /// Test sample index.
        #[arg(long, conflicts_with = "text")]
        sample: Option<usize>,
        /// Overlay this text on the Shepp–Logan phantom.
        #[arg(long)]
        text: Option<String>,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, RunLayout)> {
    let layout = RunLayout::new(&common.out);
    let stored = layout.config();
    let mut cfg = match (&common.config, stored.exists()) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, true) => ExperimentConfig::load(&stored)?,
        (None, false) => ExperimentConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.data_seed {
        cfg.data_seed = s;
    }
    if let Some(d) = common.dirs {
        cfg.geometry = GeometryPreset::SparseView { directions: d };
    }
    if let Some(r) = &common.angle_range {
        let (a, b) = r
            .split_once(':')
            .with_context(|| format!("--angle-range expects START:END in degrees, got {r:?}"))?;
        cfg.geometry = GeometryPreset::LimitedAngle {
            start: a.trim().parse().with_context(|| format!("bad angle {a:?}"))?,
            end: b.trim().parse().with_context(|| format!("bad angle {b:?}"))?,
        };
    }
    if let Some(t) = common.samples {
        cfg.samples = t;
    }
    cfg.validate()?;
    write_config(&cfg, &layout)?;
    Ok((cfg, layout))
}

fn learned(method: &str) -> Result<Method> {
    let m = Method::parse(method)?;
    if m.mode().is_none() {
        bail!("`{}` has no trainable parameters; choose dgd, bdgd or bdgd+", m.name());
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common } => {
            let (cfg, layout) = resolve(&common)?;
            generate_data(&cfg, &layout)?;
            println!(
                "wrote {} train / {} validation / {} test records to {}",
                cfg.train_count,
                cfg.validation_count,
                cfg.test_count,
                layout.data.display()
            );
        }
        Command::Train { common, method } => {
            let (cfg, layout) = resolve(&common)?;
            let m = learned(&method)?;
            let report = train_method(&cfg, &layout, m, |_| {})?;
            if report.resumed_blocks > 0 {
                println!("resumed {} trained blocks", report.resumed_blocks);
            }
            println!("checkpoint: {}", layout.checkpoint(m).display());
        }
        Command::Reconstruct { common, method } => {
            let (cfg, layout) = resolve(&common)?;
            let m = Method::parse(&method)?;
            reconstruct_method(&cfg, &layout, m)?;
            println!("reconstructions: {}", layout.recon_dir(m).display());
        }
        Command::Evaluate { common, method } => {
            let (cfg, layout) = resolve(&common)?;
            let methods = match method {
                Some(list) => list.split(',').map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>, _>>()?,
                None => Method::ALL.to_vec(),
            };
            let table = evaluate(&cfg, &layout, &methods)?;
            print!("{}", table.to_text());
        }
        Command::Decompose {
            common,
            method,
            sample,
            text,
        } => {
            let (cfg, layout) = resolve(&common)?;
            let m = learned(&method)?;
            let (target, name) = match (sample, text) {
                (Some(i), _) => (DecomposeTarget::Test(i), format!("test_{i:05}")),
                (None, Some(t)) => (DecomposeTarget::Text(t), "text".to_string()),
                (None, None) => (DecomposeTarget::SheppLogan, "shepp_logan".to_string()),
            };
            let d = decompose(&cfg, &layout, m, &target)?;
            let dir = layout.decompose_dir(m, &name);
            save_uncertainty_maps(&d.result, &dir)?;
            save_image(&d.record.truth, dir.join("truth.bdgd"))?;
            report_maps(&d, &cfg.geometry, &dir)?;
        }
    }
    Ok(())
}

fn report_maps(d: &bdgd_core::experiment::Decomposition, geometry: &GeometryPreset, dir: &Path) -> Result<()> {
    let r = &d.result;
    println!("maps ({} samples): {}", r.samples, dir.display());
    println!(
        "mean aleatoric {:.6e}  mean epistemic {:.6e}  mean total {:.6e}",
        r.aleatoric.mean(),
        r.epistemic.mean(),
        r.total.mean()
    );
    if let Some(mask) = &d.mask {
        save_mask(mask, r.mean.size(), dir.join("mask.bdgd"))?;
        println!(
            "epistemic inside text {:.6e}  outside {:.6e}",
            masked_mean(&r.epistemic, mask, true),
            masked_mean(&r.epistemic, mask, false)
        );
    }
    if let GeometryPreset::LimitedAngle { start, end } = *geometry {
        let (missing, in_view) = wedge_bands(r.mean.size(), start, end);
        println!(
            "total variance in missing-wedge band {:.6e}  in-view band {:.6e}",
            masked_mean(&r.total, &missing, true),
            masked_mean(&r.total, &in_view, true)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
