//! Experiment harness: dataset/channel generation, staged training,
//! evaluation, classical baselines, and axis sweeps.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use semlink::baselines::{pca_combiner, pca_precoder, svd_bound};
use semlink::channel::{assemble_channel, sample_paths};
use semlink::config::{ExperimentConfig, Transmission, TRANSMIT_POWER};
use semlink::error::{Error, Result};
use semlink::phynet::spectral_efficiency_value;
use semlink::rng::RngStream;
use semlink::sweep::{run_sweep, SweepAxis};
use semlink::trainer::checkpoint::load_checkpoint;
use semlink::trainer::{
    eval_identity, eval_joint, eval_rate, make_task_data, train_dmrs_baseline, ChannelData,
    ChannelSplit, Models, Trainer,
};

#[derive(Parser)]
#[command(
    name = "semlink",
    about = "Link-level simulator for learned massive MIMO-OFDM semantic transmission",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Pca,
    Dmrs,
    SvdBound,
    Orthogonal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate channel drops and write them as a binary blob + manifest.
    GenChannels {
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of drops (defaults to the training-channel count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generate the synthetic multimodal dataset (train+val+test samples).
    GenDataset {
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint (stage 3 only; default <out>/stage1/best).
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        /// Stage-2 checkpoint (stage 3 only; default <out>/stage2/best).
        #[arg(long)]
        stage2_ckpt: Option<PathBuf>,
        /// Initialize from this stage's existing best checkpoint.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run a classical reference scheme.
    Baseline {
        #[arg(long, value_enum)]
        which: BaselineKind,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one experiment axis, training each point.
    Sweep {
        /// Axis: L, B, Q or snr.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. 1,2,4,8.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a configuration preset as JSON.
    ShowConfig {
        #[arg(long, default_value = "desk")]
        config: String,
    },
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    match spec {
        "desk" => Ok(ExperimentConfig::desk()),
        "paper" => Ok(ExperimentConfig::paper()),
        path => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_string(), e))?;
            ExperimentConfig::from_json_bytes(&bytes)
        }
    }
}

fn cmd_gen_channels(cfg: &ExperimentConfig, seed: u64, out: &Path, count: Option<usize>) -> Result<()> {
    let phys = cfg.channel_physics();
    let n = count.unwrap_or(cfg.channels.train);
    let base = RngStream::derive(seed, "channel-train");
    let sets = (0..n)
        .map(|i| {
            let mut rng = base.substream(i as u64);
            let paths = sample_paths(&phys, &mut rng)?;
            assemble_channel(&paths, &phys, cfg.total_symbols(), cfg.noise_var())
        })
        .collect::<Result<Vec<_>>>()?;
    semlink::io::export_channels(out, cfg, seed, &sets)?;
    println!("wrote {n} channel drops to {}", out.display());
    Ok(())
}

fn cmd_gen_dataset(cfg: &ExperimentConfig, seed: u64, out: &Path, count: Option<usize>) -> Result<()> {
    let n = count.unwrap_or(cfg.task.train_samples + cfg.task.val_samples + cfg.task.test_samples);
    let samples: Vec<_> = (0..n)
        .map(|i| semlink::semnet::sample_at(seed, i as u64, cfg))
        .collect();
    semlink::io::export_dataset(out, cfg, seed, &samples)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    stage: u8,
    s1: Option<PathBuf>,
    s2: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let trainer = Trainer::new(cfg.clone(), seed, out);
    let resume_store = |tag: &str| -> Result<Option<semlink::numcore::ParamStore>> {
        if !resume {
            return Ok(None);
        }
        let best = out.join(tag).join("best");
        if !best.join("manifest.json").exists() {
            return Ok(None);
        }
        let (store, manifest) = load_checkpoint(&best)?;
        let want = match tag {
            "stage1" => cfg.sem_compat_hash(),
            "stage2" => cfg.phy_compat_hash(),
            _ => cfg.arch_hash(),
        };
        if manifest.config_hash != want {
            return Err(Error::manifest(
                tag.to_string(),
                "resume checkpoint was trained under a different configuration",
            ));
        }
        Ok(Some(store))
    };
    let outcome = match stage {
        1 => trainer.stage1_init(resume_store("stage1")?)?,
        2 => trainer.stage2_init(resume_store("stage2")?)?,
        3 => {
            if let Some(store) = resume_store("stage3")? {
                trainer.stage3_with_store(store)?
            } else {
                let p1 = s1.unwrap_or_else(|| out.join("stage1").join("best"));
                let p2 = s2.unwrap_or_else(|| out.join("stage2").join("best"));
                trainer.stage3(&p1, &p2)?
            }
        }
        other => {
            return Err(Error::config("stage", format!("unknown stage {other}, expected 1|2|3")))
        }
    };
    println!(
        "stage {stage} done: best validation metric {:.6}, checkpoint at {}, metrics at {}",
        outcome.best_metric,
        outcome.best_dir.display(),
        outcome.metrics_path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, seed: u64, ckpt: &Path) -> Result<()> {
    let (store, manifest) = load_checkpoint(ckpt)?;
    let want = match manifest.stage.as_str() {
        "stage1" => cfg.sem_compat_hash(),
        "stage2" => cfg.phy_compat_hash(),
        _ => cfg.arch_hash(),
    };
    if manifest.config_hash != want {
        return Err(Error::manifest(
            "config_hash",
            "checkpoint was trained under a different configuration",
        ));
    }
    let models = Models::new(cfg)?;
    let task = make_task_data(cfg, seed);
    let threads = semlink::trainer::worker_threads();
    let has_phy = store.names().any(|n| n.starts_with("phy."));
    let has_sem = store.names().any(|n| n.starts_with("sem."));
    if has_phy && has_sem {
        let chans = ChannelData::new(cfg, seed)?;
        let em = eval_joint(&store, &models, cfg, &task.test, &chans, ChannelSplit::Test, seed, threads)?;
        println!(
            "joint eval: miou {:.4}, pixel_acc {:.4}, eta {:.3}, per-class IoU {:?}",
            em.miou,
            em.pixel_acc,
            em.eta,
            em.per_class_iou.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    } else if has_sem {
        let em = eval_identity(&store, &models, cfg, &task.test, threads)?;
        println!(
            "identity-channel eval: miou {:.4}, pixel_acc {:.4}",
            em.miou, em.pixel_acc
        );
    } else if has_phy {
        let chans = ChannelData::new(cfg, seed)?;
        let eta = eval_rate(&store, &models, cfg, &chans, ChannelSplit::Test, seed, threads)?;
        println!("rate eval: mean eta {eta:.3} per drop");
    } else {
        return Err(Error::manifest("params", "checkpoint holds no recognizable parameters"));
    }
    Ok(())
}

fn cmd_baseline(cfg: &ExperimentConfig, seed: u64, out: &Path, which: BaselineKind) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    match which {
        BaselineKind::SvdBound | BaselineKind::Pca => {
            let chans = ChannelData::new(cfg, seed)?;
            let rho = TRANSMIT_POWER / cfg.noise_var();
            let mut csv = String::from("sample,eta\n");
            let n = chans.count(ChannelSplit::Val);
            let mut mean = 0.0;
            for i in 0..n {
                let ch = chans.drop_at(ChannelSplit::Val, i)?;
                let eta = match which {
                    BaselineKind::SvdBound => svd_bound(
                        &ch,
                        cfg.csirs_symbols,
                        cfg.data_symbols,
                        rho,
                        cfg.n_rf_rx.min(cfg.n_rf_tx),
                    ),
                    _ => {
                        let w = pca_combiner(&ch, 0, cfg.csirs_symbols, cfg.n_rf_rx)?;
                        let fs = (0..cfg.users)
                            .map(|k| pca_precoder(&ch, k, 0, cfg.csirs_symbols, cfg.n_rf_tx))
                            .collect::<Result<Vec<_>>>()?;
                        spectral_efficiency_value(
                            &w,
                            &fs,
                            &ch,
                            cfg.csirs_symbols,
                            cfg.data_symbols,
                            rho,
                        )?
                    }
                };
                mean += eta / n as f64;
                csv.push_str(&format!("{i},{eta:.6}\n"));
            }
            let name = if which == BaselineKind::SvdBound {
                "svd_bound.csv"
            } else {
                "pca.csv"
            };
            let path = out.join(name);
            std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("mean eta {mean:.3} over {n} drops; per-sample CSV at {}", path.display());
        }
        BaselineKind::Dmrs => {
            let trainer = Trainer::new(cfg.clone(), seed, out);
            let outcome = train_dmrs_baseline(&trainer)?;
            semlink::trainer::write_metrics_csv(&out.join("baseline_metrics.csv"), &outcome.rows)?;
            println!(
                "dmrs baseline test miou {:.4}, pixel_acc {:.4}",
                outcome.test_metrics.miou, outcome.test_metrics.pixel_acc
            );
        }
        BaselineKind::Orthogonal => {
            let mut ocfg = cfg.clone();
            ocfg.transmission = Transmission::Orthogonal;
            let (em, ckpt) = semlink::sweep::run_point(&ocfg, seed, out, "orthogonal")?;
            println!(
                "orthogonal variant test miou {:.4}, pixel_acc {:.4}, eta {:.3}; checkpoint at {}",
                em.miou,
                em.pixel_acc,
                em.eta,
                ckpt.display()
            );
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, seed: u64, out: &Path, axis: &str, values: &str) -> Result<()> {
    let axis = SweepAxis::parse(axis)?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::config("values", format!("`{v}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = run_sweep(cfg, axis, &values, seed, out)?;
    for r in &rows {
        println!(
            "{} = {:>6}: miou {:.4}, eta {:.3} [{}]",
            r.axis, r.value, r.miou, r.eta, r.status
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenChannels { config, seed, out, count } => {
            cmd_gen_channels(&load_config(&config)?, seed, &out, count)
        }
        Command::GenDataset { config, seed, out, count } => {
            cmd_gen_dataset(&load_config(&config)?, seed, &out, count)
        }
        Command::Train { stage, config, seed, out, stage1_ckpt, stage2_ckpt, resume } => {
            cmd_train(&load_config(&config)?, seed, &out, stage, stage1_ckpt, stage2_ckpt, resume)
        }
        Command::Eval { ckpt, config, seed } => cmd_eval(&load_config(&config)?, seed, &ckpt),
        Command::Baseline { which, config, seed, out } => {
            cmd_baseline(&load_config(&config)?, seed, &out, which)
        }
        Command::Sweep { axis, values, config, seed, out } => {
            cmd_sweep(&load_config(&config)?, seed, &out, &axis, &values)
        }
        Command::ShowConfig { config } => {
            println!("{}", load_config(&config)?.to_json_pretty());
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
