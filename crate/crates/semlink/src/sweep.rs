//! Experiment sweeps over the reference-signal budget (L), feedback bits
//! (B), transmit symbols (Q), and SNR: per point, pretrain what the point
//! needs (with cache reuse where a stage does not depend on the axis),
//! jointly train, and evaluate on the held-out test split.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{fnv64_hex, ExperimentConfig};
use crate::error::{Error, Result};
use crate::trainer::{
    eval_joint, make_task_data, ChannelData, ChannelSplit, EvalMetrics, Models, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    CsirsSymbols,
    FeedbackBits,
    DataSymbols,
    SnrDb,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l" | "csirs" | "csirs_symbols" => Ok(SweepAxis::CsirsSymbols),
            "b" | "bits" | "feedback_bits" => Ok(SweepAxis::FeedbackBits),
            "q" | "symbols" | "data_symbols" => Ok(SweepAxis::DataSymbols),
            "snr" | "snr_db" => Ok(SweepAxis::SnrDb),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::CsirsSymbols => "L",
            SweepAxis::FeedbackBits => "B",
            SweepAxis::DataSymbols => "Q",
            SweepAxis::SnrDb => "snr",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        let as_dim = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::config("values", format!("{v} is not a positive integer")));
            }
            Ok(v as usize)
        };
        match self {
            SweepAxis::CsirsSymbols => cfg.csirs_symbols = as_dim(value)?,
            SweepAxis::FeedbackBits => cfg.feedback_bits = as_dim(value)?,
            SweepAxis::DataSymbols => cfg.data_symbols = as_dim(value)?,
            SweepAxis::SnrDb => cfg.snr_db = value,
        }
        cfg.validate()
    }
}

/// Cache key for stage-1 training: everything the semantic nets see.
pub fn sem_signature(cfg: &ExperimentConfig, seed: u64) -> String {
    let v = json!({
        "task": cfg.task,
        "model": cfg.model,
        "n_rf_tx": cfg.n_rf_tx,
        "n_rf_rx": cfg.n_rf_rx,
        "subcarriers": cfg.subcarriers,
        "data_symbols": cfg.data_symbols,
        "transmission": cfg.transmission,
        "stage1": cfg.training.stage1,
        "patience": cfg.training.patience,
        "seed": seed,
    });
    fnv64_hex(v.to_string().as_bytes())
}

/// Cache key for stage-2 training: everything the physical nets see.
pub fn phy_signature(cfg: &ExperimentConfig, seed: u64) -> String {
    let v = json!({
        "users": cfg.users,
        "n_tx": cfg.n_tx,
        "n_rx": cfg.n_rx,
        "n_rf_tx": cfg.n_rf_tx,
        "n_rf_rx": cfg.n_rf_rx,
        "subcarriers": cfg.subcarriers,
        "csirs_symbols": cfg.csirs_symbols,
        "feedback_bits": cfg.feedback_bits,
        "data_symbols": cfg.data_symbols,
        "snr_db": cfg.snr_db,
        "physics": cfg.physics,
        "model": cfg.model,
        "channels": cfg.channels,
        "stage2": cfg.training.stage2,
        "patience": cfg.training.patience,
        "seed": seed,
    });
    fnv64_hex(v.to_string().as_bytes())
}

/// Full outcome of one sweep point.
pub struct PointOutcome {
    /// Test metrics of the merged stage-1/2 initialization, before any
    /// joint training, evaluated through the real channel.
    pub init: EvalMetrics,
    /// Test metrics of the jointly trained model.
    pub trained: EvalMetrics,
    pub ckpt: PathBuf,
}

/// Train (or reuse) stages 1 and 2, then stage 3, for one configuration.
/// Returns test-split metrics and the stage-3 checkpoint directory.
pub fn run_point(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    point_tag: &str,
) -> Result<(EvalMetrics, PathBuf)> {
    let out = run_point_detailed(cfg, seed, out_root, point_tag)?;
    Ok((out.trained, out.ckpt))
}

pub fn run_point_detailed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    point_tag: &str,
) -> Result<PointOutcome> {
    let cache = out_root.join("cache");
    let s1_dir = cache.join(format!("stage1_{}", sem_signature(cfg, seed)));
    let s1_best = s1_dir.join("stage1").join("best");
    if !s1_best.join("manifest.json").exists() {
        let t = Trainer::new(cfg.clone(), seed, &s1_dir);
        t.stage1()?;
    }
    let s2_dir = cache.join(format!("stage2_{}", phy_signature(cfg, seed)));
    let s2_best = s2_dir.join("stage2").join("best");
    if !s2_best.join("manifest.json").exists() {
        let t = Trainer::new(cfg.clone(), seed, &s2_dir);
        t.stage2()?;
    }
    let models = Models::new(cfg)?;
    let task = make_task_data(cfg, seed);
    let chans = ChannelData::new(cfg, seed)?;
    let threads = crate::trainer::worker_threads();
    let init = {
        let (sem, _) = crate::trainer::checkpoint::load_checkpoint(&s1_best)?;
        let (phy, _) = crate::trainer::checkpoint::load_checkpoint(&s2_best)?;
        let mut store = sem;
        store.absorb(phy);
        eval_joint(
            &store,
            &models,
            cfg,
            &task.test,
            &chans,
            ChannelSplit::Test,
            seed,
            threads,
        )?
    };
    let point_dir = out_root.join("points").join(point_tag);
    let trainer = Trainer::new(cfg.clone(), seed, &point_dir);
    let s3 = trainer.stage3(&s1_best, &s2_best)?;
    let trained = eval_joint(
        &s3.store,
        &models,
        cfg,
        &task.test,
        &chans,
        ChannelSplit::Test,
        seed,
        trainer.threads,
    )?;
    Ok(PointOutcome {
        init,
        trained,
        ckpt: s3.best_dir,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub miou: f64,
    pub pixel_acc: f64,
    pub eta: f64,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "axis,value,seed,miou,pixel_acc,eta,status";

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.axis, r.value, r.seed, r.miou, r.pixel_acc, r.eta, r.status
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Run every axis value; a failing point is recorded and the sweep
/// continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        let row = match axis.apply(&mut cfg, value) {
            Err(e) => SweepRow {
                axis: axis.name().into(),
                value,
                seed,
                miou: f64::NAN,
                pixel_acc: f64::NAN,
                eta: f64::NAN,
                status: format!("error: {e}"),
            },
            Ok(()) => {
                let tag = format!("{}_{}_seed{}", axis.name(), value, seed);
                match run_point(&cfg, seed, out_dir, &tag) {
                    Ok((em, _)) => SweepRow {
                        axis: axis.name().into(),
                        value,
                        seed,
                        miou: em.miou,
                        pixel_acc: em.pixel_acc,
                        eta: em.eta,
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        axis: axis.name().into(),
                        value,
                        seed,
                        miou: f64::NAN,
                        pixel_acc: f64::NAN,
                        eta: f64::NAN,
                        status: format!("error: {e}"),
                    },
                }
            }
        };
        rows.push(row);
    }
    write_sweep_csv(&out_dir.join(format!("sweep_{}_seed{}.csv", axis.name(), seed)), &rows)?;
    Ok(rows)
}
