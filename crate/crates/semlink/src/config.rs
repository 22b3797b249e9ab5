//! Experiment configuration: one JSON document is the single source of
//! truth for a run. Parsing is strict (unknown keys rejected) and validated
//! before use.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelPhysics, OfdmConfig};
use crate::error::{Error, Result};

/// Transmit power; the SNR axis is defined as P_t / sigma^2 with P_t = 1.
pub const TRANSMIT_POWER: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transmission {
    /// All users share every time-frequency resource; signals superpose at
    /// the receive array.
    NonOrthogonal,
    /// Users split the resource grid and the receiver concatenates their
    /// features.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub cyclic_prefix_samples: usize,
    pub v_max_kmh: f64,
    /// Maximum path delay in units of the OFDM sample interval.
    pub tau_max_samples: f64,
    pub paths_min: usize,
    pub paths_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel-semantic feature width (per subcarrier).
    pub d_csi: usize,
    pub d_model: usize,
    pub tf_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Source-feature channels.
    pub d_s: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Channel-feature embedding width inside the fusion gate.
    pub d_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub pixel_noise_std: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDataConfig {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub stage3: StageParams,
    /// Early-stop patience (epochs without validation improvement).
    pub patience: usize,
    pub grad_clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of transmitting UEs (the multimodal task uses exactly 2).
    pub users: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_rf_tx: usize,
    pub n_rf_rx: usize,
    pub subcarriers: usize,
    /// Reference-signal OFDM symbols (L).
    pub csirs_symbols: usize,
    /// Feedback bits per user (B).
    pub feedback_bits: usize,
    /// Data OFDM symbols (Q).
    pub data_symbols: usize,
    pub snr_db: f64,
    /// Reference-signal reception SNR; defaults to `snr_db` when absent.
    #[serde(default)]
    pub pilot_snr_db: Option<f64>,
    pub transmission: Transmission,
    pub seed: u64,
    pub physics: PhysicsConfig,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub channels: ChannelDataConfig,
    pub training: TrainingConfig,
    pub runs_dir: String,
}

impl ExperimentConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU while
    /// keeping every architectural element in play.
    pub fn desk() -> Self {
        ExperimentConfig {
            users: 2,
            n_tx: 4,
            n_rx: 16,
            n_rf_tx: 2,
            n_rf_rx: 2,
            subcarriers: 16,
            csirs_symbols: 4,
            feedback_bits: 64,
            data_symbols: 2,
            snr_db: 20.0,
            pilot_snr_db: None,
            transmission: Transmission::NonOrthogonal,
            seed: 1,
            // Delay spread tracks the published numerology as a fraction
            // of the OFDM window (16 of 100 subcarrier-samples), so the
            // frequency coherence spans ~6 subcarriers at either scale.
            physics: PhysicsConfig {
                carrier_hz: 28e9,
                subcarrier_spacing_hz: 120e3,
                cyclic_prefix_samples: 4,
                v_max_kmh: 120.0,
                tau_max_samples: 2.5,
                paths_min: 3,
                paths_max: 6,
            },
            model: ModelConfig {
                d_csi: 8,
                d_model: 32,
                tf_layers: 2,
                n_heads: 4,
                d_ff: 64,
                d_s: 16,
                feat_h: 4,
                feat_w: 4,
                d_c: 8,
            },
            task: TaskConfig {
                img_h: 32,
                img_w: 32,
                classes: 4,
                shapes_min: 1,
                shapes_max: 3,
                pixel_noise_std: 0.05,
                train_samples: 512,
                val_samples: 64,
                test_samples: 64,
            },
            channels: ChannelDataConfig {
                train: 2000,
                val: 200,
            },
            // Desk-scale nets want a larger step than the published-scale
            // 1e-4 default; the paper preset restores it.
            training: TrainingConfig {
                stage1: StageParams {
                    epochs: 30,
                    batch_size: 16,
                    lr: 1e-3,
                },
                stage2: StageParams {
                    epochs: 15,
                    batch_size: 128,
                    lr: 1e-3,
                },
                stage3: StageParams {
                    epochs: 40,
                    batch_size: 16,
                    lr: 1e-3,
                },
                patience: 10,
                grad_clip_norm: 1.0,
            },
            runs_dir: "runs".to_string(),
        }
    }

    /// Published-scale dimensions. Shipped for reference; training at this
    /// scale needs GPU-class hardware and is not exercised by the test
    /// suite. The feature grid is 15x20 (the nearest power-of-two spatial
    /// reduction of 480x640) rather than 10x10.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.n_tx = 8;
        cfg.n_rx = 64;
        cfg.subcarriers = 100;
        cfg.csirs_symbols = 8;
        cfg.feedback_bits = 1024;
        cfg.data_symbols = 4;
        cfg.snr_db = -25.0;
        cfg.pilot_snr_db = None;
        cfg.physics.tau_max_samples = 16.0;
        cfg.physics.cyclic_prefix_samples = 25;
        cfg.model.d_csi = 16;
        cfg.model.d_s = 64;
        cfg.model.feat_h = 15;
        cfg.model.feat_w = 20;
        cfg.model.d_c = 16;
        cfg.task.img_h = 480;
        cfg.task.img_w = 640;
        cfg.task.classes = 9;
        cfg.task.train_samples = 784;
        cfg.task.val_samples = 392;
        cfg.task.test_samples = 393;
        cfg.training.stage1.lr = 1e-4;
        cfg.training.stage2.lr = 1e-4;
        cfg.training.stage3.lr = 1e-4;
        cfg
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 14] = [
            ("users", self.users),
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("n_rf_tx", self.n_rf_tx),
            ("n_rf_rx", self.n_rf_rx),
            ("subcarriers", self.subcarriers),
            ("csirs_symbols", self.csirs_symbols),
            ("feedback_bits", self.feedback_bits),
            ("data_symbols", self.data_symbols),
            ("model.d_csi", self.model.d_csi),
            ("model.d_model", self.model.d_model),
            ("model.d_s", self.model.d_s),
            ("task.classes", self.task.classes),
            ("task.img_h", self.task.img_h),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.users != 2 {
            return Err(Error::config(
                "users",
                "the multimodal task requires exactly 2 users",
            ));
        }
        if self.n_rf_tx != self.n_rf_rx {
            return Err(Error::config(
                "n_rf_tx",
                "identity-channel pretraining requires n_rf_tx == n_rf_rx",
            ));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!(
                    "d_model {} not divisible by n_heads {}",
                    self.model.d_model, self.model.n_heads
                ),
            ));
        }
        if self.task.shapes_min > self.task.shapes_max {
            return Err(Error::config("task.shapes_min", "exceeds shapes_max"));
        }
        if self.physics.paths_min == 0 || self.physics.paths_min > self.physics.paths_max {
            return Err(Error::config("physics.paths_min", "invalid path range"));
        }
        if self.transmission == Transmission::Orthogonal
            && self.data_symbols % 2 != 0
            && self.subcarriers % 2 != 0
        {
            return Err(Error::config(
                "transmission",
                "orthogonal split needs even data_symbols or even subcarriers",
            ));
        }
        Ok(())
    }

    pub fn noise_var(&self) -> f64 {
        TRANSMIT_POWER / 10f64.powf(self.snr_db / 10.0)
    }

    /// Noise variance seen by reference-signal reception.
    pub fn pilot_noise_var(&self) -> f64 {
        TRANSMIT_POWER / 10f64.powf(self.pilot_snr_db.unwrap_or(self.snr_db) / 10.0)
    }

    /// Total OFDM symbols per drop: reference phase plus data phase.
    pub fn total_symbols(&self) -> usize {
        self.csirs_symbols + self.data_symbols
    }

    pub fn channel_physics(&self) -> ChannelPhysics {
        let ofdm = OfdmConfig {
            n_subcarriers: self.subcarriers,
            n_cyclic_prefix: self.physics.cyclic_prefix_samples,
            subcarrier_spacing_hz: self.physics.subcarrier_spacing_hz,
            carrier_hz: self.physics.carrier_hz,
        };
        ChannelPhysics {
            ofdm,
            n_tx: self.n_tx,
            n_rx: self.n_rx,
            users: self.users,
            paths_min: self.physics.paths_min,
            paths_max: self.physics.paths_max,
            v_max_mps: self.physics.v_max_kmh / 3.6,
            tau_max_s: self.physics.tau_max_samples * ofdm.sample_interval(),
        }
    }

    /// Stable 64-bit hash of the canonical JSON form, used to pair
    /// checkpoints with the configuration that produced them.
    pub fn hash(&self) -> String {
        fnv64_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of everything that determines parameter shapes and the data
    /// distribution, ignoring the training schedule: checkpoints trained
    /// under different epoch/lr budgets stay mutually compatible.
    pub fn arch_hash(&self) -> String {
        let mut canon = self.clone();
        canon.training = TrainingConfig {
            stage1: StageParams { epochs: 0, batch_size: 0, lr: 0.0 },
            stage2: StageParams { epochs: 0, batch_size: 0, lr: 0.0 },
            stage3: StageParams { epochs: 0, batch_size: 0, lr: 0.0 },
            patience: 0,
            grad_clip_norm: 0.0,
        };
        canon.runs_dir = String::new();
        fnv64_hex(serde_json::to_string(&canon).expect("config serializes").as_bytes())
    }

    /// Compatibility hash for semantic-layer checkpoints: the fields that
    /// shape or feed the codec parameters. Deliberately excludes the
    /// reference-signal budget and SNR, which the semantic nets never see
    /// on the identity-channel pretraining path.
    pub fn sem_compat_hash(&self) -> String {
        let v = serde_json::json!({
            "users": self.users,
            "n_rf_tx": self.n_rf_tx,
            "n_rf_rx": self.n_rf_rx,
            "subcarriers": self.subcarriers,
            "data_symbols": self.data_symbols,
            "transmission": self.transmission,
            "model": self.model,
            "img_h": self.task.img_h,
            "img_w": self.task.img_w,
            "classes": self.task.classes,
            "shapes_min": self.task.shapes_min,
            "shapes_max": self.task.shapes_max,
            "pixel_noise_std": self.task.pixel_noise_std,
        });
        fnv64_hex(v.to_string().as_bytes())
    }

    /// Compatibility hash for physical-layer checkpoints.
    pub fn phy_compat_hash(&self) -> String {
        let v = serde_json::json!({
            "users": self.users,
            "n_tx": self.n_tx,
            "n_rx": self.n_rx,
            "n_rf_tx": self.n_rf_tx,
            "n_rf_rx": self.n_rf_rx,
            "subcarriers": self.subcarriers,
            "csirs_symbols": self.csirs_symbols,
            "feedback_bits": self.feedback_bits,
            "data_symbols": self.data_symbols,
            "snr_db": self.snr_db,
            "pilot_snr_db": self.pilot_snr_db,
            "physics": self.physics,
            "d_csi": self.model.d_csi,
            "d_model": self.model.d_model,
            "tf_layers": self.model.tf_layers,
            "n_heads": self.model.n_heads,
            "d_ff": self.model.d_ff,
        });
        fnv64_hex(v.to_string().as_bytes())
    }
}

/// FNV-1a over raw bytes, hex-encoded; used for config and cache keys.
pub fn fnv64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
