//! Desk-scale, end-to-end differentiable link-level simulator for learned
//! multi-user massive MIMO-OFDM semantic transmission.
//!
//! The pipeline couples a reference-signal / feedback / analog-beamforming
//! physical layer with a multimodal semantic codec, trained jointly against
//! a segmentation task over a time-varying multipath channel, plus classical
//! separated-design baselines for comparison.
//!
//! Crate layout:
//! - [`numcore`]: reverse-mode autodiff over real/complex tensors
//! - [`nnblocks`]: Transformer encoder, quantizer, conv codec, linear layers
//! - [`channel`]: multipath MIMO-OFDM channel generator and AWGN
//! - [`phynet`]: learnable reference signals, feedback and beamformer nets
//! - [`semnet`]: source codec, feature-gating fusion, superposed transmission
//! - [`baselines`]: PCA beamforming, SVD bound, DMRS least-squares chain
//! - [`trainer`]: three-stage training, metrics, checkpoints
//! - [`config`] / [`io`]: experiment configs and binary dataset exchange

pub mod error;
pub mod rng;

pub mod numcore;
pub mod nnblocks;
pub mod channel;
pub mod config;
pub mod phynet;
pub mod semnet;
pub mod baselines;
pub mod io;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
