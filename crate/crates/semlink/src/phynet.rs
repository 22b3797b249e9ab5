//! Physical-layer networks: learnable reference-signal transmission,
//! UE-side channel-semantic extraction (feedback bits + analog precoder),
//! BS-side combiner generation from feedback, and spectral efficiency.
//!
//! Dimension conventions (TDD reciprocity): the uplink channel H[k,q,n] is
//! N_r x N_t; the downlink reference signal sees its plain transpose. Pilot
//! reception for user k on symbol l, subcarrier n is
//!   Y_p = V[k,l] · H^T[k,l,n] · X[l] · x_bb[l,n] + z,
//! with V = exp(j Q), X = exp(j P) unit-modulus by construction and x_bb
//! rescaled so the transmitted pilot power is exactly P_t.

use crate::channel::{awgn_tensor, ChannelSet};
use crate::config::{ExperimentConfig, TRANSMIT_POWER};
use crate::error::{Error, Result};
use crate::nnblocks::{position_embed, BinaryQuantizer, Linear, TransformerStack};
use crate::numcore::{linalg, Binding, Dtype, Graph, ParamStore, Tensor, Var};
use crate::rng::RngStream;

const LN2: f64 = std::f64::consts::LN_2;

/// Learnable reference-signal parameters: digital pilots and the analog
/// phase matrices on both ends.
#[derive(Debug, Clone)]
pub struct CsiRsParams {
    pub users: usize,
    pub symbols: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_rf_tx: usize,
    pub n_rf_rx: usize,
    pub subcarriers: usize,
}

impl CsiRsParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        CsiRsParams {
            users: cfg.users,
            symbols: cfg.csirs_symbols,
            n_tx: cfg.n_tx,
            n_rx: cfg.n_rx,
            n_rf_tx: cfg.n_rf_tx,
            n_rf_rx: cfg.n_rf_rx,
            subcarriers: cfg.subcarriers,
        }
    }

    fn xbb_name(l: usize) -> String {
        format!("phy.csirs.xbb.{l}")
    }
    fn prf_name(l: usize) -> String {
        format!("phy.csirs.prf.{l}")
    }
    fn qrf_name(k: usize, l: usize) -> String {
        format!("phy.csirs.qrf.{k}.{l}")
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        for l in 0..self.symbols {
            // Digital pilots: unit-variance complex Gaussian start.
            let n = self.n_rf_rx * self.subcarriers;
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                let (re, im) = rng.complex_normal(1.0);
                data[2 * i] = re;
                data[2 * i + 1] = im;
            }
            store.insert(
                Self::xbb_name(l),
                Tensor::from_complex(&[self.n_rf_rx, self.subcarriers], data),
            );
            store.insert(
                Self::prf_name(l),
                crate::nnblocks::init_phases(&[self.n_rx, self.n_rf_rx], rng),
            );
            for k in 0..self.users {
                store.insert(
                    Self::qrf_name(k, l),
                    crate::nnblocks::init_phases(&[self.n_rf_tx, self.n_tx], rng),
                );
            }
        }
    }
}

/// Reference-signal reception for every user, differentiable w.r.t. all
/// pilot parameters.
pub struct CsirsOutput {
    /// Per user: complex [N_c x (L * N_RF_t)]; the (l, i) pilot response on
    /// subcarrier n sits at column l * N_RF_t + i.
    pub received: Vec<Var>,
    /// Transmitted pilot power per (l, n), after normalization (detached).
    pub tx_power: Vec<f64>,
}

pub fn csirs_forward(
    g: &mut Graph,
    bind: &Binding,
    params: &CsiRsParams,
    channels: &ChannelSet,
    sigma2: f64,
    noise: &mut RngStream,
) -> Result<CsirsOutput> {
    if sigma2 < 0.0 {
        return Err(Error::numeric("csirs_forward", "negative noise variance"));
    }
    if channels.n_rx != params.n_rx || channels.n_tx != params.n_tx {
        return Err(Error::shape(
            "csirs_forward",
            format!(
                "channel {}x{} vs array {}x{}",
                channels.n_rx, channels.n_tx, params.n_rx, params.n_tx
            ),
        ));
    }
    let (users, l_sym, n_c) = (params.users, params.symbols, params.subcarriers);
    let sqrt_pt = TRANSMIT_POWER.sqrt();
    let mut tx_power = Vec::with_capacity(l_sym * n_c);
    // Per-symbol analog matrices.
    let mut x_rf = Vec::with_capacity(l_sym);
    let mut v_rf = vec![Vec::with_capacity(l_sym); users];
    for l in 0..l_sym {
        let p = bind.var(&CsiRsParams::prf_name(l));
        x_rf.push(g.complex_exp_phase(p)?);
        for (k, v) in v_rf.iter_mut().enumerate() {
            let q = bind.var(&CsiRsParams::qrf_name(k, l));
            v.push(g.complex_exp_phase(q)?);
        }
    }
    // Column-by-column pilot transmission; rows assembled per subcarrier.
    let mut cells: Vec<Vec<Vec<Var>>> = vec![vec![Vec::with_capacity(l_sym); n_c]; users];
    for l in 0..l_sym {
        let xbb = bind.var(&CsiRsParams::xbb_name(l));
        for n in 0..n_c {
            let col = g.slice_cols(xbb, n, 1)?;
            let tx = g.matmul(x_rf[l], col)?;
            let nrm = g.frobenius_norm(tx)?;
            let inv = g.recip(nrm)?;
            let f = g.scale(inv, sqrt_pt)?;
            let tx_n = g.scale_var(tx, f)?;
            tx_power.push(g.value(tx_n).sq_norm());
            for k in 0..users {
                let hd = g.constant(channels.mat_downlink(k, l, n));
                let through = g.matmul(hd, tx_n)?;
                let mut y = g.matmul(v_rf[k][l], through)?;
                if sigma2 > 0.0 {
                    let z = g.constant(awgn_tensor(&[params.n_rf_tx, 1], sigma2, noise));
                    y = g.add(y, z)?;
                }
                cells[k][n].push(y);
            }
        }
    }
    let mut received = Vec::with_capacity(users);
    for user_cells in cells {
        let mut rows = Vec::with_capacity(n_c);
        for cols in user_cells {
            let stacked = g.concat(&cols, 0)?; // [L*N_RF_t, 1]
            rows.push(g.transpose(stacked)?);
        }
        received.push(g.concat(&rows, 0)?); // [N_c, L*N_RF_t]
    }
    Ok(CsirsOutput { received, tx_power })
}

/// UE-side channel-semantic network: trunk Transformer over subcarriers,
/// a precoder-phase branch and a quantized-feedback branch.
#[derive(Debug, Clone)]
pub struct UeCsaNet {
    pub prefix: String,
    pub embed: Linear,
    pub trunk: TransformerStack,
    pub head_csi: Linear,
    pub a_embed: Linear,
    pub a_tf: TransformerStack,
    pub a_head: Linear,
    pub b_embed: Linear,
    pub b_tf: TransformerStack,
    pub b_head: Linear,
    pub quantizer: BinaryQuantizer,
    pub subcarriers: usize,
    pub d_model: usize,
    pub d_csi: usize,
    pub n_tx: usize,
    pub n_rf_tx: usize,
    pos: Tensor,
}

impl UeCsaNet {
    pub fn from_config(cfg: &ExperimentConfig, user: usize) -> Self {
        let p = format!("phy.ue{user}");
        let m = &cfg.model;
        let in_dim = 2 * cfg.n_rf_tx * cfg.csirs_symbols;
        UeCsaNet {
            embed: Linear::new(format!("{p}.embed"), in_dim, m.d_model),
            trunk: TransformerStack::new(
                format!("{p}.trunk"),
                m.d_model,
                m.tf_layers,
                m.n_heads,
                m.d_ff,
            ),
            head_csi: Linear::new(format!("{p}.head_csi"), m.d_model, m.d_csi),
            a_embed: Linear::new(format!("{p}.a.embed"), m.d_csi, m.d_model),
            a_tf: TransformerStack::new(
                format!("{p}.a.tf"),
                m.d_model,
                m.tf_layers,
                m.n_heads,
                m.d_ff,
            ),
            a_head: Linear::new(
                format!("{p}.a.head"),
                cfg.subcarriers * m.d_model,
                cfg.n_tx * cfg.n_rf_tx,
            ),
            b_embed: Linear::new(format!("{p}.b.embed"), m.d_csi, m.d_model),
            b_tf: TransformerStack::new(
                format!("{p}.b.tf"),
                m.d_model,
                m.tf_layers,
                m.n_heads,
                m.d_ff,
            ),
            b_head: Linear::new(
                format!("{p}.b.head"),
                cfg.subcarriers * m.d_model,
                cfg.feedback_bits,
            ),
            quantizer: BinaryQuantizer::new(cfg.feedback_bits),
            subcarriers: cfg.subcarriers,
            d_model: m.d_model,
            d_csi: m.d_csi,
            n_tx: cfg.n_tx,
            n_rf_tx: cfg.n_rf_tx,
            pos: position_embed(cfg.subcarriers, m.d_model),
            prefix: p,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.embed.register(store, rng);
        self.trunk.register(store, rng);
        self.head_csi.register(store, rng);
        self.a_embed.register(store, rng);
        self.a_tf.register(store, rng);
        self.a_head.register(store, rng);
        self.b_embed.register(store, rng);
        self.b_tf.register(store, rng);
        self.b_head.register(store, rng);
    }

    /// received pilots (complex [N_c x L*N_RF_t]) ->
    /// (feedback bits [B], precoder F_RF [N_t x N_RF_t], feature [N_c x d_csi]).
    pub fn forward(&self, g: &mut Graph, bind: &Binding, yp: Var) -> Result<(Var, Var, Var)> {
        self.forward_impl(g, bind, yp, true)
    }

    /// Gradient-verification variant: the hard threshold is replaced by its
    /// straight-through surrogate (the raw sigmoid code), keeping every
    /// other op identical. The two paths have identical backward passes by
    /// the quantizer's design.
    pub fn forward_soft(&self, g: &mut Graph, bind: &Binding, yp: Var) -> Result<(Var, Var, Var)> {
        self.forward_impl(g, bind, yp, false)
    }

    fn forward_impl(&self, g: &mut Graph, bind: &Binding, yp: Var, hard: bool) -> Result<(Var, Var, Var)> {
        let x = g.real_imag_concat(yp)?;
        let x = self.embed.forward(g, bind, x)?;
        let pe = g.constant(self.pos.clone());
        let x = g.add(x, pe)?;
        let x = self.trunk.forward(g, bind, x)?;
        let s_csi = self.head_csi.forward(g, bind, x)?;

        // Precoder-phase branch.
        let a = self.a_embed.forward(g, bind, s_csi)?;
        let a = self.a_tf.forward(g, bind, a)?;
        let flat_len = self.subcarriers * self.d_model;
        let a_flat = g.reshape(a, &[flat_len])?;
        let theta = self.a_head.forward_vec(g, bind, a_flat)?;
        let theta = g.reshape(theta, &[self.n_tx, self.n_rf_tx])?;
        let f_rf = g.complex_exp_phase(theta)?;

        // Quantized-feedback branch.
        let b = self.b_embed.forward(g, bind, s_csi)?;
        let b = self.b_tf.forward(g, bind, b)?;
        let b_flat = g.reshape(b, &[flat_len])?;
        let logits = self.b_head.forward_vec(g, bind, b_flat)?;
        let code = g.sigmoid(logits)?;
        let bits = if hard {
            self.quantizer.quantize(g, code)?
        } else {
            code
        };

        Ok((bits, f_rf, s_csi))
    }
}

/// BS-side channel-semantic network: dequantized feedback to a subcarrier
/// sequence, trunk Transformer, and a combiner-phase branch.
#[derive(Debug, Clone)]
pub struct BsCsaNet {
    pub in_lin: Linear,
    pub trunk: TransformerStack,
    pub head_csi: Linear,
    pub w_embed: Linear,
    pub w_tf: TransformerStack,
    pub w_head: Linear,
    pub quantizer: BinaryQuantizer,
    pub users: usize,
    pub bits: usize,
    pub subcarriers: usize,
    pub d_model: usize,
    pub n_rx: usize,
    pub n_rf_rx: usize,
    pos: Tensor,
}

impl BsCsaNet {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let p = "phy.bs";
        let m = &cfg.model;
        BsCsaNet {
            in_lin: Linear::new(
                format!("{p}.in"),
                cfg.users * cfg.feedback_bits,
                cfg.subcarriers * m.d_model,
            ),
            trunk: TransformerStack::new(
                format!("{p}.trunk"),
                m.d_model,
                m.tf_layers,
                m.n_heads,
                m.d_ff,
            ),
            head_csi: Linear::new(format!("{p}.head_csi"), m.d_model, m.d_csi),
            w_embed: Linear::new(format!("{p}.w.embed"), m.d_csi, m.d_model),
            w_tf: TransformerStack::new(
                format!("{p}.w.tf"),
                m.d_model,
                m.tf_layers,
                m.n_heads,
                m.d_ff,
            ),
            w_head: Linear::new(
                format!("{p}.w.head"),
                cfg.subcarriers * m.d_model,
                cfg.n_rf_rx * cfg.n_rx,
            ),
            quantizer: BinaryQuantizer::new(cfg.feedback_bits),
            users: cfg.users,
            bits: cfg.feedback_bits,
            subcarriers: cfg.subcarriers,
            d_model: m.d_model,
            n_rx: cfg.n_rx,
            n_rf_rx: cfg.n_rf_rx,
            pos: position_embed(cfg.subcarriers, m.d_model),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.in_lin.register(store, rng);
        self.trunk.register(store, rng);
        self.head_csi.register(store, rng);
        self.w_embed.register(store, rng);
        self.w_tf.register(store, rng);
        self.w_head.register(store, rng);
    }

    /// Feedback is error-free: the bit vectors arrive exactly as produced.
    /// bits_per_user -> (combiner W_RF [N_RF_r x N_r], feature [N_c x d_csi]).
    pub fn forward(&self, g: &mut Graph, bind: &Binding, bits: &[Var]) -> Result<(Var, Var)> {
        if bits.len() != self.users {
            return Err(Error::shape(
                "bs_csanet",
                format!("{} bit vectors vs {} users", bits.len(), self.users),
            ));
        }
        for (k, b) in bits.iter().enumerate() {
            let len = g.value(*b).numel();
            if len != self.bits {
                return Err(Error::shape(
                    "bs_csanet",
                    format!("user {k}: {len} bits vs configured {}", self.bits),
                ));
            }
        }
        let cat = g.concat(bits, 0)?;
        let deq = self.quantizer.dequantize(g, cat)?;
        let seq = self.in_lin.forward_vec(g, bind, deq)?;
        let seq = g.reshape(seq, &[self.subcarriers, self.d_model])?;
        let pe = g.constant(self.pos.clone());
        let seq = g.add(seq, pe)?;
        let x = self.trunk.forward(g, bind, seq)?;
        let s_csi = self.head_csi.forward(g, bind, x)?;

        let w = self.w_embed.forward(g, bind, s_csi)?;
        let w = self.w_tf.forward(g, bind, w)?;
        let flat = g.reshape(w, &[self.subcarriers * self.d_model])?;
        let phi = self.w_head.forward_vec(g, bind, flat)?;
        let phi = g.reshape(phi, &[self.n_rf_rx, self.n_rx])?;
        let w_rf = g.complex_exp_phase(phi)?;
        Ok((w_rf, s_csi))
    }
}

/// Low-dimensional equivalent channel W_RF · H · F_RF.
pub fn effective_channel(g: &mut Graph, w_rf: Var, h: Var, f_rf: Var) -> Result<Var> {
    let wh = g.matmul(w_rf, h)?;
    g.matmul(wh, f_rf)
}

/// Sum-rate over users, data symbols and subcarriers:
/// sum log2 det(I + rho (W H F)(W H F)^H), inter-user interference ignored.
pub fn spectral_efficiency(
    g: &mut Graph,
    w_rf: Var,
    f_rf: &[Var],
    channels: &ChannelSet,
    first_symbol: usize,
    symbol_count: usize,
    rho: f64,
) -> Result<Var> {
    let n_rf_r = g.value(w_rf).shape[0];
    let eye = Tensor::eye_complex(n_rf_r);
    let mut acc: Option<Var> = None;
    for (k, f) in f_rf.iter().enumerate() {
        for q in first_symbol..first_symbol + symbol_count {
            for n in 0..channels.subcarriers {
                let h = g.constant(channels.mat(k, q, n));
                let m = effective_channel(g, w_rf, h, *f)?;
                let mh = g.hermitian(m)?;
                let mmh = g.matmul(m, mh)?;
                let scaled = g.scale(mmh, rho)?;
                let i = g.constant(eye.clone());
                let a = g.add(i, scaled)?;
                let ld = g.logdet_hpd(a)?;
                let term = g.scale(ld, 1.0 / LN2)?;
                acc = Some(match acc {
                    Some(prev) => g.add(prev, term)?,
                    None => term,
                });
            }
        }
    }
    let eta = acc.ok_or_else(|| Error::shape("spectral_efficiency", "empty sum"))?;
    if !g.value(eta).data[0].is_finite() {
        return Err(Error::numeric("spectral_efficiency", "non-finite rate"));
    }
    Ok(eta)
}

/// Spectral efficiency for detached beamformer tensors (no gradients).
pub fn spectral_efficiency_value(
    w_rf: &Tensor,
    f_rf: &[Tensor],
    channels: &ChannelSet,
    first_symbol: usize,
    symbol_count: usize,
    rho: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.constant(w_rf.clone());
    let fs: Vec<Var> = f_rf.iter().map(|f| g.constant(f.clone())).collect();
    let eta = spectral_efficiency(&mut g, w, &fs, channels, first_symbol, symbol_count, rho)?;
    Ok(g.value(eta).data[0])
}

/// Unit-modulus check used by constraint tests and training assertions.
pub fn max_modulus_deviation(t: &Tensor) -> f64 {
    debug_assert_eq!(t.dtype, Dtype::Complex);
    let mut worst = 0.0f64;
    for i in 0..t.numel() {
        let (re, im) = t.c_at(i);
        worst = worst.max(((re * re + im * im).sqrt() - 1.0).abs());
    }
    worst
}

/// Closed-form check value: log2 prod (1 + rho * lambda_i(M M^H)).
pub fn rate_from_eigenvalues(m: &Tensor, rho: f64) -> f64 {
    let (r, c) = (m.shape[0], m.shape[1]);
    let mut mmh = vec![0.0; 2 * r * r];
    linalg::cmm_acc(&mut mmh, &m.data, false, &m.data, true, r, c, r);
    let (vals, _) = linalg::hermitian_eig(&mmh, r);
    vals.iter().map(|l| (1.0 + rho * l.max(0.0)).log2()).sum()
}
