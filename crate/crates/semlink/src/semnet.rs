//! Semantic layer: synthetic multimodal segmentation task, source codecs
//! with channel-aware feature gating, over-the-air non-orthogonal
//! superposition, and the receive-side fusion decoder.
//!
//! The synthetic task mirrors the two-modality setup: user 1 carries a
//! 3-channel image where rectangle (class 1) and disk (class 2) objects are
//! visible but crosses (class 3) sit at the background level; user 2 carries
//! a 1-channel image where rectangles and crosses are visible but disks are
//! not. Neither modality alone can segment all classes; fusion can.

use crate::channel::{awgn_tensor, ChannelSet};
use crate::config::{ExperimentConfig, Transmission, TRANSMIT_POWER};
use crate::error::{Error, Result};
use crate::nnblocks::{ConvDecoder, ConvEncoder, Linear};
use crate::numcore::{Binding, Dtype, Graph, ParamStore, Tensor, Var};
use crate::rng::RngStream;

// ── Synthetic multimodal task ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SourceSample {
    /// 3-channel modality, values in [0, 1].
    pub mod_a: Tensor,
    /// 1-channel modality, values in [0, 1].
    pub mod_b: Tensor,
    /// Per-pixel class indices, row-major H x W.
    pub label: Vec<usize>,
}

const BG_LEVEL: f64 = 0.30;
/// Per-class base intensity where the class is visible; contrast to the
/// background is at least 0.4 in every channel.
const VISIBLE_LEVEL: [f64; 3] = [0.85, 0.75, 0.80];
const CH_OFFSET: [f64; 3] = [0.0, 0.05, -0.05];

#[derive(Clone, Copy)]
enum Shape {
    Rect { cy: usize, cx: usize, hh: usize, hw: usize },
    Disk { cy: usize, cx: usize, r: usize },
    Cross { cy: usize, cx: usize, arm: usize, thick: usize },
}

impl Shape {
    fn class(&self) -> usize {
        match self {
            Shape::Rect { .. } => 1,
            Shape::Disk { .. } => 2,
            Shape::Cross { .. } => 3,
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { cy, cx, hh, hw } => {
                y.abs_diff(cy) <= hh && x.abs_diff(cx) <= hw
            }
            Shape::Disk { cy, cx, r } => {
                let dy = y.abs_diff(cy);
                let dx = x.abs_diff(cx);
                dy * dy + dx * dx <= r * r
            }
            Shape::Cross { cy, cx, arm, thick } => {
                (y.abs_diff(cy) <= thick && x.abs_diff(cx) <= arm)
                    || (x.abs_diff(cx) <= thick && y.abs_diff(cy) <= arm)
            }
        }
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        let (cy, cx, ry, rx) = match *self {
            Shape::Rect { cy, cx, hh, hw } => (cy, cx, hh, hw),
            Shape::Disk { cy, cx, r } => (cy, cx, r, r),
            Shape::Cross { cy, cx, arm, .. } => (cy, cx, arm, arm),
        };
        (
            cy.saturating_sub(ry),
            cy + ry,
            cx.saturating_sub(rx),
            cx + rx,
        )
    }
}

fn bboxes_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1 && a.2 <= b.3 && b.2 <= a.3
}

/// Draw one multimodal sample with |shapes| uniform in the configured range,
/// placed without overlap (bounding-box rejection, capped attempts).
pub fn gen_multimodal_sample(rng: &mut RngStream, cfg: &ExperimentConfig) -> SourceSample {
    let (h, w) = (cfg.task.img_h, cfg.task.img_w);
    let mut shapes: Vec<Shape> = Vec::new();
    let want = if cfg.task.shapes_max == 0 {
        0
    } else {
        rng.int_range(cfg.task.shapes_min as u64, cfg.task.shapes_max as u64) as usize
    };
    let mut attempts = 0;
    while shapes.len() < want && attempts < 60 {
        attempts += 1;
        let kind = rng.below(3);
        let margin = h / 4;
        let cy = rng.int_range(margin as u64, (h - 1 - margin) as u64) as usize;
        let cx = rng.int_range(margin as u64, (w - 1 - margin) as u64) as usize;
        let size_min = (h / 8).max(2) as u64;
        let size_max = (h / 4).max(3) as u64;
        let size = rng.int_range(size_min, size_max) as usize;
        let cand = match kind {
            0 => Shape::Rect {
                cy,
                cx,
                hh: size,
                hw: rng.int_range(size_min, (w / 4).max(3) as u64) as usize,
            },
            1 => Shape::Disk { cy, cx, r: size },
            _ => Shape::Cross {
                cy,
                cx,
                arm: size.max(3),
                thick: 1 + size / 3,
            },
        };
        let bb = cand.bbox();
        if bb.1 >= h || bb.3 >= w {
            continue;
        }
        if shapes.iter().any(|s| bboxes_overlap(s.bbox(), bb)) {
            continue;
        }
        shapes.push(cand);
    }

    let mut label = vec![0usize; h * w];
    let mut mod_a = vec![BG_LEVEL; 3 * h * w];
    let mut mod_b = vec![BG_LEVEL; h * w];
    for y in 0..h {
        for x in 0..w {
            for s in &shapes {
                if s.covers(y, x) {
                    let class = s.class();
                    label[y * w + x] = class;
                    // Modality A sees classes 1 and 2; class 3 stays at
                    // background level. Modality B sees classes 1 and 3.
                    if class == 1 || class == 2 {
                        for c in 0..3 {
                            mod_a[(c * h + y) * w + x] = VISIBLE_LEVEL[class - 1] + CH_OFFSET[c];
                        }
                    }
                    if class == 1 || class == 3 {
                        mod_b[y * w + x] = VISIBLE_LEVEL[class - 1];
                    }
                    break;
                }
            }
        }
    }
    let noise = cfg.task.pixel_noise_std;
    if noise > 0.0 {
        for v in mod_a.iter_mut().chain(mod_b.iter_mut()) {
            *v = (*v + noise * rng.normal()).clamp(0.0, 1.0);
        }
    }
    SourceSample {
        mod_a: Tensor::from_real(&[3, h, w], mod_a),
        mod_b: Tensor::from_real(&[1, h, w], mod_b),
        label,
    }
}

/// Deterministic sample for a dataset index under a master seed.
pub fn sample_at(master_seed: u64, index: u64, cfg: &ExperimentConfig) -> SourceSample {
    let mut rng = RngStream::derive(master_seed, "dataset").substream(index);
    gen_multimodal_sample(&mut rng, cfg)
}

// ── Segmentation metrics ─────────────────────────────────────────────

/// Mean cross entropy over pixels of logits [C x H x W].
pub fn seg_loss(g: &mut Graph, logits: Var, label: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape.clone();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape("seg_loss", format!("logits {shape:?}")));
    };
    let flat = g.reshape(logits, &[c, h * w])?;
    g.cross_entropy_mean(flat, label)
}

/// Argmax class per pixel from logits [C x H x W].
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let (c, hw) = (logits.shape[0], logits.shape[1] * logits.shape[2]);
    let mut pred = vec![0usize; hw];
    for p in 0..hw {
        let mut best = f64::NEG_INFINITY;
        for cl in 0..c {
            let v = logits.data[cl * hw + p];
            if v > best {
                best = v;
                pred[p] = cl;
            }
        }
    }
    pred
}

/// Mean intersection-over-union over the classes present in the union of
/// prediction and truth; classes absent from both are excluded.
pub fn miou_from_pred(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let mut acc = 0.0;
    let mut count = 0;
    for c in 0..classes {
        if union[c] > 0 {
            acc += inter[c] as f64 / union[c] as f64;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        acc / count as f64
    }
}

pub fn miou(logits: &Tensor, truth: &[usize], classes: usize) -> f64 {
    miou_from_pred(&argmax_classes(logits), truth, classes)
}

pub fn pixel_accuracy(logits: &Tensor, truth: &[usize]) -> f64 {
    let pred = argmax_classes(logits);
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Per-class IoU (None where the union is empty).
pub fn per_class_iou(pred: &[usize], truth: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            if union[c] > 0 {
                Some(inter[c] as f64 / union[c] as f64)
            } else {
                None
            }
        })
        .collect()
}

// ── Resource allocation ──────────────────────────────────────────────

/// Which (symbol, subcarrier) resource elements each user transmits on.
#[derive(Debug, Clone)]
pub struct ResourceAllocation {
    pub per_user: Vec<Vec<(usize, usize)>>,
    pub symbols: usize,
    pub subcarriers: usize,
}

impl ResourceAllocation {
    /// Non-orthogonal: every user occupies the whole grid.
    pub fn full(users: usize, symbols: usize, subcarriers: usize) -> Self {
        let all: Vec<(usize, usize)> = (0..symbols)
            .flat_map(|q| (0..subcarriers).map(move |n| (q, n)))
            .collect();
        ResourceAllocation {
            per_user: vec![all; users],
            symbols,
            subcarriers,
        }
    }

    /// Orthogonal split for two users: halves of the symbols when the
    /// symbol count is even, otherwise halves of the subcarriers.
    pub fn orthogonal(users: usize, symbols: usize, subcarriers: usize) -> Result<Self> {
        if users != 2 {
            return Err(Error::config(
                "transmission",
                "orthogonal split supports exactly 2 users",
            ));
        }
        let mut per_user = vec![Vec::new(), Vec::new()];
        if symbols % 2 == 0 {
            for q in 0..symbols {
                let owner = if q < symbols / 2 { 0 } else { 1 };
                for n in 0..subcarriers {
                    per_user[owner].push((q, n));
                }
            }
        } else if subcarriers % 2 == 0 {
            for q in 0..symbols {
                for n in 0..subcarriers {
                    let owner = if n < subcarriers / 2 { 0 } else { 1 };
                    per_user[owner].push((q, n));
                }
            }
        } else {
            return Err(Error::config(
                "transmission",
                "orthogonal split needs an even symbol or subcarrier count",
            ));
        }
        Ok(ResourceAllocation {
            per_user,
            symbols,
            subcarriers,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.transmission {
            Transmission::NonOrthogonal => {
                Ok(Self::full(cfg.users, cfg.data_symbols, cfg.subcarriers))
            }
            Transmission::Orthogonal => {
                Self::orthogonal(cfg.users, cfg.data_symbols, cfg.subcarriers)
            }
        }
    }

    pub fn count(&self, user: usize) -> usize {
        self.per_user[user].len()
    }

    /// Column index of (q, n) within the user's transmit feature, if owned.
    pub fn column(&self, user: usize, q: usize, n: usize) -> Option<usize> {
        self.per_user[user].iter().position(|&re| re == (q, n))
    }
}

// ── Channel-aware feature gating ─────────────────────────────────────

/// Recalibrates source-feature channels with factors predicted from pooled
/// source context concatenated with an embedded channel feature.
#[derive(Debug, Clone)]
pub struct Sfa {
    pub fc_csi: Linear,
    pub w1: Linear,
    pub w2: Linear,
    pub d_s: usize,
    pub d_c: usize,
}

impl Sfa {
    pub fn new(prefix: &str, cfg: &ExperimentConfig) -> Self {
        let m = &cfg.model;
        Sfa {
            fc_csi: Linear::new(
                format!("{prefix}.fc_csi"),
                cfg.subcarriers * m.d_csi,
                m.d_c,
            ),
            w1: Linear::new(format!("{prefix}.w1"), m.d_s + m.d_c, m.d_s),
            w2: Linear::new(format!("{prefix}.w2"), m.d_s, m.d_s),
            d_s: m.d_s,
            d_c: m.d_c,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.fc_csi.register(store, rng);
        self.w1.register(store, rng);
        self.w2.register(store, rng);
    }

    /// f_s [d_s x H_s x W_s], f_csi [N_c x d_csi] -> gated feature, same
    /// shape as f_s. Also returns the gate vector for inspection.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        f_s: Var,
        f_csi: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.value(f_s).shape.clone();
        let [d_s, hs, ws] = shape[..] else {
            return Err(Error::shape("sfa", format!("feature {shape:?}")));
        };
        if d_s != self.d_s {
            return Err(Error::shape(
                "sfa",
                format!("feature channels {d_s} vs configured {}", self.d_s),
            ));
        }
        let flat = g.reshape(f_s, &[d_s, hs * ws])?;
        let pooled = g.mean_axes(flat, &[1])?; // [d_s]
        let csi_len = g.value(f_csi).numel();
        let csi_flat = g.reshape(f_csi, &[csi_len])?;
        let v_csi = self.fc_csi.forward_vec(g, bind, csi_flat)?;
        let ctx = g.concat(&[pooled, v_csi], 0)?;
        let hidden = self.w1.forward_vec(g, bind, ctx)?;
        let hidden = g.relu(hidden)?;
        let gates = self.w2.forward_vec(g, bind, hidden)?;
        let gates = g.sigmoid(gates)?;
        let gated = g.scale_rows(flat, gates)?;
        let out = g.reshape(gated, &[d_s, hs, ws])?;
        Ok((out, gates))
    }
}

// ── UE-side semantic transmitter ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct UeMsfNet {
    pub enc: ConvEncoder,
    pub sfa: Sfa,
    pub out: Linear,
    pub n_rf_tx: usize,
    pub alloc_count: usize,
}

impl UeMsfNet {
    pub fn from_config(cfg: &ExperimentConfig, user: usize, alloc: &ResourceAllocation) -> Result<Self> {
        let p = format!("sem.ue{user}");
        let in_ch = if user == 0 { 3 } else { 1 };
        let m = &cfg.model;
        let enc = ConvEncoder::new(
            format!("{p}.enc"),
            in_ch,
            m.d_s,
            (cfg.task.img_h, cfg.task.img_w),
            (m.feat_h, m.feat_w),
        )?;
        let alloc_count = alloc.count(user);
        let out = Linear::new(
            format!("{p}.out"),
            m.d_s * m.feat_h * m.feat_w,
            2 * alloc_count * cfg.n_rf_tx,
        );
        Ok(UeMsfNet {
            enc,
            sfa: Sfa::new(&format!("{p}.sfa"), cfg),
            out,
            n_rf_tx: cfg.n_rf_tx,
            alloc_count,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.enc.register(store, rng);
        self.sfa.register(store, rng);
        self.out.register(store, rng);
    }

    /// Source image + channel feature -> power-normalized transmit feature,
    /// complex [N_RF_t x |alloc|]. `f_rf` participates in the normalization
    /// when present (data transmission); the identity-channel pretraining
    /// path passes None and normalizes the baseband feature directly.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: &Tensor,
        s_csi: Var,
        f_rf: Option<Var>,
    ) -> Result<Var> {
        let img_v = g.constant(img.clone());
        let f_s = self.enc.forward(g, bind, img_v)?;
        let (fused, _) = self.sfa.forward(g, bind, f_s, s_csi)?;
        let n = g.value(fused).numel();
        let flat = g.reshape(fused, &[n])?;
        let v = self.out.forward_vec(g, bind, flat)?;
        let z = g.complex_from_pair(v)?;
        let s_raw = g.reshape(z, &[self.n_rf_tx, self.alloc_count])?;
        let projected = match f_rf {
            Some(f) => g.matmul(f, s_raw)?,
            None => s_raw,
        };
        let nrm = g.frobenius_norm(projected)?;
        if g.value(nrm).data[0] == 0.0 {
            return Err(Error::numeric(
                "ue_msfnet",
                "zero-norm transmit feature before power normalization",
            ));
        }
        let inv = g.recip(nrm)?;
        let target = (TRANSMIT_POWER * self.alloc_count as f64).sqrt();
        let factor = g.scale(inv, target)?;
        g.scale_var(s_raw, factor)
    }
}

// ── Over-the-air superposition ───────────────────────────────────────

/// y[q,n] = sum_k H[k, first+q, n] F_RF[k] s_k[q,n] + noise; the receiver
/// applies W_RF. Returns the baseband grid as complex [N_RF_r x Q*N_c]
/// (column q*N_c + n).
pub fn transmit_superpose(
    g: &mut Graph,
    s_bb: &[Var],
    f_rf: &[Var],
    w_rf: Var,
    channels: &ChannelSet,
    first_symbol: usize,
    alloc: &ResourceAllocation,
    sigma2: f64,
    noise: &mut RngStream,
) -> Result<Var> {
    if s_bb.len() != f_rf.len() || s_bb.len() != alloc.per_user.len() {
        return Err(Error::shape(
            "transmit_superpose",
            "user count mismatch between features, precoders and allocation",
        ));
    }
    if sigma2 < 0.0 {
        return Err(Error::numeric("transmit_superpose", "negative noise variance"));
    }
    let n_r = channels.n_rx;
    // Per-user H F product cache per (q, n).
    let mut cols = Vec::with_capacity(alloc.symbols * alloc.subcarriers);
    for q in 0..alloc.symbols {
        for n in 0..alloc.subcarriers {
            let mut y: Option<Var> = None;
            for (k, s) in s_bb.iter().enumerate() {
                let Some(col_idx) = alloc.column(k, q, n) else {
                    continue;
                };
                let h = g.constant(channels.mat(k, first_symbol + q, n));
                let hf = g.matmul(h, f_rf[k])?;
                let s_col = g.slice_cols(*s, col_idx, 1)?;
                let term = g.matmul(hf, s_col)?;
                y = Some(match y {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let mut y = match y {
                Some(v) => v,
                None => g.constant(Tensor::zeros(&[n_r, 1], Dtype::Complex)),
            };
            if sigma2 > 0.0 {
                let z = g.constant(awgn_tensor(&[n_r, 1], sigma2, noise));
                y = g.add(y, z)?;
            }
            cols.push(g.matmul(w_rf, y)?);
        }
    }
    g.concat(&cols, 1)
}

/// Identity-channel reception for semantic pretraining: received grid is
/// the plain sum of the users' baseband features on their allocated
/// resources, no noise, no beamforming.
pub fn identity_received(
    g: &mut Graph,
    s_bb: &[Var],
    alloc: &ResourceAllocation,
) -> Result<Var> {
    let n_rf = g.value(s_bb[0]).shape[0];
    let mut cols = Vec::with_capacity(alloc.symbols * alloc.subcarriers);
    for q in 0..alloc.symbols {
        for n in 0..alloc.subcarriers {
            let mut y: Option<Var> = None;
            for (k, s) in s_bb.iter().enumerate() {
                let Some(col_idx) = alloc.column(k, q, n) else {
                    continue;
                };
                let s_col = g.slice_cols(*s, col_idx, 1)?;
                y = Some(match y {
                    Some(acc) => g.add(acc, s_col)?,
                    None => s_col,
                });
            }
            cols.push(match y {
                Some(v) => v,
                None => g.constant(Tensor::zeros(&[n_rf, 1], Dtype::Complex)),
            });
        }
    }
    g.concat(&cols, 1)
}

// ── BS-side semantic receiver ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BsMsfNet {
    pub in_lin: Linear,
    pub sfa: Sfa,
    pub dec: ConvDecoder,
    pub d_s: usize,
    pub feat: (usize, usize),
}

impl BsMsfNet {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let p = "sem.bs";
        let m = &cfg.model;
        let in_dim = 2 * cfg.n_rf_rx * cfg.data_symbols * cfg.subcarriers;
        Ok(BsMsfNet {
            in_lin: Linear::new(
                format!("{p}.in"),
                in_dim,
                m.d_s * m.feat_h * m.feat_w,
            ),
            sfa: Sfa::new(&format!("{p}.sfa"), cfg),
            dec: ConvDecoder::new(
                format!("{p}.dec"),
                m.d_s,
                cfg.task.classes,
                (cfg.task.img_h, cfg.task.img_w),
                (m.feat_h, m.feat_w),
            )?,
            d_s: m.d_s,
            feat: (m.feat_h, m.feat_w),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.in_lin.register(store, rng);
        self.sfa.register(store, rng);
        self.dec.register(store, rng);
    }

    /// Received grid (complex [N_RF_r x Q*N_c]) + BS channel feature ->
    /// class logits [C x H x W]. No explicit channel estimation and no
    /// per-user detection anywhere on this path.
    ///
    /// The grid is normalized to unit RMS before the input layer so the
    /// identity-channel pretraining and the beamformed/noisy data path
    /// present the decoder with the same input scale.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, y_bb: Var, s_csi_bs: Var) -> Result<Var> {
        let ri = g.real_imag_concat(y_bb)?;
        let n = g.value(ri).numel();
        let nrm = g.frobenius_norm(ri)?;
        if g.value(nrm).data[0] == 0.0 {
            return Err(Error::numeric("bs_msfnet", "all-zero received grid"));
        }
        let inv = g.recip(nrm)?;
        let unit = g.scale(inv, (n as f64).sqrt())?;
        let ri = g.scale_var(ri, unit)?;
        let flat = g.reshape(ri, &[n])?;
        let feat = self.in_lin.forward_vec(g, bind, flat)?;
        let feat = g.reshape(feat, &[self.d_s, self.feat.0, self.feat.1])?;
        let (fused, _) = self.sfa.forward(g, bind, feat, s_csi_bs)?;
        self.dec.forward(g, bind, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assemble_channel, sample_paths};

    fn task_cfg() -> ExperimentConfig {
        ExperimentConfig::desk()
    }

    #[test]
    fn zero_shapes_gives_background_only() {
        let mut cfg = task_cfg();
        cfg.task.shapes_min = 0;
        cfg.task.shapes_max = 0;
        let mut rng = RngStream::derive(1, "d");
        let s = gen_multimodal_sample(&mut rng, &cfg);
        assert!(s.label.iter().all(|&c| c == 0));
    }

    #[test]
    fn class3_invisible_in_modality_a() {
        let mut cfg = task_cfg();
        cfg.task.pixel_noise_std = 0.0; // isolate the construction
        let mut found = 0;
        for seed in 0..40 {
            let mut rng = RngStream::derive(seed, "d");
            let s = gen_multimodal_sample(&mut rng, &cfg);
            let (h, w) = (cfg.task.img_h, cfg.task.img_w);
            for y in 0..h {
                for x in 0..w {
                    if s.label[y * w + x] == 3 {
                        found += 1;
                        for c in 0..3 {
                            assert_eq!(s.mod_a.data[(c * h + y) * w + x], BG_LEVEL);
                        }
                        assert!(s.mod_b.data[y * w + x] != BG_LEVEL);
                    }
                    if s.label[y * w + x] == 2 {
                        // Disks invisible in modality B, visible in A.
                        assert_eq!(s.mod_b.data[y * w + x], BG_LEVEL);
                        assert!((s.mod_a.data[(0 * h + y) * w + x] - BG_LEVEL).abs() >= 0.4);
                    }
                }
            }
        }
        assert!(found > 0, "no class-3 pixels over 40 seeds");
    }

    #[test]
    fn samples_are_reproducible_and_bounded() {
        let cfg = task_cfg();
        let a = sample_at(7, 3, &cfg);
        let b = sample_at(7, 3, &cfg);
        assert_eq!(a.mod_a.data, b.mod_a.data);
        assert_eq!(a.mod_b.data, b.mod_b.data);
        assert_eq!(a.label, b.label);
        assert!(a.mod_a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.label.iter().all(|&c| c < cfg.task.classes));
        let c = sample_at(7, 4, &cfg);
        assert_ne!(a.mod_a.data, c.mod_a.data);
    }

    #[test]
    fn miou_trivial_and_counting_example() {
        // Perfect prediction.
        let truth = vec![0, 1, 2, 3, 0, 1];
        assert_eq!(miou_from_pred(&truth, &truth, 4), 1.0);
        // 2x2 example: pred [0,1;1,1], truth [0,1;0,1]:
        // IoU_0 = 1/2, IoU_1 = 2/3, mean = 7/12.
        let pred = vec![0, 1, 1, 1];
        let tr = vec![0, 1, 0, 1];
        let got = miou_from_pred(&pred, &tr, 4);
        assert!((got - 7.0 / 12.0).abs() < 1e-15, "{got}");
    }

    #[test]
    fn miou_matches_set_oracle_on_random_masks() {
        // Independent oracle built on explicit pixel sets.
        fn oracle(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
            use std::collections::HashSet;
            let mut vals = Vec::new();
            for c in 0..classes {
                let p: HashSet<usize> = pred
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == c)
                    .map(|(i, _)| i)
                    .collect();
                let t: HashSet<usize> = truth
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == c)
                    .map(|(i, _)| i)
                    .collect();
                let u = p.union(&t).count();
                if u > 0 {
                    vals.push(p.intersection(&t).count() as f64 / u as f64);
                }
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        }
        let mut rng = RngStream::derive(11, "m");
        for _ in 0..100 {
            let n = 64;
            let classes = 4;
            let pred: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
            assert_eq!(
                miou_from_pred(&pred, &truth, classes),
                oracle(&pred, &truth, classes)
            );
        }
    }

    fn build_sfa(cfg: &ExperimentConfig, seed: u64) -> (ParamStore, Sfa) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::derive(seed, "sfa");
        let sfa = Sfa::new("t.sfa", cfg);
        sfa.register(&mut store, &mut rng);
        (store, sfa)
    }

    #[test]
    fn sfa_pools_channel_means() {
        let cfg = task_cfg();
        let (store, sfa) = build_sfa(&cfg, 3);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let d_s = cfg.model.d_s;
        let (hs, ws) = (cfg.model.feat_h, cfg.model.feat_w);
        // Constant value v per channel: pooled context must equal v.
        let mut data = vec![0.0; d_s * hs * ws];
        for c in 0..d_s {
            for i in 0..hs * ws {
                data[c * hs * ws + i] = c as f64 * 0.1;
            }
        }
        let f_s = g.constant(Tensor::from_real(&[d_s, hs, ws], data));
        let flat = g.reshape(f_s, &[d_s, hs * ws]).unwrap();
        let pooled = g.mean_axes(flat, &[1]).unwrap();
        for c in 0..d_s {
            assert!((g.value(pooled).data[c] - c as f64 * 0.1).abs() < 1e-12);
        }
        // Full forward shape contract.
        let f_csi = g.constant(Tensor::zeros(
            &[cfg.subcarriers, cfg.model.d_csi],
            Dtype::Real,
        ));
        let (out, gates) = sfa.forward(&mut g, &bind, f_s, f_csi).unwrap();
        assert_eq!(g.value(out).shape, vec![d_s, hs, ws]);
        assert_eq!(g.value(gates).shape, vec![d_s]);
        assert!(g.value(gates).data.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn sfa_saturated_gates_pass_input_through() {
        let cfg = task_cfg();
        let (mut store, sfa) = build_sfa(&cfg, 4);
        // Push the second-layer bias far positive: sigmoid -> 1.
        store
            .get_mut("t.sfa.w2.b")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|x| *x = 30.0);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let mut rng = RngStream::derive(5, "x");
        let d = cfg.model.d_s * cfg.model.feat_h * cfg.model.feat_w;
        let f_s = g.constant(Tensor::from_real(
            &[cfg.model.d_s, cfg.model.feat_h, cfg.model.feat_w],
            (0..d).map(|_| rng.normal()).collect(),
        ));
        let f_csi = g.constant(Tensor::zeros(
            &[cfg.subcarriers, cfg.model.d_csi],
            Dtype::Real,
        ));
        let (out, _) = sfa.forward(&mut g, &bind, f_s, f_csi).unwrap();
        for (a, b) in g.value(out).data.iter().zip(&g.value(f_s).data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sfa_gating_ratio_is_constant_per_channel() {
        let cfg = task_cfg();
        let (store, sfa) = build_sfa(&cfg, 6);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let mut rng = RngStream::derive(7, "x");
        let (d_s, hs, ws) = (cfg.model.d_s, cfg.model.feat_h, cfg.model.feat_w);
        let f_s = g.constant(Tensor::from_real(
            &[d_s, hs, ws],
            (0..d_s * hs * ws).map(|_| rng.normal() + 2.0).collect(),
        ));
        let f_csi = g.constant(Tensor::from_real(
            &[cfg.subcarriers, cfg.model.d_csi],
            (0..cfg.subcarriers * cfg.model.d_csi)
                .map(|_| rng.normal())
                .collect(),
        ));
        let (out, gates) = sfa.forward(&mut g, &bind, f_s, f_csi).unwrap();
        let (fv, ov, gv) = (g.value(f_s), g.value(out), g.value(gates));
        for c in 0..d_s {
            for i in 0..hs * ws {
                let x = fv.data[c * hs * ws + i];
                let y = ov.data[c * hs * ws + i];
                assert!((y / x - gv.data[c]).abs() < 1e-12);
            }
        }
    }

    fn msf_setup(cfg: &ExperimentConfig) -> (ParamStore, Vec<UeMsfNet>, BsMsfNet, ResourceAllocation) {
        let alloc = ResourceAllocation::from_config(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = RngStream::derive(17, "init");
        let ues: Vec<UeMsfNet> = (0..cfg.users)
            .map(|k| UeMsfNet::from_config(cfg, k, &alloc).unwrap())
            .collect();
        for ue in &ues {
            ue.register(&mut store, &mut rng);
        }
        let bs = BsMsfNet::from_config(cfg).unwrap();
        bs.register(&mut store, &mut rng);
        (store, ues, bs, alloc)
    }

    #[test]
    fn transmit_feature_power_is_exact() {
        let cfg = task_cfg();
        let (store, ues, _, alloc) = msf_setup(&cfg);
        let mut rng = RngStream::derive(19, "s");
        let sample = gen_multimodal_sample(&mut rng, &cfg);
        for scale_input in [1.0, 2.0] {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, &|_| false);
            let s_csi = g.constant(Tensor::zeros(
                &[cfg.subcarriers, cfg.model.d_csi],
                Dtype::Real,
            ));
            // Unit-modulus precoder from random phases.
            let ph = g.constant(crate::nnblocks::init_phases(
                &[cfg.n_tx, cfg.n_rf_tx],
                &mut rng,
            ));
            let f_rf = g.complex_exp_phase(ph).unwrap();
            let mut img = sample.mod_a.clone();
            img.data.iter_mut().for_each(|x| *x *= scale_input);
            let s_bb = ues[0]
                .forward(&mut g, &bind, &img, s_csi, Some(f_rf))
                .unwrap();
            assert_eq!(
                g.value(s_bb).shape,
                vec![cfg.n_rf_tx, cfg.data_symbols * cfg.subcarriers]
            );
            // ||F s||_F^2 == P_t * N_c * Q to 1e-9.
            let p = g.matmul(f_rf, s_bb).unwrap();
            let power = g.value(p).sq_norm();
            let want = TRANSMIT_POWER * alloc.count(0) as f64;
            assert!((power - want).abs() < 1e-9, "power {power} vs {want}");
        }
    }

    #[test]
    fn superposition_identity_recovery_and_linearity() {
        // 1 user, H = identity embedding, selector beamformers, no noise:
        // the received grid equals the transmit feature exactly.
        let n_r = 4;
        let n_t = 3;
        let n_rf = 2;
        let mut data = vec![0.0; 2 * 1 * 2 * 4 * n_r * n_t];
        // H[q,n] = [I_3; 0] for all (q, n).
        for q in 0..2 {
            for n in 0..4 {
                for i in 0..3 {
                    let base = 2 * ((((0 * 2 + q) * 4 + n) * n_r + i) * n_t + i);
                    data[base] = 1.0;
                }
            }
        }
        let channels = ChannelSet {
            users: 1,
            symbols: 2,
            subcarriers: 4,
            n_rx: n_r,
            n_tx: n_t,
            noise_var: 0.0,
            data,
        };
        let alloc = ResourceAllocation::full(1, 2, 4);
        let mut rng = RngStream::derive(23, "x");
        let mut sd = vec![0.0; 2 * n_rf * 8];
        for x in sd.iter_mut() {
            *x = rng.normal();
        }
        let run = |scale: f64| {
            let mut g = Graph::new();
            let mut s = Tensor::from_complex(&[n_rf, 8], sd.clone());
            s.data.iter_mut().for_each(|x| *x *= scale);
            let sv = g.constant(s);
            // F selects tx antennas 0..2 per stream; W selects rx 0..2.
            let mut f = Tensor::zeros(&[n_t, n_rf], Dtype::Complex);
            f.data[2 * 0] = 1.0; // (0,0)
            f.data[2 * 3] = 1.0; // (1,1)
            let mut w = Tensor::zeros(&[n_rf, n_r], Dtype::Complex);
            w.data[2 * 0] = 1.0;
            w.data[2 * 5] = 1.0;
            let fv = g.constant(f);
            let wv = g.constant(w);
            let mut noise = RngStream::derive(0, "z");
            let y = transmit_superpose(
                &mut g,
                &[sv],
                &[fv],
                wv,
                &channels,
                0,
                &alloc,
                0.0,
                &mut noise,
            )
            .unwrap();
            g.value(y).data.clone()
        };
        let y1 = run(1.0);
        for (a, b) in y1.iter().zip(&sd) {
            assert!((a - b).abs() < 1e-12);
        }
        // Linearity at zero noise: transmit(2s) = 2 transmit(s).
        let y2 = run(2.0);
        for (a, b) in y2.iter().zip(&y1) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn superposition_matches_scalar_oracle() {
        let cfg = {
            let mut c = task_cfg();
            c.n_tx = 2;
            c.n_rx = 4;
            c.subcarriers = 4;
            c.data_symbols = 2;
            c.csirs_symbols = 2;
            c
        };
        let phys = cfg.channel_physics();
        let mut rng = RngStream::derive(29, "ch");
        let ps = sample_paths(&phys, &mut rng).unwrap();
        let channels = assemble_channel(&ps, &phys, cfg.total_symbols(), 0.0).unwrap();
        let alloc = ResourceAllocation::full(cfg.users, cfg.data_symbols, cfg.subcarriers);
        let cm = |a: (f64, f64), b: (f64, f64)| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);

        let mut g = Graph::new();
        let mut s_vars = Vec::new();
        let mut f_vars = Vec::new();
        let mut s_raw = Vec::new();
        let mut f_raw = Vec::new();
        for _ in 0..cfg.users {
            let n_cols = alloc.count(0);
            let sd: Vec<f64> = (0..2 * cfg.n_rf_tx * n_cols).map(|_| rng.normal()).collect();
            let s = Tensor::from_complex(&[cfg.n_rf_tx, n_cols], sd.clone());
            s_raw.push(s.clone());
            s_vars.push(g.constant(s));
            let fd: Vec<f64> = (0..2 * cfg.n_tx * cfg.n_rf_tx).map(|_| rng.normal()).collect();
            let f = Tensor::from_complex(&[cfg.n_tx, cfg.n_rf_tx], fd.clone());
            f_raw.push(f.clone());
            f_vars.push(g.constant(f));
        }
        let wd: Vec<f64> = (0..2 * cfg.n_rf_rx * cfg.n_rx).map(|_| rng.normal()).collect();
        let w = Tensor::from_complex(&[cfg.n_rf_rx, cfg.n_rx], wd.clone());
        let wv = g.constant(w.clone());
        let mut noise = RngStream::derive(0, "z");
        let y = transmit_superpose(
            &mut g,
            &s_vars,
            &f_vars,
            wv,
            &channels,
            cfg.csirs_symbols,
            &alloc,
            0.0,
            &mut noise,
        )
        .unwrap();

        // Scalar oracle: y_bb[i, q*N_c+n] = sum_r W[i,r] sum_k sum_t H[r,t] (F s)[t]
        for q in 0..cfg.data_symbols {
            for n in 0..cfg.subcarriers {
                for i in 0..cfg.n_rf_rx {
                    let mut want = (0.0, 0.0);
                    for k in 0..cfg.users {
                        let h = channels.mat(k, cfg.csirs_symbols + q, n);
                        // antenna signal = F s
                        for r in 0..cfg.n_rx {
                            for t in 0..cfg.n_tx {
                                for j in 0..cfg.n_rf_tx {
                                    let s_col = s_raw[k].c_at(j * alloc.count(k) + (q * cfg.subcarriers + n));
                                    let f_el = f_raw[k].c_at(t * cfg.n_rf_tx + j);
                                    let prod = cm(cm(h.c_at(r * cfg.n_tx + t), f_el), s_col);
                                    let w_el = w.c_at(i * cfg.n_rx + r);
                                    let term = cm(w_el, prod);
                                    want.0 += term.0;
                                    want.1 += term.1;
                                }
                            }
                        }
                    }
                    let got = g.value(y).c_at(i * (cfg.data_symbols * cfg.subcarriers) + q * cfg.subcarriers + n);
                    assert!(
                        (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12,
                        "q={q} n={n} i={i}: {got:?} vs {want:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn orthogonal_allocation_has_no_overlap_and_half_budget() {
        let alloc = ResourceAllocation::orthogonal(2, 2, 16).unwrap();
        assert_eq!(alloc.count(0), 16);
        assert_eq!(alloc.count(1), 16);
        for re in &alloc.per_user[0] {
            assert!(!alloc.per_user[1].contains(re));
        }
        let full = ResourceAllocation::full(2, 2, 16);
        assert_eq!(alloc.count(0) * 2, full.count(0));
        // Odd symbols fall back to a subcarrier split.
        let alloc = ResourceAllocation::orthogonal(2, 1, 16).unwrap();
        assert_eq!(alloc.count(0), 8);
        assert!(ResourceAllocation::orthogonal(3, 2, 16).is_err());
    }

    #[test]
    fn bs_msfnet_contract() {
        let cfg = task_cfg();
        let (store, ues, bs, alloc) = msf_setup(&cfg);
        let mut rng = RngStream::derive(31, "s");
        let sample = gen_multimodal_sample(&mut rng, &cfg);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let zero_csi = Tensor::zeros(&[cfg.subcarriers, cfg.model.d_csi], Dtype::Real);
        let s_csi_a = g.constant(zero_csi.clone());
        let s_csi_b = g.constant(zero_csi.clone());
        let sa = ues[0]
            .forward(&mut g, &bind, &sample.mod_a, s_csi_a, None)
            .unwrap();
        let sb = ues[1]
            .forward(&mut g, &bind, &sample.mod_b, s_csi_b, None)
            .unwrap();
        let y = identity_received(&mut g, &[sa, sb], &alloc).unwrap();
        let s_csi_bs = g.constant(zero_csi);
        let logits = bs.forward(&mut g, &bind, y, s_csi_bs).unwrap();
        assert_eq!(
            g.value(logits).shape,
            vec![cfg.task.classes, cfg.task.img_h, cfg.task.img_w]
        );
        // Softmax over the class axis sums to one.
        let flat = g
            .reshape(logits, &[cfg.task.classes, cfg.task.img_h * cfg.task.img_w])
            .unwrap();
        let sm = g.softmax(flat, 0).unwrap();
        for p in 0..cfg.task.img_h * cfg.task.img_w {
            let s: f64 = (0..cfg.task.classes)
                .map(|c| g.value(sm).data[c * cfg.task.img_h * cfg.task.img_w + p])
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // Loss wiring: uniform logits sanity is covered in nnblocks; here
        // check the seg loss runs and is finite.
        let loss = seg_loss(&mut g, logits, &sample.label).unwrap();
        assert!(g.value(loss).data[0].is_finite());
    }
}
