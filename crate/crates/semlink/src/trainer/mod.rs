//! Three-stage training: semantic pretraining over an identity channel,
//! physical-layer pretraining against spectral efficiency, then joint
//! end-to-end training on the segmentation loss. Plus metric logging,
//! best-validation checkpointing, and the classical-baseline training loop.
//!
//! Determinism: every random draw comes from a labelled stream of the
//! master seed; batch gradients are reduced over a fixed chunk grid in
//! index order, so results are bit-identical for any worker-thread count.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::baselines::{dmrs_chain, ls_channel_estimate, pca_combiner, pca_precoder, DmrsGrid};
use crate::channel::{assemble_channel, sample_paths, ChannelSet, PathSet};
use crate::config::{ExperimentConfig, StageParams, TRANSMIT_POWER};
use crate::error::{Error, Result};
use crate::nnblocks::{ConvDecoder, ConvEncoder, Linear};
use crate::numcore::{
    adam_step, clip_global_norm, AdamHyper, AdamState, Binding, Dtype, Graph, ParamStore, Tensor,
    Var,
};
use crate::phynet::{csirs_forward, spectral_efficiency, BsCsaNet, CsiRsParams, UeCsaNet};
use crate::rng::RngStream;
use crate::semnet::{
    identity_received, miou, pixel_accuracy, per_class_iou, argmax_classes, seg_loss,
    transmit_superpose, BsMsfNet, ResourceAllocation, SourceSample, UeMsfNet,
};

/// Fixed reduction grid so gradient sums are independent of thread count.
const REDUCE_CHUNKS: usize = 8;

pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("SEMLINK_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn fixed_clock() -> bool {
    std::env::var("SEMLINK_FIXED_CLOCK").map(|v| v == "1").unwrap_or(false)
}

// ── Model bundle ─────────────────────────────────────────────────────

pub struct Models {
    pub csirs: CsiRsParams,
    pub ue_csa: Vec<UeCsaNet>,
    pub bs_csa: BsCsaNet,
    pub ue_msf: Vec<UeMsfNet>,
    pub bs_msf: BsMsfNet,
    pub alloc: ResourceAllocation,
}

impl Models {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let alloc = ResourceAllocation::from_config(cfg)?;
        Ok(Models {
            csirs: CsiRsParams::from_config(cfg),
            ue_csa: (0..cfg.users).map(|k| UeCsaNet::from_config(cfg, k)).collect(),
            bs_csa: BsCsaNet::from_config(cfg),
            ue_msf: (0..cfg.users)
                .map(|k| UeMsfNet::from_config(cfg, k, &alloc))
                .collect::<Result<_>>()?,
            bs_msf: BsMsfNet::from_config(cfg)?,
            alloc,
        })
    }

    pub fn register_phy(&self, store: &mut ParamStore, rng: &mut RngStream) {
        self.csirs.register(store, rng);
        for ue in &self.ue_csa {
            ue.register(store, rng);
        }
        self.bs_csa.register(store, rng);
    }

    pub fn register_sem(&self, store: &mut ParamStore, rng: &mut RngStream) {
        for ue in &self.ue_msf {
            ue.register(store, rng);
        }
        self.bs_msf.register(store, rng);
    }
}

pub fn is_phy_param(name: &str) -> bool {
    name.starts_with("phy.")
}

pub fn is_sem_param(name: &str) -> bool {
    name.starts_with("sem.")
}

// ── Data providers ───────────────────────────────────────────────────

pub struct TaskData {
    pub train: Vec<SourceSample>,
    pub val: Vec<SourceSample>,
    pub test: Vec<SourceSample>,
}

pub fn make_task_data(cfg: &ExperimentConfig, master: u64) -> TaskData {
    let gen = |lo: usize, n: usize| -> Vec<SourceSample> {
        (0..n)
            .map(|i| crate::semnet::sample_at(master, (lo + i) as u64, cfg))
            .collect()
    };
    let t = cfg.task.train_samples;
    let v = cfg.task.val_samples;
    TaskData {
        train: gen(0, t),
        val: gen(t, v),
        test: gen(t + v, cfg.task.test_samples),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ChannelSplit {
    Train,
    Val,
    Test,
}

pub struct ChannelData {
    phys: crate::channel::ChannelPhysics,
    symbols: usize,
    noise_var: f64,
    train: Vec<PathSet>,
    val: Vec<PathSet>,
    test: Vec<PathSet>,
}

impl ChannelData {
    pub fn new(cfg: &ExperimentConfig, master: u64) -> Result<Self> {
        let phys = cfg.channel_physics();
        let draw = |label: &str, n: usize| -> Result<Vec<PathSet>> {
            let base = RngStream::derive(master, label);
            (0..n)
                .map(|i| {
                    let mut r = base.substream(i as u64);
                    sample_paths(&phys, &mut r)
                })
                .collect()
        };
        Ok(ChannelData {
            phys,
            symbols: cfg.total_symbols(),
            noise_var: cfg.noise_var(),
            train: draw("channel-train", cfg.channels.train)?,
            val: draw("channel-val", cfg.channels.val)?,
            test: draw("channel-test", cfg.channels.val)?,
        })
    }

    pub fn count(&self, split: ChannelSplit) -> usize {
        match split {
            ChannelSplit::Train => self.train.len(),
            ChannelSplit::Val => self.val.len(),
            ChannelSplit::Test => self.test.len(),
        }
    }

    pub fn drop_at(&self, split: ChannelSplit, idx: usize) -> Result<ChannelSet> {
        let paths = match split {
            ChannelSplit::Train => &self.train[idx],
            ChannelSplit::Val => &self.val[idx],
            ChannelSplit::Test => &self.test[idx],
        };
        assemble_channel(paths, &self.phys, self.symbols, self.noise_var)
    }
}

fn noise_stream(master: u64, ctx: &str, epoch: usize, idx: usize) -> RngStream {
    RngStream::derive(master, "noise")
        .labeled(ctx)
        .substream(epoch as u64)
        .substream(idx as u64)
}

// ── Parallel batch runner ────────────────────────────────────────────

type GradMapT = BTreeMap<String, Vec<f64>>;

/// Forward/backward of a batch: per-sample graphs in worker threads with a
/// fixed chunk grid merged in index order. Returns (mean loss, mean grads).
pub fn run_batch(
    store: &ParamStore,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    indices: &[usize],
    loss_fn: &(dyn Fn(&mut Graph, &Binding, usize) -> Result<Var> + Sync),
    threads: usize,
) -> Result<(f64, GradMapT)> {
    if indices.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let chunk_count = REDUCE_CHUNKS.min(indices.len());
    let per = indices.len().div_ceil(chunk_count);
    let chunks: Vec<&[usize]> = indices.chunks(per).collect();
    let results: Mutex<Vec<Option<Result<(f64, GradMapT)>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);

    let work = |chunk: &[usize]| -> Result<(f64, GradMapT)> {
        let mut loss_sum = 0.0;
        let mut grads: GradMapT = BTreeMap::new();
        for &idx in chunk {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, trainable);
            let loss = loss_fn(&mut g, &bind, idx)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at sample {idx}")));
            }
            loss_sum += lv;
            let gmap = g.backward(loss)?;
            for (name, var) in bind.iter() {
                if !trainable(name) {
                    continue;
                }
                if let Some(gv) = gmap.get(*var) {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(gv) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(name.clone(), gv.to_vec());
                        }
                    }
                }
            }
        }
        Ok((loss_sum, grads))
    };

    std::thread::scope(|s| {
        for _ in 0..threads.min(chunks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let out = work(chunks[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });

    let mut total_loss = 0.0;
    let mut total: GradMapT = BTreeMap::new();
    for slot in results.into_inner().unwrap() {
        let (l, g) = slot.expect("chunk processed")?;
        total_loss += l;
        for (name, gv) in g {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&gv) {
                        *a += b;
                    }
                }
                None => {
                    total.insert(name, gv);
                }
            }
        }
    }
    let n = indices.len() as f64;
    total_loss /= n;
    for gv in total.values_mut() {
        for x in gv.iter_mut() {
            *x /= n;
        }
    }
    Ok((total_loss, total))
}

/// Forward-only map over indices with the same fixed chunk grid.
pub fn run_eval<T: Send>(
    indices: &[usize],
    f: &(dyn Fn(usize) -> Result<T> + Sync),
    threads: usize,
) -> Result<Vec<T>> {
    let chunk_count = REDUCE_CHUNKS.min(indices.len().max(1));
    let per = indices.len().div_ceil(chunk_count).max(1);
    let chunks: Vec<&[usize]> = indices.chunks(per).collect();
    let results: Mutex<Vec<Option<Result<Vec<T>>>>> = Mutex::new(
        (0..chunks.len()).map(|_| None).collect(),
    );
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.min(chunks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let out: Result<Vec<T>> = chunks[i].iter().map(|&idx| f(idx)).collect();
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    let mut out = Vec::with_capacity(indices.len());
    for slot in results.into_inner().unwrap() {
        out.extend(slot.expect("chunk processed")?);
    }
    Ok(out)
}

// ── Forward pipelines ────────────────────────────────────────────────

pub struct PhyForward {
    pub f_rf: Vec<Var>,
    pub w_rf: Var,
    pub s_csi_ue: Vec<Var>,
    pub s_csi_bs: Var,
    pub bits: Vec<Var>,
    pub tx_power: Vec<f64>,
}

/// Reference signals -> UE nets -> feedback -> BS net.
pub fn phy_forward(
    g: &mut Graph,
    bind: &Binding,
    models: &Models,
    channels: &ChannelSet,
    sigma2: f64,
    noise: &mut RngStream,
) -> Result<PhyForward> {
    let out = csirs_forward(g, bind, &models.csirs, channels, sigma2, noise)?;
    let mut bits = Vec::with_capacity(models.ue_csa.len());
    let mut f_rf = Vec::with_capacity(models.ue_csa.len());
    let mut s_csi_ue = Vec::with_capacity(models.ue_csa.len());
    for (k, ue) in models.ue_csa.iter().enumerate() {
        let (b, f, s) = ue.forward(g, bind, out.received[k])?;
        bits.push(b);
        f_rf.push(f);
        s_csi_ue.push(s);
    }
    let (w_rf, s_csi_bs) = models.bs_csa.forward(g, bind, &bits)?;
    Ok(PhyForward {
        f_rf,
        w_rf,
        s_csi_ue,
        s_csi_bs,
        bits,
        tx_power: out.tx_power,
    })
}

fn zero_csi(g: &mut Graph, cfg: &ExperimentConfig) -> Var {
    g.constant(Tensor::zeros(
        &[cfg.subcarriers, cfg.model.d_csi],
        Dtype::Real,
    ))
}

fn user_image<'a>(sample: &'a SourceSample, user: usize) -> &'a Tensor {
    if user == 0 {
        &sample.mod_a
    } else {
        &sample.mod_b
    }
}

/// Identity-channel semantic forward: encoder -> gate(zero CSI) -> summed
/// baseband grid -> decoder.
pub fn semantic_identity_logits(
    g: &mut Graph,
    bind: &Binding,
    models: &Models,
    cfg: &ExperimentConfig,
    sample: &SourceSample,
) -> Result<Var> {
    let mut s_bb = Vec::with_capacity(models.ue_msf.len());
    for (k, ue) in models.ue_msf.iter().enumerate() {
        let csi = zero_csi(g, cfg);
        s_bb.push(ue.forward(g, bind, user_image(sample, k), csi, None)?);
    }
    let y = identity_received(g, &s_bb, &models.alloc)?;
    let csi_bs = zero_csi(g, cfg);
    models.bs_msf.forward(g, bind, y, csi_bs)
}

/// Full joint pipeline: pilots -> feedback -> beamformers -> semantic
/// transmission over the aged channel -> decoder.
pub fn joint_logits(
    g: &mut Graph,
    bind: &Binding,
    models: &Models,
    cfg: &ExperimentConfig,
    sample: &SourceSample,
    channels: &ChannelSet,
    pilot_noise: &mut RngStream,
    data_noise: &mut RngStream,
) -> Result<(Var, PhyForward)> {
    let phy = phy_forward(g, bind, models, channels, cfg.pilot_noise_var(), pilot_noise)?;
    let sigma2 = cfg.noise_var();
    let mut s_bb = Vec::with_capacity(models.ue_msf.len());
    for (k, ue) in models.ue_msf.iter().enumerate() {
        s_bb.push(ue.forward(
            g,
            bind,
            user_image(sample, k),
            phy.s_csi_ue[k],
            Some(phy.f_rf[k]),
        )?);
    }
    let y = transmit_superpose(
        g,
        &s_bb,
        &phy.f_rf,
        phy.w_rf,
        channels,
        cfg.csirs_symbols,
        &models.alloc,
        sigma2,
        data_noise,
    )?;
    let logits = models.bs_msf.forward(g, bind, y, phy.s_csi_bs)?;
    Ok((logits, phy))
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub miou: f64,
    pub eta: f64,
    pub seed: u64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "stage,epoch,loss,miou,eta,seed,wallclock_s";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9},{:.6},{:.6},{},{:.3}\n",
            r.stage, r.epoch, r.loss, r.miou, r.eta, r.seed, r.wallclock_s
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub miou: f64,
    pub pixel_acc: f64,
    pub eta: f64,
    pub per_class_iou: Vec<f64>,
}

// ── Stage driver ─────────────────────────────────────────────────────

pub struct StageOutcome {
    pub best_metric: f64,
    pub best_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub store: ParamStore,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

struct StageCtx<'a> {
    tag: &'a str,
    params: StageParams,
    train_count: usize,
    compat_hash: String,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, master_seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Trainer {
            cfg,
            master_seed,
            out_dir: out_dir.into(),
            threads: worker_threads(),
        }
    }

    fn stage_dir(&self, tag: &str) -> PathBuf {
        self.out_dir.join(tag)
    }

    /// Shared epoch loop: shuffled batches, clipped Adam steps, per-epoch
    /// validation, best-checkpoint retention, early stopping.
    fn run_stage(
        &self,
        mut store: ParamStore,
        ctx: StageCtx,
        trainable: &(dyn Fn(&str) -> bool + Sync),
        loss_fn: &(dyn Fn(&mut Graph, &Binding, usize, usize) -> Result<Var> + Sync),
        eval_fn: &dyn Fn(&ParamStore) -> Result<(f64, EvalMetrics)>,
    ) -> Result<StageOutcome> {
        let dir = self.stage_dir(ctx.tag);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let best_dir = dir.join("best");
        let hyper = AdamHyper {
            lr: ctx.params.lr,
            ..Default::default()
        };
        let mut adam = AdamState::new();
        let mut rows = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut since_best = 0usize;
        let start = Instant::now();
        let shuffle_base = RngStream::derive(self.master_seed, "shuffle").labeled(ctx.tag);
        for epoch in 0..ctx.params.epochs {
            let mut order: Vec<usize> = (0..ctx.train_count).collect();
            shuffle_base.substream(epoch as u64).shuffle(&mut order);
            let mut loss_acc = 0.0;
            let mut batches = 0usize;
            for batch in order.chunks(ctx.params.batch_size) {
                let per_epoch = |g: &mut Graph, b: &Binding, idx: usize| -> Result<Var> {
                    loss_fn(g, b, idx, epoch)
                };
                let (loss, mut grads) =
                    run_batch(&store, trainable, batch, &per_epoch, self.threads)?;
                clip_global_norm(&mut grads, self.cfg.training.grad_clip_norm);
                adam_step(&mut store, &grads, &mut adam, hyper)?;
                loss_acc += loss;
                batches += 1;
            }
            let (metric, em) = eval_fn(&store)?;
            let wall = if fixed_clock() {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            };
            rows.push(MetricsRow {
                stage: ctx.tag.to_string(),
                epoch,
                loss: loss_acc / batches.max(1) as f64,
                miou: em.miou,
                eta: em.eta,
                seed: self.master_seed,
                wallclock_s: wall,
            });
            if metric > best {
                best = metric;
                since_best = 0;
                    checkpoint::save_checkpoint(&best_dir, &store, &ctx.compat_hash, ctx.tag, epoch)?;
            } else {
                since_best += 1;
                if since_best >= self.cfg.training.patience {
                    break;
                }
            }
        }
        let metrics_path = dir.join("metrics.csv");
        write_metrics_csv(&metrics_path, &rows)?;
        let (best_store, _) = checkpoint::load_checkpoint(&best_dir)?;
        Ok(StageOutcome {
            best_metric: best,
            best_dir,
            metrics_path,
            rows,
            store: best_store,
        })
    }

    // Stage 1: semantic pretraining over the identity channel.
    pub fn stage1(&self) -> Result<StageOutcome> {
        self.stage1_init(None)
    }

    /// Stage 1 with an optional initial parameter store (resume).
    pub fn stage1_init(&self, init: Option<ParamStore>) -> Result<StageOutcome> {
        let models = Models::new(&self.cfg)?;
        let store = match init {
            Some(s) => s,
            None => {
                let mut store = ParamStore::new();
                let mut rng = RngStream::derive(self.master_seed, "init-sem");
                models.register_sem(&mut store, &mut rng);
                store
            }
        };
        let task = make_task_data(&self.cfg, self.master_seed);
        let cfg = &self.cfg;
        let loss_fn = |g: &mut Graph, b: &Binding, idx: usize, _epoch: usize| -> Result<Var> {
            let logits = semantic_identity_logits(g, b, &models, cfg, &task.train[idx])?;
            seg_loss(g, logits, &task.train[idx].label)
        };
        let threads = self.threads;
        let eval_fn = |store: &ParamStore| -> Result<(f64, EvalMetrics)> {
            let em = eval_identity(store, &models, cfg, &task.val, threads)?;
            Ok((em.miou, em))
        };
        self.run_stage(
            store,
            StageCtx {
                tag: "stage1",
                params: cfg.training.stage1,
                train_count: task.train.len(),
                compat_hash: cfg.sem_compat_hash(),
            },
            &is_sem_param,
            &loss_fn,
            &eval_fn,
        )
        .map_err(|e| self.diverged_context("stage1", e))
    }

    // Stage 2: physical-layer pretraining, loss = -eta.
    pub fn stage2(&self) -> Result<StageOutcome> {
        self.stage2_init(None)
    }

    /// Stage 2 with an optional initial parameter store (resume).
    pub fn stage2_init(&self, init: Option<ParamStore>) -> Result<StageOutcome> {
        let models = Models::new(&self.cfg)?;
        let store = match init {
            Some(s) => s,
            None => {
                let mut store = ParamStore::new();
                let mut rng = RngStream::derive(self.master_seed, "init-phy");
                models.register_phy(&mut store, &mut rng);
                store
            }
        };
        let chans = ChannelData::new(&self.cfg, self.master_seed)?;
        let cfg = &self.cfg;
        let master = self.master_seed;
        let loss_fn = |g: &mut Graph, b: &Binding, idx: usize, epoch: usize| -> Result<Var> {
            let ch = chans.drop_at(ChannelSplit::Train, idx)?;
            let mut noise = noise_stream(master, "csirs", epoch, idx);
            let phy = phy_forward(g, b, &models, &ch, cfg.pilot_noise_var(), &mut noise)?;
            let eta = spectral_efficiency(
                g,
                phy.w_rf,
                &phy.f_rf,
                &ch,
                cfg.csirs_symbols,
                cfg.data_symbols,
                TRANSMIT_POWER / cfg.noise_var(),
            )?;
            g.scale(eta, -1.0)
        };
        let threads = self.threads;
        let eval_fn = |store: &ParamStore| -> Result<(f64, EvalMetrics)> {
            let eta = eval_rate(store, &models, cfg, &chans, ChannelSplit::Val, master, threads)?;
            Ok((
                eta,
                EvalMetrics {
                    miou: 0.0,
                    pixel_acc: 0.0,
                    eta,
                    per_class_iou: Vec::new(),
                },
            ))
        };
        self.run_stage(
            store,
            StageCtx {
                tag: "stage2",
                params: cfg.training.stage2,
                train_count: chans.count(ChannelSplit::Train),
                compat_hash: cfg.phy_compat_hash(),
            },
            &is_phy_param,
            &loss_fn,
            &eval_fn,
        )
        .map_err(|e| self.diverged_context("stage2", e))
    }

    // Stage 3: joint end-to-end training from the two pretrained stages.
    pub fn stage3(&self, stage1_best: &Path, stage2_best: &Path) -> Result<StageOutcome> {
        let (sem_store, m1) = checkpoint::load_checkpoint(stage1_best).map_err(|_| {
            Error::manifest("stage1", format!("missing checkpoint at {}", stage1_best.display()))
        })?;
        let (phy_store, m2) = checkpoint::load_checkpoint(stage2_best).map_err(|_| {
            Error::manifest("stage2", format!("missing checkpoint at {}", stage2_best.display()))
        })?;
        let want_sem = self.cfg.sem_compat_hash();
        if m1.config_hash != want_sem {
            return Err(Error::manifest(
                "stage1",
                format!(
                    "checkpoint hash {} does not match the current semantic configuration {want_sem}",
                    m1.config_hash
                ),
            ));
        }
        let want_phy = self.cfg.phy_compat_hash();
        if m2.config_hash != want_phy {
            return Err(Error::manifest(
                "stage2",
                format!(
                    "checkpoint hash {} does not match the current physical-layer configuration {want_phy}",
                    m2.config_hash
                ),
            ));
        }
        let mut store = sem_store;
        store.absorb(phy_store);
        self.stage3_with_store(store)
    }

    /// Stage 3 from an already-assembled joint parameter store (resume).
    pub fn stage3_with_store(&self, store: ParamStore) -> Result<StageOutcome> {
        let models = Models::new(&self.cfg)?;
        let task = make_task_data(&self.cfg, self.master_seed);
        let chans = ChannelData::new(&self.cfg, self.master_seed)?;
        let cfg = &self.cfg;
        let master = self.master_seed;
        let train_channels = chans.count(ChannelSplit::Train);
        let loss_fn = |g: &mut Graph, b: &Binding, idx: usize, epoch: usize| -> Result<Var> {
            // Re-pair samples and channel drops across epochs.
            let ch_idx = (idx + epoch * 7919) % train_channels;
            let ch = chans.drop_at(ChannelSplit::Train, ch_idx)?;
            let mut pn = noise_stream(master, "joint-csirs", epoch, idx);
            let mut dn = noise_stream(master, "joint-data", epoch, idx);
            let (logits, _) =
                joint_logits(g, b, &models, cfg, &task.train[idx], &ch, &mut pn, &mut dn)?;
            seg_loss(g, logits, &task.train[idx].label)
        };
        let all = |_: &str| true;
        let threads = self.threads;
        let eval_fn = |store: &ParamStore| -> Result<(f64, EvalMetrics)> {
            let em = eval_joint(store, &models, cfg, &task.val, &chans, ChannelSplit::Val, master, threads)?;
            Ok((em.miou, em))
        };
        self.run_stage(
            store,
            StageCtx {
                tag: "stage3",
                params: cfg.training.stage3,
                train_count: task.train.len(),
                compat_hash: cfg.arch_hash(),
            },
            &all,
            &loss_fn,
            &eval_fn,
        )
        .map_err(|e| self.diverged_context("stage3", e))
    }

    fn diverged_context(&self, stage: &str, e: Error) -> Error {
        match e {
            Error::Diverged(msg) => Error::Diverged(format!("{stage}: {msg}")),
            other => other,
        }
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

fn aggregate(
    results: Vec<(f64, f64, Vec<Option<f64>>)>,
    classes: usize,
    eta: f64,
) -> EvalMetrics {
    let n = results.len().max(1) as f64;
    let miou = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().map(|r| r.1).sum::<f64>() / n;
    let mut pci = vec![0.0; classes];
    let mut cnt = vec![0usize; classes];
    for (_, _, per) in &results {
        for (c, v) in per.iter().enumerate() {
            if let Some(x) = v {
                pci[c] += x;
                cnt[c] += 1;
            }
        }
    }
    for c in 0..classes {
        if cnt[c] > 0 {
            pci[c] /= cnt[c] as f64;
        }
    }
    EvalMetrics {
        miou,
        pixel_acc: acc,
        eta,
        per_class_iou: pci,
    }
}

/// Validation metrics over the identity channel (stage-1 operating point).
pub fn eval_identity(
    store: &ParamStore,
    models: &Models,
    cfg: &ExperimentConfig,
    samples: &[SourceSample],
    threads: usize,
) -> Result<EvalMetrics> {
    let indices: Vec<usize> = (0..samples.len()).collect();
    let f = |idx: usize| -> Result<(f64, f64, Vec<Option<f64>>)> {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let logits = semantic_identity_logits(&mut g, &bind, models, cfg, &samples[idx])?;
        let t = g.detach(logits);
        let pred = argmax_classes(&t);
        Ok((
            miou(&t, &samples[idx].label, cfg.task.classes),
            pixel_accuracy(&t, &samples[idx].label),
            per_class_iou(&pred, &samples[idx].label, cfg.task.classes),
        ))
    };
    let results = run_eval(&indices, &f, threads)?;
    Ok(aggregate(results, cfg.task.classes, 0.0))
}

/// Mean spectral efficiency over a channel split (stage-2 metric).
pub fn eval_rate(
    store: &ParamStore,
    models: &Models,
    cfg: &ExperimentConfig,
    chans: &ChannelData,
    split: ChannelSplit,
    master: u64,
    threads: usize,
) -> Result<f64> {
    let indices: Vec<usize> = (0..chans.count(split)).collect();
    let f = |idx: usize| -> Result<f64> {
        let ch = chans.drop_at(split, idx)?;
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let mut noise = noise_stream(master, "eval-csirs", 0, idx);
        let phy = phy_forward(&mut g, &bind, models, &ch, cfg.pilot_noise_var(), &mut noise)?;
        let eta = spectral_efficiency(
            &mut g,
            phy.w_rf,
            &phy.f_rf,
            &ch,
            cfg.csirs_symbols,
            cfg.data_symbols,
            TRANSMIT_POWER / cfg.noise_var(),
        )?;
        Ok(g.value(eta).data[0])
    };
    let etas = run_eval(&indices, &f, threads)?;
    Ok(etas.iter().sum::<f64>() / etas.len().max(1) as f64)
}

/// Full-pipeline metrics on a sample set over a channel split.
pub fn eval_joint(
    store: &ParamStore,
    models: &Models,
    cfg: &ExperimentConfig,
    samples: &[SourceSample],
    chans: &ChannelData,
    split: ChannelSplit,
    master: u64,
    threads: usize,
) -> Result<EvalMetrics> {
    let indices: Vec<usize> = (0..samples.len()).collect();
    let n_ch = chans.count(split).max(1);
    let f = |idx: usize| -> Result<(f64, f64, Vec<Option<f64>>, f64)> {
        let ch = chans.drop_at(split, idx % n_ch)?;
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        let mut pn = noise_stream(master, "eval-joint-csirs", 0, idx);
        let mut dn = noise_stream(master, "eval-joint-data", 0, idx);
        let (logits, phy) =
            joint_logits(&mut g, &bind, models, cfg, &samples[idx], &ch, &mut pn, &mut dn)?;
        let eta = spectral_efficiency(
            &mut g,
            phy.w_rf,
            &phy.f_rf,
            &ch,
            cfg.csirs_symbols,
            cfg.data_symbols,
            TRANSMIT_POWER / cfg.noise_var(),
        )?;
        let ev = g.value(eta).data[0];
        let t = g.detach(logits);
        let pred = argmax_classes(&t);
        Ok((
            miou(&t, &samples[idx].label, cfg.task.classes),
            pixel_accuracy(&t, &samples[idx].label),
            per_class_iou(&pred, &samples[idx].label, cfg.task.classes),
            ev,
        ))
    };
    let results = run_eval(&indices, &f, threads)?;
    let eta = results.iter().map(|r| r.3).sum::<f64>() / results.len().max(1) as f64;
    let slim: Vec<(f64, f64, Vec<Option<f64>>)> = results
        .into_iter()
        .map(|(a, b, c, _)| (a, b, c))
        .collect();
    Ok(aggregate(slim, cfg.task.classes, eta))
}

// ── Classical baseline training ──────────────────────────────────────

/// Separated-design reference: conv codecs and a fusion decoder around the
/// DMRS + LS + ZF chain with PCA beamformers from the pilot-phase channel.
pub struct BaselineNets {
    pub enc: Vec<ConvEncoder>,
    pub out: Vec<Linear>,
    pub in_lin: Linear,
    pub dec: ConvDecoder,
    pub grid: DmrsGrid,
    pub n_data: Vec<usize>,
    d_s: usize,
    feat: (usize, usize),
    streams: usize,
}

impl BaselineNets {
    pub fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Self> {
        let grid = DmrsGrid::new(
            cfg.users,
            cfg.data_symbols,
            cfg.subcarriers,
            cfg.n_rf_tx,
            rng,
        )?;
        let m = &cfg.model;
        let mut enc = Vec::new();
        let mut out = Vec::new();
        let mut n_data = Vec::new();
        let mut total_in = 0;
        for k in 0..cfg.users {
            let in_ch = if k == 0 { 3 } else { 1 };
            enc.push(ConvEncoder::new(
                format!("bl.ue{k}.enc"),
                in_ch,
                m.d_s,
                (cfg.task.img_h, cfg.task.img_w),
                (m.feat_h, m.feat_w),
            )?);
            let nd = grid.data_res(k).len();
            out.push(Linear::new(
                format!("bl.ue{k}.out"),
                m.d_s * m.feat_h * m.feat_w,
                2 * nd * cfg.n_rf_tx,
            ));
            total_in += 2 * nd * cfg.n_rf_tx;
            n_data.push(nd);
        }
        Ok(BaselineNets {
            enc,
            out,
            in_lin: Linear::new("bl.bs.in", total_in, m.d_s * m.feat_h * m.feat_w),
            dec: ConvDecoder::new(
                "bl.bs.dec",
                m.d_s,
                cfg.task.classes,
                (cfg.task.img_h, cfg.task.img_w),
                (m.feat_h, m.feat_w),
            )?,
            grid,
            n_data,
            d_s: m.d_s,
            feat: (m.feat_h, m.feat_w),
            streams: cfg.n_rf_tx,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        for e in &self.enc {
            e.register(store, rng);
        }
        for o in &self.out {
            o.register(store, rng);
        }
        self.in_lin.register(store, rng);
        self.dec.register(store, rng);
    }

    /// Per-user transmit features [streams x n_data], normalized to unit
    /// per-element average power.
    pub fn tx_features(
        &self,
        g: &mut Graph,
        bind: &Binding,
        sample: &SourceSample,
    ) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(self.enc.len());
        for k in 0..self.enc.len() {
            let img = g.constant(user_image(sample, k).clone());
            let f = self.enc[k].forward(g, bind, img)?;
            let n = g.value(f).numel();
            let flat = g.reshape(f, &[n])?;
            let v = self.out[k].forward_vec(g, bind, flat)?;
            let z = g.complex_from_pair(v)?;
            let s = g.reshape(z, &[self.streams, self.n_data[k]])?;
            let nrm = g.frobenius_norm(s)?;
            if g.value(nrm).data[0] == 0.0 {
                return Err(Error::numeric("baseline", "zero-norm transmit feature"));
            }
            let inv = g.recip(nrm)?;
            let factor = g.scale(inv, (self.n_data[k] as f64).sqrt())?;
            features.push(g.scale_var(s, factor)?);
        }
        Ok(features)
    }

    /// Decode concatenated (equalized or ideal) per-user features.
    pub fn decode(&self, g: &mut Graph, bind: &Binding, features: &[Var]) -> Result<Var> {
        let mut flats = Vec::with_capacity(features.len());
        for f in features {
            let ri = g.real_imag_concat(*f)?;
            let n = g.value(ri).numel();
            flats.push(g.reshape(ri, &[n])?);
        }
        let cat = g.concat(&flats, 0)?;
        let feat = self.in_lin.forward_vec(g, bind, cat)?;
        let feat = g.reshape(feat, &[self.d_s, self.feat.0, self.feat.1])?;
        self.dec.forward(g, bind, feat)
    }
}

fn is_baseline_decoder_param(name: &str) -> bool {
    name.starts_with("bl.bs.")
}

pub struct BaselineOutcome {
    pub test_metrics: EvalMetrics,
    pub best_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Train the separated baseline: codecs pretrained through an ideal link
/// (same budget as stage 1), then the fusion decoder retrained on
/// ZF-equalized features from the classical chain (same budget as stage 3).
pub fn train_dmrs_baseline(trainer: &Trainer) -> Result<BaselineOutcome> {
    let cfg = &trainer.cfg;
    let master = trainer.master_seed;
    let mut grid_rng = RngStream::derive(master, "dmrs-grid");
    let nets = BaselineNets::new(cfg, &mut grid_rng)?;
    let mut store = ParamStore::new();
    let mut rng = RngStream::derive(master, "init-baseline");
    nets.register(&mut store, &mut rng);
    let task = make_task_data(cfg, master);
    let chans = ChannelData::new(cfg, master)?;

    // Phase A: ideal link (s_hat = s), everything trainable.
    let loss_ideal = |g: &mut Graph, b: &Binding, idx: usize, _e: usize| -> Result<Var> {
        let feats = nets.tx_features(g, b, &task.train[idx])?;
        let logits = nets.decode(g, b, &feats)?;
        seg_loss(g, logits, &task.train[idx].label)
    };
    let threads = trainer.threads;
    let eval_ideal = |store: &ParamStore| -> Result<(f64, EvalMetrics)> {
        let idx: Vec<usize> = (0..task.val.len()).collect();
        let f = |i: usize| -> Result<(f64, f64, Vec<Option<f64>>)> {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, &|_| false);
            let feats = nets.tx_features(&mut g, &bind, &task.val[i])?;
            let logits = nets.decode(&mut g, &bind, &feats)?;
            let t = g.detach(logits);
            let pred = argmax_classes(&t);
            Ok((
                miou(&t, &task.val[i].label, cfg.task.classes),
                pixel_accuracy(&t, &task.val[i].label),
                per_class_iou(&pred, &task.val[i].label, cfg.task.classes),
            ))
        };
        let res = run_eval(&idx, &f, threads)?;
        let em = aggregate(res, cfg.task.classes, 0.0);
        Ok((em.miou, em))
    };
    let all = |_: &str| true;
    let phase_a = trainer.run_stage(
        store,
        StageCtx {
            tag: "baseline_ideal",
            params: cfg.training.stage1,
            train_count: task.train.len(),
            compat_hash: cfg.arch_hash(),
        },
        &all,
        &loss_ideal,
        &eval_ideal,
    )?;

    // Phase B: decoder retraining on chain-equalized features.
    let store = phase_a.store;
    let n_train_ch = chans.count(ChannelSplit::Train).max(1);
    // The chain runs outside any graph; equalized features re-enter the
    // decoder graph as constants. Encoders stay frozen at their phase-A
    // values, shared read-only across workers.
    let store_arc = std::sync::Arc::new(store.clone());
    let nets_ref = &nets;
    let chans_ref = &chans;
    let task_ref = &task;
    let frozen = store_arc.clone();
    let loss_chain = move |g: &mut Graph, b: &Binding, idx: usize, epoch: usize| -> Result<Var> {
        let ch = chans_ref.drop_at(ChannelSplit::Train, (idx + epoch * 7919) % n_train_ch)?;
        let mut noise = noise_stream(master, "baseline-chain", epoch, idx);
        let eq = baseline_chain_features(
            nets_ref,
            cfg,
            &frozen,
            &task_ref.train[idx],
            &ch,
            master,
            &mut noise,
        )?;
        let eq_vars: Vec<Var> = eq.into_iter().map(|t| g.constant(t)).collect();
        let logits = nets_ref.decode(g, b, &eq_vars)?;
        seg_loss(g, logits, &task_ref.train[idx].label)
    };
    let frozen2 = store_arc.clone();
    let eval_chain = move |store: &ParamStore| -> Result<(f64, EvalMetrics)> {
        let em = eval_baseline_chain(
            store,
            &frozen2,
            nets_ref,
            cfg,
            &task_ref.val,
            chans_ref,
            ChannelSplit::Val,
            master,
            threads,
        )?;
        Ok((em.miou, em))
    };
    let phase_b = trainer.run_stage(
        store_arc.as_ref().clone(),
        StageCtx {
            tag: "baseline_chain",
            params: cfg.training.stage3,
            train_count: task.train.len(),
            compat_hash: cfg.arch_hash(),
        },
        &is_baseline_decoder_param,
        &loss_chain,
        &eval_chain,
    )?;

    let test = eval_baseline_chain(
        &phase_b.store,
        &store_arc,
        &nets,
        cfg,
        &task.test,
        &chans,
        ChannelSplit::Test,
        master,
        threads,
    )?;
    let mut rows = phase_a.rows;
    rows.extend(phase_b.rows.clone());
    Ok(BaselineOutcome {
        test_metrics: test,
        best_dir: phase_b.best_dir,
        rows,
    })
}

/// Detached encoder forward + classical pilot-limited channel estimation +
/// PCA beamformers + DMRS chain, giving the equalized per-user features as
/// plain tensors. The classical receiver estimates CSI from the same pilot
/// budget (L symbols at the pilot SNR) that the learned system gets.
fn baseline_chain_features(
    nets: &BaselineNets,
    cfg: &ExperimentConfig,
    encoder_store: &ParamStore,
    sample: &SourceSample,
    ch: &ChannelSet,
    master: u64,
    noise: &mut RngStream,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bind = encoder_store.bind(&mut g, &|_| false);
    let feats = nets.tx_features(&mut g, &bind, sample)?;
    let data: Vec<Tensor> = feats.iter().map(|&f| g.detach(f)).collect();
    let est = ls_channel_estimate(ch, cfg.csirs_symbols, cfg.pilot_noise_var(), master, noise)?;
    let w = pca_combiner(&est, 0, cfg.csirs_symbols, cfg.n_rf_rx)?;
    let fs: Vec<Tensor> = (0..cfg.users)
        .map(|k| pca_precoder(&est, k, 0, cfg.csirs_symbols, cfg.n_rf_tx))
        .collect::<Result<_>>()?;
    let eq = dmrs_chain(
        &data,
        &nets.grid,
        &w,
        &fs,
        ch,
        cfg.csirs_symbols,
        cfg.noise_var(),
        noise,
    )?;
    Ok(eq.into_iter().map(|e| e.symbols).collect())
}

#[allow(clippy::too_many_arguments)]
fn eval_baseline_chain(
    decoder_store: &ParamStore,
    encoder_store: &ParamStore,
    nets: &BaselineNets,
    cfg: &ExperimentConfig,
    samples: &[SourceSample],
    chans: &ChannelData,
    split: ChannelSplit,
    master: u64,
    threads: usize,
) -> Result<EvalMetrics> {
    let n_ch = chans.count(split).max(1);
    let indices: Vec<usize> = (0..samples.len()).collect();
    let f = |idx: usize| -> Result<(f64, f64, Vec<Option<f64>>)> {
        let ch = chans.drop_at(split, idx % n_ch)?;
        let mut noise = noise_stream(master, "baseline-eval", 0, idx);
        let eq =
            baseline_chain_features(nets, cfg, encoder_store, &samples[idx], &ch, master, &mut noise)?;
        let mut g = Graph::new();
        let bind = decoder_store.bind(&mut g, &|_| false);
        let eq_vars: Vec<Var> = eq.into_iter().map(|t| g.constant(t)).collect();
        let logits = nets.decode(&mut g, &bind, &eq_vars)?;
        let t = g.detach(logits);
        let pred = argmax_classes(&t);
        Ok((
            miou(&t, &samples[idx].label, cfg.task.classes),
            pixel_accuracy(&t, &samples[idx].label),
            per_class_iou(&pred, &samples[idx].label, cfg.task.classes),
        ))
    };
    let results = run_eval(&indices, &f, threads)?;
    Ok(aggregate(results, cfg.task.classes, 0.0))
}
