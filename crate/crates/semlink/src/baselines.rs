//! Classical separated-design references: PCA analog beamforming from the
//! pilot-phase channel, the fully-digital SVD rate bound, and a DMRS-grid
//! least-squares estimation + ZF detection chain over orthogonal per-user
//! resources.

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::numcore::{linalg, Dtype, Tensor};
use crate::rng::RngStream;

/// Sum over users/symbols/subcarriers of log2(1 + rho * s_i^2) over the top
/// min(N_RF_r, N_RF_t) singular values of the raw channel.
pub fn svd_bound(
    channels: &ChannelSet,
    first_symbol: usize,
    symbol_count: usize,
    rho: f64,
    streams: usize,
) -> f64 {
    let mut acc = 0.0;
    for k in 0..channels.users {
        for q in first_symbol..first_symbol + symbol_count {
            for n in 0..channels.subcarriers {
                let h = channels.mat(k, q, n);
                let s2 = linalg::singular_values_sq(&h.data, channels.n_rx, channels.n_tx);
                for v in s2.iter().take(streams) {
                    acc += (1.0 + rho * v).log2();
                }
            }
        }
    }
    acc
}

/// Provable ceiling for the printed rate formula under unit-modulus analog
/// beamformers: every singular value of W H F is bounded by
/// sqrt(N_r N_RF_r) * s_i(H) * sqrt(N_t N_RF_t).
pub fn analog_gain_bound(
    channels: &ChannelSet,
    first_symbol: usize,
    symbol_count: usize,
    rho: f64,
    n_rf_rx: usize,
    n_rf_tx: usize,
) -> f64 {
    let gain = (channels.n_rx * n_rf_rx * channels.n_tx * n_rf_tx) as f64;
    svd_bound(channels, first_symbol, symbol_count, rho * gain, n_rf_rx.min(n_rf_tx))
}

/// Unit-modulus beamformers with i.i.d. uniform phases.
pub fn random_phase_beamformers(
    n_tx: usize,
    n_rx: usize,
    n_rf_tx: usize,
    n_rf_rx: usize,
    users: usize,
    rng: &mut RngStream,
) -> (Tensor, Vec<Tensor>) {
    let unit = |shape: &[usize], rng: &mut RngStream| {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let ph = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
            data[2 * i] = ph.cos();
            data[2 * i + 1] = ph.sin();
        }
        Tensor::from_complex(shape, data)
    };
    let w = unit(&[n_rf_rx, n_rx], rng);
    let fs = (0..users).map(|_| unit(&[n_tx, n_rf_tx], rng)).collect();
    (w, fs)
}

fn phase_matrix(vecs: &[f64], rows: usize, cols_total: usize, take: usize) -> Vec<(usize, f64)> {
    // Helper extracting angles of the first `take` columns.
    let mut out = Vec::with_capacity(rows * take);
    for i in 0..rows {
        for j in 0..take {
            let re = vecs[2 * (i * cols_total + j)];
            let im = vecs[2 * (i * cols_total + j) + 1];
            out.push((i * take + j, im.atan2(re)));
        }
    }
    out
}

/// Per-user analog precoder: phases of the leading eigenvectors of the
/// pilot-phase transmit covariance sum_{q,n} H^H H.
pub fn pca_precoder(
    channels: &ChannelSet,
    user: usize,
    first_symbol: usize,
    symbol_count: usize,
    n_rf_tx: usize,
) -> Result<Tensor> {
    let n_t = channels.n_tx;
    let mut cov = vec![0.0; 2 * n_t * n_t];
    for q in first_symbol..first_symbol + symbol_count {
        for n in 0..channels.subcarriers {
            let h = channels.mat(user, q, n);
            linalg::cmm_acc(&mut cov, &h.data, true, &h.data, false, n_t, channels.n_rx, n_t);
        }
    }
    let (vals, vecs) = linalg::hermitian_eig(&cov, n_t);
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("pca_precoder", "eigensolver returned non-finite values"));
    }
    let mut f = Tensor::zeros(&[n_t, n_rf_tx], Dtype::Complex);
    for (idx, ang) in phase_matrix(&vecs, n_t, n_t, n_rf_tx) {
        f.data[2 * idx] = ang.cos();
        f.data[2 * idx + 1] = ang.sin();
    }
    Ok(f)
}

/// Shared analog combiner: conjugate phases of the leading eigenvectors of
/// the pilot-phase receive covariance sum_{k,q,n} H H^H, shaped
/// [N_RF_r x N_r].
pub fn pca_combiner(
    channels: &ChannelSet,
    first_symbol: usize,
    symbol_count: usize,
    n_rf_rx: usize,
) -> Result<Tensor> {
    let n_r = channels.n_rx;
    let mut cov = vec![0.0; 2 * n_r * n_r];
    for k in 0..channels.users {
        for q in first_symbol..first_symbol + symbol_count {
            for n in 0..channels.subcarriers {
                let h = channels.mat(k, q, n);
                linalg::cmm_acc(&mut cov, &h.data, false, &h.data, true, n_r, channels.n_tx, n_r);
            }
        }
    }
    let (vals, vecs) = linalg::hermitian_eig(&cov, n_r);
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("pca_combiner", "eigensolver returned non-finite values"));
    }
    let mut w = Tensor::zeros(&[n_rf_rx, n_r], Dtype::Complex);
    for j in 0..n_rf_rx {
        for i in 0..n_r {
            let re = vecs[2 * (i * n_r + j)];
            let im = vecs[2 * (i * n_r + j) + 1];
            let ang = im.atan2(re);
            // Row = conjugated phases so the combiner aligns with the mode.
            w.data[2 * (j * n_r + i)] = ang.cos();
            w.data[2 * (j * n_r + i) + 1] = -ang.sin();
        }
    }
    Ok(w)
}

// ── DMRS-grid estimation + ZF chain ──────────────────────────────────

/// Demodulation reference-signal layout for one user's share of the grid:
/// pilots live on every second share symbol, spread evenly over that
/// symbol's subcarriers with one stream active per pilot (round-robin),
/// reserving exactly ceil(Q*N_c/4) elements per user. Symbols without
/// anchors rely on estimates from the nearest anchored symbol, which is
/// what ages under Doppler.
#[derive(Debug, Clone)]
pub struct DmrsGrid {
    /// Resource elements owned by each user (symbol, subcarrier).
    pub share: Vec<Vec<(usize, usize)>>,
    /// DMRS positions per user: (q, n, stream), subset of the share.
    pub pilots: Vec<Vec<(usize, usize, usize)>>,
    /// Unit-modulus QPSK pilot values per user, same order as `pilots`.
    pub pilot_symbols: Vec<Vec<(f64, f64)>>,
    pub symbols: usize,
    pub subcarriers: usize,
    pub streams: usize,
}

impl DmrsGrid {
    pub fn new(
        users: usize,
        symbols: usize,
        subcarriers: usize,
        streams: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let alloc = crate::semnet::ResourceAllocation::orthogonal(users, symbols, subcarriers)?;
        let budget = (symbols * subcarriers).div_ceil(4);
        let mut share = Vec::with_capacity(users);
        let mut pilots = Vec::with_capacity(users);
        let mut pilot_symbols = Vec::with_capacity(users);
        for k in 0..users {
            let res = alloc.per_user[k].clone();
            // Share symbols in order; anchors on every second one.
            let mut share_syms: Vec<usize> = res.iter().map(|&(q, _)| q).collect();
            share_syms.dedup();
            let anchored: Vec<usize> = share_syms.iter().copied().step_by(2).collect();
            let per_sym = budget.div_ceil(anchored.len());
            let mut p = Vec::new();
            let mut vals = Vec::new();
            let mut stream_rr = 0usize;
            for &q in &anchored {
                let subs: Vec<usize> = res
                    .iter()
                    .filter(|&&(qq, _)| qq == q)
                    .map(|&(_, n)| n)
                    .collect();
                let take = per_sym.min(budget - p.len()).min(subs.len());
                for i in 0..take {
                    // Evenly spread over the user's subcarriers.
                    let n = subs[i * subs.len() / take];
                    p.push((q, n, stream_rr));
                    stream_rr = (stream_rr + 1) % streams;
                    let quadrant = rng.below(4) as f64;
                    let ang = std::f64::consts::FRAC_PI_4 + quadrant * std::f64::consts::FRAC_PI_2;
                    vals.push((ang.cos(), ang.sin()));
                }
            }
            share.push(res);
            pilots.push(p);
            pilot_symbols.push(vals);
        }
        Ok(DmrsGrid {
            share,
            pilots,
            pilot_symbols,
            symbols,
            subcarriers,
            streams,
        })
    }

    /// Data resource elements (share minus DMRS) for a user, in order.
    pub fn data_res(&self, user: usize) -> Vec<(usize, usize)> {
        let pilot_set: std::collections::HashSet<(usize, usize)> = self.pilots[user]
            .iter()
            .map(|&(q, n, _)| (q, n))
            .collect();
        self.share[user]
            .iter()
            .copied()
            .filter(|re| !pilot_set.contains(re))
            .collect()
    }
}

/// Output of the classical receive chain for one user.
#[derive(Debug, Clone)]
pub struct EqualizedFeatures {
    /// ZF-equalized symbols, complex [streams x n_data_re].
    pub symbols: Tensor,
    /// Matching (q, n) order of the columns.
    pub res: Vec<(usize, usize)>,
    /// Mean squared estimation error of the interpolated equivalent
    /// channel against the true one (diagnostic).
    pub est_err: f64,
}

/// Transmit DMRS + data over the physical channel with fixed beamformers,
/// LS-estimate the equivalent channel at pilot positions, interpolate over
/// the share, and ZF-equalize the data elements.
///
/// `data[user]` holds the user's data symbols, complex
/// [streams x n_data_re], column order matching `grid.data_res(user)`.
pub fn dmrs_chain(
    data: &[Tensor],
    grid: &DmrsGrid,
    w_rf: &Tensor,
    f_rf: &[Tensor],
    channels: &ChannelSet,
    first_symbol: usize,
    sigma2: f64,
    rng: &mut RngStream,
) -> Result<Vec<EqualizedFeatures>> {
    let users = grid.share.len();
    let streams = grid.streams;
    let n_r = channels.n_rx;
    let n_rf_r = w_rf.shape[0];
    if data.len() != users || f_rf.len() != users {
        return Err(Error::shape("dmrs_chain", "per-user inputs mismatch"));
    }
    let cm = |a: (f64, f64), b: (f64, f64)| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);

    // Precompute H_equ = W H F per (user, q, n) for transmission.
    // Transmit grid: x[k][q][n] in stream space.
    let mut tx: Vec<Vec<Vec<(f64, f64)>>> =
        vec![vec![vec![(0.0, 0.0); streams]; grid.symbols * grid.subcarriers]; users];
    for k in 0..users {
        for (i, &(q, n, s)) in grid.pilots[k].iter().enumerate() {
            tx[k][q * grid.subcarriers + n][s] = grid.pilot_symbols[k][i];
        }
        let dres = grid.data_res(k);
        let d = &data[k];
        if d.shape != [streams, dres.len()] {
            return Err(Error::shape(
                "dmrs_chain",
                format!("user {k} data {:?} vs [{streams}, {}]", d.shape, dres.len()),
            ));
        }
        for (col, &(q, n)) in dres.iter().enumerate() {
            for s in 0..streams {
                tx[k][q * grid.subcarriers + n][s] = d.c_at(s * dres.len() + col);
            }
        }
    }

    // Received baseband grid y_bb[q][n] in RF-chain space.
    let mut ybb = vec![vec![(0.0, 0.0); n_rf_r]; grid.symbols * grid.subcarriers];
    for q in 0..grid.symbols {
        for n in 0..grid.subcarriers {
            let mut y = vec![(0.0, 0.0); n_r];
            for k in 0..users {
                let h = channels.mat(k, first_symbol + q, n);
                // antenna = H F x
                for r in 0..n_r {
                    let mut acc = (0.0, 0.0);
                    for t in 0..channels.n_tx {
                        for s in 0..streams {
                            let hf = cm(
                                h.c_at(r * channels.n_tx + t),
                                f_rf[k].c_at(t * streams + s),
                            );
                            let v = cm(hf, tx[k][q * grid.subcarriers + n][s]);
                            acc.0 += v.0;
                            acc.1 += v.1;
                        }
                    }
                    y[r].0 += acc.0;
                    y[r].1 += acc.1;
                }
            }
            if sigma2 > 0.0 {
                for yr in y.iter_mut() {
                    let (zr, zi) = rng.complex_normal(sigma2);
                    yr.0 += zr;
                    yr.1 += zi;
                }
            }
            for i in 0..n_rf_r {
                let mut acc = (0.0, 0.0);
                for r in 0..n_r {
                    let v = cm(w_rf.c_at(i * n_r + r), y[r]);
                    acc.0 += v.0;
                    acc.1 += v.1;
                }
                ybb[q * grid.subcarriers + n][i] = acc;
            }
        }
    }

    // Per user: LS at pilot REs, per-symbol linear interpolation over the
    // subcarrier axis, ZF at data REs.
    let mut out = Vec::with_capacity(users);
    for k in 0..users {
        // Anchors per (symbol, stream): (subcarrier, column estimate).
        let mut anchors: std::collections::BTreeMap<(usize, usize), Vec<(usize, Vec<(f64, f64)>)>> =
            std::collections::BTreeMap::new();
        for (i, &(q, n, s)) in grid.pilots[k].iter().enumerate() {
            let pilot = grid.pilot_symbols[k][i];
            let conj = (pilot.0, -pilot.1);
            // LS estimate of column s: y * conj(x) (unit-modulus pilot).
            let est: Vec<(f64, f64)> = ybb[q * grid.subcarriers + n]
                .iter()
                .map(|&y| cm(y, conj))
                .collect();
            anchors.entry((q, s)).or_default().push((n, est));
        }
        // Interpolated estimate of H_equ columns at every share RE.
        let interp = |q: usize, n: usize, s: usize| -> Vec<(f64, f64)> {
            let list = anchors
                .get(&(q, s))
                .or_else(|| {
                    // No anchor on this symbol for this stream: borrow the
                    // nearest symbol that has one (happens for odd shares).
                    anchors
                        .iter()
                        .filter(|((_, ss), _)| *ss == s)
                        .min_by_key(|((qq, _), _)| qq.abs_diff(q))
                        .map(|(_, v)| v)
                })
                .expect("at least one DMRS anchor per stream");
            if list.len() == 1 {
                return list[0].1.clone();
            }
            // Clamped linear interpolation along the subcarrier axis.
            if n <= list[0].0 {
                return list[0].1.clone();
            }
            if n >= list[list.len() - 1].0 {
                return list[list.len() - 1].1.clone();
            }
            let hi = list.iter().position(|&(nn, _)| nn >= n).unwrap();
            let (n0, ref e0) = list[hi - 1];
            let (n1, ref e1) = list[hi];
            let t = (n - n0) as f64 / (n1 - n0) as f64;
            e0.iter()
                .zip(e1)
                .map(|(a, b)| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)))
                .collect()
        };

        let dres = grid.data_res(k);
        let mut eq = Tensor::zeros(&[streams, dres.len()], Dtype::Complex);
        let mut est_err = 0.0;
        let mut est_cnt = 0usize;
        for (col, &(q, n)) in dres.iter().enumerate() {
            // Assemble estimated H_equ [n_rf_r x streams].
            let mut h_est = vec![0.0; 2 * n_rf_r * streams];
            for s in 0..streams {
                let e = interp(q, n, s);
                for i in 0..n_rf_r {
                    h_est[2 * (i * streams + s)] = e[i].0;
                    h_est[2 * (i * streams + s) + 1] = e[i].1;
                }
            }
            // Diagnostic: error against the true equivalent channel.
            {
                let h = channels.mat(k, first_symbol + q, n);
                let mut hf = vec![0.0; 2 * n_r * streams];
                linalg::cmm_acc(&mut hf, &h.data, false, &f_rf[k].data, false, n_r, channels.n_tx, streams);
                let mut whf = vec![0.0; 2 * n_rf_r * streams];
                linalg::cmm_acc(&mut whf, &w_rf.data, false, &hf, false, n_rf_r, n_r, streams);
                est_err += h_est
                    .iter()
                    .zip(&whf)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                est_cnt += 1;
            }
            // ZF via the normal equations; a singular Gram matrix falls
            // back to a ridge-regularized pseudo-inverse.
            let mut gram = vec![0.0; 2 * streams * streams];
            linalg::cmm_acc(&mut gram, &h_est, true, &h_est, false, streams, n_rf_r, streams);
            let l = match linalg::cholesky(&gram, streams) {
                Ok(l) => l,
                Err(_) => {
                    for s in 0..streams {
                        gram[2 * (s * streams + s)] += 1e-6;
                    }
                    linalg::cholesky(&gram, streams)
                        .map_err(|_| Error::numeric("dmrs_chain", "singular equalizer gram matrix"))?
                }
            };
            let inv = linalg::inverse_from_cholesky(&l, streams);
            let mut hy = vec![0.0; 2 * streams];
            let yv: Vec<f64> = ybb[q * grid.subcarriers + n]
                .iter()
                .flat_map(|&(re, im)| [re, im])
                .collect();
            linalg::cmm_acc(&mut hy, &h_est, true, &yv, false, streams, n_rf_r, 1);
            let mut s_hat = vec![0.0; 2 * streams];
            linalg::cmm_acc(&mut s_hat, &inv, false, &hy, false, streams, streams, 1);
            for s in 0..streams {
                eq.data[2 * (s * dres.len() + col)] = s_hat[2 * s];
                eq.data[2 * (s * dres.len() + col) + 1] = s_hat[2 * s + 1];
            }
        }
        out.push(EqualizedFeatures {
            symbols: eq,
            res: dres,
            est_err: est_err / est_cnt.max(1) as f64,
        });
    }
    Ok(out)
}


/// Classical pilot-limited channel estimation: minimum-norm regularized
/// least squares on the same downlink observation model the learned system
/// uses, with fixed (seeded) unit-power pilot matrices known to both ends.
/// Per user and subcarrier, L reference symbols give L*N_RF_t linear
/// equations in the N_t*N_r channel entries; at small L the system is
/// heavily underdetermined and the estimate degrades accordingly.
///
/// Returns a [`ChannelSet`] holding the estimate replicated across all
/// symbol slots, so the PCA beamformers can consume it unchanged.
pub fn ls_channel_estimate(
    channels: &ChannelSet,
    pilot_symbols: usize,
    sigma2: f64,
    pilot_seed: u64,
    noise: &mut RngStream,
) -> Result<ChannelSet> {
    use crate::numcore::linalg::{cabs2, cadd, cmul};
    let (n_r, n_t, n_c) = (channels.n_rx, channels.n_tx, channels.subcarriers);
    let users = channels.users;
    // Fixed pilots: per symbol l, a random unit-modulus analog matrix and
    // unit-power digital vector; receivers use random unit-modulus combiners.
    let mut prng = RngStream::derive(pilot_seed, "classic-pilots");
    let n_rf_r = 2usize.min(n_r);
    let n_rf_t = 2usize.min(n_t);
    let mut tx_cols: Vec<Vec<(f64, f64)>> = Vec::with_capacity(pilot_symbols);
    let mut combiners: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); users];
    for _ in 0..pilot_symbols {
        // u = X x normalized to sqrt(P_t).
        let mut u: Vec<(f64, f64)> = (0..n_r)
            .map(|_| {
                let ph = prng.range(-std::f64::consts::PI, std::f64::consts::PI);
                (ph.cos(), ph.sin())
            })
            .collect();
        let nrm = (u.iter().map(|c| cabs2(*c)).sum::<f64>()).sqrt();
        for c in u.iter_mut() {
            c.0 /= nrm;
            c.1 /= nrm;
        }
        tx_cols.push(u);
        for k in 0..users {
            let v: Vec<(f64, f64)> = (0..n_rf_t * n_t)
                .map(|_| {
                    let ph = prng.range(-std::f64::consts::PI, std::f64::consts::PI);
                    (ph.cos(), ph.sin())
                })
                .collect();
            combiners[k].push(v);
        }
    }
    let mut est = ChannelSet {
        users,
        symbols: channels.symbols,
        subcarriers: n_c,
        n_rx: n_r,
        n_tx: n_t,
        noise_var: channels.noise_var,
        data: vec![0.0; channels.data.len()],
    };
    let unknowns = n_t * n_r;
    let rows = pilot_symbols * n_rf_t;
    for k in 0..users {
        for n in 0..n_c {
            // Build A [rows x unknowns] over vec(H^T) (column-major over
            // (t, r) pairs: index t * n_r + r) and the observation y.
            let mut a = vec![0.0; 2 * rows * unknowns];
            let mut y = vec![0.0; 2 * rows];
            for l in 0..pilot_symbols {
                let h = channels.mat(k, l, n);
                let u = &tx_cols[l];
                let v = &combiners[k][l];
                for i in 0..n_rf_t {
                    let row = l * n_rf_t + i;
                    // y_row = sum_t V[i,t] sum_r H^T[t,r] u_r (+ noise)
                    let mut acc = (0.0, 0.0);
                    for t in 0..n_t {
                        for r in 0..n_r {
                            let coeff = cmul(v[i * n_t + t], u[r]);
                            let idx = 2 * (row * unknowns + t * n_r + r);
                            a[idx] = coeff.0;
                            a[idx + 1] = coeff.1;
                            acc = cadd(acc, cmul(coeff, h.c_at(r * n_t + t)));
                        }
                    }
                    let (zr, zi) = noise.complex_normal(sigma2);
                    y[2 * row] = acc.0 + zr;
                    y[2 * row + 1] = acc.1 + zi;
                }
            }
            // Min-norm LS: vec = A^H (A A^H + ridge I)^{-1} y.
            let mut gram = vec![0.0; 2 * rows * rows];
            linalg::cmm_acc(&mut gram, &a, false, &a, true, rows, unknowns, rows);
            let trace: f64 = (0..rows).map(|i| gram[2 * (i * rows + i)]).sum();
            let ridge = 1e-6 * (trace / rows as f64).max(1e-12) + sigma2;
            for i in 0..rows {
                gram[2 * (i * rows + i)] += ridge;
            }
            let l_fact = linalg::cholesky(&gram, rows)?;
            let inv = linalg::inverse_from_cholesky(&l_fact, rows);
            let mut w = vec![0.0; 2 * rows];
            linalg::cmm_acc(&mut w, &inv, false, &y, false, rows, rows, 1);
            let mut vec_ht = vec![0.0; 2 * unknowns];
            linalg::cmm_acc(&mut vec_ht, &a, true, &w, false, unknowns, rows, 1);
            // Scatter the estimate to every symbol slot.
            for q in 0..channels.symbols {
                let base = 2 * (((k * channels.symbols + q) * n_c + n) * n_r * n_t);
                for t in 0..n_t {
                    for r in 0..n_r {
                        let src = 2 * (t * n_r + r);
                        est.data[base + 2 * (r * n_t + t)] = vec_ht[src];
                        est.data[base + 2 * (r * n_t + t) + 1] = vec_ht[src + 1];
                    }
                }
            }
        }
    }
    Ok(est)
}
