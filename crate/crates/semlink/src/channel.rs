//! Time-varying sparse multipath massive MIMO-OFDM channel and AWGN.
//!
//! Each user's channel is a sum of `L_p` specular paths with complex gain,
//! departure/arrival angles on half-wavelength ULAs, delay, and Doppler
//! shift. The channel is constant within an OFDM symbol and evolves from
//! symbol to symbol through the per-path Doppler phasor; reference-signal
//! symbols occupy the first `L` symbol slots and data symbols ride the same
//! trajectory afterwards, which is what ages the acquired CSI.

use crate::error::{Error, Result};
use crate::numcore::{Dtype, Tensor};
use crate::rng::RngStream;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// OFDM numerology. Sampling and symbol intervals are derived, so the
/// invariants T_s = 1/(N_c delta_f) and T_I = (N_c + N_cp) T_s hold by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub n_cyclic_prefix: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_hz: f64,
}

impl OfdmConfig {
    /// OFDM sampling interval T_s.
    pub fn sample_interval(&self) -> f64 {
        1.0 / (self.n_subcarriers as f64 * self.subcarrier_spacing_hz)
    }

    /// OFDM symbol interval T_I including the cyclic prefix.
    pub fn symbol_interval(&self) -> f64 {
        (self.n_subcarriers + self.n_cyclic_prefix) as f64 * self.sample_interval()
    }
}

/// Geometry and statistics of the propagation environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPhysics {
    pub ofdm: OfdmConfig,
    pub n_tx: usize,
    pub n_rx: usize,
    pub users: usize,
    pub paths_min: usize,
    pub paths_max: usize,
    /// Maximum UE speed in m/s; per-user speed is uniform in [0, v_max].
    pub v_max_mps: f64,
    /// Maximum path delay in seconds.
    pub tau_max_s: f64,
}

impl ChannelPhysics {
    pub fn validate(&self) -> Result<()> {
        if self.paths_min == 0 || self.paths_min > self.paths_max {
            return Err(Error::config(
                "paths",
                format!("invalid path count range [{}, {}]", self.paths_min, self.paths_max),
            ));
        }
        if self.v_max_mps < 0.0 || self.tau_max_s < 0.0 {
            return Err(Error::config("physics", "negative speed or delay bound"));
        }
        Ok(())
    }

    /// Largest possible Doppler magnitude, v_max * f_c / c.
    pub fn doppler_bound_hz(&self) -> f64 {
        self.v_max_mps * self.ofdm.carrier_hz / SPEED_OF_LIGHT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub gain: (f64, f64),
    pub aod_rad: f64,
    pub aoa_rad: f64,
    pub delay_s: f64,
    pub doppler_hz: f64,
}

/// All users' multipath parameters for one channel drop.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub per_user: Vec<Vec<Path>>,
}

/// Half-wavelength ULA steering vector, unit Euclidean norm:
/// a(theta)_m = exp(j pi m sin theta) / sqrt(N).
pub fn steering(theta: f64, n: usize) -> Tensor {
    let scale = 1.0 / (n as f64).sqrt();
    let mut data = vec![0.0; 2 * n];
    for m in 0..n {
        let phase = std::f64::consts::PI * m as f64 * theta.sin();
        data[2 * m] = scale * phase.cos();
        data[2 * m + 1] = scale * phase.sin();
    }
    Tensor::from_complex(&[n], data)
}

pub fn steering_tx(theta: f64, n_tx: usize) -> Tensor {
    steering(theta, n_tx)
}

pub fn steering_rx(theta: f64, n_rx: usize) -> Tensor {
    steering(theta, n_rx)
}

/// Draw a fresh multipath profile for every user.
pub fn sample_paths(phys: &ChannelPhysics, rng: &mut RngStream) -> Result<PathSet> {
    phys.validate()?;
    let mut per_user = Vec::with_capacity(phys.users);
    for _ in 0..phys.users {
        let lp = rng.int_range(phys.paths_min as u64, phys.paths_max as u64) as usize;
        // One velocity per UE, one travel angle per path.
        let v = rng.range(0.0, phys.v_max_mps.max(0.0));
        let mut paths = Vec::with_capacity(lp);
        for _ in 0..lp {
            let gain = rng.complex_normal(1.0);
            let aod = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
            let aoa = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
            let delay = rng.range(0.0, phys.tau_max_s.max(0.0));
            let psi = rng.range(0.0, 2.0 * std::f64::consts::PI);
            let doppler = v * phys.ofdm.carrier_hz / SPEED_OF_LIGHT * psi.cos();
            paths.push(Path {
                gain,
                aod_rad: aod,
                aoa_rad: aoa,
                delay_s: delay,
                doppler_hz: doppler,
            });
        }
        per_user.push(paths);
    }
    Ok(PathSet { per_user })
}

/// Frequency-time channel grid for all users: H[k, q, n] with dimensions
/// users x symbols x subcarriers x (N_r x N_t).
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub users: usize,
    pub symbols: usize,
    pub subcarriers: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub noise_var: f64,
    /// Interleaved complex entries, row-major over [k, q, n, r, t].
    pub data: Vec<f64>,
}

impl ChannelSet {
    fn mat_offset(&self, k: usize, q: usize, n: usize) -> usize {
        2 * (((k * self.symbols + q) * self.subcarriers + n) * self.n_rx * self.n_tx)
    }

    /// Uplink channel matrix H[k,q,n] as a complex [N_r x N_t] tensor.
    pub fn mat(&self, k: usize, q: usize, n: usize) -> Tensor {
        let off = self.mat_offset(k, q, n);
        let len = 2 * self.n_rx * self.n_tx;
        Tensor::from_complex(&[self.n_rx, self.n_tx], self.data[off..off + len].to_vec())
    }

    /// Downlink channel under TDD reciprocity: the plain transpose of the
    /// uplink matrix (no conjugation), shape [N_t x N_r].
    pub fn mat_downlink(&self, k: usize, q: usize, n: usize) -> Tensor {
        let off = self.mat_offset(k, q, n);
        let (r, t) = (self.n_rx, self.n_tx);
        let mut data = vec![0.0; 2 * r * t];
        for i in 0..r {
            for j in 0..t {
                data[2 * (j * r + i)] = self.data[off + 2 * (i * t + j)];
                data[2 * (j * r + i) + 1] = self.data[off + 2 * (i * t + j) + 1];
            }
        }
        Tensor::from_complex(&[t, r], data)
    }
}

/// Evaluate the multipath sum for every (user, symbol, subcarrier) triple.
/// Symbol and subcarrier indices are zero-based in the phasors.
pub fn assemble_channel(
    paths: &PathSet,
    phys: &ChannelPhysics,
    symbols: usize,
    noise_var: f64,
) -> Result<ChannelSet> {
    phys.validate()?;
    if paths.per_user.len() != phys.users {
        return Err(Error::shape(
            "assemble_channel",
            format!("{} users in path set vs {}", paths.per_user.len(), phys.users),
        ));
    }
    let (n_c, n_r, n_t) = (phys.ofdm.n_subcarriers, phys.n_rx, phys.n_tx);
    let t_s = phys.ofdm.sample_interval();
    let t_i = phys.ofdm.symbol_interval();
    let mut data = vec![0.0; 2 * phys.users * symbols * n_c * n_r * n_t];
    for (k, user_paths) in paths.per_user.iter().enumerate() {
        let norm = 1.0 / (user_paths.len() as f64).sqrt();
        for path in user_paths {
            let ar = steering(path.aoa_rad, n_r);
            let at = steering(path.aod_rad, n_t);
            for q in 0..symbols {
                let dop = 2.0 * std::f64::consts::PI * path.doppler_hz * q as f64 * t_i;
                let (dop_s, dop_c) = dop.sin_cos();
                for n in 0..n_c {
                    let del =
                        -2.0 * std::f64::consts::PI * n as f64 * path.delay_s / (n_c as f64 * t_s);
                    let (del_s, del_c) = del.sin_cos();
                    // alpha * e^{j del} * e^{j dop} / sqrt(L_p)
                    let pr = del_c * dop_c - del_s * dop_s;
                    let pi = del_c * dop_s + del_s * dop_c;
                    let cr = norm * (path.gain.0 * pr - path.gain.1 * pi);
                    let ci = norm * (path.gain.0 * pi + path.gain.1 * pr);
                    let base = 2 * (((k * symbols + q) * n_c + n) * n_r * n_t);
                    for r in 0..n_r {
                        let (arr, ari) = ar.c_at(r);
                        // c * a_r[r]
                        let vr = cr * arr - ci * ari;
                        let vi = cr * ari + ci * arr;
                        for t in 0..n_t {
                            // * conj(a_t[t])
                            let (atr, ati) = at.c_at(t);
                            let idx = base + 2 * (r * n_t + t);
                            data[idx] += vr * atr + vi * ati;
                            data[idx + 1] += vi * atr - vr * ati;
                        }
                    }
                }
            }
        }
    }
    let set = ChannelSet {
        users: phys.users,
        symbols,
        subcarriers: n_c,
        n_rx: n_r,
        n_tx: n_t,
        noise_var,
        data,
    };
    if !set.data.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric("assemble_channel", "non-finite channel entry"));
    }
    Ok(set)
}

/// Add i.i.d. circularly-symmetric complex Gaussian noise with total
/// variance `sigma2` per complex entry. `sigma2 == 0` returns the input.
pub fn add_awgn(signal: &Tensor, sigma2: f64, rng: &mut RngStream) -> Result<Tensor> {
    if sigma2 < 0.0 {
        return Err(Error::numeric("add_awgn", format!("negative variance {sigma2}")));
    }
    if signal.dtype != Dtype::Complex {
        return Err(Error::dtype("add_awgn", "expected complex signal"));
    }
    if sigma2 == 0.0 {
        return Ok(signal.clone());
    }
    let mut out = signal.clone();
    for i in 0..out.numel() {
        let (nr, ni) = rng.complex_normal(sigma2);
        out.data[2 * i] += nr;
        out.data[2 * i + 1] += ni;
    }
    Ok(out)
}

/// Complex Gaussian noise tensor with total variance `sigma2` per entry.
pub fn awgn_tensor(shape: &[usize], sigma2: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; 2 * n];
    if sigma2 > 0.0 {
        for i in 0..n {
            let (nr, ni) = rng.complex_normal(sigma2);
            data[2 * i] = nr;
            data[2 * i + 1] = ni;
        }
    }
    Tensor::from_complex(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_phys() -> ChannelPhysics {
        let ofdm = OfdmConfig {
            n_subcarriers: 16,
            n_cyclic_prefix: 4,
            subcarrier_spacing_hz: 120e3,
            carrier_hz: 28e9,
        };
        ChannelPhysics {
            ofdm,
            n_tx: 4,
            n_rx: 16,
            users: 2,
            paths_min: 3,
            paths_max: 6,
            v_max_mps: 120.0 / 3.6,
            tau_max_s: 16.0 * ofdm.sample_interval(),
        }
    }

    #[test]
    fn numerology_invariants() {
        let ofdm = test_phys().ofdm;
        assert!((ofdm.sample_interval() - 1.0 / (16.0 * 120e3)).abs() < 1e-18);
        assert!((ofdm.symbol_interval() - 20.0 * ofdm.sample_interval()).abs() < 1e-18);
    }

    #[test]
    fn steering_trivial_cases() {
        let a = steering(0.0, 8);
        for i in 0..8 {
            let (re, im) = a.c_at(i);
            assert!((re - 1.0 / 8f64.sqrt()).abs() < 1e-15 && im.abs() < 1e-15);
        }
        // theta = pi/2, N = 2: second entry e^{j pi} = -1.
        let a = steering(std::f64::consts::FRAC_PI_2, 2);
        let s = 1.0 / 2f64.sqrt();
        assert!((a.c_at(0).0 - s).abs() < 1e-12);
        assert!((a.c_at(1).0 + s).abs() < 1e-12 && a.c_at(1).1.abs() < 1e-12);
        // Unit norm for random angles.
        let mut rng = RngStream::derive(2, "st");
        for _ in 0..50 {
            let a = steering(rng.range(-3.0, 3.0), 16);
            assert!((a.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_speed_means_zero_doppler() {
        let mut phys = test_phys();
        phys.v_max_mps = 0.0;
        let mut rng = RngStream::derive(3, "p");
        let ps = sample_paths(&phys, &mut rng).unwrap();
        for user in &ps.per_user {
            for p in user {
                assert_eq!(p.doppler_hz, 0.0);
            }
        }
    }

    #[test]
    fn doppler_bound_matches_kinematics() {
        // 120 km/h at 28 GHz: v f_c / c evaluated numerically.
        let phys = test_phys();
        let bound = phys.doppler_bound_hz();
        assert!((bound - 3113.27).abs() < 1.0, "bound {bound}");
        let mut rng = RngStream::derive(4, "p2");
        let ps = sample_paths(&phys, &mut rng).unwrap();
        for user in &ps.per_user {
            for p in user {
                assert!(p.doppler_hz.abs() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_paths() {
        let phys = test_phys();
        let a = sample_paths(&phys, &mut RngStream::derive(9, "p")).unwrap();
        let b = sample_paths(&phys, &mut RngStream::derive(9, "p")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn static_channel_is_constant_across_symbols() {
        let mut phys = test_phys();
        phys.v_max_mps = 0.0;
        let mut rng = RngStream::derive(5, "c");
        let ps = sample_paths(&phys, &mut rng).unwrap();
        let set = assemble_channel(&ps, &phys, 6, 0.0).unwrap();
        let h0 = set.mat(0, 0, 3);
        for q in 1..6 {
            assert_eq!(set.mat(0, q, 3).data, h0.data);
        }
    }

    #[test]
    fn single_boresight_path_is_rank_one() {
        let phys = ChannelPhysics {
            users: 1,
            paths_min: 1,
            paths_max: 1,
            ..test_phys()
        };
        let alpha = (0.8, -0.6); // |alpha| = 1
        let ps = PathSet {
            per_user: vec![vec![Path {
                gain: alpha,
                aod_rad: 0.0,
                aoa_rad: 0.0,
                delay_s: 0.0,
                doppler_hz: 0.0,
            }]],
        };
        let set = assemble_channel(&ps, &phys, 1, 0.0).unwrap();
        let h = set.mat(0, 0, 0);
        let scale = 1.0 / ((phys.n_rx * phys.n_tx) as f64).sqrt();
        for i in 0..h.numel() {
            let (re, im) = h.c_at(i);
            assert!((re - alpha.0 * scale).abs() < 1e-12);
            assert!((im - alpha.1 * scale).abs() < 1e-12);
        }
        assert!((h.sq_norm().sqrt() - 1.0).abs() < 1e-12, "|alpha| = 1");
    }

    /// Independent scalar-loop evaluation of the multipath sum, written
    /// directly from the channel equation with no shared code.
    fn oracle_entry(
        paths: &[Path],
        phys: &ChannelPhysics,
        q: usize,
        n: usize,
        r: usize,
        t: usize,
    ) -> (f64, f64) {
        let t_s = phys.ofdm.sample_interval();
        let t_i = phys.ofdm.symbol_interval();
        let n_c = phys.ofdm.n_subcarriers as f64;
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        for p in paths {
            let ar_phase = std::f64::consts::PI * r as f64 * p.aoa_rad.sin();
            let at_phase = std::f64::consts::PI * t as f64 * p.aod_rad.sin();
            let delay = -2.0 * std::f64::consts::PI * n as f64 * p.delay_s / (n_c * t_s);
            let dopp = 2.0 * std::f64::consts::PI * p.doppler_hz * q as f64 * t_i;
            // total phase: a_r contributes +, conj(a_t) contributes -.
            let phase = ar_phase - at_phase + delay + dopp;
            let mag = 1.0 / ((phys.n_rx * phys.n_tx) as f64).sqrt();
            let (s, c) = phase.sin_cos();
            acc_re += mag * (p.gain.0 * c - p.gain.1 * s);
            acc_im += mag * (p.gain.0 * s + p.gain.1 * c);
        }
        let norm = 1.0 / (paths.len() as f64).sqrt();
        (acc_re * norm, acc_im * norm)
    }

    #[test]
    fn assembly_matches_scalar_loop_oracle() {
        let phys = test_phys();
        let mut rng = RngStream::derive(6, "o");
        let ps = sample_paths(&phys, &mut rng).unwrap();
        let set = assemble_channel(&ps, &phys, 6, 0.0).unwrap();
        for k in 0..phys.users {
            for &q in &[0usize, 2, 5] {
                for &n in &[0usize, 7, 15] {
                    for r in 0..phys.n_rx {
                        for t in 0..phys.n_tx {
                            let want = oracle_entry(&ps.per_user[k], &phys, q, n, r, t);
                            let got = set.mat(k, q, n).c_at(r * phys.n_tx + t);
                            assert!(
                                (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12,
                                "k={k} q={q} n={n} r={r} t={t}: {got:?} vs {want:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mean_channel_energy_is_unity() {
        // E||H[k,q,n]||_F^2 = 1 with unit-variance gains and unit-norm
        // steering vectors; Monte-Carlo within 5%.
        let phys = ChannelPhysics {
            users: 1,
            ..test_phys()
        };
        let mut rng = RngStream::derive(7, "e");
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let ps = sample_paths(&phys, &mut rng).unwrap();
            let set = assemble_channel(&ps, &phys, 1, 0.0).unwrap();
            acc += set.mat(0, 0, 0).sq_norm();
        }
        let mean = acc / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean energy {mean}");
    }

    #[test]
    fn doppler_decorrelation_shrinks_with_speed() {
        // ||H[q+1] - H[q]||_F decreases monotonically as v_max drops.
        let mut diffs = Vec::new();
        for v_kmh in [120.0, 30.0, 0.0] {
            let phys = ChannelPhysics {
                v_max_mps: v_kmh / 3.6,
                ..test_phys()
            };
            let mut acc = 0.0;
            // Average over drops to tame angle randomness.
            for seed in 0..200 {
                let mut rng = RngStream::derive(seed, "dop");
                let ps = sample_paths(&phys, &mut rng).unwrap();
                let set = assemble_channel(&ps, &phys, 2, 0.0).unwrap();
                let a = set.mat(0, 0, 0);
                let b = set.mat(0, 1, 0);
                let d: f64 = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                acc += d.sqrt();
            }
            diffs.push(acc / 200.0);
        }
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
        assert!(diffs[2] < 1e-12);
    }

    #[test]
    fn awgn_properties() {
        let mut rng = RngStream::derive(8, "n");
        let x = Tensor::from_complex(&[4], vec![1.0; 8]);
        // Zero variance is the identity.
        let y = add_awgn(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.data, x.data);
        assert!(add_awgn(&x, -1.0, &mut rng).is_err());
        // Empirical variance within 3% over 1e5 draws.
        let sigma2 = 0.7;
        let n = 100_000usize;
        let zeros = Tensor::zeros(&[n], Dtype::Complex);
        let noisy = add_awgn(&zeros, sigma2, &mut rng).unwrap();
        let var = noisy.sq_norm() / n as f64;
        assert!((var - sigma2).abs() / sigma2 < 0.03, "var {var}");
        // Seed reproducibility.
        let a = add_awgn(&x, 1.0, &mut RngStream::derive(1, "z")).unwrap();
        let b = add_awgn(&x, 1.0, &mut RngStream::derive(1, "z")).unwrap();
        assert_eq!(a.data, b.data);
    }
}
