//! One-off calibration helper: mean random-phase rate on the desk preset.

use semlink::baselines::random_phase_beamformers;
use semlink::config::ExperimentConfig;
use semlink::phynet::spectral_efficiency_value;
use semlink::rng::RngStream;
use semlink::trainer::{ChannelData, ChannelSplit};

fn main() {
    let cfg = ExperimentConfig::desk();
    let chans = ChannelData::new(&cfg, 1).unwrap();
    let rho = 1.0 / cfg.noise_var();
    let n = chans.count(ChannelSplit::Val);
    let mut mean_rand = 0.0;
    let mut mean_ones = 0.0;
    use semlink::numcore::Tensor;
    let ones = |shape: &[usize]| {
        let mut t = Tensor::zeros(shape, semlink::numcore::Dtype::Complex);
        for i in 0..t.numel() {
            t.data[2 * i] = 1.0;
        }
        t
    };
    for i in 0..n {
        let ch = chans.drop_at(ChannelSplit::Val, i).unwrap();
        let mut rng = RngStream::derive(i as u64, "rand-bf");
        let (w, fs) = random_phase_beamformers(
            cfg.n_tx, cfg.n_rx, cfg.n_rf_tx, cfg.n_rf_rx, cfg.users, &mut rng,
        );
        mean_rand += spectral_efficiency_value(&w, &fs, &ch, cfg.csirs_symbols, cfg.data_symbols, rho)
            .unwrap()
            / n as f64;
        let w1 = ones(&[cfg.n_rf_rx, cfg.n_rx]);
        let f1 = vec![ones(&[cfg.n_tx, cfg.n_rf_tx]); cfg.users];
        mean_ones += spectral_efficiency_value(&w1, &f1, &ch, cfg.csirs_symbols, cfg.data_symbols, rho)
            .unwrap()
            / n as f64;
    }
    println!("random-phase mean eta over {n} val drops: {mean_rand:.3}");
    println!("all-ones    mean eta over {n} val drops: {mean_ones:.3}");
}
