//! Diagnose the stage-1 -> stage-3 distribution shift at the decoder input.

use semlink::config::ExperimentConfig;
use semlink::numcore::Graph;
use semlink::rng::RngStream;
use semlink::semnet::identity_received;
use semlink::trainer::checkpoint::load_checkpoint;
use semlink::trainer::{
    eval_identity, eval_joint, make_task_data, ChannelData, ChannelSplit, Models,
};

fn rms(data: &[f64]) -> f64 {
    (data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64).sqrt()
}

fn main() {
    let cfg = ExperimentConfig::desk();
    let (sem, _) = load_checkpoint(std::path::Path::new("/tmp/cal3/stage1/best")).unwrap();
    let (phy, _) = load_checkpoint(std::path::Path::new("/tmp/cal4/stage2/best")).unwrap();
    let mut store = sem;
    store.absorb(phy);
    let models = Models::new(&cfg).unwrap();
    let task = make_task_data(&cfg, 1);
    let chans = ChannelData::new(&cfg, 1).unwrap();

    let em_id = eval_identity(&store, &models, &cfg, &task.val, 2).unwrap();
    println!("identity-path miou at init: {:.4}", em_id.miou);
    let em_joint = eval_joint(&store, &models, &cfg, &task.val, &chans, ChannelSplit::Val, 1, 2).unwrap();
    println!("joint-path miou at init:    {:.4} (eta {:.1})", em_joint.miou, em_joint.eta);

    // Y_BB statistics on a few samples: identity vs real channel.
    for i in 0..3 {
        let sample = &task.val[i];
        let ch = chans.drop_at(ChannelSplit::Val, i).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &|_| false);
        // identity path
        let mut s_bb = Vec::new();
        for (k, ue) in models.ue_msf.iter().enumerate() {
            let csi = g.constant(semlink::numcore::Tensor::zeros(
                &[cfg.subcarriers, cfg.model.d_csi],
                semlink::numcore::Dtype::Real,
            ));
            let img = if k == 0 { &sample.mod_a } else { &sample.mod_b };
            s_bb.push(ue.forward(&mut g, &bind, img, csi, None).unwrap());
        }
        let y_id = identity_received(&mut g, &s_bb, &models.alloc).unwrap();
        // real path
        let mut pn = RngStream::derive(7, "pn").substream(i as u64);
        let mut dn = RngStream::derive(7, "dn").substream(i as u64);
        let (_, phy_fwd) = semlink::trainer::joint_logits(
            &mut g, &bind, &models, &cfg, sample, &ch, &mut pn, &mut dn,
        )
        .map(|(l, p)| (l, p))
        .unwrap();
        // reconstruct joint y_bb for stats
        let mut s_bb3 = Vec::new();
        for (k, ue) in models.ue_msf.iter().enumerate() {
            let img = if k == 0 { &sample.mod_a } else { &sample.mod_b };
            s_bb3.push(
                ue.forward(&mut g, &bind, img, phy_fwd.s_csi_ue[k], Some(phy_fwd.f_rf[k]))
                    .unwrap(),
            );
        }
        let mut dn2 = RngStream::derive(7, "dn").substream(i as u64);
        let y_re = semlink::semnet::transmit_superpose(
            &mut g,
            &s_bb3,
            &phy_fwd.f_rf,
            phy_fwd.w_rf,
            &ch,
            cfg.csirs_symbols,
            &models.alloc,
            cfg.noise_var(),
            &mut dn2,
        )
        .unwrap();
        println!(
            "sample {i}: rms(y_identity) = {:.3}, rms(y_real) = {:.3}",
            rms(&g.value(y_id).data),
            rms(&g.value(y_re).data)
        );
        // Noise-only floor for reference.
        let zeros: Vec<semlink::numcore::Var> = s_bb3
            .iter()
            .map(|&s| {
                let sh = g.value(s).shape.clone();
                g.constant(semlink::numcore::Tensor::zeros(&sh, semlink::numcore::Dtype::Complex))
            })
            .collect();
        let mut dn3 = RngStream::derive(7, "dn").substream(i as u64);
        let y_noise = semlink::semnet::transmit_superpose(
            &mut g,
            &zeros,
            &phy_fwd.f_rf,
            phy_fwd.w_rf,
            &ch,
            cfg.csirs_symbols,
            &models.alloc,
            cfg.noise_var(),
            &mut dn3,
        )
        .unwrap();
        println!("           rms(noise-only after combining) = {:.3}", rms(&g.value(y_noise).data));
    }
}
