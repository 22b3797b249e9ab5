//! Sanity probe: the joint path must be able to overfit a single sample on
//! a fixed noiseless channel. Failure here means wiring, not difficulty.

use semlink::config::ExperimentConfig;
use semlink::numcore::{adam_step, clip_global_norm, AdamHyper, AdamState, Graph, ParamStore};
use semlink::rng::RngStream;
use semlink::semnet::{miou, seg_loss};
use semlink::trainer::checkpoint::load_checkpoint;
use semlink::trainer::{joint_logits, make_task_data, ChannelData, ChannelSplit, Models};

fn main() {
    let mut cfg = ExperimentConfig::desk();
    cfg.snr_db = 100.0; // effectively noiseless data link
    cfg.pilot_snr_db = Some(100.0);
    let (sem, _) = load_checkpoint(std::path::Path::new("/tmp/d10/stage1/best")).unwrap();
    let (phy, _) = load_checkpoint(std::path::Path::new("/tmp/d10/stage2/best")).unwrap();
    let mut store = sem;
    store.absorb(phy);
    let models = Models::new(&cfg).unwrap();
    let task = make_task_data(&cfg, 1);
    let chans = ChannelData::new(&cfg, 1).unwrap();
    let sample = &task.train[0];
    let ch = chans.drop_at(ChannelSplit::Train, 0).unwrap();

    let mut adam = AdamState::new();
    let hyper = AdamHyper { lr: 1e-3, ..Default::default() };
    let all = |_: &str| true;
    for step in 0..400 {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, &all);
        let mut pn = RngStream::derive(0, "pn");
        let mut dn = RngStream::derive(0, "dn");
        let (logits, _) =
            joint_logits(&mut g, &bind, &models, &cfg, sample, &ch, &mut pn, &mut dn).unwrap();
        let loss = seg_loss(&mut g, logits, &sample.label).unwrap();
        let lv = g.value(loss).data[0];
        if step % 50 == 0 {
            let t = g.detach(logits);
            println!(
                "step {step}: loss {lv:.4}, miou {:.4}",
                miou(&t, &sample.label, cfg.task.classes)
            );
        }
        let grads = g.backward(loss).unwrap();
        let mut gm = std::collections::BTreeMap::new();
        for (name, var) in bind.iter() {
            if let Some(gv) = grads.get(*var) {
                gm.insert(name.clone(), gv.to_vec());
            }
        }
        clip_global_norm(&mut gm, 1.0);
        adam_step(&mut store, &gm, &mut adam, hyper).unwrap();
    }
    // Final
    let mut g = Graph::new();
    let bind = store.bind(&mut g, &|_| false);
    let mut pn = RngStream::derive(0, "pn");
    let mut dn = RngStream::derive(0, "dn");
    let (logits, _) =
        joint_logits(&mut g, &bind, &models, &cfg, sample, &ch, &mut pn, &mut dn).unwrap();
    let t = g.detach(logits);
    println!("final miou {:.4}", miou(&t, &sample.label, cfg.task.classes));
}
