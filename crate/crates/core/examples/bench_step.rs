use mixdann::layers::GrlConfig;
use mixdann::mixup::{unmixed_batch, mixed_task_loss, mixed_domain_loss, DomainBatch, TaskLossKind};
use mixdann::models::*;
use mixdann::synth::build_benchmark;
use mixdann::tensor::Tape;
use std::time::Instant;

fn main() {
    let data = build_benchmark(7, 3, 60, 64, 64).unwrap();
    let bundle = init_params(0, 1, 8, Some(DiscSpec { num_domains: 2, input_hw: (16, 16) }));
    let batch = DomainBatch {
        images: data[0].subjects[..8].iter().chain(&data[1].subjects[..8]).map(|s| s.image.clone()).collect(),
        masks: data[0].subjects[..8].iter().chain(&data[1].subjects[..8]).map(|s| s.mask.clone()).collect(),
        domains: (0..16).map(|i| i / 8).collect(),
    };
    let mb = unmixed_batch(&batch);
    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let x = tape.leaf(&mb.images);
        let (f, s1, s2) = extract_features(&bundle, &mut tape, &ids, x).unwrap();
        let t_enc = t0.elapsed();
        let mask = task_head(&bundle, &mut tape, &ids, f, s1, s2).unwrap();
        let loss = mixed_task_loss(&mut tape, mask, &mb, TaskLossKind::Dice, 1.0).unwrap();
        let t_fwd = t0.elapsed();
        tape.backward(loss).unwrap();
        let t_bwd = t0.elapsed();

        let t1 = Instant::now();
        let mut tape2 = Tape::new();
        let ids2 = bundle.bind(&mut tape2);
        let x2 = tape2.leaf(&mb.images);
        let (f2, _, _) = extract_features(&bundle, &mut tape2, &ids2, x2).unwrap();
        let logits = discriminate(&bundle, &mut tape2, &ids2, f2, &GrlConfig { gamma: 0.05 }).unwrap();
        let dloss = mixed_domain_loss(&mut tape2, logits, &mb).unwrap();
        let t_dfwd = t1.elapsed();
        tape2.backward(dloss).unwrap();
        let t_dbwd = t1.elapsed();
        if round == 2 {
            println!("task: enc {:?} +head/loss {:?} fwd_total, bwd {:?}",
                t_enc, t_fwd - t_enc, t_bwd - t_fwd);
            println!("domain: fwd {:?}, bwd {:?}", t_dfwd, t_dbwd - t_dfwd);
        }
    }
}
