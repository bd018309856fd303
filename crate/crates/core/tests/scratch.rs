// Temporary exploration harness; run with --ignored --nocapture.

use std::time::Instant;

use driftlab_core::agents::init_params_with;
use driftlab_core::game::{make_game, sample_corpus, sample_eval_set, DistributionSpec, PairKind};
use driftlab_core::rng::Rng;
use driftlab_core::train::{pretrain, run_finetune, FinetuneConfig, Method, RunData};
use driftlab_core::{agents, train};

fn build_world(seed: u64) -> (RunData, driftlab_core::agents::LMParams) {
    let game = make_game(seed, 20).unwrap();
    let pre_dist = DistributionSpec::identity(20);
    let task_dist = DistributionSpec::shifted(20, seed ^ 0xDEAD);
    let mut rng = Rng::new(seed).derive("world");
    let pre_src_pvt = sample_corpus(&game, &pre_dist, 10_000, PairKind::SrcPvt, &mut rng).unwrap();
    let pre_pvt_tgt = sample_corpus(&game, &pre_dist, 10_000, PairKind::PvtTgt, &mut rng).unwrap();
    let task = sample_corpus(&game, &task_dist, 3_000, PairKind::SrcTgt, &mut rng).unwrap();
    let eval = sample_eval_set(&game, &task_dist, 500, &mut rng).unwrap();

    let mut lm = agents::init_lm(seed ^ 77, 20, 32).unwrap();
    let t = Instant::now();
    let lm_loss = train::train_lm(&mut lm, &pre_src_pvt, 3, 1e-3, 32, &mut rng).unwrap();
    println!("lm: 3 epochs in {:.1?}, final loss {lm_loss:.3}", t.elapsed());

    (
        RunData {
            game,
            task_dist,
            pre_src_pvt,
            pre_pvt_tgt,
            task,
            eval,
        },
        lm,
    )
}

#[test]
#[ignore]
fn explore_pretrain_and_drift() {
    let seed = 1u64;
    let (data, lm) = build_world(seed);
    let mut rng = Rng::new(seed).derive("scratch");

    let val_src_pvt =
        sample_corpus(&data.game, &DistributionSpec::identity(20), 500, PairKind::SrcPvt, &mut rng)
            .unwrap();
    let val_pvt_tgt =
        sample_corpus(&data.game, &DistributionSpec::identity(20), 500, PairKind::PvtTgt, &mut rng)
            .unwrap();

    // sender emits in input order -> read reversed; receiver emits reversed
    // -> read forward. Either way the first output is the freshest memory.
    let mut sender = init_params_with(seed ^ 1, 20, 20, 32, true).unwrap();
    let mut receiver = init_params_with(seed ^ 2, 20, 20, 32, false).unwrap();

    let t = Instant::now();
    for epoch in 1..=80 {
        let lr = if epoch <= 30 { 3e-3 } else { 1e-3 };
        let report = pretrain(
            &mut sender,
            &mut receiver,
            &data.pre_src_pvt,
            &data.pre_pvt_tgt,
            &val_src_pvt,
            &val_pvt_tgt,
            1,
            None,
            lr,
            32,
            &mut rng,
        )
        .unwrap();
        let rcv_bleu = {
            let srcs: Vec<&[usize]> = val_pvt_tgt.iter().map(|p| p.src.as_slice()).collect();
            let hyps = agents::greedy_decode_batch(&receiver, &srcs).unwrap();
            let refs: Vec<Vec<usize>> = val_pvt_tgt.iter().map(|p| p.tgt.clone()).collect();
            driftlab_core::metrics::bleu_corpus(&hyps, &refs).unwrap()
        };
        println!(
            "epoch {epoch:2}: snd_bleu={:.1} rcv_bleu={rcv_bleu:.1} nll_s={:.3} nll_r={:.3} elapsed={:.1?}",
            report.val_bleu_pvt, report.val_nll_src_pvt, report.val_nll_pvt_tgt, t.elapsed()
        );
        if report.val_bleu_pvt >= 93.0 && rcv_bleu >= 93.0 {
            break;
        }
    }

    let rec0 = driftlab_core::metrics::eval_pipeline(&sender, &receiver, &data.eval, &lm).unwrap();
    println!(
        "after pretrain: task={:.1} grounding={:.1} nll={:.3} real={:.3}",
        rec0.bleu_tgt, rec0.bleu_pvt, rec0.nll, rec0.real_nll
    );

    for (method, k1, steps) in [
        (Method::Gumbel, 100, 8000),
        (Method::S2p, 100, 8000),
        (Method::Ssil, 100, 8000),
        (Method::Sil, 100, 8000),
    ] {
        let mut cfg = FinetuneConfig::new(method);
        cfg.seed = seed;
        cfg.total_steps = steps;
        cfg.eval_interval = 500;
        cfg.probe_interval = 50;
        cfg.k1 = k1;
        let mut snd = sender.clone();
        let mut rcv = receiver.clone();
        let t = Instant::now();
        let records =
            run_finetune(&cfg, &mut snd, &mut rcv, &data, &lm, |_, _, _| {}).unwrap();
        println!("== {} ({:.1?})", method.as_str(), t.elapsed());
        for r in &records {
            println!(
                "  step {:5}: task={:5.1} grounding={:5.1} nll={:.3} real={:.3} cos_ma={}",
                r.step,
                r.bleu_tgt,
                r.bleu_pvt,
                r.nll,
                r.real_nll,
                r.grad_cos_ma100.map(|v| format!("{v:+.3}")).unwrap_or_default()
            );
        }
    }
}
