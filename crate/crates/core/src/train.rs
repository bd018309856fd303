//! Finetuning regimes and the gradient-conflict probe.
//!
//! Every regime shares one interactive objective: the sender emits a pivot
//! sequence through the Gumbel straight-through channel, the receiver is
//! scored by teacher-forced cross-entropy against the gold target, and the
//! loss is differentiable w.r.t. both agents. The regimes differ only in
//! what else they optimize:
//!
//!   gumbel    interactive loss alone
//!   s2p       interactive + α × supervised replay of the pretraining data
//!   sil       teacher/student loop; the teacher trains interactively, the
//!             student imitates greedily decoded teacher data
//!   ssil      sil with the s2p loss on the teacher
//!   mixdata   sil with a β fraction of pretraining pairs mixed into the
//!             student imitation batches
//!
//! With a shared seed the degenerate settings collapse exactly:
//! s2p(α=0) ≡ gumbel, ssil(α=0) ≡ sil, mixdata(β=0) ≡ sil. The step code
//! skips the disabled term entirely so the random streams stay aligned.

use std::collections::VecDeque;

use crate::agents::{
    batch_nll, greedy_decode_batch, group_by_length, LMParams, Noise, Seq2SeqParams,
    TapedSeq2Seq,
};
use crate::error::{Error, Result};
use crate::game::{CorpusPair, DistributionSpec, EvalTriple, GameSpec, Lang};
use crate::metrics::{eval_pipeline, MetricsRecord};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::{grad_cosine, Tape, Tensor};

// ── Configuration ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gumbel,
    S2p,
    Sil,
    Ssil,
    Mixdata,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gumbel => "gumbel",
            Method::S2p => "s2p",
            Method::Sil => "sil",
            Method::Ssil => "ssil",
            Method::Mixdata => "mixdata",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(Method::Gumbel),
            "s2p" => Ok(Method::S2p),
            "sil" => Ok(Method::Sil),
            "ssil" => Ok(Method::Ssil),
            "mixdata" => Ok(Method::Mixdata),
            other => Err(Error::Parameter(format!(
                "unknown method `{other}`; expected gumbel|s2p|sil|ssil|mixdata"
            ))),
        }
    }

    /// Teacher/student loop methods.
    pub fn is_iterated(self) -> bool {
        matches!(self, Method::Sil | Method::Ssil | Method::Mixdata)
    }

    /// Weight on the supervised replay loss during interactive training.
    fn default_alpha(self) -> f64 {
        match self {
            Method::S2p => 1.0,
            Method::Ssil => 0.5,
            _ => 0.0,
        }
    }
}

/// All finetuning knobs. `alpha` weighs supervised replay (s2p and the ssil
/// teacher), `beta` is the mixdata pretrain fraction, and k1/k2/k2' are the
/// iterated-learning schedule: teacher interactive steps, student-sender
/// imitation steps and student-receiver imitation steps per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub k1: usize,
    pub k2: usize,
    pub k2_prime: usize,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub probe_interval: usize,
    pub teacher_dataset_size: usize,
    /// Student receiver imitates (teacher pivot, gold target) instead of
    /// (teacher pivot, teacher target).
    pub student_gold_targets: bool,
    /// Teacher dataset generation samples through the Gumbel channel
    /// instead of decoding greedily.
    pub stochastic_teacher: bool,
    /// Permit k2 = k2' = 0 (students never change; validation bypass).
    pub allow_zero_imitation: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(method: Method) -> Self {
        FinetuneConfig {
            method,
            alpha: method.default_alpha(),
            beta: if method == Method::Mixdata { 0.25 } else { 0.0 },
            k1: 3000,
            k2: 200,
            k2_prime: 300,
            tau: 0.5,
            lr: 1e-3,
            batch_size: 32,
            total_steps: 4000,
            eval_interval: 100,
            probe_interval: 50,
            teacher_dataset_size: 1024,
            student_gold_targets: false,
            stochastic_teacher: false,
            allow_zero_imitation: false,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.batch_size < 1 || self.total_steps < 1 {
            return Err(Error::Parameter("batch size and total steps must be >= 1".into()));
        }
        if self.eval_interval < 1 || self.probe_interval < 1 {
            return Err(Error::Parameter("eval and probe intervals must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !matches!(self.method, Method::S2p | Method::Ssil) && self.alpha != 0.0 {
            return Err(Error::Parameter(format!(
                "alpha applies only to s2p and ssil, not {}",
                self.method.as_str()
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.method != Method::Mixdata && self.beta != 0.0 {
            return Err(Error::Parameter(format!(
                "beta applies only to mixdata, not {}",
                self.method.as_str()
            )));
        }
        if self.method.is_iterated() {
            if self.k1 == 0 {
                return Err(Error::Parameter("k1 must be positive".into()));
            }
            if (self.k2 == 0 || self.k2_prime == 0) && !self.allow_zero_imitation {
                return Err(Error::Parameter(
                    "k2 and k2' must be positive (set allow_zero_imitation to bypass)".into(),
                ));
            }
            if self.teacher_dataset_size < 1 {
                return Err(Error::Parameter("teacher dataset size must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Everything a finetuning run reads: corpora, held-out triples, and the
/// game needed to draw fresh teacher-dataset sources.
#[derive(Debug, Clone)]
pub struct RunData {
    pub game: GameSpec,
    pub task_dist: DistributionSpec,
    pub pre_src_pvt: Vec<CorpusPair>,
    pub pre_pvt_tgt: Vec<CorpusPair>,
    pub task: Vec<CorpusPair>,
    pub eval: Vec<EvalTriple>,
}

// ── Losses ────────────────────────────────────────────────────────────

/// Interactive objective: sender Gumbel-decodes a pivot, the receiver
/// consumes the straight-through rows and is scored by teacher-forced
/// cross-entropy against the gold target. Differentiable w.r.t. both
/// agents; per-token mean over the batch.
pub fn interactive_loss(
    tape: &mut Tape,
    sender: &TapedSeq2Seq,
    receiver: &TapedSeq2Seq,
    batch: &[(&[usize], &[usize])],
    tau: f64,
    mut noise: Noise<'_>,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Data("interactive loss over empty batch".into()));
    }
    for (src, tgt) in batch {
        if src.len() != tgt.len() {
            return Err(Error::Contract(format!(
                "fixed-length game: source length {} != target length {}",
                src.len(),
                tgt.len()
            )));
        }
    }
    let lens: Vec<usize> = batch.iter().map(|(s, _)| s.len()).collect();
    let total_tokens: usize = lens.iter().sum();
    let mut weighted = Vec::new();
    for group in group_by_length(&lens) {
        let srcs: Vec<&[usize]> = group.indices.iter().map(|&i| batch[i].0).collect();
        let tgts: Vec<Vec<usize>> = group.indices.iter().map(|&i| batch[i].1.to_vec()).collect();
        let ctx = sender.encode_ids(tape, &srcs)?;
        let dec = sender.decode_gumbel(tape, ctx, group.len, tau, noise.reborrow())?;
        let rows = dec.st_rows.expect("gumbel decode always yields rows");
        let rctx = receiver.encode_rows(tape, &rows)?;
        let logits = receiver.decode_teacher_forced(tape, rctx, &tgts)?;
        let stacked = tape.concat_rows(&logits)?;
        let mut targets = Vec::with_capacity(group.indices.len() * group.len);
        for t in 0..group.len {
            for tgt in &tgts {
                targets.push(tgt[t]);
            }
        }
        let ce = tape.cross_entropy(stacked, &targets)?;
        let tokens_here = group.indices.len() * group.len;
        weighted.push(tape.scale(ce, tokens_here as f64 / total_tokens as f64));
    }
    let mut loss = weighted[0];
    for &w in &weighted[1..] {
        loss = tape.add(loss, w)?;
    }
    Ok(loss)
}

/// Loss values of one interactive step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub interactive: f64,
    pub supervised_sender: f64,
    pub supervised_receiver: f64,
}

/// One s2p update of both agents: interactive loss plus α × supervised
/// replay per agent, one optimizer step each. α = 0 is exactly a vanilla
/// Gumbel step — the supervised term is skipped, not multiplied by zero.
#[allow(clippy::too_many_arguments)]
pub fn s2p_step(
    sender: &mut Seq2SeqParams,
    receiver: &mut Seq2SeqParams,
    sender_opt: &mut Adam,
    receiver_opt: &mut Adam,
    task_batch: &[(&[usize], &[usize])],
    pre_sender_batch: Option<&[(&[usize], &[usize])]>,
    pre_receiver_batch: Option<&[(&[usize], &[usize])]>,
    alpha: f64,
    tau: f64,
    rng: &mut Rng,
) -> Result<StepLosses> {
    if alpha < 0.0 {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut tape = Tape::new();
    let snd = sender.stage(&mut tape, true);
    let rcv = receiver.stage(&mut tape, true);
    let l_int = interactive_loss(&mut tape, &snd, &rcv, task_batch, tau, Noise::Sampled(rng))?;
    let mut total = l_int;
    let mut su_snd = 0.0;
    let mut su_rcv = 0.0;
    if alpha > 0.0 {
        let b_snd = pre_sender_batch
            .ok_or_else(|| Error::Contract("alpha > 0 needs a sender pretraining batch".into()))?;
        let b_rcv = pre_receiver_batch
            .ok_or_else(|| Error::Contract("alpha > 0 needs a receiver pretraining batch".into()))?;
        let (l_snd, _) = batch_nll(&mut tape, &snd, b_snd)?;
        let (l_rcv, _) = batch_nll(&mut tape, &rcv, b_rcv)?;
        su_snd = tape.value(l_snd);
        su_rcv = tape.value(l_rcv);
        let w_snd = tape.scale(l_snd, alpha);
        let w_rcv = tape.scale(l_rcv, alpha);
        total = tape.add(total, w_snd)?;
        total = tape.add(total, w_rcv)?;
    }
    tape.backward(total)?;
    sender_opt.step(sender, &snd.read_grads(&tape))?;
    receiver_opt.step(receiver, &rcv.read_grads(&tape))?;
    Ok(StepLosses {
        total: tape.value(total),
        interactive: tape.value(l_int),
        supervised_sender: su_snd,
        supervised_receiver: su_rcv,
    })
}

/// One supervised step on a single agent.
fn supervised_step(
    agent: &mut Seq2SeqParams,
    opt: &mut Adam,
    batch: &[(&[usize], &[usize])],
) -> Result<f64> {
    let mut tape = Tape::new();
    let staged = agent.stage(&mut tape, true);
    let (loss, _) = batch_nll(&mut tape, &staged, batch)?;
    tape.backward(loss)?;
    opt.step(agent, &staged.read_grads(&tape))?;
    Ok(tape.value(loss))
}

// ── Gradient-conflict probe ───────────────────────────────────────────

/// Cosine between the sender gradients of the interactive loss and the
/// supervised pretraining loss at the same parameter point (no update in
/// between). `None` when either gradient has zero norm.
pub fn grad_conflict_probe(
    sender: &Seq2SeqParams,
    receiver: &Seq2SeqParams,
    task_batch: &[(&[usize], &[usize])],
    pre_sender_batch: &[(&[usize], &[usize])],
    tau: f64,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let g_int = sender_interactive_grad(sender, receiver, task_batch, tau, rng)?;
    let mut tape = Tape::new();
    let snd = sender.stage(&mut tape, true);
    let (l_su, _) = batch_nll(&mut tape, &snd, pre_sender_batch)?;
    tape.backward(l_su)?;
    let g_su = snd.read_grads(&tape).concat();
    match grad_cosine(&g_int, &g_su) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCosine) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Diagnostic mode: both sides of the cosine are the interactive gradient
/// computed from the same batch and noise, so the result is exactly 1.
pub fn grad_conflict_self_probe(
    sender: &Seq2SeqParams,
    receiver: &Seq2SeqParams,
    task_batch: &[(&[usize], &[usize])],
    tau: f64,
    rng: &Rng,
) -> Result<f64> {
    let mut rng_a = rng.clone();
    let mut rng_b = rng.clone();
    let g1 = sender_interactive_grad(sender, receiver, task_batch, tau, &mut rng_a)?;
    let g2 = sender_interactive_grad(sender, receiver, task_batch, tau, &mut rng_b)?;
    grad_cosine(&g1, &g2)
}

fn sender_interactive_grad(
    sender: &Seq2SeqParams,
    receiver: &Seq2SeqParams,
    task_batch: &[(&[usize], &[usize])],
    tau: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let snd = sender.stage(&mut tape, true);
    // receiver weights are constants here; the loss still flows through its
    // activations back to the sender
    let rcv = receiver.stage(&mut tape, false);
    let loss = interactive_loss(&mut tape, &snd, &rcv, task_batch, tau, Noise::Sampled(rng))?;
    tape.backward(loss)?;
    Ok(snd.read_grads(&tape).concat())
}

// ── Pretraining ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub val_nll_src_pvt: f64,
    pub val_nll_pvt_tgt: f64,
    pub val_bleu_pvt: f64,
}

/// Supervised teacher-forced pretraining of both agents on their
/// pretraining corpora. Runs epoch by epoch; stops early once the sender's
/// greedy grounding BLEU on the held-out pivot reaches `target_bleu`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    sender: &mut Seq2SeqParams,
    receiver: &mut Seq2SeqParams,
    pre_src_pvt: &[CorpusPair],
    pre_pvt_tgt: &[CorpusPair],
    val_src_pvt: &[CorpusPair],
    val_pvt_tgt: &[CorpusPair],
    epochs: usize,
    target_bleu: Option<f64>,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if pre_src_pvt.is_empty() || pre_pvt_tgt.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    let mut sender_opt = Adam::new(sender, lr);
    let mut receiver_opt = Adam::new(receiver, lr);
    let mut epochs_run = 0;
    for _ in 0..epochs {
        train_epoch(sender, &mut sender_opt, pre_src_pvt, batch_size, rng)?;
        train_epoch(receiver, &mut receiver_opt, pre_pvt_tgt, batch_size, rng)?;
        epochs_run += 1;
        if let Some(target) = target_bleu {
            if grounding_bleu(sender, val_src_pvt)? >= target {
                break;
            }
        }
    }
    Ok(PretrainReport {
        epochs_run,
        val_nll_src_pvt: corpus_nll(sender, val_src_pvt)?,
        val_nll_pvt_tgt: corpus_nll(receiver, val_pvt_tgt)?,
        val_bleu_pvt: grounding_bleu(sender, val_src_pvt)?,
    })
}

fn train_epoch(
    agent: &mut Seq2SeqParams,
    opt: &mut Adam,
    corpus: &[CorpusPair],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<(&[usize], &[usize])> = chunk
            .iter()
            .map(|&i| (corpus[i].src.as_slice(), corpus[i].tgt.as_slice()))
            .collect();
        total += supervised_step(agent, opt, &batch)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Greedy BLEU of an agent's output side against gold, over a corpus.
pub fn grounding_bleu(agent: &Seq2SeqParams, corpus: &[CorpusPair]) -> Result<f64> {
    let srcs: Vec<&[usize]> = corpus.iter().map(|p| p.src.as_slice()).collect();
    let hyps = greedy_decode_batch(agent, &srcs)?;
    let refs: Vec<Vec<usize>> = corpus.iter().map(|p| p.tgt.clone()).collect();
    crate::metrics::bleu_corpus(&hyps, &refs)
}

fn corpus_nll(agent: &Seq2SeqParams, corpus: &[CorpusPair]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let staged = agent.stage(&mut tape, false);
    let pairs: Vec<(&[usize], &[usize])> = corpus
        .iter()
        .map(|p| (p.src.as_slice(), p.tgt.as_slice()))
        .collect();
    let (loss, _) = batch_nll(&mut tape, &staged, &pairs)?;
    Ok(tape.value(loss))
}

/// Train the pivot language model on the pivot side of the pretraining
/// corpus, then freeze it.
pub fn train_lm(
    lm: &mut LMParams,
    pivot_corpus: &[CorpusPair],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if pivot_corpus.is_empty() {
        return Err(Error::Data("language model corpus is empty".into()));
    }
    let mut opt = Adam::new(lm, lr);
    let mut last = 0.0;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..pivot_corpus.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let seqs: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| pivot_corpus[i].tgt.as_slice())
                .collect();
            let mut tape = Tape::new();
            let staged = lm.stage_trainable(&mut tape);
            let (loss, _) = crate::agents::lm_batch_nll_staged(&mut tape, &staged, &seqs)?;
            tape.backward(loss)?;
            opt.step(lm, &staged.read_grads(&tape))?;
            total += tape.value(loss);
            batches += 1;
        }
        last = total / batches as f64;
    }
    lm.freeze();
    Ok(last)
}

// ── Teacher dataset ───────────────────────────────────────────────────

/// Pairs generated by decoding the current teacher on fresh task sources.
#[derive(Debug, Clone)]
pub struct TeacherDataset {
    pub sender_pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub receiver_pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

fn build_teacher_dataset(
    teacher_sender: &Seq2SeqParams,
    teacher_receiver: &Seq2SeqParams,
    cfg: &FinetuneConfig,
    data: &RunData,
    rng: &mut Rng,
) -> Result<TeacherDataset> {
    let mut srcs = Vec::with_capacity(cfg.teacher_dataset_size);
    let mut golds = Vec::with_capacity(cfg.teacher_dataset_size);
    for _ in 0..cfg.teacher_dataset_size {
        let concepts = data.task_dist.sample_concepts(rng);
        srcs.push(data.game.render(&concepts, Lang::Src)?);
        golds.push(data.game.render(&concepts, Lang::Tgt)?);
    }
    let src_refs: Vec<&[usize]> = srcs.iter().map(|s| s.as_slice()).collect();
    let pvt = if cfg.stochastic_teacher {
        sampled_decode_batch(teacher_sender, &src_refs, cfg.tau, rng)?
    } else {
        greedy_decode_batch(teacher_sender, &src_refs)?
    };
    let pvt_refs: Vec<&[usize]> = pvt.iter().map(|s| s.as_slice()).collect();
    let tgt = if cfg.stochastic_teacher {
        sampled_decode_batch(teacher_receiver, &pvt_refs, cfg.tau, rng)?
    } else {
        greedy_decode_batch(teacher_receiver, &pvt_refs)?
    };
    let receiver_targets = if cfg.student_gold_targets { golds } else { tgt };
    Ok(TeacherDataset {
        sender_pairs: srcs.into_iter().zip(pvt.clone()).collect(),
        receiver_pairs: pvt.into_iter().zip(receiver_targets).collect(),
    })
}

/// Decode through the Gumbel channel without gradients; used only when the
/// teacher is configured to sample instead of decoding greedily.
fn sampled_decode_batch(
    params: &Seq2SeqParams,
    srcs: &[&[usize]],
    tau: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::no_grad();
    let agent = params.stage(&mut tape, false);
    let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let mut out = vec![Vec::new(); srcs.len()];
    for group in group_by_length(&lens) {
        let gs: Vec<&[usize]> = group.indices.iter().map(|&i| srcs[i]).collect();
        let ctx = agent.encode_ids(&mut tape, &gs)?;
        let dec = agent.decode_gumbel(&mut tape, ctx, group.len, tau, Noise::Sampled(rng))?;
        for (pos, &i) in group.indices.iter().enumerate() {
            out[i] = dec.tokens[pos].clone();
        }
    }
    Ok(out)
}

// ── Batch sampling ────────────────────────────────────────────────────
//
// Batches are drawn single-length: one anchor draw picks the length with
// the corpus's own length distribution, the rest of the batch comes from
// the same-length bucket. Equal-length batches run as one matrix recurrence
// instead of one per length.

struct Buckets {
    bucket_of: Vec<u32>,
    buckets: Vec<Vec<usize>>,
}

impl Buckets {
    fn build(lens: &[usize]) -> Self {
        let mut sorted: Vec<usize> = lens.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut buckets = vec![Vec::new(); sorted.len()];
        let mut bucket_of = vec![0u32; lens.len()];
        for (i, &len) in lens.iter().enumerate() {
            let b = sorted.binary_search(&len).unwrap();
            buckets[b].push(i);
            bucket_of[i] = b as u32;
        }
        Buckets { bucket_of, buckets }
    }

    fn sample(&self, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
        let anchor = rng.below(self.bucket_of.len());
        let bucket = &self.buckets[self.bucket_of[anchor] as usize];
        let mut out = Vec::with_capacity(batch_size);
        out.push(anchor);
        for _ in 1..batch_size {
            out.push(bucket[rng.below(bucket.len())]);
        }
        out
    }
}

fn corpus_buckets(corpus: &[CorpusPair]) -> Buckets {
    let lens: Vec<usize> = corpus.iter().map(|p| p.src.len()).collect();
    Buckets::build(&lens)
}

fn pair_buckets(pairs: &[(Vec<usize>, Vec<usize>)]) -> Buckets {
    let lens: Vec<usize> = pairs.iter().map(|p| p.0.len()).collect();
    Buckets::build(&lens)
}

fn sample_batch<'a>(
    corpus: &'a [CorpusPair],
    buckets: &Buckets,
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<(&'a [usize], &'a [usize])> {
    buckets
        .sample(batch_size, rng)
        .into_iter()
        .map(|i| (corpus[i].src.as_slice(), corpus[i].tgt.as_slice()))
        .collect()
}

fn sample_pairs<'a>(
    pairs: &'a [(Vec<usize>, Vec<usize>)],
    buckets: &Buckets,
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<(&'a [usize], &'a [usize])> {
    buckets
        .sample(batch_size, rng)
        .into_iter()
        .map(|i| (pairs[i].0.as_slice(), pairs[i].1.as_slice()))
        .collect()
}

/// Rolling window over the most recent gradient-cosine probes.
struct ProbeTrace {
    window: VecDeque<f64>,
    last_raw: Option<f64>,
}

impl ProbeTrace {
    fn new() -> Self {
        ProbeTrace {
            window: VecDeque::with_capacity(100),
            last_raw: None,
        }
    }

    fn push(&mut self, value: Option<f64>) {
        self.last_raw = value;
        if let Some(v) = value {
            if self.window.len() == 100 {
                self.window.pop_front();
            }
            self.window.push_back(v);
        }
    }

    fn moving_average(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }
}

/// Run one finetuning regime to its step budget, evaluating the deliverable
/// agents (the students, for iterated methods) on the held-out triples.
/// `on_eval` fires for every recorded snapshot with the evaluated agents.
pub fn run_finetune(
    cfg: &FinetuneConfig,
    sender: &mut Seq2SeqParams,
    receiver: &mut Seq2SeqParams,
    data: &RunData,
    lm: &LMParams,
    mut on_eval: impl FnMut(&MetricsRecord, &Seq2SeqParams, &Seq2SeqParams),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if data.task.is_empty() {
        return Err(Error::Data("task corpus is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed).derive("finetune");
    let task_buckets = corpus_buckets(&data.task);
    let pre_s_buckets = corpus_buckets(&data.pre_src_pvt);
    let pre_r_buckets = corpus_buckets(&data.pre_pvt_tgt);
    let mut records = Vec::new();
    let mut probes = ProbeTrace::new();
    let mut step = 0usize;

    let evaluate = |step: usize,
                        snd: &Seq2SeqParams,
                        rcv: &Seq2SeqParams,
                        probes: &ProbeTrace,
                        records: &mut Vec<MetricsRecord>,
                        on_eval: &mut dyn FnMut(&MetricsRecord, &Seq2SeqParams, &Seq2SeqParams)|
     -> Result<()> {
        let mut rec = eval_pipeline(snd, rcv, &data.eval, lm)?;
        rec.step = step;
        rec.grad_cos_raw = probes.last_raw;
        rec.grad_cos_ma100 = probes.moving_average();
        rec.check_ranges()?;
        on_eval(&rec, snd, rcv);
        // a post-imitation snapshot supersedes the interval one at the same step
        if records.last().map(|r| r.step) == Some(step) {
            records.pop();
        }
        records.push(rec);
        Ok(())
    };

    evaluate(0, sender, receiver, &probes, &mut records, &mut on_eval)?;

    match cfg.method {
        Method::Gumbel | Method::S2p => {
            let mut sender_opt = Adam::new(sender, cfg.lr);
            let mut receiver_opt = Adam::new(receiver, cfg.lr);
            while step < cfg.total_steps {
                maybe_probe(cfg, sender, receiver, data, step, &mut rng, &mut probes)?;
                let task_batch = sample_batch(&data.task, cfg.batch_size, &mut rng);
                let (pre_s, pre_r);
                let (pre_s_ref, pre_r_ref) = if cfg.alpha > 0.0 {
                    pre_s = sample_batch(&data.pre_src_pvt, cfg.batch_size, &mut rng);
                    pre_r = sample_batch(&data.pre_pvt_tgt, cfg.batch_size, &mut rng);
                    (Some(pre_s.as_slice()), Some(pre_r.as_slice()))
                } else {
                    (None, None)
                };
                s2p_step(
                    sender,
                    receiver,
                    &mut sender_opt,
                    &mut receiver_opt,
                    &task_batch,
                    pre_s_ref,
                    pre_r_ref,
                    cfg.alpha,
                    cfg.tau,
                    &mut rng,
                )?;
                step += 1;
                if step % cfg.eval_interval == 0 || step == cfg.total_steps {
                    evaluate(step, sender, receiver, &probes, &mut records, &mut on_eval)?;
                }
            }
        }
        Method::Sil | Method::Ssil | Method::Mixdata => {
            // the caller's agents are the student lineage
            let teacher_alpha = if cfg.method == Method::Ssil { cfg.alpha } else { 0.0 };
            let mut student_sender_opt = Adam::new(sender, cfg.lr);
            let mut student_receiver_opt = Adam::new(receiver, cfg.lr);
            while step < cfg.total_steps {
                let mut teacher_sender = sender.clone();
                let mut teacher_receiver = receiver.clone();
                let mut t_snd_opt = Adam::new(&teacher_sender, cfg.lr);
                let mut t_rcv_opt = Adam::new(&teacher_receiver, cfg.lr);
                for _ in 0..cfg.k1 {
                    maybe_probe(
                        cfg,
                        &teacher_sender,
                        &teacher_receiver,
                        data,
                        step,
                        &mut rng,
                        &mut probes,
                    )?;
                    let task_batch = sample_batch(&data.task, cfg.batch_size, &mut rng);
                    let (pre_s, pre_r);
                    let (pre_s_ref, pre_r_ref) = if teacher_alpha > 0.0 {
                        pre_s = sample_batch(&data.pre_src_pvt, cfg.batch_size, &mut rng);
                        pre_r = sample_batch(&data.pre_pvt_tgt, cfg.batch_size, &mut rng);
                        (Some(pre_s.as_slice()), Some(pre_r.as_slice()))
                    } else {
                        (None, None)
                    };
                    s2p_step(
                        &mut teacher_sender,
                        &mut teacher_receiver,
                        &mut t_snd_opt,
                        &mut t_rcv_opt,
                        &task_batch,
                        pre_s_ref,
                        pre_r_ref,
                        teacher_alpha,
                        cfg.tau,
                        &mut rng,
                    )?;
                    step += 1;
                    if step % cfg.eval_interval == 0 {
                        evaluate(step, sender, receiver, &probes, &mut records, &mut on_eval)?;
                    }
                }
                let dataset =
                    build_teacher_dataset(&teacher_sender, &teacher_receiver, cfg, data, &mut rng)?;
                for _ in 0..cfg.k2 {
                    let batch =
                        mixed_batch(&dataset.sender_pairs, &data.pre_src_pvt, cfg, &mut rng);
                    supervised_step(sender, &mut student_sender_opt, &batch)?;
                }
                for _ in 0..cfg.k2_prime {
                    let batch =
                        mixed_batch(&dataset.receiver_pairs, &data.pre_pvt_tgt, cfg, &mut rng);
                    supervised_step(receiver, &mut student_receiver_opt, &batch)?;
                }
                evaluate(step, sender, receiver, &probes, &mut records, &mut on_eval)?;
            }
        }
    }
    if records.last().map(|r| r.step) != Some(step) {
        evaluate(step, sender, receiver, &probes, &mut records, &mut on_eval)?;
    }
    Ok(records)
}

/// Student imitation batch: β fraction of pretraining pairs, the rest from
/// the teacher dataset. β = 0 never touches the random stream for the
/// pretraining draw.
fn mixed_batch<'a>(
    teacher_pairs: &'a [(Vec<usize>, Vec<usize>)],
    pretrain: &'a [CorpusPair],
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Vec<(&'a [usize], &'a [usize])> {
    let n_pre = (cfg.beta * cfg.batch_size as f64).round() as usize;
    let n_teacher = cfg.batch_size - n_pre.min(cfg.batch_size);
    let mut batch = sample_pairs(teacher_pairs, n_teacher, rng);
    if n_pre > 0 {
        batch.extend(sample_batch(pretrain, n_pre.min(cfg.batch_size), rng));
    }
    batch
}

fn maybe_probe(
    cfg: &FinetuneConfig,
    sender: &Seq2SeqParams,
    receiver: &Seq2SeqParams,
    data: &RunData,
    step: usize,
    rng: &mut Rng,
    probes: &mut ProbeTrace,
) -> Result<()> {
    if step == 0 || step % cfg.probe_interval != 0 {
        return Ok(());
    }
    let task_batch = sample_batch(&data.task, cfg.batch_size, rng);
    let pre_batch = sample_batch(&data.pre_src_pvt, cfg.batch_size, rng);
    let value = grad_conflict_probe(sender, receiver, &task_batch, &pre_batch, cfg.tau, rng)?;
    probes.push(value);
    Ok(())
}
