//! Recurrent sequence-to-sequence agents and the frozen pivot language model.
//!
//! Both agents are Elman-style encoder/decoders with tanh cells. The decoder
//! always consumes embedded one-hot rows (one-hot × embedding table), so the
//! teacher-forced, greedy and Gumbel straight-through paths share one code
//! path; only where the one-hot comes from differs. Output length equals
//! input length — the game has no EOS token, so drift is purely lexical and
//! ordering, never length.
//!
//! Batches are processed in equal-length groups so each recurrence step is
//! one matrix product instead of a loop over sequences.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{argmax, Mat, Tape, Tensor};

pub const DEFAULT_HIDDEN: usize = 32;
const INIT_RANGE: f64 = 0.08;

// ── Length grouping ───────────────────────────────────────────────────

/// Indices of a batch that share one sequence length.
#[derive(Debug, Clone)]
pub struct LengthGroup {
    pub len: usize,
    pub indices: Vec<usize>,
}

/// Partition batch indices by sequence length, ascending; original order is
/// kept inside each group so replays are deterministic.
pub fn group_by_length(lens: &[usize]) -> Vec<LengthGroup> {
    let mut groups: Vec<LengthGroup> = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        match groups.iter_mut().find(|g| g.len == len) {
            Some(g) => g.indices.push(i),
            None => groups.push(LengthGroup {
                len,
                indices: vec![i],
            }),
        }
    }
    groups.sort_by_key(|g| g.len);
    groups
}

// ── Sequence-to-sequence agent ────────────────────────────────────────

/// Parameters of one encoder/decoder agent. The field order is the
/// canonical parameter order used by flattened gradients and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub v_in: usize,
    pub v_out: usize,
    pub d: usize,
    /// Read the input right-to-left. With a recurrent memory the freshest
    /// position is the easiest to reproduce, so the encoder should read the
    /// side whose first output token comes first in the input last.
    pub reverse_input: bool,
    pub enc_embed: Mat, // v_in × d
    pub w_eh: Mat,      // d × d
    pub w_ex: Mat,      // d × d
    pub b_e: Mat,       // 1 × d
    pub dec_embed: Mat, // v_out × d
    pub dec_start: Mat, // 1 × d, learned first decoder input
    pub w_dh: Mat,      // d × d
    pub w_dx: Mat,      // d × d
    pub w_dc: Mat,      // d × d, context fed at every step
    pub b_d: Mat,       // 1 × d
    pub w_out: Mat,     // d × v_out
    pub b_out: Mat,     // 1 × v_out
}

pub fn init_params(seed: u64, v_in: usize, v_out: usize, d: usize) -> Result<Seq2SeqParams> {
    init_params_with(seed, v_in, v_out, d, false)
}

pub fn init_params_with(
    seed: u64,
    v_in: usize,
    v_out: usize,
    d: usize,
    reverse_input: bool,
) -> Result<Seq2SeqParams> {
    if v_in < 1 || v_out < 1 || d < 1 {
        return Err(Error::Parameter(format!(
            "all dimensions must be >= 1, got v_in={v_in} v_out={v_out} d={d}"
        )));
    }
    let mut rng = Rng::new(seed).derive("seq2seq-init");
    let mut u = |r, c| Mat::uniform(&mut rng, -INIT_RANGE, INIT_RANGE, r, c);
    Ok(Seq2SeqParams {
        v_in,
        v_out,
        d,
        reverse_input,
        enc_embed: u(v_in, d),
        w_eh: u(d, d),
        w_ex: u(d, d),
        b_e: u(1, d),
        dec_embed: u(v_out, d),
        dec_start: u(1, d),
        w_dh: u(d, d),
        w_dx: u(d, d),
        w_dc: u(d, d),
        b_d: u(1, d),
        w_out: u(d, v_out),
        b_out: u(1, v_out),
    })
}

impl ParamSet for Seq2SeqParams {
    fn param_names(&self) -> Vec<&'static str> {
        vec![
            "enc_embed", "w_eh", "w_ex", "b_e", "dec_embed", "dec_start", "w_dh", "w_dx",
            "w_dc", "b_d", "w_out", "b_out",
        ]
    }

    fn params(&self) -> Vec<&Mat> {
        vec![
            &self.enc_embed,
            &self.w_eh,
            &self.w_ex,
            &self.b_e,
            &self.dec_embed,
            &self.dec_start,
            &self.w_dh,
            &self.w_dx,
            &self.w_dc,
            &self.b_d,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.enc_embed,
            &mut self.w_eh,
            &mut self.w_ex,
            &mut self.b_e,
            &mut self.dec_embed,
            &mut self.dec_start,
            &mut self.w_dh,
            &mut self.w_dx,
            &mut self.w_dc,
            &mut self.b_d,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

impl Seq2SeqParams {
    /// Put a copy of every parameter on the tape; gradients are read back
    /// from the returned handles after `backward`.
    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> TapedSeq2Seq {
        let mut put = |m: &Mat| tape.from_mat(m, requires_grad);
        TapedSeq2Seq {
            v_in: self.v_in,
            v_out: self.v_out,
            d: self.d,
            reverse_input: self.reverse_input,
            enc_embed: put(&self.enc_embed),
            w_eh: put(&self.w_eh),
            w_ex: put(&self.w_ex),
            b_e: put(&self.b_e),
            dec_embed: put(&self.dec_embed),
            dec_start: put(&self.dec_start),
            w_dh: put(&self.w_dh),
            w_dx: put(&self.w_dx),
            w_dc: put(&self.w_dc),
            b_d: put(&self.b_d),
            w_out: put(&self.w_out),
            b_out: put(&self.b_out),
        }
    }
}

/// Tape handles of one staged agent.
#[derive(Debug, Clone, Copy)]
pub struct TapedSeq2Seq {
    pub v_in: usize,
    pub v_out: usize,
    pub d: usize,
    reverse_input: bool,
    enc_embed: Tensor,
    w_eh: Tensor,
    w_ex: Tensor,
    b_e: Tensor,
    dec_embed: Tensor,
    dec_start: Tensor,
    w_dh: Tensor,
    w_dx: Tensor,
    w_dc: Tensor,
    b_d: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

/// How the decoder picks the next input row at each step.
enum StepPick<'a, 'r> {
    TeacherForced(&'a [Vec<usize>]),
    Greedy,
    Gumbel { tau: f64, noise: Noise<'r> },
    /// Differentiable relaxation: the softmax rows themselves are fed
    /// forward instead of one-hots. Finite-difference probes use this mode;
    /// training never does.
    GumbelSoft { tau: f64, noise: Noise<'r> },
}

/// Noise source for Gumbel decoding; `Zero` gives the noiseless reduction
/// used by tests and the gradient probe.
pub enum Noise<'r> {
    Sampled(&'r mut Rng),
    Zero,
}

impl Noise<'_> {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        match self {
            Noise::Sampled(rng) => (0..n).map(|_| rng.gumbel()).collect(),
            Noise::Zero => vec![0.0; n],
        }
    }

    /// Borrow this noise source again for a sub-call.
    pub fn reborrow(&mut self) -> Noise<'_> {
        match self {
            Noise::Sampled(rng) => Noise::Sampled(rng),
            Noise::Zero => Noise::Zero,
        }
    }
}

/// Decoded group: per-step logits, emitted token ids per sequence, model
/// log-probabilities of the emitted tokens, and (Gumbel only) the
/// straight-through rows fed downstream.
pub struct GroupDecode {
    pub logits: Vec<Tensor>,       // len steps, each g × v_out
    pub tokens: Vec<Vec<usize>>,   // [g][len]
    pub logprobs: Vec<Vec<f64>>,   // [g][len]
    pub st_rows: Option<Vec<Tensor>>, // len steps, each g × v_out
}

impl TapedSeq2Seq {
    /// Encoder over constant token ids; all sequences share one length.
    pub fn encode_ids(&self, tape: &mut Tape, seqs: &[&[usize]]) -> Result<Tensor> {
        let len = seqs.first().map_or(0, |s| s.len());
        if len == 0 {
            return Err(Error::Contract("encode: empty sequence".into()));
        }
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let ids: Vec<usize> = seqs
                .iter()
                .map(|s| {
                    debug_assert_eq!(s.len(), len);
                    s[t]
                })
                .collect();
            steps.push(tape.onehot_rows(&ids, self.v_in)?);
        }
        self.encode_rows(tape, &steps)
    }

    /// Encoder over per-step one-hot rows (constants or straight-through
    /// samples); returns the context, g × d. Steps arrive in surface order;
    /// `reverse_input` flips the reading order internally.
    pub fn encode_rows(&self, tape: &mut Tape, steps: &[Tensor]) -> Result<Tensor> {
        if steps.is_empty() {
            return Err(Error::Contract("encode: empty sequence".into()));
        }
        let g = tape.shape(steps[0])[0];
        let zeros = tape.constant(vec![0.0; g * self.d], vec![g, self.d])?;
        let mut h = zeros;
        let order: Vec<usize> = if self.reverse_input {
            (0..steps.len()).rev().collect()
        } else {
            (0..steps.len()).collect()
        };
        for i in order {
            let x = steps[i];
            let e = tape.matmul(x, self.enc_embed)?;
            let hh = tape.matmul(h, self.w_eh)?;
            let ex = tape.matmul(e, self.w_ex)?;
            let pre = tape.add(hh, ex)?;
            let pre = tape.add_row(pre, self.b_e)?;
            h = tape.tanh(pre);
        }
        Ok(h)
    }

    /// Teacher-forced decode: previous gold token is fed back; returns the
    /// per-step logits for the cross-entropy loss.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        ctx: Tensor,
        targets: &[Vec<usize>],
    ) -> Result<Vec<Tensor>> {
        let out = self.decode_loop(
            tape,
            ctx,
            targets.first().map_or(0, |t| t.len()),
            StepPick::TeacherForced(targets),
        )?;
        Ok(out.logits)
    }

    pub fn decode_greedy(&self, tape: &mut Tape, ctx: Tensor, len: usize) -> Result<GroupDecode> {
        self.decode_loop(tape, ctx, len, StepPick::Greedy)
    }

    pub fn decode_gumbel(
        &self,
        tape: &mut Tape,
        ctx: Tensor,
        len: usize,
        tau: f64,
        noise: Noise<'_>,
    ) -> Result<GroupDecode> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "gumbel decode: tau must be positive, got {tau}"
            )));
        }
        self.decode_loop(tape, ctx, len, StepPick::Gumbel { tau, noise })
    }

    /// Fully differentiable relaxation of [`TapedSeq2Seq::decode_gumbel`]:
    /// softmax rows are fed forward, so the whole pipeline admits a
    /// finite-difference check.
    pub fn decode_gumbel_soft(
        &self,
        tape: &mut Tape,
        ctx: Tensor,
        len: usize,
        tau: f64,
        noise: Noise<'_>,
    ) -> Result<GroupDecode> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "gumbel decode: tau must be positive, got {tau}"
            )));
        }
        self.decode_loop(tape, ctx, len, StepPick::GumbelSoft { tau, noise })
    }

    fn decode_loop(
        &self,
        tape: &mut Tape,
        ctx: Tensor,
        len: usize,
        mut pick: StepPick<'_, '_>,
    ) -> Result<GroupDecode> {
        if len == 0 {
            return Err(Error::Contract("decode: zero output length".into()));
        }
        let g = tape.shape(ctx)[0];
        let mut s = ctx;
        let mut prev = tape.repeat_row(self.dec_start, g)?;
        let mut logits_steps = Vec::with_capacity(len);
        let mut tokens = vec![Vec::with_capacity(len); g];
        let mut logprobs = vec![Vec::with_capacity(len); g];
        let mut st_rows = Vec::new();
        for t in 0..len {
            let sh = tape.matmul(s, self.w_dh)?;
            let px = tape.matmul(prev, self.w_dx)?;
            let cc = tape.matmul(ctx, self.w_dc)?;
            let pre = tape.add(sh, px)?;
            let pre = tape.add(pre, cc)?;
            let pre = tape.add_row(pre, self.b_d)?;
            s = tape.tanh(pre);
            let raw = tape.matmul(s, self.w_out)?;
            let logits = tape.add_row(raw, self.b_out)?;
            logits_steps.push(logits);

            let (feed, ids) = match &mut pick {
                StepPick::TeacherForced(targets) => {
                    let ids: Vec<usize> = targets
                        .iter()
                        .map(|tgt| {
                            debug_assert_eq!(tgt.len(), len);
                            tgt[t]
                        })
                        .collect();
                    (tape.onehot_rows(&ids, self.v_out)?, ids)
                }
                StepPick::Greedy => {
                    let ids = row_argmax(tape.data(logits), self.v_out);
                    (tape.onehot_rows(&ids, self.v_out)?, ids)
                }
                StepPick::Gumbel { tau, noise } => {
                    let draws = noise.draw(g * self.v_out);
                    let st = tape.gumbel_softmax_st_with_noise(logits, *tau, &draws)?;
                    let ids = row_argmax(tape.data(st), self.v_out);
                    st_rows.push(st);
                    (st, ids)
                }
                StepPick::GumbelSoft { tau, noise } => {
                    let draws = noise.draw(g * self.v_out);
                    let noise_t = tape.constant(draws, vec![g, self.v_out])?;
                    let shifted = tape.add(logits, noise_t)?;
                    let scaled = tape.scale(shifted, 1.0 / *tau);
                    let soft = tape.softmax(scaled)?;
                    let ids = row_argmax(tape.data(soft), self.v_out);
                    st_rows.push(soft);
                    (soft, ids)
                }
            };
            let lp = row_logprobs(tape.data(logits), self.v_out, &ids);
            for (r, (&id, l)) in ids.iter().zip(lp).enumerate() {
                tokens[r].push(id);
                logprobs[r].push(l);
            }
            prev = tape.matmul(feed, self.dec_embed)?;
        }
        Ok(GroupDecode {
            logits: logits_steps,
            tokens,
            logprobs,
            st_rows: if st_rows.is_empty() {
                None
            } else {
                Some(st_rows)
            },
        })
    }

    /// Gradients of all staged parameters in canonical order; zeros where
    /// backward never reached a tensor.
    pub fn read_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.handles()
            .into_iter()
            .map(|t| tape.grad_or_zeros(t))
            .collect()
    }

    fn handles(&self) -> Vec<Tensor> {
        vec![
            self.enc_embed,
            self.w_eh,
            self.w_ex,
            self.b_e,
            self.dec_embed,
            self.dec_start,
            self.w_dh,
            self.w_dx,
            self.w_dc,
            self.b_d,
            self.w_out,
            self.b_out,
        ]
    }
}

fn row_argmax(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks_exact(width).map(argmax).collect()
}

fn row_logprobs(logits: &[f64], width: usize, ids: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(width)
        .zip(ids)
        .map(|(row, &id)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row[id] - lse
        })
        .collect()
}

// ── Batch-level losses and decoding ───────────────────────────────────

/// Per-token mean teacher-forced NLL over a batch of (input, output) pairs.
/// Returns the scalar loss and the number of scored tokens.
pub fn batch_nll(
    tape: &mut Tape,
    agent: &TapedSeq2Seq,
    pairs: &[(&[usize], &[usize])],
) -> Result<(Tensor, usize)> {
    if pairs.is_empty() {
        return Err(Error::Data("teacher-forced loss over empty batch".into()));
    }
    for (src, tgt) in pairs {
        if src.len() != tgt.len() {
            return Err(Error::Contract(format!(
                "fixed-length game: input length {} != output length {}",
                src.len(),
                tgt.len()
            )));
        }
        if src.is_empty() {
            return Err(Error::Contract("empty sequence in batch".into()));
        }
    }
    let lens: Vec<usize> = pairs.iter().map(|(s, _)| s.len()).collect();
    let total_tokens: usize = lens.iter().sum();
    let mut weighted = Vec::new();
    for group in group_by_length(&lens) {
        let srcs: Vec<&[usize]> = group.indices.iter().map(|&i| pairs[i].0).collect();
        let tgts: Vec<Vec<usize>> = group.indices.iter().map(|&i| pairs[i].1.to_vec()).collect();
        let ctx = agent.encode_ids(tape, &srcs)?;
        let logits = agent.decode_teacher_forced(tape, ctx, &tgts)?;
        let stacked = tape.concat_rows(&logits)?;
        // step-major target layout matches the stacked logit rows
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
    Ok((loss, total_tokens))
}

/// Spec-level single-pair op: differentiable per-token mean NLL.
pub fn nll_teacher_forced(
    tape: &mut Tape,
    agent: &TapedSeq2Seq,
    src: &[usize],
    tgt: &[usize],
) -> Result<Tensor> {
    batch_nll(tape, agent, &[(src, tgt)]).map(|(loss, _)| loss)
}

/// One decoded sequence.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    /// Straight-through rows (1 × v_out each) when decoded via Gumbel.
    pub onehots: Option<Vec<Tensor>>,
}

/// Deterministic greedy decode of one sequence; runs on its own tape.
pub fn greedy_decode(params: &Seq2SeqParams, src: &[usize]) -> Result<DecodeOutput> {
    let mut tape = Tape::no_grad();
    let agent = params.stage(&mut tape, false);
    let ctx = agent.encode_ids(&mut tape, &[src])?;
    let out = agent.decode_greedy(&mut tape, ctx, src.len())?;
    Ok(DecodeOutput {
        tokens: out.tokens.into_iter().next().unwrap(),
        logprobs: out.logprobs.into_iter().next().unwrap(),
        onehots: None,
    })
}

/// Greedy decode of many sequences, grouped by length; original order.
pub fn greedy_decode_batch(params: &Seq2SeqParams, srcs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::no_grad();
    let agent = params.stage(&mut tape, false);
    let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let mut out = vec![Vec::new(); srcs.len()];
    for group in group_by_length(&lens) {
        let gs: Vec<&[usize]> = group.indices.iter().map(|&i| srcs[i]).collect();
        let ctx = agent.encode_ids(&mut tape, &gs)?;
        let dec = agent.decode_greedy(&mut tape, ctx, group.len)?;
        for (pos, &i) in group.indices.iter().enumerate() {
            out[i] = dec.tokens[pos].clone();
        }
    }
    Ok(out)
}

/// Differentiable Gumbel straight-through decode of one sequence on the
/// caller's tape; gradients flow into the staged agent.
pub fn gumbel_decode(
    tape: &mut Tape,
    agent: &TapedSeq2Seq,
    src: &[usize],
    tau: f64,
    rng: &mut Rng,
) -> Result<DecodeOutput> {
    gumbel_decode_with(tape, agent, src, tau, Noise::Sampled(rng))
}

/// Gumbel decode with an explicit noise source (zero noise reduces to
/// greedy decoding token-for-token).
pub fn gumbel_decode_with(
    tape: &mut Tape,
    agent: &TapedSeq2Seq,
    src: &[usize],
    tau: f64,
    noise: Noise<'_>,
) -> Result<DecodeOutput> {
    let ctx = agent.encode_ids(tape, &[src])?;
    let out = agent.decode_gumbel(tape, ctx, src.len(), tau, noise)?;
    Ok(DecodeOutput {
        tokens: out.tokens.into_iter().next().unwrap(),
        logprobs: out.logprobs.into_iter().next().unwrap(),
        onehots: out.st_rows,
    })
}

// ── Pivot language model ──────────────────────────────────────────────

/// Recurrent next-token model over the pivot vocabulary. Trained once on
/// the pretraining pivot corpus, then frozen; the freeze hash is the CRC32
/// of its serialized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LMParams {
    pub v: usize,
    pub d: usize,
    pub embed: Mat,  // v × d
    pub start: Mat,  // 1 × d
    pub w_hh: Mat,   // d × d
    pub w_hx: Mat,   // d × d
    pub b_h: Mat,    // 1 × d
    pub w_out: Mat,  // d × v
    pub b_out: Mat,  // 1 × v
    frozen: Option<u32>,
}

pub fn init_lm(seed: u64, v: usize, d: usize) -> Result<LMParams> {
    if v < 1 || d < 1 {
        return Err(Error::Parameter(format!(
            "all dimensions must be >= 1, got v={v} d={d}"
        )));
    }
    let mut rng = Rng::new(seed).derive("lm-init");
    let mut u = |r, c| Mat::uniform(&mut rng, -INIT_RANGE, INIT_RANGE, r, c);
    Ok(LMParams {
        v,
        d,
        embed: u(v, d),
        start: u(1, d),
        w_hh: u(d, d),
        w_hx: u(d, d),
        b_h: u(1, d),
        w_out: u(d, v),
        b_out: u(1, v),
        frozen: None,
    })
}

impl ParamSet for LMParams {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["embed", "start", "w_hh", "w_hx", "b_h", "w_out", "b_out"]
    }

    fn params(&self) -> Vec<&Mat> {
        vec![
            &self.embed,
            &self.start,
            &self.w_hh,
            &self.w_hx,
            &self.b_h,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        assert!(
            self.frozen.is_none(),
            "frozen language model must not be mutated"
        );
        vec![
            &mut self.embed,
            &mut self.start,
            &mut self.w_hh,
            &mut self.w_hx,
            &mut self.b_h,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

impl LMParams {
    /// Record the content hash; the model is immutable afterwards.
    pub fn freeze(&mut self) {
        let hash = crate::checkpoint::content_hash(self);
        self.frozen = Some(hash);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn freeze_hash(&self) -> Option<u32> {
        self.frozen
    }

    /// Recompute the content hash and compare against the freeze-time value.
    pub fn verify_frozen(&self) -> Result<()> {
        match self.frozen {
            None => Err(Error::Contract("language model is not frozen".into())),
            Some(h) => {
                let now = crate::checkpoint::content_hash(self);
                if now == h {
                    Ok(())
                } else {
                    Err(Error::Contract(format!(
                        "frozen language model changed: hash {now:08x} != {h:08x}"
                    )))
                }
            }
        }
    }

    /// Per-token mean NLL of every sequence under the model, teacher-forced,
    /// with no gradient recorded.
    pub fn batch_nll(&self, tape: &mut Tape, seqs: &[&[usize]]) -> Result<(Tensor, usize)> {
        let staged = self.stage(tape, false);
        lm_batch_nll_staged(tape, &staged, seqs)
    }

    fn stage(&self, tape: &mut Tape, requires_grad: bool) -> TapedLm {
        let mut put = |m: &Mat| tape.from_mat(m, requires_grad);
        TapedLm {
            v: self.v,
            d: self.d,
            embed: put(&self.embed),
            start: put(&self.start),
            w_hh: put(&self.w_hh),
            w_hx: put(&self.w_hx),
            b_h: put(&self.b_h),
            w_out: put(&self.w_out),
            b_out: put(&self.b_out),
        }
    }

    /// Staged view for training; panics if already frozen.
    pub fn stage_trainable(&self, tape: &mut Tape) -> TapedLm {
        assert!(self.frozen.is_none(), "cannot train a frozen language model");
        self.stage(tape, true)
    }
}

/// Tape handles of a staged language model.
#[derive(Debug, Clone, Copy)]
pub struct TapedLm {
    pub v: usize,
    pub d: usize,
    embed: Tensor,
    start: Tensor,
    w_hh: Tensor,
    w_hx: Tensor,
    b_h: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

impl TapedLm {
    pub fn read_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        [
            self.embed, self.start, self.w_hh, self.w_hx, self.b_h, self.w_out, self.b_out,
        ]
        .iter()
        .map(|&t| tape.grad_or_zeros(t))
        .collect()
    }
}

/// Per-token mean NLL of a batch of sequences under a staged LM.
pub fn lm_batch_nll_staged(
    tape: &mut Tape,
    lm: &TapedLm,
    seqs: &[&[usize]],
) -> Result<(Tensor, usize)> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Data("language model scoring needs nonempty sequences".into()));
    }
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let total_tokens: usize = lens.iter().sum();
    let mut weighted = Vec::new();
    for group in group_by_length(&lens) {
        let g = group.indices.len();
        let mut h = tape.constant(vec![0.0; g * lm.d], vec![g, lm.d])?;
        let mut x = tape.repeat_row(lm.start, g)?;
        let mut step_logits = Vec::with_capacity(group.len);
        for t in 0..group.len {
            let hh = tape.matmul(h, lm.w_hh)?;
            let hx = tape.matmul(x, lm.w_hx)?;
            let pre = tape.add(hh, hx)?;
            let pre = tape.add_row(pre, lm.b_h)?;
            h = tape.tanh(pre);
            let raw = tape.matmul(h, lm.w_out)?;
            step_logits.push(tape.add_row(raw, lm.b_out)?);
            if t + 1 < group.len {
                let ids: Vec<usize> = group.indices.iter().map(|&i| seqs[i][t]).collect();
                let onehot = tape.onehot_rows(&ids, lm.v)?;
                x = tape.matmul(onehot, lm.embed)?;
            }
        }
        let stacked = tape.concat_rows(&step_logits)?;
        let mut targets = Vec::with_capacity(g * group.len);
        for t in 0..group.len {
            for &i in &group.indices {
                targets.push(seqs[i][t]);
            }
        }
        let ce = tape.cross_entropy(stacked, &targets)?;
        let tokens_here = g * group.len;
        weighted.push(tape.scale(ce, tokens_here as f64 / total_tokens as f64));
    }
    let mut loss = weighted[0];
    for &w in &weighted[1..] {
        loss = tape.add(loss, w)?;
    }
    Ok((loss, total_tokens))
}

/// Evaluation-only per-token NLL of one sequence under a frozen model.
pub fn lm_nll(lm: &LMParams, tokens: &[usize]) -> Result<f64> {
    lm.verify_frozen()?;
    lm_corpus_nll(lm, &[tokens])
}

/// Evaluation-only per-token NLL over a corpus (token-weighted mean).
pub fn lm_corpus_nll(lm: &LMParams, seqs: &[&[usize]]) -> Result<f64> {
    if lm.frozen.is_none() {
        return Err(Error::Contract("language model is not frozen".into()));
    }
    let mut tape = Tape::no_grad();
    let (loss, _) = lm.batch_nll(&mut tape, seqs)?;
    Ok(tape.value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{flatten, param_count, unflatten};

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(3, 20, 20, 16).unwrap();
        let b = init_params(3, 20, 20, 16).unwrap();
        assert_eq!(a, b);
        for m in a.params() {
            assert!(m.data.iter().all(|v| v.abs() < INIT_RANGE));
        }
        let c = init_params(4, 20, 20, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_params(1, 0, 5, 4).is_err());
        assert!(init_params(1, 5, 5, 0).is_err());
    }

    #[test]
    fn flatten_unflatten_round_trip_is_exact() {
        let p = init_params(7, 12, 9, 8).unwrap();
        let flat = flatten(&p);
        assert_eq!(flat.len(), param_count(&p));
        let mut q = init_params(8, 12, 9, 8).unwrap();
        unflatten(&mut q, &flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(flatten(&q), flat);
    }

    #[test]
    fn untrained_nll_is_near_uniform() {
        // small random init keeps the output close to uniform over v_out=20
        let p = init_params(11, 20, 20, DEFAULT_HIDDEN).unwrap();
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, false);
        let src: Vec<usize> = vec![3, 7, 1, 19, 0, 4];
        let tgt: Vec<usize> = vec![5, 5, 2, 8, 13, 1];
        let loss = nll_teacher_forced(&mut tape, &staged, &src, &tgt).unwrap();
        let nll = tape.value(loss);
        assert!(
            (nll - (20.0f64).ln()).abs() < 0.3,
            "untrained NLL {nll} not near ln 20"
        );
    }

    #[test]
    fn nll_rejects_length_mismatch() {
        let p = init_params(11, 6, 6, 4).unwrap();
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, false);
        assert!(matches!(
            nll_teacher_forced(&mut tape, &staged, &[1, 2], &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_in_range() {
        let p = init_params(5, 10, 10, 8).unwrap();
        let src = vec![1, 4, 9, 2];
        let a = greedy_decode(&p, &src).unwrap();
        let b = greedy_decode(&p, &src).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.len(), src.len());
        assert!(a.tokens.iter().all(|&t| t < 10));
        assert!(a.logprobs.iter().all(|&lp| lp <= 0.0));
    }

    #[test]
    fn gumbel_zero_noise_matches_greedy() {
        let p = init_params(5, 10, 10, 8).unwrap();
        let src = vec![3, 0, 7, 7, 2];
        let greedy = greedy_decode(&p, &src).unwrap();
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, true);
        let gumbel =
            gumbel_decode_with(&mut tape, &staged, &src, 0.5, Noise::Zero).unwrap();
        assert_eq!(greedy.tokens, gumbel.tokens);
    }

    #[test]
    fn gumbel_rows_are_exact_onehots_matching_tokens() {
        let p = init_params(5, 10, 10, 8).unwrap();
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, true);
        let out = gumbel_decode(&mut tape, &staged, &[1, 2, 3, 4], 0.5, &mut rng).unwrap();
        let rows = out.onehots.as_ref().unwrap();
        assert_eq!(rows.len(), out.tokens.len());
        for (row, &tok) in rows.iter().zip(&out.tokens) {
            let d = tape.data(*row);
            assert_eq!(d.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(d.iter().filter(|&&v| v == 0.0).count(), d.len() - 1);
            assert_eq!(argmax(d), tok);
        }
    }

    #[test]
    fn gumbel_rejects_bad_tau() {
        let p = init_params(5, 10, 10, 8).unwrap();
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, true);
        assert!(matches!(
            gumbel_decode(&mut tape, &staged, &[1], 0.0, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gumbel_gradient_reaches_embedding_table() {
        let p = init_params(5, 10, 10, 8).unwrap();
        let mut rng = Rng::new(4);
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, true);
        let out = gumbel_decode(&mut tape, &staged, &[1, 2, 3], 0.5, &mut rng).unwrap();
        // arbitrary scalar consumer of the straight-through rows
        let stacked = tape.concat_rows(out.onehots.as_ref().unwrap()).unwrap();
        let w = tape
            .leaf((0..30).map(|i| (i as f64) * 0.1 - 1.5).collect(), vec![3, 10], false)
            .unwrap();
        let prod = tape.mul(stacked, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grads = staged.read_grads(&tape);
        let enc_embed_grad = &grads[0];
        assert!(
            enc_embed_grad.iter().any(|&g| g != 0.0),
            "no gradient reached the encoder embedding table"
        );
    }

    #[test]
    fn batch_and_single_nll_agree() {
        let p = init_params(21, 12, 12, 8).unwrap();
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![1, 2, 3], vec![4, 5, 6]),
            (vec![0, 1], vec![2, 3]),
            (vec![7, 8, 9], vec![10, 11, 0]),
        ];
        let mut tape = Tape::new();
        let staged = p.stage(&mut tape, false);
        let refs: Vec<(&[usize], &[usize])> = pairs
            .iter()
            .map(|(s, t)| (s.as_slice(), t.as_slice()))
            .collect();
        let (loss, tokens) = batch_nll(&mut tape, &staged, &refs).unwrap();
        assert_eq!(tokens, 8);
        let batch_val = tape.value(loss);

        let mut total = 0.0;
        for (s, t) in &pairs {
            let mut tp = Tape::new();
            let st = p.stage(&mut tp, false);
            let l = nll_teacher_forced(&mut tp, &st, s, t).unwrap();
            total += tp.value(l) * s.len() as f64;
        }
        assert!((batch_val - total / 8.0).abs() < 1e-9);
    }

    #[test]
    fn lm_requires_freeze_for_scoring() {
        let lm = init_lm(2, 10, 8).unwrap();
        assert!(matches!(lm_nll(&lm, &[1, 2]), Err(Error::Contract(_))));
        let mut lm = lm;
        lm.freeze();
        assert!(lm.verify_frozen().is_ok());
        let v = lm_nll(&lm, &[1, 2]).unwrap();
        assert!(v >= 0.0);
    }

    #[test]
    fn lm_single_token_is_first_step_surprisal() {
        let mut lm = init_lm(9, 10, 8).unwrap();
        lm.freeze();
        let nll = lm_nll(&lm, &[4]).unwrap();
        // recompute -log p(first token | start) directly
        let mut tape = Tape::no_grad();
        let (loss, n) = lm.batch_nll(&mut tape, &[&[4][..]]).unwrap();
        assert_eq!(n, 1);
        assert!((nll - tape.value(loss)).abs() < 1e-15);
        assert!(nll >= 0.0);
    }

    #[test]
    fn frozen_lm_rejects_mutation_via_params_mut() {
        let mut lm = init_lm(2, 6, 4).unwrap();
        lm.freeze();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = lm.params_mut();
        }));
        assert!(result.is_err());
    }
}
