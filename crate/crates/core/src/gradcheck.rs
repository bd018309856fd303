//! Central finite-difference verification of every analytic gradient.
//!
//! Each check builds a scalar loss from seeded random inputs, runs the tape
//! backward once, then probes random coordinates with (f(x+h) − f(x−h)) / 2h
//! at h = 1e-5 in 64-bit arithmetic. The Gumbel pipeline is probed in its
//! differentiable relaxation (softmax rows fed forward, noise replayed from
//! a fixed seed); the straight-through contract itself — hard one-hot
//! forward, soft backward — is checked against the parallel soft path in the
//! tensor tests, since the hard forward is not finite-differentiable.

use crate::agents::{self, batch_nll, Noise, Seq2SeqParams};
use crate::error::Result;
use crate::params::{flatten, unflatten};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const PROBES: usize = 20;

/// Relative error with a floor that absorbs finite-difference roundoff on
/// near-zero gradients.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-5)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
}

pub fn max_rel_err(results: &[CheckResult]) -> f64 {
    results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coord: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[coord] += STEP;
    let mut xm = x.to_vec();
    xm[coord] -= STEP;
    (f(&xp) - f(&xm)) / (2.0 * STEP)
}

/// Probe `probes` random coordinates of `x` against the analytic gradient.
fn probe(
    name: &'static str,
    x: &[f64],
    analytic: &[f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    probes: usize,
    rng: &mut Rng,
) -> CheckResult {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let c = rng.below(x.len());
        let fd = central_diff(f, x, c);
        worst = worst.max(rel_err(analytic[c], fd));
    }
    CheckResult {
        name,
        max_rel_err: worst,
        probes,
    }
}

// Generic harness: the builder maps a flat input vector to (tape, loss,
// tensors to differentiate). Analytic gradients come from one backward call;
// finite differences re-run the builder.
fn check_op(
    name: &'static str,
    x0: Vec<f64>,
    rng: &mut Rng,
    build: &dyn Fn(&mut Tape, &[f64]) -> Result<(Tensor, Vec<Tensor>)>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let (loss, inputs) = build(&mut tape, &x0)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for t in inputs {
        analytic.extend(tape.grad_or_zeros(t));
    }
    let mut eval = |x: &[f64]| -> f64 {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, x).expect("gradcheck rebuild failed");
        t.value(l)
    };
    Ok(probe(name, &x0, &analytic, &mut eval, PROBES, rng))
}

fn uniform_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

/// Run every gradient check; `seed` fixes all inputs, noise and probes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed).derive("gradcheck");
    let mut out = Vec::new();

    // matmul: d(sum(A·B)) — 3×4 by 4×2
    {
        let x0 = uniform_vec(&mut rng, 12 + 8, -1.0, 1.0);
        out.push(check_op("matmul", x0, &mut rng, &|tape, x| {
            let a = tape.leaf(x[..12].to_vec(), vec![3, 4], true)?;
            let b = tape.leaf(x[12..].to_vec(), vec![4, 2], true)?;
            let c = tape.matmul(a, b)?;
            Ok((tape.sum(c), vec![a, b]))
        })?);
    }

    // tanh through a weighted sum
    {
        let x0 = uniform_vec(&mut rng, 10, -2.0, 2.0);
        let w = uniform_vec(&mut rng, 10, -1.0, 1.0);
        out.push(check_op("tanh", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x.to_vec(), vec![2, 5], true)?;
            let y = tape.tanh(a);
            let wt = tape.leaf(w.clone(), vec![2, 5], false)?;
            let p = tape.mul(y, wt)?;
            Ok((tape.sum(p), vec![a]))
        })?);
    }

    // add + row broadcast + scale composite
    {
        let x0 = uniform_vec(&mut rng, 8 + 8 + 4, -1.0, 1.0);
        let w = uniform_vec(&mut rng, 8, -1.0, 1.0);
        out.push(check_op("add_row_scale", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x[..8].to_vec(), vec![2, 4], true)?;
            let b = tape.leaf(x[8..16].to_vec(), vec![2, 4], true)?;
            let r = tape.leaf(x[16..].to_vec(), vec![1, 4], true)?;
            let s = tape.add(a, b)?;
            let s = tape.add_row(s, r)?;
            let s = tape.scale(s, 0.7);
            let wt = tape.leaf(w.clone(), vec![2, 4], false)?;
            let p = tape.mul(s, wt)?;
            Ok((tape.sum(p), vec![a, b, r]))
        })?);
    }

    // log_softmax rows through a weighted sum
    {
        let x0 = uniform_vec(&mut rng, 15, -3.0, 3.0);
        let w = uniform_vec(&mut rng, 15, -1.0, 1.0);
        out.push(check_op("log_softmax", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x.to_vec(), vec![3, 5], true)?;
            let y = tape.log_softmax(a)?;
            let wt = tape.leaf(w.clone(), vec![3, 5], false)?;
            let p = tape.mul(y, wt)?;
            Ok((tape.sum(p), vec![a]))
        })?);
    }

    // softmax rows through a weighted sum
    {
        let x0 = uniform_vec(&mut rng, 15, -3.0, 3.0);
        let w = uniform_vec(&mut rng, 15, -1.0, 1.0);
        out.push(check_op("softmax", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x.to_vec(), vec![3, 5], true)?;
            let y = tape.softmax(a)?;
            let wt = tape.leaf(w.clone(), vec![3, 5], false)?;
            let p = tape.mul(y, wt)?;
            Ok((tape.sum(p), vec![a]))
        })?);
    }

    // cross-entropy over a batch
    {
        let x0 = uniform_vec(&mut rng, 4 * 6, -2.0, 2.0);
        let targets = vec![1usize, 5, 0, 3];
        out.push(check_op("cross_entropy", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x.to_vec(), vec![4, 6], true)?;
            let l = tape.cross_entropy(a, &targets)?;
            Ok((l, vec![a]))
        })?);
    }

    // concat_rows + repeat_row composite
    {
        let x0 = uniform_vec(&mut rng, 6 + 3, -1.0, 1.0);
        let w = uniform_vec(&mut rng, 9, -1.0, 1.0);
        out.push(check_op("concat_repeat", x0, &mut rng, &move |tape, x| {
            let a = tape.leaf(x[..6].to_vec(), vec![2, 3], true)?;
            let r = tape.leaf(x[6..].to_vec(), vec![1, 3], true)?;
            let tiled = tape.repeat_row(r, 1)?;
            let c = tape.concat_rows(&[a, tiled])?;
            let wt = tape.leaf(w.clone(), vec![3, 3], false)?;
            let p = tape.mul(c, wt)?;
            Ok((tape.sum(p), vec![a, r]))
        })?);
    }

    // Gumbel straight-through: analytic backward against the finite
    // difference of the soft relaxation it is defined to match.
    {
        let x0 = uniform_vec(&mut rng, 8, -2.0, 2.0);
        let noise: Vec<f64> = {
            let mut nrng = Rng::new(seed).derive("gradcheck-gumbel-noise");
            (0..8).map(|_| nrng.gumbel()).collect()
        };
        let w = uniform_vec(&mut rng, 8, -1.0, 1.0);
        let tau = 0.5;

        let mut tape = Tape::new();
        let logits = tape.leaf(x0.clone(), vec![8], true)?;
        let st = tape.gumbel_softmax_st_with_noise(logits, tau, &noise)?;
        let wt = tape.leaf(w.clone(), vec![8], false)?;
        let p = tape.mul(st, wt)?;
        let loss = tape.sum(p);
        tape.backward(loss)?;
        let analytic = tape.grad_or_zeros(logits);

        let noise2 = noise.clone();
        let w2 = w.clone();
        let mut soft_eval = move |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let l = t.leaf(x.to_vec(), vec![8], false).unwrap();
            let n = t.leaf(noise2.clone(), vec![8], false).unwrap();
            let shifted = t.add(l, n).unwrap();
            let scaled = t.scale(shifted, 1.0 / tau);
            let soft = t.softmax(scaled).unwrap();
            let wt = t.leaf(w2.clone(), vec![8], false).unwrap();
            let p = t.mul(soft, wt).unwrap();
            let s = t.sum(p);
            t.value(s)
        };
        out.push(probe(
            "gumbel_st_soft_path",
            &x0,
            &analytic,
            &mut soft_eval,
            PROBES,
            &mut rng,
        ));
    }

    // Teacher-forced seq2seq NLL: probe 20 random parameter coordinates of
    // the two stacked recurrences (encoder + decoder).
    {
        let base = agents::init_params(seed ^ 0x5e, 8, 8, 10)?;
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![0, 3, 5, 7], vec![2, 2, 6, 1]),
            (vec![4, 1, 0], vec![7, 5, 3]),
        ];
        let x0 = flatten(&base);

        let loss_of = {
            let base = base.clone();
            let pairs = pairs.clone();
            move |x: &[f64]| -> f64 {
                let mut p = base.clone();
                unflatten(&mut p, x).unwrap();
                let mut tape = Tape::new();
                let staged = p.stage(&mut tape, false);
                let refs: Vec<(&[usize], &[usize])> = pairs
                    .iter()
                    .map(|(s, t)| (s.as_slice(), t.as_slice()))
                    .collect();
                let (l, _) = batch_nll(&mut tape, &staged, &refs).unwrap();
                tape.value(l)
            }
        };

        let mut tape = Tape::new();
        let staged = base.stage(&mut tape, true);
        let refs: Vec<(&[usize], &[usize])> = pairs
            .iter()
            .map(|(s, t)| (s.as_slice(), t.as_slice()))
            .collect();
        let (loss, _) = batch_nll(&mut tape, &staged, &refs)?;
        tape.backward(loss)?;
        let analytic: Vec<f64> = staged.read_grads(&tape).concat();

        let mut eval = loss_of;
        out.push(probe(
            "seq2seq_teacher_forced",
            &x0,
            &analytic,
            &mut eval,
            PROBES,
            &mut rng,
        ));
    }

    // Full two-agent Gumbel pipeline in its differentiable relaxation; the
    // noise is replayed from a fixed seed on every evaluation.
    {
        let sender = agents::init_params(seed ^ 0xA1, 8, 8, 10)?;
        let receiver = agents::init_params(seed ^ 0xB2, 8, 8, 10)?;
        let srcs: Vec<Vec<usize>> = vec![vec![1, 4, 6, 0], vec![3, 3, 2]];
        let tgts: Vec<Vec<usize>> = vec![vec![5, 0, 7, 2], vec![6, 1, 4]];
        let noise_seed = seed ^ 0xC3;
        let tau = 0.5;

        let pipeline_loss = {
            let srcs = srcs.clone();
            let tgts = tgts.clone();
            move |snd: &Seq2SeqParams, rcv: &Seq2SeqParams, want_grads: bool| -> (f64, Vec<f64>) {
                let mut tape = if want_grads { Tape::new() } else { Tape::no_grad() };
                let s = snd.stage(&mut tape, want_grads);
                let r = rcv.stage(&mut tape, want_grads);
                let mut noise_rng = Rng::new(noise_seed);
                let mut losses = Vec::new();
                for (src, tgt) in srcs.iter().zip(&tgts) {
                    let ctx = s.encode_ids(&mut tape, &[src]).unwrap();
                    let dec = s
                        .decode_gumbel_soft(
                            &mut tape,
                            ctx,
                            src.len(),
                            tau,
                            Noise::Sampled(&mut noise_rng),
                        )
                        .unwrap();
                    let rows = dec.st_rows.unwrap();
                    let rctx = r.encode_rows(&mut tape, &rows).unwrap();
                    let logits = r
                        .decode_teacher_forced(&mut tape, rctx, &[tgt.clone()])
                        .unwrap();
                    let stacked = tape.concat_rows(&logits).unwrap();
                    let ce = tape.cross_entropy(stacked, tgt).unwrap();
                    losses.push(tape.scale(ce, 1.0 / srcs.len() as f64));
                }
                let mut loss = losses[0];
                for &l in &losses[1..] {
                    loss = tape.add(loss, l).unwrap();
                }
                let value = tape.value(loss);
                let grads = if want_grads {
                    tape.backward(loss).unwrap();
                    let mut g = s.read_grads(&tape).concat();
                    g.extend(r.read_grads(&tape).concat());
                    g
                } else {
                    Vec::new()
                };
                (value, grads)
            }
        };

        let (_, analytic) = pipeline_loss(&sender, &receiver, true);
        let n_snd = flatten(&sender).len();
        let mut x0 = flatten(&sender);
        x0.extend(flatten(&receiver));

        let mut eval = {
            let sender = sender.clone();
            let receiver = receiver.clone();
            let pipeline_loss = pipeline_loss.clone();
            move |x: &[f64]| -> f64 {
                let mut snd = sender.clone();
                let mut rcv = receiver.clone();
                unflatten(&mut snd, &x[..n_snd]).unwrap();
                unflatten(&mut rcv, &x[n_snd..]).unwrap();
                pipeline_loss(&snd, &rcv, false).0
            }
        };
        out.push(probe(
            "gumbel_pipeline_soft",
            &x0,
            &analytic,
            &mut eval,
            PROBES,
            &mut rng,
        ));
    }

    Ok(out)
}
