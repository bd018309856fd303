//! Task score, pivot grounding, language-model NLL and RealNLL.
//!
//! BLEU here is corpus-level with one reference per hypothesis: clipped
//! modified n-gram precisions aggregated over the corpus, geometric mean,
//! brevity penalty exp(min(0, 1 − ref_len/hyp_len)), scaled ×100. The
//! maximum order is min(4, shortest hypothesis length). Smoothing is
//! add-one on numerator and denominator for any zero numerator at n ≥ 2;
//! a zero unigram numerator keeps the score at exactly 0. This rule is
//! normative — the oracle tests replicate it by brute force.

use std::collections::HashMap;

use crate::agents::{greedy_decode_batch, lm_corpus_nll, LMParams, Seq2SeqParams};
use crate::error::{Error, Result};
use crate::game::EvalTriple;
use crate::tensor::Tape;

// ── BLEU ──────────────────────────────────────────────────────────────

pub fn bleu_corpus(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "BLEU needs one reference per hypothesis: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let hyp_len: usize = hypotheses.iter().map(|h| h.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    let max_n = hypotheses.iter().map(|h| h.len()).min().unwrap().min(4);
    if max_n == 0 {
        // an empty hypothesis has no n-grams at any order
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let mut matches = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hypotheses.iter().zip(references) {
            if hyp.len() < n {
                continue;
            }
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches += count.min(clip);
            }
            total += hyp.len() - n + 1;
        }
        let p = if matches == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        } else {
            matches as f64 / total as f64
        };
        log_precision_sum += p.ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();
    let bp = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    Ok(100.0 * bp * geo_mean)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

// ── Evaluation records ────────────────────────────────────────────────

/// One evaluation snapshot along a finetuning trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub bleu_tgt: f64,
    pub bleu_pvt: f64,
    pub nll: f64,
    pub real_nll: f64,
    pub grad_cos_raw: Option<f64>,
    pub grad_cos_ma100: Option<f64>,
}

impl MetricsRecord {
    pub fn check_ranges(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=100.0).contains(&v);
        if !in_unit(self.bleu_tgt) || !in_unit(self.bleu_pvt) {
            return Err(Error::Contract(format!(
                "BLEU outside [0, 100]: tgt={} pvt={}",
                self.bleu_tgt, self.bleu_pvt
            )));
        }
        if self.nll < 0.0 || self.real_nll < 0.0 {
            return Err(Error::Contract(format!(
                "NLL must be non-negative: nll={} real_nll={}",
                self.nll, self.real_nll
            )));
        }
        for g in [self.grad_cos_raw, self.grad_cos_ma100].into_iter().flatten() {
            if !(-1.0..=1.0).contains(&g) {
                return Err(Error::Contract(format!("gradient cosine {g} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str =
    "step,method,seed,bleu_tgt,bleu_pvt,nll,real_nll,grad_cos_raw,grad_cos_ma100";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &MetricsRecord, method: &str, seed: u64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        method,
        seed,
        r.bleu_tgt,
        r.bleu_pvt,
        r.nll,
        r.real_nll,
        opt_field(r.grad_cos_raw),
        opt_field(r.grad_cos_ma100)
    )
}

fn opt_json(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "null".into())
}

pub fn jsonl_row(r: &MetricsRecord, method: &str, seed: u64) -> String {
    format!(
        "{{\"step\":{},\"method\":\"{}\",\"seed\":{},\"bleu_tgt\":{},\"bleu_pvt\":{},\"nll\":{},\"real_nll\":{},\"grad_cos_raw\":{},\"grad_cos_ma100\":{}}}",
        r.step,
        method,
        seed,
        r.bleu_tgt,
        r.bleu_pvt,
        r.nll,
        r.real_nll,
        opt_json(r.grad_cos_raw),
        opt_json(r.grad_cos_ma100)
    )
}

/// Parse one CSV row written by [`csv_row`].
pub fn parse_csv_row(line: &str) -> Result<(MetricsRecord, String, u64)> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 9 {
        return Err(Error::Data(format!(
            "metrics row has {} fields, expected 9",
            fields.len()
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Data(format!("bad number `{s}` in metrics row")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    Ok((
        MetricsRecord {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step `{}`", fields[0])))?,
            bleu_tgt: num(fields[3])?,
            bleu_pvt: num(fields[4])?,
            nll: num(fields[5])?,
            real_nll: num(fields[6])?,
            grad_cos_raw: opt(fields[7])?,
            grad_cos_ma100: opt(fields[8])?,
        },
        fields[1].to_string(),
        fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad seed `{}`", fields[2])))?,
    ))
}

// ── Pipeline evaluation ───────────────────────────────────────────────

/// Mean per-token NLL of the gold pivot given the source, under the
/// current sender; the lower, the better the sender still models the
/// reference pivot language.
pub fn real_nll_metric(sender: &Seq2SeqParams, pairs: &[(&[usize], &[usize])]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let staged = sender.stage(&mut tape, false);
    let (loss, _) = crate::agents::batch_nll(&mut tape, &staged, pairs)?;
    Ok(tape.value(loss))
}

/// Full greedy evaluation of the pipeline on held-out triples: task BLEU,
/// grounding BLEU, frozen-LM NLL of the generated pivot, and RealNLL.
/// Has no side effects on any parameter.
pub fn eval_pipeline(
    sender: &Seq2SeqParams,
    receiver: &Seq2SeqParams,
    eval_set: &[EvalTriple],
    lm: &LMParams,
) -> Result<MetricsRecord> {
    if eval_set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let srcs: Vec<&[usize]> = eval_set.iter().map(|t| t.src.as_slice()).collect();
    let pvt_hyps = greedy_decode_batch(sender, &srcs)?;
    let pvt_refs: Vec<&[usize]> = pvt_hyps.iter().map(|h| h.as_slice()).collect();
    let tgt_hyps = greedy_decode_batch(receiver, &pvt_refs)?;

    let gold_pvt: Vec<Vec<usize>> = eval_set.iter().map(|t| t.pvt.clone()).collect();
    let gold_tgt: Vec<Vec<usize>> = eval_set.iter().map(|t| t.tgt.clone()).collect();
    let bleu_pvt = bleu_corpus(&pvt_hyps, &gold_pvt)?;
    let bleu_tgt = bleu_corpus(&tgt_hyps, &gold_tgt)?;

    let pvt_slices: Vec<&[usize]> = pvt_hyps.iter().map(|h| h.as_slice()).collect();
    let nll = lm_corpus_nll(lm, &pvt_slices)?;

    let real_pairs: Vec<(&[usize], &[usize])> = eval_set
        .iter()
        .map(|t| (t.src.as_slice(), t.pvt.as_slice()))
        .collect();
    let real_nll = real_nll_metric(sender, &real_pairs)?;

    let record = MetricsRecord {
        step: 0,
        bleu_tgt,
        bleu_pvt,
        nll,
        real_nll,
        grad_cos_raw: None,
        grad_cos_ma100: None,
    };
    record.check_ranges()?;
    Ok(record)
}
