//! Procedural toy languages for the pivot-translation game.
//!
//! Three surface languages share one concept space: each language is a
//! random bijection concept → token id, and the target language optionally
//! reverses word order so the receiver cannot solve the task positionwise.
//! Corpora are drawn from a Zipf distribution over concepts whose rank
//! order can be permuted, which is the knob that separates the "generic"
//! pretraining distribution from the frequency-shifted task distribution.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::Rng;

// ── Languages and pairs ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lang {
    Src,
    Pvt,
    Tgt,
}

impl Lang {
    pub fn prefix(self) -> char {
        match self {
            Lang::Src => 's',
            Lang::Pvt => 'p',
            Lang::Tgt => 't',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    SrcPvt,
    PvtTgt,
    SrcTgt,
}

impl PairKind {
    pub fn langs(self) -> (Lang, Lang) {
        match self {
            PairKind::SrcPvt => (Lang::Src, Lang::Pvt),
            PairKind::PvtTgt => (Lang::Pvt, Lang::Tgt),
            PairKind::SrcTgt => (Lang::Src, Lang::Tgt),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::SrcPvt => "src_pvt",
            PairKind::PvtTgt => "pvt_tgt",
            PairKind::SrcTgt => "src_tgt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "src_pvt" => Ok(PairKind::SrcPvt),
            "pvt_tgt" => Ok(PairKind::PvtTgt),
            "src_tgt" => Ok(PairKind::SrcTgt),
            other => Err(Error::Data(format!("unknown pair kind `{other}`"))),
        }
    }
}

/// One translation pair; token ids live in the namespaces given by `kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub kind: PairKind,
}

/// Evaluation triple with both gold references for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTriple {
    pub src: Vec<usize>,
    pub pvt: Vec<usize>,
    pub tgt: Vec<usize>,
}

// ── Game specification ────────────────────────────────────────────────

/// Three bijective lexicons over a shared concept space plus the target
/// word-order rule. The unique gold rendering makes grounding scores exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub concept_count: usize,
    pub lex_src: Vec<usize>,
    pub lex_pvt: Vec<usize>,
    pub lex_tgt: Vec<usize>,
    pub reverse_target: bool,
    pub seed: u64,
}

pub fn make_game(seed: u64, concept_count: usize) -> Result<GameSpec> {
    make_game_with(seed, concept_count, true)
}

pub fn make_game_with(seed: u64, concept_count: usize, reverse_target: bool) -> Result<GameSpec> {
    if concept_count < 2 {
        return Err(Error::Parameter(format!(
            "concept vocabulary must have at least 2 entries, got {concept_count}"
        )));
    }
    let mut rng = Rng::new(seed).derive("game");
    Ok(GameSpec {
        concept_count,
        lex_src: rng.permutation(concept_count),
        lex_pvt: rng.permutation(concept_count),
        lex_tgt: rng.permutation(concept_count),
        reverse_target,
        seed,
    })
}

impl GameSpec {
    fn lexicon(&self, lang: Lang) -> &[usize] {
        match lang {
            Lang::Src => &self.lex_src,
            Lang::Pvt => &self.lex_pvt,
            Lang::Tgt => &self.lex_tgt,
        }
    }

    /// Tokenwise surface realization; target side reverses word order when
    /// the rule is enabled.
    pub fn render(&self, concepts: &[usize], lang: Lang) -> Result<Vec<usize>> {
        let lex = self.lexicon(lang);
        let mut out = Vec::with_capacity(concepts.len());
        for &c in concepts {
            match lex.get(c) {
                Some(&tok) => out.push(tok),
                None => {
                    return Err(Error::Index(format!(
                        "concept {c} out of range 0..{}",
                        self.concept_count
                    )))
                }
            }
        }
        if lang == Lang::Tgt && self.reverse_target {
            out.reverse();
        }
        Ok(out)
    }

    /// Decode surface tokens back to concepts (undoing target reversal).
    pub fn decode(&self, tokens: &[usize], lang: Lang) -> Result<Vec<usize>> {
        let lex = self.lexicon(lang);
        let mut inv = vec![usize::MAX; self.concept_count];
        for (c, &tok) in lex.iter().enumerate() {
            inv[tok] = c;
        }
        let mut out = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            match inv.get(tok) {
                Some(&c) if c != usize::MAX => out.push(c),
                _ => {
                    return Err(Error::Vocab(format!(
                        "token {tok} is not in the {:?} surface vocabulary",
                        lang
                    )))
                }
            }
        }
        if lang == Lang::Tgt && self.reverse_target {
            out.reverse();
        }
        Ok(out)
    }

    /// Gold pivot and target references for a source-surface sentence.
    pub fn gold_translate(&self, src_tokens: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let concepts = self.decode(src_tokens, Lang::Src)?;
        Ok((
            self.render(&concepts, Lang::Pvt)?,
            self.render(&concepts, Lang::Tgt)?,
        ))
    }
}

// ── Concept distributions ─────────────────────────────────────────────

/// Zipf distribution over concepts with a permuted rank order.
/// `rank_perm[c]` is the rank of concept `c`; the identity permutation puts
/// concept 0 first. Lengths are uniform over `length_range` inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSpec {
    pub zipf_exponent: f64,
    pub rank_perm: Vec<usize>,
    pub length_range: (usize, usize),
}

impl DistributionSpec {
    pub fn identity(concept_count: usize) -> Self {
        DistributionSpec {
            zipf_exponent: 1.0,
            rank_perm: (0..concept_count).collect(),
            length_range: (4, 8),
        }
    }

    /// Frequency-shifted variant: seeded random rank permutation.
    pub fn shifted(concept_count: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).derive("rank-shift");
        DistributionSpec {
            zipf_exponent: 1.0,
            rank_perm: rng.permutation(concept_count),
            length_range: (4, 8),
        }
    }

    /// Milder shift: `swaps` random rank transpositions applied to the
    /// identity, so only part of the frequency order moves.
    pub fn shifted_partial(concept_count: usize, seed: u64, swaps: usize) -> Self {
        let mut rng = Rng::new(seed).derive("rank-shift-partial");
        let mut perm: Vec<usize> = (0..concept_count).collect();
        for _ in 0..swaps {
            let i = rng.below(concept_count);
            let j = rng.below(concept_count);
            perm.swap(i, j);
        }
        DistributionSpec {
            zipf_exponent: 1.0,
            rank_perm: perm,
            length_range: (4, 8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rank_perm.len();
        let mut seen = vec![false; n];
        for &r in &self.rank_perm {
            if r >= n || seen[r] {
                return Err(Error::Parameter("rank_perm must be a bijection".into()));
            }
            seen[r] = true;
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            return Err(Error::Parameter("zipf exponent must be finite and >= 0".into()));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || hi < lo {
            return Err(Error::Parameter(format!(
                "length range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )));
        }
        Ok(())
    }

    /// Normalized probability of each concept.
    pub fn concept_pmf(&self) -> Vec<f64> {
        let mut pmf: Vec<f64> = self
            .rank_perm
            .iter()
            .map(|&r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
            .collect();
        let z: f64 = pmf.iter().sum();
        for p in &mut pmf {
            *p /= z;
        }
        pmf
    }

    pub fn sample_length(&self, rng: &mut Rng) -> usize {
        let (lo, hi) = self.length_range;
        lo + rng.below(hi - lo + 1)
    }

    pub fn sample_concepts(&self, rng: &mut Rng) -> Vec<usize> {
        let cdf = self.cdf();
        let len = self.sample_length(rng);
        (0..len).map(|_| sample_cdf(&cdf, rng)).collect()
    }

    fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.concept_pmf()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

fn sample_cdf(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    match cdf.iter().position(|&c| u < c) {
        Some(i) => i,
        None => cdf.len() - 1,
    }
}

/// KL divergence between two distributions over the same support (nats).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

// ── Corpus sampling ───────────────────────────────────────────────────

pub fn sample_corpus(
    spec: &GameSpec,
    dist: &DistributionSpec,
    n: usize,
    kind: PairKind,
    rng: &mut Rng,
) -> Result<Vec<CorpusPair>> {
    if n < 1 {
        return Err(Error::Parameter("corpus size must be >= 1".into()));
    }
    dist.validate()?;
    if dist.rank_perm.len() != spec.concept_count {
        return Err(Error::Parameter(format!(
            "distribution over {} concepts does not match game with {}",
            dist.rank_perm.len(),
            spec.concept_count
        )));
    }
    let (src_lang, tgt_lang) = kind.langs();
    let cdf = dist.cdf();
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = dist.sample_length(rng);
        let concepts: Vec<usize> = (0..len).map(|_| sample_cdf(&cdf, rng)).collect();
        pairs.push(CorpusPair {
            src: spec.render(&concepts, src_lang)?,
            tgt: spec.render(&concepts, tgt_lang)?,
            kind,
        });
    }
    Ok(pairs)
}

/// Held-out triples with both gold references, for evaluation.
pub fn sample_eval_set(
    spec: &GameSpec,
    dist: &DistributionSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<EvalTriple>> {
    if n < 1 {
        return Err(Error::Parameter("eval set size must be >= 1".into()));
    }
    dist.validate()?;
    let cdf = dist.cdf();
    let mut triples = Vec::with_capacity(n);
    for _ in 0..n {
        let len = dist.sample_length(rng);
        let concepts: Vec<usize> = (0..len).map(|_| sample_cdf(&cdf, rng)).collect();
        triples.push(EvalTriple {
            src: spec.render(&concepts, Lang::Src)?,
            pvt: spec.render(&concepts, Lang::Pvt)?,
            tgt: spec.render(&concepts, Lang::Tgt)?,
        });
    }
    Ok(triples)
}

// ── Corpus serialization ──────────────────────────────────────────────
//
// One pair per line: `src<TAB>tgt<TAB>kind`, tokens space-separated with a
// language prefix, e.g. `s07 s12<TAB>p03 p18<TAB>src_pvt`.

pub fn token_str(lang: Lang, id: usize) -> String {
    format!("{}{:02}", lang.prefix(), id)
}

fn parse_token(s: &str, lang: Lang) -> Result<usize> {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c == lang.prefix() => {}
        _ => {
            return Err(Error::Vocab(format!(
                "token `{s}` does not carry the `{}` prefix",
                lang.prefix()
            )))
        }
    }
    chars
        .as_str()
        .parse::<usize>()
        .map_err(|_| Error::Data(format!("malformed token `{s}`")))
}

pub fn write_corpus<W: Write>(w: &mut W, pairs: &[CorpusPair]) -> std::io::Result<()> {
    for p in pairs {
        let (src_lang, tgt_lang) = p.kind.langs();
        let src: Vec<String> = p.src.iter().map(|&t| token_str(src_lang, t)).collect();
        let tgt: Vec<String> = p.tgt.iter().map(|&t| token_str(tgt_lang, t)).collect();
        writeln!(w, "{}\t{}\t{}", src.join(" "), tgt.join(" "), p.kind.as_str())?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<CorpusPair>> {
    let mut pairs = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("read error: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let kind = PairKind::parse(fields[2])?;
        let (src_lang, tgt_lang) = kind.langs();
        let parse_side = |field: &str, lang: Lang| -> Result<Vec<usize>> {
            field
                .split_whitespace()
                .map(|t| parse_token(t, lang))
                .collect()
        };
        pairs.push(CorpusPair {
            src: parse_side(fields[0], src_lang)?,
            tgt: parse_side(fields[1], tgt_lang)?,
            kind,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_game_is_deterministic() {
        assert_eq!(make_game(5, 20).unwrap(), make_game(5, 20).unwrap());
    }

    #[test]
    fn make_game_rejects_tiny_vocab() {
        assert!(matches!(make_game(1, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn v2_lexicons_are_permutations() {
        let g = make_game(9, 2).unwrap();
        for lex in [&g.lex_src, &g.lex_pvt, &g.lex_tgt] {
            let mut sorted = lex.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1]);
        }
    }

    #[test]
    fn different_seeds_give_different_lexicons() {
        let a = make_game(1, 20).unwrap();
        let b = make_game(2, 20).unwrap();
        assert!(
            a.lex_src != b.lex_src || a.lex_pvt != b.lex_pvt || a.lex_tgt != b.lex_tgt,
            "two seeds produced identical games"
        );
    }

    #[test]
    fn render_empty_is_empty() {
        let g = make_game(3, 5).unwrap();
        assert_eq!(g.render(&[], Lang::Src).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn target_reversal_is_applied() {
        let mut g = make_game(3, 5).unwrap();
        g.lex_tgt = (0..5).collect(); // identity lexicon isolates the order rule
        assert_eq!(g.render(&[0, 1, 2], Lang::Tgt).unwrap(), vec![2, 1, 0]);
        g.reverse_target = false;
        assert_eq!(g.render(&[0, 1, 2], Lang::Tgt).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn render_rejects_out_of_range_concept() {
        let g = make_game(3, 5).unwrap();
        assert!(matches!(g.render(&[5], Lang::Src), Err(Error::Index(_))));
    }

    #[test]
    fn render_decode_round_trip() {
        let g = make_game(7, 20).unwrap();
        let mut rng = Rng::new(123);
        for _ in 0..50 {
            let len = 1 + rng.below(8);
            let concepts: Vec<usize> = (0..len).map(|_| rng.below(20)).collect();
            for lang in [Lang::Src, Lang::Pvt, Lang::Tgt] {
                let rendered = g.render(&concepts, lang).unwrap();
                assert_eq!(g.decode(&rendered, lang).unwrap(), concepts);
            }
        }
    }

    #[test]
    fn gold_translate_matches_direct_rendering() {
        let g = make_game(11, 20).unwrap();
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let len = 1 + rng.below(8);
            let concepts: Vec<usize> = (0..len).map(|_| rng.below(20)).collect();
            let src = g.render(&concepts, Lang::Src).unwrap();
            let (pvt, tgt) = g.gold_translate(&src).unwrap();
            assert_eq!(pvt, g.render(&concepts, Lang::Pvt).unwrap());
            assert_eq!(tgt, g.render(&concepts, Lang::Tgt).unwrap());
        }
    }

    #[test]
    fn gold_translate_single_token_ignores_reversal() {
        let g = make_game(13, 20).unwrap();
        let src = g.render(&[4], Lang::Src).unwrap();
        let (pvt, tgt) = g.gold_translate(&src).unwrap();
        let c = g.decode(&pvt, Lang::Pvt).unwrap();
        assert_eq!(g.render(&c, Lang::Tgt).unwrap(), tgt);
        // calling twice agrees exactly
        assert_eq!(g.gold_translate(&src).unwrap(), (pvt, tgt));
    }

    #[test]
    fn gold_translate_rejects_foreign_token() {
        let g = make_game(13, 5).unwrap();
        assert!(matches!(g.gold_translate(&[11]), Err(Error::Vocab(_))));
    }

    #[test]
    fn sample_corpus_single_pair_length_one() {
        let g = make_game(21, 6).unwrap();
        let dist = DistributionSpec {
            length_range: (1, 1),
            ..DistributionSpec::identity(6)
        };
        let mut rng = Rng::new(0);
        let pairs = sample_corpus(&g, &dist, 1, PairKind::SrcPvt, &mut rng).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].src.len(), 1);
        assert_eq!(pairs[0].tgt.len(), 1);
    }

    #[test]
    fn zipf_frequencies_match_closed_form() {
        // s=1, V=3: pmf = (1, 1/2, 1/3) / H3 where H3 = 11/6
        let g = make_game(33, 3).unwrap();
        let dist = DistributionSpec {
            length_range: (1, 1),
            ..DistributionSpec::identity(3)
        };
        let mut rng = Rng::new(8);
        let pairs = sample_corpus(&g, &dist, 100_000, PairKind::SrcPvt, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for p in &pairs {
            let c = g.decode(&p.src, Lang::Src).unwrap()[0];
            counts[c] += 1;
        }
        let expected = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
        for (i, &e) in expected.iter().enumerate() {
            let got = counts[i] as f64 / 100_000.0;
            assert!(
                (got - e).abs() < 0.01,
                "concept {i}: empirical {got:.4} vs closed form {e:.4}"
            );
        }
    }

    #[test]
    fn shifted_rank_perm_changes_most_frequent_concept() {
        let g = make_game(44, 20).unwrap();
        let pre = DistributionSpec::identity(20);
        let task = DistributionSpec::shifted(20, 99);
        assert_ne!(pre.rank_perm, task.rank_perm);
        let count_top = |dist: &DistributionSpec, seed: u64| {
            let mut rng = Rng::new(seed);
            let pairs = sample_corpus(&g, dist, 10_000, PairKind::SrcPvt, &mut rng).unwrap();
            let mut counts = vec![0usize; 20];
            for p in &pairs {
                for c in g.decode(&p.src, Lang::Src).unwrap() {
                    counts[c] += 1;
                }
            }
            crate::tensor::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
        };
        assert_ne!(count_top(&pre, 1), count_top(&task, 1));
    }

    #[test]
    fn corpus_is_deterministic_in_seed() {
        let g = make_game(3, 10).unwrap();
        let dist = DistributionSpec::identity(10);
        let a = sample_corpus(&g, &dist, 100, PairKind::SrcTgt, &mut Rng::new(5)).unwrap();
        let b = sample_corpus(&g, &dist, 100, PairKind::SrcTgt, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_marginals_have_zero_kl_and_shift_is_detectable() {
        let pre = DistributionSpec::identity(20);
        let task_same = DistributionSpec::identity(20);
        assert_eq!(kl_divergence(&pre.concept_pmf(), &task_same.concept_pmf()), 0.0);

        // empirical marginals over >= 1e5 samples separate the shifted task
        let shifted = DistributionSpec::shifted(20, 7);
        let g = make_game(3, 20).unwrap();
        let empirical = |dist: &DistributionSpec, seed: u64| {
            let mut rng = Rng::new(seed);
            let mut counts = vec![0usize; 20];
            let mut total = 0usize;
            let pairs = sample_corpus(&g, dist, 20_000, PairKind::SrcPvt, &mut rng).unwrap();
            for p in &pairs {
                for c in g.decode(&p.src, Lang::Src).unwrap() {
                    counts[c] += 1;
                    total += 1;
                }
            }
            assert!(total >= 100_000);
            counts
                .iter()
                .map(|&c| (c.max(1)) as f64 / total as f64)
                .collect::<Vec<_>>()
        };
        let kl = kl_divergence(&empirical(&pre, 1), &empirical(&shifted, 2));
        assert!(kl > 0.05, "empirical KL {kl} too small for a shifted game");
    }

    #[test]
    fn pmf_sums_to_one() {
        for v in [2usize, 3, 20, 50] {
            let d = DistributionSpec::identity(v);
            let s: f64 = d.concept_pmf().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_tsv_round_trip() {
        let g = make_game(17, 20).unwrap();
        let dist = DistributionSpec::identity(20);
        let mut rng = Rng::new(2);
        for kind in [PairKind::SrcPvt, PairKind::PvtTgt, PairKind::SrcTgt] {
            let pairs = sample_corpus(&g, &dist, 25, kind, &mut rng).unwrap();
            let mut buf = Vec::new();
            write_corpus(&mut buf, &pairs).unwrap();
            let back = read_corpus(&buf[..]).unwrap();
            assert_eq!(pairs, back);
        }
    }
}
