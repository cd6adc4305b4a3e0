//! Synthetic long-context tasks over a small symbolic vocabulary, plus
//! exact-match evaluation grouped by context length and needle
//! position. These stand in for natural-language retrieval suites: the
//! failure mode they probe (fixed-size state forgetting distant
//! tokens) is driven by length ratios, not by language.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token layout. Ids 0..4 are structural; the rest split into a key
/// alphabet, a value alphabet, and filler.
pub const TOK_PAD: u32 = 0;
pub const TOK_KEY_START: u32 = 1;
pub const TOK_KEY_END: u32 = 2;
pub const TOK_QUERY: u32 = 3;
pub const KEY_ALPHABET: std::ops::Range<u32> = 4..16;
pub const VALUE_ALPHABET: std::ops::Range<u32> = 16..32;
pub const FILLER_START: u32 = 32;

/// Smallest vocabulary the generators accept (needs at least one
/// filler token above the fixed ranges).
pub const MIN_VOCAB: usize = 33;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_kind: String,
    pub context_length: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub needle_position: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub metadata: TaskMeta,
}

impl TaskInstance {
    pub fn to_jsonl_line(&self) -> String {
        serde_json::to_string(self).expect("task instances serialize")
    }
}

/// Serialize a corpus as JSONL, one instance per line.
pub fn corpus_to_jsonl(corpus: &[TaskInstance]) -> String {
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&inst.to_jsonl_line());
        out.push('\n');
    }
    out
}

pub fn corpus_from_jsonl(text: &str) -> Result<Vec<TaskInstance>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::contract(format!("bad corpus line: {e}")))
        })
        .collect()
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size < MIN_VOCAB {
        return Err(Error::contract(format!(
            "vocab_size {vocab_size} below the task minimum {MIN_VOCAB}"
        )));
    }
    Ok(())
}

/// A marked key subsequence buried in filler at a relative position;
/// the target is the key itself.
///
/// Layout: `filler…, KEY_START, key…, KEY_END, filler…, QUERY`.
pub fn gen_passkey(
    rng: &mut impl rand::Rng,
    context_length: usize,
    key_length: usize,
    needle_rel_pos: f64,
    vocab_size: usize,
) -> Result<TaskInstance> {
    check_vocab(vocab_size)?;
    if key_length == 0 {
        return Err(Error::contract("gen_passkey: key_length must be positive"));
    }
    if !(0.0..=1.0).contains(&needle_rel_pos) {
        return Err(Error::contract(format!(
            "gen_passkey: needle_rel_pos {needle_rel_pos} outside [0, 1]"
        )));
    }
    let overhead = key_length + 3; // markers + query
    if context_length < overhead {
        return Err(Error::contract(format!(
            "gen_passkey: key of length {key_length} cannot fit in context {context_length}"
        )));
    }
    let filler_total = context_length - overhead;
    let before = ((filler_total as f64) * needle_rel_pos).round() as usize;
    let after = filler_total - before;

    let filler_range = FILLER_START..vocab_size as u32;
    let key: Vec<u32> = (0..key_length)
        .map(|_| rng.gen_range(KEY_ALPHABET.start..KEY_ALPHABET.end))
        .collect();
    let mut prompt = Vec::with_capacity(context_length);
    for _ in 0..before {
        prompt.push(rng.gen_range(filler_range.clone()));
    }
    prompt.push(TOK_KEY_START);
    prompt.extend(&key);
    prompt.push(TOK_KEY_END);
    for _ in 0..after {
        prompt.push(rng.gen_range(filler_range.clone()));
    }
    prompt.push(TOK_QUERY);
    debug_assert_eq!(prompt.len(), context_length);

    Ok(TaskInstance {
        prompt_tokens: prompt,
        target_tokens: key,
        metadata: TaskMeta {
            task_kind: "passkey".into(),
            context_length,
            needle_position: Some(needle_rel_pos),
        },
    })
}

/// Key-value pairs followed by a query key; the target is the queried
/// value. Keys are distinct; the front is padded to the exact length.
pub fn gen_assoc_recall(
    rng: &mut impl rand::Rng,
    n_pairs: usize,
    context_length: usize,
    vocab_size: usize,
) -> Result<TaskInstance> {
    check_vocab(vocab_size)?;
    let key_symbols = (KEY_ALPHABET.end - KEY_ALPHABET.start) as usize;
    if n_pairs == 0 {
        return Err(Error::contract("gen_assoc_recall: need at least one pair"));
    }
    if n_pairs > key_symbols {
        return Err(Error::contract(format!(
            "gen_assoc_recall: vocabulary has {key_symbols} key symbols, cannot build {n_pairs} distinct keys"
        )));
    }
    let body = 2 * n_pairs + 2; // pairs + query marker + query key
    if body > context_length {
        return Err(Error::contract(format!(
            "gen_assoc_recall: {n_pairs} pairs need {body} tokens, context is {context_length}"
        )));
    }

    // distinct keys via partial shuffle of the key alphabet
    let mut keys: Vec<u32> = KEY_ALPHABET.collect();
    for i in 0..n_pairs {
        let j = rng.gen_range(i..keys.len());
        keys.swap(i, j);
    }
    keys.truncate(n_pairs);
    let values: Vec<u32> = (0..n_pairs)
        .map(|_| rng.gen_range(VALUE_ALPHABET.start..VALUE_ALPHABET.end))
        .collect();
    let query = rng.gen_range(0..n_pairs);

    let mut prompt = vec![TOK_PAD; context_length - body];
    for (k, v) in keys.iter().zip(&values) {
        prompt.push(*k);
        prompt.push(*v);
    }
    prompt.push(TOK_QUERY);
    prompt.push(keys[query]);
    debug_assert_eq!(prompt.len(), context_length);

    Ok(TaskInstance {
        prompt_tokens: prompt,
        target_tokens: vec![values[query]],
        metadata: TaskMeta {
            task_kind: "assoc_recall".into(),
            context_length,
            needle_position: None,
        },
    })
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Anything that maps a prompt to generated tokens. Implementations
/// share read-only state across evaluation workers.
pub trait Decoder: Sync {
    fn generate(&self, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub length: usize,
    /// Lower edge of the needle-position quartile, or "all"/"none".
    pub needle_pos: String,
    pub exact_match: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Exact match of the aggregate cell for a (task, length) pair.
    pub fn accuracy(&self, task: &str, length: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.length == length && r.needle_pos == "all")
            .map(|r| r.exact_match)
    }

    pub fn to_csv(&self, config: Option<&serde_json::Value>) -> String {
        let mut out = String::new();
        if let Some(cfg) = config {
            out.push_str(&format!("# {}\n", serde_json::to_string(cfg).unwrap()));
        }
        out.push_str("task,length,needle_pos,exact_match,n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.task, r.length, r.needle_pos, r.exact_match, r.n
            ));
        }
        out
    }
}

fn needle_bin(pos: Option<f64>) -> String {
    match pos {
        None => "none".into(),
        Some(p) => {
            let edge = (p * 4.0).floor().min(3.0) / 4.0;
            format!("{edge:.2}")
        }
    }
}

/// Greedy-decode every instance and group exact-match accuracy by
/// (task, length) and by needle-position quartile. Instances run in
/// parallel; aggregation order is deterministic.
pub fn evaluate(decoder: &impl Decoder, corpus: &[TaskInstance]) -> Result<EvalReport> {
    use rayon::prelude::*;
    if corpus.is_empty() {
        return Err(Error::contract("evaluate: empty corpus"));
    }
    let hits: Result<Vec<bool>> = corpus
        .par_iter()
        .map(|inst| {
            let out = decoder.generate(&inst.prompt_tokens, inst.target_tokens.len())?;
            Ok(out == inst.target_tokens)
        })
        .collect();
    let hits = hits?;

    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(String, usize, String), (usize, usize)> = BTreeMap::new();
    for (inst, hit) in corpus.iter().zip(&hits) {
        let task = inst.metadata.task_kind.clone();
        let len = inst.metadata.context_length;
        for bin in ["all".to_string(), needle_bin(inst.metadata.needle_position)] {
            let cell = cells.entry((task.clone(), len, bin)).or_insert((0, 0));
            cell.0 += *hit as usize;
            cell.1 += 1;
        }
    }
    let rows = cells
        .into_iter()
        .map(|((task, length, needle_pos), (exact, n))| EvalRow {
            task,
            length,
            needle_pos,
            exact_match: exact as f64 / n as f64,
            n,
        })
        .collect();
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const VOCAB: usize = 64;

    #[test]
    fn passkey_at_position_zero_starts_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = gen_passkey(&mut rng, 32, 4, 0.0, VOCAB).unwrap();
        assert_eq!(inst.prompt_tokens[0], TOK_KEY_START);
        assert_eq!(&inst.prompt_tokens[1..5], inst.target_tokens.as_slice());
        assert_eq!(inst.prompt_tokens[5], TOK_KEY_END);
    }

    #[test]
    fn passkey_degenerate_no_filler() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = gen_passkey(&mut rng, 7, 4, 0.5, VOCAB).unwrap();
        assert_eq!(inst.prompt_tokens.len(), 7);
        assert_eq!(inst.prompt_tokens[0], TOK_KEY_START);
        assert_eq!(*inst.prompt_tokens.last().unwrap(), TOK_QUERY);
    }

    #[test]
    fn passkey_impossible_geometry_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(gen_passkey(&mut rng, 6, 4, 0.5, VOCAB).is_err());
        assert!(gen_passkey(&mut rng, 32, 0, 0.5, VOCAB).is_err());
        assert!(gen_passkey(&mut rng, 32, 4, 1.5, VOCAB).is_err());
        assert!(gen_passkey(&mut rng, 32, 4, 0.5, 16).is_err());
    }

    #[test]
    fn passkey_scan_oracle_recovers_every_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..1000 {
            let len = 16 + (i % 5) * 24;
            let pos = (i % 11) as f64 / 10.0;
            let inst = gen_passkey(&mut rng, len, 4, pos, VOCAB).unwrap();
            // scan oracle: tokens strictly between the unique marker pair
            let start = inst.prompt_tokens.iter().position(|&t| t == TOK_KEY_START).unwrap();
            let end = inst.prompt_tokens.iter().position(|&t| t == TOK_KEY_END).unwrap();
            assert_eq!(&inst.prompt_tokens[start + 1..end], inst.target_tokens.as_slice());
            assert_eq!(inst.prompt_tokens.len(), len);
        }
    }

    #[test]
    fn passkey_filler_never_leaks_key_or_markers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let inst = gen_passkey(&mut rng, 64, 4, 0.71, VOCAB).unwrap();
            let start = inst.prompt_tokens.iter().position(|&t| t == TOK_KEY_START).unwrap();
            let end = inst.prompt_tokens.iter().position(|&t| t == TOK_KEY_END).unwrap();
            for (i, &t) in inst.prompt_tokens.iter().enumerate() {
                let in_needle = i >= start && i <= end;
                let is_final_query = i + 1 == inst.prompt_tokens.len();
                if !in_needle && !is_final_query {
                    assert!(t >= FILLER_START, "filler region contains token {t} at {i}");
                    assert!(!inst.target_tokens.contains(&t));
                }
            }
        }
    }

    #[test]
    fn assoc_single_pair_is_a_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = gen_assoc_recall(&mut rng, 1, 8, VOCAB).unwrap();
        assert_eq!(inst.prompt_tokens.len(), 8);
        let key = inst.prompt_tokens[4];
        assert_eq!(inst.prompt_tokens[5], inst.target_tokens[0]);
        assert_eq!(inst.prompt_tokens[6], TOK_QUERY);
        assert_eq!(inst.prompt_tokens[7], key);
    }

    #[test]
    fn assoc_too_many_distinct_keys_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(gen_assoc_recall(&mut rng, 13, 64, VOCAB).is_err());
        assert!(gen_assoc_recall(&mut rng, 4, 8, VOCAB).is_err());
    }

    #[test]
    fn assoc_keys_are_distinct_and_target_matches_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let inst = gen_assoc_recall(&mut rng, 6, 32, VOCAB).unwrap();
            let body = &inst.prompt_tokens[32 - 14..];
            let keys: Vec<u32> = (0..6).map(|i| body[2 * i]).collect();
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 6, "keys must be distinct");
            let query = body[13];
            let idx = keys.iter().position(|&k| k == query).unwrap();
            assert_eq!(body[2 * idx + 1], inst.target_tokens[0]);
        }
    }

    #[test]
    fn assoc_target_values_are_near_uniform_over_ten_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = std::collections::HashMap::new();
        let total = 10_000usize;
        for _ in 0..total {
            let inst = gen_assoc_recall(&mut rng, 8, 32, VOCAB).unwrap();
            *counts.entry(inst.target_tokens[0]).or_insert(0usize) += 1;
        }
        let symbols = (VALUE_ALPHABET.end - VALUE_ALPHABET.start) as f64;
        let expected = total as f64 / symbols;
        // per-symbol counts stay within sampling noise of uniform, and
        // the mean relative deviation stays under 5%
        let sigma = (expected * (1.0 - 1.0 / symbols)).sqrt();
        let mut rel_sum = 0.0;
        for v in VALUE_ALPHABET {
            let c = *counts.get(&v).unwrap_or(&0) as f64;
            assert!(
                (c - expected).abs() <= 5.0 * sigma,
                "value {v}: count {c} vs expected {expected}"
            );
            rel_sum += (c - expected).abs() / expected;
        }
        assert!(rel_sum / symbols <= 0.05, "mean deviation {} above 5%", rel_sum / symbols);
    }

    #[test]
    fn corpus_bytes_are_seed_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50)
                .map(|i| gen_passkey(&mut rng, 48, 4, (i % 10) as f64 / 10.0, VOCAB).unwrap())
                .collect::<Vec<_>>()
        };
        let a = corpus_to_jsonl(&build());
        let b = corpus_to_jsonl(&build());
        assert_eq!(a, b);
        let parsed = corpus_from_jsonl(&a).unwrap();
        assert_eq!(parsed, build());
    }

    struct ScanOracleDecoder;
    impl Decoder for ScanOracleDecoder {
        fn generate(&self, prompt: &[u32], max_new_tokens: usize) -> crate::Result<Vec<u32>> {
            let start = prompt.iter().position(|&t| t == TOK_KEY_START).unwrap();
            let end = prompt.iter().position(|&t| t == TOK_KEY_END).unwrap();
            Ok(prompt[start + 1..end].iter().take(max_new_tokens).cloned().collect())
        }
    }

    struct ConstantDecoder(u32);
    impl Decoder for ConstantDecoder {
        fn generate(&self, _prompt: &[u32], n: usize) -> crate::Result<Vec<u32>> {
            Ok(vec![self.0; n])
        }
    }

    #[test]
    fn echo_decoder_scores_perfect_and_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut corpus = Vec::new();
        for len in [32usize, 64] {
            for i in 0..20 {
                corpus.push(gen_passkey(&mut rng, len, 4, (i % 5) as f64 / 5.0, VOCAB).unwrap());
            }
        }
        let report = evaluate(&ScanOracleDecoder, &corpus).unwrap();
        assert_eq!(report.accuracy("passkey", 32), Some(1.0));
        assert_eq!(report.accuracy("passkey", 64), Some(1.0));
        // totals per aggregate cell equal the corpus slice sizes
        for len in [32usize, 64] {
            let row = report
                .rows
                .iter()
                .find(|r| r.length == len && r.needle_pos == "all")
                .unwrap();
            assert_eq!(row.n, 20);
        }
        // per-bin counts sum to the aggregate
        let bins: usize = report
            .rows
            .iter()
            .filter(|r| r.length == 32 && r.needle_pos != "all")
            .map(|r| r.n)
            .sum();
        assert_eq!(bins, 20);
    }

    #[test]
    fn wrong_decoder_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let corpus: Vec<_> = (0..30)
            .map(|_| gen_passkey(&mut rng, 32, 4, 0.5, VOCAB).unwrap())
            .collect();
        let report = evaluate(&ConstantDecoder(TOK_PAD), &corpus).unwrap();
        assert_eq!(report.accuracy("passkey", 32), Some(0.0));
    }
}
