//! Stage 1: score the first pass's last-layer hidden states against the
//! final hidden state, keep the top-K inside a relative window, project
//! them into embedding space, and splice a shorter prompt.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Tape, Tensor, Value};
use crate::ssm::{forward_sequence, forward_sequence_infer, DeltaForm, Model, ModelVars};

/// Where the selected value vectors land in the second-stage sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Replace the window in place (the window usually starts at 0).
    #[default]
    Standard,
    /// Same splice with a nonzero relative start; a config label for
    /// mid-sequence windows rather than a distinct mechanism.
    Middle,
    /// Compress the whole prompt and append the values after it.
    SpecialAppend,
}

/// How indices are chosen inside the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Topk,
    Random,
    FixedInterval,
}

fn default_eps() -> f64 {
    1e-8
}

/// Relative compression window and ratio. Serialized keys follow the
/// run-config contract: `s`, `p`, `rho`, `placement`, `eps`,
/// `strategy`, `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    /// Relative start of the window, in [0, 1].
    #[serde(rename = "s")]
    pub rel_start: f64,
    /// Relative length of the window, in [0, 1].
    #[serde(rename = "p")]
    pub rel_len: f64,
    /// Keep ratio in (0, 1]: the window shrinks to ~`rho` of its length.
    #[serde(rename = "rho")]
    pub ratio: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
}

impl CompressionSpec {
    pub fn new(rel_start: f64, rel_len: f64, ratio: f64) -> Self {
        CompressionSpec {
            rel_start,
            rel_len,
            ratio,
            placement: Placement::Standard,
            eps: default_eps(),
            strategy: Strategy::Topk,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rel_start) {
            return Err(Error::config(format!("compression.s = {} outside [0, 1]", self.rel_start)));
        }
        if !(0.0..=1.0).contains(&self.rel_len) {
            return Err(Error::config(format!("compression.p = {} outside [0, 1]", self.rel_len)));
        }
        if self.placement != Placement::SpecialAppend && self.rel_start + self.rel_len > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "compression.s + compression.p = {} exceeds 1",
                self.rel_start + self.rel_len
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("compression.rho = {} outside (0, 1]", self.ratio)));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("compression.eps must be positive"));
        }
        Ok(())
    }
}

/// Absolute window derived from a spec: 1-based inclusive `[start, end]`
/// of length `len`, keeping `keep` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressionWindow {
    pub start: usize,
    pub end: usize,
    pub len: usize,
    pub keep: usize,
}

/// `start = ⌊L·s⌋ + 1`, `end = ⌊L·(s+p)⌋`, `keep = max(1, ⌊len·ρ⌋)`.
/// Returns `None` when the window is empty (compression is a no-op).
/// Special-append always covers the whole prompt.
pub fn compute_window(len: usize, spec: &CompressionSpec) -> Result<Option<CompressionWindow>> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::contract("compute_window: sequence length 0"));
    }
    let (start, end) = if spec.placement == Placement::SpecialAppend {
        (1, len)
    } else {
        let start = (len as f64 * spec.rel_start).floor() as usize + 1;
        let end = (len as f64 * (spec.rel_start + spec.rel_len)).floor() as usize;
        (start, end.min(len))
    };
    if end < start {
        return Ok(None);
    }
    let wlen = end - start + 1;
    let keep = ((wlen as f64 * spec.ratio).floor() as usize).max(1);
    Ok(Some(CompressionWindow {
        start,
        end,
        len: wlen,
        keep,
    }))
}

// ── Scorer ──────────────────────────────────────────────────────────

/// The three square feed-forward maps of the selection head. Query and
/// Key score hidden states; Value projects the keepers back into the
/// token-embedding space.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
}

impl ScorerParams {
    /// Fan-in-scaled random init (no pretrained weights exist to copy
    /// from at this scale).
    pub fn init(hidden: usize, seed: u64) -> ScorerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut mat = || {
            let data = (0..hidden * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_vec(vec![hidden, hidden], data)
        };
        let query_w = mat();
        let key_w = mat();
        let value_w = mat();
        ScorerParams {
            query_w,
            query_b: Tensor::zeros(&[hidden]),
            key_w,
            key_b: Tensor::zeros(&[hidden]),
            value_w,
            value_b: Tensor::zeros(&[hidden]),
        }
    }

    /// Identity maps with zero bias; rigs the scorer so every score is
    /// the raw cosine between hidden states.
    pub fn identity(hidden: usize) -> ScorerParams {
        let mut eye = Tensor::zeros(&[hidden, hidden]);
        for i in 0..hidden {
            eye.data_mut()[i * hidden + i] = 1.0;
        }
        ScorerParams {
            query_w: eye.clone(),
            query_b: Tensor::zeros(&[hidden]),
            key_w: eye.clone(),
            key_b: Tensor::zeros(&[hidden]),
            value_w: eye,
            value_b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("scorer.query".into(), &self.query_w),
            ("scorer.query_bias".into(), &self.query_b),
            ("scorer.key".into(), &self.key_w),
            ("scorer.key_bias".into(), &self.key_b),
            ("scorer.value".into(), &self.value_w),
            ("scorer.value_bias".into(), &self.value_b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("scorer.query".into(), &mut self.query_w),
            ("scorer.query_bias".into(), &mut self.query_b),
            ("scorer.key".into(), &mut self.key_w),
            ("scorer.key_bias".into(), &mut self.key_b),
            ("scorer.value".into(), &mut self.value_w),
            ("scorer.value_bias".into(), &mut self.value_b),
        ]
    }

    pub fn param_bytes(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len() * 8).sum()
    }
}

/// Tape-bound scorer parameters.
pub struct ScorerVars {
    pub query_w: Value,
    pub query_b: Value,
    pub key_w: Value,
    pub key_b: Value,
    pub value_w: Value,
    pub value_b: Value,
}

impl ScorerParams {
    pub fn bind(&self, tape: &Tape) -> ScorerVars {
        ScorerVars {
            query_w: tape.leaf(self.query_w.clone()),
            query_b: tape.leaf(self.query_b.clone()),
            key_w: tape.leaf(self.key_w.clone()),
            key_b: tape.leaf(self.key_b.clone()),
            value_w: tape.leaf(self.value_w.clone()),
            value_b: tape.leaf(self.value_b.clone()),
        }
    }
}

impl ScorerVars {
    pub fn named(&self) -> Vec<(String, &Value)> {
        vec![
            ("scorer.query".into(), &self.query_w),
            ("scorer.query_bias".into(), &self.query_b),
            ("scorer.key".into(), &self.key_w),
            ("scorer.key_bias".into(), &self.key_b),
            ("scorer.value".into(), &self.value_w),
            ("scorer.value_bias".into(), &self.value_b),
        ]
    }
}

// ── Scoring and selection ───────────────────────────────────────────

/// Importance scores for a window of hidden states: cosine similarity
/// between the projected query (from the last hidden state) and each
/// projected key.
pub fn score(
    scorer: &ScorerParams,
    h_last: &Tensor,
    window_hiddens: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    if window_hiddens.shape()[0] == 0 {
        return Err(Error::contract("score: empty window"));
    }
    let q = h_last.vecmat(&scorer.query_w)?.add(&scorer.query_b)?;
    let mut out = Vec::with_capacity(window_hiddens.shape()[0]);
    for i in 0..window_hiddens.shape()[0] {
        let k = window_hiddens.row(i)?.vecmat(&scorer.key_w)?.add(&scorer.key_b)?;
        out.push(cosine_similarity(&q, &k, eps)?);
    }
    Ok(out)
}

/// Indices of the `k` largest scores, ties to the lower index, returned
/// in increasing index order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::contract(format!(
            "select_top_k: k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Dispatch between score-based, uniform-random, and fixed-stride
/// selection. All strategies return strictly increasing indices.
pub fn select_strategy(
    strategy: Strategy,
    scores: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::contract(format!(
            "select_strategy: k = {k} outside 1..={}",
            scores.len()
        )));
    }
    match strategy {
        Strategy::Topk => select_top_k(scores, k),
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // partial Fisher-Yates: the first k slots end up a uniform
            // k-subset
            let mut pool: Vec<usize> = (0..scores.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut chosen = pool[..k].to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        }
        Strategy::FixedInterval => {
            let step = scores.len() / k;
            Ok((0..k).map(|i| i * step).collect())
        }
    }
}

// ── Splicing ────────────────────────────────────────────────────────

/// The spliced second-stage prompt: embeddings, per-position importance
/// (present exactly at the spliced positions), and the selected source
/// indices (0-based, increasing).
#[derive(Clone, Debug)]
pub struct CompressedPrompt {
    pub embeddings: Tensor,
    pub importance: Vec<Option<f64>>,
    pub selected: Vec<usize>,
    pub window: Option<CompressionWindow>,
}

/// Tape-path equivalent; importance entries are live score nodes.
pub struct CompressedTape {
    pub embeddings: Value,
    pub importance: Vec<Option<Value>>,
    pub selected: Vec<usize>,
    pub window: Option<CompressionWindow>,
}

/// First forward pass plus splice, no tape. `prompt_len` bounds the
/// window and locates the query hidden state; trailing positions
/// (teacher-forced continuations during training) are never compressed.
pub fn compress(
    model: &Model,
    scorer: &ScorerParams,
    token_embeddings: &Tensor,
    spec: &CompressionSpec,
    prompt_len: usize,
) -> Result<CompressedPrompt> {
    let total = token_embeddings.shape()[0];
    if prompt_len == 0 || prompt_len > total {
        return Err(Error::contract(format!(
            "compress: prompt_len {prompt_len} outside 1..={total}"
        )));
    }
    let Some(window) = compute_window(prompt_len, spec)? else {
        return Ok(CompressedPrompt {
            embeddings: token_embeddings.clone(),
            importance: vec![None; total],
            selected: Vec::new(),
            window: None,
        });
    };

    let alphas = vec![None; total];
    let (hidden, _) = forward_sequence_infer(model, token_embeddings, &alphas, DeltaForm::Offset)?;
    let h_last = hidden.row(prompt_len - 1)?;
    let window_hiddens = hidden.slice0(window.start - 1, window.end)?;
    let scores = score(scorer, &h_last, &window_hiddens, spec.eps)?;
    let chosen = select_strategy(spec.strategy, &scores, window.keep, spec.seed)?;

    let mut value_rows = Vec::with_capacity(chosen.len());
    let mut kept_scores = Vec::with_capacity(chosen.len());
    for &j in &chosen {
        let v = hidden
            .row(window.start - 1 + j)?
            .vecmat(&scorer.value_w)?
            .add(&scorer.value_b)?;
        value_rows.push(v);
        kept_scores.push(scores[j]);
    }
    let value_refs: Vec<&Tensor> = value_rows.iter().collect();
    let block = Tensor::stack_rows(&value_refs)?;

    let (embeddings, importance) = match spec.placement {
        Placement::SpecialAppend => {
            let embeddings = Tensor::concat0(&[token_embeddings, &block])?;
            let mut importance = vec![None; total];
            importance.extend(kept_scores.iter().map(|&s| Some(s)));
            (embeddings, importance)
        }
        _ => {
            let prefix = token_embeddings.slice0(0, window.start - 1)?;
            let suffix = token_embeddings.slice0(window.end, total)?;
            let embeddings = Tensor::concat0(&[&prefix, &block, &suffix])?;
            let mut importance = vec![None; window.start - 1];
            importance.extend(kept_scores.iter().map(|&s| Some(s)));
            importance.extend(std::iter::repeat(None).take(total - window.end));
            (embeddings, importance)
        }
    };

    Ok(CompressedPrompt {
        embeddings,
        importance,
        selected: chosen.iter().map(|j| window.start - 1 + j).collect(),
        window: Some(window),
    })
}

/// Tape-path compression: the first-stage forward, the scores, and the
/// value projections all stay differentiable.
pub fn compress_tape(
    tape: &Tape,
    vars: &ModelVars,
    scorer: &ScorerVars,
    token_embeddings: &Value,
    spec: &CompressionSpec,
    prompt_len: usize,
) -> Result<CompressedTape> {
    let total = token_embeddings.shape()[0];
    if prompt_len == 0 || prompt_len > total {
        return Err(Error::contract(format!(
            "compress_tape: prompt_len {prompt_len} outside 1..={total}"
        )));
    }
    let Some(window) = compute_window(prompt_len, spec)? else {
        return Ok(CompressedTape {
            embeddings: token_embeddings.clone(),
            importance: vec![None; total],
            selected: Vec::new(),
            window: None,
        });
    };

    let alphas = vec![None; total];
    let (hidden, _) = forward_sequence(tape, vars, token_embeddings, &alphas, DeltaForm::Offset)?;
    let h_last = hidden.row(prompt_len - 1)?;
    let q = h_last.vecmat(&scorer.query_w)?.add(&scorer.query_b)?;
    let qq = q.dot(&q)?.sqrt();

    let mut score_nodes = Vec::with_capacity(window.len);
    for i in 0..window.len {
        let k = hidden
            .row(window.start - 1 + i)?
            .vecmat(&scorer.key_w)?
            .add(&scorer.key_b)?;
        let num = q.dot(&k)?;
        let den = qq.mul(&k.dot(&k)?.sqrt())?.clamp_min(spec.eps);
        score_nodes.push(num.div(&den)?);
    }
    let scores: Vec<f64> = score_nodes.iter().map(|s| s.item()).collect();
    let chosen = select_strategy(spec.strategy, &scores, window.keep, spec.seed)?;

    let mut value_rows = Vec::with_capacity(chosen.len());
    for &j in &chosen {
        let v = hidden
            .row(window.start - 1 + j)?
            .vecmat(&scorer.value_w)?
            .add(&scorer.value_b)?;
        value_rows.push(v);
    }
    let block = tape.stack_rows(&value_rows)?;

    let (embeddings, importance) = match spec.placement {
        Placement::SpecialAppend => {
            let embeddings = tape.concat0(&[token_embeddings.clone(), block])?;
            let mut importance: Vec<Option<Value>> = vec![None; total];
            importance.extend(chosen.iter().map(|&j| Some(score_nodes[j].clone())));
            (embeddings, importance)
        }
        _ => {
            let prefix = token_embeddings.slice0(0, window.start - 1)?;
            let suffix = token_embeddings.slice0(window.end, total)?;
            let embeddings = tape.concat0(&[prefix, block, suffix])?;
            let mut importance: Vec<Option<Value>> = vec![None; window.start - 1];
            importance.extend(chosen.iter().map(|&j| Some(score_nodes[j].clone())));
            importance.extend((0..total - window.end).map(|_| None));
            (embeddings, importance)
        }
    };

    Ok(CompressedTape {
        embeddings,
        importance,
        selected: chosen.iter().map(|j| window.start - 1 + j).collect(),
        window: Some(window),
    })
}
