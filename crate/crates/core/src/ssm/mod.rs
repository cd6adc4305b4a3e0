//! The selective state-space layer stack and causal LM head.
//!
//! Each layer keeps a fixed-size recurrent state of shape
//! `intermediate_size × state_size`; the per-token step size Δ and the
//! input coefficients B are projected from the incoming hidden state,
//! which is what makes the scan selective.

mod forward;
mod infer;

pub(crate) use forward::delta_path;
pub use forward::{
    compute_delta, discretize, embed_tokens, forward_sequence, lm_logits, scan_step, LayerVars,
    ModelVars,
};
pub use infer::{
    decode_greedy, forward_sequence_infer, logits_row_infer, step_all_layers_infer, DecodeSession,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Tensor};

/// Epsilon inside the pre-layer RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// How an importance weight enters the step-size path at a position
/// that carries one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaForm {
    /// `Δ = softplus(proj1(h)·α + Θ)` — the published form.
    Offset,
    /// `Δ = softplus(proj1(h))·α` — the "scale Δ directly" variant.
    Scaled,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub state_size: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub tied_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("state_size", self.state_size),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-layer parameters. `A` is stored as `-exp(a_log)` so the
/// continuous state matrix stays strictly negative under training.
#[derive(Clone, Debug)]
pub struct SsmLayerParams {
    /// Δ path, `hidden → intermediate`, with bias.
    pub proj1_w: Tensor,
    pub proj1_b: Tensor,
    /// B path, `hidden → state`.
    pub proj2_w: Tensor,
    /// Input path, `hidden → intermediate`.
    pub proj3_w: Tensor,
    /// Read-out path, `hidden → state`.
    pub proj_c_w: Tensor,
    /// `intermediate → hidden`.
    pub out_proj_w: Tensor,
    /// `intermediate × state`; A = -exp(a_log).
    pub a_log: Tensor,
    /// Adaptation offset, all zeros at init.
    pub theta: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// `vocab × hidden`, one row per token.
    pub embedding: Tensor,
    /// `hidden × vocab`; absent when the head is tied to the embedding.
    pub lm_head_w: Option<Tensor>,
    pub lm_head_b: Tensor,
    pub layers: Vec<SsmLayerParams>,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(vec![rows, cols], data)
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let (h, hi, n, v) = (
            config.hidden_size,
            config.intermediate_size,
            config.state_size,
            config.vocab_size,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = fan_in_uniform(&mut rng, v, h);

        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let proj1_w = fan_in_uniform(&mut rng, h, hi);
            // bias chosen so softplus(bias) lands log-uniformly in
            // [1e-3, 1e-1]: small initial step sizes, long memory
            let proj1_b = Tensor::from_vec(
                vec![hi],
                (0..hi)
                    .map(|_| {
                        let dt = (rng.gen_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
                        dt.exp_m1().ln()
                    })
                    .collect(),
            );
            let proj2_w = fan_in_uniform(&mut rng, h, n);
            let proj3_w = fan_in_uniform(&mut rng, h, hi);
            let proj_c_w = fan_in_uniform(&mut rng, h, n);
            let out_proj_w = fan_in_uniform(&mut rng, hi, h);
            // -A spans [1, state_size] log-uniformly along each row
            let a_log = Tensor::from_vec(
                vec![hi, n],
                (0..hi * n)
                    .map(|idx| {
                        let j = idx % n;
                        if n == 1 {
                            0.0
                        } else {
                            (j as f64 / (n - 1) as f64) * (n as f64).ln()
                        }
                    })
                    .collect(),
            );
            let theta = Tensor::zeros(&[hi]);
            layers.push(SsmLayerParams {
                proj1_w,
                proj1_b,
                proj2_w,
                proj3_w,
                proj_c_w,
                out_proj_w,
                a_log,
                theta,
            });
        }

        let lm_head_w = if config.tied_lm_head {
            None
        } else {
            Some(fan_in_uniform(&mut rng, h, v))
        };
        let lm_head_b = Tensor::zeros(&[v]);

        Ok(Model {
            config: config.clone(),
            embedding,
            lm_head_w,
            lm_head_b,
            layers,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.proj1"), &l.proj1_w));
            out.push((format!("layer{i}.proj1_bias"), &l.proj1_b));
            out.push((format!("layer{i}.proj2"), &l.proj2_w));
            out.push((format!("layer{i}.proj3"), &l.proj3_w));
            out.push((format!("layer{i}.projC"), &l.proj_c_w));
            out.push((format!("layer{i}.out_proj"), &l.out_proj_w));
            out.push((format!("layer{i}.a_log"), &l.a_log));
            out.push((format!("layer{i}.theta"), &l.theta));
        }
        if let Some(w) = &self.lm_head_w {
            out.push(("lm_head".into(), w));
        }
        out.push(("lm_head_bias".into(), &self.lm_head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embedding".into(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.proj1"), &mut l.proj1_w));
            out.push((format!("layer{i}.proj1_bias"), &mut l.proj1_b));
            out.push((format!("layer{i}.proj2"), &mut l.proj2_w));
            out.push((format!("layer{i}.proj3"), &mut l.proj3_w));
            out.push((format!("layer{i}.projC"), &mut l.proj_c_w));
            out.push((format!("layer{i}.out_proj"), &mut l.out_proj_w));
            out.push((format!("layer{i}.a_log"), &mut l.a_log));
            out.push((format!("layer{i}.theta"), &mut l.theta));
        }
        if let Some(w) = &mut self.lm_head_w {
            out.push(("lm_head".into(), w));
        }
        out.push(("lm_head_bias".into(), &mut self.lm_head_b));
        out
    }

    /// Total parameter bytes (the model-owned persistent footprint).
    pub fn param_bytes(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len() * 8).sum()
    }

    /// Embedding rows for a token sequence.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let rows: Result<Vec<Tensor>> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) >= self.config.vocab_size {
                    return Err(Error::contract(format!(
                        "token {t} out of vocabulary {}",
                        self.config.vocab_size
                    )));
                }
                self.embedding.row(t as usize)
            })
            .collect();
        let rows = rows?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::stack_rows(&refs)
    }
}

/// The fixed-size recurrent memory of a decode session: one
/// `intermediate × state` matrix per layer plus a position counter.
/// Its byte size never depends on how many tokens were consumed.
#[derive(Clone, Debug)]
pub struct ScanState {
    pub layers: Vec<Tensor>,
    pub position: usize,
}

impl ScanState {
    pub fn new(config: &ModelConfig) -> ScanState {
        ScanState {
            layers: (0..config.num_layers)
                .map(|_| Tensor::zeros(&[config.intermediate_size, config.state_size]))
                .collect(),
            position: 0,
        }
    }

    /// Serialize through the named-tensor container (used by the
    /// benchmark to measure recurrent-state bytes).
    pub fn to_bytes(&self) -> Vec<u8> {
        let position = Tensor::scalar(self.position as f64);
        let mut entries: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("layer{i}.state"), t))
            .collect();
        entries.push(("position".into(), &position));
        checkpoint::to_bytes(&entries, None)
    }

    pub fn state_bytes(&self) -> usize {
        self.to_bytes().len()
    }
}
