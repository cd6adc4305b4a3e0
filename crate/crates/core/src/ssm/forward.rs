//! Tape-recorded forward pass: everything here is differentiable.

use super::{DeltaForm, Model, ModelConfig, RMS_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Value};

/// Tape-bound handles to one layer's parameters.
pub struct LayerVars {
    pub proj1_w: Value,
    pub proj1_b: Value,
    pub proj2_w: Value,
    pub proj3_w: Value,
    pub proj_c_w: Value,
    pub out_proj_w: Value,
    pub a_log: Value,
    pub theta: Value,
}

/// A model's parameters inserted as leaves on one tape.
pub struct ModelVars {
    pub config: ModelConfig,
    pub embedding: Value,
    pub lm_head_w: Option<Value>,
    pub lm_head_b: Value,
    pub layers: Vec<LayerVars>,
}

impl Model {
    pub fn bind(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            config: self.config.clone(),
            embedding: tape.leaf(self.embedding.clone()),
            lm_head_w: self.lm_head_w.as_ref().map(|w| tape.leaf(w.clone())),
            lm_head_b: tape.leaf(self.lm_head_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    proj1_w: tape.leaf(l.proj1_w.clone()),
                    proj1_b: tape.leaf(l.proj1_b.clone()),
                    proj2_w: tape.leaf(l.proj2_w.clone()),
                    proj3_w: tape.leaf(l.proj3_w.clone()),
                    proj_c_w: tape.leaf(l.proj_c_w.clone()),
                    out_proj_w: tape.leaf(l.out_proj_w.clone()),
                    a_log: tape.leaf(l.a_log.clone()),
                    theta: tape.leaf(l.theta.clone()),
                })
                .collect(),
        }
    }
}

impl ModelVars {
    /// Same names as `Model::named_tensors`, for gradient lookups.
    pub fn named(&self) -> Vec<(String, &Value)> {
        let mut out: Vec<(String, &Value)> = vec![("embedding".into(), &self.embedding)];
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
}

pub(crate) fn debug_assert_contraction(a_bar: &Tensor) {
    if cfg!(debug_assertions) {
        for &v in a_bar.data() {
            debug_assert!(
                v > 0.0 && v < 1.0,
                "discretized state matrix entry {v} outside (0, 1)"
            );
        }
    }
}

/// Discrete step size for one position. Without `alpha` this is
/// `softplus(proj1(h))`; with `alpha` (already rectified, ≥ 0) the
/// projection output is scaled and offset by Θ before the softplus.
pub fn compute_delta(layer: &LayerVars, h_prev: &Value, alpha: Option<&Value>) -> Result<Value> {
    delta_path(layer, h_prev, alpha, DeltaForm::Offset)
}

pub(crate) fn delta_path(
    layer: &LayerVars,
    h_prev: &Value,
    alpha: Option<&Value>,
    form: DeltaForm,
) -> Result<Value> {
    let raw = h_prev.vecmat(&layer.proj1_w)?.add(&layer.proj1_b)?;
    match (alpha, form) {
        (None, _) => Ok(raw.softplus()),
        (Some(a), DeltaForm::Offset) => Ok(raw.mul_scalar(a)?.add(&layer.theta)?.softplus()),
        (Some(a), DeltaForm::Scaled) => raw.softplus().mul_scalar(a),
    }
}

/// Zero-order hold on A, Euler on B:
/// `Â[i,j] = exp(Δ[i]·A[i,j])`, `B̂[i,j] = Δ[i]·B[j]`.
/// `a_neg` is the strictly negative continuous matrix `-exp(a_log)`.
pub fn discretize(a_neg: &Value, b: &Value, delta: &Value) -> Result<(Value, Value)> {
    let a_bar = a_neg.mul_rows(delta)?.exp();
    debug_assert_contraction(&a_bar.value());
    let b_bar = delta.outer(b)?;
    Ok((a_bar, b_bar))
}

/// One recurrence step of the raw layer core (no normalization or
/// residual): `S_t = Â ⊗ S + B̂ ⊗ h'` row-broadcast, read out through
/// an input-dependent C projection.
pub fn scan_step(
    state: &Value,
    layer: &LayerVars,
    h_prev: &Value,
    alpha: Option<&Value>,
) -> Result<(Value, Value)> {
    let a_neg = layer.a_log.exp().scale(-1.0);
    layer_core(layer, &a_neg, state, h_prev, alpha, DeltaForm::Offset)
}

fn layer_core(
    layer: &LayerVars,
    a_neg: &Value,
    state: &Value,
    input: &Value,
    alpha: Option<&Value>,
    form: DeltaForm,
) -> Result<(Value, Value)> {
    let delta = delta_path(layer, input, alpha, form)?;
    let b_in = input.vecmat(&layer.proj2_w)?;
    let h_inner = input.vecmat(&layer.proj3_w)?;
    let (a_bar, b_bar) = discretize(a_neg, &b_in, &delta)?;
    let decayed = a_bar.mul(state)?;
    let injected = b_bar.mul_rows(&h_inner)?;
    let new_state = decayed.add(&injected)?;
    let c = input.vecmat(&layer.proj_c_w)?;
    let read = new_state.matvec(&c)?;
    let y = read.vecmat(&layer.out_proj_w)?;
    Ok((new_state, y))
}

/// Run the full layer stack over a sequence with pre-norm and residual
/// connections. `alphas[t]`, when present, reshapes the Δ path at
/// position `t` in every layer. Returns the last-layer hidden states
/// (one row per position) and each layer's final state.
pub fn forward_sequence(
    tape: &Tape,
    vars: &ModelVars,
    embeddings: &Value,
    alphas: &[Option<Value>],
    form: DeltaForm,
) -> Result<(Value, Vec<Value>)> {
    let len = embeddings.shape()[0];
    if len == 0 {
        return Err(Error::contract("forward_sequence: empty sequence"));
    }
    if alphas.len() != len {
        return Err(Error::contract(format!(
            "forward_sequence: {} alpha entries for sequence length {len}",
            alphas.len()
        )));
    }
    let a_negs: Vec<Value> = vars
        .layers
        .iter()
        .map(|l| l.a_log.exp().scale(-1.0))
        .collect();
    let mut states: Vec<Value> = vars
        .layers
        .iter()
        .map(|_| {
            tape.leaf(Tensor::zeros(&[
                vars.config.intermediate_size,
                vars.config.state_size,
            ]))
        })
        .collect();
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let mut x = embeddings.row(t)?;
        for (l, layer) in vars.layers.iter().enumerate() {
            let u = x.rms_norm(RMS_EPS);
            let (s, y) = layer_core(layer, &a_negs[l], &states[l], &u, alphas[t].as_ref(), form)?;
            states[l] = s;
            x = x.add(&y)?;
        }
        outputs.push(x);
    }
    let hidden = tape.stack_rows(&outputs)?;
    Ok((hidden, states))
}

/// Affine map from hidden states to vocabulary logits (tied heads
/// reuse the embedding matrix).
pub fn lm_logits(vars: &ModelVars, hidden: &Value) -> Result<Value> {
    let logits = match &vars.lm_head_w {
        Some(w) => hidden.matmul(w)?,
        None => hidden.matmul(&vars.embedding.transpose()?)?,
    };
    logits.add_row_broadcast(&vars.lm_head_b)
}

/// Embedding rows for a token sequence, differentiable into the
/// embedding matrix.
pub fn embed_tokens(tape: &Tape, vars: &ModelVars, tokens: &[u32]) -> Result<Value> {
    if tokens.is_empty() {
        return Err(Error::contract("embed_tokens: empty sequence"));
    }
    let vocab = vars.config.vocab_size;
    let rows: Result<Vec<Value>> = tokens
        .iter()
        .map(|&t| {
            if (t as usize) >= vocab {
                return Err(Error::contract(format!("token {t} out of vocabulary {vocab}")));
            }
            vars.embedding.row(t as usize)
        })
        .collect();
    tape.stack_rows(&rows?)
}
