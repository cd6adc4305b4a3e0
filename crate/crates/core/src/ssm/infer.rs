//! Tape-free forward path for evaluation, decoding, and benchmarks.
//!
//! Mirrors `forward.rs` operation for operation (same `Tensor` kernels,
//! same order) so the two routes produce bit-identical values; the tape
//! route exists for gradients, this one for speed and constant-memory
//! decoding.

use super::forward::debug_assert_contraction;
use super::{DeltaForm, Model, ScanState, RMS_EPS};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Tensor};

fn delta_path_infer(
    layer: &super::SsmLayerParams,
    input: &Tensor,
    alpha: Option<f64>,
    form: DeltaForm,
) -> Result<Tensor> {
    let raw = input.vecmat(&layer.proj1_w)?.add(&layer.proj1_b)?;
    Ok(match (alpha, form) {
        (None, _) => raw.softplus(),
        (Some(a), DeltaForm::Offset) => raw.scale(a).add(&layer.theta)?.softplus(),
        (Some(a), DeltaForm::Scaled) => raw.softplus().scale(a),
    })
}

fn layer_core_infer(
    layer: &super::SsmLayerParams,
    a_neg: &Tensor,
    state: &Tensor,
    input: &Tensor,
    alpha: Option<f64>,
    form: DeltaForm,
) -> Result<(Tensor, Tensor)> {
    let delta = delta_path_infer(layer, input, alpha, form)?;
    let b_in = input.vecmat(&layer.proj2_w)?;
    let h_inner = input.vecmat(&layer.proj3_w)?;
    let a_bar = a_neg.mul_rows(&delta)?.exp();
    debug_assert_contraction(&a_bar);
    let b_bar = delta.outer(&b_in)?;
    let decayed = a_bar.mul(state)?;
    let injected = b_bar.mul_rows(&h_inner)?;
    let new_state = decayed.add(&injected)?;
    let c = input.vecmat(&layer.proj_c_w)?;
    let read = new_state.matvec(&c)?;
    let y = read.vecmat(&layer.out_proj_w)?;
    Ok((new_state, y))
}

/// Precompute each layer's continuous state matrix `-exp(a_log)`.
pub(crate) fn continuous_state_matrices(model: &Model) -> Vec<Tensor> {
    model.layers.iter().map(|l| l.a_log.exp().scale(-1.0)).collect()
}

/// Advance one position through the whole stack (pre-norm + residual),
/// mutating the session state. Returns the last-layer output.
pub fn step_all_layers_infer(
    model: &Model,
    a_negs: &[Tensor],
    session: &mut ScanState,
    x: &Tensor,
    alpha: Option<f64>,
    form: DeltaForm,
) -> Result<Tensor> {
    let mut x = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let u = x.rms_norm(RMS_EPS);
        let (s, y) = layer_core_infer(layer, &a_negs[l], &session.layers[l], &u, alpha, form)?;
        session.layers[l] = s;
        x = x.add(&y)?;
    }
    session.position += 1;
    Ok(x)
}

/// Whole-sequence forward without a tape: last-layer hidden states and
/// the final session state.
pub fn forward_sequence_infer(
    model: &Model,
    embeddings: &Tensor,
    alphas: &[Option<f64>],
    form: DeltaForm,
) -> Result<(Tensor, ScanState)> {
    let len = embeddings.shape()[0];
    if len == 0 {
        return Err(Error::contract("forward_sequence_infer: empty sequence"));
    }
    if alphas.len() != len {
        return Err(Error::contract(format!(
            "forward_sequence_infer: {} alpha entries for sequence length {len}",
            alphas.len()
        )));
    }
    let a_negs = continuous_state_matrices(model);
    let mut session = ScanState::new(&model.config);
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let x = embeddings.row(t)?;
        outputs.push(step_all_layers_infer(model, &a_negs, &mut session, &x, alphas[t], form)?);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    Ok((Tensor::stack_rows(&refs)?, session))
}

/// Vocabulary logits for a single hidden state.
pub fn logits_row_infer(model: &Model, h: &Tensor) -> Result<Tensor> {
    let logits = match &model.lm_head_w {
        Some(w) => h.vecmat(w)?,
        None => h.vecmat(&model.embedding.transpose()?)?,
    };
    logits.add(&model.lm_head_b)
}

/// An in-flight recurrent generation session. Owns one fixed-size
/// state; consuming or generating a token costs exactly one state
/// update per layer, so live memory is flat in the prompt length.
pub struct DecodeSession<'m> {
    model: &'m Model,
    a_negs: Vec<Tensor>,
    state: ScanState,
    last: Tensor,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model) -> DecodeSession<'m> {
        DecodeSession {
            model,
            a_negs: continuous_state_matrices(model),
            state: ScanState::new(&model.config),
            last: Tensor::zeros(&[model.config.hidden_size]),
        }
    }

    /// Feed prompt embeddings (with their per-position importance
    /// weights) through the state.
    pub fn consume(
        &mut self,
        embeddings: &Tensor,
        alphas: &[Option<f64>],
        form: DeltaForm,
    ) -> Result<()> {
        let len = embeddings.shape()[0];
        if len == 0 {
            return Err(Error::contract("decode: empty prompt"));
        }
        if alphas.len() != len {
            return Err(Error::contract(format!(
                "decode: {} alpha entries for prompt length {len}",
                alphas.len()
            )));
        }
        for t in 0..len {
            let xt = embeddings.row(t)?;
            self.last =
                step_all_layers_infer(self.model, &self.a_negs, &mut self.state, &xt, alphas[t], form)?;
        }
        Ok(())
    }

    /// Greedy-pick the next token and advance the state with it.
    pub fn greedy_next(&mut self, form: DeltaForm) -> Result<u32> {
        let logits = logits_row_infer(self.model, &self.last)?;
        let token = argmax(logits.data()) as u32;
        let xt = self.model.embedding.row(token as usize)?;
        self.last =
            step_all_layers_infer(self.model, &self.a_negs, &mut self.state, &xt, None, form)?;
        Ok(token)
    }

    pub fn state(&self) -> &ScanState {
        &self.state
    }

    pub fn into_state(self) -> ScanState {
        self.state
    }
}

/// Greedy decoding in recurrent mode. Returns generated ids and the
/// final session state.
pub fn decode_greedy(
    model: &Model,
    prompt_embeddings: &Tensor,
    alphas: &[Option<f64>],
    form: DeltaForm,
    max_new_tokens: usize,
) -> Result<(Vec<u32>, ScanState)> {
    let mut session = DecodeSession::new(model);
    session.consume(prompt_embeddings, alphas, form)?;
    let mut generated = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        generated.push(session.greedy_next(form)?);
    }
    Ok((generated, session.into_state()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softplus, Tape};
    use crate::ssm::{embed_tokens, forward_sequence, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 6,
            intermediate_size: 8,
            state_size: 4,
            vocab_size: 16,
            tied_lm_head: false,
        }
    }

    #[test]
    fn infer_path_is_bitwise_equal_to_tape_path() {
        let model = Model::init(&config(), 19).unwrap();
        let tokens: Vec<u32> = vec![3, 1, 15, 7, 7, 0, 9, 12];
        let alphas_f: Vec<Option<f64>> = vec![
            None,
            Some(0.7),
            None,
            Some(0.0),
            None,
            None,
            Some(1.3),
            None,
        ];

        let emb = model.embed(&tokens).unwrap();
        let (hidden_i, state_i) =
            forward_sequence_infer(&model, &emb, &alphas_f, DeltaForm::Offset).unwrap();

        let tape = Tape::new();
        let vars = model.bind(&tape);
        let emb_t = embed_tokens(&tape, &vars, &tokens).unwrap();
        let alphas_t: Vec<Option<crate::numerics::Value>> = alphas_f
            .iter()
            .map(|a| a.map(|v| tape.scalar(v)))
            .collect();
        let (hidden_t, states_t) =
            forward_sequence(&tape, &vars, &emb_t, &alphas_t, DeltaForm::Offset).unwrap();

        assert_eq!(hidden_i, hidden_t.value(), "hidden states must agree bitwise");
        for (a, b) in state_i.layers.iter().zip(&states_t) {
            assert_eq!(a, &b.value());
        }
    }

    /// Independent scalar-loop recurrence oracle for a short run: plain
    /// f64 arithmetic over raw slices, no Tensor ops.
    #[test]
    fn eight_step_run_matches_scalar_recurrence_oracle() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 3,
            intermediate_size: 4,
            state_size: 2,
            vocab_size: 8,
            tied_lm_head: false,
        };
        let model = Model::init(&cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let seq: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        // implementation under test
        let flat: Vec<f64> = seq.iter().flatten().cloned().collect();
        let emb = Tensor::from_vec(vec![8, 3], flat);
        let (_, session) =
            forward_sequence_infer(&model, &emb, &vec![None; 8], DeltaForm::Offset).unwrap();

        // oracle
        let l = &model.layers[0];
        let (h, hi, n) = (3usize, 4usize, 2usize);
        let w1 = l.proj1_w.data();
        let b1 = l.proj1_b.data();
        let w2 = l.proj2_w.data();
        let w3 = l.proj3_w.data();
        let alog = l.a_log.data();
        let mut state = vec![0.0f64; hi * n];
        for x in &seq {
            // rms pre-norm
            let ms = x.iter().map(|v| v * v).sum::<f64>() / h as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            let u: Vec<f64> = x.iter().map(|v| v * r).collect();
            // projections
            let mut delta = vec![0.0; hi];
            let mut hp = vec![0.0; hi];
            for c in 0..hi {
                let mut acc = b1[c];
                let mut acc3 = 0.0;
                for row in 0..h {
                    acc += u[row] * w1[row * hi + c];
                    acc3 += u[row] * w3[row * hi + c];
                }
                delta[c] = softplus(acc);
                hp[c] = acc3;
            }
            let mut b_in = vec![0.0; n];
            for c in 0..n {
                for row in 0..h {
                    b_in[c] += u[row] * w2[row * n + c];
                }
            }
            for i in 0..hi {
                for j in 0..n {
                    let a_ij = -alog[i * n + j].exp();
                    let a_bar = (delta[i] * a_ij).exp();
                    state[i * n + j] = a_bar * state[i * n + j] + delta[i] * b_in[j] * hp[i];
                }
            }
        }
        for (got, want) in session.layers[0].data().iter().zip(&state) {
            assert!((got - want).abs() < 1e-10, "state mismatch: {got} vs {want}");
        }
    }

    #[test]
    fn decode_zero_tokens_is_empty() {
        let model = Model::init(&config(), 0).unwrap();
        let emb = model.embed(&[1, 2, 3]).unwrap();
        let (out, state) = decode_greedy(&model, &emb, &[None; 3], DeltaForm::Offset, 0).unwrap();
        assert!(out.is_empty());
        assert_eq!(state.position, 3);
    }

    #[test]
    fn rigged_head_decodes_a_constant_token() {
        let mut model = Model::init(&config(), 1).unwrap();
        model.lm_head_b.data_mut()[5] = 1e6;
        let emb = model.embed(&[0, 4]).unwrap();
        let (out, _) = decode_greedy(&model, &emb, &[None; 2], DeltaForm::Offset, 6).unwrap();
        assert_eq!(out, vec![5, 5, 5, 5, 5, 5]);
    }

    #[test]
    fn decode_matches_full_sequence_argmax_chain() {
        let model = Model::init(&config(), 41).unwrap();
        let prompt: Vec<u32> = vec![2, 9, 4, 4, 11, 1];
        let emb = model.embed(&prompt).unwrap();
        let (generated, _) =
            decode_greedy(&model, &emb, &vec![None; 6], DeltaForm::Offset, 5).unwrap();

        // oracle: re-run the whole prompt ++ generated sequence at once and
        // recover each generated token from the preceding position's logits
        let mut full = prompt.clone();
        full.extend(&generated);
        let emb_full = model.embed(&full).unwrap();
        let (hidden, _) =
            forward_sequence_infer(&model, &emb_full, &vec![None; full.len()], DeltaForm::Offset)
                .unwrap();
        for (i, &tok) in generated.iter().enumerate() {
            let h = hidden.row(prompt.len() - 1 + i).unwrap();
            let logits = logits_row_infer(&model, &h).unwrap();
            assert_eq!(argmax(logits.data()) as u32, tok, "divergence at step {i}");
        }
    }

    #[test]
    fn state_bytes_constant_across_consumed_tokens() {
        let model = Model::init(&config(), 2).unwrap();
        let short = model.embed(&vec![1; 10]).unwrap();
        let long = model.embed(&vec![1; 500]).unwrap();
        let (_, s1) = decode_greedy(&model, &short, &vec![None; 10], DeltaForm::Offset, 2).unwrap();
        let (_, s2) = decode_greedy(&model, &long, &vec![None; 500], DeltaForm::Offset, 2).unwrap();
        assert_eq!(s1.state_bytes(), s2.state_bytes());
    }
}
