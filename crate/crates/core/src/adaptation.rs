//! Stage 2: feed the spliced prompt back through the model with each
//! kept position's importance score wired into the selective step-size
//! path, so selection becomes trainable end to end.

use serde::{Deserialize, Serialize};

use crate::compression::{compress, compress_tape, CompressedPrompt, CompressedTape, CompressionSpec, ScorerParams, ScorerVars};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Value};
use crate::ssm::{
    delta_path, forward_sequence, forward_sequence_infer, lm_logits, DeltaForm, LayerVars, Model,
    ModelVars, ScanState,
};

/// What happens at a spliced position during the second pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// `α = relu(cos')`, `Δ = softplus(proj1(h)·α + Θ)` at every layer.
    #[default]
    SelectiveDelta,
    /// Scale the spliced value vector itself by `relu(cos')`; Δ stays
    /// vanilla. Applied once, at the model input.
    Multiplicative,
    /// No adaptation anywhere (baseline and selection-only ablations).
    None,
}

/// Per-position Δ resolution. Returns the step size and the (possibly
/// rescaled) layer input. Positions without a score always take the
/// vanilla path; supplying a score in mode `None` is a wiring bug.
pub fn apply(
    mode: AdaptationMode,
    form: DeltaForm,
    layer: &LayerVars,
    h_prev: &Value,
    cos_prime: Option<&Value>,
) -> Result<(Value, Value)> {
    match (mode, cos_prime) {
        (AdaptationMode::None, Some(_)) => Err(Error::contract(
            "adaptation mode is none but an importance score was supplied",
        )),
        (_, None) => Ok((
            delta_path(layer, h_prev, None, form)?,
            h_prev.clone(),
        )),
        (AdaptationMode::SelectiveDelta, Some(c)) => {
            let alpha = c.relu();
            Ok((
                delta_path(layer, h_prev, Some(&alpha), form)?,
                h_prev.clone(),
            ))
        }
        (AdaptationMode::Multiplicative, Some(c)) => {
            let h_eff = h_prev.mul_scalar(&c.relu())?;
            Ok((delta_path(layer, &h_eff, None, form)?, h_eff))
        }
    }
}

/// Both stages on one tape: compress, then forward the spliced prompt
/// with scores routed per `mode`. Gradients reach the model, the
/// scorer, and the scores themselves.
pub struct TwoStageOutput {
    pub hidden: Value,
    pub logits: Value,
    pub compressed: CompressedTape,
    pub final_states: Vec<Value>,
}

pub fn two_stage_forward(
    tape: &Tape,
    vars: &ModelVars,
    scorer: &ScorerVars,
    token_embeddings: &Value,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
    prompt_len: usize,
) -> Result<TwoStageOutput> {
    let compressed = compress_tape(tape, vars, scorer, token_embeddings, spec, prompt_len)?;
    let (embeddings, alphas) = route_scores_tape(tape, mode, &compressed)?;
    let (hidden, final_states) = forward_sequence(tape, vars, &embeddings, &alphas, form)?;
    let logits = lm_logits(vars, &hidden)?;
    Ok(TwoStageOutput {
        hidden,
        logits,
        compressed,
        final_states,
    })
}

fn route_scores_tape(
    tape: &Tape,
    mode: AdaptationMode,
    compressed: &CompressedTape,
) -> Result<(Value, Vec<Option<Value>>)> {
    let len = compressed.embeddings.shape()[0];
    match mode {
        AdaptationMode::None => Ok((compressed.embeddings.clone(), vec![None; len])),
        AdaptationMode::SelectiveDelta => {
            let alphas = compressed
                .importance
                .iter()
                .map(|c| c.as_ref().map(|c| c.relu()))
                .collect();
            Ok((compressed.embeddings.clone(), alphas))
        }
        AdaptationMode::Multiplicative => {
            if compressed.selected.is_empty() {
                return Ok((compressed.embeddings.clone(), vec![None; len]));
            }
            let mut rows = Vec::with_capacity(len);
            for t in 0..len {
                let row = compressed.embeddings.row(t)?;
                match &compressed.importance[t] {
                    Some(c) => rows.push(row.mul_scalar(&c.relu())?),
                    None => rows.push(row),
                }
            }
            Ok((tape.stack_rows(&rows)?, vec![None; len]))
        }
    }
}

/// Tape-free mirror of the two-stage pipeline, for evaluation and
/// benchmarks.
pub struct Stage2Input {
    pub embeddings: Tensor,
    pub alphas: Vec<Option<f64>>,
    pub compressed: CompressedPrompt,
}

/// Run stage 1 and derive the stage-2 inputs without forwarding them,
/// so a decode session can consume them step by step.
pub fn prepare_stage2(
    model: &Model,
    scorer: &ScorerParams,
    token_embeddings: &Tensor,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    prompt_len: usize,
) -> Result<Stage2Input> {
    let compressed = compress(model, scorer, token_embeddings, spec, prompt_len)?;
    let len = compressed.embeddings.shape()[0];
    let (embeddings, alphas) = match mode {
        AdaptationMode::None => (compressed.embeddings.clone(), vec![None; len]),
        AdaptationMode::SelectiveDelta => {
            let alphas = compressed
                .importance
                .iter()
                .map(|c| c.map(|v| v.max(0.0)))
                .collect();
            (compressed.embeddings.clone(), alphas)
        }
        AdaptationMode::Multiplicative => {
            if compressed.selected.is_empty() {
                (compressed.embeddings.clone(), vec![None; len])
            } else {
                let mut rows = Vec::with_capacity(len);
                for t in 0..len {
                    let row = compressed.embeddings.row(t)?;
                    match compressed.importance[t] {
                        Some(c) => rows.push(row.scale(c.max(0.0))),
                        None => rows.push(row),
                    }
                }
                let refs: Vec<&Tensor> = rows.iter().collect();
                (Tensor::stack_rows(&refs)?, vec![None; len])
            }
        }
    };
    Ok(Stage2Input {
        embeddings,
        alphas,
        compressed,
    })
}

pub struct TwoStageInferOutput {
    pub hidden: Tensor,
    pub logits_last: Tensor,
    pub stage2: Stage2Input,
    pub final_state: ScanState,
}

/// Full two-stage forward without a tape; returns the stage-2 hidden
/// states and the logits of the final position.
pub fn two_stage_infer(
    model: &Model,
    scorer: &ScorerParams,
    token_embeddings: &Tensor,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
    prompt_len: usize,
) -> Result<TwoStageInferOutput> {
    let stage2 = prepare_stage2(model, scorer, token_embeddings, spec, mode, prompt_len)?;
    let (hidden, final_state) =
        forward_sequence_infer(model, &stage2.embeddings, &stage2.alphas, form)?;
    let last = hidden.row(hidden.shape()[0] - 1)?;
    let logits_last = crate::ssm::logits_row_infer(model, &last)?;
    Ok(TwoStageInferOutput {
        hidden,
        logits_last,
        stage2,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::Placement;
    use crate::ssm::{embed_tokens, scan_step, ModelConfig};

    const LN_2: f64 = std::f64::consts::LN_2;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            intermediate_size: 10,
            state_size: 4,
            vocab_size: 16,
            tied_lm_head: false,
        }
    }

    fn rigged_unit_scorer(hidden: usize) -> ScorerParams {
        // zero maps with equal biases: q = k_i exactly, so every score
        // is exactly 1.0
        let mut s = ScorerParams::identity(hidden);
        s.query_w = Tensor::zeros(&[hidden, hidden]);
        s.key_w = Tensor::zeros(&[hidden, hidden]);
        s.query_b = Tensor::filled(&[hidden], 0.5);
        s.key_b = Tensor::filled(&[hidden], 0.5);
        s
    }

    #[test]
    fn nonpositive_score_with_zero_theta_forces_ln2() {
        let model = Model::init(&config(), 1).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let h = tape.leaf(Tensor::from_vec(vec![8], (0..8).map(|i| 0.1 * i as f64).collect()));
        for c in [-0.8, -0.1, 0.0] {
            let cos = tape.scalar(c);
            let (delta, _) = apply(
                AdaptationMode::SelectiveDelta,
                DeltaForm::Offset,
                &vars.layers[0],
                &h,
                Some(&cos),
            )
            .unwrap();
            for &v in delta.value().data() {
                assert!((v - LN_2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_score_with_zero_theta_matches_vanilla() {
        let model = Model::init(&config(), 2).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let h = tape.leaf(Tensor::from_vec(vec![8], (0..8).map(|i| (i as f64).sin()).collect()));
        let one = tape.scalar(1.0);
        let (adapted, _) = apply(
            AdaptationMode::SelectiveDelta,
            DeltaForm::Offset,
            &vars.layers[0],
            &h,
            Some(&one),
        )
        .unwrap();
        let (vanilla, _) = apply(
            AdaptationMode::SelectiveDelta,
            DeltaForm::Offset,
            &vars.layers[0],
            &h,
            None,
        )
        .unwrap();
        for (a, b) in adapted.value().data().iter().zip(vanilla.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplicative_zero_score_leaves_only_state_decay() {
        let model = Model::init(&config(), 3).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let h = tape.leaf(Tensor::from_vec(vec![8], (0..8).map(|i| 0.2 * i as f64 - 0.5).collect()));
        let zero = tape.scalar(0.0);
        let (_, h_eff) = apply(
            AdaptationMode::Multiplicative,
            DeltaForm::Offset,
            &vars.layers[0],
            &h,
            Some(&zero),
        )
        .unwrap();
        assert!(h_eff.value().data().iter().all(|&v| v == 0.0));

        let state = tape.leaf(Tensor::from_vec(
            vec![10, 4],
            (0..40).map(|i| (i as f64 * 0.13).cos()).collect(),
        ));
        let (next, _) = scan_step(&state, &vars.layers[0], &h_eff, None).unwrap();
        // with h' = proj3(0) = 0 the injection vanishes: S ← Â ⊗ S
        let delta = crate::ssm::compute_delta(&vars.layers[0], &h_eff, None).unwrap();
        let a_neg = vars.layers[0].a_log.exp().scale(-1.0);
        let a_bar = a_neg.mul_rows(&delta).unwrap().exp();
        let want = a_bar.mul(&state).unwrap().value();
        assert_eq!(next.value(), want);
    }

    #[test]
    fn score_in_mode_none_is_a_contract_error() {
        let model = Model::init(&config(), 4).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let h = tape.leaf(Tensor::zeros(&[8]));
        let c = tape.scalar(0.5);
        let err = apply(
            AdaptationMode::None,
            DeltaForm::Offset,
            &vars.layers[0],
            &h,
            Some(&c),
        );
        assert!(err.is_err());
    }

    #[test]
    fn gating_monotone_in_score_on_positive_channels() {
        let model = Model::init(&config(), 5).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let h = tape.leaf(Tensor::from_vec(vec![8], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()));
        let raw = h
            .vecmat(&vars.layers[0].proj1_w)
            .unwrap()
            .add(&vars.layers[0].proj1_b)
            .unwrap()
            .value();
        let mut prev: Option<Tensor> = None;
        for step in 0..=10 {
            let c = tape.scalar(step as f64 / 10.0);
            let (delta, _) = apply(
                AdaptationMode::SelectiveDelta,
                DeltaForm::Offset,
                &vars.layers[0],
                &h,
                Some(&c),
            )
            .unwrap();
            let d = delta.value();
            if let Some(p) = prev {
                for ch in 0..8 {
                    if raw.data()[ch] > 0.0 {
                        assert!(
                            d.data()[ch] >= p.data()[ch] - 1e-15,
                            "channel {ch} not monotone"
                        );
                    }
                }
            }
            prev = Some(d);
        }
    }

    #[test]
    fn two_stage_with_empty_window_is_bitwise_baseline() {
        let model = Model::init(&config(), 6).unwrap();
        let scorer = ScorerParams::init(8, 7);
        let tokens: Vec<u32> = vec![3, 1, 9, 14, 2, 2, 7];
        let spec = CompressionSpec::new(0.0, 0.0, 0.5);

        let tape = Tape::new();
        let vars = model.bind(&tape);
        let svars = scorer.bind(&tape);
        let emb = embed_tokens(&tape, &vars, &tokens).unwrap();
        let out = two_stage_forward(
            &tape,
            &vars,
            &svars,
            &emb,
            &spec,
            AdaptationMode::SelectiveDelta,
            DeltaForm::Offset,
            tokens.len(),
        )
        .unwrap();
        let (baseline, _) =
            forward_sequence(&tape, &vars, &emb, &vec![None; 7], DeltaForm::Offset).unwrap();
        let baseline_logits = lm_logits(&vars, &baseline).unwrap();
        assert_eq!(out.logits.value(), baseline_logits.value());

        // and on the inference path
        let emb_plain = model.embed(&tokens).unwrap();
        let infer = two_stage_infer(
            &model,
            &scorer,
            &emb_plain,
            &spec,
            AdaptationMode::SelectiveDelta,
            DeltaForm::Offset,
            tokens.len(),
        )
        .unwrap();
        let (plain_hidden, _) =
            forward_sequence_infer(&model, &emb_plain, &vec![None; 7], DeltaForm::Offset).unwrap();
        assert_eq!(infer.hidden, plain_hidden);
    }

    #[test]
    fn rigged_unit_scores_reduce_selective_delta_to_mode_none() {
        let model = Model::init(&config(), 8).unwrap();
        let scorer = rigged_unit_scorer(8);
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 16) as u32).collect();
        let spec = CompressionSpec::new(0.0, 0.5, 0.4);

        let run = |mode: AdaptationMode| {
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let svars = scorer.bind(&tape);
            let emb = embed_tokens(&tape, &vars, &tokens).unwrap();
            two_stage_forward(&tape, &vars, &svars, &emb, &spec, mode, DeltaForm::Offset, 12)
                .unwrap()
                .logits
                .value()
        };
        let with_adaptation = run(AdaptationMode::SelectiveDelta);
        let without = run(AdaptationMode::None);
        for (a, b) in with_adaptation.data().iter().zip(without.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn stage2_length_for_long_prompt_hyperparameters() {
        // s = 0, p = 0.18, ρ = 0.009 on a 300-token prompt: window
        // [1, 54], keep 1, stage-2 length 247
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 4,
            intermediate_size: 4,
            state_size: 2,
            vocab_size: 8,
            tied_lm_head: false,
        };
        let model = Model::init(&cfg, 9).unwrap();
        let scorer = ScorerParams::init(4, 10);
        let tokens: Vec<u32> = (0..300).map(|i| (i % 8) as u32).collect();
        let emb = model.embed(&tokens).unwrap();
        let spec = CompressionSpec::new(0.0, 0.18, 0.009);
        let out = prepare_stage2(
            &model,
            &scorer,
            &emb,
            &spec,
            AdaptationMode::SelectiveDelta,
            300,
        )
        .unwrap();
        let w = out.compressed.window.unwrap();
        assert_eq!((w.start, w.end, w.keep), (1, 54, 1));
        assert_eq!(out.embeddings.shape()[0], 300 - 54 + 1);
    }

    #[test]
    fn tape_and_infer_two_stage_agree_bitwise() {
        let model = Model::init(&config(), 11).unwrap();
        let scorer = ScorerParams::init(8, 12);
        let tokens: Vec<u32> = (0..15).map(|i| (i * 3 % 16) as u32).collect();
        let mut spec = CompressionSpec::new(0.0, 0.4, 0.3);
        for (mode, placement) in [
            (AdaptationMode::SelectiveDelta, Placement::Standard),
            (AdaptationMode::Multiplicative, Placement::Standard),
            (AdaptationMode::None, Placement::Standard),
            (AdaptationMode::SelectiveDelta, Placement::SpecialAppend),
        ] {
            spec.placement = placement;
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let svars = scorer.bind(&tape);
            let emb_t = embed_tokens(&tape, &vars, &tokens).unwrap();
            let taped = two_stage_forward(
                &tape,
                &vars,
                &svars,
                &emb_t,
                &spec,
                mode,
                DeltaForm::Offset,
                15,
            )
            .unwrap();
            let emb = model.embed(&tokens).unwrap();
            let inferred =
                two_stage_infer(&model, &scorer, &emb, &spec, mode, DeltaForm::Offset, 15).unwrap();
            assert_eq!(
                taped.hidden.value(),
                inferred.hidden,
                "mode {mode:?} placement {placement:?}"
            );
        }
    }
}
