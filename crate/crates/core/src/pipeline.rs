//! A runnable bundle of model + scorer + compression settings: the
//! object that evaluation, sweeps, and benchmarks drive.

use crate::adaptation::{prepare_stage2, AdaptationMode};
use crate::compression::{CompressionSpec, ScorerParams};
use crate::error::Result;
use crate::ssm::{decode_greedy, DeltaForm, Model, ScanState};
use crate::tasks::Decoder;

#[derive(Clone)]
pub struct Pipeline {
    pub model: Model,
    pub scorer: ScorerParams,
    pub spec: CompressionSpec,
    pub mode: AdaptationMode,
    pub form: DeltaForm,
}

impl Pipeline {
    /// Single-pass baseline: an empty window and no adaptation.
    pub fn baseline(model: Model) -> Pipeline {
        let hidden = model.config.hidden_size;
        Pipeline {
            model,
            scorer: ScorerParams::identity(hidden),
            spec: CompressionSpec::new(0.0, 0.0, 1.0),
            mode: AdaptationMode::None,
            form: DeltaForm::Offset,
        }
    }

    pub fn two_stage(
        model: Model,
        scorer: ScorerParams,
        spec: CompressionSpec,
        mode: AdaptationMode,
        form: DeltaForm,
    ) -> Pipeline {
        Pipeline {
            model,
            scorer,
            spec,
            mode,
            form,
        }
    }

    /// Whether this pipeline actually runs a compression stage.
    pub fn compresses(&self) -> bool {
        self.spec.rel_len > 0.0 || self.spec.placement == crate::compression::Placement::SpecialAppend
    }

    /// Persistent (model-owned) bytes: parameters, plus the scorer when
    /// the pipeline uses one, plus one recurrent state.
    pub fn logical_bytes(&self) -> usize {
        let scorer = if self.compresses() { self.scorer.param_bytes() } else { 0 };
        self.model.param_bytes() + scorer + ScanState::new(&self.model.config).state_bytes()
    }

    /// Greedy generation through both stages; returns the tokens and
    /// the final recurrent state.
    pub fn generate_with_state(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
    ) -> Result<(Vec<u32>, ScanState)> {
        let emb = self.model.embed(prompt)?;
        let stage2 = prepare_stage2(
            &self.model,
            &self.scorer,
            &emb,
            &self.spec,
            self.mode,
            prompt.len(),
        )?;
        decode_greedy(
            &self.model,
            &stage2.embeddings,
            &stage2.alphas,
            self.form,
            max_new_tokens,
        )
    }

    /// Stage-wise timing for the benchmark: returns (stage-1 encode ms,
    /// stage-2 encode ms, decode ms, generated tokens, state bytes).
    /// For a non-compressing pipeline stage 1 is the only encode and
    /// stage 2 is zero.
    pub fn timed_generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
    ) -> Result<(f64, f64, f64, Vec<u32>, usize)> {
        use std::time::Instant;
        let emb = self.model.embed(prompt)?;

        let t0 = Instant::now();
        let stage2 = prepare_stage2(
            &self.model,
            &self.scorer,
            &emb,
            &self.spec,
            self.mode,
            prompt.len(),
        )?;
        let prep_ms = t0.elapsed().as_secs_f64() * 1e3;

        let mut session = crate::ssm::DecodeSession::new(&self.model);
        let t1 = Instant::now();
        session.consume(&stage2.embeddings, &stage2.alphas, self.form)?;
        let encode_ms = t1.elapsed().as_secs_f64() * 1e3;

        let t2 = Instant::now();
        let mut generated = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            generated.push(session.greedy_next(self.form)?);
        }
        let decode_ms = t2.elapsed().as_secs_f64() * 1e3;

        let state_bytes = session.state().state_bytes();
        // a non-compressing pipeline runs no first-stage forward: its
        // prep time is splice bookkeeping, folded into the encode
        let (stage1_ms, stage2_ms) = if self.compresses() {
            (prep_ms, encode_ms)
        } else {
            (prep_ms + encode_ms, 0.0)
        };
        Ok((stage1_ms, stage2_ms, decode_ms, generated, state_bytes))
    }
}

impl Decoder for Pipeline {
    fn generate(&self, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
        Ok(self.generate_with_state(prompt, max_new_tokens)?.0)
    }
}
