//! Causal-LM fine-tuning of the two-stage pipeline on synthetic tasks:
//! AdamW over everything, per-batch sampling of the compression window,
//! optional scaling of the gradients that flow through the importance
//! scores, and finite-difference verification of the whole lot.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::adaptation::{two_stage_forward, two_stage_infer, AdaptationMode};
use crate::compression::{CompressionSpec, ScorerParams};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, gradcheck as fd, Tape, Tensor, Value};
use crate::ssm::{embed_tokens, DeltaForm, Model, ModelConfig};
use crate::tasks::TaskInstance;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Linear,
    #[default]
    Cosine,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_p_range() -> [f64; 2] {
    [0.1, 0.3]
}
fn default_rho_range() -> [f64; 2] {
    [0.05, 0.2]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Scale gradients reaching each importance score by the
    /// (rectified) score itself before they continue into the scorer.
    #[serde(default = "default_true")]
    pub grad_scale_scores: bool,
    /// Per-batch sampling range for the window length `p` (start is
    /// fixed at 0 during training).
    #[serde(default = "default_p_range")]
    pub p_range: [f64; 2],
    /// Per-batch sampling range for the keep ratio `rho`.
    #[serde(default = "default_rho_range")]
    pub rho_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("training.learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("training.epochs and batch_size must be positive"));
        }
        for (name, r) in [("p_range", self.p_range), ("rho_range", self.rho_range)] {
            if !(0.0..=1.0).contains(&r[0]) || !(0.0..=1.0).contains(&r[1]) || r[0] > r[1] {
                return Err(Error::config(format!(
                    "training.{name} = [{}, {}] must satisfy 0 <= low <= high <= 1",
                    r[0], r[1]
                )));
            }
        }
        Ok(())
    }
}

/// One metrics record per optimizer step, streamed as JSONL.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub p_sampled: f64,
    pub rho_sampled: f64,
    pub seed: u64,
}

pub fn lr_at(schedule: LrSchedule, base: f64, step: usize, total_steps: usize) -> f64 {
    let t = step as f64 / total_steps.max(1) as f64;
    match schedule {
        LrSchedule::Linear => base * (1.0 - t),
        LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
    }
}

// ── Optimizer ───────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Moment buffers are keyed by the
/// parameter order used at construction; callers must keep that order.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[(String, &Tensor)]) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Vectors (biases, Θ) and the state-dynamics tensor `a_log` are
    /// exempt from weight decay; decaying them distorts the recurrence
    /// rather than regularizing capacity.
    fn decays(name: &str, tensor: &Tensor) -> bool {
        tensor.shape().len() > 1 && !name.ends_with("a_log")
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, theta)) in params.iter_mut().enumerate() {
            let wd = if Self::decays(name, theta) { self.weight_decay } else { 0.0 };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let t = theta.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                t[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * t[j]);
            }
        }
    }
}

// ── Loss construction ───────────────────────────────────────────────

/// Causal-LM inputs for an instance: the model consumes
/// `prompt ++ target[..T-1]` and is supervised on the target tokens.
pub fn lm_inputs(inst: &TaskInstance) -> Result<(Vec<u32>, usize)> {
    if inst.target_tokens.is_empty() {
        return Err(Error::contract("instance has an empty target"));
    }
    let mut input = inst.prompt_tokens.clone();
    input.extend(&inst.target_tokens[..inst.target_tokens.len() - 1]);
    Ok((input, inst.prompt_tokens.len()))
}

/// Supervision vector for a spliced sequence of length `n`: the last
/// `target.len()` positions predict the target tokens.
fn tail_targets(n: usize, target: &[u32]) -> Vec<Option<usize>> {
    let mut out = vec![None; n - target.len()];
    out.extend(target.iter().map(|&t| Some(t as usize)));
    out
}

/// Mean cross-entropy of one instance on the tape (both stages).
/// Returns the loss node and the importance-score nodes.
pub fn instance_loss_tape(
    tape: &Tape,
    model: &Model,
    scorer: &ScorerParams,
    inst: &TaskInstance,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
) -> Result<(Value, Vec<Option<Value>>, crate::ssm::ModelVars, crate::compression::ScorerVars)> {
    let (input, prompt_len) = lm_inputs(inst)?;
    let vars = model.bind(tape);
    let svars = scorer.bind(tape);
    let emb = embed_tokens(tape, &vars, &input)?;
    let out = two_stage_forward(tape, &vars, &svars, &emb, spec, mode, form, prompt_len)?;
    let n = out.logits.shape()[0];
    let targets = tail_targets(n, &inst.target_tokens);
    let loss = tape.cross_entropy(&out.logits, &targets)?;
    Ok((loss, out.compressed.importance, vars, svars))
}

/// Same loss along the tape-free route (bit-identical values); the
/// finite-difference checks re-evaluate this cheaply.
pub fn instance_loss_infer(
    model: &Model,
    scorer: &ScorerParams,
    inst: &TaskInstance,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
) -> Result<f64> {
    let (input, prompt_len) = lm_inputs(inst)?;
    let emb = model.embed(&input)?;
    let out = two_stage_infer(model, scorer, &emb, spec, mode, form, prompt_len)?;
    let n = out.hidden.shape()[0];
    let t_len = inst.target_tokens.len();
    let mut total = 0.0;
    for (k, &tok) in inst.target_tokens.iter().enumerate() {
        let h = out.hidden.row(n - t_len + k)?;
        let logits = crate::ssm::logits_row_infer(model, &h)?;
        total += ce_row(logits.data(), tok as usize);
    }
    Ok(total / t_len as f64)
}

fn ce_row(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Register the gradient hooks that implement proportional score
/// scaling: the gradient accumulated at each score node is multiplied
/// by `relu(score)` (treated as a constant) before it continues into
/// the query/key parameters.
pub fn scale_score_gradients(tape: &Tape, importance: &[Option<Value>]) {
    for node in importance.iter().flatten() {
        tape.scale_grad(node, node.item().max(0.0));
    }
}

// ── Training loop ───────────────────────────────────────────────────

fn combined_grads(
    tape: &Tape,
    vars: &crate::ssm::ModelVars,
    svars: &crate::compression::ScorerVars,
) -> Vec<Tensor> {
    vars.named()
        .iter()
        .chain(svars.named().iter())
        .map(|(_, v)| tape.grad(v))
        .collect()
}

/// One optimizer step over a batch: mean loss, summed gradients,
/// AdamW update.
pub fn train_step(
    model: &mut Model,
    scorer: &mut ScorerParams,
    opt: &mut AdamW,
    batch: &[&TaskInstance],
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
    lr: f64,
    grad_scale_scores: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("train_step: empty batch"));
    }
    let mut grad_acc: Option<Vec<Tensor>> = None;
    let mut loss_sum = 0.0;
    for inst in batch {
        let tape = Tape::new();
        let (loss, importance, vars, svars) =
            instance_loss_tape(&tape, model, scorer, inst, spec, mode, form)?;
        if grad_scale_scores {
            scale_score_gradients(&tape, &importance);
        }
        tape.backward(&loss)?;
        loss_sum += loss.item();
        let grads = combined_grads(&tape, &vars, &svars);
        grad_acc = Some(match grad_acc {
            None => grads,
            Some(acc) => acc
                .iter()
                .zip(&grads)
                .map(|(a, g)| a.add(g).expect("gradient shapes are fixed"))
                .collect(),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let grads: Vec<Tensor> = grad_acc.unwrap().iter().map(|g| g.scale(scale)).collect();

    let mut params: Vec<(String, &mut Tensor)> = model.named_tensors_mut();
    params.extend(scorer.named_tensors_mut());
    opt.step(&mut params, &grads, lr);
    Ok(loss_sum * scale)
}

/// Full training run: shuffles per epoch, samples `(p, rho)` per batch
/// with the window start pinned to 0, steps AdamW under the schedule,
/// and reports one metrics record per step.
pub fn train(
    model: &mut Model,
    scorer: &mut ScorerParams,
    data: &[TaskInstance],
    tcfg: &TrainConfig,
    base_spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("train: empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let steps_per_epoch = data.len().div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let mut opt = {
        let mut params = model.named_tensors();
        params.extend(scorer.named_tensors());
        AdamW::new(&params)
    };

    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _ in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(tcfg.batch_size) {
            let p = rng.gen_range(tcfg.p_range[0]..=tcfg.p_range[1]);
            let rho = rng.gen_range(tcfg.rho_range[0]..=tcfg.rho_range[1]);
            let mut spec = base_spec.clone();
            spec.rel_start = 0.0;
            spec.rel_len = p;
            spec.ratio = rho.max(f64::MIN_POSITIVE);
            spec.seed = rng.gen();
            let lr = lr_at(tcfg.lr_schedule, tcfg.learning_rate, step, total_steps);
            let batch: Vec<&TaskInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = train_step(
                model,
                scorer,
                &mut opt,
                &batch,
                &spec,
                mode,
                form,
                lr,
                tcfg.grad_scale_scores,
            )?;
            let record = StepMetrics {
                step,
                loss,
                lr,
                p_sampled: p,
                rho_sampled: rho,
                seed: tcfg.seed,
            };
            on_step(&record);
            metrics.push(record);
            step += 1;
        }
    }
    Ok(metrics)
}

// ── Checkpointing ───────────────────────────────────────────────────

pub fn save_checkpoint(
    model: &Model,
    scorer: &ScorerParams,
    path: &Path,
    config: Option<&Json>,
) -> Result<()> {
    let mut entries = model.named_tensors();
    entries.extend(scorer.named_tensors());
    checkpoint::save_tensors(path, &entries, config)
}

/// Rebuild a model/scorer pair from a container, validating every name
/// and shape against the expected configuration.
pub fn load_checkpoint(
    path: &Path,
    config: &ModelConfig,
) -> Result<(Model, ScorerParams, Option<Json>)> {
    let (tensors, cfg) = checkpoint::load_tensors(path)?;
    let mut model = Model::init(config, 0)?;
    let mut scorer = ScorerParams::init(config.hidden_size, 0);
    let origin = path.display().to_string();

    let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut expected = model.named_tensors_mut();
    expected.extend(scorer.named_tensors_mut());
    for (name, slot) in expected {
        let loaded = map.remove(&name).ok_or_else(|| {
            Error::checkpoint(origin.clone(), format!("missing tensor {name}"))
        })?;
        if loaded.shape() != slot.shape() {
            return Err(Error::checkpoint(
                origin,
                format!(
                    "tensor {name}: shape {:?} in file, expected {:?}",
                    loaded.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = loaded;
    }
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::checkpoint(origin, format!("unexpected tensor {name}")));
    }
    Ok((model, scorer, cfg))
}

// ── Finite-difference verification ──────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRow {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check every trainable parameter group, and the importance scores,
/// against central finite differences of the tape-free loss.
pub fn gradcheck(
    config: &ModelConfig,
    spec: &CompressionSpec,
    mode: AdaptationMode,
    form: DeltaForm,
    seed: u64,
    entries_per_group: usize,
    tolerance: f64,
) -> Result<Vec<GradCheckRow>> {
    let mut model = Model::init(config, seed)?;
    let mut scorer = ScorerParams::init(config.hidden_size, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let inst = crate::tasks::gen_passkey(&mut rng, 20, 3, 0.4, config.vocab_size)?;

    // analytic gradients from one tape pass (no score scaling: that is
    // a deliberate modification of the true gradient)
    let tape = Tape::new();
    let (loss, importance, vars, svars) =
        instance_loss_tape(&tape, &model, &scorer, &inst, spec, mode, form)?;
    tape.backward(&loss)?;
    let mut analytic: Vec<(String, Tensor)> = vars
        .named()
        .iter()
        .chain(svars.named().iter())
        .map(|(n, v)| (n.clone(), tape.grad(v)))
        .collect();
    analytic.sort_by(|a, b| a.0.cmp(&b.0));
    let cos_grads: Vec<f64> = importance
        .iter()
        .flatten()
        .map(|v| tape.grad(v).item())
        .collect();
    let cos_values: Vec<f64> = importance.iter().flatten().map(|v| v.item()).collect();

    let mut rows = Vec::new();
    for (name, grad) in &analytic {
        let total = grad.len();
        let idxs: Vec<usize> = if total <= entries_per_group {
            (0..total).collect()
        } else {
            (0..entries_per_group).map(|i| i * total / entries_per_group).collect()
        };
        let gmax = grad.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // central differences of an O(1) loss carry ~1e-10 absolute
        // noise at step 1e-6; the 1e-5 floor keeps that noise out of the
        // relative error while leaving gradient-proportional errors visible
        let floor = (1e-3 * gmax).max(1e-5);
        let mut worst = 0.0f64;
        for &idx in &idxs {
            let read = |m: &mut Model, s: &mut ScorerParams| -> f64 {
                let mut named = m.named_tensors_mut();
                named.extend(s.named_tensors_mut());
                named.into_iter().find(|(n, _)| n == name).unwrap().1.data()[idx]
            };
            let write = |m: &mut Model, s: &mut ScorerParams, v: f64| {
                let mut named = m.named_tensors_mut();
                named.extend(s.named_tensors_mut());
                named.into_iter().find(|(n, _)| n == name).unwrap().1.data_mut()[idx] = v;
            };
            let orig = read(&mut model, &mut scorer);
            write(&mut model, &mut scorer, orig + fd::FD_STEP);
            let fp = instance_loss_infer(&model, &scorer, &inst, spec, mode, form)?;
            write(&mut model, &mut scorer, orig - fd::FD_STEP);
            let fm = instance_loss_infer(&model, &scorer, &inst, spec, mode, form)?;
            write(&mut model, &mut scorer, orig);
            let fd_grad = (fp - fm) / (2.0 * fd::FD_STEP);
            worst = worst.max(fd::rel_err(fd_grad, grad.data()[idx], floor));
        }
        rows.push(GradCheckRow {
            group: name.clone(),
            checked: idxs.len(),
            max_rel_err: worst,
            tolerance,
            pass: worst < tolerance,
        });
    }

    // the scores themselves: hold the spliced prompt fixed and perturb
    // each score's contribution to the second stage
    if !cos_values.is_empty() && mode == AdaptationMode::SelectiveDelta {
        let (input, prompt_len) = lm_inputs(&inst)?;
        let emb = model.embed(&input)?;
        let stage2 =
            crate::adaptation::prepare_stage2(&model, &scorer, &emb, spec, mode, prompt_len)?;
        let slots: Vec<usize> = stage2
            .compressed
            .importance
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|_| i))
            .collect();
        let loss_of = |cos: &[f64]| -> Result<f64> {
            let mut alphas = vec![None; stage2.embeddings.shape()[0]];
            for (slot, c) in slots.iter().zip(cos) {
                alphas[*slot] = Some(c.max(0.0));
            }
            let (hidden, _) =
                crate::ssm::forward_sequence_infer(&model, &stage2.embeddings, &alphas, form)?;
            let n = hidden.shape()[0];
            let t_len = inst.target_tokens.len();
            let mut total = 0.0;
            for (k, &tok) in inst.target_tokens.iter().enumerate() {
                let h = hidden.row(n - t_len + k)?;
                let logits = crate::ssm::logits_row_infer(&model, &h)?;
                total += ce_row(logits.data(), tok as usize);
            }
            Ok(total / t_len as f64)
        };
        let gmax = cos_grads.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (1e-3 * gmax).max(1e-5);
        let mut worst = 0.0f64;
        let mut nonzero = false;
        let mut cos = cos_values.clone();
        for i in 0..cos.len() {
            let orig = cos[i];
            cos[i] = orig + fd::FD_STEP;
            let fp = loss_of(&cos)?;
            cos[i] = orig - fd::FD_STEP;
            let fm = loss_of(&cos)?;
            cos[i] = orig;
            let fd_grad = (fp - fm) / (2.0 * fd::FD_STEP);
            worst = worst.max(fd::rel_err(fd_grad, cos_grads[i], floor));
            if cos_grads[i].abs() > 1e-12 {
                nonzero = true;
            }
        }
        rows.push(GradCheckRow {
            group: "cos_scores".into(),
            checked: cos.len(),
            max_rel_err: worst,
            tolerance,
            pass: worst < tolerance && nonzero,
        });
    }

    Ok(rows)
}
