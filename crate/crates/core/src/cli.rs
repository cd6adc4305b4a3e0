//! Subcommand implementations behind the `remamba` binary. Every
//! artifact embeds the resolved configuration (and the arguments that
//! produced it), so any output file is enough to re-run its job.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

use crate::bench::{emit_report, run_bench};
use crate::compression::{Placement, ScorerParams, Strategy};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::runconfig::{RunConfig, TaskKind};
use crate::ssm::Model;
use crate::tasks::{evaluate, gen_assoc_recall, gen_passkey, TaskInstance};
use crate::training::{gradcheck, load_checkpoint, save_checkpoint, train};

// deterministic sub-streams of the run seed
const STREAM_TRAIN_CORPUS: u64 = 1;
const STREAM_EVAL_CORPUS: u64 = 2;
const SCORER_SEED_XOR: u64 = 0x5c0_4e4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn provenance(config: &RunConfig, command: &str, args: Json) -> Json {
    json!({ "command": command, "args": args, "config": config.to_json() })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn gen_instance(
    rng: &mut ChaCha8Rng,
    cfg: &RunConfig,
    context_length: usize,
) -> Result<TaskInstance> {
    match cfg.tasks.task {
        TaskKind::Passkey => {
            let pos = rng.gen_range(0.0..=1.0);
            gen_passkey(rng, context_length, cfg.tasks.key_length, pos, cfg.model.vocab_size)
        }
        TaskKind::AssocRecall => {
            gen_assoc_recall(rng, cfg.tasks.n_pairs, context_length, cfg.model.vocab_size)
        }
    }
}

/// Training corpus: lengths drawn uniformly from `tasks.train_lengths`.
pub fn build_train_corpus(cfg: &RunConfig, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = rng_for(seed, STREAM_TRAIN_CORPUS);
    (0..cfg.tasks.train_instances)
        .map(|_| {
            let len = cfg.tasks.train_lengths[rng.gen_range(0..cfg.tasks.train_lengths.len())];
            gen_instance(&mut rng, cfg, len)
        })
        .collect()
}

/// Evaluation corpus: `tasks.eval_instances` per requested length, on a
/// stream independent of training and of the pipeline under test.
pub fn build_eval_corpus(cfg: &RunConfig, seed: u64, lengths: &[usize]) -> Result<Vec<TaskInstance>> {
    let mut rng = rng_for(seed, STREAM_EVAL_CORPUS);
    let mut corpus = Vec::with_capacity(lengths.len() * cfg.tasks.eval_instances);
    for &len in lengths {
        for _ in 0..cfg.tasks.eval_instances {
            corpus.push(gen_instance(&mut rng, cfg, len)?);
        }
    }
    Ok(corpus)
}

pub fn init_model_and_scorer(cfg: &RunConfig, seed: u64) -> Result<(Model, ScorerParams)> {
    Ok((
        Model::init(&cfg.model, seed)?,
        ScorerParams::init(cfg.model.hidden_size, seed ^ SCORER_SEED_XOR),
    ))
}

fn load_or_init(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    random_init: bool,
    seed: u64,
) -> Result<(Model, ScorerParams)> {
    match checkpoint {
        Some(path) => {
            let (model, scorer, _) = load_checkpoint(path, &cfg.model)?;
            Ok((model, scorer))
        }
        None if random_init => init_model_and_scorer(cfg, seed),
        None => Err(Error::contract(
            "this command needs a trained checkpoint: pass --checkpoint <path> or opt into --random-init",
        )),
    }
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.effective_seed();
    let corpus = build_train_corpus(cfg, seed)?;
    let (mut model, mut scorer) = init_model_and_scorer(cfg, seed)?;

    let metrics_path = cfg.output_dir.join("metrics.jsonl");
    let file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let header = provenance(cfg, "train", json!({ "seed": seed }));
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let mut io_err = None;
    let metrics = train(
        &mut model,
        &mut scorer,
        &corpus,
        &cfg.training,
        &cfg.compression,
        cfg.adaptation,
        cfg.delta_form(),
        |m| {
            if let Err(e) = writeln!(out, "{}", serde_json::to_string(m).unwrap()) {
                io_err.get_or_insert(e);
            }
        },
    )?;
    drop(out);
    if let Some(e) = io_err {
        return Err(Error::io(metrics_path.display().to_string(), e));
    }

    let ckpt_path = cfg.output_dir.join("checkpoint.bin");
    save_checkpoint(&model, &scorer, &ckpt_path, Some(&provenance(cfg, "train", json!({"seed": seed}))))?;
    Ok(TrainArtifacts {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        final_loss: metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
    })
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Default)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub random_init: bool,
    pub lengths: Option<Vec<usize>>,
    pub strategy: Option<Strategy>,
    pub placement: Option<Placement>,
}

pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.effective_seed();
    let (model, scorer) = load_or_init(cfg, opts.checkpoint.as_deref(), opts.random_init, seed)?;

    let mut spec = cfg.compression.clone();
    if let Some(s) = opts.strategy {
        spec.strategy = s;
    }
    if let Some(p) = opts.placement {
        spec.placement = p;
    }
    let lengths = opts.lengths.clone().unwrap_or_else(|| cfg.tasks.eval_lengths.clone());
    let corpus = build_eval_corpus(cfg, seed, &lengths)?;
    let pipeline = Pipeline::two_stage(model, scorer, spec.clone(), cfg.adaptation, cfg.delta_form());
    let report = evaluate(&pipeline, &corpus)?;

    let args = json!({
        "seed": seed,
        "lengths": lengths,
        "strategy": spec.strategy,
        "placement": spec.placement,
        "checkpoint": opts.checkpoint.as_ref().map(|p| p.display().to_string()),
        "random_init": opts.random_init,
    });
    let path = cfg.output_dir.join("eval_report.csv");
    write_file(&path, &report.to_csv(Some(&provenance(cfg, "eval", args))))?;
    Ok(path)
}

// ── sweep ───────────────────────────────────────────────────────────

pub struct SweepOptions {
    pub p_values: Vec<f64>,
    pub rho_values: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub random_init: bool,
    pub length: Option<usize>,
}

/// Accuracy grid over (p, ρ) at one context length; the corpus is
/// shared across all grid cells.
pub fn cmd_sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<PathBuf> {
    cfg.validate()?;
    if opts.p_values.is_empty() || opts.rho_values.is_empty() {
        return Err(Error::contract("sweep needs at least one p value and one rho value"));
    }
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.effective_seed();
    let (model, scorer) = load_or_init(cfg, opts.checkpoint.as_deref(), opts.random_init, seed)?;
    let length = opts.length.unwrap_or(cfg.tasks.eval_lengths[0]);
    let corpus = build_eval_corpus(cfg, seed, &[length])?;

    let args = json!({
        "seed": seed,
        "p_values": opts.p_values,
        "rho_values": opts.rho_values,
        "length": length,
        "checkpoint": opts.checkpoint.as_ref().map(|p| p.display().to_string()),
        "random_init": opts.random_init,
    });
    let mut csv = format!(
        "# {}\np,rho,length,exact_match,n\n",
        serde_json::to_string(&provenance(cfg, "sweep", args)).unwrap()
    );
    for &p in &opts.p_values {
        for &rho in &opts.rho_values {
            let mut spec = cfg.compression.clone();
            spec.rel_len = p;
            spec.ratio = rho;
            spec.validate()?;
            let pipeline = Pipeline::two_stage(
                model.clone(),
                scorer.clone(),
                spec,
                cfg.adaptation,
                cfg.delta_form(),
            );
            let report = evaluate(&pipeline, &corpus)?;
            let task = match cfg.tasks.task {
                TaskKind::Passkey => "passkey",
                TaskKind::AssocRecall => "assoc_recall",
            };
            let acc = report.accuracy(task, length).unwrap_or(0.0);
            csv.push_str(&format!("{p},{rho},{length},{acc},{}\n", cfg.tasks.eval_instances));
        }
    }
    let path = cfg.output_dir.join("sweep.csv");
    write_file(&path, &csv)?;
    Ok(path)
}

// ── bench ───────────────────────────────────────────────────────────

pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    random_init: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.effective_seed();
    let (model, scorer) = load_or_init(cfg, checkpoint, random_init, seed)?;

    let baseline = Pipeline::baseline(model.clone());
    let two_stage = Pipeline::two_stage(
        model,
        scorer,
        cfg.compression.clone(),
        cfg.adaptation,
        cfg.delta_form(),
    );
    let mut records = run_bench(
        &baseline,
        "mamba",
        &cfg.bench.input_lens,
        cfg.bench.output_len,
        cfg.bench.reps,
    )?;
    records.extend(run_bench(
        &two_stage,
        "remamba",
        &cfg.bench.input_lens,
        cfg.bench.output_len,
        cfg.bench.reps,
    )?);

    let path = cfg.output_dir.join("bench.csv");
    let args = json!({ "seed": seed, "random_init": random_init });
    emit_report(&records, &path, Some(&provenance(cfg, "bench", args)))?;
    Ok(path)
}

// ── gradcheck ───────────────────────────────────────────────────────

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(PathBuf, bool)> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.effective_seed();
    // a window must exist for the score group to be exercised
    let mut spec = cfg.compression.clone();
    if spec.rel_len == 0.0 {
        spec.rel_len = 0.2;
    }
    let rows = gradcheck(
        &cfg.model,
        &spec,
        cfg.adaptation,
        cfg.delta_form(),
        seed,
        6,
        GRADCHECK_TOLERANCE,
    )?;

    let mut csv = format!(
        "# {}\ngroup,checked,max_rel_err,tolerance,pass\n",
        serde_json::to_string(&provenance(cfg, "gradcheck", json!({ "seed": seed }))).unwrap()
    );
    let mut all_pass = true;
    println!("{:<22} {:>8} {:>14} {:>10}  result", "group", "checked", "max_rel_err", "tolerance");
    for r in &rows {
        all_pass &= r.pass;
        println!(
            "{:<22} {:>8} {:>14.3e} {:>10.0e}  {}",
            r.group,
            r.checked,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.group, r.checked, r.max_rel_err, r.tolerance, r.pass
        ));
    }
    let path = cfg.output_dir.join("gradcheck.csv");
    write_file(&path, &csv)?;
    Ok((path, all_pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut json = RunConfig::default_desk().to_json();
        for ov in [
            "model.hidden_size=12",
            "model.intermediate_size=16",
            "model.state_size=4",
            "model.vocab_size=40",
            "training.epochs=1",
            "training.batch_size=4",
            "tasks.train_instances=8",
            "tasks.train_lengths=[16,24]",
            "tasks.eval_lengths=[24]",
            "tasks.eval_instances=6",
            "tasks.key_length=2",
            "bench.input_lens=[16,32]",
            "bench.output_len=4",
            "bench.reps=3",
        ] {
            crate::runconfig::apply_override(&mut json, ov).unwrap();
        }
        let mut cfg = RunConfig::from_json(json).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn train_eval_bench_gradcheck_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());

        let artifacts = cmd_train(&cfg).unwrap();
        assert!(artifacts.checkpoint.exists());
        let metrics = std::fs::read_to_string(&artifacts.metrics).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2); // header + ceil(8/4) steps
        assert!(metrics.lines().next().unwrap().contains("\"config\""));

        let eval_opts = EvalOptions {
            checkpoint: Some(artifacts.checkpoint.clone()),
            ..EvalOptions::default()
        };
        let report = cmd_eval(&cfg, &eval_opts).unwrap();
        let text = std::fs::read_to_string(&report).unwrap();
        assert!(text.contains("task,length,needle_pos,exact_match,n"));

        let bench_path = cmd_bench(&cfg, Some(&artifacts.checkpoint), false).unwrap();
        let bench_text = std::fs::read_to_string(&bench_path).unwrap();
        // 2 pipelines × 2 input lengths
        assert_eq!(crate::bench::parse_report(&bench_text).unwrap().len(), 4);

        let (gc_path, pass) = cmd_gradcheck(&cfg).unwrap();
        assert!(gc_path.exists());
        assert!(pass, "gradcheck failed: {}", std::fs::read_to_string(&gc_path).unwrap());
    }

    #[test]
    fn eval_without_checkpoint_or_random_init_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let err = cmd_eval(&cfg, &EvalOptions::default()).unwrap_err().to_string();
        assert!(err.contains("--checkpoint"), "{err}");
        assert!(err.contains("--random-init"), "{err}");
    }

    #[test]
    fn sweep_emits_full_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let opts = SweepOptions {
            p_values: vec![0.1, 0.2, 0.3],
            rho_values: vec![0.05, 0.1, 0.2],
            checkpoint: None,
            random_init: true,
            length: None,
        };
        let path = cmd_sweep(&cfg, &opts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("p,"))
            .collect();
        assert_eq!(rows.len(), 9, "3×3 grid:\n{text}");
    }

    #[test]
    fn eval_with_p_zero_matches_baseline_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.compression.rel_len = 0.0;

        let opts = EvalOptions {
            random_init: true,
            ..EvalOptions::default()
        };
        let with_pipeline = cmd_eval(&cfg, &opts).unwrap();
        let a = std::fs::read_to_string(&with_pipeline).unwrap();

        // baseline: same model, no compression stage at all
        let seed = cfg.effective_seed();
        let (model, _) = init_model_and_scorer(&cfg, seed).unwrap();
        let corpus = build_eval_corpus(&cfg, seed, &cfg.tasks.eval_lengths).unwrap();
        let baseline = Pipeline::baseline(model);
        let report = evaluate(&baseline, &corpus).unwrap();

        // row-for-row identical accuracy cells
        let rows_a: Vec<&str> = a.lines().skip(2).collect();
        let csv_b = report.to_csv(None);
        let rows_b: Vec<&str> = csv_b.lines().skip(1).collect();
        assert_eq!(rows_a, rows_b);
    }
}
