//! Decode-time memory and throughput measurements across context
//! lengths. Memory is accounted logically (bytes of live tensor
//! buffers and serialized recurrent state), never via OS RSS, so the
//! numbers are deterministic and assertable.

use std::path::Path;

use serde_json::Value as Json;

use crate::error::{Error, Result};
use crate::numerics::alloc;
use crate::pipeline::Pipeline;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub pipeline: String,
    pub input_len: usize,
    pub output_len: usize,
    pub tokens_per_second: f64,
    pub peak_state_bytes: usize,
    pub peak_transient_bytes: usize,
    pub wall_ms_stage1: f64,
    pub wall_ms_stage2: f64,
}

pub const CSV_HEADER: &str = "pipeline,input_len,output_len,tokens_per_second,peak_state_bytes,peak_transient_bytes,wall_ms_stage1,wall_ms_stage2";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Time one pipeline across input lengths: median of `reps` timed runs
/// after one discarded warm-up, single-threaded. An `output_len` of 0
/// leaves tokens/second undefined, so the record is skipped with a
/// note on stderr.
pub fn run_bench(
    pipeline: &Pipeline,
    label: &str,
    input_lens: &[usize],
    output_len: usize,
    reps: usize,
) -> Result<Vec<BenchRecord>> {
    if reps < 3 {
        return Err(Error::contract(format!("run_bench: reps = {reps} below the minimum 3")));
    }
    if output_len == 0 {
        eprintln!("run_bench: output_len = 0 leaves tokens/second undefined; no records emitted");
        return Ok(Vec::new());
    }
    let vocab = pipeline.model.config.vocab_size as u32;
    let mut records = Vec::with_capacity(input_lens.len());
    for &input_len in input_lens {
        if input_len == 0 {
            return Err(Error::contract("run_bench: input_len must be positive"));
        }
        let prompt: Vec<u32> = (0..input_len).map(|i| (i as u32 * 7 + 3) % vocab).collect();

        // warm-up rep, discarded
        pipeline.timed_generate(&prompt, output_len)?;

        let mut s1 = Vec::with_capacity(reps);
        let mut s2 = Vec::with_capacity(reps);
        let mut dec = Vec::with_capacity(reps);
        let mut transient = Vec::with_capacity(reps);
        let mut state_bytes = 0;
        for _ in 0..reps {
            alloc::reset_peak();
            let before = alloc::current_bytes();
            let (a, b, d, tokens, sb) = pipeline.timed_generate(&prompt, output_len)?;
            debug_assert_eq!(tokens.len(), output_len);
            s1.push(a);
            s2.push(b);
            dec.push(d);
            transient.push((alloc::peak_bytes() - before) as f64);
            state_bytes = sb;
        }
        let decode_ms = median(dec);
        records.push(BenchRecord {
            pipeline: label.to_string(),
            input_len,
            output_len,
            tokens_per_second: output_len as f64 / (decode_ms / 1e3),
            peak_state_bytes: state_bytes,
            peak_transient_bytes: median(transient) as usize,
            wall_ms_stage1: median(s1),
            wall_ms_stage2: median(s2),
        });
    }
    Ok(records)
}

pub fn to_csv(records: &[BenchRecord], config: Option<&Json>) -> String {
    let mut out = String::new();
    if let Some(cfg) = config {
        out.push_str(&format!("# {}\n", serde_json::to_string(cfg).unwrap()));
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.pipeline,
            r.input_len,
            r.output_len,
            r.tokens_per_second,
            r.peak_state_bytes,
            r.peak_transient_bytes,
            r.wall_ms_stage1,
            r.wall_ms_stage2
        ));
    }
    out
}

pub fn emit_report(records: &[BenchRecord], path: &Path, config: Option<&Json>) -> Result<()> {
    std::fs::write(path, to_csv(records, config))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a report back (comment lines skipped); inverse of `to_csv`.
pub fn parse_report(text: &str) -> Result<Vec<BenchRecord>> {
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        if line == CSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::contract(format!("bad bench row: {line}")));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::contract(format!("{e}: {s}")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::contract(format!("{e}: {s}")));
        rows.push(BenchRecord {
            pipeline: f[0].to_string(),
            input_len: parse_u(f[1])?,
            output_len: parse_u(f[2])?,
            tokens_per_second: parse_f(f[3])?,
            peak_state_bytes: parse_u(f[4])?,
            peak_transient_bytes: parse_u(f[5])?,
            wall_ms_stage1: parse_f(f[6])?,
            wall_ms_stage2: parse_f(f[7])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptationMode;
    use crate::compression::{CompressionSpec, ScorerParams};
    use crate::ssm::{DeltaForm, Model, ModelConfig};

    fn bench_model() -> Model {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            intermediate_size: 24,
            state_size: 4,
            vocab_size: 40,
            tied_lm_head: false,
        };
        Model::init(&cfg, 77).unwrap()
    }

    #[test]
    fn zero_output_len_emits_no_records() {
        let p = Pipeline::baseline(bench_model());
        let records = run_bench(&p, "mamba", &[16, 32], 0, 3).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn too_few_reps_is_a_contract_error() {
        let p = Pipeline::baseline(bench_model());
        assert!(run_bench(&p, "mamba", &[16], 8, 2).is_err());
    }

    #[test]
    fn state_bytes_equal_across_input_lengths() {
        let p = Pipeline::baseline(bench_model());
        let records = run_bench(&p, "mamba", &[16, 64, 128], 4, 3).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].peak_state_bytes, records[1].peak_state_bytes);
        assert_eq!(records[1].peak_state_bytes, records[2].peak_state_bytes);
    }

    #[test]
    fn csv_roundtrip_preserves_records() {
        let p = Pipeline::two_stage(
            bench_model(),
            ScorerParams::init(16, 5),
            CompressionSpec::new(0.0, 0.3, 0.2),
            AdaptationMode::SelectiveDelta,
            DeltaForm::Offset,
        );
        let records = run_bench(&p, "remamba", &[24, 48], 4, 3).unwrap();
        let csv = to_csv(&records, Some(&serde_json::json!({"reps": 3})));
        let parsed = parse_report(&csv).unwrap();
        assert_eq!(records, parsed);
        // row count = |input_lens| for a single pipeline
        assert_eq!(parsed.len(), 2);
    }

    #[test]
    fn empty_records_give_header_only_csv() {
        let csv = to_csv(&[], None);
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
        assert!(parse_report(&csv).unwrap().is_empty());
    }
}
