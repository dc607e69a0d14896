//! Policy backends and the sampling protocols that feed pair mining.
//!
//! A [`PolicyBackend`] is anything that can complete a prompt and score a
//! completion: the built-in [`toylm::ToyLm`] for desk-scale runs, or an
//! external model whose outputs arrive through a generation dump file.

pub mod toylm;
pub mod vocab;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Fnv1a;
use crate::schema::{render_prompt, PromptRenderer, PromptVariant};

pub use toylm::{ToyLm, ToyLmConfig, ToyLmParams};
pub use vocab::{Vocab, EOS, UNK};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("model config invalid: {0}")]
    InvalidConfig(String),
    #[error("prompt is empty after encoding")]
    EmptyPrompt,
    #[error("sequence length {len} exceeds model context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no sampling temperatures supplied")]
    NoTemperatures,
    #[error("generation dump line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("completion set {id:?}: {reason}")]
    InvalidSet { id: String, reason: String },
    #[error("parameter blob has {got} values, model expects {want}")]
    ParamCount { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How a completion is decoded from next-token distributions. Argmax is a
/// distinct mode rather than temperature 0 so no division by zero lurks in
/// the temperature path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

/// Whether a backend tolerates concurrent read-only inference. The sampling
/// drivers here run examples serially in input order, which satisfies either
/// declaration; the declaration matters for callers that bring their own
/// parallel driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendConcurrency {
    ConcurrentReadOnly,
    Serial,
}

/// Anything that can complete prompts and score completions. `sample` must be
/// deterministic given a seed; `sequence_logprob` must be deterministic given
/// fixed parameters and is a sum over completion tokens of log p(token |
/// prompt + preceding completion tokens), hence always ≤ 0.
pub trait PolicyBackend {
    fn sample(&self, prompt: &str, decoding: Decoding, seed: u64, max_new_tokens: usize) -> Result<String, GenError>;

    fn sequence_logprob(&self, prompt: &str, completion: &str) -> Result<f64, GenError>;

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Serial
    }
}

/// One sampled completion with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCompletion {
    pub variant: PromptVariant,
    pub temperature: f64,
    pub seed: u64,
    pub completion: String,
}

/// All sampled completions for one input example.
///
/// Invariants: at least one entry; (variant, temperature, seed) triples are
/// unique within the set.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionSet {
    id: String,
    entries: Vec<SampledCompletion>,
}

impl CompletionSet {
    pub fn new(id: impl Into<String>, entries: Vec<SampledCompletion>) -> Result<Self, GenError> {
        let id = id.into();
        if entries.is_empty() {
            return Err(GenError::InvalidSet { id, reason: "no entries".into() });
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.variant, e.temperature.to_bits(), e.seed)) {
                return Err(GenError::InvalidSet {
                    id,
                    reason: format!(
                        "duplicate (variant, temperature, seed) = ({}, {}, {})",
                        e.variant.as_str(),
                        e.temperature,
                        e.seed
                    ),
                });
            }
        }
        Ok(Self { id, entries })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entries(&self) -> &[SampledCompletion] {
        &self.entries
    }
}

/// Derives a per-sample RNG seed from the run seed, the example id and the
/// sampling grid position. Separated FNV-1a keeps ids from colliding by
/// boundary shifts.
pub fn derive_seed(base_seed: u64, example_id: &str, temp_index: usize, sample_index: usize) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&base_seed.to_le_bytes());
    h.sep();
    h.write(example_id.as_bytes());
    h.sep();
    h.write(&(temp_index as u32).to_le_bytes());
    h.write(&(sample_index as u32).to_le_bytes());
    h.finish()
}

fn check_temperature(t: f64) -> Result<(), GenError> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(GenError::InvalidTemperature(t))
    }
}

/// Samples `per_temp` completions per temperature with the neutral prompt,
/// seeds derived from (base_seed, example_id, temperature index, sample
/// index). Entry order follows the grid: temperatures outer, samples inner.
pub fn sample_completions<B: PolicyBackend + ?Sized>(
    backend: &B,
    example_id: &str,
    text: &str,
    temperatures: &[f64],
    per_temp: usize,
    base_seed: u64,
    max_new_tokens: usize,
) -> Result<CompletionSet, GenError> {
    if temperatures.is_empty() {
        return Err(GenError::NoTemperatures);
    }
    if per_temp == 0 {
        return Err(GenError::InvalidConfig("per_temp must be positive".into()));
    }
    for &t in temperatures {
        check_temperature(t)?;
    }
    let prompt = render_prompt(text, PromptVariant::Neutral);
    let mut entries = Vec::with_capacity(temperatures.len() * per_temp);
    for (ti, &temperature) in temperatures.iter().enumerate() {
        for si in 0..per_temp {
            let seed = derive_seed(base_seed, example_id, ti, si);
            let completion = backend.sample(&prompt, Decoding::Temperature(temperature), seed, max_new_tokens)?;
            entries.push(SampledCompletion {
                variant: PromptVariant::Neutral,
                temperature,
                seed,
                completion,
            });
        }
    }
    CompletionSet::new(example_id, entries)
}

/// Samples one completion per steering variant at a single temperature. Both
/// variants share a seed, so any output difference is attributable to the
/// steering line alone; downstream ranking treats the results like any other
/// completions.
pub fn dual_prompt_sample<B: PolicyBackend + ?Sized>(
    backend: &B,
    example_id: &str,
    text: &str,
    temperature: f64,
    base_seed: u64,
    max_new_tokens: usize,
    renderer: &PromptRenderer,
) -> Result<CompletionSet, GenError> {
    check_temperature(temperature)?;
    let seed = derive_seed(base_seed, example_id, 0, 0);
    let mut entries = Vec::with_capacity(2);
    for variant in [PromptVariant::SteerPositive, PromptVariant::SteerNegative] {
        let prompt = renderer.render(text, variant);
        let completion = backend.sample(&prompt, Decoding::Temperature(temperature), seed, max_new_tokens)?;
        entries.push(SampledCompletion { variant, temperature, seed, completion });
    }
    CompletionSet::new(example_id, entries)
}

/// Dump row format. Field order is the on-disk column order.
#[derive(Debug, Serialize, Deserialize)]
struct DumpRow {
    id: String,
    variant: PromptVariant,
    temperature: f64,
    seed: u64,
    completion: String,
}

/// Writes completion sets as JSONL, one row per completion, set order then
/// entry order.
pub fn write_generation_dump(path: &Path, sets: &[CompletionSet]) -> Result<(), GenError> {
    let mut w = BufWriter::new(File::create(path)?);
    for set in sets {
        for e in &set.entries {
            let row = DumpRow {
                id: set.id.clone(),
                variant: e.variant,
                temperature: e.temperature,
                seed: e.seed,
                completion: e.completion.clone(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a generation dump, grouping rows by example id in first-seen order.
/// Rows for one id may interleave with other ids; within an id, row order is
/// preserved.
pub fn load_generation_dump(path: &Path) -> Result<Vec<CompletionSet>, GenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<SampledCompletion>> =
        std::collections::HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DumpRow = serde_json::from_str(&line).map_err(|e| GenError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !grouped.contains_key(&row.id) {
            order.push(row.id.clone());
        }
        grouped.entry(row.id).or_default().push(SampledCompletion {
            variant: row.variant,
            temperature: row.temperature,
            seed: row.seed,
            completion: row.completion,
        });
    }
    order
        .into_iter()
        .map(|id| {
            let entries = grouped.remove(&id).expect("id recorded on first sight");
            CompletionSet::new(id, entries)
        })
        .collect()
}
