//! Preference-pair mining: outcome labeling, exhaustive cross-rank pairing,
//! and the two-stage filtering cascade (one pair per input, then a length
//! ratio cut).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, LabeledExample};
use crate::gen::{CompletionSet, SampledCompletion};
use crate::schema::{extract_label, render_prompt, Label, PromptVariant};

/// Completion outcome against the gold label. `MALFORMED` marks completions
/// with no extractable label; it never participates in ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    TN,
    FP,
    FN,
    MALFORMED,
}

impl Outcome {
    /// Preference rank: correct (TP or TN) above FP above FN. `None` for
    /// MALFORMED, which is excluded before ranking.
    pub fn rank(self) -> Option<u8> {
        match self {
            Outcome::TP | Outcome::TN => Some(2),
            Outcome::FP => Some(1),
            Outcome::FN => Some(0),
            Outcome::MALFORMED => None,
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::TP | Outcome::TN)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::TP => "TP",
            Outcome::TN => "TN",
            Outcome::FP => "FP",
            Outcome::FN => "FN",
            Outcome::MALFORMED => "MALFORMED",
        }
    }

    /// Outcome of an already-extracted prediction against gold.
    pub fn of(pred: Label, gold: Label) -> Self {
        match (pred.is_polarized(), gold.is_polarized()) {
            (true, true) => Outcome::TP,
            (false, false) => Outcome::TN,
            (true, false) => Outcome::FP,
            (false, true) => Outcome::FN,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels one completion against gold via lenient extraction.
pub fn label_completion(completion: &str, gold: Label) -> Outcome {
    match extract_label(completion) {
        Err(_) => Outcome::MALFORMED,
        Ok(pred) => Outcome::of(pred, gold),
    }
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error("no gold label for example {0:?}")]
    MissingGold(String),
    #[error("pair for {id:?} invalid: {reason}")]
    InvalidPair { id: String, reason: String },
    #[error("zero-length completion in pair for {0:?}")]
    ZeroLength(String),
    #[error("max_ratio must exceed 1, got {0}")]
    BadRatio(f64),
    #[error("pair file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where one side of a pair came from. Present for pairs mined in-process;
/// absent for pairs loaded from disk, whose file format carries no
/// provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideProvenance {
    pub variant: PromptVariant,
    pub temperature: f64,
    pub seed: u64,
}

/// One DPO training pair.
///
/// Invariants: rank(chosen) > rank(rejected), neither side MALFORMED, chosen
/// and rejected differ as byte strings.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    example_id: String,
    prompt: String,
    chosen: String,
    rejected: String,
    chosen_outcome: Outcome,
    rejected_outcome: Outcome,
    length_ratio: f64,
    chosen_prov: Option<SideProvenance>,
    rejected_prov: Option<SideProvenance>,
}

/// max(len, len) / min(len, len) over character counts. `None` if a side is
/// empty.
fn char_length_ratio(a: &str, b: &str) -> Option<f64> {
    let la = a.chars().count();
    let lb = b.chars().count();
    if la == 0 || lb == 0 {
        return None;
    }
    Some(la.max(lb) as f64 / la.min(lb) as f64)
}

impl PreferencePair {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        example_id: impl Into<String>,
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
        chosen_outcome: Outcome,
        rejected_outcome: Outcome,
        chosen_prov: Option<SideProvenance>,
        rejected_prov: Option<SideProvenance>,
    ) -> Result<Self, PairError> {
        let example_id = example_id.into();
        let invalid = |reason: &str| PairError::InvalidPair {
            id: example_id.clone(),
            reason: reason.to_string(),
        };
        let (cr, rr) = match (chosen_outcome.rank(), rejected_outcome.rank()) {
            (Some(c), Some(r)) => (c, r),
            _ => return Err(invalid("a side is MALFORMED")),
        };
        if cr <= rr {
            return Err(invalid("chosen rank must strictly exceed rejected rank"));
        }
        let chosen = chosen.into();
        let rejected = rejected.into();
        if chosen == rejected {
            return Err(invalid("chosen equals rejected"));
        }
        let length_ratio =
            char_length_ratio(&chosen, &rejected).ok_or_else(|| PairError::ZeroLength(example_id.clone()))?;
        Ok(Self {
            example_id,
            prompt: prompt.into(),
            chosen,
            rejected,
            chosen_outcome,
            rejected_outcome,
            length_ratio,
            chosen_prov,
            rejected_prov,
        })
    }

    pub fn example_id(&self) -> &str {
        &self.example_id
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn chosen(&self) -> &str {
        &self.chosen
    }

    pub fn rejected(&self) -> &str {
        &self.rejected
    }

    pub fn chosen_outcome(&self) -> Outcome {
        self.chosen_outcome
    }

    pub fn rejected_outcome(&self) -> Outcome {
        self.rejected_outcome
    }

    pub fn length_ratio(&self) -> f64 {
        self.length_ratio
    }

    pub fn chosen_prov(&self) -> Option<SideProvenance> {
        self.chosen_prov
    }

    pub fn rejected_prov(&self) -> Option<SideProvenance> {
        self.rejected_prov
    }

    /// Rank difference, 1 or 2.
    pub fn rank_gap(&self) -> u8 {
        self.chosen_outcome.rank().unwrap() - self.rejected_outcome.rank().unwrap()
    }
}

/// Every ordered cross-rank (chosen, rejected) index pair over a list of
/// outcomes. MALFORMED entries never appear; equal ranks emit nothing.
/// Enumeration walks unordered index pairs in increasing order and puts the
/// higher-ranked index first.
pub fn cross_rank_pairs(outcomes: &[Outcome]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..outcomes.len() {
        for j in i + 1..outcomes.len() {
            match (outcomes[i].rank(), outcomes[j].rank()) {
                (Some(a), Some(b)) if a > b => out.push((i, j)),
                (Some(a), Some(b)) if a < b => out.push((j, i)),
                _ => {}
            }
        }
    }
    out
}

/// Labels every completion and emits every cross-rank ordered pair per input
/// (higher rank chosen). MALFORMED completions are dropped first; inputs
/// whose surviving completions share one rank emit nothing. The stored
/// prompt is always the neutral one: steering prompts mine data but are not
/// the deployment interface.
pub fn build_candidate_pairs(
    sets: &[CompletionSet],
    corpus: &Corpus,
) -> Result<Vec<PreferencePair>, PairError> {
    let by_id: HashMap<&str, &LabeledExample> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    let prov = |e: &SampledCompletion| SideProvenance {
        variant: e.variant,
        temperature: e.temperature,
        seed: e.seed,
    };
    let mut pairs = Vec::new();
    for set in sets {
        let example = by_id
            .get(set.id())
            .ok_or_else(|| PairError::MissingGold(set.id().to_string()))?;
        let prompt = render_prompt(&example.text, PromptVariant::Neutral);
        let outcomes: Vec<Outcome> = set
            .entries()
            .iter()
            .map(|e| label_completion(&e.completion, example.label))
            .collect();
        for (ci, ri) in cross_rank_pairs(&outcomes) {
            let ce = &set.entries()[ci];
            let re = &set.entries()[ri];
            pairs.push(PreferencePair::new(
                set.id(),
                prompt.clone(),
                ce.completion.clone(),
                re.completion.clone(),
                outcomes[ci],
                outcomes[ri],
                Some(prov(ce)),
                Some(prov(re)),
            )?);
        }
    }
    Ok(pairs)
}

/// Sort key for picking the one pair an input keeps. Smaller is better:
/// larger rank gap first, then FN-correction over FP-correction, then
/// smaller length ratio, then lowest (temperature, seed) of the chosen side.
/// Pairs without provenance (loaded from disk) sort after provenanced ones at
/// the final tier; remaining ties keep the earlier pair.
fn selection_key(p: &PreferencePair) -> (std::cmp::Reverse<u8>, u8, f64, f64, u64) {
    let fn_first = if p.rejected_outcome == Outcome::FN { 0 } else { 1 };
    let (temp, seed) = match p.chosen_prov {
        Some(pr) => (pr.temperature, pr.seed),
        None => (f64::INFINITY, u64::MAX),
    };
    (std::cmp::Reverse(p.rank_gap()), fn_first, p.length_ratio, temp, seed)
}

fn key_less(a: &PreferencePair, b: &PreferencePair) -> bool {
    let ka = selection_key(a);
    let kb = selection_key(b);
    ka.partial_cmp(&kb) == Some(std::cmp::Ordering::Less)
}

/// Keeps exactly one pair per example id, chosen by the deterministic
/// priority in [`selection_key`]. Output follows first-seen id order.
pub fn filter_one_per_input(pairs: &[PreferencePair]) -> Vec<PreferencePair> {
    let mut order: Vec<&str> = Vec::new();
    let mut best: HashMap<&str, &PreferencePair> = HashMap::new();
    for p in pairs {
        match best.get(p.example_id.as_str()) {
            None => {
                order.push(&p.example_id);
                best.insert(&p.example_id, p);
            }
            Some(current) => {
                if key_less(p, current) {
                    best.insert(&p.example_id, p);
                }
            }
        }
    }
    order.into_iter().map(|id| best[id].clone()).collect()
}

/// Keeps pairs whose character-length ratio is strictly below `max_ratio`,
/// re-annotating the stored ratio. Order is preserved.
pub fn filter_length_ratio(
    pairs: &[PreferencePair],
    max_ratio: f64,
) -> Result<Vec<PreferencePair>, PairError> {
    if !(max_ratio > 1.0) {
        return Err(PairError::BadRatio(max_ratio));
    }
    let mut kept = Vec::new();
    for p in pairs {
        let ratio = char_length_ratio(&p.chosen, &p.rejected)
            .ok_or_else(|| PairError::ZeroLength(p.example_id.clone()))?;
        if ratio < max_ratio {
            let mut p = p.clone();
            p.length_ratio = ratio;
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Aggregate counts over a pair set. `fn_correction` counts pairs whose
/// rejected side is FN; `fp_correction`, FP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairStats {
    pub total: usize,
    pub fn_correction: usize,
    pub fp_correction: usize,
    pub per_gap: std::collections::BTreeMap<u8, usize>,
}

pub fn pair_stats(pairs: &[PreferencePair]) -> PairStats {
    let mut stats = PairStats {
        total: pairs.len(),
        fn_correction: 0,
        fp_correction: 0,
        per_gap: Default::default(),
    };
    for p in pairs {
        match p.rejected_outcome {
            Outcome::FN => stats.fn_correction += 1,
            Outcome::FP => stats.fp_correction += 1,
            _ => {}
        }
        *stats.per_gap.entry(p.rank_gap()).or_insert(0) += 1;
    }
    stats
}

/// On-disk row. Field order is the column order; provenance is deliberately
/// not persisted.
#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    id: String,
    prompt: String,
    chosen: String,
    rejected: String,
    chosen_outcome: Outcome,
    rejected_outcome: Outcome,
    length_ratio: f64,
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), PairError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        let row = PairRow {
            id: p.example_id.clone(),
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            chosen_outcome: p.chosen_outcome,
            rejected_outcome: p.rejected_outcome,
            length_ratio: p.length_ratio,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads pairs, revalidating every invariant. The length ratio is recomputed
/// from the completion strings; the stored value is derived data.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, PairError> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PairRow = serde_json::from_str(&line).map_err(|e| PairError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let pair = PreferencePair::new(
            row.id,
            row.prompt,
            row.chosen,
            row.rejected,
            row.chosen_outcome,
            row.rejected_outcome,
            None,
            None,
        )
        .map_err(|e| PairError::Parse { line: i + 1, reason: e.to_string() })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
