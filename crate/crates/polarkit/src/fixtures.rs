//! Deterministic synthetic fixtures and the generators that rebuild them.
//!
//! Three fixture sets ship under `fixtures/` at the workspace root:
//!
//! * `distribution_corpus.jsonl`: a corpus whose per-split label counts
//!   match the published dataset statistics exactly (train 1175/2047, dev
//!   59/101, test 533/919).
//! * `cascade_corpus.jsonl` + `cascade_dump.jsonl`: a scripted generation
//!   dump that plants known outcome multisets and completion lengths so the
//!   pair-building cascade lands on exactly 721 -> 470 -> 330 with more
//!   FN-correction than FP-correction pairs.
//! * `e2e_corpus.jsonl`: a keyword-separable corpus (500 train / 100 dev)
//!   small enough for the toy model to learn: polarized texts carry a planted
//!   trigger phrase, and a deliberately under-represented "hard" trigger
//!   leaves headroom for preference training to fix false negatives.
//!
//! Every generator is a pure function of fixed literal seeds; regeneration is
//! byte-identical, and a test asserts the shipped files match the generators.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, LabeledExample, Split};
use crate::gen::{CompletionSet, GenError, SampledCompletion};
use crate::schema::{Label, PromptVariant};

/// Shipped file names, relative to the fixture directory.
pub const DISTRIBUTION_CORPUS: &str = "distribution_corpus.jsonl";
pub const CASCADE_CORPUS: &str = "cascade_corpus.jsonl";
pub const CASCADE_DUMP: &str = "cascade_dump.jsonl";
pub const E2E_CORPUS: &str = "e2e_corpus.jsonl";

const SUBJECTS: [&str; 8] = [
    "the council",
    "the board",
    "our neighbors",
    "local farmers",
    "the union",
    "city staff",
    "the committee",
    "the league",
];

const TOPICS: [&str; 8] = [
    "roads", "parks", "water", "schools", "markets", "budgets", "transit", "housing",
];

/// Non-polarized surface forms.
const NEG_TEMPLATES: [(&str, &str); 4] = [
    ("", " reviewed the agenda for "),
    ("", " shared an update on "),
    ("", " met to plan repairs for "),
    ("", " thanked volunteers for work on "),
];

/// Easy polarized trigger: frequent in training, so SFT learns it readily.
const EASY_POS: &str = " are a menace to ";
/// Hard polarized trigger: same label, much rarer in training, and sharing
/// no content word with the other families, so supervised training tends to
/// under-learn it without dragging the negative families along.
const HARD_POS: &str = " quietly undermine trust in ";

fn neg_text(rng: &mut ChaCha8Rng) -> String {
    let (pre, mid) = NEG_TEMPLATES[rng.gen_range(0..NEG_TEMPLATES.len())];
    let subject = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
    let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
    format!("{pre}{subject}{mid}{topic}")
}

fn pos_text(rng: &mut ChaCha8Rng, hard: bool) -> String {
    let subject = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
    let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
    let mid = if hard { HARD_POS } else { EASY_POS };
    format!("{subject}{mid}{topic}")
}

fn example(id: String, text: String, label: Label, split: Split) -> LabeledExample {
    LabeledExample { id, text, label, split, lang: "en".to_string() }
}

/// Corpus reproducing the published per-split label counts exactly. Labels
/// are shuffled within each split so the file does not read as two blocks;
/// texts are keyword-planted to match their labels (four in five positives
/// use the easy trigger).
pub fn distribution_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD157);
    let plan = [
        (Split::Train, "train", 1175usize, 2047usize),
        (Split::Dev, "dev", 59, 101),
        (Split::Test, "test", 533, 919),
    ];
    let mut examples = Vec::new();
    for (split, tag, pol, non) in plan {
        let mut labels = vec![Label::Polarized; pol];
        labels.extend(std::iter::repeat(Label::NonPolarized).take(non));
        labels.shuffle(&mut rng);
        for (i, label) in labels.into_iter().enumerate() {
            let text = match label {
                Label::Polarized => {
                    let hard = rng.gen_bool(0.2);
                    pos_text(&mut rng, hard)
                }
                Label::NonPolarized => neg_text(&mut rng),
            };
            examples.push(example(format!("{tag}-{:04}", i + 1), text, label, split));
        }
    }
    Corpus::new(examples).expect("generated ids are unique")
}

/// Cascade fixture plan. Each polarized input gets completions {TP, TP, FN}
/// (two candidate pairs, both gap 2) and each non-polarized input {TN, FP}
/// (one pair, gap 1): 251·2 + 219 = 721 candidates collapsing to 470 at one
/// pair per input. Completion lengths are planted so the per-input survivor
/// has ratio 1.10 (kept) or 1.40 (cut) on polarized inputs and 1.20 / 1.45
/// on non-polarized ones, leaving 200 + 130 = 330 after the 1.35 cut, with
/// FN-corrections (200) outnumbering FP-corrections (130).
const CASCADE_POL: usize = 251;
const CASCADE_POL_KEPT: usize = 200;
const CASCADE_NON: usize = 219;
const CASCADE_NON_KEPT: usize = 130;
const REJECTED_LEN: usize = 300;

/// Filler words for sized completions: no digits, so the planted answer line
/// is the only label-bearing text.
const FILLER: [&str; 12] = [
    "the", "panel", "notes", "a", "measured", "tone", "with", "plain", "claims", "and", "calm",
    "phrasing",
];

/// Deterministic ASCII completion of exactly `len` characters ending in an
/// extractable answer line.
fn sized_completion(label: Label, len: usize, seed: u64) -> String {
    let answer = format!("\nFinal Answer: {}", label.as_u8());
    assert!(len > answer.len() + 8, "length budget too small for a body");
    let body_len = len - answer.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = String::with_capacity(len);
    while body.len() < body_len {
        if !body.is_empty() {
            body.push(' ');
        }
        body.push_str(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    body.truncate(body_len);
    body.push_str(&answer);
    debug_assert_eq!(body.len(), len);
    body
}

fn dump_entry(temperature: f64, seed: u64, completion: String) -> SampledCompletion {
    SampledCompletion { variant: PromptVariant::Neutral, temperature, seed, completion }
}

/// Corpus and scripted dump realizing the cascade plan above.
pub fn cascade_fixture() -> Result<(Corpus, Vec<CompletionSet>), GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA5C);
    let mut examples = Vec::new();
    let mut sets = Vec::new();

    for i in 0..CASCADE_POL {
        let id = format!("cas-p{:03}", i + 1);
        let kept = i < CASCADE_POL_KEPT;
        // Two correct completions; the shorter one wins the per-input slot and
        // its ratio against the 300-char rejected side decides survival.
        let (a, b) = if kept { (330, 390) } else { (420, 450) };
        let salt = (i as u64) << 3;
        let entries = vec![
            dump_entry(0.8, 0, sized_completion(Label::Polarized, a, salt)),
            dump_entry(0.8, 1, sized_completion(Label::Polarized, b, salt | 1)),
            dump_entry(0.8, 2, sized_completion(Label::NonPolarized, REJECTED_LEN, salt | 2)),
        ];
        examples.push(example(id.clone(), pos_text(&mut rng, i % 5 == 0), Label::Polarized, Split::Train));
        sets.push(CompletionSet::new(id, entries)?);
    }

    for i in 0..CASCADE_NON {
        let id = format!("cas-n{:03}", i + 1);
        let kept = i < CASCADE_NON_KEPT;
        let c = if kept { 360 } else { 435 };
        let salt = ((CASCADE_POL + i) as u64) << 3;
        let entries = vec![
            dump_entry(0.8, 0, sized_completion(Label::NonPolarized, c, salt)),
            dump_entry(0.8, 1, sized_completion(Label::Polarized, REJECTED_LEN, salt | 1)),
        ];
        examples.push(example(id.clone(), neg_text(&mut rng), Label::NonPolarized, Split::Train));
        sets.push(CompletionSet::new(id, entries)?);
    }

    Ok((Corpus::new(examples).expect("generated ids are unique"), sets))
}

/// End-to-end corpus plan: 36% positive in both splits, with the hard
/// trigger held to a third of the positives so supervised training alone
/// leaves false negatives on dev.
const E2E_PLAN: [(Split, &str, usize, usize, usize); 2] = [
    // (split, id tag, easy positives, hard positives, negatives)
    (Split::Train, "tr", 120, 60, 320),
    (Split::Dev, "dv", 24, 12, 64),
];

/// Keyword-separable corpus sized for desk-scale training runs.
pub fn e2e_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE2E);
    let mut examples = Vec::new();
    for (split, tag, easy, hard, neg) in E2E_PLAN {
        // Family plan per slot, shuffled so batches mix classes.
        let mut families: Vec<u8> = Vec::new();
        families.extend(std::iter::repeat(0u8).take(easy));
        families.extend(std::iter::repeat(1u8).take(hard));
        families.extend(std::iter::repeat(2u8).take(neg));
        families.shuffle(&mut rng);
        for (i, family) in families.into_iter().enumerate() {
            let (text, label) = match family {
                0 => (pos_text(&mut rng, false), Label::Polarized),
                1 => (pos_text(&mut rng, true), Label::Polarized),
                _ => (neg_text(&mut rng), Label::NonPolarized),
            };
            examples.push(example(format!("e2e-{tag}-{:04}", i + 1), text, label, split));
        }
    }
    Corpus::new(examples).expect("generated ids are unique")
}

/// Writes all shipped fixture files into `dir`.
pub fn write_shipped(dir: &Path) -> Result<(), GenError> {
    std::fs::create_dir_all(dir)?;
    distribution_corpus()
        .write_jsonl(&dir.join(DISTRIBUTION_CORPUS))
        .map_err(|e| GenError::InvalidConfig(e.to_string()))?;
    let (corpus, dump) = cascade_fixture()?;
    corpus
        .write_jsonl(&dir.join(CASCADE_CORPUS))
        .map_err(|e| GenError::InvalidConfig(e.to_string()))?;
    crate::gen::write_generation_dump(&dir.join(CASCADE_DUMP), &dump)?;
    e2e_corpus()
        .write_jsonl(&dir.join(E2E_CORPUS))
        .map_err(|e| GenError::InvalidConfig(e.to_string()))?;
    Ok(())
}

/// Workspace fixture directory, resolved from the crate manifest. Valid in
/// tests and dev builds; release binaries take fixture paths from config.
pub fn shipped_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}
