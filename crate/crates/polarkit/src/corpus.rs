//! Labeled-corpus ingestion, split statistics, and baseline random splits.
//!
//! The canonical on-disk format is JSONL, one object per line:
//! `{"id": str, "text": str, "label": 0|1, "split": "train"|"dev"|"test", "lang": str}`.
//! CSV (UTF-8 with a header row and the same column names) is accepted as a
//! secondary format.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schema::Label;

/// Corpus partition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::Parse { line: 0, reason: format!("unknown split {other:?}") }),
        }
    }
}

/// One labeled corpus item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub split: Split,
    pub lang: String,
}

/// On-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
    #[error("split ratios must be non-negative and sum to 1")]
    InvalidRatios,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Immutable collection of labeled examples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    examples: Vec<LabeledExample>,
}

impl Corpus {
    /// Validates uniqueness of ids and non-emptiness of texts.
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, ex) in examples.iter().enumerate() {
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
            if ex.text.trim().is_empty() {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    reason: format!("example {:?} has empty text", ex.id),
                });
            }
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledExample> {
        self.examples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Examples in one split, in file order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: &Path, format: CorpusFormat) -> Result<Self, CorpusError> {
        match format {
            CorpusFormat::Jsonl => Self::load_jsonl(path),
            CorpusFormat::Csv => Self::load_csv(path),
        }
    }

    /// Infers the format from the file extension (`.csv` vs anything else).
    pub fn load_auto(path: &Path) -> Result<Self, CorpusError> {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        };
        Self::load(path, format)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut examples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            if ex.text.trim().is_empty() {
                return Err(CorpusError::Parse {
                    line: idx + 1,
                    reason: format!("example {:?} has empty text", ex.id),
                });
            }
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(CorpusError::Empty);
        }
        Self::new(examples)
    }

    pub fn load_csv(path: &Path) -> Result<Self, CorpusError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut examples = Vec::new();
        for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
            let line = idx + 2; // header is line 1
            let row = row.map_err(|e| CorpusError::Parse { line, reason: e.to_string() })?;
            let label = Label::from_int(row.label)
                .map_err(|e| CorpusError::Parse { line, reason: e.to_string() })?;
            let split = row
                .split
                .parse::<Split>()
                .map_err(|_| CorpusError::Parse { line, reason: format!("unknown split {:?}", row.split) })?;
            if row.text.trim().is_empty() {
                return Err(CorpusError::Parse {
                    line,
                    reason: format!("example {:?} has empty text", row.id),
                });
            }
            examples.push(LabeledExample { id: row.id, text: row.text, label, split, lang: row.lang });
        }
        if examples.is_empty() {
            return Err(CorpusError::Empty);
        }
        Self::new(examples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex).map_err(|e| CorpusError::Parse {
                line: 0,
                reason: e.to_string(),
            })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    text: String,
    label: i64,
    split: String,
    lang: String,
}

/// Label counts for one slice of the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitCount {
    pub total: usize,
    pub polarized: usize,
    pub non_polarized: usize,
}

impl SplitCount {
    fn tally<'a>(examples: impl Iterator<Item = &'a LabeledExample>) -> Self {
        let mut total = 0;
        let mut polarized = 0;
        for ex in examples {
            total += 1;
            if ex.label.is_polarized() {
                polarized += 1;
            }
        }
        SplitCount { total, polarized, non_polarized: total - polarized }
    }

    /// Share of polarized examples as a percentage rounded to one decimal.
    pub fn polarized_pct(&self) -> f64 {
        pct_1dp(self.polarized, self.total)
    }

    pub fn non_polarized_pct(&self) -> f64 {
        pct_1dp(self.non_polarized, self.total)
    }
}

fn pct_1dp(part: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (100.0 * part as f64 / total as f64 * 10.0).round() / 10.0
}

/// Per-split and whole-corpus label distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub train: SplitCount,
    pub dev: SplitCount,
    pub test: SplitCount,
    pub total: SplitCount,
}

impl SplitStats {
    pub fn rows(&self) -> [(&'static str, SplitCount); 4] {
        [
            ("Train", self.train),
            ("Dev", self.dev),
            ("Test", self.test),
            ("Total", self.total),
        ]
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>6}  {:>14}  {:>14}", "Split", "Total", "Polarized", "Non-polarized")?;
        for (name, count) in self.rows() {
            writeln!(
                f,
                "{:<6} {:>6}  {:>6} ({:>4.1}%)  {:>6} ({:>4.1}%)",
                name,
                count.total,
                count.polarized,
                count.polarized_pct(),
                count.non_polarized,
                count.non_polarized_pct(),
            )?;
        }
        Ok(())
    }
}

/// Exact split statistics with one-decimal percentages.
pub fn split_stats(corpus: &Corpus) -> SplitStats {
    SplitStats {
        train: SplitCount::tally(corpus.split(Split::Train)),
        dev: SplitCount::tally(corpus.split(Split::Dev)),
        test: SplitCount::tally(corpus.split(Split::Test)),
        total: SplitCount::tally(corpus.iter()),
    }
}

/// Reassigns split tags with a seeded shuffle.
///
/// Sizes use floor allocation with leftover seats handed out by largest
/// fractional remainder (train wins ties, then dev), so a 9-example corpus at
/// (0.8, 0.1, 0.1) becomes (7, 1, 1). Examples keep their file order; only
/// the tags change.
pub fn make_splits(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::InvalidRatios);
    }

    let n = corpus.len();
    let mut sizes = [0usize; 3];
    let mut remainders = [0f64; 3];
    for (i, r) in parts.iter().enumerate() {
        let exact = n as f64 * r;
        sizes[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
    }
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let mut assignment = vec![Split::Train; n];
    let mut cursor = 0;
    for (slot, split) in Split::ALL.iter().enumerate() {
        for &idx in &indices[cursor..cursor + sizes[slot]] {
            assignment[idx] = *split;
        }
        cursor += sizes[slot];
    }

    let examples = corpus
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| LabeledExample { split: assignment[i], ..ex.clone() })
        .collect();
    Corpus::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, label: Label, split: Split) -> LabeledExample {
        LabeledExample {
            id: id.to_string(),
            text: format!("text for {id}"),
            label,
            split,
            lang: "en".to_string(),
        }
    }

    fn counted_corpus(plan: &[(Split, usize, usize)]) -> Corpus {
        // plan entries: (split, polarized, non_polarized)
        let mut examples = Vec::new();
        for (split, pol, non) in plan {
            for i in 0..*pol {
                examples.push(example(&format!("{}-p{}", split.as_str(), i), Label::Polarized, *split));
            }
            for i in 0..*non {
                examples.push(example(&format!("{}-n{}", split.as_str(), i), Label::NonPolarized, *split));
            }
        }
        Corpus::new(examples).unwrap()
    }

    #[test]
    fn stats_match_published_distribution() {
        let corpus = counted_corpus(&[
            (Split::Train, 1175, 2047),
            (Split::Dev, 59, 101),
            (Split::Test, 533, 919),
        ]);
        let stats = split_stats(&corpus);
        assert_eq!(stats.train.total, 3222);
        assert_eq!(stats.train.polarized, 1175);
        assert_eq!(stats.train.polarized_pct(), 36.5);
        assert_eq!(stats.train.non_polarized_pct(), 63.5);
        assert_eq!(stats.dev.total, 160);
        assert_eq!(stats.dev.polarized_pct(), 36.9);
        assert_eq!(stats.dev.non_polarized_pct(), 63.1);
        assert_eq!(stats.test.polarized_pct(), 36.7);
        assert_eq!(stats.test.non_polarized_pct(), 63.3);
        assert_eq!(stats.total.total, 4834);
        assert_eq!(stats.total.polarized, 1767);
        assert_eq!(stats.total.non_polarized, 3067);
        assert_eq!(stats.total.polarized_pct(), 36.6);
        assert_eq!(stats.total.non_polarized_pct(), 63.4);
    }

    #[test]
    fn single_example_is_all_polarized() {
        let corpus = counted_corpus(&[(Split::Train, 1, 0)]);
        let stats = split_stats(&corpus);
        assert_eq!(stats.train.polarized_pct(), 100.0);
    }

    #[test]
    fn per_split_counts_sum_to_total() {
        let corpus = counted_corpus(&[
            (Split::Train, 7, 13),
            (Split::Dev, 2, 3),
            (Split::Test, 4, 6),
        ]);
        let stats = split_stats(&corpus);
        assert_eq!(
            stats.train.total + stats.dev.total + stats.test.total,
            stats.total.total
        );
        assert_eq!(
            stats.train.polarized + stats.dev.polarized + stats.test.polarized,
            stats.total.polarized
        );
    }

    #[test]
    fn jsonl_round_trip_preserves_order() {
        let corpus = counted_corpus(&[(Split::Train, 2, 1)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        corpus.write_jsonl(&path).unwrap();
        let loaded = Corpus::load_jsonl(&path).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn jsonl_rejects_out_of_domain_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"a","text":"x","label":2,"split":"train","lang":"en"}}"#).unwrap();
        match Corpus::load_jsonl(&path) {
            Err(CorpusError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error on line 1, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut f = File::create(&path).unwrap();
        for _ in 0..2 {
            writeln!(f, r#"{{"id":"a","text":"x","label":0,"split":"train","lang":"en"}}"#).unwrap();
        }
        assert!(matches!(Corpus::load_jsonl(&path), Err(CorpusError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn csv_loads_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "id,text,label,split,lang").unwrap();
        writeln!(f, "a,\"hello, world\",1,dev,en").unwrap();
        writeln!(f, "b,plain,0,train,en").unwrap();
        let corpus = Corpus::load_csv(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.examples()[0].text, "hello, world");
        assert_eq!(corpus.examples()[0].label, Label::Polarized);
        assert_eq!(corpus.examples()[1].split, Split::Train);
    }

    #[test]
    fn make_splits_allocates_ten_examples() {
        let corpus = counted_corpus(&[(Split::Train, 5, 5)]);
        let out = make_splits(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        let stats = split_stats(&out);
        assert_eq!((stats.train.total, stats.dev.total, stats.test.total), (8, 1, 1));
    }

    #[test]
    fn make_splits_allocates_nine_examples_by_largest_remainder() {
        let corpus = counted_corpus(&[(Split::Train, 4, 5)]);
        let out = make_splits(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        let stats = split_stats(&out);
        assert_eq!((stats.train.total, stats.dev.total, stats.test.total), (7, 1, 1));
    }

    #[test]
    fn make_splits_is_deterministic_and_partitions() {
        let corpus = counted_corpus(&[(Split::Train, 20, 30)]);
        let a = make_splits(&corpus, (0.8, 0.1, 0.1), 123).unwrap();
        let b = make_splits(&corpus, (0.8, 0.1, 0.1), 123).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&corpus, (0.8, 0.1, 0.1), 124).unwrap();
        assert_ne!(a, c); // different seed shuffles differently
        // Every example is assigned exactly one split and ids are preserved.
        assert_eq!(a.len(), corpus.len());
        for (orig, new) in corpus.iter().zip(a.iter()) {
            assert_eq!(orig.id, new.id);
        }
    }

    #[test]
    fn make_splits_rejects_bad_ratios() {
        let corpus = counted_corpus(&[(Split::Train, 2, 3)]);
        assert!(matches!(
            make_splits(&corpus, (0.8, 0.1, 0.2), 1),
            Err(CorpusError::InvalidRatios)
        ));
        assert!(matches!(
            make_splits(&corpus, (1.2, -0.1, -0.1), 1),
            Err(CorpusError::InvalidRatios)
        ));
    }
}
