//! Character-level vocabulary for the toy decoder model.
//!
//! Ids 0 and 1 are reserved for the unknown and end-of-sequence tokens; the
//! remaining ids map code points in sorted order, so a vocabulary built from
//! the same texts is always identical.

use std::collections::{BTreeSet, HashMap};

use crate::schema::{
    ClaimType, Manifestation, TargetKind, STEER_NEGATIVE_LINE, STEER_POSITIVE_LINE,
};

/// Unknown-character token id.
pub const UNK: usize = 0;
/// End-of-sequence token id. Appended to every training target so the model
/// learns to terminate; never rendered back to text.
pub const EOS: usize = 1;
const SPECIALS: usize = 2;

/// Every character the output template itself can produce, independent of the
/// corpus: field labels, category names, slot values, digits, steering lines.
fn template_chars(buf: &mut BTreeSet<char>) {
    let mut push = |s: &str| buf.extend(s.chars());
    push("Input: \nReasoning:");
    push("Target referenced: ()");
    push("Claim type: ");
    push("Manifestations present:");
    push("- : present absent");
    push("Decision basis: ");
    push("Final Answer: 01");
    for kind in TargetKind::ALL {
        push(kind.display_name());
    }
    for claim in ClaimType::ALL {
        push(claim.display_name());
    }
    for category in Manifestation::ALL {
        push(category.display_name());
    }
    push(STEER_POSITIVE_LINE);
    push(STEER_NEGATIVE_LINE);
}

/// Deterministic char-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Builds the vocabulary from corpus texts plus the fixed template
    /// characters.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        template_chars(&mut set);
        for text in texts {
            set.extend(text.chars());
        }
        Self::from_chars(set.into_iter().collect())
    }

    /// Rebuilds a vocabulary from its id-ordered character list (checkpoint
    /// loading path). Duplicates are rejected by debug assertion only; the
    /// writer never produces them.
    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, c)| (*c, i + SPECIALS)).collect();
        Self { chars, index }
    }

    /// Characters in id order (excluding the two special ids).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Total vocabulary size including UNK and EOS.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn token_for(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.token_for(c)).collect()
    }

    /// Decodes tokens back to text, skipping UNK and EOS.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| t.checked_sub(SPECIALS).and_then(|i| self.chars.get(i)))
            .collect()
    }
}
