//! Structured reasoning schema: the slot-filling record a policy model emits
//! for every input, plus the renderers and parsers that move between records
//! and raw completion text.
//!
//! The completion format is a fixed-order block:
//!
//! ```text
//! Target referenced: specific group (politicians)
//! Claim type: moral judgment
//! Manifestations present:
//! - Stereotype: absent
//! - Vilification: present
//! - Dehumanization: absent
//! - Extreme Language and Absolutism: absent
//! - Lack of Empathy or Understanding: absent
//! - Invalidation: absent
//! Decision basis: Vilification of a named group.
//! Final Answer: 1
//! ```
//!
//! Two parsers exist on purpose. [`parse_completion`] is strict and recovers
//! the whole record or reports why it cannot; [`extract_label`] is lenient and
//! only recovers the final 0/1 label, which is all the classification metrics
//! need. A malformed completion is an explicit outcome, never silently fixed.

use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Binary polarization label. The only two inhabitants are 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonPolarized,
    Polarized,
}

impl Label {
    pub fn from_int(value: i64) -> Result<Self, SchemaError> {
        match value {
            0 => Ok(Label::NonPolarized),
            1 => Ok(Label::Polarized),
            other => Err(SchemaError::InvalidLabel(other)),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonPolarized => 0,
            Label::Polarized => 1,
        }
    }

    pub fn is_polarized(self) -> bool {
        matches!(self, Label::Polarized)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(deserializer)?;
        Label::from_int(v).map_err(serde::de::Error::custom)
    }
}

/// The six checklist categories marked present/absent in every record,
/// in canonical template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Manifestation {
    Stereotype,
    Vilification,
    Dehumanization,
    ExtremeLanguageAndAbsolutism,
    LackOfEmpathyOrUnderstanding,
    Invalidation,
}

impl Manifestation {
    pub const ALL: [Manifestation; 6] = [
        Manifestation::Stereotype,
        Manifestation::Vilification,
        Manifestation::Dehumanization,
        Manifestation::ExtremeLanguageAndAbsolutism,
        Manifestation::LackOfEmpathyOrUnderstanding,
        Manifestation::Invalidation,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Manifestation::Stereotype => "Stereotype",
            Manifestation::Vilification => "Vilification",
            Manifestation::Dehumanization => "Dehumanization",
            Manifestation::ExtremeLanguageAndAbsolutism => "Extreme Language and Absolutism",
            Manifestation::LackOfEmpathyOrUnderstanding => "Lack of Empathy or Understanding",
            Manifestation::Invalidation => "Invalidation",
        }
    }

    fn index(self) -> usize {
        Manifestation::ALL.iter().position(|m| *m == self).unwrap()
    }
}

/// Total map from [`Manifestation`] to present/absent. Totality is by
/// construction: every category always has an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ManifestationSet {
    present: [bool; 6],
}

impl ManifestationSet {
    /// All six categories absent.
    pub fn all_absent() -> Self {
        Self::default()
    }

    pub fn with(mut self, category: Manifestation, present: bool) -> Self {
        self.present[category.index()] = present;
        self
    }

    pub fn set(&mut self, category: Manifestation, present: bool) {
        self.present[category.index()] = present;
    }

    pub fn is_present(&self, category: Manifestation) -> bool {
        self.present[category.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Manifestation, bool)> + '_ {
        Manifestation::ALL.iter().map(move |m| (*m, self.is_present(*m)))
    }
}

/// Who or what the text targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    SpecificIndividual,
    SpecificGroup,
    None,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [
        TargetKind::SpecificIndividual,
        TargetKind::SpecificGroup,
        TargetKind::None,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            TargetKind::SpecificIndividual => "specific individual",
            TargetKind::SpecificGroup => "specific group",
            TargetKind::None => "none",
        }
    }
}

/// Target slot: a kind plus an optional free-text mention, rendered as
/// `specific group (politicians)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetRef {
    kind: TargetKind,
    mention: Option<String>,
}

impl TargetRef {
    /// Builds a target reference. The mention is trimmed; an empty mention
    /// collapses to `None`. Mentions must be a single line.
    pub fn new(kind: TargetKind, mention: Option<&str>) -> Result<Self, SchemaError> {
        let mention = match mention {
            None => None,
            Some(raw) => {
                if raw.contains('\n') || raw.contains('\r') {
                    return Err(SchemaError::MultilineField("target mention"));
                }
                let trimmed = raw.trim();
                if trimmed.is_empty() {
                    None
                } else {
                    Some(trimmed.to_string())
                }
            }
        };
        Ok(Self { kind, mention })
    }

    pub fn none() -> Self {
        Self { kind: TargetKind::None, mention: None }
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn mention(&self) -> Option<&str> {
        self.mention.as_deref()
    }

    fn render(&self) -> String {
        match &self.mention {
            Some(m) => format!("{} ({})", self.kind.display_name(), m),
            None => self.kind.display_name().to_string(),
        }
    }
}

/// The kind of claim the text makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimType {
    FactualDescription,
    MoralJudgment,
    EvaluativeOpinion,
    CallToAction,
    Other,
}

impl ClaimType {
    pub const ALL: [ClaimType; 5] = [
        ClaimType::FactualDescription,
        ClaimType::MoralJudgment,
        ClaimType::EvaluativeOpinion,
        ClaimType::CallToAction,
        ClaimType::Other,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            ClaimType::FactualDescription => "factual description",
            ClaimType::MoralJudgment => "moral judgment",
            ClaimType::EvaluativeOpinion => "evaluative opinion",
            ClaimType::CallToAction => "call to action",
            ClaimType::Other => "other",
        }
    }
}

/// The structured rationale plus final binary label for one input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningRecord {
    target: TargetRef,
    claim_type: ClaimType,
    manifestations: ManifestationSet,
    decision_basis: String,
    final_answer: Label,
}

impl ReasoningRecord {
    /// Builds a record. The decision basis is trimmed and must be a single
    /// line (it may be empty).
    pub fn new(
        target: TargetRef,
        claim_type: ClaimType,
        manifestations: ManifestationSet,
        decision_basis: &str,
        final_answer: Label,
    ) -> Result<Self, SchemaError> {
        if decision_basis.contains('\n') || decision_basis.contains('\r') {
            return Err(SchemaError::MultilineField("decision basis"));
        }
        Ok(Self {
            target,
            claim_type,
            manifestations,
            decision_basis: decision_basis.trim().to_string(),
            final_answer,
        })
    }

    pub fn target(&self) -> &TargetRef {
        &self.target
    }

    pub fn claim_type(&self) -> ClaimType {
        self.claim_type
    }

    pub fn manifestations(&self) -> &ManifestationSet {
        &self.manifestations
    }

    pub fn decision_basis(&self) -> &str {
        &self.decision_basis
    }

    pub fn final_answer(&self) -> Label {
        self.final_answer
    }
}

/// Which prompt the model sees. `Neutral` is used for SFT targets and for
/// evaluation; the steering variants only mine heterogeneous completions for
/// preference-pair construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Neutral,
    SteerPositive,
    SteerNegative,
}

impl PromptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Neutral => "neutral",
            PromptVariant::SteerPositive => "steer_positive",
            PromptVariant::SteerNegative => "steer_negative",
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(PromptVariant::Neutral),
            "steer_positive" => Ok(PromptVariant::SteerPositive),
            "steer_negative" => Ok(PromptVariant::SteerNegative),
            other => Err(SchemaError::InvalidVariant(other.to_string())),
        }
    }
}

/// Default instruction line prepended by the positive steering variant.
pub const STEER_POSITIVE_LINE: &str =
    "Note: this text likely exhibits polarization; verify against the checklist.";
/// Default instruction line prepended by the negative steering variant.
pub const STEER_NEGATIVE_LINE: &str =
    "Note: this text likely does not exhibit polarization; verify against the checklist.";

/// Errors from constructing schema values.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(i64),
    #[error("{0} must be a single line")]
    MultilineField(&'static str),
    #[error("unknown prompt variant {0:?}")]
    InvalidVariant(String),
}

/// Why a completion could not be used for strict record extraction.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MalformedCompletion {
    #[error("no final answer marker followed by 0 or 1")]
    MissingFinalAnswer,
    #[error("missing or unrecognized field: {0}")]
    MissingField(&'static str),
    #[error("manifestation {category:?} has value {value:?}, expected present/absent")]
    BadManifestationValue { category: Manifestation, value: String },
    #[error("final answer is ambiguous")]
    AmbiguousLabel,
}

impl MalformedCompletion {
    /// Stable reason code, used in audit output and tests.
    pub fn code(&self) -> &'static str {
        match self {
            MalformedCompletion::MissingFinalAnswer => "missing_final_answer",
            MalformedCompletion::MissingField(_) => "missing_field",
            MalformedCompletion::BadManifestationValue { .. } => "bad_manifestation_value",
            MalformedCompletion::AmbiguousLabel => "ambiguous_label",
        }
    }
}

/// Prompt renderer with configurable steering lines. [`render_prompt`] is the
/// common path with the default wording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRenderer {
    pub steer_positive_line: String,
    pub steer_negative_line: String,
}

impl Default for PromptRenderer {
    fn default() -> Self {
        Self {
            steer_positive_line: STEER_POSITIVE_LINE.to_string(),
            steer_negative_line: STEER_NEGATIVE_LINE.to_string(),
        }
    }
}

impl PromptRenderer {
    /// Renders the prompt for `text`. The text is embedded verbatim, byte for
    /// byte; steering variants prepend a single fixed instruction line.
    pub fn render(&self, text: &str, variant: PromptVariant) -> String {
        let neutral = format!("Input: {text}\nReasoning:");
        match variant {
            PromptVariant::Neutral => neutral,
            PromptVariant::SteerPositive => format!("{}\n{neutral}", self.steer_positive_line),
            PromptVariant::SteerNegative => format!("{}\n{neutral}", self.steer_negative_line),
        }
    }
}

/// Renders the prompt with the default steering wording. Pure and total.
pub fn render_prompt(text: &str, variant: PromptVariant) -> String {
    // Steering line construction is cheap; avoid allocating the renderer for
    // the neutral fast path.
    match variant {
        PromptVariant::Neutral => format!("Input: {text}\nReasoning:"),
        _ => PromptRenderer::default().render(text, variant),
    }
}

/// Renders the gold completion block for `record`. Field order and category
/// order are fixed; output is bit-stable across calls.
pub fn render_target_record(record: &ReasoningRecord) -> String {
    let mut out = String::with_capacity(320);
    out.push_str("Target referenced: ");
    out.push_str(&record.target.render());
    out.push_str("\nClaim type: ");
    out.push_str(record.claim_type.display_name());
    out.push_str("\nManifestations present:");
    for (category, present) in record.manifestations.iter() {
        out.push_str("\n- ");
        out.push_str(category.display_name());
        out.push_str(": ");
        out.push_str(if present { "present" } else { "absent" });
    }
    out.push_str("\nDecision basis: ");
    out.push_str(&record.decision_basis);
    out.push_str("\nFinal Answer: ");
    out.push_str(&record.final_answer.to_string());
    out
}

fn final_answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+answer").unwrap())
}

/// Characters allowed between the `Final Answer` marker and the digit.
fn skippable(c: char) -> bool {
    c.is_whitespace() || ":;*#-.,\"'`()[]=".contains(c) || c == '\u{2013}' || c == '\u{2014}'
}

/// Lenient label extraction: finds the last `Final Answer` marker followed,
/// after optional whitespace/punctuation, by a lone 0 or 1. Other fields may
/// be missing or malformed; only the label matters here.
pub fn extract_label(text: &str) -> Result<Label, MalformedCompletion> {
    let mut found = None;
    for m in final_answer_regex().find_iter(text) {
        let rest = &text[m.end()..];
        let mut chars = rest.chars();
        let mut digit = None;
        for c in chars.by_ref() {
            if skippable(c) {
                continue;
            }
            if c == '0' || c == '1' {
                digit = Some(c);
            }
            break;
        }
        let Some(d) = digit else { continue };
        // A following digit means this is part of a longer number, not a label.
        if chars.next().is_some_and(|c| c.is_ascii_digit()) {
            continue;
        }
        found = Some(if d == '1' { Label::Polarized } else { Label::NonPolarized });
    }
    found.ok_or(MalformedCompletion::MissingFinalAnswer)
}

/// Case-insensitive ASCII prefix strip.
fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    if line.len() < prefix.len() {
        return None;
    }
    let (head, rest) = line.split_at(prefix.len());
    if head.eq_ignore_ascii_case(prefix) {
        Some(rest)
    } else {
        None
    }
}

struct LineCursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        Self { lines, pos: 0 }
    }

    /// Next non-blank line, or None when exhausted.
    fn next_content_line(&mut self) -> Option<&'a str> {
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos].trim();
            self.pos += 1;
            if !line.is_empty() {
                return Some(line);
            }
        }
        None
    }
}

fn parse_target(value: &str) -> Option<TargetRef> {
    for kind in TargetKind::ALL {
        if let Some(rest) = strip_prefix_ci(value, kind.display_name()) {
            // Reject things like "nonexistent" where the kind is a word prefix.
            if !rest.is_empty() && !rest.starts_with([' ', '\t', '(']) {
                continue;
            }
            let mut mention = rest.trim();
            if mention.starts_with('(') && mention.ends_with(')') && mention.len() >= 2 {
                mention = mention[1..mention.len() - 1].trim();
            }
            let mention = if mention.is_empty() { None } else { Some(mention) };
            return TargetRef::new(kind, mention).ok();
        }
    }
    None
}

fn parse_claim(value: &str) -> Option<ClaimType> {
    let value = value.trim();
    ClaimType::ALL
        .into_iter()
        .find(|c| value.eq_ignore_ascii_case(c.display_name()))
}

/// Strict parse of the label value on the `Final Answer` line itself.
fn parse_strict_answer(rest: &str) -> Result<Label, MalformedCompletion> {
    let mut value = rest.trim_start();
    if let Some(stripped) = value.strip_prefix(':') {
        value = stripped.trim_start();
    }
    match value.trim_end() {
        "0" => Ok(Label::NonPolarized),
        "1" => Ok(Label::Polarized),
        _ => Err(MalformedCompletion::AmbiguousLabel),
    }
}

/// Strict structural parse of a completion into a [`ReasoningRecord`].
///
/// All template fields must be present, in order, with the six manifestation
/// lines in canonical order. Field labels are matched case-insensitively and
/// values are trimmed; blank lines between fields are tolerated, as is a
/// leading `Reasoning:` echo. Deterministic: identical bytes always parse to
/// the identical outcome.
pub fn parse_completion(text: &str) -> Result<ReasoningRecord, MalformedCompletion> {
    // A completion with no recoverable label anywhere is reported as
    // missing_final_answer even when earlier fields are also absent.
    let lenient_label = extract_label(text)?;

    let mut cursor = LineCursor::new(text);

    let mut line = cursor
        .next_content_line()
        .ok_or(MalformedCompletion::MissingField("Target referenced"))?;
    // Models sometimes echo the prompt's trailing "Reasoning:" marker.
    if line.eq_ignore_ascii_case("reasoning:") || line.eq_ignore_ascii_case("reasoning") {
        line = cursor
            .next_content_line()
            .ok_or(MalformedCompletion::MissingField("Target referenced"))?;
    }

    let target_value = strip_prefix_ci(line, "target referenced:")
        .ok_or(MalformedCompletion::MissingField("Target referenced"))?;
    let target = parse_target(target_value.trim())
        .ok_or(MalformedCompletion::MissingField("Target referenced"))?;

    let line = cursor
        .next_content_line()
        .ok_or(MalformedCompletion::MissingField("Claim type"))?;
    let claim_value =
        strip_prefix_ci(line, "claim type:").ok_or(MalformedCompletion::MissingField("Claim type"))?;
    let claim_type =
        parse_claim(claim_value).ok_or(MalformedCompletion::MissingField("Claim type"))?;

    let line = cursor
        .next_content_line()
        .ok_or(MalformedCompletion::MissingField("Manifestations present"))?;
    strip_prefix_ci(line, "manifestations present:")
        .ok_or(MalformedCompletion::MissingField("Manifestations present"))?;

    let mut manifestations = ManifestationSet::all_absent();
    for category in Manifestation::ALL {
        let line = cursor
            .next_content_line()
            .ok_or(MalformedCompletion::MissingField(category.display_name()))?;
        let item = line
            .strip_prefix('-')
            .map(str::trim_start)
            .ok_or(MalformedCompletion::MissingField(category.display_name()))?;
        let value = strip_prefix_ci(item, category.display_name())
            .and_then(|rest| {
                let rest = rest.trim_start();
                rest.strip_prefix(':')
            })
            .ok_or(MalformedCompletion::MissingField(category.display_name()))?;
        let value = value.trim();
        let present = if value.eq_ignore_ascii_case("present") {
            true
        } else if value.eq_ignore_ascii_case("absent") {
            false
        } else {
            return Err(MalformedCompletion::BadManifestationValue {
                category,
                value: value.to_string(),
            });
        };
        manifestations.set(category, present);
    }

    let line = cursor
        .next_content_line()
        .ok_or(MalformedCompletion::MissingField("Decision basis"))?;
    let basis = strip_prefix_ci(line, "decision basis:")
        .ok_or(MalformedCompletion::MissingField("Decision basis"))?;

    let line = cursor
        .next_content_line()
        .ok_or(MalformedCompletion::MissingFinalAnswer)?;
    let answer_rest = strip_prefix_ci(line, "final answer")
        .ok_or(MalformedCompletion::MissingFinalAnswer)?;
    let final_answer = parse_strict_answer(answer_rest)?;

    // Any later marker that disagrees with the structural label (trailing
    // template echoes, for instance) makes the label ambiguous, keeping the
    // strict and lenient parsers in agreement whenever both succeed.
    if lenient_label != final_answer {
        return Err(MalformedCompletion::AmbiguousLabel);
    }

    ReasoningRecord::new(target, claim_type, manifestations, basis.trim(), final_answer)
        .map_err(|_| MalformedCompletion::MissingField("Decision basis"))
}
