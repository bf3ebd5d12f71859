//! Dialog corpora: ontology, belief states, goals, turns, and the JSON corpus
//! file format, plus delexicalization and deterministic splitting.
//!
//! Synthetic corpus generation lives in [`crate::synth`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::Entity;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("invalid ontology: {0}")]
    Ontology(String),
    #[error("dialog {dialog}: ontology violation for ({domain}, {slot}, {value:?}): {reason}")]
    OntologyViolation {
        dialog: String,
        domain: String,
        slot: String,
        value: String,
        reason: &'static str,
    },
    #[error("dialog {dialog}: turn {turn}: {reason}")]
    Alternation {
        dialog: String,
        turn: usize,
        reason: String,
    },
    #[error("dialog {dialog}: invalid goal: {reason}")]
    Goal { dialog: String, reason: String },
    #[error("duplicate dialog id {0}")]
    DuplicateId(String),
    #[error("invalid split fractions {0:?}: each must be positive and the sum at most 1")]
    Fractions((f64, f64, f64)),
}

/// Informable slots with their finite value lists and requestable attributes
/// for one domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub slots: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub requestable: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub domains: BTreeMap<String, DomainSchema>,
}

impl Ontology {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (domain, schema) in &self.domains {
            if !is_identifier(domain) {
                return Err(CorpusError::Ontology(format!(
                    "domain name {domain:?} must be lowercase alphanumeric"
                )));
            }
            for (slot, values) in &schema.slots {
                if values.is_empty() {
                    return Err(CorpusError::Ontology(format!(
                        "({domain}, {slot}) has an empty value list"
                    )));
                }
                let mut seen = BTreeSet::new();
                for v in values {
                    let key = normalize_value(v);
                    if key.is_empty() {
                        return Err(CorpusError::Ontology(format!(
                            "({domain}, {slot}) has an empty value"
                        )));
                    }
                    if !seen.insert(key) {
                        return Err(CorpusError::Ontology(format!(
                            "({domain}, {slot}) lists {v:?} twice"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.domains
            .get(domain)
            .is_some_and(|d| d.slots.contains_key(slot))
    }

    pub fn is_requestable(&self, domain: &str, slot: &str) -> bool {
        self.domains
            .get(domain)
            .is_some_and(|d| d.requestable.contains(slot) || d.slots.contains_key(slot))
    }

    /// Canonical surface form of `value` if it belongs to the slot's value list.
    pub fn canonical_value(&self, domain: &str, slot: &str, value: &str) -> Option<&str> {
        let key = normalize_value(value);
        self.domains
            .get(domain)?
            .slots
            .get(slot)?
            .iter()
            .find(|v| normalize_value(v) == key)
            .map(String::as_str)
    }

    /// Union of two ontologies. Value lists of shared slots are merged.
    pub fn merge(&self, other: &Ontology) -> Ontology {
        let mut out = self.clone();
        for (domain, schema) in &other.domains {
            let entry = out.domains.entry(domain.clone()).or_default();
            for (slot, values) in &schema.slots {
                let list = entry.slots.entry(slot.clone()).or_default();
                for v in values {
                    if !list.iter().any(|x| normalize_value(x) == normalize_value(v)) {
                        list.push(v.clone());
                    }
                }
            }
            entry.requestable.extend(schema.requestable.iter().cloned());
        }
        out
    }
}

/// Per-domain slot→value pairs. `BTreeMap` gives the canonical alphabetical
/// ordering by domain, then slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState {
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(BTreeMap::is_empty)
    }

    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) {
        self.entries
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value.to_string());
    }

    pub fn remove(&mut self, domain: &str, slot: &str) -> Option<String> {
        let slots = self.entries.get_mut(domain)?;
        let old = slots.remove(slot);
        if slots.is_empty() {
            self.entries.remove(domain);
        }
        old
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.entries.get(domain)?.get(slot).map(String::as_str)
    }

    pub fn domain(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.entries.get(domain)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries.iter().flat_map(|(d, slots)| {
            slots
                .iter()
                .map(move |(s, v)| (d.as_str(), s.as_str(), v.as_str()))
        })
    }

    /// Lowercased, whitespace-normalized copy with empty domains dropped.
    pub fn canonical(&self) -> BeliefState {
        let mut out = BeliefState::new();
        for (d, s, v) in self.iter() {
            let v = normalize_value(v);
            if !v.is_empty() {
                out.insert(&normalize_value(d), &normalize_value(s), &v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub requests: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalSpec {
    pub domains: BTreeMap<String, DomainGoal>,
}

impl GoalSpec {
    pub fn constrained_domains(&self) -> impl Iterator<Item = (&str, &DomainGoal)> {
        self.domains
            .iter()
            .filter(|(_, g)| !g.constraints.is_empty())
            .map(|(d, g)| (d.as_str(), g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::System => f.write_str("system"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief: Option<BeliefState>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
            delex: None,
            belief: None,
        }
    }

    pub fn system(text: impl Into<String>, delex: impl Into<String>, belief: BeliefState) -> Self {
        Turn {
            role: Role::System,
            text: text.into(),
            delex: Some(delex.into()),
            belief: Some(belief),
        }
    }

    /// The form a turn takes inside the model's dialog history: user turns
    /// verbatim, system turns delexicalized.
    pub fn history_text(&self) -> &str {
        match self.role {
            Role::User => &self.text,
            Role::System => self.delex.as_deref().unwrap_or(&self.text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub goal: GoalSpec,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Indices of system turns; each one is a training/evaluation example.
    pub fn system_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::System)
            .map(|(i, _)| i)
    }

    pub fn final_belief(&self) -> BeliefState {
        self.turns
            .iter()
            .rev()
            .find_map(|t| t.belief.clone())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub ontology: Ontology,
    pub dialogs: Vec<Dialog>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    schema_version: u32,
    #[serde(flatten)]
    corpus: Corpus,
}

/// Non-fatal findings from corpus validation.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationWarning {
    /// A later belief dropped a slot or domain present earlier (a goal change).
    NonMonotoneBelief {
        dialog: String,
        turn: usize,
        domain: String,
        slot: String,
    },
}

impl fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationWarning::NonMonotoneBelief {
                dialog,
                turn,
                domain,
                slot,
            } => write!(
                f,
                "dialog {dialog}: turn {turn} drops ({domain}, {slot}) from the belief state"
            ),
        }
    }
}

impl Corpus {
    pub fn empty(name: &str, ontology: Ontology) -> Self {
        Corpus {
            name: name.to_string(),
            ontology,
            dialogs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<Vec<ValidationWarning>, CorpusError> {
        self.ontology.validate()?;
        let mut warnings = Vec::new();
        let mut ids = BTreeSet::new();
        for dialog in &self.dialogs {
            if !ids.insert(dialog.id.as_str()) {
                return Err(CorpusError::DuplicateId(dialog.id.clone()));
            }
            validate_dialog(dialog, &self.ontology, &mut warnings)?;
        }
        Ok(warnings)
    }

    /// Concatenate corpora under a merged ontology.
    pub fn concat(name: &str, parts: &[Corpus]) -> Corpus {
        let ontology = parts
            .iter()
            .fold(Ontology::default(), |acc, c| acc.merge(&c.ontology));
        Corpus {
            name: name.to_string(),
            ontology,
            dialogs: parts.iter().flat_map(|c| c.dialogs.iter().cloned()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            schema_version: SCHEMA_VERSION,
            corpus: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("corpus serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_json()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<(Corpus, Vec<ValidationWarning>), CorpusError> {
        let file: CorpusFile = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CorpusError::SchemaVersion(file.schema_version));
        }
        let warnings = file.corpus.validate()?;
        Ok((file.corpus, warnings))
    }
}

fn validate_dialog(
    dialog: &Dialog,
    ontology: &Ontology,
    warnings: &mut Vec<ValidationWarning>,
) -> Result<(), CorpusError> {
    let alternation = |turn: usize, reason: &str| CorpusError::Alternation {
        dialog: dialog.id.clone(),
        turn,
        reason: reason.to_string(),
    };
    let violation = |domain: &str, slot: &str, value: &str, reason: &'static str| {
        CorpusError::OntologyViolation {
            dialog: dialog.id.clone(),
            domain: domain.to_string(),
            slot: slot.to_string(),
            value: value.to_string(),
            reason,
        }
    };

    if dialog.goal.constrained_domains().next().is_none() {
        return Err(CorpusError::Goal {
            dialog: dialog.id.clone(),
            reason: "no constrained domain".into(),
        });
    }
    for (domain, goal) in &dialog.goal.domains {
        for (slot, value) in &goal.constraints {
            if !ontology.has_slot(domain, slot) {
                return Err(violation(domain, slot, value, "unknown goal slot"));
            }
            if ontology.canonical_value(domain, slot, value).is_none() {
                return Err(violation(domain, slot, value, "goal value not in ontology"));
            }
        }
        for slot in &goal.requests {
            if !ontology.is_requestable(domain, slot) {
                return Err(violation(domain, slot, "", "slot is not requestable"));
            }
        }
    }

    let mut previous: Option<&BeliefState> = None;
    let mut system_turns = 0;
    for (i, turn) in dialog.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::System };
        if turn.role != expected {
            return Err(alternation(i, &format!("expected a {expected} turn")));
        }
        match turn.role {
            Role::User => {
                if turn.belief.is_some() || turn.delex.is_some() {
                    return Err(alternation(i, "user turns carry no belief or delex"));
                }
            }
            Role::System => {
                system_turns += 1;
                let (Some(belief), Some(_)) = (&turn.belief, &turn.delex) else {
                    return Err(alternation(i, "system turns carry belief and delex"));
                };
                for (domain, slot, value) in belief.iter() {
                    if !ontology.has_slot(domain, slot) {
                        return Err(violation(domain, slot, value, "unknown slot"));
                    }
                    if value.trim().is_empty() {
                        return Err(violation(domain, slot, value, "empty value"));
                    }
                    if ontology.canonical_value(domain, slot, value).is_none() {
                        return Err(violation(domain, slot, value, "value not in ontology"));
                    }
                }
                if let Some(prev) = previous {
                    for (domain, slot, _) in prev.iter() {
                        if belief.get(domain, slot).is_none() {
                            warnings.push(ValidationWarning::NonMonotoneBelief {
                                dialog: dialog.id.clone(),
                                turn: i,
                                domain: domain.to_string(),
                                slot: slot.to_string(),
                            });
                        }
                    }
                }
                previous = Some(belief);
            }
        }
    }
    if system_turns == 0 {
        return Err(alternation(dialog.turns.len(), "dialog has no system turn"));
    }
    Ok(())
}

/// Load and validate a corpus file. Monotonicity findings are logged, not fatal.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (corpus, warnings) = Corpus::from_json(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(corpus)
}

/// Deterministic shuffled split into (train, valid, test) by dialog.
pub fn split(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (a, b, c) = fractions;
    let ok = [a, b, c].iter().all(|f| f.is_finite() && *f > 0.0) && a + b + c <= 1.0 + 1e-9;
    if !ok {
        return Err(CorpusError::Fractions(fractions));
    }
    let n = corpus.dialogs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);
    let n_test = ((c * n as f64).round() as usize).min(n - n_train - n_valid);

    let take = |suffix: &str, idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            name: format!("{}-{suffix}", corpus.name),
            ontology: corpus.ontology.clone(),
            dialogs: idx.iter().map(|&i| corpus.dialogs[i].clone()).collect(),
        }
    };
    Ok((
        take("train", &order[..n_train]),
        take("valid", &order[n_train..n_train + n_valid]),
        take("test", &order[n_train + n_valid..n_train + n_valid + n_test]),
    ))
}

/// Lowercase and collapse whitespace.
pub fn normalize_value(v: &str) -> String {
    v.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

/// Placeholder token name (without brackets) for a slot: informable slots use
/// `value_<slot>`, entity attributes use `<domain>_<slot>`.
pub fn placeholder_name(ontology: &Ontology, domain: &str, slot: &str) -> String {
    if slot != "name" && ontology.has_slot(domain, slot) {
        format!("value_{slot}")
    } else {
        format!("{domain}_{slot}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delexicalized {
    pub delex: String,
    /// Placeholder name (without brackets) to the first surface string it replaced.
    pub bindings: BTreeMap<String, String>,
}

/// Replace entity fields and ontology values with typed placeholders.
///
/// Matching is case-insensitive over whitespace-normalized text and respects
/// word boundaries. At each position the longest candidate wins; on equal
/// length an entity field beats an ontology value. Existing `[...]`
/// placeholders are skipped, so the operation is idempotent.
pub fn delexicalize(text: &str, entity: Option<&Entity>, ontology: &Ontology) -> Delexicalized {
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = normalized.chars().collect();
    let folded: Vec<char> = chars.iter().map(|&c| fold_char(c)).collect();

    // (pattern, placeholder, priority): lower priority wins ties.
    let mut candidates: Vec<(Vec<char>, String, u8)> = Vec::new();
    if let Some(e) = entity {
        for (slot, value) in &e.fields {
            let pattern = fold(value);
            if !pattern.is_empty() {
                candidates.push((pattern, placeholder_name(ontology, &e.domain, slot), 0));
            }
        }
    }
    for (domain, schema) in &ontology.domains {
        for (slot, values) in &schema.slots {
            for value in values {
                let pattern = fold(value);
                if !pattern.is_empty() {
                    candidates.push((pattern, placeholder_name(ontology, domain, slot), 1));
                }
            }
        }
    }

    let mut out = String::with_capacity(normalized.len());
    let mut bindings = BTreeMap::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '[' {
            if let Some(end) = placeholder_end(&chars, i) {
                out.extend(&chars[i..=end]);
                i = end + 1;
                continue;
            }
        }
        let at_boundary = i == 0 || !chars[i - 1].is_alphanumeric();
        let mut best: Option<(usize, &str, u8)> = None;
        if at_boundary {
            for (pattern, name, prio) in &candidates {
                let len = pattern.len();
                if i + len > chars.len() || folded[i..i + len] != pattern[..] {
                    continue;
                }
                if i + len < chars.len() && chars[i + len].is_alphanumeric() {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((blen, _, bprio)) => len > blen || (len == blen && *prio < bprio),
                };
                if better {
                    best = Some((len, name, *prio));
                }
            }
        }
        match best {
            Some((len, name, _)) => {
                let surface: String = chars[i..i + len].iter().collect();
                bindings.entry(name.to_string()).or_insert(surface);
                out.push('[');
                out.push_str(name);
                out.push(']');
                i += len;
            }
            None => {
                out.push(chars[i]);
                i += 1;
            }
        }
    }
    Delexicalized {
        delex: out,
        bindings,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicalized {
    pub text: String,
    /// Placeholder names that could not be filled; left verbatim in `text`.
    pub unresolved: Vec<String>,
}

/// Fill placeholders from the offered entity first, then the belief state.
pub fn lexicalize(delex: &str, entity: Option<&Entity>, belief: &BeliefState) -> Lexicalized {
    let chars: Vec<char> = delex.chars().collect();
    let mut out = String::with_capacity(delex.len());
    let mut unresolved = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '[' {
            if let Some(end) = placeholder_end(&chars, i) {
                let name: String = chars[i + 1..end].iter().collect();
                match resolve_placeholder(&name, entity, belief) {
                    Some(v) => out.push_str(&v),
                    None => {
                        out.extend(&chars[i..=end]);
                        unresolved.push(name);
                    }
                }
                i = end + 1;
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    Lexicalized {
        text: out,
        unresolved,
    }
}

fn resolve_placeholder(name: &str, entity: Option<&Entity>, belief: &BeliefState) -> Option<String> {
    let (prefix, slot) = name.split_once('_')?;
    if prefix == "value" {
        if let Some(v) = entity.and_then(|e| e.fields.get(slot)) {
            return Some(v.clone());
        }
        // Prefer the entity's domain in the belief, then any domain.
        if let Some(v) = entity.and_then(|e| belief.get(&e.domain, slot)) {
            return Some(v.to_string());
        }
        return belief
            .entries
            .values()
            .find_map(|slots| slots.get(slot).cloned());
    }
    let e = entity.filter(|e| e.domain == prefix)?;
    e.fields.get(slot).cloned()
}

/// Placeholder names appearing in a delexicalized utterance.
pub fn placeholders(delex: &str) -> Vec<String> {
    let chars: Vec<char> = delex.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '[' {
            if let Some(end) = placeholder_end(&chars, i) {
                out.push(chars[i + 1..end].iter().collect());
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Index of the closing bracket if `chars[start..]` begins a well-formed
/// `[prefix_slot]` placeholder.
fn placeholder_end(chars: &[char], start: usize) -> Option<usize> {
    let mut underscore = false;
    for (offset, &c) in chars[start + 1..].iter().enumerate() {
        let j = start + 1 + offset;
        match c {
            ']' => return (underscore && j > start + 1 && chars[j - 1] != '_').then_some(j),
            '_' if j > start + 1 => underscore = true,
            c if c.is_ascii_lowercase() || c.is_ascii_digit() => {}
            _ => return None,
        }
    }
    None
}

fn fold_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

fn fold(s: &str) -> Vec<char> {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .map(fold_char)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ontology() -> Ontology {
        let mut slots = BTreeMap::new();
        slots.insert(
            "food".to_string(),
            vec!["chinese".into(), "north indian".into(), "italian".into()],
        );
        slots.insert(
            "area".to_string(),
            vec!["north".into(), "centre".into(), "east".into()],
        );
        let mut domains = BTreeMap::new();
        domains.insert(
            "restaurant".to_string(),
            DomainSchema {
                slots,
                requestable: ["phone".to_string(), "address".to_string()].into(),
            },
        );
        Ontology { domains }
    }

    fn golden_house() -> Entity {
        Entity::new(
            "restaurant",
            "r1",
            [("name", "Golden House"), ("food", "chinese"), ("area", "north")],
        )
    }

    #[test]
    fn delexicalizes_entity_name_and_value() {
        let d = delexicalize(
            "The Golden House is a great chinese restaurant",
            Some(&golden_house()),
            &ontology(),
        );
        assert_eq!(d.delex, "The [restaurant_name] is a great [value_food] restaurant");
        assert_eq!(d.bindings["restaurant_name"], "Golden House");
        assert_eq!(d.bindings["value_food"], "chinese");
    }

    #[test]
    fn no_match_is_identity() {
        let d = delexicalize("hello there", None, &ontology());
        assert_eq!(d.delex, "hello there");
        assert!(d.bindings.is_empty());
    }

    /// Oracle: enumerate every substring at word boundaries, take the
    /// leftmost-longest candidate.
    fn longest_match_oracle(text: &str, values: &[(&str, &str)]) -> String {
        let words: Vec<&str> = text.split(' ').collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut best: Option<(usize, &str)> = None;
            for j in (i + 1..=words.len()).rev() {
                let span = words[i..j].join(" ");
                if let Some((_, ph)) = values.iter().find(|(v, _)| *v == span) {
                    best = Some((j, ph));
                    break;
                }
            }
            match best {
                Some((j, ph)) => {
                    out.push(format!("[{ph}]"));
                    i = j;
                }
                None => {
                    out.push(words[i].to_string());
                    i += 1;
                }
            }
        }
        out.join(" ")
    }

    #[test]
    fn overlapping_values_take_longest_match() {
        let text = "i want north indian food in the north";
        let values = [
            ("north", "value_area"),
            ("north indian", "value_food"),
            ("chinese", "value_food"),
        ];
        let expected = longest_match_oracle(text, &values);
        assert_eq!(expected, "i want [value_food] food in the [value_area]");
        assert_eq!(delexicalize(text, None, &ontology()).delex, expected);
    }

    #[test]
    fn matching_respects_word_boundaries_and_case() {
        let d = delexicalize("Northern food? No, NORTH   please.", None, &ontology());
        assert_eq!(d.delex, "Northern food? No, [value_area] please.");
        assert_eq!(d.bindings["value_area"], "NORTH");
    }

    #[test]
    fn delexicalize_is_idempotent() {
        let e = golden_house();
        let once = delexicalize("Golden House serves chinese food in the north", Some(&e), &ontology());
        let twice = delexicalize(&once.delex, Some(&e), &ontology());
        assert_eq!(once.delex, twice.delex);
        assert!(twice.bindings.is_empty());
    }

    #[test]
    fn lexicalize_fills_from_entity() {
        let l = lexicalize(
            "[restaurant_name] serves [value_food]",
            Some(&golden_house()),
            &BeliefState::new(),
        );
        assert_eq!(l.text, "Golden House serves chinese");
        assert!(l.unresolved.is_empty());
    }

    #[test]
    fn lexicalize_without_placeholders_is_identity() {
        let l = lexicalize("see you soon .", None, &BeliefState::new());
        assert_eq!(l.text, "see you soon .");
    }

    #[test]
    fn lexicalize_reports_unresolved() {
        let l = lexicalize("[restaurant_phone]", Some(&golden_house()), &BeliefState::new());
        assert_eq!(l.text, "[restaurant_phone]");
        assert_eq!(l.unresolved, vec!["restaurant_phone".to_string()]);
    }

    #[test]
    fn lexicalize_falls_back_to_belief() {
        let mut b = BeliefState::new();
        b.insert("restaurant", "area", "centre");
        let l = lexicalize("in the [value_area] .", None, &b);
        assert_eq!(l.text, "in the centre .");
    }

    fn tiny_corpus(n: usize) -> Corpus {
        let mut corpus = Corpus::empty("tiny", ontology());
        for i in 0..n {
            let mut goal = GoalSpec::default();
            goal.domains.insert(
                "restaurant".into(),
                DomainGoal {
                    constraints: [("food".to_string(), "chinese".to_string())].into(),
                    requests: vec![],
                },
            );
            let mut b = BeliefState::new();
            b.insert("restaurant", "food", "chinese");
            corpus.dialogs.push(Dialog {
                id: format!("d{i:03}"),
                goal,
                turns: vec![
                    Turn::user("chinese food please"),
                    Turn::system("ok", "ok", b),
                ],
            });
        }
        corpus
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = tiny_corpus(100);
        let (a, b, t) = split(&c, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.dialogs.len(), b.dialogs.len(), t.dialogs.len()), (80, 10, 10));
        let again = split(&c, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, again.0);
        assert_eq!(t, again.2);
        let mut ids: Vec<_> = a
            .dialogs
            .iter()
            .chain(&b.dialogs)
            .chain(&t.dialogs)
            .map(|d| d.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let c = tiny_corpus(10);
        assert!(matches!(
            split(&c, (0.9, 0.9, 0.1), 0),
            Err(CorpusError::Fractions(_))
        ));
        assert!(split(&c, (0.5, 0.0, 0.1), 0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let c = tiny_corpus(2);
        let (back, warnings) = Corpus::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(warnings.is_empty());
    }

    #[test]
    fn empty_dialog_list_is_valid() {
        let c = tiny_corpus(0);
        let (back, _) = Corpus::from_json(&c.to_json()).unwrap();
        assert!(back.dialogs.is_empty());
    }

    #[test]
    fn unknown_slot_is_an_ontology_violation() {
        let mut c = tiny_corpus(1);
        let mut b = BeliefState::new();
        b.insert("restaurant", "colour", "red");
        c.dialogs[0].turns[1].belief = Some(b);
        let err = Corpus::from_json(&c.to_json()).unwrap_err();
        match err {
            CorpusError::OntologyViolation { slot, value, .. } => {
                assert_eq!(slot, "colour");
                assert_eq!(value, "red");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn alternation_is_enforced() {
        let mut c = tiny_corpus(1);
        c.dialogs[0].turns.swap(0, 1);
        assert!(matches!(
            Corpus::from_json(&c.to_json()),
            Err(CorpusError::Alternation { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = Corpus::from_json("{\n  \"schema_version\": 1,\n  oops").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }));
    }

    #[test]
    fn dropped_slot_is_a_warning() {
        let mut c = tiny_corpus(1);
        let d = &mut c.dialogs[0];
        d.turns.push(Turn::user("anything"));
        d.turns
            .push(Turn::system("ok", "ok", BeliefState::new()));
        let warnings = c.validate().unwrap();
        assert_eq!(warnings.len(), 1);
    }
}
