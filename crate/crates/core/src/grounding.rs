//! Deterministic database lookup: belief state → matching entities → DB state.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::{normalize_value, BeliefState};

pub const DB_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("db_state for {expected:?} received an entity of domain {found:?}")]
    MixedDomain { expected: String, found: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid database file: {0}")]
    Format(String),
    #[error("duplicate entity id {id:?} in domain {domain:?}")]
    DuplicateId { domain: String, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub domain: String,
    /// Slot → value, including `name`.
    pub fields: BTreeMap<String, String>,
}

impl Entity {
    pub fn new<'a>(
        domain: &str,
        id: &str,
        fields: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        Entity {
            id: id.to_string(),
            domain: domain.to_string(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.fields.get("name").map(String::as_str)
    }

    /// True iff every constraint matches a field after normalization.
    pub fn satisfies(&self, constraints: &BTreeMap<String, String>) -> bool {
        constraints.iter().all(|(slot, value)| {
            self.fields
                .get(slot)
                .is_some_and(|f| normalize_value(f) == normalize_value(value))
        })
    }
}

/// Per-domain entity lists, each sorted ascending by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Database {
    domains: BTreeMap<String, Vec<Entity>>,
}

impl Database {
    pub fn new(entities: impl IntoIterator<Item = Entity>) -> Result<Self, GroundingError> {
        let mut domains: BTreeMap<String, Vec<Entity>> = BTreeMap::new();
        for e in entities {
            domains.entry(e.domain.clone()).or_default().push(e);
        }
        for (domain, list) in domains.iter_mut() {
            list.sort_by(|a, b| a.id.cmp(&b.id));
            if let Some(w) = list.windows(2).find(|w| w[0].id == w[1].id) {
                return Err(GroundingError::DuplicateId {
                    domain: domain.clone(),
                    id: w[0].id.clone(),
                });
            }
        }
        Ok(Database { domains })
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn entities(&self, domain: &str) -> Option<&[Entity]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, domain: &str, id: &str) -> Option<&Entity> {
        let list = self.domains.get(domain)?;
        list.binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &list[i])
    }

    pub fn merge(&self, other: &Database) -> Result<Database, GroundingError> {
        Database::new(
            self.domains
                .values()
                .chain(other.domains.values())
                .flatten()
                .cloned(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, GroundingError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| GroundingError::Format(e.to_string()))?;
        let Value::Object(top) = value else {
            return Err(GroundingError::Format("top level must be an object".into()));
        };
        match top.get("schema_version").and_then(Value::as_u64) {
            Some(DB_SCHEMA_VERSION) => {}
            other => {
                return Err(GroundingError::Format(format!(
                    "schema_version must be {DB_SCHEMA_VERSION}, found {other:?}"
                )))
            }
        }
        let mut entities = Vec::new();
        for (domain, list) in &top {
            if domain == "schema_version" {
                continue;
            }
            let Value::Array(list) = list else {
                return Err(GroundingError::Format(format!("{domain}: expected a list")));
            };
            for item in list {
                let Value::Object(obj) = item else {
                    return Err(GroundingError::Format(format!("{domain}: expected objects")));
                };
                let mut id = None;
                let mut fields = BTreeMap::new();
                for (k, v) in obj {
                    let v = match v {
                        Value::String(s) => s.clone(),
                        Value::Number(n) => n.to_string(),
                        _ => {
                            return Err(GroundingError::Format(format!(
                                "{domain}: field {k} must be a string"
                            )))
                        }
                    };
                    if k == "id" {
                        id = Some(v);
                    } else {
                        fields.insert(k.clone(), v);
                    }
                }
                let id = id.ok_or_else(|| GroundingError::Format(format!("{domain}: entity without id")))?;
                if !fields.contains_key("name") {
                    return Err(GroundingError::Format(format!(
                        "{domain}/{id}: entity without a name field"
                    )));
                }
                entities.push(Entity {
                    id,
                    domain: domain.clone(),
                    fields,
                });
            }
        }
        Database::new(entities)
    }

    pub fn to_json(&self) -> String {
        let mut top = Map::new();
        top.insert("schema_version".into(), Value::from(DB_SCHEMA_VERSION));
        for (domain, list) in &self.domains {
            let items = list
                .iter()
                .map(|e| {
                    let mut obj = Map::new();
                    obj.insert("id".into(), Value::String(e.id.clone()));
                    for (k, v) in &e.fields {
                        obj.insert(k.clone(), Value::String(v.clone()));
                    }
                    Value::Object(obj)
                })
                .collect();
            top.insert(domain.clone(), Value::Array(items));
        }
        serde_json::to_string_pretty(&Value::Object(top)).expect("database serializes")
    }

    pub fn load(path: &Path) -> Result<Self, GroundingError> {
        let text = fs::read_to_string(path).map_err(|source| GroundingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), GroundingError> {
        fs::write(path, self.to_json()).map_err(|source| GroundingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Anything that can answer belief-state queries. The decoder is generic over
/// this so tests can observe the lookups it performs.
pub trait KnowledgeBase {
    fn lookup(&self, belief: &BeliefState, domain: &str) -> Result<Vec<Entity>, GroundingError>;
    fn default_domain(&self) -> Option<String>;
}

impl KnowledgeBase for Database {
    fn lookup(&self, belief: &BeliefState, domain: &str) -> Result<Vec<Entity>, GroundingError> {
        query(self, belief, domain).map(|v| v.into_iter().cloned().collect())
    }

    fn default_domain(&self) -> Option<String> {
        self.domains.keys().next().cloned()
    }
}

/// Entities of `domain` matching every belief constraint for that domain,
/// ascending by id.
pub fn query<'a>(
    db: &'a Database,
    belief: &BeliefState,
    domain: &str,
) -> Result<Vec<&'a Entity>, GroundingError> {
    let entities = db
        .entities(domain)
        .ok_or_else(|| GroundingError::UnknownDomain(domain.to_string()))?;
    let empty = BTreeMap::new();
    let constraints: Vec<(&str, String)> = belief
        .domain(domain)
        .unwrap_or(&empty)
        .iter()
        .map(|(s, v)| (s.as_str(), normalize_value(v)))
        .collect();
    Ok(entities
        .iter()
        .filter(|e| {
            constraints.iter().all(|(slot, want)| {
                e.fields
                    .get(*slot)
                    .is_some_and(|have| normalize_value(have) == *want)
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = ">3")]
    MoreThanThree,
}

impl Bucket {
    pub fn of(count: usize) -> Self {
        match count {
            0 => Bucket::Zero,
            1 => Bucket::One,
            2 => Bucket::Two,
            3 => Bucket::Three,
            _ => Bucket::MoreThanThree,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Zero => "0",
            Bucket::One => "1",
            Bucket::Two => "2",
            Bucket::Three => "3",
            Bucket::MoreThanThree => ">3",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbState {
    pub domain: String,
    pub match_count: usize,
    pub bucket: Bucket,
    /// Canonical surface form, e.g. `Restaurant 1 match`.
    pub text: String,
}

impl DbState {
    pub fn from_count(domain: &str, match_count: usize) -> Self {
        let bucket = Bucket::of(match_count);
        DbState {
            domain: domain.to_string(),
            match_count,
            bucket,
            text: format!("{} {bucket} match", capitalize(domain)),
        }
    }
}

pub fn db_state(matches: &[Entity], domain: &str) -> Result<DbState, GroundingError> {
    if let Some(e) = matches.iter().find(|e| e.domain != domain) {
        return Err(GroundingError::MixedDomain {
            expected: domain.to_string(),
            found: e.domain.clone(),
        });
    }
    Ok(DbState::from_count(domain, matches.len()))
}

/// The entity a system turn offers: the first match in id order.
pub fn select_offer(matches: &[Entity]) -> Option<&Entity> {
    matches.first()
}

/// Domain to query for `current`: the domain of the most recently changed
/// slot relative to `previous`, else `fallback`, else the first belief domain.
pub fn active_domain(
    previous: &BeliefState,
    current: &BeliefState,
    fallback: Option<&str>,
) -> Option<String> {
    let changed = current
        .iter()
        .filter(|(d, s, v)| previous.get(d, s) != Some(*v))
        .map(|(d, _, _)| d)
        .last();
    changed
        .or(fallback.filter(|f| current.domain(f).is_some()))
        .or_else(|| current.entries.keys().next().map(String::as_str))
        .or(fallback)
        .map(str::to_string)
}

pub fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> Database {
        let rows = [
            ("r1", "golden house", "chinese", "centre"),
            ("r2", "dragon", "chinese", "north"),
            ("r3", "pizza hut", "italian", "north"),
            ("r4", "curry king", "indian", "east"),
            ("r5", "bella", "italian", "centre"),
        ];
        Database::new(rows.iter().map(|(id, n, f, a)| {
            Entity::new("restaurant", id, [("name", *n), ("food", *f), ("area", *a)])
        }))
        .unwrap()
    }

    fn belief(pairs: &[(&str, &str)]) -> BeliefState {
        let mut b = BeliefState::new();
        for (s, v) in pairs {
            b.insert("restaurant", s, v);
        }
        b
    }

    #[test]
    fn query_matches_brute_force() {
        let db = five();
        let b = belief(&[("food", "Chinese"), ("area", "north ")]);
        let brute: Vec<&Entity> = db
            .entities("restaurant")
            .unwrap()
            .iter()
            .filter(|e| e.satisfies(b.domain("restaurant").unwrap()))
            .collect();
        let got = query(&db, &b, "restaurant").unwrap();
        assert_eq!(got, brute);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "r2");
    }

    #[test]
    fn empty_constraints_return_everything() {
        let db = five();
        assert_eq!(query(&db, &BeliefState::new(), "restaurant").unwrap().len(), 5);
    }

    #[test]
    fn unmatched_value_returns_nothing() {
        let db = five();
        assert!(query(&db, &belief(&[("food", "thai")]), "restaurant")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unknown_domain_errors() {
        assert!(matches!(
            query(&five(), &BeliefState::new(), "hotel"),
            Err(GroundingError::UnknownDomain(_))
        ));
    }

    #[test]
    fn db_state_text() {
        let e = five().entities("restaurant").unwrap().to_vec();
        assert_eq!(db_state(&e[..1], "restaurant").unwrap().text, "Restaurant 1 match");
        assert_eq!(db_state(&[], "restaurant").unwrap().text, "Restaurant 0 match");
        let seven: Vec<Entity> = e.iter().chain(&e[..2]).cloned().collect();
        let s = db_state(&seven, "restaurant").unwrap();
        assert_eq!(s.bucket, Bucket::MoreThanThree);
        assert_eq!(s.match_count, 7);
        assert_eq!(s.text, "Restaurant >3 match");
    }

    #[test]
    fn db_state_rejects_mixed_domains() {
        let mut e = five().entities("restaurant").unwrap().to_vec();
        e[1].domain = "hotel".into();
        assert!(matches!(
            db_state(&e, "restaurant"),
            Err(GroundingError::MixedDomain { .. })
        ));
    }

    #[test]
    fn bucketing_is_monotone() {
        let buckets: Vec<Bucket> = (0..50).map(Bucket::of).collect();
        assert!(buckets.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn select_offer_takes_first_in_id_order() {
        let db = five();
        let matches: Vec<Entity> = query(&db, &belief(&[("food", "italian")]), "restaurant")
            .unwrap()
            .into_iter()
            .cloned()
            .collect();
        assert_eq!(select_offer(&matches).unwrap().id, "r3");
        assert!(select_offer(&[]).is_none());
        assert_eq!(select_offer(&matches[1..]).unwrap().id, "r5");
    }

    #[test]
    fn database_sorts_and_rejects_duplicates() {
        let db = Database::new([
            Entity::new("hotel", "h2", [("name", "b")]),
            Entity::new("hotel", "h1", [("name", "a")]),
        ])
        .unwrap();
        assert_eq!(db.entities("hotel").unwrap()[0].id, "h1");
        assert!(Database::new([
            Entity::new("hotel", "h1", [("name", "b")]),
            Entity::new("hotel", "h1", [("name", "a")]),
        ])
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let db = five();
        assert_eq!(Database::from_json(&db.to_json()).unwrap(), db);
        assert!(Database::from_json("{\"restaurant\": []}").is_err());
    }

    #[test]
    fn active_domain_prefers_latest_change() {
        let mut prev = BeliefState::new();
        prev.insert("hotel", "area", "north");
        let mut cur = prev.clone();
        cur.insert("restaurant", "food", "chinese");
        assert_eq!(active_domain(&prev, &cur, None).as_deref(), Some("restaurant"));
        assert_eq!(
            active_domain(&cur, &cur, Some("hotel")).as_deref(),
            Some("hotel")
        );
        assert_eq!(
            active_domain(&BeliefState::new(), &BeliefState::new(), Some("taxi")).as_deref(),
            Some("taxi")
        );
    }
}
