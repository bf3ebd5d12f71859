//! Template-driven synthetic single-domain corpora with matching databases.
//!
//! A dialog picks a target entity, states some of its informable slots, gets
//! asked for missing ones until the offer is unique or everything is known,
//! optionally recovers from a no-match request, asks for attributes of the
//! offered entity and says goodbye. System turns are written delexicalized
//! and lexicalized from the offered entity and belief.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    lexicalize, BeliefState, Corpus, Dialog, DomainGoal, DomainSchema, GoalSpec, Ontology, Turn,
};
use crate::grounding::{query, select_offer, Database, Entity, GroundingError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown domain preset {0:?}; available: restaurant, hotel, attraction")]
    UnknownPreset(String),
    #[error("need at least one entity")]
    NoEntities,
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

/// How users mention one informable slot.
#[derive(Debug, Clone)]
struct SlotSpec {
    name: &'static str,
    values: &'static [&'static str],
    /// Phrases inside a request, `{v}` is the value.
    phrases: &'static [&'static str],
    /// Standalone answers to the system's question.
    answers: &'static [&'static str],
    question: &'static str,
}

#[derive(Debug, Clone)]
pub struct DomainPreset {
    pub name: &'static str,
    noun: &'static str,
    slots: Vec<SlotSpec>,
    name_words: (&'static [&'static str], &'static [&'static str]),
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const REQUESTABLE: &[&str] = &["address", "phone", "postcode"];

fn area_slot() -> SlotSpec {
    SlotSpec {
        name: "area",
        values: AREAS,
        phrases: &["in the {v}", "in the {v} part of town", "located in the {v}"],
        answers: &["the {v} please .", "i would prefer the {v} .", "somewhere in the {v} ."],
        question: "which area of town do you prefer ?",
    }
}

fn price_slot() -> SlotSpec {
    SlotSpec {
        name: "pricerange",
        values: PRICES,
        phrases: &["in the {v} price range", "that is {v}", "with {v} prices"],
        answers: &["{v} please .", "something {v} .", "i want the {v} price range ."],
        question: "what price range are you looking for ?",
    }
}

pub fn preset(name: &str) -> Result<DomainPreset, SynthError> {
    let p = match name {
        "restaurant" => DomainPreset {
            name: "restaurant",
            noun: "restaurant",
            slots: vec![
                area_slot(),
                SlotSpec {
                    name: "food",
                    values: &["chinese", "italian", "indian", "thai", "french", "british", "korean", "spanish"],
                    phrases: &["serving {v} food", "that serves {v} food", "with {v} food"],
                    answers: &["{v} food please .", "i would like {v} food .", "how about {v} ?"],
                    question: "what type of food would you like ?",
                },
                price_slot(),
            ],
            name_words: (
                &["golden", "red", "little", "royal", "blue", "happy", "old", "green", "silver", "lucky"],
                &["wok", "spoon", "garden", "kitchen", "table", "lantern", "bistro", "oven", "house", "plate"],
            ),
        },
        "hotel" => DomainPreset {
            name: "hotel",
            noun: "hotel",
            slots: vec![
                area_slot(),
                price_slot(),
                SlotSpec {
                    name: "stars",
                    values: &["2", "3", "4", "5"],
                    phrases: &["with {v} stars", "rated {v} stars", "that has {v} stars"],
                    answers: &["{v} stars please .", "it should have {v} stars .", "{v} stars would be good ."],
                    question: "how many stars should the hotel have ?",
                },
            ],
            name_words: (
                &["grand", "park", "river", "city", "kings", "lime", "oak", "harbour", "bridge", "station"],
                &["lodge", "inn", "suites", "hotel", "guesthouse", "rooms", "court", "place", "manor", "house"],
            ),
        },
        "attraction" => DomainPreset {
            name: "attraction",
            noun: "attraction",
            slots: vec![
                area_slot(),
                SlotSpec {
                    name: "type",
                    values: &["museum", "park", "theatre", "college", "gallery", "cinema"],
                    phrases: &["that is a {v}", "like a {v}", "of type {v}"],
                    answers: &["a {v} please .", "i would like a {v} .", "maybe a {v} ."],
                    question: "what kind of attraction are you interested in ?",
                },
            ],
            name_words: (
                &["castle", "abbey", "market", "mill", "tower", "island", "queens", "botanic", "round", "corn"],
                &["hall", "gardens", "square", "exchange", "centre", "yard", "church", "arts", "pool", "theatre"],
            ),
        },
        other => return Err(SynthError::UnknownPreset(other.to_string())),
    };
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub domain: String,
    pub dialogs: usize,
    pub entities: usize,
    pub seed: u64,
    /// Probability that a dialog starts with a request that has no match.
    pub no_match_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            domain: "restaurant".into(),
            dialogs: 100,
            entities: 40,
            seed: 0,
            no_match_prob: 0.15,
        }
    }
}

impl DomainPreset {
    pub fn ontology(&self) -> Ontology {
        let schema = DomainSchema {
            slots: self
                .slots
                .iter()
                .map(|s| (s.name.to_string(), s.values.iter().map(|v| v.to_string()).collect()))
                .collect(),
            requestable: REQUESTABLE
                .iter()
                .map(|s| s.to_string())
                .chain(["name".to_string()])
                .collect(),
        };
        Ontology {
            domains: BTreeMap::from([(self.name.to_string(), schema)]),
        }
    }

    /// `count` entities with distinct names and random informable values.
    pub fn database(&self, count: usize, rng: &mut impl Rng) -> Result<Database, SynthError> {
        if count == 0 {
            return Err(SynthError::NoEntities);
        }
        let (adjs, nouns) = self.name_words;
        let mut names: Vec<String> = adjs
            .iter()
            .flat_map(|a| nouns.iter().map(move |n| format!("the {a} {n}")))
            .collect();
        names.shuffle(rng);
        let streets = ["mill road", "regent street", "hills road", "king street", "park terrace", "bridge street"];
        let mut entities = Vec::with_capacity(count);
        for i in 0..count {
            let name = names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("the {} number {i}", self.noun));
            let mut fields = vec![
                ("name".to_string(), name),
                (
                    "phone".to_string(),
                    format!("01223 {:06}", rng.gen_range(100_000..1_000_000)),
                ),
                (
                    "address".to_string(),
                    format!("{} {}", rng.gen_range(1..120), streets.choose(rng).expect("streets")),
                ),
                (
                    "postcode".to_string(),
                    format!(
                        "cb{} {}{}{}",
                        rng.gen_range(1..6),
                        rng.gen_range(1..10),
                        (b'a' + rng.gen_range(0..26u8)) as char,
                        (b'a' + rng.gen_range(0..26u8)) as char
                    ),
                ),
            ];
            for s in &self.slots {
                fields.push((s.name.to_string(), s.values.choose(rng).expect("values").to_string()));
            }
            entities.push(Entity::new(
                self.name,
                &format!("{}-{i:03}", self.name),
                fields.iter().map(|(k, v)| (k.as_str(), v.as_str())),
            ));
        }
        Ok(Database::new(entities)?)
    }
}

fn fill(template: &str, value: &str) -> String {
    template.replace("{v}", value)
}

/// The user's opening request stating `slots`.
fn opening(preset: &DomainPreset, stated: &[(&SlotSpec, String)], rng: &mut impl Rng) -> String {
    let openers = ["i am looking for a", "i want a", "can you find me a", "i need a"];
    let mut text = format!("{} {}", openers.choose(rng).expect("openers"), preset.noun);
    for (i, (spec, value)) in stated.iter().enumerate() {
        if i > 0 && i + 1 == stated.len() {
            text.push_str(" and");
        }
        text.push(' ');
        text.push_str(&fill(spec.phrases.choose(rng).expect("phrases"), value));
    }
    text.push_str(" .");
    text
}

fn describe(preset: &DomainPreset, belief: &BeliefState) -> String {
    let mut parts = Vec::new();
    for s in &preset.slots {
        if belief.get(preset.name, s.name).is_some() {
            parts.push(match s.name {
                "area" => "in the [value_area]".to_string(),
                "pricerange" => "in the [value_pricerange] price range".to_string(),
                "food" => "serving [value_food] food".to_string(),
                "stars" => "with [value_stars] stars".to_string(),
                "type" => "that is a [value_type]".to_string(),
                other => format!("with [value_{other}]"),
            });
        }
    }
    parts.join(" ")
}

fn request_phrase(slot: &str) -> &'static str {
    match slot {
        "phone" => "phone number",
        "address" => "address",
        _ => "postcode",
    }
}

struct Builder<'a> {
    domain: &'a str,
    turns: Vec<Turn>,
    belief: BeliefState,
}

impl Builder<'_> {
    fn exchange(&mut self, user: String, delex: String, offer: Option<&Entity>) {
        self.turns.push(Turn::user(user));
        let text = lexicalize(&delex, offer, &self.belief).text;
        self.turns.push(Turn::system(text, delex, self.belief.clone()));
    }

    fn state(&mut self, slot: &str, value: &str) {
        self.belief.insert(self.domain, slot, value);
    }
}

pub fn synth_dialog(
    preset: &DomainPreset,
    db: &Database,
    id: &str,
    no_match_prob: f64,
    rng: &mut impl Rng,
) -> Result<Dialog, SynthError> {
    let entities = db.entities(preset.name).ok_or(SynthError::NoEntities)?;
    let target = entities.choose(rng).ok_or(SynthError::NoEntities)?;
    let mut b = Builder {
        domain: preset.name,
        turns: Vec::new(),
        belief: BeliefState::new(),
    };

    let mut order: Vec<&SlotSpec> = preset.slots.iter().collect();
    order.shuffle(rng);
    let first = rng.gen_range(1..=order.len());
    let stated: Vec<(&SlotSpec, String)> = order[..first]
        .iter()
        .map(|s| (*s, target.fields[s.name].clone()))
        .collect();

    // Optionally open with a value combination nothing matches.
    let mut opened = false;
    if rng.gen::<f64>() < no_match_prob {
        let (spec, _) = stated[rng.gen_range(0..stated.len())];
        let mut trial = stated.clone();
        let wrong = spec
            .values
            .iter()
            .filter(|v| **v != target.fields[spec.name])
            .collect::<Vec<_>>()
            .choose(rng)
            .map(|v| v.to_string());
        if let Some(wrong) = wrong {
            let mut belief = BeliefState::new();
            for (s, v) in &mut trial {
                if s.name == spec.name {
                    *v = wrong.clone();
                }
                belief.insert(preset.name, s.name, v);
            }
            if query(db, &belief, preset.name)?.is_empty() {
                for (s, v) in &trial {
                    b.state(s.name, v);
                }
                let delex = format!(
                    "i am sorry , there is no {} {} . would you like something else ?",
                    preset.noun,
                    describe(preset, &b.belief)
                );
                b.exchange(opening(preset, &trial, rng), delex, None);
                let value = target.fields[spec.name].clone();
                b.state(spec.name, &value);
                let fix = ["how about {v} instead ?", "then {v} please .", "ok , what about {v} ?"];
                let user = fill(fix.choose(rng).expect("fix"), &value);
                opened = true;
                b.turns.push(Turn::user(user));
            }
        }
    }
    if !opened {
        for (s, v) in &stated {
            b.state(s.name, v);
        }
        b.turns.push(Turn::user(opening(preset, &stated, rng)));
    }

    // Ask for missing slots until the offer is unique or everything is known.
    let offer = loop {
        let matches = query(db, &b.belief, preset.name)?;
        let missing = preset
            .slots
            .iter()
            .filter(|s| b.belief.get(preset.name, s.name).is_none())
            .min_by_key(|s| s.name);
        match missing {
            Some(spec) if matches.len() > 1 => {
                b.turns.push(Turn::system(
                    spec.question,
                    spec.question,
                    b.belief.clone(),
                ));
                let value = target.fields[spec.name].clone();
                b.state(spec.name, &value);
                b.turns.push(Turn::user(fill(spec.answers.choose(rng).expect("answers"), &value)));
            }
            _ => break select_offer(&matches.into_iter().cloned().collect::<Vec<_>>()).cloned(),
        }
    };
    let offer = offer.expect("target entity matches its own values");
    let delex = format!(
        "[{}_name] is a {} {} . would you like more information ?",
        preset.name,
        preset.noun,
        describe(preset, &b.belief)
    );
    let text = lexicalize(&delex, Some(&offer), &b.belief).text;
    b.turns.push(Turn::system(text, delex, b.belief.clone()));

    let mut requests: Vec<&str> = REQUESTABLE.to_vec();
    requests.shuffle(rng);
    requests.truncate(rng.gen_range(1..=2));
    requests.sort_unstable();
    let ask = requests
        .iter()
        .map(|r| format!("the {}", request_phrase(r)))
        .collect::<Vec<_>>()
        .join(" and ");
    let openers = ["can i have {v} ?", "what is {v} ?", "could you give me {v} please ?"];
    let answer = requests
        .iter()
        .map(|r| format!("the {} is [{}_{r}]", request_phrase(r), preset.name))
        .collect::<Vec<_>>()
        .join(" and ");
    b.exchange(
        fill(openers.choose(rng).expect("openers"), &ask),
        format!("{answer} . is there anything else ?"),
        Some(&offer),
    );
    let byes = ["no , that is all . thank you .", "thanks , goodbye .", "that is everything , bye ."];
    b.exchange(
        byes.choose(rng).expect("byes").to_string(),
        "you are welcome . goodbye .".to_string(),
        Some(&offer),
    );

    let constraints = b.belief.domain(preset.name).cloned().unwrap_or_default();
    let goal = GoalSpec {
        domains: BTreeMap::from([(
            preset.name.to_string(),
            DomainGoal {
                constraints,
                requests: requests.iter().map(|s| s.to_string()).collect(),
            },
        )]),
    };
    Ok(Dialog {
        id: id.to_string(),
        goal,
        turns: b.turns,
    })
}

/// A corpus and its database for one domain preset.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, Database), SynthError> {
    let preset = preset(&cfg.domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let db = preset.database(cfg.entities, &mut rng)?;
    let mut dialogs = Vec::with_capacity(cfg.dialogs);
    for i in 0..cfg.dialogs {
        let id = format!("{}-{:05}", preset.name, i);
        dialogs.push(synth_dialog(&preset, &db, &id, cfg.no_match_prob, &mut rng)?);
    }
    let corpus = Corpus {
        name: format!("synthetic-{}", preset.name),
        ontology: preset.ontology(),
        dialogs,
    };
    Ok((corpus, db))
}
