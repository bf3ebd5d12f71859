//! Task-completion and language metrics: Inform, Success, BLEU-4, the
//! combined score and joint goal accuracy.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{placeholder_name, placeholders, BeliefState, Corpus, GoalSpec, Ontology, Role};
use crate::decoder::{DecodeError, DecodeParams, Session};
use crate::grounding::{Entity, KnowledgeBase};
use crate::model::ModelParams;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("no sentence pairs")]
    Empty,
    #[error("goal of dialog {dialog} uses domain {domain} unknown to the ontology")]
    GoalMismatch { dialog: String, domain: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// `(inform + success) / 2 + bleu`.
pub fn combined(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

/// One generated system turn of an evaluated dialog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTurn {
    pub belief: BeliefState,
    pub domain: String,
    pub delex: String,
    /// Entity the turn's lexicalization drew from.
    pub offered: Option<Entity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDialog {
    pub id: String,
    pub goal: GoalSpec,
    pub turns: Vec<GeneratedTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogScore {
    pub id: String,
    pub inform: bool,
    pub success: bool,
    pub belief_correct: usize,
    pub turns: usize,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Per-dialog Inform and Success. A dialog informs when, for every domain
/// with goal constraints, some turn mentions `[<domain>_name]` while offering
/// an entity of that domain that satisfies the constraints. It succeeds when
/// it informs and every requested slot's placeholder appears in some turn.
pub fn score_dialog(dialog: &GeneratedDialog, ontology: &Ontology) -> Result<(bool, bool), EvalError> {
    for domain in dialog.goal.domains.keys() {
        if !ontology.domains.contains_key(domain) {
            return Err(EvalError::GoalMismatch {
                dialog: dialog.id.clone(),
                domain: domain.clone(),
            });
        }
    }
    let inform = dialog.goal.constrained_domains().all(|(domain, goal)| {
        let tag = format!("{domain}_name");
        dialog.turns.iter().any(|t| {
            t.offered.as_ref().is_some_and(|e| {
                e.domain == domain
                    && e.satisfies(&goal.constraints)
                    && placeholders(&t.delex).contains(&tag)
            })
        })
    });
    let mentioned: Vec<String> = dialog
        .turns
        .iter()
        .flat_map(|t| placeholders(&t.delex))
        .collect();
    let answered = dialog.goal.domains.iter().all(|(domain, goal)| {
        goal.requests.iter().all(|slot| {
            let options = [format!("{domain}_{slot}"), placeholder_name(ontology, domain, slot)];
            mentioned.iter().any(|m| options.contains(m))
        })
    });
    Ok((inform, inform && answered))
}

/// Inform and Success percentages over dialogs.
pub fn inform_success(dialogs: &[GeneratedDialog], ontology: &Ontology) -> Result<(f64, f64), EvalError> {
    let mut inform = 0;
    let mut success = 0;
    for d in dialogs {
        let (i, s) = score_dialog(d, ontology)?;
        inform += usize::from(i);
        success += usize::from(s);
    }
    Ok((percent(inform, dialogs.len()), percent(success, dialogs.len())))
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 on whitespace tokens, scaled to [0, 100]. Orders with
/// no clipped matches use add-one smoothing, `1 / (total + 1)`.
pub fn bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|i| {
            if matches[i] > 0 {
                (matches[i] as f64 / totals[i] as f64).ln()
            } else {
                (1.0 / (totals[i] as f64 + 1.0)).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

#[derive(Debug, Error)]
#[error("{predicted} predicted beliefs but {gold} gold beliefs")]
pub struct AlignmentError {
    pub predicted: usize,
    pub gold: usize,
}

/// Percentage of turns whose predicted belief equals the gold belief after
/// canonicalization.
pub fn joint_goal_accuracy(predicted: &[BeliefState], gold: &[BeliefState]) -> Result<f64, AlignmentError> {
    if predicted.len() != gold.len() {
        return Err(AlignmentError {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let hits = predicted
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.canonical() == g.canonical())
        .count();
    Ok(percent(hits, gold.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub joint_goal_accuracy: f64,
    pub dialogs: Vec<DialogScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: Inform, Success, BLEU, Combined, then JGA.
    pub fn to_table(&self) -> String {
        let headers = ["Inform", "Success", "BLEU", "Combined", "JGA"];
        let values = [
            self.inform,
            self.success,
            self.bleu,
            self.combined,
            self.joint_goal_accuracy,
        ]
        .map(|v| format!("{v:.2}"));
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut out = String::new();
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        let mut line = String::new();
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(line, "{v:>w$}  ");
        }
        out.push_str(line.trim_end());
        out.push('\n');
        out
    }
}

/// Decode every system turn of `corpus` from its gold history and score the
/// results against the goals, gold beliefs and gold delexicalized responses.
pub fn evaluate<K: KnowledgeBase + ?Sized>(
    params: &ModelParams,
    vocab: &Vocab,
    kb: &K,
    corpus: &Corpus,
    dp: &DecodeParams,
) -> Result<EvalReport, EvalError> {
    let mut generated = Vec::with_capacity(corpus.dialogs.len());
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut scores = Vec::new();
    for dialog in &corpus.dialogs {
        let mut session = Session::new(dp.seed);
        let mut turns = Vec::new();
        let mut correct = 0;
        for i in dialog.system_turns() {
            // Condition on the gold history rather than on earlier outputs.
            session.history = dialog.turns[..i - 1]
                .iter()
                .map(|t| (t.role, t.text.clone()))
                .collect();
            debug_assert_eq!(dialog.turns[i - 1].role, Role::User);
            let result = session.turn(
                params,
                vocab,
                kb,
                Some(&corpus.ontology),
                dp,
                &dialog.turns[i - 1].text,
            )?;
            let gold_turn = &dialog.turns[i];
            let gold_belief = gold_turn.belief.clone().unwrap_or_default();
            if result.belief.canonical() == gold_belief.canonical() {
                correct += 1;
            }
            predicted.push(result.belief.clone());
            gold.push(gold_belief);
            hyps.push(result.delex.clone());
            refs.push(gold_turn.delex.clone().unwrap_or_else(|| gold_turn.text.clone()));
            turns.push(GeneratedTurn {
                belief: result.belief,
                domain: result.db_state.domain,
                delex: result.delex,
                offered: result.offered,
            });
        }
        let g = GeneratedDialog {
            id: dialog.id.clone(),
            goal: dialog.goal.clone(),
            turns,
        };
        let (inform, success) = score_dialog(&g, &corpus.ontology)?;
        scores.push(DialogScore {
            id: dialog.id.clone(),
            inform,
            success,
            belief_correct: correct,
            turns: g.turns.len(),
        });
        generated.push(g);
    }
    let (inform, success) = inform_success(&generated, &corpus.ontology)?;
    let bleu = if hyps.is_empty() { 0.0 } else { bleu(&hyps, &refs)? };
    let jga = joint_goal_accuracy(&predicted, &gold).expect("aligned by construction");
    Ok(EvalReport {
        inform,
        success,
        bleu,
        combined: combined(inform, success, bleu),
        joint_goal_accuracy: jga,
        dialogs: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainGoal, DomainSchema};
    use std::collections::BTreeMap;

    #[test]
    fn combined_reproduces_headline_rows() {
        assert!((combined(85.50, 72.90, 16.54) - 95.74).abs() < 1e-9);
        assert!((combined(94.70, 87.10, 25.50) - 116.40).abs() < 1e-9);
        assert_eq!(combined(0.0, 0.0, 0.0), 0.0);
    }

    fn ontology() -> Ontology {
        let schema = DomainSchema {
            slots: BTreeMap::from([("food".to_string(), vec!["thai".to_string(), "chinese".to_string()])]),
            requestable: ["phone".to_string()].into(),
        };
        Ontology { domains: BTreeMap::from([("restaurant".to_string(), schema)]) }
    }

    fn dialog(offer_food: Option<&str>, mention_phone: bool) -> GeneratedDialog {
        let mut goal = GoalSpec::default();
        goal.domains.insert(
            "restaurant".into(),
            DomainGoal {
                constraints: BTreeMap::from([("food".into(), "thai".into())]),
                requests: vec!["phone".into()],
            },
        );
        let offered = offer_food.map(|f| Entity::new("restaurant", "r1", [("name", "x"), ("food", f)]));
        let mut turns = vec![GeneratedTurn {
            belief: BeliefState::new(),
            domain: "restaurant".into(),
            delex: "[restaurant_name] serves [value_food] food .".into(),
            offered: offered.clone(),
        }];
        if mention_phone {
            turns.push(GeneratedTurn {
                belief: BeliefState::new(),
                domain: "restaurant".into(),
                delex: "the number is [restaurant_phone] .".into(),
                offered,
            });
        }
        GeneratedDialog { id: "d".into(), goal, turns }
    }

    #[test]
    fn inform_and_success_definitions() {
        let o = ontology();
        assert_eq!(score_dialog(&dialog(Some("thai"), true), &o).unwrap(), (true, true));
        assert_eq!(score_dialog(&dialog(Some("thai"), false), &o).unwrap(), (true, false));
        assert_eq!(score_dialog(&dialog(Some("chinese"), true), &o).unwrap(), (false, false));
        let (i, s) = inform_success(
            &[dialog(Some("thai"), true), dialog(Some("thai"), false), dialog(None, false)],
            &o,
        )
        .unwrap();
        assert!((i - 200.0 / 3.0).abs() < 1e-9);
        assert!((s - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn goal_outside_ontology_errors() {
        let mut d = dialog(Some("thai"), true);
        d.goal.domains.insert("spa".into(), DomainGoal::default());
        assert!(matches!(score_dialog(&d, &ontology()), Err(EvalError::GoalMismatch { .. })));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = ["the cat sat on the mat", "a quick brown fox jumps"];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        let long = |prefix: &str| (0..150).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ");
        let hyps = [long("h"), long("g")];
        let refs2 = [long("r"), long("s")];
        assert!(bleu(&hyps, &refs2).unwrap() < 1.0);
        assert!(bleu(&hyps[..1], &refs2).is_err());
    }

    #[test]
    fn bleu_hand_case() {
        // Hyp 1 "the cat sat on a mat" vs "the cat sat on the mat":
        //   1-gram 5/6, 2-gram 3/5, 3-gram 2/4, 4-gram 1/3.
        // Hyp 2 "hello there" vs "hello there friend":
        //   1-gram 2/2, 2-gram 1/1, 3- and 4-grams 0/0.
        // Totals: 7/8, 4/6, 2/4, 1/3; lengths 8 vs 9.
        let hyps = ["the cat sat on a mat", "hello there"];
        let refs = ["the cat sat on the mat", "hello there friend"];
        let p: [f64; 4] = [7.0 / 8.0, 4.0 / 6.0, 2.0 / 4.0, 1.0 / 3.0];
        let geo = (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
        let bp = (1.0f64 - 9.0 / 8.0).exp();
        assert!((bleu(&hyps, &refs).unwrap() - 100.0 * bp * geo).abs() < 1e-4);
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let hyps = ["a b c d", "e f g", "h i j k l"];
        let refs = ["a b c e", "e f g h", "h i k l"];
        let rh = [hyps[2], hyps[0], hyps[1]];
        let rr = [refs[2], refs[0], refs[1]];
        assert!((bleu(&hyps, &refs).unwrap() - bleu(&rh, &rr).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn jga_counts_exact_matches_after_canonicalization() {
        let mut a = BeliefState::new();
        a.insert("restaurant", "food", "thai");
        let mut b = BeliefState::new();
        b.insert("restaurant", "food", " Thai ");
        let mut c = BeliefState::new();
        c.insert("restaurant", "food", "chinese");
        let gold = vec![a.clone(), a.clone(), a.clone(), a.clone()];
        assert_eq!(joint_goal_accuracy(&gold, &gold).unwrap(), 100.0);
        assert_eq!(joint_goal_accuracy(&[a.clone(), a.clone(), a.clone(), c], &gold).unwrap(), 75.0);
        assert_eq!(joint_goal_accuracy(&[b], &[a.clone()]).unwrap(), 100.0);
        assert!(joint_goal_accuracy(&[], &[a]).is_err());
    }

    #[test]
    fn report_table_lists_columns_in_order() {
        let r = EvalReport {
            inform: 85.5,
            success: 72.9,
            bleu: 16.54,
            combined: 95.74,
            joint_goal_accuracy: 50.0,
            dialogs: vec![],
        };
        let t = r.to_table();
        assert!(t.starts_with("Inform  Success   BLEU  Combined    JGA"));
        assert!(t.contains("85.50"));
    }
}
