use std::sync::{Arc, OnceLock};

use solobot_core::corpus::{Corpus, Dialog};
use solobot_core::decoder::DecodeParams;
use solobot_core::model::{corpus_sequences, corpus_turns, train, ModelConfig, ModelParams, OptimConfig, TrainConfig};
use solobot_core::serializer::SpecialTokens;
use solobot_core::synth::{synth_corpus, SynthConfig};
use solobot_core::teaching::{
    BeliefEdit, Correction, Engine, JobStatus, TeachConfig, TeachError, TeachJobRequest, TeachService,
};
use solobot_core::tokenizer::train_bpe;

struct Fixture {
    service: Arc<TeachService>,
    fresh: Vec<Dialog>,
}

struct Base {
    engine: Engine,
    heldout: Corpus,
    base_examples: Vec<solobot_core::serializer::TurnExample>,
    fresh: Vec<Dialog>,
}

const TRAIN_DIALOGS: usize = 100;

/// A base model trained once and shared by the tests in this file.
fn base() -> &'static Base {
    static BASE: OnceLock<Base> = OnceLock::new();
    BASE.get_or_init(|| {
        let (corpus, db) = synth_corpus(&SynthConfig {
            dialogs: TRAIN_DIALOGS + 40,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let part = |r: std::ops::Range<usize>| Corpus {
            dialogs: corpus.dialogs[r].to_vec(),
            ..corpus.clone()
        };
        let train_c = part(0..TRAIN_DIALOGS);
        let specials = SpecialTokens::default();
        let turns = corpus_turns(&train_c, &db).unwrap();
        let texts: Vec<String> = turns.iter().map(|t| t.to_text(&specials)).collect();
        let vocab = train_bpe(texts.iter().map(String::as_str), 600, &specials).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            max_len: 512,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            ..ModelConfig::default()
        };
        let seqs = corpus_sequences(&train_c, &db, &vocab, 512).unwrap();
        let tc = TrainConfig {
            epochs: 1000,
            max_steps: Some(BASE_STEPS),
            batch_size: 8,
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        };
        let params = train(&ModelParams::init(&cfg).unwrap(), &seqs, &[], &vocab, &tc)
            .unwrap()
            .params;
        Base {
            engine: Engine {
                params,
                vocab,
                db,
                ontology: corpus.ontology.clone(),
                checkpoint_id: "base".into(),
            },
            heldout: part(TRAIN_DIALOGS..TRAIN_DIALOGS + 20),
            base_examples: turns,
            fresh: corpus.dialogs[TRAIN_DIALOGS + 20..].to_vec(),
        }
    })
}

const BASE_STEPS: usize = 3000;

fn fixture(config: TeachConfig) -> Fixture {
    let b = base();
    Fixture {
        service: Arc::new(TeachService::new(
            b.engine.clone(),
            Some(b.heldout.clone()),
            b.base_examples.clone(),
            config,
        )),
        fresh: b.fresh.clone(),
    }
}

/// Replay unseen dialogs and correct turns toward the gold annotation until
/// `n` corrections are stored.
fn teach(f: &Fixture, n: usize) -> usize {
    let svc = &f.service;
    let mut stored = 0;
    for dialog in &f.fresh {
        for (turn, i) in dialog.system_turns().enumerate() {
            let result = svc.chat_turn(&dialog.id, &dialog.turns[i - 1].text).unwrap();
            let gold = &dialog.turns[i];
            let gold_belief = gold.belief.clone().unwrap_or_default();
            let mut edits = Vec::new();
            for (d, s, v) in gold_belief.iter() {
                if result.belief.get(d, s) != Some(v) {
                    edits.push(BeliefEdit {
                        domain: d.to_string(),
                        slot: s.to_string(),
                        value: Some(v.to_string()),
                    });
                }
            }
            for (d, s, _) in result.belief.iter() {
                if gold_belief.get(d, s).is_none() && svc.engine().ontology.has_slot(d, s) {
                    edits.push(BeliefEdit {
                        domain: d.to_string(),
                        slot: s.to_string(),
                        value: None,
                    });
                }
            }
            let gold_delex = gold.delex.clone().unwrap();
            let replacement = (result.delex != gold_delex).then_some(gold_delex);
            if stored < n && (!edits.is_empty() || replacement.is_some()) {
                svc.add_correction(Correction {
                    session_id: dialog.id.clone(),
                    turn,
                    belief_edits: edits,
                    response_replacement: replacement,
                    author: "teacher".into(),
                    timestamp: chrono::Utc::now(),
                })
                .unwrap();
                stored += 1;
            }
        }
        if stored == n {
            break;
        }
    }
    stored
}

#[test]
fn five_corrections_do_not_hurt_heldout_success() {
    let f = fixture(TeachConfig {
        decode: DecodeParams::greedy(),
        ..TeachConfig::default()
    });
    assert!(matches!(
        f.service.run_job_blocking(TeachJobRequest::default()),
        Err(TeachError::EmptyTeachCorpus)
    ));
    assert_eq!(teach(&f, 5), 5);
    let cost = f.service.cost_since(None);
    assert_eq!(cost.corrections, 5);
    assert_eq!(cost.total, cost.slot_edits as u64 + 10 * cost.response_replacements as u64);

    let before_logs = f.service.logs();
    let job = f.service.run_job_blocking(TeachJobRequest::default()).unwrap();
    assert_eq!(job.status, JobStatus::Done, "{:?}", job.error);
    let (before, after) = (job.before.unwrap(), job.after.unwrap());
    println!("held-out success {:.1} -> {:.1}", before.success, after.success);
    assert!(before.success > 0.0, "base model too weak for the comparison to mean anything");
    assert!(after.success >= before.success);
    assert_eq!(f.service.engine().checkpoint_id, "base+teach1");
    // Logged turns are untouched by teaching.
    assert_eq!(f.service.logs(), before_logs);
}

#[test]
fn one_job_at_a_time_and_failures_keep_serving() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("not-a-dir");
    std::fs::write(&blocker, "").unwrap();
    let f = fixture(TeachConfig {
        decode: DecodeParams {
            max_belief_tokens: 24,
            max_response_tokens: 24,
            ..DecodeParams::greedy()
        },
        steps: 60,
        checkpoint_dir: Some(blocker),
        ..TeachConfig::default()
    });
    teach(&f, 2);
    let id = f.service.start_job(TeachJobRequest::default()).unwrap();
    assert!(matches!(
        f.service.start_job(TeachJobRequest::default()),
        Err(TeachError::Busy)
    ));
    // Chats keep being answered while the job runs.
    let chatter = {
        let svc = Arc::clone(&f.service);
        std::thread::spawn(move || {
            for i in 0..3 {
                svc.chat_turn("live", &format!("i need a restaurant {i} .")).unwrap();
            }
        })
    };
    chatter.join().unwrap();
    let job = loop {
        let job = f.service.job(id).unwrap();
        if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
            break job;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    };
    // Writing the checkpoint fails, so the old model keeps serving.
    assert_eq!(job.status, JobStatus::Failed);
    assert!(job.error.is_some());
    assert_eq!(f.service.engine().checkpoint_id, "base");
    assert_eq!(f.service.log("live").unwrap().turns().len(), 3);
    // The slot is free again.
    let again = f.service.start_job(TeachJobRequest {
        steps: Some(1),
        ..TeachJobRequest::default()
    });
    assert!(again.is_ok());
}
