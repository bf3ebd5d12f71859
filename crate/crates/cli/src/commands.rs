use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use solobot_core::corpus::{load_corpus, Corpus, Ontology};
use solobot_core::decoder::{DecodeParams, Session};
use solobot_core::evaluator::evaluate;
use solobot_core::grounding::Database;
use solobot_core::model::{
    corpus_sequences, corpus_turns, load_checkpoint, save_checkpoint, train, write_history,
    ModelParams,
};
use solobot_core::serializer::SpecialTokens;
use solobot_core::synth::synth_corpus;
use solobot_core::teaching::{Engine, LoggedTurn, SessionLog, TeachService};
use solobot_core::tokenizer::{train_bpe, Vocab};

use crate::config::RunConfig;
use crate::{api, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| invalid(format!("{command} needs --{flag}")))
}

fn require_existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn load_corpora(paths: &[PathBuf], name: &str) -> Result<Corpus> {
    let mut parts = Vec::with_capacity(paths.len());
    for p in paths {
        require_existing(p)?;
        parts.push(load_corpus(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?);
    }
    Ok(Corpus::concat(name, &parts))
}

fn load_db(paths: &[PathBuf], command: &str) -> Result<Database> {
    if paths.is_empty() {
        return Err(invalid(format!("{command} needs --db")));
    }
    let mut db: Option<Database> = None;
    for p in paths {
        require_existing(p)?;
        let next = Database::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        db = Some(match db {
            None => next,
            Some(acc) => acc.merge(&next).map_err(|e| invalid(e.to_string()))?,
        });
    }
    Ok(db.expect("at least one db"))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let path = require(&cfg.vocab, "vocab", &cfg.command)?;
    require_existing(path)?;
    Vocab::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_params(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelParams> {
    let path = require(&cfg.checkpoint, "checkpoint", &cfg.command)?;
    require_existing(path)?;
    let params = load_checkpoint(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if params.config.vocab_size != vocab.len() {
        return Err(invalid(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok(params)
}

fn runtime<E: Into<anyhow::Error>>(context: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(e.into().context(context))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Held-out slice for early stopping: explicit validation corpora, or a
/// seeded `valid_frac` share of the training dialogs.
fn train_valid_split(cfg: &RunConfig, corpus: Corpus) -> Result<(Corpus, Corpus)> {
    if !cfg.valid_corpus.is_empty() {
        return Ok((corpus, load_corpora(&cfg.valid_corpus, "valid")?));
    }
    let n_valid = (cfg.valid_frac * corpus.dialogs.len() as f64).round() as usize;
    if n_valid == 0 || n_valid >= corpus.dialogs.len() {
        let empty = Corpus::empty("valid", corpus.ontology.clone());
        return Ok((corpus, empty));
    }
    let mut dialogs = corpus.dialogs.clone();
    dialogs.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let valid = dialogs.split_off(dialogs.len() - n_valid);
    Ok((
        Corpus {
            dialogs,
            ..corpus.clone()
        },
        Corpus {
            dialogs: valid,
            ..corpus
        },
    ))
}

fn dump_text(path: &Path, corpus: &Corpus, db: &Database, specials: &SpecialTokens) -> Result<()> {
    let turns = corpus_turns(corpus, db).map_err(runtime("serializing corpus"))?;
    let mut out = String::new();
    for t in &turns {
        out.push_str(&t.to_text(specials));
        out.push('\n');
    }
    fs::write(path, out).map_err(runtime("writing text dump"))
}

pub fn run(command: &Command, cfg: RunConfig) -> Result<()> {
    match command {
        Command::Synth => synth(cfg),
        Command::Pretrain => pretrain(cfg),
        Command::Finetune => finetune(cfg),
        Command::Eval => eval(cfg),
        Command::Chat => chat(cfg),
        Command::Serve => serve(cfg, false, false),
        Command::Teach { open_ui } => serve(cfg, true, *open_ui),
    }
}

fn synth(cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out", "synth")?;
    let db_out = cfg
        .db
        .first()
        .ok_or_else(|| invalid("synth needs --db for the database output"))?;
    let (corpus, db) = synth_corpus(&cfg.synth).map_err(|e| invalid(e.to_string()))?;
    corpus.save(out).map_err(runtime("writing corpus"))?;
    db.save(db_out).map_err(runtime("writing database"))?;
    cfg.dump_next_to(out)?;
    println!(
        "wrote {} dialogs to {} and the database to {}",
        corpus.dialogs.len(),
        out.display(),
        db_out.display()
    );
    Ok(())
}

fn pretrain(mut cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out", "pretrain")?.to_path_buf();
    if cfg.corpus.is_empty() {
        return Err(invalid("pretrain needs at least one --corpus"));
    }
    let corpus = load_corpora(&cfg.corpus, "pretrain")?;
    let db = load_db(&cfg.db, "pretrain")?;
    let (train_c, valid_c) = train_valid_split(&cfg, corpus)?;

    let vocab = match &cfg.vocab {
        Some(path) if path.exists() => {
            Vocab::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        _ => {
            let specials = SpecialTokens::default();
            let texts: Vec<String> = corpus_turns(&train_c, &db)
                .map_err(runtime("serializing corpus"))?
                .iter()
                .map(|t| t.to_text(&specials))
                .collect();
            let vocab = train_bpe(texts.iter().map(String::as_str), cfg.vocab_size, &specials)
                .map_err(runtime("training tokenizer"))?;
            let path = cfg
                .vocab
                .clone()
                .unwrap_or_else(|| with_suffix(&out, ".vocab.json"));
            vocab.save(&path).map_err(runtime("writing vocabulary"))?;
            cfg.vocab = Some(path);
            vocab
        }
    };
    cfg.model.vocab_size = vocab.len();
    cfg.model.max_len = cfg.max_len;
    cfg.model.validate().map_err(|e| invalid(e.to_string()))?;

    let seqs = corpus_sequences(&train_c, &db, &vocab, cfg.max_len).map_err(runtime("serializing corpus"))?;
    let valid = corpus_sequences(&valid_c, &db, &vocab, cfg.max_len).map_err(runtime("serializing corpus"))?;
    if let Some(path) = &cfg.dump_text {
        dump_text(path, &train_c, &db, vocab.specials())?;
    }
    log::info!(
        "pretraining on {} sequences ({} validation)",
        seqs.len(),
        valid.len()
    );
    let params = ModelParams::init(&cfg.model).map_err(runtime("initializing model"))?;
    let outcome = train(&params, &seqs, &valid, &vocab, &cfg.train).map_err(runtime("training"))?;
    save_checkpoint(&outcome.params, &out).map_err(runtime("writing checkpoint"))?;
    write_history(&with_suffix(&out, ".history.jsonl"), &outcome.history)
        .map_err(runtime("writing history"))?;
    cfg.dump_next_to(&out)?;
    println!(
        "trained {} steps, wrote {}",
        outcome.steps,
        out.display()
    );
    Ok(())
}

fn finetune(mut cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out", "finetune")?.to_path_buf();
    if cfg.corpus.is_empty() {
        return Err(invalid("finetune needs at least one --corpus"));
    }
    let vocab = load_vocab(&cfg)?;
    let params = load_params(&cfg, &vocab)?;
    let corpus = load_corpora(&cfg.corpus, "finetune")?;
    let db = load_db(&cfg.db, "finetune")?;
    let (train_c, valid_c) = train_valid_split(&cfg, corpus)?;
    cfg.model = params.config.clone();
    let max_len = params.config.max_len;
    let seqs = corpus_sequences(&train_c, &db, &vocab, max_len).map_err(runtime("serializing corpus"))?;
    let valid = corpus_sequences(&valid_c, &db, &vocab, max_len).map_err(runtime("serializing corpus"))?;
    if let Some(path) = &cfg.dump_text {
        dump_text(path, &train_c, &db, vocab.specials())?;
    }
    let outcome = train(&params, &seqs, &valid, &vocab, &cfg.train).map_err(runtime("training"))?;
    save_checkpoint(&outcome.params, &out).map_err(runtime("writing checkpoint"))?;
    write_history(&with_suffix(&out, ".history.jsonl"), &outcome.history)
        .map_err(runtime("writing history"))?;
    cfg.dump_next_to(&out)?;
    println!(
        "fine-tuned {} steps, wrote {}",
        outcome.steps,
        out.display()
    );
    Ok(())
}

fn eval(cfg: RunConfig) -> Result<()> {
    if cfg.corpus.is_empty() {
        return Err(invalid("eval needs at least one --corpus"));
    }
    let vocab = load_vocab(&cfg)?;
    let params = load_params(&cfg, &vocab)?;
    let corpus = load_corpora(&cfg.corpus, "test")?;
    let db = load_db(&cfg.db, "eval")?;
    if let Some(path) = &cfg.dump_text {
        dump_text(path, &corpus, &db, vocab.specials())?;
    }
    let dp = DecodeParams {
        greedy: true,
        ..cfg.decode.clone()
    };
    let report = evaluate(&params, &vocab, &db, &corpus, &dp).map_err(runtime("evaluating"))?;
    println!("{}", report.to_table());
    if let Some(path) = &cfg.report {
        fs::write(path, report.to_json()).map_err(runtime("writing report"))?;
        fs::write(with_suffix(path, ".txt"), report.to_table()).map_err(runtime("writing report"))?;
        cfg.dump_next_to(path)?;
    }
    Ok(())
}

fn ontology_from(cfg: &RunConfig) -> Result<Option<Ontology>> {
    let mut paths = cfg.corpus.clone();
    paths.extend(cfg.heldout.iter().cloned());
    if paths.is_empty() {
        return Ok(None);
    }
    Ok(Some(load_corpora(&paths, "ontology")?.ontology))
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn chat(cfg: RunConfig) -> Result<()> {
    let vocab = load_vocab(&cfg)?;
    let params = load_params(&cfg, &vocab)?;
    let db = load_db(&cfg.db, "chat")?;
    let ontology = ontology_from(&cfg)?;
    eprintln!("{}", cfg.to_json());
    let ckpt = checkpoint_id(cfg.checkpoint.as_deref().expect("checked"));
    let mut session = Session::new(cfg.decode.seed);
    let mut log = SessionLog::new("chat", &ckpt, cfg.decode.seed);
    let mut dump = String::new();
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    loop {
        print!("user> ");
        stdout.flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(runtime("reading input"))? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if matches!(text, "quit" | "exit") {
            break;
        }
        let r = session
            .turn(&params, &vocab, &db, ontology.as_ref(), &cfg.decode, text)
            .map_err(runtime("decoding"))?;
        println!("belief: {}", r.belief_text);
        println!("db:     {}", r.db_state.text);
        println!("system> {}", r.text);
        dump.push_str(&r.response_input);
        dump.push_str(&r.delex);
        dump.push('\n');
        log.append(LoggedTurn {
            timestamp: Utc::now(),
            checkpoint_id: ckpt.clone(),
            user: text.to_string(),
            belief: r.belief,
            belief_malformed: r.belief_malformed,
            db_state: r.db_state,
            delex: r.delex,
            text: r.text,
        });
    }
    if let Some(path) = &cfg.transcript {
        let json = serde_json::to_string_pretty(&log).expect("log serializes");
        fs::write(path, json).map_err(runtime("writing transcript"))?;
        cfg.dump_next_to(path)?;
    }
    if let Some(path) = &cfg.dump_text {
        fs::write(path, dump).map_err(runtime("writing text dump"))?;
    }
    Ok(())
}

/// Build the teaching service from a run config.
pub fn build_service(cfg: &RunConfig) -> Result<TeachService> {
    let vocab = load_vocab(cfg)?;
    let params = load_params(cfg, &vocab)?;
    let db = load_db(&cfg.db, &cfg.command)?;
    let ontology = ontology_from(cfg)?
        .ok_or_else(|| invalid(format!("{} needs --corpus or --heldout for the ontology", cfg.command)))?;
    let heldout = match &cfg.heldout {
        Some(p) => Some(load_corpora(std::slice::from_ref(p), "heldout")?),
        None => None,
    };
    let base = if cfg.corpus.is_empty() {
        Vec::new()
    } else {
        corpus_turns(&load_corpora(&cfg.corpus, "base")?, &db).map_err(runtime("serializing corpus"))?
    };
    let engine = Engine {
        params,
        vocab,
        db,
        ontology,
        checkpoint_id: checkpoint_id(cfg.checkpoint.as_deref().expect("checked")),
    };
    Ok(TeachService::new(engine, heldout, base, cfg.teach.clone()))
}

fn serve(cfg: RunConfig, teach: bool, open_ui: bool) -> Result<()> {
    let service = Arc::new(build_service(&cfg)?);
    eprintln!("{}", cfg.to_json());
    let mut app = api::router(service);
    let ui = cfg.ui_dir.clone().filter(|d| d.is_dir());
    if teach {
        match &ui {
            Some(dir) => app = app.fallback_service(tower_http::services::ServeDir::new(dir)),
            None => log::warn!("no console build found (--ui-dir); serving the API only"),
        }
    }
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let runtime = tokio::runtime::Runtime::new().map_err(runtime("starting runtime"))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let url = format!("http://{}", listener.local_addr()?);
        println!("listening on {url}");
        if open_ui {
            if let Err(e) = open_browser(&url) {
                log::warn!("could not open a browser: {e}");
            }
        }
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        anyhow::Ok(())
    })?;
    Ok(())
}

fn open_browser(url: &str) -> io::Result<()> {
    let opener = if cfg!(target_os = "macos") { "open" } else { "xdg-open" };
    std::process::Command::new(opener).arg(url).spawn().map(|_| ())
}
