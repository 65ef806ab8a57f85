use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use super::compare::{compare_preferences, Preference, ResponseRecord};
use super::config::{read_jsonl, require, write_json, write_jsonl, RunConfig, ScorerKind};
use super::repl::{run_repl, ChatStart};
use crate::combiner::ModalityMask;
use crate::data::{
    all_turn_samples, build_vocab, dataset_stats, is_question, load_dataset, load_igc, tokenize, igc_samples, DialogueExample,
    FeatureStore, Split, StyleCatalog, TurnSample, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generative::{
    evaluate_generation, run_generative_ablation, train_generative, DecodeOptions, GenTrainConfig, GenerativeModel,
};
use crate::metrics::{IrBaseline, MetricReport};
use crate::persist::{load_model, load_retrieval, save_generative, save_retrieval, LoadedModel};
use crate::retrieval::train::pair_tokens;
use crate::retrieval::{
    evaluate_recall, pairs_from_samples, pretrain, response_pool, run_ablation_matrix, train_retrieval, AblationSource,
    AblationTable, CandidateScorer, IrScorer, ModelScorer, OracleScorer, PretrainConfig, RandomScorer, RecallOptions,
    RetrievalModel, RetrievalTrainConfig, TrainReport, UtterancePair,
};
use crate::service::{replay, ChatSession, Engine};

fn load_examples(cfg: &RunConfig, catalog: &StyleCatalog) -> Result<Vec<DialogueExample>> {
    let path = require(&cfg.data, "data")?;
    let report = load_dataset(path, catalog)?;
    if let Some(first) = report.errors.first() {
        warn!("{}: skipped {} malformed lines (first at line {}: {})", path.display(), report.errors.len(), first.line, first.message);
    }
    Ok(report.examples)
}

fn load_features(cfg: &RunConfig) -> Result<FeatureStore> {
    FeatureStore::load(require(&cfg.features, "features")?)
}

fn split_examples(examples: &[DialogueExample], split: Split) -> Vec<DialogueExample> {
    examples.iter().filter(|e| e.split == split).cloned().collect()
}

fn split_samples(examples: &[DialogueExample], split: Split) -> Vec<TurnSample> {
    all_turn_samples(&split_examples(examples, split))
}

fn nonempty(samples: Vec<TurnSample>, split: Split, path: &Option<std::path::PathBuf>) -> Result<Vec<TurnSample>> {
    if samples.is_empty() {
        let p = path.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
        return Err(Error::config(format!("{p}: no {split:?} dialogues")));
    }
    Ok(samples)
}

fn write_losses(cfg: &RunConfig, report: &TrainReport) -> Result<()> {
    write_jsonl(&cfg.out("loss.jsonl"), report.losses.iter().enumerate().map(|(i, l)| json!({"step": i + 1, "loss": l})))
}

fn stamp(v: &mut Value, hash: &str) {
    if let Value::Object(m) = v {
        m.insert("config_hash".into(), json!(hash));
    }
}

fn write_report(cfg: &RunConfig, name: &str, report: &MetricReport, hash: &str) -> Result<()> {
    let mut v = report.to_json();
    stamp(&mut v, hash);
    write_json(&cfg.out(&format!("{name}.json")), &v)?;
    fs::write(cfg.out(&format!("{name}.txt")), report.to_string()).map_err(|e| Error::io(cfg.out(&format!("{name}.txt")), e))?;
    println!("{report}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary(report: &TrainReport, hash: &str, seed: u64) -> Value {
    json!({
        "steps": report.steps,
        "final_loss": report.losses.last(),
        "best_valid_r1": report.best_valid_r1,
        "valid_r1": report.valid_r1,
        "stopped_early": report.stopped_early,
        "config_hash": hash,
        "seed": seed,
    })
}

fn decode_options<T: crate::diff::Float>(cfg: &RunConfig, model: &GenerativeModel<T>) -> DecodeOptions {
    let mut o = model.decode_options();
    o.beam_size = cfg.beam_size.unwrap_or(o.beam_size);
    o.trigram_block = cfg.trigram_block.unwrap_or(o.trigram_block);
    o.max_len = cfg.max_decode_len.unwrap_or(o.max_len);
    o
}

fn default_lr(cfg: &RunConfig) -> f64 {
    cfg.lr.unwrap_or(match cfg.preset {
        super::config::Preset::Tiny => 1e-3,
        super::config::Preset::Full => 1e-4,
    })
}

pub fn train_ret(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let examples = load_examples(cfg, &catalog)?;
    let features = load_features(cfg)?;
    let train = nonempty(split_samples(&examples, Split::Train), Split::Train, &cfg.data)?;
    let valid = split_samples(&examples, Split::Valid);
    let (vocab, pretrained) = match &cfg.pretrained {
        Some(p) => {
            let (m, _) = load_retrieval::<f32>(p)?;
            (m.vocab, Some(m.params))
        }
        None => (build_vocab(&split_examples(&examples, Split::Train), cfg.min_freq, &catalog), None),
    };
    let rc = cfg.retrieval_config(vocab.len(), catalog.len())?;
    let mut model = RetrievalModel::<f32>::new(rc, vocab, catalog, cfg.seed)?;
    if let Some(p) = &pretrained {
        let n = model.load_pretrained_text(p)?;
        info!("initialized {n} text-encoder tensors from the pretrained checkpoint");
    }
    let valid_pool = response_pool(&valid).len();
    let n_candidates = cfg.n_candidates.min(valid_pool);
    if n_candidates < cfg.n_candidates && !valid.is_empty() {
        warn!("validation pool has {valid_pool} responses; ranking among {n_candidates} instead of {}", cfg.n_candidates);
    }
    let tc = RetrievalTrainConfig {
        batch_size: cfg.batch_size.unwrap_or(500),
        combiner_kind: cfg.combiner,
        shared_text_encoders: cfg.shared_encoders,
        modality_mask: cfg.mask()?,
        lr: default_lr(cfg),
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        eval_every: if n_candidates >= 2 { cfg.eval_every } else { 0 },
        patience: cfg.patience,
        n_candidates,
    };
    let report = train_retrieval(&mut model, &train, (n_candidates >= 2).then_some(valid.as_slice()), &features, &tc)?;
    write_losses(cfg, &report)?;
    save_retrieval(&cfg.out("retrieval.ckpt"), &model, &hash)?;
    write_json(&cfg.out("train_summary.json"), &summary(&report, &hash, cfg.seed))?;
    if n_candidates >= 2 {
        let opts = RecallOptions { n_candidates, ks: vec![1, 5.min(n_candidates)], seed: cfg.seed, mask: tc.modality_mask };
        let scorer = ModelScorer::new(&model, &features).with_mask(tc.modality_mask, cfg.mask_mode());
        let r = evaluate_recall(&scorer, &valid, &opts)?;
        write_report(cfg, "valid_report", &r, &hash)?;
    } else {
        warn!("no validation split; skipping the final validation report");
    }
    println!("trained {} steps; final loss {:.4}", report.steps, report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn train_gen(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let examples = load_examples(cfg, &catalog)?;
    let features = load_features(cfg)?;
    let train = nonempty(split_samples(&examples, Split::Train), Split::Train, &cfg.data)?;
    let valid = split_samples(&examples, Split::Valid);
    let vocab = build_vocab(&split_examples(&examples, Split::Train), cfg.min_freq, &catalog);
    let mut gc = cfg.gen_config(vocab.len())?;
    gc.lr = default_lr(cfg);
    let mut model = GenerativeModel::<f32>::new(gc, vocab, catalog, cfg.seed)?;
    let tc = GenTrainConfig {
        batch_size: model.config.batch_size,
        lr: model.config.lr,
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        modality_mask: cfg.mask()?,
        target_loss: cfg.target_loss,
    };
    let report = train_generative(&mut model, &train, &features, &tc)?;
    write_losses(cfg, &report)?;
    save_generative(&cfg.out("generative.ckpt"), &model, &hash)?;
    write_json(&cfg.out("train_summary.json"), &summary(&report, &hash, cfg.seed))?;
    if valid.is_empty() {
        warn!("no validation split; skipping the final validation report");
    } else {
        let (r, records) = evaluate_generation(&model, &valid, &features, tc.modality_mask, &decode_options(cfg, &model), cfg.seed)?;
        write_jsonl(&cfg.out("valid_decodes.jsonl"), &records)?;
        write_report(cfg, "valid_report", &r, &hash)?;
    }
    println!("trained {} steps; final loss {:.4}", report.steps, report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let pairs: Vec<UtterancePair> = match (&cfg.pairs, &cfg.data) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(_)) => pairs_from_samples(&split_samples(&load_examples(cfg, &catalog)?, Split::Train)),
        (None, None) => return Err(Error::config("missing required input --pairs (or --data)")),
    };
    if pairs.len() < 2 {
        return Err(Error::config("pretraining needs at least 2 utterance pairs"));
    }
    let sents = pair_tokens(&pairs);
    let styles: Vec<&str> = catalog.names().collect();
    let vocab = Vocabulary::build(sents.iter().map(Vec::as_slice), cfg.min_freq, &styles);
    let rc = cfg.retrieval_config(vocab.len(), catalog.len())?;
    let mut model = RetrievalModel::<f32>::new(rc, vocab, catalog, cfg.seed)?;
    let batch_size = cfg.batch_size.unwrap_or(500);
    let pc = PretrainConfig {
        k_negatives: cfg.k_negatives.unwrap_or(batch_size.saturating_sub(1)),
        batch_size,
        lr: default_lr(cfg),
        seed: cfg.seed,
        max_steps: cfg.max_steps,
    };
    let report = pretrain(&mut model, &pairs, &pc)?;
    write_losses(cfg, &report)?;
    save_retrieval(&cfg.out("pretrain.ckpt"), &model, &hash)?;
    write_json(&cfg.out("train_summary.json"), &summary(&report, &hash, cfg.seed))?;
    println!("pretrained {} steps on {} pairs; final loss {:.4}", report.steps, pairs.len(), report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn checkpoint(cfg: &RunConfig) -> Result<(LoadedModel<f32>, crate::diff::CheckpointManifest)> {
    let p = cfg.checkpoint.as_ref().or(cfg.gen_checkpoint.as_ref()).cloned();
    load_model::<f32>(require(&p, "checkpoint")?)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    if cfg.igc.is_some() {
        return igc_eval(cfg);
    }
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let examples = load_examples(cfg, &catalog)?;
    let samples = nonempty(split_samples(&examples, cfg.split), cfg.split, &cfg.data)?;
    let mask = cfg.mask()?;
    let opts = RecallOptions { n_candidates: cfg.n_candidates, ks: vec![1, 5], seed: cfg.seed, mask };
    let recall = |scorer: &dyn CandidateScorer| evaluate_recall(scorer, &samples, &opts);
    let report = match cfg.scorer {
        ScorerKind::Oracle => recall(&OracleScorer)?,
        ScorerKind::Random => recall(&RandomScorer { seed: cfg.seed })?,
        ScorerKind::Ir => {
            let train: Vec<Vec<String>> =
                split_samples(&examples, Split::Train).iter().map(|s| tokenize(&s.gold)).collect();
            if train.is_empty() {
                return Err(Error::config("the IR baseline needs training responses in --data"));
            }
            recall(&IrScorer { baseline: IrBaseline::fit(train.iter().map(Vec::as_slice)) })?
        }
        ScorerKind::Model => {
            let features = load_features(cfg)?;
            match checkpoint(cfg)?.0 {
                LoadedModel::Retrieval(m) => recall(&ModelScorer::new(&m, &features).with_mask(mask, cfg.mask_mode()))?,
                LoadedModel::Generative(m) => {
                    let (r, records) = evaluate_generation(&m, &samples, &features, mask, &decode_options(cfg, &m), cfg.seed)?;
                    write_jsonl(&cfg.out("decodes.jsonl"), &records)?;
                    r
                }
            }
        }
    };
    write_report(cfg, "report", &report, &hash)
}

pub fn mask_slug(mask: ModalityMask) -> String {
    mask.to_string().replace(',', "+")
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let examples = load_examples(cfg, &catalog)?;
    let samples = nonempty(split_samples(&examples, cfg.split), cfg.split, &cfg.data)?;
    let features = load_features(cfg)?;
    let mut ret = BTreeMap::new();
    let mut gen = BTreeMap::new();
    match &cfg.checkpoint_dir {
        Some(dir) => {
            for (label, mask) in ModalityMask::ablation_rows() {
                let p = dir.join(format!("{}.ckpt", mask_slug(mask)));
                if !p.exists() {
                    warn!("{} missing; row {label:?} is absent", p.display());
                    continue;
                }
                match load_model::<f32>(&p)?.0 {
                    LoadedModel::Retrieval(m) => {
                        ret.insert(label.to_string(), m);
                    }
                    LoadedModel::Generative(m) => {
                        gen.insert(label.to_string(), m);
                    }
                }
            }
        }
        None => {
            let label = "*".to_string();
            match checkpoint(cfg)?.0 {
                LoadedModel::Retrieval(m) => {
                    ret.insert(label, m);
                }
                LoadedModel::Generative(m) => {
                    gen.insert(label, m);
                }
            }
        }
    }
    let single = cfg.checkpoint_dir.is_none();
    let table: AblationTable = match (ret.is_empty(), gen.is_empty()) {
        (false, true) => {
            let source = if single {
                AblationSource::Single(&ret["*"])
            } else {
                AblationSource::PerMask(ret.iter().map(|(k, v)| (k.clone(), v)).collect())
            };
            let opts = RecallOptions { n_candidates: cfg.n_candidates, ks: vec![1], seed: cfg.seed, mask: ModalityMask::FULL };
            run_ablation_matrix(&source, &samples, &features, &opts, cfg.mask_mode())?
        }
        (true, false) => {
            let (source, any) = if single {
                (AblationSource::Single(&gen["*"]), &gen["*"])
            } else {
                (AblationSource::PerMask(gen.iter().map(|(k, v)| (k.clone(), v)).collect()), gen.values().next().expect("nonempty"))
            };
            run_generative_ablation(&source, &samples, &features, &decode_options(cfg, any), cfg.seed)?
        }
        (true, true) => return Err(Error::config("no ablation checkpoints found")),
        (false, false) => return Err(Error::config("ablation checkpoints mix retrieval and generative models")),
    };
    let mut v = table.to_json();
    stamp(&mut v, &hash);
    v["seed"] = json!(cfg.seed);
    write_json(&cfg.out("ablation.json"), &v)?;
    write_text(&cfg.out("ablation.txt"), &table.to_string())?;
    println!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct QuestionStats {
    utterances: usize,
    questions: usize,
    rate: f64,
}

fn question_stats<'a>(texts: impl IntoIterator<Item = &'a str>) -> QuestionStats {
    let (mut utterances, mut questions) = (0, 0);
    for t in texts {
        utterances += 1;
        questions += usize::from(is_question(t));
    }
    QuestionStats { utterances, questions, rate: if utterances == 0 { 0.0 } else { questions as f64 / utterances as f64 } }
}

pub fn igc_eval(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let igc_path = require(&cfg.igc, "igc")?;
    let (examples, errors) = load_igc(igc_path)?;
    if let Some(first) = errors.first() {
        warn!("{}: skipped {} malformed lines (first at line {}: {})", igc_path.display(), errors.len(), first.line, first.message);
    }
    if examples.is_empty() {
        return Err(Error::config(format!("{}: no IGC examples", igc_path.display())));
    }
    let features = load_features(cfg)?;
    let LoadedModel::Generative(model) = checkpoint(cfg)?.0 else {
        return Err(Error::config("igc-eval needs a generative checkpoint"));
    };
    let style = match &cfg.style {
        Some(s) => s.clone(),
        None => {
            let s = model.catalog.names().next().ok_or_else(|| Error::config("model catalog is empty"))?.to_string();
            warn!("no --style given; responding as {s}");
            s
        }
    };
    model.catalog.index_of(&style)?;
    let questions = question_stats(examples.iter().map(|e| e.question.as_str()));
    let samples = igc_samples(&examples, &style);
    let (report, records) = evaluate_generation(&model, &samples, &features, ModalityMask::FULL, &decode_options(cfg, &model), cfg.seed)?;
    write_jsonl(&cfg.out("igc_decodes.jsonl"), &records)?;
    let mut v = report.to_json();
    stamp(&mut v, &hash);
    v["style"] = json!(style);
    v["questions"] = serde_json::to_value(&questions)?;
    write_json(&cfg.out("igc_report.json"), &v)?;
    let text = format!("{report}BLEU-4 (x100): {:.2}\nquestions passing the filter: {}/{}\n", report.all["bleu4"], questions.questions, questions.utterances);
    write_text(&cfg.out("igc_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let a: Vec<ResponseRecord> = read_jsonl(require(&cfg.responses_a, "responses-a")?)?;
    let b: Vec<ResponseRecord> = read_jsonl(require(&cfg.responses_b, "responses-b")?)?;
    let prefs: Vec<Preference> = read_jsonl(require(&cfg.preferences, "preferences")?)?;
    let report = compare_preferences(&a, &b, &prefs)?;
    let mut v = serde_json::to_value(&report)?;
    stamp(&mut v, &hash);
    v["seed"] = json!(cfg.seed);
    write_json(&cfg.out("compare.json"), &v)?;
    write_text(&cfg.out("compare.txt"), &report.to_string())?;
    print!("{report}");
    Ok(())
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let catalog = cfg.load_catalog()?;
    let examples = load_examples(cfg, &catalog)?;
    let mut rows = BTreeMap::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let ex = split_examples(&examples, split);
        if !ex.is_empty() {
            rows.insert(format!("{split:?}").to_lowercase(), dataset_stats(&ex));
        }
    }
    let all = dataset_stats(&examples);
    let questions = question_stats(examples.iter().flat_map(|e| e.turns.iter().map(|t| t.text.as_str())));
    let v = json!({"splits": rows, "all": all, "questions": questions, "config_hash": hash, "seed": cfg.seed});
    write_json(&cfg.out("stats.json"), &v)?;
    let mut text = format!("{:<8}{:>8}{:>10}{:>11}{:>8}{:>8}{:>10}\n", "split", "images", "dialogues", "utterances", "styles", "vocab", "tok/utt");
    for (name, s) in rows.iter().chain([(&"all".to_string(), &all)]) {
        text += &format!(
            "{name:<8}{:>8}{:>10}{:>11}{:>8}{:>8}{:>10.2}\n",
            s.images, s.dialogues, s.utterances, s.style_types, s.vocab_size, s.mean_tokens_per_utterance
        );
    }
    text += &format!("questions: {} of {} utterances ({:.1}%)\n", questions.questions, questions.utterances, 100.0 * questions.rate);
    write_text(&cfg.out("stats.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Engine over the configured checkpoints; candidate stores come from the
/// training split of `--data` when given.
pub fn build_engine(cfg: &RunConfig, hash: &str) -> Result<Engine> {
    let features = load_features(cfg)?;
    let mut retrieval = None;
    let mut generative = None;
    for p in [&cfg.checkpoint, &cfg.gen_checkpoint].into_iter().flatten() {
        match load_model::<f32>(p)?.0 {
            LoadedModel::Retrieval(m) => retrieval = Some(m),
            LoadedModel::Generative(m) => generative = Some(m),
        }
    }
    if retrieval.is_none() && generative.is_none() {
        warn!("no checkpoint given; every reply will report model_not_loaded");
    }
    let catalog = match (&retrieval, &generative, &cfg.catalog) {
        (_, _, Some(_)) => cfg.load_catalog()?,
        (Some(m), _, None) => m.catalog.clone(),
        (None, Some(m), None) => m.catalog.clone(),
        (None, None, None) => cfg.load_catalog()?,
    };
    let stores = match &cfg.data {
        Some(_) => Engine::stores_from(&split_examples(&load_examples(cfg, &catalog)?, Split::Train)),
        None => {
            if retrieval.is_some() {
                warn!("no --data given; retrieval replies have no candidate store");
            }
            BTreeMap::new()
        }
    };
    Ok(Engine::new(retrieval, generative, catalog, features, stores, cfg.seed, hash.to_string()))
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let engine = Arc::new(build_engine(cfg, &hash)?);
    let addr = cfg.addr.parse().map_err(|e| Error::config(format!("bad --addr {:?}: {e}", cfg.addr)))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(crate::service::serve(engine, addr))
}

pub fn chat(cfg: &RunConfig, replay_path: Option<&Path>) -> Result<()> {
    let hash = cfg.write_snapshot()?;
    let engine = build_engine(cfg, &hash)?;
    if let Some(p) = replay_path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let session: ChatSession = serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
        let bad = replay(&engine, &session).map_err(|e| Error::Contract(format!("{}: {}", e.code, e.message)))?;
        if !bad.is_empty() {
            return Err(Error::Contract(format!("replay differs at transcript entries {bad:?}")));
        }
        println!("replayed {} entries identically", session.transcript.len());
        return Ok(());
    }
    let image_id = match &cfg.image {
        Some(i) => i.clone(),
        None => engine.features.ids().first().cloned().ok_or_else(|| Error::config("feature store is empty"))?,
    };
    let style_model = match &cfg.style {
        Some(s) => s.clone(),
        None => engine.catalog.names().next().ok_or_else(|| Error::config("catalog is empty"))?.to_string(),
    };
    let start = ChatStart { image_id, style_model, style_human: cfg.style_human.clone(), model_kind: cfg.kind };
    let session = run_repl(&engine, &start, io::stdin().lock(), io::stdout().lock())?;
    let path = cfg.transcript.clone().unwrap_or_else(|| cfg.out("session.json"));
    write_json(&path, &session)?;
    println!("transcript saved to {}", path.display());
    Ok(())
}
