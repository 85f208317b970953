use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use cqrank_core::data::{
    convert_tsv, cross_validate, load_annotations, load_candidate_sets, load_triples, write_jsonl, CandidateSet,
    Split, SplitManifest,
};
use cqrank_core::eval::{bucket_by_length, emit_report, evaluate};
use cqrank_core::nn::load_checkpoint;
use cqrank_core::ranker::{rank_all, read_rankings, write_rankings};
use cqrank_core::remote::RemoteEmbedder;
use cqrank_core::store::{open_store, EmbeddingStore, EmbeddingVector, Role};
use cqrank_core::trainer::{build_examples, checkpoint_path, train as run_training, TrainOptions};
use cqrank_core::{EmbeddingLookup, Error, Result};

use crate::config::{require, ExperimentConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const BUCKET_REPORT_FILE: &str = "buckets.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let out = cfg.paths.out.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;
    Ok(out)
}

fn load_sets(path: &Path, split: Split) -> Result<Vec<CandidateSet>> {
    require(path)?;
    Ok(load_candidate_sets(path, split)?.records)
}

fn open_checked_store(cfg: &ExperimentConfig) -> Result<EmbeddingStore> {
    let path = cfg.need(&cfg.paths.store, "store")?;
    require(path)?;
    let store = open_store(path)?;
    let spec = cfg.feature_spec()?;
    if store.dim() != spec.encoder_dim {
        return Err(Error::Dimension {
            context: format!("embedding store {} vs variant {}", path.display(), cfg.variant()),
            expected: spec.encoder_dim,
            actual: store.dim(),
        });
    }
    Ok(store)
}

fn post_texts(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut texts = BTreeMap::new();
    for path in &cfg.paths.posts {
        require(path)?;
        for t in load_triples(path)?.records {
            if let Some(prev) = texts.insert(t.post_id.clone(), t.post.clone()) {
                if prev != t.post {
                    return Err(Error::Validation(format!(
                        "{}: post {} has conflicting text across triples files",
                        path.display(),
                        t.post_id
                    )));
                }
            }
        }
    }
    Ok(texts)
}

fn configured_splits(cfg: &ExperimentConfig) -> Vec<(Split, &Path)> {
    [
        (Split::Train, &cfg.paths.train),
        (Split::Validation, &cfg.paths.validation),
        (Split::Test, &cfg.paths.test),
    ]
    .into_iter()
    .filter_map(|(s, p)| p.as_deref().map(|p| (s, p)))
    .collect()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    let splits = configured_splits(cfg);
    for (_, p) in &splits {
        require(p)?;
    }
    for p in cfg.paths.annotations.iter().chain(&cfg.paths.posts) {
        require(p)?;
    }
    if splits.is_empty() && cfg.paths.annotations.is_none() && cfg.paths.posts.is_empty() {
        return Err(Error::Config("no data paths configured".into()));
    }

    let mut manifests: BTreeMap<String, SplitManifest> = BTreeMap::new();
    let mut all_sets = Vec::new();
    for (split, path) in splits {
        let loaded = load_candidate_sets(path, split)?;
        manifests.insert(split.to_string(), loaded.manifest);
        if split == Split::Test {
            if let Some(ann_path) = &cfg.paths.annotations {
                let (ann, manifest) = load_annotations(ann_path)?;
                cross_validate(&ann, &loaded.records)?;
                manifests.insert("annotations".into(), manifest);
            }
        }
        all_sets.extend(loaded.records);
    }
    if cfg.paths.test.is_none() {
        if let Some(ann_path) = &cfg.paths.annotations {
            manifests.insert("annotations".into(), load_annotations(ann_path)?.1);
        }
    }
    for (i, path) in cfg.paths.posts.iter().enumerate() {
        manifests.insert(format!("posts.{i}"), load_triples(path)?.manifest);
    }
    if !cfg.paths.posts.is_empty() {
        let texts = post_texts(cfg)?;
        if let Some(s) = all_sets.iter().find(|s| !texts.contains_key(&s.post_id)) {
            return Err(Error::Validation(format!("post {} has no text in paths.posts", s.post_id)));
        }
    }

    let path = out_dir(cfg)?.join(MANIFEST_FILE);
    let mut body = serde_json::to_string_pretty(&manifests).expect("manifests serialize");
    body.push('\n');
    fs::write(&path, body).map_err(io_err(&path))?;
    for (name, m) in &manifests {
        println!("{name}: {} records ({})", m.record_count, m.kind);
        if !m.empty_gold_posts.is_empty() {
            println!("  {} posts with an empty gold set", m.empty_gold_posts.len());
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn embed_fetch(cfg: &ExperimentConfig, endpoint: Option<String>) -> Result<()> {
    let store_path = cfg.need(&cfg.paths.store, "store")?;
    let spec = cfg.feature_spec()?;
    let mut texts: BTreeMap<String, String> = post_texts(cfg)?
        .into_iter()
        .map(|(id, text)| (Role::Post.key(&id), text))
        .collect();
    for (split, path) in configured_splits(cfg) {
        for set in load_sets(path, split)? {
            if !texts.contains_key(&Role::Post.key(&set.post_id)) {
                return Err(Error::Validation(format!("post {} has no text in paths.posts", set.post_id)));
            }
            for c in set.candidates {
                for (key, text) in [(Role::Question.key(&c.cid), c.question), (Role::Answer.key(&c.cid), c.answer)] {
                    match texts.get(&key) {
                        Some(prev) if *prev != text => {
                            return Err(Error::Validation(format!(
                                "{}: candidate {} has conflicting text across splits",
                                path.display(),
                                c.cid
                            )))
                        }
                        Some(_) => {}
                        None => {
                            texts.insert(key, text);
                        }
                    }
                }
            }
        }
    }
    if texts.is_empty() {
        return Err(Error::Config("nothing to embed: configure paths.posts and candidate splits".into()));
    }

    let client = RemoteEmbedder::new(endpoint.unwrap_or_else(|| cfg.embed.endpoint.clone())).expecting_dim(spec.encoder_dim);
    let info = client.info()?;
    println!("embedding {} texts with {} (dim {})", texts.len(), info.model, info.dim);
    let (keys, bodies): (Vec<String>, Vec<String>) = texts.into_iter().unzip();
    let mut vectors: Vec<EmbeddingVector> = Vec::with_capacity(keys.len());
    for chunk in bodies.chunks(cfg.embed.batch_size) {
        vectors.extend(client.embed(chunk)?);
    }
    let store = EmbeddingStore::from_entries(info.dim, keys.into_iter().zip(vectors))?.with_provenance(info.model);
    if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let digest = store.write(store_path)?;
    println!("wrote {} ({} vectors, sha256 {digest})", store_path.display(), store.len());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, resume: Option<PathBuf>) -> Result<()> {
    let train_path = cfg.need(&cfg.paths.train, "train")?;
    require(train_path)?;
    if let Some(p) = &cfg.paths.validation {
        require(p)?;
    }
    if let Some(p) = &resume {
        require(p)?;
    }
    let store = open_checked_store(cfg)?;
    let spec = cfg.feature_spec()?;

    let examples = build_examples(&load_sets(train_path, Split::Train)?, &store, &spec)?;
    let validation = match &cfg.paths.validation {
        Some(p) => Some(build_examples(&load_sets(p, Split::Validation)?, &store, &spec)?),
        None => None,
    };
    let resume_from = resume.as_deref().map(load_checkpoint).transpose()?;

    let out = out_dir(cfg)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let epochs = cfg.train.epochs;
    let mut report = |r: &cqrank_core::trainer::EpochRecord| {
        let mut line = format!("epoch {}/{epochs}  train_loss {:.6}", r.epoch, r.train_loss);
        if let (Some(l), Some(p)) = (r.val_loss, r.val_p_at_1) {
            line += &format!("  val_loss {l:.6}  val_p@1 {p:.2}");
        }
        println!("{line}");
    };
    println!(
        "training {} on {} examples (input dim {}, hidden {:?})",
        cfg.variant(),
        examples.len(),
        spec.input_dim(),
        cfg.train.hidden_dims
    );
    let outcome = run_training(
        &examples,
        &cfg.train,
        TrainOptions {
            validation: validation.as_deref(),
            checkpoint_dir: Some(&ckpt_dir),
            resume_from,
            on_epoch: Some(&mut report),
        },
    )?;
    let log_path = out.join(TRAIN_LOG_FILE);
    outcome.log.write(&log_path)?;
    println!("wrote {} and {}", log_path.display(), ckpt_dir.display());
    Ok(())
}

pub fn rank(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let test_path = cfg.need(&cfg.paths.test, "test")?;
    require(test_path)?;
    let ckpt = checkpoint.unwrap_or_else(|| checkpoint_path(&cfg.paths.out.join(CHECKPOINT_DIR), cfg.train.epochs));
    require(&ckpt)?;
    let store = open_checked_store(cfg)?;
    let spec = cfg.feature_spec()?;
    let model = load_checkpoint(&ckpt)?.model;
    if model.input_dim() != spec.input_dim() {
        return Err(Error::Dimension {
            context: format!("checkpoint {} vs variant {}", ckpt.display(), cfg.variant()),
            expected: spec.input_dim(),
            actual: model.input_dim(),
        });
    }
    let sets = load_sets(test_path, Split::Test)?;
    let rankings = rank_all(&model, &sets, &store, &spec)?;
    let path = out_dir(cfg)?.join(RANKINGS_FILE);
    write_rankings(&path, &rankings)?;
    println!("ranked {} posts; wrote {}", rankings.len(), path.display());
    Ok(())
}

struct EvalInputs {
    sets: Vec<CandidateSet>,
    annotations: HashMap<String, cqrank_core::AnnotationSet>,
    rankings: Vec<cqrank_core::RankedList>,
}

fn eval_inputs(cfg: &ExperimentConfig, rankings: Option<PathBuf>) -> Result<EvalInputs> {
    let test_path = cfg.need(&cfg.paths.test, "test")?;
    let ann_path = cfg.need(&cfg.paths.annotations, "annotations")?;
    let rank_path = rankings.unwrap_or_else(|| cfg.paths.out.join(RANKINGS_FILE));
    for p in [test_path, ann_path, &rank_path] {
        require(p)?;
    }
    let sets = load_sets(test_path, Split::Test)?;
    let (annotations, _) = load_annotations(ann_path)?;
    cross_validate(&annotations, &sets)?;
    let rankings = read_rankings(&rank_path, &sets)?;
    Ok(EvalInputs {
        sets,
        annotations,
        rankings,
    })
}

pub fn eval(cfg: &ExperimentConfig, rankings: Option<PathBuf>) -> Result<()> {
    let inputs = eval_inputs(cfg, rankings)?;
    let model = cfg.variant().to_string();
    let reports = cfg
        .eval
        .regime
        .regimes()
        .iter()
        .map(|&r| evaluate(&inputs.rankings, &inputs.annotations, r, cfg.eval.empty_gold, &model))
        .collect::<Result<Vec<_>>>()?;
    let written = emit_report(&reports, &[], out_dir(cfg)?)?;
    for r in &reports {
        let cells: Vec<String> = r.p_at.iter().map(|(k, v)| format!("P@{k} {v:.2}")).collect();
        println!("{model} {}: {}  ({} posts, {} skipped)", r.regime, cells.join("  "), r.evaluated, r.skipped);
    }
    if inputs.rankings.len() < inputs.sets.len() {
        println!("note: {} of {} test posts were ranked", inputs.rankings.len(), inputs.sets.len());
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn analyze(cfg: &ExperimentConfig, rankings: Option<PathBuf>) -> Result<()> {
    if cfg.paths.posts.is_empty() {
        return Err(Error::Config("paths.posts is not set (post text is needed for length buckets)".into()));
    }
    let inputs = eval_inputs(cfg, rankings)?;
    let texts: HashMap<String, String> = post_texts(cfg)?.into_iter().collect();
    let model = cfg.variant().to_string();
    let reports = cfg
        .eval
        .regime
        .regimes()
        .iter()
        .map(|&r| bucket_by_length(&inputs.rankings, &inputs.annotations, &texts, r, cfg.eval.empty_gold, &model))
        .collect::<Result<Vec<_>>>()?;
    let out = out_dir(cfg)?;
    let mut written = emit_report(&[], &reports, out)?;
    let path = out.join(BUCKET_REPORT_FILE);
    write_jsonl(&path, &reports)?;
    written.push(path);
    for r in &reports {
        println!("{model} {} (rank-1 correct / posts, by {}):", r.regime, r.length_unit);
        for b in &r.buckets {
            println!("  {:>8}  {:>4} / {:<4}", b.label, b.correct_at_1, b.post_count);
        }
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn convert(post_data: &Path, qa_data: &Path, ids: Option<&Path>, triples_out: &Path, sets_out: &Path) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
    let ids: Option<Vec<String>> = ids
        .map(|p| read(p).map(|t| t.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()))
        .transpose()?;
    let (triples, sets) = convert_tsv(&read(post_data)?, &read(qa_data)?, ids.as_deref())?;
    write_jsonl(triples_out, &triples)?;
    write_jsonl(sets_out, &sets)?;
    println!("wrote {} triples to {} and {} candidate sets to {}", triples.len(), triples_out.display(), sets.len(), sets_out.display());
    Ok(())
}
