//! Supervised training of the relevance classifier on (post, candidate) pairs.
//!
//! Every source of randomness is a ChaCha stream keyed by the run seed and
//! the position in training (epoch, batch, chunk). Batches are split into
//! fixed-size chunks whose gradients are summed in chunk order, so the
//! result is bit-identical for any worker count and a resumed run retraces
//! an uninterrupted one exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CandidateSet;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::nn::{adam_step, cross_entropy, save_checkpoint, AdamState, Checkpoint, Gradients, MlpModel, Mode};
use crate::ranker::{candidate_feature, rank, FeatureSpec, ModelVariant};
use crate::store::EmbeddingLookup;

/// Rows per gradient chunk. Fixed so the reduction order never depends on
/// the number of workers.
pub const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub batch_size: usize,
    pub epochs: u64,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    /// Reweight the loss so both classes carry equal total mass.
    pub class_weighting: bool,
    /// Worker threads; 0 lets the pool decide. Never affects results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::default(),
            batch_size: 1000,
            epochs: 50,
            learning_rate: 0.01,
            dropout_rate: 0.4,
            seed: 0,
            hidden_dims: vec![512, 256],
            class_weighting: false,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims entries must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the result-relevant fields.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub feature: Vec<f32>,
    pub label: u8,
    pub post_id: String,
    pub candidate_id: String,
}

/// One example per candidate, in post order then candidate order.
pub fn build_examples<S: EmbeddingLookup + ?Sized>(
    sets: &[CandidateSet],
    store: &S,
    spec: &FeatureSpec,
) -> Result<Vec<TrainingExample>> {
    if store.dim() != spec.encoder_dim {
        return Err(Error::dim("embedding store", spec.encoder_dim, store.dim()));
    }
    let mut out = Vec::with_capacity(sets.len() * crate::data::CANDIDATES_PER_POST);
    for set in sets {
        for c in &set.candidates {
            out.push(TrainingExample {
                feature: candidate_feature(spec, store, &set.post_id, c)?,
                label: c.label,
                post_id: set.post_id.clone(),
                candidate_id: c.cid.clone(),
            });
        }
    }
    Ok(out)
}

/// SHA-256 over ids, labels and feature bytes.
pub fn examples_digest(examples: &[TrainingExample]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.post_id.as_bytes());
        h.update([0]);
        h.update(e.candidate_id.as_bytes());
        h.update([0, e.label]);
        for v in &e.feature {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_p_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_digest: String,
    pub examples_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_digest: Option<String>,
    pub seed: u64,
    pub epochs_completed: u64,
    pub optimizer_steps: u64,
    /// The only wall-clock field in the log.
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogLine<'a> {
    Epoch(&'a EpochRecord),
    Summary(&'a TrainSummary),
}

impl TrainLog {
    /// JSONL: one line per epoch, then the summary.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut lines: Vec<LogLine> = self.epochs.iter().map(LogLine::Epoch).collect();
        lines.push(LogLine::Summary(&self.summary));
        crate::data::write_jsonl(path.as_ref(), &lines)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Held-out examples grouped by post (consecutive runs of one post id).
    pub validation: Option<&'a [TrainingExample]>,
    /// Where epoch checkpoints go; none are written when unset.
    pub checkpoint_dir: Option<&'a Path>,
    pub resume_from: Option<Checkpoint>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub adam: AdamState,
    pub log: TrainLog,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from the run seed and a coordinate path.
pub fn stream_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

fn feature_rows(examples: &[TrainingExample], rows: impl ExactSizeIterator<Item = usize>, dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((rows.len(), dim));
    for (mut out, i) in x.rows_mut().into_iter().zip(rows) {
        out.iter_mut()
            .zip(&examples[i].feature)
            .for_each(|(o, v)| *o = f64::from(*v));
    }
    x
}

struct ChunkPass {
    loss: f64,
    grads: Gradients,
}

fn chunk_pass(
    model: &MlpModel,
    examples: &[TrainingExample],
    rows: &[usize],
    class_weight: [f64; 2],
    batch_len: usize,
    seed: u64,
) -> Result<ChunkPass> {
    let x = feature_rows(examples, rows.iter().copied(), model.input_dim());
    let labels: Vec<u8> = rows.iter().map(|&i| examples[i].label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cache = model.forward_batch(x.view(), Mode::Train(&mut rng))?;
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(rows.len());
    for (p, &y) in cache.probs.rows().into_iter().zip(&labels) {
        let w = class_weight[y as usize];
        loss += w * cross_entropy(p.as_slice().expect("row"), y)?;
        coeffs.push(w / batch_len as f64);
    }
    let grads = model.backward_weighted(&cache, &labels, &coeffs)?;
    Ok(ChunkPass { loss, grads })
}

/// Mean validation loss and P@1 (percent), treating each run of one post id
/// as a candidate set whose label-1 entries are gold.
pub fn validation_metrics(model: &MlpModel, examples: &[TrainingExample]) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let probs: Vec<Array2<f64>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|rows| model.predict(feature_rows(examples, rows.iter().copied(), model.input_dim()).view()))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(examples.len());
    for (p, e) in probs.iter().flat_map(|a| a.rows().into_iter()).zip(examples) {
        loss += cross_entropy(p.as_slice().expect("row"), e.label)?;
        scores.push(p[1]);
    }

    let (mut posts, mut hits) = (0usize, 0usize);
    let mut start = 0;
    while start < examples.len() {
        let post = &examples[start].post_id;
        let end = start + examples[start..].iter().take_while(|e| &e.post_id == post).count();
        let scored: Vec<(String, f64)> = (start..end).map(|i| (i.to_string(), scores[i])).collect();
        let ranked = rank(post.clone(), &scored)?;
        let top = start + ranked.entries[0].original_index;
        posts += 1;
        hits += usize::from(examples[top].label == 1);
        start = end;
    }
    let n = examples.len().max(1) as f64;
    Ok((loss / n, 100.0 * hits as f64 / posts.max(1) as f64))
}

pub fn train(examples: &[TrainingExample], config: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training examples".into()))?;
    let input_dim = first.feature.len();
    if let Some(bad) = examples.iter().position(|e| e.feature.len() != input_dim) {
        return Err(Error::dim(format!("feature of example {bad}"), input_dim, examples[bad].feature.len()));
    }
    if let Some(val) = opts.validation {
        if let Some(e) = val.iter().find(|e| e.feature.len() != input_dim) {
            return Err(Error::dim("validation feature", input_dim, e.feature.len()));
        }
    }

    let (mut model, mut adam, done) = match opts.resume_from.take() {
        Some(ck) => {
            if ck.model.input_dim() != input_dim
                || ck.model.hidden_dims() != config.hidden_dims
                || ck.model.dropout_rate() != config.dropout_rate
                || ck.adam.learning_rate != config.learning_rate
            {
                return Err(Error::Config("checkpoint does not match the training configuration".into()));
            }
            (ck.model, ck.adam, ck.epochs_completed)
        }
        None => {
            let model = MlpModel::init(
                input_dim,
                &config.hidden_dims,
                config.dropout_rate,
                stream_seed(config.seed, &[INIT_STREAM]),
            )?;
            let adam = AdamState::new(&model, config.learning_rate);
            (model, adam, 0)
        }
    };

    let class_weight = if config.class_weighting {
        let n = examples.len() as f64;
        let pos = examples.iter().filter(|e| e.label == 1).count() as f64;
        if pos == 0.0 || pos == n {
            [1.0, 1.0]
        } else {
            [n / (2.0 * (n - pos)), n / (2.0 * pos)]
        }
    } else {
        [1.0, 1.0]
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut records = Vec::new();
    for epoch in done + 1..=config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[SHUFFLE_STREAM, epoch])));

        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let passes: Vec<Result<ChunkPass>> = pool.install(|| {
                batch
                    .par_chunks(GRAD_CHUNK)
                    .enumerate()
                    .map(|(c, rows)| {
                        let seed = stream_seed(config.seed, &[DROPOUT_STREAM, epoch, b as u64, c as u64]);
                        chunk_pass(&model, examples, rows, class_weight, batch.len(), seed)
                    })
                    .collect()
            });
            let mut passes = passes.into_iter();
            let ChunkPass { mut loss, mut grads } = passes.next().expect("non-empty batch")?;
            for p in passes {
                let p = p?;
                loss += p.loss;
                grads.add_assign(&p.grads);
            }
            let batch_loss = loss / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut model, &grads, &mut adam)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            epoch_loss += loss;
            steps += 1;
        }

        let (val_loss, val_p_at_1) = match opts.validation {
            Some(val) if !val.is_empty() => {
                let (l, p) = pool.install(|| validation_metrics(&model, val))?;
                (Some(l), Some(p))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            steps,
            train_loss: epoch_loss / examples.len() as f64,
            val_loss,
            val_p_at_1,
        };
        if let Some(dir) = opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(checkpoint_path(dir, epoch), &model, &adam, epoch)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        records.push(record);
    }

    let summary = TrainSummary {
        config_digest: config.digest(),
        examples_digest: examples_digest(examples),
        validation_digest: opts.validation.map(examples_digest),
        seed: config.seed,
        epochs_completed: config.epochs.max(done),
        optimizer_steps: adam.t,
        wall_clock_ms: started.elapsed().as_millis() as u64,
    };
    Ok(TrainOutcome {
        model,
        adam,
        log: TrainLog {
            epochs: records,
            summary,
        },
    })
}
