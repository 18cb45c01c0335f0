//! Pretraining: batching, optimization, schedule, checkpoints and the
//! per-step metrics log.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{file_hash, load_checkpoint, resume_checkpoint, save_checkpoint};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{loss_and_grads, Batch, LossBreakdown, LossConfig};
use crate::dataset::{make_views, tokenize, Corpus, Split, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::child_rng;

pub const CHECKPOINT_FILE: &str = "checkpoint.t3dc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const NUM_WORKERS_ENV: &str = "T3D_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub views: usize,
    pub crop_dims: [usize; 3],
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub freeze_text: bool,
    /// Write `checkpoints/step-NNNNNN.t3dc` every this many steps; 0 = never.
    pub checkpoint_every: u64,
    /// Record per-step wall time in the metrics log; off gives byte-stable logs.
    pub log_wall_time: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            warmup_epochs: 5,
            total_epochs: 50,
            batch_size: 16,
            views: crate::dataset::DEFAULT_VIEWS,
            crop_dims: [16, 16, 8],
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            freeze_text: false,
            checkpoint_every: 0,
            log_wall_time: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return bad("warmup_epochs must be below total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.batch_size < 2 && self.loss.tma_weight > 0.0 {
            return bad("batch_size must be at least 2 when tma_weight > 0");
        }
        if self.views == 0 {
            return bad("views must be at least 1");
        }
        if self.crop_dims.contains(&0) {
            return bad("crop_dims must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(checkpoint::hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn schedule(&self, steps_per_epoch: u64) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs as u64 * steps_per_epoch,
            total_steps: self.total_epochs as u64 * steps_per_epoch,
        }
    }
}

/// `lr_at` for a config whose epochs hold `steps_per_epoch` steps.
pub fn lr_at(step: u64, config: &TrainConfig, steps_per_epoch: u64) -> f64 {
    config.schedule(steps_per_epoch).lr_at(step)
}

/// Everything a run needs to continue bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.batch_size)?;
        let optimizer = AdamW::new(config.optimizer, model.store.iter().map(|(_, p)| p.value.numel()));
        Ok(TrainState {
            config: config.clone(),
            fingerprint: config.fingerprint()?,
            model,
            optimizer,
            step: 0,
            epoch: 0,
            rng: child_rng(config.seed, "run", 0),
        })
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.config.freeze_text && name.starts_with("text."))
    }
}

/// Forward, backward, clip and update at `lr`. Aborts with a divergence
/// error carrying the step index when the loss or a gradient is not finite.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    let step = state.step;
    let (loss, grads) = match loss_and_grads(batch, &state.model, &state.config.loss) {
        Err(Error::DegenerateNorm(n)) if !n.is_finite() => return Err(Error::Diverged { step }),
        other => other?,
    };
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    // Parameters the loss never reaches (e.g. fusion under tma_weight=0) are
    // skipped entirely, so weight decay does not move them either.
    let trainable: Vec<bool> = state
        .model
        .store
        .iter()
        .map(|(id, p)| state.trainable(&p.name) && grads.get(id).is_some())
        .collect();
    let mut dense = grads.into_dense(&state.model.store);
    if dense.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step });
    }
    let mut active: Vec<&mut [f64]> = dense
        .iter_mut()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(g, _)| g.data_mut())
        .collect();
    clip_global_norm(&mut active, state.config.clip_norm);
    let slots = state
        .model
        .store
        .params_mut()
        .iter_mut()
        .zip(&dense)
        .enumerate()
        .filter(|(i, _)| trainable[*i])
        .map(|(i, (p, g))| (i, p.value.data_mut(), g.data(), p.decay));
    state.optimizer.step(lr, slots);
    state.step += 1;
    Ok(loss)
}

/// Fixed batch composition drawn once per run; the visiting order of the
/// batches is reshuffled every epoch. The incomplete tail is dropped.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    batches: Vec<Vec<usize>>,
    seed: u64,
}

impl BatchPlan {
    pub fn new(indices: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if indices.len() < batch_size {
            return Err(Error::Config(format!(
                "{} training samples cannot fill a batch of {batch_size}",
                indices.len()
            )));
        }
        let mut order = indices.to_vec();
        order.shuffle(&mut child_rng(seed, "batches", 0));
        let batches = order
            .chunks_exact(batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        Ok(BatchPlan { batches, seed })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches.len() as u64
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// Corpus indices of the batch visited at global `step`.
    pub fn batch_at(&self, step: u64) -> &[usize] {
        let spe = self.steps_per_epoch();
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(&mut child_rng(self.seed, "epoch", step / spe));
        &self.batches[order[(step % spe) as usize]]
    }
}

/// Worker count from `T3D_NUM_WORKERS`, default 1.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Assembles a batch; sample `k`'s crops come from a generator derived from
/// `(step_seed, k)`, so the result does not depend on `workers`.
pub fn assemble_batch(
    corpus: &Corpus,
    tokens: &[TokenSequence],
    indices: &[usize],
    views: usize,
    crop_dims: [usize; 3],
    step_seed: u64,
    workers: usize,
) -> Result<Batch> {
    let crop = |k: usize| -> Result<Vec<crate::dataset::Volume>> {
        let mut rng = child_rng(step_seed, "views", k as u64);
        Ok(make_views(&corpus.volumes[k], views, crop_dims, &mut rng)?
            .into_iter()
            .map(|c| c.volume)
            .collect())
    };
    let all_views: Vec<Vec<crate::dataset::Volume>> = if workers <= 1 {
        indices.iter().map(|&k| crop(k)).collect::<Result<_>>()?
    } else {
        let per = indices.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(|&k| crop(k)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(indices.len());
            for h in handles {
                out.extend(h.join().expect("data worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    Ok(Batch {
        volumes: indices.iter().map(|&k| corpus.volumes[k].clone()).collect(),
        views: all_views,
        tokens: indices.iter().map(|&k| tokens[k].clone()).collect(),
    })
}

/// Tokenizes every report of the corpus to the model's token length.
pub fn tokenize_corpus(corpus: &Corpus, max_tokens: usize) -> Result<Vec<TokenSequence>> {
    corpus
        .records
        .iter()
        .map(|r| tokenize(&r.report_text, &corpus.vocab, max_tokens))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub gca: f64,
    pub tma: f64,
    pub total: f64,
    pub wall_ms: f64,
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint; its fingerprint must match the config.
    pub resume: Option<PathBuf>,
    /// Stop once the global step counter reaches this value.
    pub stop_after: Option<u64>,
    pub workers: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub state: TrainState,
    pub steps_per_epoch: u64,
}

/// Runs (or continues) pretraining on the corpus' train split, writing
/// `metrics.jsonl`, optional periodic checkpoints and `checkpoint.t3dc`
/// under `out_dir`.
pub fn run_pretraining(
    config: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutput> {
    config.validate()?;
    if corpus.vocab.len() > config.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} tokens, model.vocab_size is {}",
            corpus.vocab.len(),
            config.model.vocab_size
        )));
    }
    let plan = BatchPlan::new(&corpus.indices(Split::Train), config.batch_size, config.seed)?;
    let spe = plan.steps_per_epoch();
    let schedule = config.schedule(spe);
    let tokens = tokenize_corpus(corpus, config.model.max_tokens)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = match &opts.resume {
        Some(p) => resume_checkpoint(p, config)?,
        None => TrainState::new(config)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    // Rows logged before the checkpoint are kept verbatim so a resumed log is
    // byte-identical to an uninterrupted one.
    let kept: Vec<String> = if opts.resume.is_some() && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: MetricsRecord = serde_json::from_str(line)?;
            if r.step < state.step {
                rows.push(line.to_string());
            }
        }
        rows
    } else {
        Vec::new()
    };
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    for line in &kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let end = opts
        .stop_after
        .map_or(schedule.total_steps, |s| s.min(schedule.total_steps));
    let workers = opts.workers.max(1);
    while state.step < end {
        let t0 = Instant::now();
        let step = state.step;
        state.epoch = step / spe;
        let step_seed: u64 = state.rng.gen();
        let batch = assemble_batch(
            corpus,
            &tokens,
            plan.batch_at(step),
            config.views,
            config.crop_dims,
            step_seed,
            workers,
        )?;
        let lr = schedule.lr_at(step);
        let loss = train_step(&mut state, &batch, lr)?;
        let record = MetricsRecord {
            step,
            epoch: state.epoch,
            lr,
            gca: loss.gca,
            tma: loss.tma,
            total: loss.total,
            wall_ms: if config.log_wall_time {
                t0.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
        if step % 50 == 0 {
            log::info!(
                "step {step} epoch {} lr {lr:.2e} gca {:.4} tma {:.4}",
                state.epoch,
                loss.gca,
                loss.tma
            );
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            let dir = out_dir.join("checkpoints");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_checkpoint(&state, dir.join(format!("step-{:06}.t3dc", state.step)))?;
        }
    }
    if spe > 0 {
        state.epoch = state.step / spe;
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&state, &checkpoint)?;
    Ok(RunOutput {
        checkpoint,
        metrics: metrics_path,
        state,
        steps_per_epoch: spe,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::dataset::{Preprocess, Vocab, Volume};
    use crate::model::StageConfig;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            views: 2,
            crop_dims: [4, 4, 2],
            total_epochs: 2,
            warmup_epochs: 1,
            log_wall_time: false,
            model: ModelConfig {
                stem_channels: 4,
                stages: vec![StageConfig { channels: 8, stride: 2 }],
                norm_groups: 2,
                max_tokens: 8,
                text_width: 16,
                text_layers: 1,
                shared_dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::from_words(["a", "b", "c"]);
        let vol = |rng: &mut ChaCha8Rng, d: [usize; 3]| {
            Volume::from_fn(d, [1.0; 3], |_, _, _| rng.gen::<f32>())
                .unwrap()
                .with_unit_range()
                .unwrap()
        };
        Batch {
            volumes: (0..3).map(|_| vol(&mut rng, [8, 8, 4])).collect(),
            views: (0..3).map(|_| (0..2).map(|_| vol(&mut rng, [4, 4, 2])).collect()).collect(),
            tokens: ["a b", "c", "b c a"]
                .iter()
                .map(|t| tokenize(t, &vocab, 8).unwrap())
                .collect(),
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.warmup_epochs = 50;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.loss.tma_weight = 0.0;
        assert!(c.validate().is_ok());
        let mut c = TrainConfig::default();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.total_epochs = 0;
        c.warmup_epochs = 0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.model.fusion_layers = 2;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn lr_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c, 12), 0.0);
        assert_eq!(lr_at(60, &c, 12), 1e-3);
        assert!(lr_at(600, &c, 12).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_step_leaves_parameters_bit_identical() {
        let mut s = TrainState::new(&tiny_config()).unwrap();
        let before = s.model.store.clone();
        train_step(&mut s, &batch(1), 0.0).unwrap();
        assert_eq!(s.model.store, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let mut a = TrainState::new(&tiny_config()).unwrap();
        let mut b = TrainState::new(&tiny_config()).unwrap();
        let la = train_step(&mut a, &batch(2), 1e-3).unwrap();
        let lb = train_step(&mut b, &batch(2), 1e-3).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.optimizer, b.optimizer);
    }

    #[test]
    fn frozen_text_parameters_do_not_move() {
        let mut cfg = tiny_config();
        cfg.freeze_text = true;
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.model.store.clone();
        train_step(&mut s, &batch(3), 1e-2).unwrap();
        for ((_, p), (_, q)) in s.model.store.iter().zip(before.iter()) {
            if p.name.starts_with("text.") {
                assert_eq!(p.value, q.value, "{}", p.name);
            }
        }
        assert_ne!(s.model.store, before);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut s = TrainState::new(&tiny_config()).unwrap();
        s.step = 41;
        let id = s.model.store.find("proj_v.weight").unwrap();
        s.model.store.value_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(train_step(&mut s, &batch(4), 1e-3), Err(Error::Diverged { step: 41 })));
    }

    #[test]
    fn batch_plan_fixes_composition_and_drops_the_tail() {
        let idx: Vec<usize> = (0..10).collect();
        let plan = BatchPlan::new(&idx, 3, 5).unwrap();
        assert_eq!(plan.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = plan.batches().iter().flatten().copied().collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let epoch0: Vec<&[usize]> = (0..3).map(|s| plan.batch_at(s)).collect();
        let epoch1: Vec<&[usize]> = (3..6).map(|s| plan.batch_at(s)).collect();
        for b in &epoch1 {
            assert!(epoch0.contains(b));
        }
        assert!(BatchPlan::new(&idx[..2], 3, 5).is_err());
    }

    #[test]
    fn batches_do_not_depend_on_worker_count() {
        let vocab = Vocab::from_words(["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let volumes: Vec<Volume> = (0..5)
            .map(|_| {
                Volume::from_fn([8, 8, 4], [1.0; 3], |_, _, _| rng.gen::<f32>())
                    .unwrap()
                    .with_unit_range()
                    .unwrap()
            })
            .collect();
        let corpus = Corpus {
            root: PathBuf::new(),
            records: vec![],
            volumes,
            vocab: vocab.clone(),
        };
        let tokens: Vec<TokenSequence> = (0..5).map(|_| tokenize("a", &vocab, 4).unwrap()).collect();
        let one = assemble_batch(&corpus, &tokens, &[4, 0, 2], 3, [4, 4, 2], 77, 1).unwrap();
        let many = assemble_batch(&corpus, &tokens, &[4, 0, 2], 3, [4, 4, 2], 77, 3).unwrap();
        assert_eq!(one.views, many.views);
        let _ = Preprocess::default();
    }
}
