//! Training and evaluation harness: actor pretraining, the joint cVIB
//! training loop, SNR sweeps, ablation schemes, bit accounting, and image
//! dumps. Everything is deterministic given the seed: shuffles, channel
//! draws, and trial streams all derive from it.

pub mod bits;
pub mod images;
pub mod sweep;

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::channel::ChannelConfig;
use crate::config::{Config, OptimizerKind};
use crate::cvib::{self, CvibError, Grads, LossBreakdown, LossSample};
use crate::models::{self, ActorParams, ModelError, ModelParams, ModelVars, Trainable};
use crate::stream::{self, tag};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::world::{Dataset, WorldError};

pub use sweep::{run_sweep, run_trial, wilson_interval, Scheme, SweepRow, TrialOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
    #[error(transparent)]
    Cvib(#[from] CvibError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch} step {step}; last-good checkpoint retained")]
    NumericAbort { epoch: usize, step: usize },
    #[error("{0}")]
    Invalid(String),
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Plain or momentum SGD over the flat trainable-tensor list.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind,
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, tensors: &mut [(String, &mut Tensor)], grads: &Grads) {
        assert_eq!(tensors.len(), grads.len(), "optimizer/grad arity");
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, t), g) in tensors.iter_mut().zip(grads) {
                    for (p, gv) in t.data_mut().iter_mut().zip(g) {
                        *p -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Momentum => {
                let vel = self
                    .velocity
                    .get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
                for (((_, t), g), v) in tensors.iter_mut().zip(grads).zip(vel.iter_mut()) {
                    for ((p, gv), vv) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vv = self.momentum * *vv + gv;
                        *p -= self.lr * *vv;
                    }
                }
            }
        }
    }
}

fn shuffled_indices(n: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream::stream(seed, tags);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn check_dataset(dataset: &Dataset, cfg: &Config) -> Result<(), HarnessError> {
    if dataset.image_h != cfg.arch.image_h
        || dataset.image_w != cfg.arch.image_w
        || dataset.image_d != cfg.arch.image_d
        || dataset.n_subtasks != cfg.arch.n_subtasks
        || dataset.n_actions != cfg.arch.n_actions
    {
        return Err(HarnessError::Invalid(
            "dataset header does not match the configured architecture".into(),
        ));
    }
    Ok(())
}

// ── Actor pretraining ────────────────────────────────────────────────

/// Supervised cross-entropy on clean `(x, s) → a`; returns the trained
/// parameters (actor updated in place) and the held-out accuracy.
pub fn pretrain_actor(
    dataset: &Dataset,
    cfg: &Config,
) -> Result<(ModelParams, f64), HarnessError> {
    check_dataset(dataset, cfg)?;
    if dataset.samples.is_empty() {
        return Err(HarnessError::Invalid("empty dataset".into()));
    }
    let mut params = ModelParams::init(&cfg.arch, cfg.seed);
    let n = dataset.samples.len();
    let holdout = ((n as f64) * cfg.train.holdout_frac) as usize;
    let train_n = n - holdout;
    if train_n == 0 {
        return Err(HarnessError::Invalid("holdout leaves no training data".into()));
    }

    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.pretrain_lr, cfg.train.momentum);
    let trainable = Trainable::actor_only();
    for epoch in 0..cfg.train.pretrain_epochs {
        let order = shuffled_indices(train_n, cfg.seed, &[tag::SHUFFLE, 1, epoch as u64]);
        for chunk in order.chunks(cfg.train.pretrain_batch) {
            let (_, grads) = actor_batch(&params, dataset, chunk, Some(trainable))?;
            let grads = grads.expect("gradients requested");
            let mut tensors = params.trainable_tensors_mut(trainable);
            opt.step(&mut tensors, &grads);
        }
    }

    let heldout_acc = if holdout > 0 {
        let idx: Vec<usize> = (train_n..n).collect();
        actor_accuracy(&params, dataset, &idx)?
    } else {
        let idx: Vec<usize> = (0..train_n).collect();
        actor_accuracy(&params, dataset, &idx)?
    };
    Ok((params, heldout_acc))
}

/// One supervised actor pass over dataset rows; mean cross-entropy plus
/// gradients when a trainable selection is given.
fn actor_batch(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    trainable: Option<Trainable>,
) -> Result<(f64, Option<Grads>), HarnessError> {
    let b = indices.len();
    let chunk_items = b.div_ceil(cvib::LOSS_CHUNKS);
    let outs: Vec<Result<(f64, Option<Grads>), HarnessError>> = indices
        .par_chunks(chunk_items.max(1))
        .map(|chunk| {
            let pix = params.arch.pixels();
            let mut x = Vec::with_capacity(chunk.len() * pix);
            let mut s = Vec::with_capacity(chunk.len());
            let mut a = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &dataset.samples[i];
                x.extend(sample.image.iter().map(|&v| v as f64));
                s.push(sample.s as usize);
                a.push(sample.a as usize);
            }
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, params, trainable.unwrap_or_default());
            let xv = tape.constant(vec![chunk.len(), pix], x);
            let (logits, _) = models::actor_forward(&mut tape, &vars, xv, &s)?;
            let ce = tape.cross_entropy_logits(logits, a).map_err(ModelError::from)?;
            let loss_sum: f64 = tape.value(ce).iter().sum();
            let grads = match trainable {
                None => None,
                Some(t) => {
                    let total = tape.sum_all(ce);
                    let total = tape.scale(total, 1.0 / b as f64);
                    tape.backward(total).map_err(ModelError::from)?;
                    let handles = vars.trainable_vars(t);
                    Some(handles.iter().map(|&v| tape.grad_or_zeros(v)).collect::<Grads>())
                }
            };
            Ok((loss_sum, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut grads: Option<Grads> = None;
    for out in outs {
        let (l, g) = out?;
        loss += l;
        if let Some(g) = g {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(gi) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    Ok((loss / b as f64, grads))
}

/// Argmax accuracy of the actor on clean images at the given dataset rows.
pub fn actor_accuracy(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64, HarnessError> {
    let pix = params.arch.pixels();
    let hits: usize = indices
        .par_chunks(256)
        .map(|chunk| -> Result<usize, HarnessError> {
            let mut x = Vec::with_capacity(chunk.len() * pix);
            let mut s = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &dataset.samples[i];
                x.extend(sample.image.iter().map(|&v| v as f64));
                s.push(sample.s as usize);
            }
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, params, Trainable::default());
            let xv = tape.constant(vec![chunk.len(), pix], x);
            let (logits, _) = models::actor_forward(&mut tape, &vars, xv, &s)?;
            let na = params.arch.n_actions;
            let mut hits = 0;
            for (row, &i) in tape.value(logits).chunks_exact(na).zip(chunk) {
                if argmax(row) == dataset.samples[i].a as usize {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(hits as f64 / indices.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frozen-actor embeddings of every `(x_i, s_i)` in the dataset — the
/// constant targets of the semantic loss.
pub fn actor_embeddings(
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let pix = params.arch.pixels();
    let dh = params.arch.embed_dim;
    let n = dataset.samples.len();
    let chunks: Vec<Result<Vec<Vec<f64>>, HarnessError>> = (0..n)
        .collect::<Vec<usize>>()
        .par_chunks(256)
        .map(|chunk| {
            let mut x = Vec::with_capacity(chunk.len() * pix);
            let mut s = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend(dataset.samples[i].image.iter().map(|&v| v as f64));
                s.push(dataset.samples[i].s as usize);
            }
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, params, Trainable::default());
            let xv = tape.constant(vec![chunk.len(), pix], x);
            let (_, embed) = models::actor_forward(&mut tape, &vars, xv, &s)?;
            Ok(tape
                .value(embed)
                .chunks_exact(dh)
                .map(|r| r.to_vec())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

// ── Joint cVIB training ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Train `{δ, φ, θ, ψ_aux}` with the frozen actor per the cVIB objective.
/// Non-actor groups are initialized from this run's seed; checkpoints land
/// in `out_dir` every epoch when given. A non-finite loss aborts with the
/// last-good checkpoint retained on disk.
pub fn train(
    dataset: &Dataset,
    actor: &ActorParams,
    cfg: &Config,
    scheme: Scheme,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, Vec<StepRecord>), HarnessError> {
    check_dataset(dataset, cfg)?;
    if scheme == Scheme::UpperBound {
        return Err(HarnessError::Invalid(
            "the upper-bound scheme has no trained pipeline".into(),
        ));
    }
    let mut arch = cfg.arch.clone();
    if scheme == Scheme::NoTilt {
        arch.gamma = 0.0;
    }
    let mut params = ModelParams::init(&arch, cfg.seed);
    params.psi_actor = actor.clone();

    let targets = actor_embeddings(&params, dataset)?;
    let n = dataset.samples.len();
    let trainable = Trainable::cvib();
    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.lr, cfg.train.momentum);
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    use rand::Rng;
    for epoch in 0..cfg.train.epochs {
        let order = shuffled_indices(n, cfg.seed, &[tag::SHUFFLE, 0, epoch as u64]);
        for (step, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<LossSample> = chunk
                .iter()
                .map(|&i| {
                    let sample = &dataset.samples[i];
                    LossSample {
                        image: sample.image_f64(),
                        s: sample.s as usize,
                        a: sample.a as usize,
                        target_embed: Some(targets[i].clone()),
                    }
                })
                .collect();
            let step_seed = stream::derive(cfg.seed, &[tag::TRAIN_STEP, epoch as u64, step as u64]);
            let snr = {
                let mut rng = stream::stream(cfg.seed, &[tag::SNR_PICK, epoch as u64, step as u64]);
                cfg.train.train_snr_db[rng.gen_range(0..cfg.train.train_snr_db.len())]
            };
            let ch = ChannelConfig {
                kind: cfg.channel.kind,
                snr_db: snr,
                equalize: cfg.channel.equalize,
            };
            let (loss, grads) = cvib::compute_loss_grad(
                &batch,
                &params,
                &cfg.weights,
                &ch,
                &ch,
                step_seed,
                trainable,
                scheme.condition_enabled(),
            )?;
            if !loss.is_finite() {
                return Err(HarnessError::NumericAbort { epoch, step });
            }
            let mut tensors = params.trainable_tensors_mut(trainable);
            opt.step(&mut tensors, &grads);
            log.push(StepRecord { epoch, step, loss });
        }
        if let Some(dir) = out_dir {
            let meta = vec![("meta.scheme".to_string(), scheme.label().to_string())];
            params.save_with_meta(&dir.join(format!("ckpt_epoch_{epoch:03}.htc")), &meta)?;
        }
    }

    if let Some(dir) = out_dir {
        let meta = vec![("meta.scheme".to_string(), scheme.label().to_string())];
        params.save_with_meta(&dir.join("model.htc"), &meta)?;
        write_train_log(&dir.join("train_log.csv"), &log)?;
    }
    Ok((params, log))
}

/// Per-step loss CSV: `step,rate_kl,semantic,alignment_ce,subtask_kl,total`.
pub fn write_train_log(path: &Path, log: &[StepRecord]) -> std::io::Result<()> {
    let mut out = String::from("step,rate_kl,semantic,alignment_ce,subtask_kl,total\n");
    for (i, rec) in log.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            i, rec.loss.rate_kl, rec.loss.semantic, rec.loss.alignment_ce, rec.loss.subtask_kl, rec.loss.total
        ));
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;
    use crate::world::{self, WorldConfig};

    pub(crate) fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.arch = ArchConfig {
            image_h: 8,
            image_w: 8,
            image_d: 3,
            k: 4,
            k_c: 2,
            hidden1: 16,
            hidden2: 12,
            embed_dim: 8,
            gamma: 1.1,
            n_subtasks: 4,
            n_actions: 5,
        };
        cfg.world = WorldConfig {
            image_h: 8,
            image_w: 8,
            blob: 3,
            ..WorldConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg.train.pretrain_epochs = 3;
        cfg.train.pretrain_batch = 8;
        cfg.train.n_samples = 48;
        cfg.seed = 7;
        cfg
    }

    fn tiny_dataset(cfg: &Config, n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let mut rng = stream::stream(cfg.seed, &[tag::WORLD, i as u64]);
                world::generate_sample(&cfg.world, &mut rng)
            })
            .collect();
        Dataset {
            image_h: cfg.world.image_h,
            image_w: cfg.world.image_w,
            image_d: cfg.world.image_d,
            n_subtasks: cfg.world.n_subtasks,
            n_actions: cfg.world.n_actions,
            samples,
        }
    }

    #[test]
    fn one_sample_memorization() {
        let mut cfg = tiny_config();
        cfg.train.pretrain_epochs = 60;
        cfg.train.pretrain_batch = 1;
        cfg.train.holdout_frac = 0.0;
        let dataset = tiny_dataset(&cfg, 1);
        let (params, _) = pretrain_actor(&dataset, &cfg).unwrap();
        let acc = actor_accuracy(&params, &dataset, &[0]).unwrap();
        assert_eq!(acc, 1.0, "single sample not memorized");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny_config();
        cfg.train.lr = 1e-300; // positive per config contract, effectively zero
        cfg.train.epochs = 1;
        let dataset = tiny_dataset(&cfg, 16);
        let (actor_params, _) = pretrain_actor(&dataset, &cfg).unwrap();
        let init = ModelParams::init(&cfg.arch, cfg.seed);
        let (trained, _) = train(&dataset, &actor_params.psi_actor, &cfg, Scheme::Full, None).unwrap();
        // actor untouched by construction; other groups moved by ≤ lr·|v| ≈ 0
        for ((n1, t1), (_, t2)) in init.named_tensors().iter().zip(trained.named_tensors()) {
            if n1.starts_with("psi_actor.") {
                continue;
            }
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert!((a - b).abs() < 1e-290, "{n1} moved");
            }
        }
    }

    #[test]
    fn frozen_actor_bytes_identical_after_training() {
        let cfg = tiny_config();
        let dataset = tiny_dataset(&cfg, 24);
        let (actor_params, _) = pretrain_actor(&dataset, &cfg).unwrap();
        let before = actor_params.group_bytes("psi_actor.");
        let (trained, _) = train(&dataset, &actor_params.psi_actor, &cfg, Scheme::Full, None).unwrap();
        assert_eq!(before, trained.group_bytes("psi_actor."));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let dataset = tiny_dataset(&cfg, 24);
        let run = || {
            let (actor_params, _) = pretrain_actor(&dataset, &cfg).unwrap();
            let (trained, log) = train(&dataset, &actor_params.psi_actor, &cfg, Scheme::Full, None).unwrap();
            let bytes: Vec<u8> = trained
                .named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
                .collect();
            (bytes, log.last().unwrap().loss.total)
        };
        let (b1, l1) = run();
        let (b2, l2) = run();
        assert_eq!(b1, b2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn loss_log_has_batch_count() {
        let cfg = tiny_config();
        let dataset = tiny_dataset(&cfg, 24);
        let (actor_params, _) = pretrain_actor(&dataset, &cfg).unwrap();
        let (_, log) = train(&dataset, &actor_params.psi_actor, &cfg, Scheme::Full, None).unwrap();
        assert_eq!(log.len(), cfg.train.epochs * 3); // 24/8 batches per epoch
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}
