//! The mini-batch cVIB loss: rate KL of the received latent against a
//! standard-normal complex prior, a semantic surrogate through the frozen
//! actor, an alignment cross-entropy on the auxiliary head, and the subtask
//! KL of the conditional module — assembled with per-term reporting.
//!
//! Every stochastic draw comes from a stream keyed by `(step_seed, datum
//! index, mc index)`, so a Monte Carlo run with `J` samples replays exactly
//! as `J` single-sample runs, and fixed seeds make the loss a pure function
//! of the parameters (the basis for finite-difference gradient checks).

use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{
    self, ChannelConfig, ChannelError, ComplexVector,
};
use crate::gaussian::{self, DiagGaussian};
use crate::models::{
    self, ModelError, ModelParams, ModelVars, Trainable,
};
use crate::stream::{self, tag};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::TensorError;
use crate::world::SubtaskSample;

#[derive(Debug, Error)]
pub enum CvibError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch item {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rescaled regularization weights and the Monte Carlo sample count.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub beta3_hat: f64,
    pub beta4_hat: f64,
    pub j: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1_hat: 1.0,
            beta2_hat: 0.2,
            beta3_hat: 1.0,
            beta4_hat: 0.2,
            j: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta1_hat < 0.0 || self.beta2_hat < 0.0 || self.beta3_hat < 0.0 || self.beta4_hat < 0.0 {
            return Err("loss weights must be non-negative".into());
        }
        if self.j == 0 {
            return Err("at least one Monte Carlo sample per datum".into());
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation; `total` is the exact weighted
/// recomposition of the four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rate_kl: f64,
    pub semantic: f64,
    pub alignment_ce: f64,
    pub subtask_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(rate_kl: f64, semantic: f64, alignment_ce: f64, subtask_kl: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            rate_kl,
            semantic,
            alignment_ce,
            subtask_kl,
            total: w.beta1_hat * rate_kl
                + (1.0 + w.beta4_hat) * semantic
                + w.beta2_hat * alignment_ce
                + w.beta3_hat * subtask_kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// One training datum prepared for the loss: image as f64 plus an optional
/// precomputed actor embedding of `(image, s)` (the frozen semantic target).
#[derive(Debug, Clone)]
pub struct LossSample {
    pub image: Vec<f64>,
    pub s: usize,
    pub a: usize,
    pub target_embed: Option<Vec<f64>>,
}

impl LossSample {
    pub fn from_world(sample: &SubtaskSample) -> Self {
        LossSample {
            image: sample.image_f64(),
            s: sample.s as usize,
            a: sample.a as usize,
            target_embed: None,
        }
    }
}

/// Fixed chunk count for the deterministic parallel reduction; per-chunk
/// partial sums are folded in chunk order regardless of scheduling.
pub const LOSS_CHUNKS: usize = 4;

/// Gradient buffers parallel to `ModelParams::trainable_tensors(trainable)`.
pub type Grads = Vec<Vec<f64>>;

/// Squared distance between frozen-actor embeddings of `y` and `x` per row;
/// the x-side embedding is cut from the graph, so gradient flows into `y`
/// only.
pub fn semantic_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    x: Var,
    y: Var,
    subtasks: &[usize],
) -> Result<Var, ModelError> {
    let (_, ex) = models::actor_forward(tape, vars, x, subtasks)?;
    let target = tape.constant(tape.shape(ex).to_vec(), tape.value(ex).to_vec());
    semantic_loss_to_target(tape, vars, y, target, subtasks)
}

/// Semantic surrogate against a precomputed constant target embedding.
pub fn semantic_loss_to_target(
    tape: &mut Tape,
    vars: &ModelVars,
    y: Var,
    target: Var,
    subtasks: &[usize],
) -> Result<Var, ModelError> {
    let (_, ey) = models::actor_forward(tape, vars, y, subtasks)?;
    let d = tape.sub(ey, target).map_err(ModelError::from)?;
    let d2 = tape.mul(d, d).map_err(ModelError::from)?;
    Ok(tape.sum_rows(d2))
}

struct ChunkOut {
    rate_sum: f64,
    sem_sum: f64,
    ce_sum: f64,
    sub_sum: f64,
    grads: Option<Grads>,
}

/// Evaluate Eq.-(22)-style loss terms for a batch. `j_indices` selects which
/// Monte Carlo stream indices to run (the public entry uses `0..J`).
#[allow(clippy::too_many_arguments)]
fn run_chunks(
    batch: &[LossSample],
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
    j_indices: &[usize],
    condition_enabled: bool,
    trainable: Option<Trainable>,
) -> Result<(LossBreakdown, Option<Grads>), CvibError> {
    if batch.is_empty() {
        return Err(CvibError::EmptyBatch);
    }
    let arch = &params.arch;
    for (index, item) in batch.iter().enumerate() {
        if item.image.len() != arch.pixels() {
            return Err(CvibError::InvalidSample {
                index,
                reason: format!("image has {} values, expected {}", item.image.len(), arch.pixels()),
            });
        }
        if item.s >= arch.n_subtasks {
            return Err(CvibError::InvalidSample {
                index,
                reason: format!("subtask {} out of range", item.s),
            });
        }
        if item.a >= arch.n_actions {
            return Err(CvibError::InvalidSample {
                index,
                reason: format!("action {} out of range", item.a),
            });
        }
    }

    let b = batch.len();
    let jn = j_indices.len();
    let chunk_items = b.div_ceil(LOSS_CHUNKS);
    let ranges: Vec<(usize, usize)> = (0..b)
        .step_by(chunk_items)
        .map(|lo| (lo, (lo + chunk_items).min(b)))
        .collect();

    let outs: Vec<Result<ChunkOut, CvibError>> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            chunk_pass(
                &batch[lo..hi],
                lo,
                b,
                params,
                w,
                ch_task,
                ch_sub,
                step_seed,
                j_indices,
                condition_enabled,
                trainable,
            )
        })
        .collect();

    let mut rate = 0.0;
    let mut sem = 0.0;
    let mut ce = 0.0;
    let mut sub = 0.0;
    let mut grads: Option<Grads> = None;
    for out in outs {
        let out = out?;
        rate += out.rate_sum;
        sem += out.sem_sum;
        ce += out.ce_sum;
        sub += out.sub_sum;
        if let Some(g) = out.grads {
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
    let denom = (b * jn) as f64;
    let breakdown = LossBreakdown::compose(rate / denom, sem / denom, ce / denom, sub / b as f64, w);
    Ok((breakdown, grads))
}

#[allow(clippy::too_many_arguments)]
fn chunk_pass(
    items: &[LossSample],
    base_index: usize,
    batch_len: usize,
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
    j_indices: &[usize],
    condition_enabled: bool,
    trainable: Option<Trainable>,
) -> Result<ChunkOut, CvibError> {
    let arch = &params.arch;
    let jn = j_indices.len();
    let rows = items.len() * jn;
    let (tc, tk, pix) = (2 * arch.k_c, 2 * arch.k, arch.pixels());

    // row layout: (item 0, j_0..j_n), (item 1, j_0..j_n), ...
    let mut x_rows = Vec::with_capacity(rows * pix);
    let mut s_rows = Vec::with_capacity(rows);
    let mut a_rows = Vec::with_capacity(rows);
    let mut j_mask = Vec::with_capacity(rows);
    let mut c_eps = Vec::with_capacity(rows * tc);
    let mut z_eps = Vec::with_capacity(rows * tk);
    let mut sub_reals = Vec::with_capacity(rows);
    let mut task_reals = Vec::with_capacity(rows);
    let mut sub_nre = Vec::with_capacity(rows * arch.k_c);
    let mut sub_nim = Vec::with_capacity(rows * arch.k_c);
    let mut task_nre = Vec::with_capacity(rows * arch.k);
    let mut task_nim = Vec::with_capacity(rows * arch.k);
    use rand::Rng;
    use rand_distr::StandardNormal;
    for (ii, item) in items.iter().enumerate() {
        let i = (base_index + ii) as u64;
        for (jj, &j) in j_indices.iter().enumerate() {
            x_rows.extend_from_slice(&item.image);
            s_rows.push(item.s);
            a_rows.push(item.a);
            j_mask.push(if jj == 0 { 1.0 } else { 0.0 });

            let mut rc = stream::stream(step_seed, &[tag::COND_SAMPLE, i, j as u64]);
            for _ in 0..tc {
                c_eps.push(rc.sample::<f64, _>(StandardNormal));
            }
            let mut rz = stream::stream(step_seed, &[tag::LATENT_SAMPLE, i, j as u64]);
            for _ in 0..tk {
                z_eps.push(rz.sample::<f64, _>(StandardNormal));
            }
            let mut rs = stream::stream(step_seed, &[tag::SUB_CHANNEL, i, j as u64]);
            let rsub = channel::realize(ch_sub, &mut rs);
            let (nre, nim) = channel::draw_noise(&[rsub], arch.k_c, &mut rs);
            sub_reals.push(rsub);
            sub_nre.extend(nre);
            sub_nim.extend(nim);
            let mut rt = stream::stream(step_seed, &[tag::TASK_CHANNEL, i, j as u64]);
            let rtask = channel::realize(ch_task, &mut rt);
            let (nre, nim) = channel::draw_noise(&[rtask], arch.k, &mut rt);
            task_reals.push(rtask);
            task_nre.extend(nre);
            task_nim.extend(nim);
        }
    }

    let mut tape = Tape::new();
    let vars = ModelVars::insert(&mut tape, params, trainable.unwrap_or_default());
    let x = tape.constant(vec![rows, pix], x_rows);

    // (1) subtask representation and its KL against N(0, I), once per datum
    let (c_cv, sub_rows_var) = if condition_enabled {
        let c_dist = models::conditional_forward(&mut tape, &vars, &s_rows)?;
        let std_prior = DiagGaussian::isotropic(&mut tape, vec![rows, tc], 1.0);
        let sub_rows = gaussian::kl(&mut tape, &c_dist, &std_prior)?;
        let eps = tape.constant(vec![rows, tc], c_eps);
        let c = gaussian::sample_with_eps(&mut tape, &c_dist, eps);
        (ComplexVector::from_interleaved(&mut tape, c)?, Some(sub_rows))
    } else {
        let re = tape.constant(vec![rows, arch.k_c], vec![0.0; rows * arch.k_c]);
        let im = tape.constant(vec![rows, arch.k_c], vec![0.0; rows * arch.k_c]);
        (ComplexVector { re, im }, None)
    };

    // (2) subtask representation over the channel
    let (c_hat, _) = channel::transmit_rows_with_noise(&mut tape, &c_cv, &sub_reals, sub_nre, sub_nim)?;

    // (3) encode conditioned on the received representation; rate KL of the
    // received-latent posterior against CN(0, I)
    let z_dist = models::encoder_forward(&mut tape, &vars, x, &c_hat)?;
    let posterior = channel::received_posterior_rows(&mut tape, &z_dist, &task_reals)?;
    let prior = DiagGaussian::isotropic(&mut tape, vec![rows, tk], 0.5);
    let rate_rows = gaussian::kl(&mut tape, &posterior, &prior)?;

    // (4) sample the latent and transmit it
    let eps = tape.constant(vec![rows, tk], z_eps);
    let z = gaussian::sample_with_eps(&mut tape, &z_dist, eps);
    let z_cv = ComplexVector::from_interleaved(&mut tape, z)?;
    let (z_hat, _) = channel::transmit_rows_with_noise(&mut tape, &z_cv, &task_reals, task_nre, task_nim)?;

    // (5) reconstruct and score through the frozen actor
    let y = models::decoder_forward(&mut tape, &vars, &z_hat, &c_cv)?;
    let sem_rows = if items.iter().all(|it| it.target_embed.is_some()) {
        let mut t = Vec::with_capacity(rows * arch.embed_dim);
        for item in items {
            for _ in 0..jn {
                t.extend_from_slice(item.target_embed.as_ref().unwrap());
            }
        }
        let target = tape.constant(vec![rows, arch.embed_dim], t);
        semantic_loss_to_target(&mut tape, &vars, y, target, &s_rows)?
    } else {
        semantic_loss(&mut tape, &vars, x, y, &s_rows)?
    };

    // (6) alignment cross-entropy on the auxiliary head
    let logits = models::aux_head_forward(&mut tape, &vars, &z_hat, &c_cv)?;
    let ce_rows = tape.cross_entropy_logits(logits, a_rows)?;

    let rate_sum = sum_values(&tape, rate_rows);
    let sem_sum = sum_values(&tape, sem_rows);
    let ce_sum = sum_values(&tape, ce_rows);
    let sub_sum = match sub_rows_var {
        Some(v) => {
            let mask = &j_mask;
            tape.value(v)
                .iter()
                .zip(mask)
                .map(|(kl, m)| kl * m)
                .sum()
        }
        None => 0.0,
    };

    let grads = match trainable {
        None => None,
        Some(t) => {
            // weighted scalar whose batch-summed gradient equals the full
            // mini-batch objective's
            let denom = (batch_len * jn) as f64;
            let rsum = tape.sum_all(rate_rows);
            let ssum = tape.sum_all(sem_rows);
            let csum = tape.sum_all(ce_rows);
            let mut total = tape.scale(rsum, w.beta1_hat / denom);
            let sterm = tape.scale(ssum, (1.0 + w.beta4_hat) / denom);
            total = tape.add(total, sterm).map_err(CvibError::from)?;
            let cterm = tape.scale(csum, w.beta2_hat / denom);
            total = tape.add(total, cterm).map_err(CvibError::from)?;
            if let Some(sub_rows) = sub_rows_var {
                let mask = tape.constant(vec![rows], j_mask.clone());
                let masked = tape.mul(sub_rows, mask).map_err(CvibError::from)?;
                let subsum = tape.sum_all(masked);
                let subterm = tape.scale(subsum, w.beta3_hat / batch_len as f64);
                total = tape.add(total, subterm).map_err(CvibError::from)?;
            }
            tape.backward(total).map_err(CvibError::from)?;
            let handles = vars.trainable_vars(t);
            Some(handles.iter().map(|&v| tape.grad_or_zeros(v)).collect())
        }
    };

    Ok(ChunkOut {
        rate_sum,
        sem_sum,
        ce_sum,
        sub_sum,
        grads,
    })
}

fn sum_values(tape: &Tape, v: Var) -> f64 {
    tape.value(v).iter().sum()
}

/// Loss terms only (no gradients).
pub fn compute_loss(
    batch: &[LossSample],
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
) -> Result<LossBreakdown, CvibError> {
    let js: Vec<usize> = (0..w.j).collect();
    run_chunks(batch, params, w, ch_task, ch_sub, step_seed, &js, true, None).map(|(b, _)| b)
}

/// Loss terms restricted to explicit Monte Carlo stream indices; the J-run
/// total equals the average of the single-index runs on the same streams.
pub fn compute_loss_mc(
    batch: &[LossSample],
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
    j_indices: &[usize],
) -> Result<LossBreakdown, CvibError> {
    run_chunks(batch, params, w, ch_task, ch_sub, step_seed, j_indices, true, None).map(|(b, _)| b)
}

/// Loss terms plus gradients for the selected parameter groups, in
/// `ModelParams::trainable_tensors` order.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss_grad(
    batch: &[LossSample],
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
    trainable: Trainable,
    condition_enabled: bool,
) -> Result<(LossBreakdown, Grads), CvibError> {
    let js: Vec<usize> = (0..w.j).collect();
    let (b, g) = run_chunks(
        batch,
        params,
        w,
        ch_task,
        ch_sub,
        step_seed,
        &js,
        condition_enabled,
        Some(trainable),
    )?;
    Ok((b, g.expect("gradients requested")))
}

/// Loss terms with the conditional pathway toggled (the no-condition scheme
/// feeds zero vectors and drops the subtask KL).
pub fn compute_loss_opts(
    batch: &[LossSample],
    params: &ModelParams,
    w: &LossWeights,
    ch_task: &ChannelConfig,
    ch_sub: &ChannelConfig,
    step_seed: u64,
    condition_enabled: bool,
) -> Result<LossBreakdown, CvibError> {
    let js: Vec<usize> = (0..w.j).collect();
    run_chunks(batch, params, w, ch_task, ch_sub, step_seed, &js, condition_enabled, None)
        .map(|(b, _)| b)
}
