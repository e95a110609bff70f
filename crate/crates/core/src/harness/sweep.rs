//! Success-rate evaluation: full-pipeline trials over an SNR grid, ablation
//! schemes on shared per-trial streams, Wilson intervals, and CSV output.

use std::path::Path;

use rayon::prelude::*;

use crate::channel::{self, ChannelConfig, ChannelKind, ComplexVector, TransmitStats};
use crate::gaussian;
use crate::models::{self, ModelParams, ModelVars, Trainable};
use crate::stream::{self, tag};
use crate::tensor::tape::Tape;
use crate::world::{self, WorldConfig};

use super::{argmax, HarnessError};

/// Evaluation schemes: the full conditioned pipeline, tilts disabled,
/// condition channel disabled entirely, and the clean-image upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Full,
    NoTilt,
    NoCondition,
    UpperBound,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Full => "hitoc",
            Scheme::NoTilt => "no-tilt",
            Scheme::NoCondition => "no-condition",
            Scheme::UpperBound => "upper-bound",
        }
    }

    pub fn condition_enabled(&self) -> bool {
        matches!(self, Scheme::Full | Scheme::NoTilt)
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "hitoc" | "full" => Some(Scheme::Full),
            "no-tilt" => Some(Scheme::NoTilt),
            "no-condition" => Some(Scheme::NoCondition),
            "upper-bound" => Some(Scheme::UpperBound),
            _ => None,
        }
    }
}

/// One evaluated trial: actor-argmax success and the task-channel power
/// sums behind the measured SNR.
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    pub success: bool,
    pub stats: TransmitStats,
}

/// One sweep row per (snr, scheme): Wilson 95% interval around the success
/// rate plus the measured task-channel SNR.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub snr_db: f64,
    pub channel: ChannelKind,
    pub scheme: &'static str,
    pub success_rate: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    pub n_trials: usize,
    pub measured_snr_db: f64,
}

/// Wilson 95% score interval.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64, f64) {
    let z = 1.959963984540054f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // clamp so the interval brackets the point estimate at the extremes
    let lo = (center - half).max(0.0).min(p);
    let hi = (center + half).min(1.0).max(p);
    (p, lo, hi)
}

/// Run the full pipeline on one fresh sample: conditional → channel →
/// encoder → channel → decoder → frozen actor argmax. The per-trial stream
/// is scheme-independent, so schemes compare on identical draws.
pub fn run_trial(
    params: &ModelParams,
    scheme: Scheme,
    kind: ChannelKind,
    snr_db: f64,
    world_cfg: &WorldConfig,
    equalize: bool,
    trial_seed: u64,
) -> Result<TrialOutcome, HarnessError> {
    let mut world_rng = stream::stream(trial_seed, &[1]);
    let sample = world::generate_sample(world_cfg, &mut world_rng);
    let x = sample.image_f64();
    let s = sample.s as usize;
    let a = sample.a as usize;

    let mut tape = Tape::new();
    let vars = ModelVars::insert(&mut tape, params, Trainable::default());
    let pix = params.arch.pixels();

    if scheme == Scheme::UpperBound {
        let xv = tape.constant(vec![1, pix], x);
        let (logits, _) = models::actor_forward(&mut tape, &vars, xv, &[s])?;
        return Ok(TrialOutcome {
            success: argmax(tape.value(logits)) == a,
            stats: TransmitStats::default(),
        });
    }

    let cfg = ChannelConfig {
        kind,
        snr_db,
        equalize,
    };
    let k_c = params.arch.k_c;

    // subtask representation over its channel
    let c_cv = if scheme.condition_enabled() {
        let c_dist = models::conditional_forward(&mut tape, &vars, &[s])?;
        let mut rng = stream::stream(trial_seed, &[2]);
        let c = gaussian::sample(&mut tape, &c_dist, &mut rng);
        ComplexVector::from_interleaved(&mut tape, c).map_err(models::ModelError::from)?
    } else {
        ComplexVector {
            re: tape.constant(vec![1, k_c], vec![0.0; k_c]),
            im: tape.constant(vec![1, k_c], vec![0.0; k_c]),
        }
    };
    let mut sub_rng = stream::stream(trial_seed, &[3]);
    let r_sub = channel::realize(&cfg, &mut sub_rng);
    let (mut c_hat, _) = channel::transmit_rows(&mut tape, &c_cv, &[r_sub], &mut sub_rng)?;
    if equalize {
        c_hat = channel::equalize(&mut tape, &c_hat, &r_sub)?;
    }

    // latent over the task channel
    let xv = tape.constant(vec![1, pix], x);
    let z_dist = models::encoder_forward(&mut tape, &vars, xv, &c_hat)?;
    let mut z_rng = stream::stream(trial_seed, &[4]);
    let z = gaussian::sample(&mut tape, &z_dist, &mut z_rng);
    let z_cv = ComplexVector::from_interleaved(&mut tape, z).map_err(models::ModelError::from)?;
    let mut task_rng = stream::stream(trial_seed, &[5]);
    let r_task = channel::realize(&cfg, &mut task_rng);
    let (mut z_hat, stats) = channel::transmit_rows(&mut tape, &z_cv, &[r_task], &mut task_rng)?;
    if equalize {
        z_hat = channel::equalize(&mut tape, &z_hat, &r_task)?;
    }

    let y = models::decoder_forward(&mut tape, &vars, &z_hat, &c_cv)?;
    let (logits, _) = models::actor_forward(&mut tape, &vars, y, &[s])?;
    Ok(TrialOutcome {
        success: argmax(tape.value(logits)) == a,
        stats,
    })
}

/// Sweep every (snr, scheme) cell with `trials` paired trials per cell.
/// Trials fan out across workers; aggregation is order-independent for the
/// success counts and folded in trial order for the power sums.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    schemes: &[(Scheme, &ModelParams)],
    snrs: &[f64],
    kind: ChannelKind,
    trials: usize,
    world_cfg: &WorldConfig,
    equalize: bool,
    seed: u64,
) -> Result<Vec<SweepRow>, HarnessError> {
    assert!(trials >= 100, "at least 100 trials per sweep point");
    let mut rows = Vec::with_capacity(snrs.len() * schemes.len());
    // the upper bound sees no channel: evaluate it once, replicate per row
    let mut upper_bound_cache: Option<Vec<TrialOutcome>> = None;
    for (snr_idx, &snr_db) in snrs.iter().enumerate() {
        for &(scheme, params) in schemes {
            let fixed_idx = if scheme == Scheme::UpperBound { 0 } else { snr_idx };
            let outcomes: Vec<TrialOutcome> = if scheme == Scheme::UpperBound
                && upper_bound_cache.is_some()
            {
                upper_bound_cache.clone().unwrap()
            } else {
                let o: Vec<TrialOutcome> = (0..trials)
                    .into_par_iter()
                    .map(|trial| {
                        let trial_seed =
                            stream::derive(seed, &[tag::SWEEP, fixed_idx as u64, trial as u64]);
                        run_trial(params, scheme, kind, snr_db, world_cfg, equalize, trial_seed)
                    })
                    .collect::<Result<_, _>>()?;
                if scheme == Scheme::UpperBound {
                    upper_bound_cache = Some(o.clone());
                }
                o
            };
            let successes = outcomes.iter().filter(|o| o.success).count();
            let mut stats = TransmitStats::default();
            for o in &outcomes {
                stats.merge(&o.stats);
            }
            let (p, lo, hi) = wilson_interval(successes, trials);
            rows.push(SweepRow {
                snr_db,
                channel: kind,
                scheme: scheme.label(),
                success_rate: p,
                ci95_lo: lo,
                ci95_hi: hi,
                n_trials: trials,
                measured_snr_db: if scheme == Scheme::UpperBound {
                    f64::NAN
                } else {
                    stats.measured_snr_db()
                },
            });
        }
    }
    Ok(rows)
}

/// CSV with the fixed column order and LF line endings.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    std::fs::write(path, sweep_csv_string(rows))
}

pub fn sweep_csv_string(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("snr_db,channel,scheme,success_rate,ci95_lo,ci95_hi,n_trials,measured_snr_db\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.snr_db,
            r.channel,
            r.scheme,
            r.success_rate,
            r.ci95_lo,
            r.ci95_hi,
            r.n_trials,
            if r.measured_snr_db.is_nan() {
                "NaN".to_string()
            } else {
                format!("{:.3}", r.measured_snr_db)
            }
        ));
    }
    out
}
