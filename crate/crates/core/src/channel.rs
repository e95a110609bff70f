//! Complex AWGN and Rayleigh block-fading channels, SNR calibration, and the
//! Gaussian posterior of a received latent.
//!
//! One complex gain `h` per transmitted vector (block fading), fresh per
//! realization; noise is circularly symmetric with per-real-part variance
//! `sigma2 / 2`, where `sigma2 = 10^(−snr_db/10)` under the unit-signal-power
//! convention. Channel draws are constants of a realization: transmission is
//! differentiable in the input only.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::DiagGaussian;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("deep fade: |h| = {h_abs:.3e} below the equalizer guard")]
    DeepFade { h_abs: f64 },
    #[error("pair {pair}: untied variances (re {re_var}, im {im_var})")]
    UntiedVariance { pair: usize, re_var: f64, im_var: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::Rayleigh => write!(f, "rayleigh"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Perfect-CSI equalization ablation; off by default.
    pub equalize: bool,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64) -> Self {
        assert!(snr_db.is_finite(), "snr_db must be finite, got {snr_db}");
        ChannelConfig {
            kind,
            snr_db,
            equalize: false,
        }
    }
}

/// One block-fading draw: complex gain and complex noise variance.
#[derive(Debug, Clone, Copy)]
pub struct ChannelRealization {
    pub h: (f64, f64),
    pub sigma2: f64,
}

impl ChannelRealization {
    /// Identity channel with zero noise (the snr → ∞ sentinel).
    pub fn noiseless() -> Self {
        ChannelRealization {
            h: (1.0, 0.0),
            sigma2: 0.0,
        }
    }

    pub fn h_abs2(&self) -> f64 {
        self.h.0 * self.h.0 + self.h.1 * self.h.1
    }
}

/// Draw a channel realization: Rayleigh `h = (a+bi)/√2` with unit average
/// gain, AWGN `h = 1`; `sigma2 = 10^(−snr_db/10)`.
pub fn realize(cfg: &ChannelConfig, rng: &mut impl Rng) -> ChannelRealization {
    let h = match cfg.kind {
        ChannelKind::Awgn => (1.0, 0.0),
        ChannelKind::Rayleigh => {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (a / std::f64::consts::SQRT_2, b / std::f64::consts::SQRT_2)
        }
    };
    ChannelRealization {
        h,
        sigma2: 10f64.powf(-cfg.snr_db / 10.0),
    }
}

/// Complex signal as paired real tensors; rows are independent vectors.
#[derive(Debug, Clone, Copy)]
pub struct ComplexVector {
    pub re: Var,
    pub im: Var,
}

impl ComplexVector {
    /// Split `[.., 2K]` pair-interleaved (`re0, im0, re1, im1, …`) reals.
    pub fn from_interleaved(tape: &mut Tape, v: Var) -> Result<Self, TensorError> {
        let cols = *tape.shape(v).last().expect("non-empty shape");
        assert!(cols % 2 == 0, "interleaved vector needs an even width");
        let k = cols / 2;
        let rows = tape.value(v).len() / cols;
        let re_idx: Vec<usize> = (0..k).map(|i| 2 * i).collect();
        let im_idx: Vec<usize> = (0..k).map(|i| 2 * i + 1).collect();
        let shape = if tape.shape(v).len() == 1 {
            vec![k]
        } else {
            vec![rows, k]
        };
        let re = tape.gather_groups(v, re_idx, cols, shape.clone())?;
        let im = tape.gather_groups(v, im_idx, cols, shape)?;
        Ok(ComplexVector { re, im })
    }

    /// Inverse of `from_interleaved`.
    pub fn to_interleaved(&self, tape: &mut Tape) -> Result<Var, TensorError> {
        let k = *tape.shape(self.re).last().expect("non-empty shape");
        let rows = tape.value(self.re).len() / k;
        let cat = tape.concat_cols(&[self.re, self.im])?;
        // [re.. im..] → [re0, im0, re1, im1, …]
        let mut idx = Vec::with_capacity(2 * k);
        for i in 0..k {
            idx.push(i);
            idx.push(k + i);
        }
        let shape = if tape.shape(self.re).len() == 1 {
            vec![2 * k]
        } else {
            vec![rows, 2 * k]
        };
        tape.gather_groups(cat, idx, 2 * k, shape)
    }

    /// Complex symbols per row.
    pub fn symbols(&self, tape: &Tape) -> usize {
        *tape.shape(self.re).last().expect("non-empty shape")
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        let k = self.symbols(tape);
        tape.value(self.re).len() / k
    }
}

/// Signal/noise power sums accumulated by a transmission, for measured-SNR
/// reporting.
#[derive(Debug, Clone, Copy, Default)]
pub struct TransmitStats {
    /// Σ |h·x_k|² over all symbols.
    pub signal_sq: f64,
    /// Σ |n_k|² over all symbols.
    pub noise_sq: f64,
    pub symbols: usize,
}

impl TransmitStats {
    pub fn merge(&mut self, other: &TransmitStats) {
        self.signal_sq += other.signal_sq;
        self.noise_sq += other.noise_sq;
        self.symbols += other.symbols;
    }

    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (self.signal_sq / self.noise_sq).log10()
    }
}

/// `y = h·x + n` with one realization per row and caller-supplied noise
/// (pre-scaled, row-major `rows × k` per part). Differentiable w.r.t. `x`;
/// `h` and `n` are constants of the realization.
pub fn transmit_rows_with_noise(
    tape: &mut Tape,
    x: &ComplexVector,
    realizations: &[ChannelRealization],
    n_re: Vec<f64>,
    n_im: Vec<f64>,
) -> Result<(ComplexVector, TransmitStats), ChannelError> {
    let rows = x.rows(tape);
    let k = x.symbols(tape);
    assert_eq!(rows, realizations.len(), "one realization per row");
    assert_eq!(n_re.len(), rows * k);
    assert_eq!(n_im.len(), rows * k);

    let hr: Vec<f64> = realizations.iter().map(|r| r.h.0).collect();
    let hi: Vec<f64> = realizations.iter().map(|r| r.h.1).collect();
    let mut stats = TransmitStats::default();
    for (&a, &b) in n_re.iter().zip(&n_im) {
        stats.noise_sq += a * a + b * b;
    }
    stats.symbols = rows * k;

    let hr_col = tape.constant(vec![rows], hr);
    let hi_col = tape.constant(vec![rows], hi);
    let nre = tape.constant(tape.shape(x.re).to_vec(), n_re);
    let nim = tape.constant(tape.shape(x.im).to_vec(), n_im);

    // (hr + i·hi)(re + i·im) = (hr·re − hi·im) + i(hr·im + hi·re)
    let hr_re = tape.mul_cols(x.re, hr_col)?;
    let hi_im = tape.mul_cols(x.im, hi_col)?;
    let hr_im = tape.mul_cols(x.im, hr_col)?;
    let hi_re = tape.mul_cols(x.re, hi_col)?;
    let sig_re = tape.sub(hr_re, hi_im)?;
    let sig_im = tape.add(hr_im, hi_re)?;
    for (&a, &b) in tape.value(sig_re).iter().zip(tape.value(sig_im)) {
        stats.signal_sq += a * a + b * b;
    }
    let y_re = tape.add(sig_re, nre)?;
    let y_im = tape.add(sig_im, nim)?;
    Ok((
        ComplexVector { re: y_re, im: y_im },
        stats,
    ))
}

/// Draw pre-scaled noise for `rows × k` symbols from one stream.
pub fn draw_noise(
    realizations: &[ChannelRealization],
    k: usize,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let rows = realizations.len();
    let mut n_re = vec![0.0; rows * k];
    let mut n_im = vec![0.0; rows * k];
    for (row, r) in realizations.iter().enumerate() {
        let std = (r.sigma2 / 2.0).sqrt();
        for i in 0..k {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            n_re[row * k + i] = a * std;
            n_im[row * k + i] = b * std;
        }
    }
    (n_re, n_im)
}

/// `y = h·x + n`, one realization per row, noise drawn from `rng`.
pub fn transmit_rows(
    tape: &mut Tape,
    x: &ComplexVector,
    realizations: &[ChannelRealization],
    rng: &mut impl Rng,
) -> Result<(ComplexVector, TransmitStats), ChannelError> {
    let k = x.symbols(tape);
    let (n_re, n_im) = draw_noise(realizations, k, rng);
    transmit_rows_with_noise(tape, x, realizations, n_re, n_im)
}

/// Single-realization transmission (all rows share the draw).
pub fn transmit(
    tape: &mut Tape,
    x: &ComplexVector,
    r: &ChannelRealization,
    rng: &mut impl Rng,
) -> Result<ComplexVector, ChannelError> {
    let rows = x.rows(tape);
    let (y, _) = transmit_rows(tape, x, &vec![*r; rows], rng)?;
    Ok(y)
}

/// Perfect-CSI equalization `y / h`; rejects deep fades.
pub fn equalize(
    tape: &mut Tape,
    y: &ComplexVector,
    r: &ChannelRealization,
) -> Result<ComplexVector, ChannelError> {
    let h2 = r.h_abs2();
    if h2.sqrt() <= 1e-6 {
        return Err(ChannelError::DeepFade { h_abs: h2.sqrt() });
    }
    // y/h = y·conj(h)/|h|²
    let (cr, ci) = (r.h.0 / h2, -r.h.1 / h2);
    let a = tape.scale(y.re, cr);
    let b = tape.scale(y.im, ci);
    let c = tape.scale(y.im, cr);
    let d = tape.scale(y.re, ci);
    let re = tape.sub(a, b)?;
    let im = tape.add(c, d)?;
    Ok(ComplexVector { re, im })
}

/// Gaussian posterior of the received latent for pair-tied inputs, one
/// realization per row. Per real component of pair `k`: the mean is the
/// complex-rotated mean `h·μ_k`, the variance `|h|²·v_k + sigma2/2`.
/// Diagonality is exact because pair-isotropic Gaussians are rotation
/// invariant within each pair.
pub fn received_posterior_rows(
    tape: &mut Tape,
    z_dist: &DiagGaussian,
    realizations: &[ChannelRealization],
) -> Result<DiagGaussian, ChannelError> {
    let cols = *tape.shape(z_dist.mean).last().expect("non-empty");
    assert!(cols % 2 == 0, "interleaved distribution needs even width");
    let rows = tape.value(z_dist.mean).len() / cols;
    assert_eq!(rows, realizations.len(), "one realization per row");

    // pair-tied precondition
    let lv = tape.value(z_dist.logvar);
    for row in 0..rows {
        for p in 0..cols / 2 {
            let re_lv = lv[row * cols + 2 * p];
            let im_lv = lv[row * cols + 2 * p + 1];
            if (re_lv - im_lv).abs() > 1e-12 {
                return Err(ChannelError::UntiedVariance {
                    pair: p,
                    re_var: re_lv.exp(),
                    im_var: im_lv.exp(),
                });
            }
        }
    }

    let mean_c = ComplexVector::from_interleaved(tape, z_dist.mean)?;
    let hr_col = tape.constant(vec![rows], realizations.iter().map(|r| r.h.0).collect());
    let hi_col = tape.constant(vec![rows], realizations.iter().map(|r| r.h.1).collect());
    let hr_re = tape.mul_cols(mean_c.re, hr_col)?;
    let hi_im = tape.mul_cols(mean_c.im, hi_col)?;
    let hr_im = tape.mul_cols(mean_c.im, hr_col)?;
    let hi_re = tape.mul_cols(mean_c.re, hi_col)?;
    let rot_re = tape.sub(hr_re, hi_im)?;
    let rot_im = tape.add(hr_im, hi_re)?;
    let mean = ComplexVector {
        re: rot_re,
        im: rot_im,
    }
    .to_interleaved(tape)?;

    let v = tape.exp(z_dist.logvar);
    let h2_col = tape.constant(vec![rows], realizations.iter().map(|r| r.h_abs2()).collect());
    let scaled = tape.mul_cols(v, h2_col)?;
    let mut noise = vec![0.0; rows * cols];
    for (row, r) in realizations.iter().enumerate() {
        noise[row * cols..(row + 1) * cols].fill(r.sigma2 / 2.0);
    }
    let shape = tape.shape(z_dist.mean).to_vec();
    let nvar = tape.constant(shape, noise);
    let vsum = tape.add(scaled, nvar)?;
    let logvar = tape.log(vsum)?;
    Ok(DiagGaussian::new(tape, mean, logvar)?)
}

/// Single-realization posterior.
pub fn received_posterior(
    tape: &mut Tape,
    z_dist: &DiagGaussian,
    r: &ChannelRealization,
) -> Result<DiagGaussian, ChannelError> {
    let cols = *tape.shape(z_dist.mean).last().expect("non-empty");
    let rows = tape.value(z_dist.mean).len() / cols;
    received_posterior_rows(tape, z_dist, &vec![*r; rows])
}
