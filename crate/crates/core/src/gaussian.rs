//! Diagonal Gaussians on the tape: reparameterized sampling, closed-form KL,
//! and the exponential tilt `p(z)·exp(γ⟨z,u⟩)/Z`.
//!
//! With a similarity that is linear in `z` (inner product against the
//! normalized condition `u = c / max(‖c‖, ε)`), tilting a diagonal Gaussian
//! keeps it Gaussian: only the mean moves, by `γ·variance ⊙ u`, and the
//! log-partition has a closed form. Distributions are batched row-wise:
//! `mean`/`logvar` of shape `[d]` hold one distribution, `[m, d]` hold `m`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Log-variance clamp bounds applied at construction.
pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 6.0;

/// Guard on the condition norm; a zero condition yields no tilt direction.
pub const NORM_GUARD: f64 = 1e-8;

/// Diagonal Gaussian with per-component natural-log variance.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: Var,
    pub logvar: Var,
}

impl DiagGaussian {
    /// Clamps the log-variance into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Self, TensorError> {
        if tape.shape(mean) != tape.shape(logvar) {
            return Err(TensorError::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs: tape.shape(mean).to_vec(),
                rhs: tape.shape(logvar).to_vec(),
            });
        }
        let lo = tape.clamp_min(logvar, LOGVAR_MIN);
        let clamped = tape.clamp_max(lo, LOGVAR_MAX);
        Ok(DiagGaussian {
            mean,
            logvar: clamped,
        })
    }

    /// Constant `N(0, v·I)` with the given shape.
    pub fn isotropic(tape: &mut Tape, shape: Vec<usize>, variance: f64) -> Self {
        let n: usize = shape.iter().product();
        let mean = tape.constant(shape.clone(), vec![0.0; n]);
        let logvar = tape.constant(shape, vec![variance.ln(); n]);
        DiagGaussian { mean, logvar }
    }
}

/// Tilt strength and raw (pre-normalization) condition vector.
#[derive(Debug, Clone, Copy)]
pub struct TiltParams {
    gamma: f64,
    pub condition: Var,
}

impl TiltParams {
    pub fn new(gamma: f64, condition: Var) -> Self {
        assert!(gamma >= 0.0, "tilt scale must be non-negative, got {gamma}");
        TiltParams { gamma, condition }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Reparameterized draw: `mean + exp(logvar/2) ⊙ ε`, one ε per entry.
/// Differentiable w.r.t. mean and logvar; ε comes from the explicit stream.
pub fn sample(tape: &mut Tape, g: &DiagGaussian, rng: &mut impl Rng) -> Var {
    let shape = tape.shape(g.mean).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let eps = tape.constant(shape, eps);
    let half = tape.scale(g.logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eps).expect("equal shapes");
    tape.add(g.mean, scaled).expect("equal shapes")
}

/// Reparameterized draw with caller-supplied standard-normal noise (one ε
/// per entry, same shape as the mean).
pub fn sample_with_eps(tape: &mut Tape, g: &DiagGaussian, eps: Var) -> Var {
    let half = tape.scale(g.logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eps).expect("equal shapes");
    tape.add(g.mean, scaled).expect("equal shapes")
}

/// `n` reparameterized draws from a single `[d]` distribution → `[n, d]`.
pub fn sample_n(tape: &mut Tape, g: &DiagGaussian, n: usize, rng: &mut impl Rng) -> Var {
    let d = tape.value(g.mean).len();
    let eps: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let eps = tape.constant(vec![n, d], eps);
    let half = tape.scale(g.logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul_rows(eps, std).expect("row widths match");
    tape.add_rows(scaled, g.mean).expect("row widths match")
}

/// Closed-form KL divergence per distribution (row):
/// `Σ_i ½[(v_p + (μ_p−μ_q)²)/v_q − 1 + ln(v_q/v_p)]`.
pub fn kl(tape: &mut Tape, p: &DiagGaussian, q: &DiagGaussian) -> Result<Var, TensorError> {
    if tape.shape(p.mean) != tape.shape(q.mean) {
        return Err(TensorError::ShapeMismatch {
            op: "kl",
            lhs: tape.shape(p.mean).to_vec(),
            rhs: tape.shape(q.mean).to_vec(),
        });
    }
    let dm = tape.sub(p.mean, q.mean)?;
    let dm2 = tape.mul(dm, dm)?;
    let vp = tape.exp(p.logvar);
    let num = tape.add(vp, dm2)?;
    let neg_lq = tape.scale(q.logvar, -1.0);
    let inv_vq = tape.exp(neg_lq);
    let ratio = tape.mul(num, inv_vq)?;
    let dlog = tape.sub(q.logvar, p.logvar)?;
    let term = tape.add(ratio, dlog)?;
    let term = tape.add_const(term, -1.0);
    let row = tape.sum_rows(term);
    Ok(tape.scale(row, 0.5))
}

/// Normalized tilt direction `u = c / max(‖c‖, ε)` per row.
pub fn unit_direction(tape: &mut Tape, condition: Var) -> Result<Var, TensorError> {
    let sq = tape.mul(condition, condition)?;
    let ss = tape.sum_rows(sq);
    let norm = tape.sqrt(ss)?;
    let guarded = tape.clamp_min(norm, NORM_GUARD);
    let inv = tape.recip(guarded)?;
    tape.mul_cols(condition, inv)
}

/// Exponential tilt of `base` toward the condition: exact for a similarity
/// linear in `z`. Returns `N(mean + γ·exp(logvar) ⊙ u, logvar)` — the
/// log-variance tensor is shared with the base, so it is preserved exactly.
pub fn tilt(tape: &mut Tape, base: &DiagGaussian, tp: &TiltParams) -> Result<DiagGaussian, TensorError> {
    if tape.shape(base.mean) != tape.shape(tp.condition) {
        return Err(TensorError::ShapeMismatch {
            op: "tilt",
            lhs: tape.shape(base.mean).to_vec(),
            rhs: tape.shape(tp.condition).to_vec(),
        });
    }
    let u = unit_direction(tape, tp.condition)?;
    let v = tape.exp(base.logvar);
    let vu = tape.mul(v, u)?;
    let shift = tape.scale(vu, tp.gamma());
    let mean = tape.add(base.mean, shift)?;
    Ok(DiagGaussian {
        mean,
        logvar: base.logvar,
    })
}

/// Log normalizer of the tilt, per row:
/// `ln Z_γ = γ⟨mean, u⟩ + (γ²/2)·Σ_i exp(logvar_i)·u_i²`.
pub fn log_partition(tape: &mut Tape, base: &DiagGaussian, tp: &TiltParams) -> Result<Var, TensorError> {
    if tape.shape(base.mean) != tape.shape(tp.condition) {
        return Err(TensorError::ShapeMismatch {
            op: "log_partition",
            lhs: tape.shape(base.mean).to_vec(),
            rhs: tape.shape(tp.condition).to_vec(),
        });
    }
    let u = unit_direction(tape, tp.condition)?;
    let mu_u = tape.mul(base.mean, u)?;
    let first = tape.sum_rows(mu_u);
    let first = tape.scale(first, tp.gamma());
    let v = tape.exp(base.logvar);
    let u2 = tape.mul(u, u)?;
    let vu2 = tape.mul(v, u2)?;
    let second = tape.sum_rows(vu2);
    let second = tape.scale(second, tp.gamma() * tp.gamma() * 0.5);
    tape.add(first, second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream;
    use crate::tensor::Tensor;

    fn dg(tape: &mut Tape, mean: Vec<f64>, logvar: Vec<f64>) -> DiagGaussian {
        let d = mean.len();
        let m = tape.constant(vec![d], mean);
        let l = tape.constant(vec![d], logvar);
        DiagGaussian::new(tape, m, l).unwrap()
    }

    // ── Sampling ─────────────────────────────────────────────────────

    #[test]
    fn min_variance_samples_hug_the_mean() {
        // logvar = -12 → σ ≈ 2.5e-3; |z − μ| < 0.01 is a 4σ event
        let mut tape = Tape::new();
        let g = dg(&mut tape, vec![0.3; 256], vec![-12.0; 256]);
        let mut rng = stream(1, &[1]);
        let z = sample(&mut tape, &g, &mut rng);
        let within = tape
            .value(z)
            .iter()
            .filter(|&&v| (v - 0.3).abs() < 0.01)
            .count();
        assert!(
            within as f64 >= 0.99 * 256.0,
            "only {within}/256 components within 0.01 of the mean"
        );
    }

    #[test]
    fn moments_match_monte_carlo() {
        // mean 0, logvar 0: moments over 10^6 draws within ±0.01 / ±0.02
        let d = 2;
        let total = 1_000_000usize;
        let batch = 250_000usize;
        let mut rng = stream(2, &[9]);
        let mut sum = vec![0.0; d];
        let mut sumsq = vec![0.0; d];
        for _ in 0..(total / batch) {
            let mut tape = Tape::new();
            let g = dg(&mut tape, vec![0.0; d], vec![0.0; d]);
            let z = sample_n(&mut tape, &g, batch, &mut rng);
            for row in tape.value(z).chunks_exact(d) {
                for i in 0..d {
                    sum[i] += row[i];
                    sumsq[i] += row[i] * row[i];
                }
            }
        }
        for i in 0..d {
            let mean = sum[i] / total as f64;
            let var = sumsq[i] / total as f64 - mean * mean;
            assert!(mean.abs() < 0.01, "component {i} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "component {i} var {var}");
        }
    }

    #[test]
    fn fixed_seed_identical_sample() {
        let draw = || {
            let mut tape = Tape::new();
            let g = dg(&mut tape, vec![1.0, -2.0], vec![0.5, -1.0]);
            let mut rng = stream(77, &[3]);
            let z = sample(&mut tape, &g, &mut rng);
            tape.value(z).to_vec()
        };
        assert_eq!(draw(), draw());
    }

    // ── KL ───────────────────────────────────────────────────────────

    #[test]
    fn kl_identical_is_zero() {
        let mut tape = Tape::new();
        let p = dg(&mut tape, vec![0.4, -1.2, 3.0], vec![0.1, -2.0, 1.0]);
        let v = kl(&mut tape, &p, &p).unwrap();
        assert!(tape.scalar_value(v).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        // KL(N(1,1) ‖ N(0,1)) = μ²/2 = 0.5
        let mut tape = Tape::new();
        let p = dg(&mut tape, vec![1.0], vec![0.0]);
        let q = dg(&mut tape, vec![0.0], vec![0.0]);
        let v = kl(&mut tape, &p, &q).unwrap();
        assert!((tape.scalar_value(v) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch_rejected() {
        let mut tape = Tape::new();
        let p = dg(&mut tape, vec![0.0; 3], vec![0.0; 3]);
        let q = dg(&mut tape, vec![0.0; 2], vec![0.0; 2]);
        assert!(kl(&mut tape, &p, &q).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_p[log p − log q] over 10^6 samples within 3 standard errors
        let d = 3;
        let (mp, lp) = (vec![0.3, -0.7, 1.1], vec![-0.4, 0.3, -1.0]);
        let (mq, lq) = (vec![-0.2, 0.5, 0.8], vec![0.2, -0.5, 0.4]);
        let mut tape = Tape::new();
        let p = dg(&mut tape, mp.clone(), lp.clone());
        let q = dg(&mut tape, mq.clone(), lq.clone());
        let closed = {
            let v = kl(&mut tape, &p, &q).unwrap();
            tape.scalar_value(v)
        };

        let log_pdf = |z: &[f64], mu: &[f64], lv: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..d {
                let v = lv[i].exp();
                s += -0.5 * ((z[i] - mu[i]).powi(2) / v + lv[i] + (2.0 * std::f64::consts::PI).ln());
            }
            s
        };
        let n = 1_000_000usize;
        let mut rng = stream(5, &[17]);
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut z = vec![0.0; d];
        for _ in 0..n {
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                z[i] = mp[i] + (0.5 * lp[i]).exp() * e;
            }
            let w = log_pdf(&z, &mp, &lp) - log_pdf(&z, &mq, &lq);
            acc += w;
            acc2 += w * w;
        }
        let est = acc / n as f64;
        let se = ((acc2 / n as f64 - est * est) / n as f64).sqrt();
        assert!(
            (est - closed).abs() < 3.0 * se,
            "closed {closed} vs MC {est} ± {se}"
        );
    }

    #[test]
    fn kl_non_negative_randomized() {
        use rand::Rng as _;
        let mut rng = stream(6, &[2]);
        for _ in 0..200 {
            let d = rng.gen_range(1..6);
            let randvec = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
                (0..d).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>()
            };
            let mp = randvec(&mut rng, -3.0, 3.0);
            let mq = randvec(&mut rng, -3.0, 3.0);
            let lp = randvec(&mut rng, -4.0, 3.0);
            let lq = randvec(&mut rng, -4.0, 3.0);
            let mut tape = Tape::new();
            let p = dg(&mut tape, mp, lp);
            let q = dg(&mut tape, mq, lq);
            let v = kl(&mut tape, &p, &q).unwrap();
            assert!(tape.scalar_value(v) >= -1e-10);
        }
    }

    // ── Tilt: quadrature oracle ──────────────────────────────────────

    /// Simpson integration of f over [lo, hi] with n panels (n even).
    fn simpson(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    fn normal_pdf(z: f64, mu: f64, v: f64) -> f64 {
        (-0.5 * (z - mu).powi(2) / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn tilt_gamma_zero_is_identity() {
        let mut tape = Tape::new();
        let base = dg(&mut tape, vec![0.7, -1.3], vec![0.2, -0.8]);
        let c = tape.constant(vec![2], vec![2.0, -1.0]);
        let tilted = tilt(&mut tape, &base, &TiltParams::new(0.0, c)).unwrap();
        assert_eq!(tape.value(tilted.mean), tape.value(base.mean));
        assert_eq!(tape.value(tilted.logvar), tape.value(base.logvar));
    }

    #[test]
    fn tilt_matches_quadrature_1d() {
        // base N(0,1), u = [1], γ = 2 → tilted mean 2 within 1e-6 by quadrature
        let (gamma, mu, v) = (2.0, 0.0, 1.0);
        let z_num = simpson(-10.0, 14.0, 40_000, |z| normal_pdf(z, mu, v) * (gamma * z).exp());
        let tilted_mean = simpson(-10.0, 14.0, 40_000, |z| {
            z * normal_pdf(z, mu, v) * (gamma * z).exp()
        }) / z_num;

        let mut tape = Tape::new();
        let base = dg(&mut tape, vec![mu], vec![v.ln()]);
        let c = tape.constant(vec![1], vec![3.0]); // normalizes to u = [1]
        let tilted = tilt(&mut tape, &base, &TiltParams::new(gamma, c)).unwrap();
        let closed = tape.value(tilted.mean)[0];
        assert!(
            (closed - tilted_mean).abs() < 1e-6,
            "closed {closed} vs quadrature {tilted_mean}"
        );
        assert!((closed - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tilt_leaves_orthogonal_components() {
        let mut tape = Tape::new();
        let base = dg(&mut tape, vec![0.5, -0.4, 1.2], vec![0.3, -0.2, 0.9]);
        let c = tape.constant(vec![3], vec![1.5, 0.0, -2.0]); // zero component 1
        let tilted = tilt(&mut tape, &base, &TiltParams::new(1.1, c)).unwrap();
        assert_eq!(tape.value(tilted.mean)[1], tape.value(base.mean)[1]);
    }

    #[test]
    fn tilt_preserves_logvar_exactly() {
        let mut tape = Tape::new();
        let base = dg(&mut tape, vec![0.0; 4], vec![-1.0, 0.0, 1.0, 2.0]);
        let c = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let tilted = tilt(&mut tape, &base, &TiltParams::new(1.1, c)).unwrap();
        assert_eq!(tilted.logvar, base.logvar); // same tape node
    }

    #[test]
    fn log_partition_cases() {
        let mut tape = Tape::new();
        let base = dg(&mut tape, vec![0.0], vec![0.0]);
        let c = tape.constant(vec![1], vec![1.0]);
        // γ = 0 → 0
        let z0 = log_partition(&mut tape, &base, &TiltParams::new(0.0, c)).unwrap();
        assert_eq!(tape.scalar_value(z0), 0.0);
        // N(0,1), u = [1], γ = 2 → ln Z = 2, matches quadrature of ∫N(z;0,1)e^{2z}dz = e²
        let z2 = log_partition(&mut tape, &base, &TiltParams::new(2.0, c)).unwrap();
        let quad = simpson(-10.0, 14.0, 40_000, |z| normal_pdf(z, 0.0, 1.0) * (2.0 * z).exp());
        assert!((tape.scalar_value(z2) - quad.ln()).abs() < 1e-6);
        assert!((tape.scalar_value(z2) - 2.0).abs() < 1e-12);
        // doubling γ at zero mean quadruples ln Z
        let z4 = log_partition(&mut tape, &base, &TiltParams::new(4.0, c)).unwrap();
        assert!((tape.scalar_value(z4) - 4.0 * tape.scalar_value(z2)).abs() < 1e-12);
    }

    #[test]
    fn tilted_density_matches_ratio_pointwise_2d() {
        // N(mean + γv⊙u, v) == base(z)·exp(γ⟨z,u⟩)/Z on a ±6σ grid, within 1e-8
        let (mu, lv) = (vec![0.4, -0.6], vec![-0.3f64, 0.5f64]);
        let cond = vec![1.0, 2.0];
        let gamma = 1.1;

        let mut tape = Tape::new();
        let base = dg(&mut tape, mu.clone(), lv.clone());
        let c = tape.constant(vec![2], cond.clone());
        let tp = TiltParams::new(gamma, c);
        let tilted = tilt(&mut tape, &base, &tp).unwrap();
        let tmean = tape.value(tilted.mean).to_vec();
        let tvar: Vec<f64> = tape.value(tilted.logvar).iter().map(|l| l.exp()).collect();

        let norm = (cond[0] * cond[0] + cond[1] * cond[1]).sqrt();
        let u = [cond[0] / norm, cond[1] / norm];
        // Z factorizes across dims for a linear similarity
        let z_quad: f64 = (0..2)
            .map(|i| {
                let v = lv[i].exp();
                let lo = mu[i] - 12.0 * v.sqrt();
                let hi = mu[i] + 12.0 * v.sqrt() + 12.0 * gamma * v;
                simpson(lo, hi, 80_000, |z| normal_pdf(z, mu[i], v) * (gamma * u[i] * z).exp())
            })
            .product();

        let steps = 25;
        for a in 0..=steps {
            for b in 0..=steps {
                let z = [
                    tmean[0] + (a as f64 / steps as f64 * 12.0 - 6.0) * tvar[0].sqrt(),
                    tmean[1] + (b as f64 / steps as f64 * 12.0 - 6.0) * tvar[1].sqrt(),
                ];
                let closed = normal_pdf(z[0], tmean[0], tvar[0]) * normal_pdf(z[1], tmean[1], tvar[1]);
                let base_pdf = normal_pdf(z[0], mu[0], lv[0].exp()) * normal_pdf(z[1], mu[1], lv[1].exp());
                let ratio = base_pdf * (gamma * (u[0] * z[0] + u[1] * z[1])).exp() / z_quad;
                assert!(
                    (closed - ratio).abs() < 1e-8,
                    "density mismatch at {z:?}: {closed} vs {ratio}"
                );
            }
        }
    }

    // ── Reparameterization gradients ─────────────────────────────────

    #[test]
    fn reparam_gradients_match_fd_of_expectation() {
        // d/dθ E[f(z)] via common random numbers, f a fixed quadratic
        let d = 3;
        let n = 100_000usize;
        let mu = vec![0.3, -0.5, 0.9];
        let lv = vec![-0.2, 0.4, -1.0];
        let alpha = vec![0.7, -0.3, 0.5];
        let beta = vec![1.1, 0.2, -0.8];
        let mut rng = stream(8, &[4]);
        let eps: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let eval = |mu: &[f64], lv: &[f64], want_grads: bool| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let mt = Tensor::new(vec![d], mu.to_vec()).unwrap().with_grad();
            let lt = Tensor::new(vec![d], lv.to_vec()).unwrap().with_grad();
            let mv = tape.leaf(&mt);
            let lvv = tape.leaf(&lt);
            let e = tape.constant(vec![n, d], eps.clone());
            let half = tape.scale(lvv, 0.5);
            let std = tape.exp(half);
            let se = tape.mul_rows(e, std).unwrap();
            let z = tape.add_rows(se, mv).unwrap();
            let z2 = tape.mul(z, z).unwrap();
            let av = tape.constant(vec![d], alpha.clone());
            let bv = tape.constant(vec![d], beta.clone());
            let qa = tape.mul_rows(z2, av).unwrap();
            let qb = tape.mul_rows(z, bv).unwrap();
            let q = tape.add(qa, qb).unwrap();
            let s = tape.sum_all(q);
            let loss = tape.scale(s, 1.0 / n as f64);
            if want_grads {
                tape.backward(loss).unwrap();
                (
                    tape.scalar_value(loss),
                    tape.grad_or_zeros(mv),
                    tape.grad_or_zeros(lvv),
                )
            } else {
                (tape.scalar_value(loss), vec![], vec![])
            }
        };

        let (_, gmu, glv) = eval(&mu, &lv, true);
        let h = 1e-4;
        for i in 0..d {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&p, &lv, false).0 - eval(&m, &lv, false).0) / (2.0 * h);
            let rel = (fd - gmu[i]).abs() / gmu[i].abs().max(1e-6);
            assert!(rel < 1e-3, "mean[{i}]: fd {fd} vs {g} rel {rel}", g = gmu[i]);

            let mut pl = lv.clone();
            let mut ml = lv.clone();
            pl[i] += h;
            ml[i] -= h;
            let fd = (eval(&mu, &pl, false).0 - eval(&mu, &ml, false).0) / (2.0 * h);
            let rel = (fd - glv[i]).abs() / glv[i].abs().max(1e-6);
            assert!(rel < 1e-3, "logvar[{i}]: fd {fd} vs {g} rel {rel}", g = glv[i]);
        }
    }

    #[test]
    fn logvar_clamped_at_construction() {
        let mut tape = Tape::new();
        let m = tape.constant(vec![2], vec![0.0, 0.0]);
        let l = tape.constant(vec![2], vec![-30.0, 9.0]);
        let g = DiagGaussian::new(&mut tape, m, l).unwrap();
        assert_eq!(tape.value(g.logvar), &[LOGVAR_MIN, LOGVAR_MAX]);
    }
}
