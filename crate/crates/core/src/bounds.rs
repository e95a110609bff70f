//! Brute-force verification of the variational upper bounds on fully
//! enumerable discrete systems.
//!
//! A `DiscreteSystem` carries explicit conditional probability tables wired
//! as `S→C→Ĉ` and `X→Z→Ẑ→Y→A` (the encoder conditioned on `Ĉ`, decoder and
//! action on `C`), plus candidate variational tables. Every mutual
//! information and every bound expression is evaluated by exhaustive
//! summation, so a negative gap beyond rounding is a theorem violation, not
//! an estimation artifact.

use rand::Rng;
use thiserror::Error;

use crate::cvib::LossWeights;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("table {name} row {row} sums to {sum}, expected 1")]
    BadRow { name: &'static str, row: usize, sum: f64 },
    #[error("table {name} has a negative entry")]
    Negative { name: &'static str },
    #[error("alphabet {name} has size {size}, must be in 1..=8")]
    AlphabetSize { name: &'static str, size: usize },
    #[error("bound {0:?} needs a variational table that is not present")]
    MissingTable(BoundId),
    #[error("assembled bound needs strictly positive weights (0 < β₂ < 1 pre-rescaling)")]
    WeightDomain,
}

/// Random variables of the graphical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    S,
    C,
    Chat,
    X,
    Z,
    Zhat,
    Y,
    A,
}

/// Mutual information query: a pair or a conditional triple.
#[derive(Debug, Clone, Copy)]
pub enum MiQuery {
    Pair(Variable, Variable),
    Conditional(Variable, Variable, Variable),
}

/// The five verified bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundId {
    /// Rate: `I(X;Ẑ|Ĉ) ≤ E KL(p(ẑ|x,ĉ) ‖ q(ẑ|ĉ))`.
    B11,
    /// Task distortion: `−I(A;Y|C) ≤ E[−log q(a|y,c)]`.
    B15,
    /// Subtask rate: `I(S;C) ≤ E_s KL(p(c|s) ‖ q(c))`.
    B17,
    /// Alignment: `−I(A;Ẑ|C) ≤ E[−log q(a|ẑ,c)]`.
    B20,
    /// Subtask distortion: `−I(A;C|Y) ≤ E[−log q(a|y,c)]`.
    BIACY,
}

impl BoundId {
    pub const ALL: [BoundId; 5] = [BoundId::B11, BoundId::B15, BoundId::B17, BoundId::B20, BoundId::BIACY];

    pub fn label(&self) -> &'static str {
        match self {
            BoundId::B11 => "rate",
            BoundId::B15 => "task_distortion",
            BoundId::B17 => "subtask_rate",
            BoundId::B20 => "alignment",
            BoundId::BIACY => "subtask_distortion",
        }
    }
}

/// Finite alphabets, factorized kernels, and candidate variational tables.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub ns: usize,
    pub nc: usize,
    pub nch: usize,
    pub nx: usize,
    pub nz: usize,
    pub nzh: usize,
    pub ny: usize,
    pub na: usize,
    pub p_s: Vec<f64>,
    /// `[s][c]`
    pub p_c_given_s: Vec<f64>,
    /// `[c][ĉ]`
    pub p_chat_given_c: Vec<f64>,
    pub p_x: Vec<f64>,
    /// `[x][ĉ][z]`
    pub p_z_given_x_chat: Vec<f64>,
    /// `[z][ẑ]`
    pub p_zhat_given_z: Vec<f64>,
    /// `[ẑ][c][y]`
    pub p_y_given_zhat_c: Vec<f64>,
    /// `[y][c][a]`
    pub p_a_given_y_c: Vec<f64>,
    /// candidate priors/posteriors for the bounds
    pub q_c: Option<Vec<f64>>,
    /// `[ĉ][ẑ]`
    pub q_zhat_given_chat: Option<Vec<f64>>,
    /// `[y][c][a]`
    pub q_a_given_y_c: Option<Vec<f64>>,
    /// `[ẑ][c][a]`
    pub q_a_given_zhat_c: Option<Vec<f64>>,
}

const ROW_TOL: f64 = 1e-12;
/// Gap certification slack.
pub const GAP_TOL: f64 = 1e-10;

fn check_rows(name: &'static str, table: &[f64], width: usize) -> Result<(), BoundsError> {
    if table.iter().any(|&v| v < 0.0) {
        return Err(BoundsError::Negative { name });
    }
    for (row, chunk) in table.chunks_exact(width).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(BoundsError::BadRow { name, row, sum });
        }
    }
    Ok(())
}

impl DiscreteSystem {
    pub fn validate(&self) -> Result<(), BoundsError> {
        for (name, size) in [
            ("S", self.ns),
            ("C", self.nc),
            ("Chat", self.nch),
            ("X", self.nx),
            ("Z", self.nz),
            ("Zhat", self.nzh),
            ("Y", self.ny),
            ("A", self.na),
        ] {
            if size == 0 || size > 8 {
                return Err(BoundsError::AlphabetSize { name, size });
            }
        }
        check_rows("p_s", &self.p_s, self.ns)?;
        check_rows("p_c_given_s", &self.p_c_given_s, self.nc)?;
        check_rows("p_chat_given_c", &self.p_chat_given_c, self.nch)?;
        check_rows("p_x", &self.p_x, self.nx)?;
        check_rows("p_z_given_x_chat", &self.p_z_given_x_chat, self.nz)?;
        check_rows("p_zhat_given_z", &self.p_zhat_given_z, self.nzh)?;
        check_rows("p_y_given_zhat_c", &self.p_y_given_zhat_c, self.ny)?;
        check_rows("p_a_given_y_c", &self.p_a_given_y_c, self.na)?;
        if let Some(q) = &self.q_c {
            check_rows("q_c", q, self.nc)?;
        }
        if let Some(q) = &self.q_zhat_given_chat {
            check_rows("q_zhat_given_chat", q, self.nzh)?;
        }
        if let Some(q) = &self.q_a_given_y_c {
            check_rows("q_a_given_y_c", q, self.na)?;
        }
        if let Some(q) = &self.q_a_given_zhat_c {
            check_rows("q_a_given_zhat_c", q, self.na)?;
        }
        Ok(())
    }

    fn size_of(&self, v: Variable) -> usize {
        match v {
            Variable::S => self.ns,
            Variable::C => self.nc,
            Variable::Chat => self.nch,
            Variable::X => self.nx,
            Variable::Z => self.nz,
            Variable::Zhat => self.nzh,
            Variable::Y => self.ny,
            Variable::A => self.na,
        }
    }

    /// Visit every configuration of `(s, c, ĉ, x, z, ẑ, y, a)` with its
    /// joint probability, skipping zero-probability branches.
    fn for_each_joint(&self, mut f: impl FnMut([usize; 8], f64)) {
        for s in 0..self.ns {
            let ps = self.p_s[s];
            if ps == 0.0 {
                continue;
            }
            for c in 0..self.nc {
                let pc = ps * self.p_c_given_s[s * self.nc + c];
                if pc == 0.0 {
                    continue;
                }
                for ch in 0..self.nch {
                    let pch = pc * self.p_chat_given_c[c * self.nch + ch];
                    if pch == 0.0 {
                        continue;
                    }
                    for x in 0..self.nx {
                        let px = pch * self.p_x[x];
                        if px == 0.0 {
                            continue;
                        }
                        for z in 0..self.nz {
                            let pz = px * self.p_z_given_x_chat[(x * self.nch + ch) * self.nz + z];
                            if pz == 0.0 {
                                continue;
                            }
                            for zh in 0..self.nzh {
                                let pzh = pz * self.p_zhat_given_z[z * self.nzh + zh];
                                if pzh == 0.0 {
                                    continue;
                                }
                                for y in 0..self.ny {
                                    let py = pzh * self.p_y_given_zhat_c[(zh * self.nc + c) * self.ny + y];
                                    if py == 0.0 {
                                        continue;
                                    }
                                    for a in 0..self.na {
                                        let pa = py * self.p_a_given_y_c[(y * self.nc + c) * self.na + a];
                                        if pa > 0.0 {
                                            f([s, c, ch, x, z, zh, y, a], pa);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn index_of(v: Variable) -> usize {
        match v {
            Variable::S => 0,
            Variable::C => 1,
            Variable::Chat => 2,
            Variable::X => 3,
            Variable::Z => 4,
            Variable::Zhat => 5,
            Variable::Y => 6,
            Variable::A => 7,
        }
    }

    /// Joint marginal over an ordered variable list.
    fn marginal(&self, vars: &[Variable]) -> Vec<f64> {
        let sizes: Vec<usize> = vars.iter().map(|&v| self.size_of(v)).collect();
        let total: usize = sizes.iter().product();
        let mut table = vec![0.0; total];
        let idxs: Vec<usize> = vars.iter().map(|&v| Self::index_of(v)).collect();
        self.for_each_joint(|cfg, p| {
            let mut flat = 0usize;
            for (pos, &vi) in idxs.iter().enumerate() {
                flat = flat * sizes[pos] + cfg[vi];
            }
            table[flat] += p;
        });
        table
    }
}

fn xlogx_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Exact mutual information (nats) by exhaustive summation.
pub fn exact_mutual_information(sys: &DiscreteSystem, query: MiQuery) -> Result<f64, BoundsError> {
    sys.validate()?;
    Ok(match query {
        MiQuery::Pair(a, b) => {
            let (na, nb) = (sys.size_of(a), sys.size_of(b));
            let joint = sys.marginal(&[a, b]);
            let mut pa = vec![0.0; na];
            let mut pb = vec![0.0; nb];
            for i in 0..na {
                for j in 0..nb {
                    pa[i] += joint[i * nb + j];
                    pb[j] += joint[i * nb + j];
                }
            }
            let mut mi = 0.0;
            for i in 0..na {
                for j in 0..nb {
                    mi += xlogx_ratio(joint[i * nb + j], pa[i] * pb[j]);
                }
            }
            mi
        }
        MiQuery::Conditional(a, b, cond) => {
            let (na, nb, ncond) = (sys.size_of(a), sys.size_of(b), sys.size_of(cond));
            let joint = sys.marginal(&[a, b, cond]);
            let mut pac = vec![0.0; na * ncond];
            let mut pbc = vec![0.0; nb * ncond];
            let mut pc = vec![0.0; ncond];
            for i in 0..na {
                for j in 0..nb {
                    for k in 0..ncond {
                        let p = joint[(i * nb + j) * ncond + k];
                        pac[i * ncond + k] += p;
                        pbc[j * ncond + k] += p;
                        pc[k] += p;
                    }
                }
            }
            let mut mi = 0.0;
            for i in 0..na {
                for j in 0..nb {
                    for k in 0..ncond {
                        let p = joint[(i * nb + j) * ncond + k];
                        if p > 0.0 {
                            mi += p * (pc[k] * p / (pac[i * ncond + k] * pbc[j * ncond + k])).ln();
                        }
                    }
                }
            }
            mi
        }
    })
}

/// Evaluate one bound: the exact signed objective term, the variational
/// expression, and `gap = bound − exact` (certified `≥ −GAP_TOL` by the
/// caller's assertions).
pub fn bound_gap(sys: &DiscreteSystem, id: BoundId) -> Result<(f64, f64, f64), BoundsError> {
    sys.validate()?;
    let (exact, bound) = match id {
        BoundId::B11 => {
            let q = sys
                .q_zhat_given_chat
                .as_ref()
                .ok_or(BoundsError::MissingTable(id))?;
            let exact = exact_mutual_information(
                sys,
                MiQuery::Conditional(Variable::X, Variable::Zhat, Variable::Chat),
            )?;
            // p(ĉ), then E_{x,ĉ} KL(p(ẑ|x,ĉ) ‖ q(ẑ|ĉ)); x ⊥ ĉ by the graph
            let mut p_chat = vec![0.0; sys.nch];
            for s in 0..sys.ns {
                for c in 0..sys.nc {
                    for ch in 0..sys.nch {
                        p_chat[ch] += sys.p_s[s]
                            * sys.p_c_given_s[s * sys.nc + c]
                            * sys.p_chat_given_c[c * sys.nch + ch];
                    }
                }
            }
            let mut bound = 0.0;
            for ch in 0..sys.nch {
                for x in 0..sys.nx {
                    let w = p_chat[ch] * sys.p_x[x];
                    if w == 0.0 {
                        continue;
                    }
                    for zh in 0..sys.nzh {
                        let mut p_zh = 0.0;
                        for z in 0..sys.nz {
                            p_zh += sys.p_z_given_x_chat[(x * sys.nch + ch) * sys.nz + z]
                                * sys.p_zhat_given_z[z * sys.nzh + zh];
                        }
                        bound += w * xlogx_ratio(p_zh, q[ch * sys.nzh + zh]);
                    }
                }
            }
            (exact, bound)
        }
        BoundId::B15 | BoundId::BIACY => {
            let q = sys.q_a_given_y_c.as_ref().ok_or(BoundsError::MissingTable(id))?;
            let query = if id == BoundId::B15 {
                MiQuery::Conditional(Variable::A, Variable::Y, Variable::C)
            } else {
                MiQuery::Conditional(Variable::A, Variable::C, Variable::Y)
            };
            let exact = -exact_mutual_information(sys, query)?;
            let joint = sys.marginal(&[Variable::A, Variable::Y, Variable::C]);
            let mut bound = 0.0;
            for a in 0..sys.na {
                for y in 0..sys.ny {
                    for c in 0..sys.nc {
                        let p = joint[(a * sys.ny + y) * sys.nc + c];
                        if p > 0.0 {
                            bound -= p * q[(y * sys.nc + c) * sys.na + a].ln();
                        }
                    }
                }
            }
            (exact, bound)
        }
        BoundId::B17 => {
            let q = sys.q_c.as_ref().ok_or(BoundsError::MissingTable(id))?;
            let exact = exact_mutual_information(sys, MiQuery::Pair(Variable::S, Variable::C))?;
            let mut bound = 0.0;
            for s in 0..sys.ns {
                for c in 0..sys.nc {
                    bound += sys.p_s[s] * xlogx_ratio(sys.p_c_given_s[s * sys.nc + c], q[c]);
                }
            }
            (exact, bound)
        }
        BoundId::B20 => {
            let q = sys
                .q_a_given_zhat_c
                .as_ref()
                .ok_or(BoundsError::MissingTable(id))?;
            let exact = -exact_mutual_information(
                sys,
                MiQuery::Conditional(Variable::A, Variable::Zhat, Variable::C),
            )?;
            let joint = sys.marginal(&[Variable::A, Variable::Zhat, Variable::C]);
            let mut bound = 0.0;
            for a in 0..sys.na {
                for zh in 0..sys.nzh {
                    for c in 0..sys.nc {
                        let p = joint[(a * sys.nzh + zh) * sys.nc + c];
                        if p > 0.0 {
                            bound -= p * q[(zh * sys.nc + c) * sys.na + a].ln();
                        }
                    }
                }
            }
            (exact, bound)
        }
    };
    Ok((exact, bound, bound - exact))
}

/// Exact rescaled objective versus its assembled variational upper bound.
/// Certifies `lhs ≤ rhs + GAP_TOL` and returns `(lhs, rhs)`.
pub fn assembled_bound_check(
    sys: &DiscreteSystem,
    w: &LossWeights,
) -> Result<(f64, f64), BoundsError> {
    if w.beta1_hat < 0.0 || w.beta2_hat <= 0.0 || w.beta3_hat < 0.0 || w.beta4_hat < 0.0 {
        return Err(BoundsError::WeightDomain);
    }
    sys.validate()?;
    let i_ay_c = exact_mutual_information(
        sys,
        MiQuery::Conditional(Variable::A, Variable::Y, Variable::C),
    )?;
    let i_x_zh_ch = exact_mutual_information(
        sys,
        MiQuery::Conditional(Variable::X, Variable::Zhat, Variable::Chat),
    )?;
    let i_a_zh_c = exact_mutual_information(
        sys,
        MiQuery::Conditional(Variable::A, Variable::Zhat, Variable::C),
    )?;
    let i_s_c = exact_mutual_information(sys, MiQuery::Pair(Variable::S, Variable::C))?;
    let i_a_c_y = exact_mutual_information(
        sys,
        MiQuery::Conditional(Variable::A, Variable::C, Variable::Y),
    )?;
    let lhs = -i_ay_c + w.beta1_hat * i_x_zh_ch - w.beta2_hat * i_a_zh_c + w.beta3_hat * i_s_c
        - w.beta4_hat * i_a_c_y;

    let (_, b11, _) = bound_gap(sys, BoundId::B11)?;
    let (_, b_sem, _) = bound_gap(sys, BoundId::B15)?;
    let (_, b20, _) = bound_gap(sys, BoundId::B20)?;
    let (_, b17, _) = bound_gap(sys, BoundId::B17)?;
    let rhs = w.beta1_hat * b11 + (1.0 + w.beta4_hat) * b_sem + w.beta2_hat * b20 + w.beta3_hat * b17;
    Ok((lhs, rhs))
}

// ── Random and constructed systems ───────────────────────────────────

fn dirichlet_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln().max(1e-300))
        .collect();
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
    // compensate rounding so validation's 1e-12 row check holds
    let correction: f64 = row.iter().sum();
    row[n - 1] += 1.0 - correction;
    row
}

fn dirichlet_table(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        t.extend(dirichlet_row(rng, cols));
    }
    t
}

/// Random system with flat-simplex rows and random variational tables.
pub fn random_system(rng: &mut impl Rng) -> DiscreteSystem {
    let mut size = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (ns, nc, nch) = (size(2, 4), size(2, 4), size(2, 4));
    let (nx, nz, nzh) = (size(2, 4), size(2, 4), size(2, 4));
    let (ny, na) = (size(2, 4), size(2, 4));
    DiscreteSystem {
        ns,
        nc,
        nch,
        nx,
        nz,
        nzh,
        ny,
        na,
        p_s: dirichlet_row(rng, ns),
        p_c_given_s: dirichlet_table(rng, ns, nc),
        p_chat_given_c: dirichlet_table(rng, nc, nch),
        p_x: dirichlet_row(rng, nx),
        p_z_given_x_chat: dirichlet_table(rng, nx * nch, nz),
        p_zhat_given_z: dirichlet_table(rng, nz, nzh),
        p_y_given_zhat_c: dirichlet_table(rng, nzh * nc, ny),
        p_a_given_y_c: dirichlet_table(rng, ny * nc, na),
        q_c: Some(dirichlet_row(rng, nc)),
        q_zhat_given_chat: Some(dirichlet_table(rng, nch, nzh)),
        q_a_given_y_c: Some(dirichlet_table(rng, ny * nc, na)),
        q_a_given_zhat_c: Some(dirichlet_table(rng, nzh * nc, na)),
    }
}

/// One row of the randomized bound sweep report.
#[derive(Debug, Clone)]
pub struct BoundSweepRow {
    pub bound: &'static str,
    pub n_systems: usize,
    pub min_gap: f64,
    pub median_gap: f64,
}

/// Evaluate every bound (and the assembled inequality) on `n` random
/// systems; returns per-bound min/median gaps. Any gap below `−GAP_TOL` is
/// a theorem violation and yields an error-equivalent panic in callers'
/// assertions — here it is simply reported.
pub fn sweep_random_systems(n: usize, seed: u64) -> Result<Vec<BoundSweepRow>, BoundsError> {
    let mut rng = crate::stream::stream(seed, &[0xb0]);
    let mut gaps: Vec<Vec<f64>> = vec![Vec::with_capacity(n); BoundId::ALL.len() + 1];
    let w = LossWeights::default();
    for _ in 0..n {
        let sys = random_system(&mut rng);
        for (bi, id) in BoundId::ALL.iter().enumerate() {
            let (_, _, gap) = bound_gap(&sys, *id)?;
            gaps[bi].push(gap);
        }
        let (lhs, rhs) = assembled_bound_check(&sys, &w)?;
        gaps[BoundId::ALL.len()].push(rhs - lhs);
    }
    let mut rows = Vec::with_capacity(gaps.len());
    for (bi, mut g) in gaps.into_iter().enumerate() {
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let label = if bi < BoundId::ALL.len() {
            BoundId::ALL[bi].label()
        } else {
            "assembled"
        };
        rows.push(BoundSweepRow {
            bound: label,
            n_systems: n,
            min_gap: g[0],
            median_gap: g[g.len() / 2],
        });
    }
    Ok(rows)
}

/// CSV report with LF endings: `bound,n_systems,min_gap,median_gap`.
pub fn bounds_csv(rows: &[BoundSweepRow]) -> String {
    let mut out = String::from("bound,n_systems,min_gap,median_gap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3e},{:.3e}\n",
            r.bound, r.n_systems, r.min_gap, r.median_gap
        ));
    }
    out
}

fn identity_table(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        t[i * n + i] = 1.0;
    }
    t
}

/// Deterministic copy chain `S → C → Ĉ`, `Y = C`, `A = Y`, singleton task
/// path, with every variational table equal to the true posterior/marginal.
/// All five bounds and the assembled bound are tight on it.
pub fn tight_system() -> DiscreteSystem {
    let n = 2;
    // Y = C regardless of Ẑ (singleton), A = Y regardless of C
    let p_y_given_zhat_c = identity_table(n); // [ẑ=0][c][y] = δ_{y,c}
    let p_a_given_y_c = {
        let mut t = vec![0.0; n * n * n];
        for y in 0..n {
            for c in 0..n {
                t[(y * n + c) * n + y] = 1.0;
            }
        }
        t
    };
    DiscreteSystem {
        ns: n,
        nc: n,
        nch: n,
        nx: 1,
        nz: 1,
        nzh: 1,
        ny: n,
        na: n,
        p_s: vec![0.5, 0.5],
        p_c_given_s: identity_table(n),
        p_chat_given_c: identity_table(n),
        p_x: vec![1.0],
        p_z_given_x_chat: vec![1.0; n], // [x=0][ĉ][z=0]
        p_zhat_given_z: vec![1.0],
        p_y_given_zhat_c,
        p_a_given_y_c: p_a_given_y_c.clone(),
        q_c: Some(vec![0.5, 0.5]),              // true marginal p(c)
        q_zhat_given_chat: Some(vec![1.0; n]),  // true p(ẑ|ĉ)
        q_a_given_y_c: Some(p_a_given_y_c.clone()),
        q_a_given_zhat_c: Some({
            // p(a|ẑ,c) = δ_{a,c} since A = Y = C
            let mut t = vec![0.0; n * n];
            for c in 0..n {
                t[c * n + c] = 1.0;
            }
            t
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream;

    #[test]
    fn independent_variables_zero_mi() {
        let mut sys = tight_system();
        // make C independent of S
        sys.p_c_given_s = vec![0.5, 0.5, 0.5, 0.5];
        let mi = exact_mutual_information(&sys, MiQuery::Pair(Variable::S, Variable::C)).unwrap();
        assert!(mi.abs() < 1e-14);
    }

    #[test]
    fn copy_channel_ln2() {
        let sys = tight_system();
        let mi = exact_mutual_information(&sys, MiQuery::Pair(Variable::S, Variable::C)).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn mi_symmetry_and_nonnegativity() {
        let mut rng = stream(1, &[1]);
        for _ in 0..20 {
            let sys = random_system(&mut rng);
            let ab = exact_mutual_information(&sys, MiQuery::Pair(Variable::Y, Variable::A)).unwrap();
            let ba = exact_mutual_information(&sys, MiQuery::Pair(Variable::A, Variable::Y)).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= -1e-12, "I(Y;A) = {ab}");
        }
    }

    #[test]
    fn mi_matches_entropy_identity() {
        // I(X;Y) = H(X) + H(Y) − H(X,Y) recomputed independently
        let mut rng = stream(2, &[2]);
        for _ in 0..10 {
            let sys = random_system(&mut rng);
            let joint = sys.marginal(&[Variable::S, Variable::C]);
            let (ns, nc) = (sys.ns, sys.nc);
            let h = |p: &[f64]| -> f64 {
                p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
            };
            let mut ps = vec![0.0; ns];
            let mut pc = vec![0.0; nc];
            for s in 0..ns {
                for c in 0..nc {
                    ps[s] += joint[s * nc + c];
                    pc[c] += joint[s * nc + c];
                }
            }
            let identity = h(&ps) + h(&pc) - h(&joint);
            let mi = exact_mutual_information(&sys, MiQuery::Pair(Variable::S, Variable::C)).unwrap();
            assert!((mi - identity).abs() < 1e-12, "{mi} vs {identity}");
        }
    }

    #[test]
    fn all_bounds_tight_on_copy_chain() {
        let sys = tight_system();
        for id in BoundId::ALL {
            let (exact, bound, gap) = bound_gap(&sys, id).unwrap();
            assert!(
                gap.abs() <= GAP_TOL,
                "{id:?}: exact {exact}, bound {bound}, gap {gap}"
            );
        }
    }

    #[test]
    fn subtask_rate_point_mass_ln2() {
        // S uniform on {0,1}, p(c|s) point mass at c = s, q(c) uniform
        let sys = tight_system();
        let (exact, bound, gap) = bound_gap(&sys, BoundId::B17).unwrap();
        assert!((exact - std::f64::consts::LN_2).abs() < 1e-14);
        assert!((bound - std::f64::consts::LN_2).abs() < 1e-14);
        assert!(gap.abs() <= GAP_TOL);
    }

    #[test]
    fn random_sweep_all_gaps_nonnegative() {
        let mut rng = stream(3, &[3]);
        for trial in 0..100 {
            let sys = random_system(&mut rng);
            for id in BoundId::ALL {
                let (exact, bound, gap) = bound_gap(&sys, id).unwrap();
                assert!(
                    gap >= -GAP_TOL,
                    "trial {trial} {id:?}: exact {exact}, bound {bound}, gap {gap}"
                );
            }
        }
    }

    #[test]
    fn subtask_rate_gap_equals_marginal_kl() {
        // E_s KL(p(c|s)‖q(c)) − I(S;C) = KL(p(c)‖q(c)), by enumeration
        let mut rng = stream(4, &[4]);
        for _ in 0..20 {
            let sys = random_system(&mut rng);
            let (_, _, gap) = bound_gap(&sys, BoundId::B17).unwrap();
            let q = sys.q_c.as_ref().unwrap();
            let mut pc = vec![0.0; sys.nc];
            for s in 0..sys.ns {
                for c in 0..sys.nc {
                    pc[c] += sys.p_s[s] * sys.p_c_given_s[s * sys.nc + c];
                }
            }
            let kl: f64 = pc
                .iter()
                .zip(q)
                .map(|(&p, &qv)| xlogx_ratio(p, qv))
                .sum();
            assert!((gap - kl).abs() < 1e-12, "gap {gap} vs KL {kl}");
        }
    }

    #[test]
    fn assembled_bound_holds_and_scales() {
        let w = LossWeights::default();
        let mut rng = stream(5, &[5]);
        for _ in 0..30 {
            let sys = random_system(&mut rng);
            let (lhs, rhs) = assembled_bound_check(&sys, &w).unwrap();
            assert!(lhs <= rhs + GAP_TOL, "lhs {lhs} > rhs {rhs}");

            // doubling every β̂ scales the β̂-linear parts consistently
            let w2 = LossWeights {
                beta1_hat: 2.0 * w.beta1_hat,
                beta2_hat: 2.0 * w.beta2_hat,
                beta3_hat: 2.0 * w.beta3_hat,
                beta4_hat: 2.0 * w.beta4_hat,
                j: w.j,
            };
            let (lhs2, rhs2) = assembled_bound_check(&sys, &w2).unwrap();
            assert!(lhs2 <= rhs2 + GAP_TOL);
            let base_lhs = -exact_mutual_information(
                &sys,
                MiQuery::Conditional(Variable::A, Variable::Y, Variable::C),
            )
            .unwrap();
            let (_, b_sem, _) = bound_gap(&sys, BoundId::B15).unwrap();
            assert!((lhs2 - (2.0 * lhs - base_lhs)).abs() < 1e-10);
            assert!((rhs2 - (2.0 * rhs - b_sem)).abs() < 1e-10);
        }
    }

    #[test]
    fn assembled_bound_tight_case_reduces_to_b17() {
        // only β̂₃ active with a tight q(c): both sides meet on the copy chain
        let sys = tight_system();
        let w = LossWeights {
            beta1_hat: 1e-12,
            beta2_hat: 1e-12,
            beta3_hat: 1.0,
            beta4_hat: 0.0,
            j: 1,
        };
        let (lhs, rhs) = assembled_bound_check(&sys, &w).unwrap();
        assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} vs rhs {rhs}");
        assert!((lhs - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn missing_table_and_weight_domain_errors() {
        let mut sys = tight_system();
        sys.q_c = None;
        assert!(matches!(
            bound_gap(&sys, BoundId::B17),
            Err(BoundsError::MissingTable(BoundId::B17))
        ));
        let sys = tight_system();
        let w = LossWeights {
            beta2_hat: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            assembled_bound_check(&sys, &w),
            Err(BoundsError::WeightDomain)
        ));
    }

    #[test]
    fn malformed_table_rejected() {
        let mut sys = tight_system();
        sys.p_s = vec![0.6, 0.6];
        assert!(matches!(
            sys.validate(),
            Err(BoundsError::BadRow { name: "p_s", .. })
        ));
    }
}
