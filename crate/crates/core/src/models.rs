//! The four parameterized networks: conditional module (subtask → latent
//! Gaussian), JSCC encoder with one TiltBlock, JSCC decoder with three
//! TiltBlocks, and the frozen actor plus auxiliary action head.
//!
//! Forward passes are batched row-wise and pure given parameters. Encoder
//! and conditional module emit pair-tied variances (one per complex symbol)
//! so the fading channel has a closed-form diagonal posterior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ComplexVector;
use crate::gaussian::{self, DiagGaussian, TiltParams};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::stream::{self, tag};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("subtask id {s} out of range (n_subtasks = {n})")]
    SubtaskRange { s: usize, n: usize },
    #[error("checkpoint arch field {field}: {found} does not parse")]
    BadArchField { field: String, found: String },
    #[error("checkpoint missing arch field {field}")]
    MissingArchField { field: String },
    #[error("checkpoint missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint tensor {name}: shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint has unexpected tensor {name}")]
    UnexpectedTensor { name: String },
}

/// Network and latent dimensions. `k`/`k_c` count complex symbols; real
/// widths are twice that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_d: usize,
    pub k: usize,
    pub k_c: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub embed_dim: usize,
    pub gamma: f64,
    pub n_subtasks: usize,
    pub n_actions: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_h: 32,
            image_w: 32,
            image_d: 3,
            k: 32,
            k_c: 8,
            hidden1: 128,
            hidden2: 64,
            embed_dim: 64,
            gamma: 1.1,
            n_subtasks: 4,
            n_actions: 5,
        }
    }
}

impl ArchConfig {
    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.image_d
    }

    /// Pre-shuffle decoder head: `image_d·r²` channels at half resolution.
    fn head_channels(&self) -> usize {
        self.image_d * 4
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 || self.k_c == 0 {
            return Err("k and k_c must be at least 1".into());
        }
        if [self.image_h, self.image_w, self.image_d, self.hidden1, self.hidden2, self.embed_dim, self.n_subtasks, self.n_actions]
            .iter()
            .any(|&d| d == 0)
        {
            return Err("all extents must be positive".into());
        }
        if self.image_h % 2 != 0 || self.image_w % 2 != 0 {
            return Err("image extents must be even (decoder upsamples by 2)".into());
        }
        if !(self.gamma >= 0.0) {
            return Err("gamma must be non-negative".into());
        }
        Ok(())
    }

    fn meta(&self) -> Vec<(String, String)> {
        let mut m = vec![];
        for (k, v) in [
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("image_d", self.image_d.to_string()),
            ("k", self.k.to_string()),
            ("k_c", self.k_c.to_string()),
            ("hidden1", self.hidden1.to_string()),
            ("hidden2", self.hidden2.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("n_subtasks", self.n_subtasks.to_string()),
            ("n_actions", self.n_actions.to_string()),
        ] {
            m.push((format!("arch.{k}"), v));
        }
        m
    }

    fn from_meta(meta: &[(String, String)]) -> Result<Self, ModelError> {
        let get = |field: &str| -> Result<&str, ModelError> {
            meta.iter()
                .find(|(k, _)| k == &format!("arch.{field}"))
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| ModelError::MissingArchField { field: field.into() })
        };
        let usize_of = |field: &str| -> Result<usize, ModelError> {
            get(field)?.parse().map_err(|_| ModelError::BadArchField {
                field: field.into(),
                found: get(field).unwrap_or("").into(),
            })
        };
        Ok(ArchConfig {
            image_h: usize_of("image_h")?,
            image_w: usize_of("image_w")?,
            image_d: usize_of("image_d")?,
            k: usize_of("k")?,
            k_c: usize_of("k_c")?,
            hidden1: usize_of("hidden1")?,
            hidden2: usize_of("hidden2")?,
            embed_dim: usize_of("embed_dim")?,
            gamma: get("gamma")?.parse().map_err(|_| ModelError::BadArchField {
                field: "gamma".into(),
                found: get("gamma").unwrap_or("").into(),
            })?,
            n_subtasks: usize_of("n_subtasks")?,
            n_actions: usize_of("n_actions")?,
        })
    }
}

// ── Parameter containers ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    fn he(inp: usize, out: usize, rng: &mut impl rand::Rng) -> Self {
        Affine {
            w: Tensor::randn(vec![inp, out], (2.0 / inp as f64).sqrt(), rng),
            b: Tensor::zeros(vec![out]),
        }
    }

    fn xavier(inp: usize, out: usize, rng: &mut impl rand::Rng) -> Self {
        Affine {
            w: Tensor::randn(vec![inp, out], (1.0 / inp as f64).sqrt(), rng),
            b: Tensor::zeros(vec![out]),
        }
    }

    fn zeros(inp: usize, out: usize) -> Self {
        Affine {
            w: Tensor::zeros(vec![inp, out]),
            b: Tensor::zeros(vec![out]),
        }
    }
}

/// Condition projection plus a per-feature modulation log-variance.
#[derive(Debug, Clone)]
pub struct TiltBlock {
    /// Linear map from condition dimension to feature dimension (no bias,
    /// so a zero condition yields no tilt direction).
    pub proj: Tensor,
    pub logvar: Tensor,
}

impl TiltBlock {
    fn init(cond: usize, feat: usize, rng: &mut impl rand::Rng) -> Self {
        TiltBlock {
            proj: Tensor::randn(vec![cond, feat], (1.0 / cond as f64).sqrt(), rng),
            logvar: Tensor::zeros(vec![feat]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CondParams {
    pub embed: Tensor,
    pub hidden: Affine,
    pub mean_head: Affine,
    pub logvar_head: Affine,
}

#[derive(Debug, Clone)]
pub struct EncParams {
    pub l1: Affine,
    pub l2: Affine,
    pub mean_head: Affine,
    pub logvar_head: Affine,
    pub tilt: TiltBlock,
}

#[derive(Debug, Clone)]
pub struct DecParams {
    pub l1: Affine,
    pub tb1: TiltBlock,
    pub l2: Affine,
    pub tb2: TiltBlock,
    pub l3: Affine,
    pub tb3: TiltBlock,
    pub head: Affine,
    /// 1×1 convolution over pre-shuffle channels, realized as reshape + matmul.
    pub conv: Affine,
}

#[derive(Debug, Clone)]
pub struct ActorParams {
    pub l1: Affine,
    pub l2: Affine,
    pub l3: Affine,
    pub head: Affine,
}

#[derive(Debug, Clone)]
pub struct AuxParams {
    pub l1: Affine,
    pub head: Affine,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub delta: CondParams,
    pub phi: EncParams,
    pub theta: DecParams,
    pub psi_actor: ActorParams,
    pub psi_aux: AuxParams,
}

/// Which parameter groups receive gradients in a pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Trainable {
    pub delta: bool,
    pub phi: bool,
    pub theta: bool,
    pub actor: bool,
    pub aux: bool,
}

impl Trainable {
    /// Joint cVIB training set: everything except the frozen actor.
    pub fn cvib() -> Self {
        Trainable {
            delta: true,
            phi: true,
            theta: true,
            actor: false,
            aux: true,
        }
    }

    pub fn actor_only() -> Self {
        Trainable {
            actor: true,
            ..Default::default()
        }
    }
}

impl ModelParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = stream::stream(seed, &[tag::MODEL_INIT]);
        let (pix, h1, h2, dh) = (arch.pixels(), arch.hidden1, arch.hidden2, arch.embed_dim);
        let (tk, tc) = (2 * arch.k, 2 * arch.k_c);
        let hc = arch.head_channels();
        let head_out = hc * (arch.image_h / 2) * (arch.image_w / 2);
        let delta = CondParams {
            embed: Tensor::randn(vec![arch.n_subtasks, dh], 1.0, &mut rng),
            hidden: Affine::he(dh, dh, &mut rng),
            // zero heads: a fresh module emits exactly N(0, I)
            mean_head: Affine::zeros(dh, tc),
            logvar_head: Affine::zeros(dh, arch.k_c),
        };
        let phi = EncParams {
            l1: Affine::he(pix, h1, &mut rng),
            l2: Affine::he(h1, h2, &mut rng),
            mean_head: Affine::zeros(h2, tk),
            logvar_head: Affine::zeros(h2, arch.k),
            tilt: TiltBlock::init(tc, tk, &mut rng),
        };
        let theta = DecParams {
            l1: Affine::he(tk, h2, &mut rng),
            tb1: TiltBlock::init(tc, h2, &mut rng),
            l2: Affine::he(h2, h1, &mut rng),
            tb2: TiltBlock::init(tc, h1, &mut rng),
            l3: Affine::he(h1, h1, &mut rng),
            tb3: TiltBlock::init(tc, h1, &mut rng),
            head: Affine::xavier(h1, head_out, &mut rng),
            conv: Affine::xavier(hc, hc, &mut rng),
        };
        let mut actor_rng = stream::stream(seed, &[tag::ACTOR_INIT]);
        let psi_actor = ActorParams {
            l1: Affine::he(pix + arch.n_subtasks, h1, &mut actor_rng),
            l2: Affine::he(h1, h2, &mut actor_rng),
            l3: Affine::he(h2, dh, &mut actor_rng),
            head: Affine::zeros(dh, arch.n_actions),
        };
        let psi_aux = AuxParams {
            l1: Affine::he(tk + tc, h2, &mut rng),
            head: Affine::zeros(h2, arch.n_actions),
        };
        ModelParams {
            arch: arch.clone(),
            delta,
            phi,
            theta,
            psi_actor,
            psi_aux,
        }
    }

    /// Canonical (name, tensor) enumeration; checkpoint layout order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(48);
        push_named(&mut out, self);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(40);
        push_named_mut(&mut out, self);
        out
    }

    /// Flat list of trainable tensors for a group selection, in the same
    /// order as `ModelVars::trainable_vars`.
    pub fn trainable_tensors(&self, t: Trainable) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| group_enabled(n, t))
            .collect()
    }

    pub fn trainable_tensors_mut(&mut self, t: Trainable) -> Vec<(String, &mut Tensor)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| group_enabled(n, t))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        self.save_with_meta(path, &[])
    }

    /// Save with extra header key-value pairs (e.g. the training scheme).
    pub fn save_with_meta(
        &self,
        path: &std::path::Path,
        extra: &[(String, String)],
    ) -> Result<(), CheckpointError> {
        let named = self.named_tensors();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let mut meta = self.arch.meta();
        meta.extend_from_slice(extra);
        checkpoint::save(path, &meta, &refs)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::load_with_meta(path).map(|(p, _)| p)
    }

    /// Load parameters plus the non-arch header metadata.
    pub fn load_with_meta(
        path: &std::path::Path,
    ) -> Result<(Self, Vec<(String, String)>), ModelError> {
        let (meta, tensors) = checkpoint::load(path)?;
        let arch = ArchConfig::from_meta(&meta)?;
        arch.validate().map_err(|e| ModelError::BadArchField {
            field: "arch".into(),
            found: e,
        })?;
        let mut params = ModelParams::init(&arch, 0);
        let mut loaded: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for (name, slot) in params.named_tensors_mut() {
            let t = loaded
                .remove(&name)
                .ok_or_else(|| ModelError::MissingTensor { name: name.clone() })?;
            if t.shape() != slot.shape() {
                return Err(ModelError::TensorShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(ModelError::UnexpectedTensor { name });
        }
        let extra: Vec<(String, String)> = meta
            .into_iter()
            .filter(|(k, _)| !k.starts_with("arch."))
            .collect();
        Ok((params, extra))
    }

    /// Byte-level fingerprint of one group, for freeze checks.
    pub fn group_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (name, t) in self.named_tensors() {
            if name.starts_with(prefix) {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        bytes
    }
}

fn group_enabled(name: &str, t: Trainable) -> bool {
    if name.starts_with("delta.") {
        t.delta
    } else if name.starts_with("phi.") {
        t.phi
    } else if name.starts_with("theta.") {
        t.theta
    } else if name.starts_with("psi_actor.") {
        t.actor
    } else {
        t.aux
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &'a ModelParams) {
    let aff = |out: &mut Vec<(String, &'a Tensor)>, pre: &str, a: &'a Affine| {
        out.push((format!("{pre}.w"), &a.w));
        out.push((format!("{pre}.b"), &a.b));
    };
    let tb = |out: &mut Vec<(String, &'a Tensor)>, pre: &str, t: &'a TiltBlock| {
        out.push((format!("{pre}.proj"), &t.proj));
        out.push((format!("{pre}.logvar"), &t.logvar));
    };
    out.push(("delta.embed".into(), &p.delta.embed));
    aff(out, "delta.hidden", &p.delta.hidden);
    aff(out, "delta.mean_head", &p.delta.mean_head);
    aff(out, "delta.logvar_head", &p.delta.logvar_head);
    aff(out, "phi.l1", &p.phi.l1);
    aff(out, "phi.l2", &p.phi.l2);
    aff(out, "phi.mean_head", &p.phi.mean_head);
    aff(out, "phi.logvar_head", &p.phi.logvar_head);
    tb(out, "phi.tilt", &p.phi.tilt);
    aff(out, "theta.l1", &p.theta.l1);
    tb(out, "theta.tb1", &p.theta.tb1);
    aff(out, "theta.l2", &p.theta.l2);
    tb(out, "theta.tb2", &p.theta.tb2);
    aff(out, "theta.l3", &p.theta.l3);
    tb(out, "theta.tb3", &p.theta.tb3);
    aff(out, "theta.head", &p.theta.head);
    aff(out, "theta.conv", &p.theta.conv);
    aff(out, "psi_actor.l1", &p.psi_actor.l1);
    aff(out, "psi_actor.l2", &p.psi_actor.l2);
    aff(out, "psi_actor.l3", &p.psi_actor.l3);
    aff(out, "psi_actor.head", &p.psi_actor.head);
    aff(out, "psi_aux.l1", &p.psi_aux.l1);
    aff(out, "psi_aux.head", &p.psi_aux.head);
}

fn push_named_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, p: &'a mut ModelParams) {
    let aff = |out: &mut Vec<(String, &'a mut Tensor)>, pre: &str, a: &'a mut Affine| {
        out.push((format!("{pre}.w"), &mut a.w));
        out.push((format!("{pre}.b"), &mut a.b));
    };
    let tb = |out: &mut Vec<(String, &'a mut Tensor)>, pre: &str, t: &'a mut TiltBlock| {
        out.push((format!("{pre}.proj"), &mut t.proj));
        out.push((format!("{pre}.logvar"), &mut t.logvar));
    };
    out.push(("delta.embed".into(), &mut p.delta.embed));
    aff(out, "delta.hidden", &mut p.delta.hidden);
    aff(out, "delta.mean_head", &mut p.delta.mean_head);
    aff(out, "delta.logvar_head", &mut p.delta.logvar_head);
    aff(out, "phi.l1", &mut p.phi.l1);
    aff(out, "phi.l2", &mut p.phi.l2);
    aff(out, "phi.mean_head", &mut p.phi.mean_head);
    aff(out, "phi.logvar_head", &mut p.phi.logvar_head);
    tb(out, "phi.tilt", &mut p.phi.tilt);
    aff(out, "theta.l1", &mut p.theta.l1);
    tb(out, "theta.tb1", &mut p.theta.tb1);
    aff(out, "theta.l2", &mut p.theta.l2);
    tb(out, "theta.tb2", &mut p.theta.tb2);
    aff(out, "theta.l3", &mut p.theta.l3);
    tb(out, "theta.tb3", &mut p.theta.tb3);
    aff(out, "theta.head", &mut p.theta.head);
    aff(out, "theta.conv", &mut p.theta.conv);
    aff(out, "psi_actor.l1", &mut p.psi_actor.l1);
    aff(out, "psi_actor.l2", &mut p.psi_actor.l2);
    aff(out, "psi_actor.l3", &mut p.psi_actor.l3);
    aff(out, "psi_actor.head", &mut p.psi_actor.head);
    aff(out, "psi_aux.l1", &mut p.psi_aux.l1);
    aff(out, "psi_aux.head", &mut p.psi_aux.head);
}

// ── Leaf handles on a tape ───────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct TiltBlockVars {
    pub proj: Var,
    pub logvar: Var,
}

pub struct ModelVars {
    pub arch: ArchConfig,
    pub delta_embed: Var,
    pub delta_hidden: AffineVars,
    pub delta_mean: AffineVars,
    pub delta_logvar: AffineVars,
    pub enc_l1: AffineVars,
    pub enc_l2: AffineVars,
    pub enc_mean: AffineVars,
    pub enc_logvar: AffineVars,
    pub enc_tilt: TiltBlockVars,
    pub dec_l1: AffineVars,
    pub dec_tb1: TiltBlockVars,
    pub dec_l2: AffineVars,
    pub dec_tb2: TiltBlockVars,
    pub dec_l3: AffineVars,
    pub dec_tb3: TiltBlockVars,
    pub dec_head: AffineVars,
    pub dec_conv: AffineVars,
    pub actor_l1: AffineVars,
    pub actor_l2: AffineVars,
    pub actor_l3: AffineVars,
    pub actor_head: AffineVars,
    pub aux_l1: AffineVars,
    pub aux_head: AffineVars,
}

impl ModelVars {
    /// Insert every parameter as a leaf; groups in `t` participate in
    /// gradients. Leaf order matches `named_tensors`.
    pub fn insert(tape: &mut Tape, p: &ModelParams, t: Trainable) -> Self {
        let leaf = |tape: &mut Tape, ten: &Tensor, on: bool| {
            if on {
                tape.param(ten)
            } else {
                tape.leaf(ten)
            }
        };
        let aff = |tape: &mut Tape, a: &Affine, on: bool| AffineVars {
            w: if on { tape.param(&a.w) } else { tape.leaf(&a.w) },
            b: if on { tape.param(&a.b) } else { tape.leaf(&a.b) },
        };
        let tb = |tape: &mut Tape, b: &TiltBlock, on: bool| TiltBlockVars {
            proj: if on { tape.param(&b.proj) } else { tape.leaf(&b.proj) },
            logvar: if on { tape.param(&b.logvar) } else { tape.leaf(&b.logvar) },
        };
        ModelVars {
            arch: p.arch.clone(),
            delta_embed: leaf(tape, &p.delta.embed, t.delta),
            delta_hidden: aff(tape, &p.delta.hidden, t.delta),
            delta_mean: aff(tape, &p.delta.mean_head, t.delta),
            delta_logvar: aff(tape, &p.delta.logvar_head, t.delta),
            enc_l1: aff(tape, &p.phi.l1, t.phi),
            enc_l2: aff(tape, &p.phi.l2, t.phi),
            enc_mean: aff(tape, &p.phi.mean_head, t.phi),
            enc_logvar: aff(tape, &p.phi.logvar_head, t.phi),
            enc_tilt: tb(tape, &p.phi.tilt, t.phi),
            dec_l1: aff(tape, &p.theta.l1, t.theta),
            dec_tb1: tb(tape, &p.theta.tb1, t.theta),
            dec_l2: aff(tape, &p.theta.l2, t.theta),
            dec_tb2: tb(tape, &p.theta.tb2, t.theta),
            dec_l3: aff(tape, &p.theta.l3, t.theta),
            dec_tb3: tb(tape, &p.theta.tb3, t.theta),
            dec_head: aff(tape, &p.theta.head, t.theta),
            dec_conv: aff(tape, &p.theta.conv, t.theta),
            actor_l1: aff(tape, &p.psi_actor.l1, t.actor),
            actor_l2: aff(tape, &p.psi_actor.l2, t.actor),
            actor_l3: aff(tape, &p.psi_actor.l3, t.actor),
            actor_head: aff(tape, &p.psi_actor.head, t.actor),
            aux_l1: aff(tape, &p.psi_aux.l1, t.aux),
            aux_head: aff(tape, &p.psi_aux.head, t.aux),
        }
    }

    /// Trainable leaf handles in the same order as
    /// `ModelParams::trainable_tensors` with the same selection.
    pub fn trainable_vars(&self, t: Trainable) -> Vec<Var> {
        let mut out = Vec::new();
        let aff = |out: &mut Vec<Var>, a: &AffineVars, on: bool| {
            if on {
                out.push(a.w);
                out.push(a.b);
            }
        };
        let tb = |out: &mut Vec<Var>, b: &TiltBlockVars, on: bool| {
            if on {
                out.push(b.proj);
                out.push(b.logvar);
            }
        };
        if t.delta {
            out.push(self.delta_embed);
        }
        aff(&mut out, &self.delta_hidden, t.delta);
        aff(&mut out, &self.delta_mean, t.delta);
        aff(&mut out, &self.delta_logvar, t.delta);
        aff(&mut out, &self.enc_l1, t.phi);
        aff(&mut out, &self.enc_l2, t.phi);
        aff(&mut out, &self.enc_mean, t.phi);
        aff(&mut out, &self.enc_logvar, t.phi);
        tb(&mut out, &self.enc_tilt, t.phi);
        aff(&mut out, &self.dec_l1, t.theta);
        tb(&mut out, &self.dec_tb1, t.theta);
        aff(&mut out, &self.dec_l2, t.theta);
        tb(&mut out, &self.dec_tb2, t.theta);
        aff(&mut out, &self.dec_l3, t.theta);
        tb(&mut out, &self.dec_tb3, t.theta);
        aff(&mut out, &self.dec_head, t.theta);
        aff(&mut out, &self.dec_conv, t.theta);
        aff(&mut out, &self.actor_l1, t.actor);
        aff(&mut out, &self.actor_l2, t.actor);
        aff(&mut out, &self.actor_l3, t.actor);
        aff(&mut out, &self.actor_head, t.actor);
        aff(&mut out, &self.aux_l1, t.aux);
        aff(&mut out, &self.aux_head, t.aux);
        out
    }
}

// ── Forward passes ───────────────────────────────────────────────────

fn affine(tape: &mut Tape, x: Var, a: &AffineVars) -> Result<Var, TensorError> {
    let xw = tape.matmul(x, a.w)?;
    tape.add_rows(xw, a.b)
}

/// `[m, n]` one-hot rows from integer ids.
pub fn one_hot_rows(tape: &mut Tape, ids: &[usize], n: usize) -> Var {
    let mut data = vec![0.0; ids.len() * n];
    for (r, &id) in ids.iter().enumerate() {
        debug_assert!(id < n);
        data[r * n + id] = 1.0;
    }
    tape.constant(vec![ids.len(), n], data)
}

/// Duplicate each of `k` columns into an adjacent pair: `[m, k] → [m, 2k]`
/// interleaved, tying the variance of both real parts of a complex symbol.
fn pair_expand(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let cols = *tape.shape(x).last().expect("non-empty");
    let rows = tape.value(x).len() / cols;
    let mut idx = Vec::with_capacity(2 * cols);
    for i in 0..cols {
        idx.push(i);
        idx.push(i);
    }
    let shape = if rows == 1 && tape.shape(x).len() == 1 {
        vec![2 * cols]
    } else {
        vec![rows, 2 * cols]
    };
    tape.gather_groups(x, idx, cols, shape)
}

/// Subtask ids → latent Gaussian over `2·k_c` pair-tied reals.
pub fn conditional_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    subtasks: &[usize],
) -> Result<DiagGaussian, ModelError> {
    let n = vars.arch.n_subtasks;
    if let Some(&s) = subtasks.iter().find(|&&s| s >= n) {
        return Err(ModelError::SubtaskRange { s, n });
    }
    let onehot = one_hot_rows(tape, subtasks, n);
    let e = tape.matmul(onehot, vars.delta_embed)?;
    let h = affine(tape, e, &vars.delta_hidden)?;
    let h = tape.relu(h);
    let mean = affine(tape, h, &vars.delta_mean)?;
    let lv_half = affine(tape, h, &vars.delta_logvar)?;
    let logvar = pair_expand(tape, lv_half)?;
    Ok(DiagGaussian::new(tape, mean, logvar)?)
}

/// Image rows + received subtask representation → tilted latent Gaussian
/// over `2k` pair-tied reals (the exact exponential tilt of the base).
pub fn encoder_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    x: Var,
    c_hat: &ComplexVector,
) -> Result<DiagGaussian, ModelError> {
    let pixels = vars.arch.pixels();
    let cols = *tape.shape(x).last().expect("non-empty");
    if cols != pixels {
        return Err(TensorError::ShapeMismatch {
            op: "encoder_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![pixels],
        }
        .into());
    }
    let h = affine(tape, x, &vars.enc_l1)?;
    let h = tape.relu(h);
    let h = affine(tape, h, &vars.enc_l2)?;
    let h = tape.relu(h);
    let mean = affine(tape, h, &vars.enc_mean)?;
    let lv_half = affine(tape, h, &vars.enc_logvar)?;
    let logvar = pair_expand(tape, lv_half)?;
    let base = DiagGaussian::new(tape, mean, logvar)?;

    let cond_flat = c_hat.to_interleaved(tape)?;
    let condition = tape.matmul(cond_flat, vars.enc_tilt.proj)?;
    Ok(gaussian::tilt(
        tape,
        &base,
        &TiltParams::new(vars.arch.gamma, condition),
    )?)
}

/// Deterministic feature modulation toward the projected condition:
/// `f ← f + γ·softplus(logvar) ⊙ u`.
fn tilt_modulate(
    tape: &mut Tape,
    f: Var,
    c_flat: Var,
    block: &TiltBlockVars,
    gamma: f64,
) -> Result<Var, TensorError> {
    let cond = tape.matmul(c_flat, block.proj)?;
    let u = gaussian::unit_direction(tape, cond)?;
    let strength = tape.softplus(block.logvar);
    let modu = tape.mul_rows(u, strength)?;
    let modu = tape.scale(modu, gamma);
    tape.add(f, modu)
}

/// Received latent + clean subtask representation → task-specific image in
/// `[0,1]`, `[m, h·w·d]` row-major (h, w, d).
pub fn decoder_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    z_hat: &ComplexVector,
    c: &ComplexVector,
) -> Result<Var, ModelError> {
    let arch = &vars.arch;
    let gamma = arch.gamma;
    let z_flat = z_hat.to_interleaved(tape)?;
    let c_flat = c.to_interleaved(tape)?;

    let h = affine(tape, z_flat, &vars.dec_l1)?;
    let h = tape.relu(h);
    let h = tilt_modulate(tape, h, c_flat, &vars.dec_tb1, gamma)?;
    let h = affine(tape, h, &vars.dec_l2)?;
    let h = tape.relu(h);
    let h = tilt_modulate(tape, h, c_flat, &vars.dec_tb2, gamma)?;
    let h = affine(tape, h, &vars.dec_l3)?;
    let h = tape.relu(h);
    let h = tilt_modulate(tape, h, c_flat, &vars.dec_tb3, gamma)?;

    // image head: channelwise 1×1 linear at half resolution, then pixel
    // shuffle up to full resolution
    let (hh, hw) = (arch.image_h / 2, arch.image_w / 2);
    let ch = arch.head_channels();
    let hw_count = hh * hw;
    let rows = tape.value(h).len() / arch.hidden1;
    let pre = affine(tape, h, &vars.dec_head)?;
    let pre = tape.relu(pre);

    // (c, hw) → (hw, c), conv as matmul over positions, back to (c, hw)
    let to_pos: Vec<usize> = (0..hw_count * ch).map(|i| (i % ch) * hw_count + i / ch).collect();
    let pos_major = tape.gather_groups(pre, to_pos, ch * hw_count, vec![rows, hw_count * ch])?;
    let flat = tape.reshape(pos_major, vec![rows * hw_count, ch])?;
    let conv = affine(tape, flat, &vars.dec_conv)?;
    let conv = tape.reshape(conv, vec![rows, hw_count * ch])?;
    let to_ch: Vec<usize> = (0..hw_count * ch).map(|i| (i % hw_count) * ch + i / hw_count).collect();
    let ch_major = tape.gather_groups(conv, to_ch, hw_count * ch, vec![rows, ch * hw_count])?;

    let up = tape.pixel_shuffle_rows(ch_major, ch, hh, hw, 2)?;
    // (d, h, w) → (h, w, d)
    let (ih, iw, id) = (arch.image_h, arch.image_w, arch.image_d);
    let to_hwd: Vec<usize> = (0..id * ih * iw)
        .map(|i| {
            let (pix, chn) = (i / id, i % id);
            chn * ih * iw + pix
        })
        .collect();
    let hwd = tape.gather_groups(up, to_hwd, id * ih * iw, vec![rows, id * ih * iw])?;
    Ok(tape.sigmoid(hwd))
}

/// Image rows + ground-truth subtask one-hots → (action logits, semantic
/// embedding). The embedding is the penultimate activation.
pub fn actor_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    img: Var,
    subtasks: &[usize],
) -> Result<(Var, Var), ModelError> {
    let n = vars.arch.n_subtasks;
    if let Some(&s) = subtasks.iter().find(|&&s| s >= n) {
        return Err(ModelError::SubtaskRange { s, n });
    }
    let onehot = one_hot_rows(tape, subtasks, n);
    let inp = tape.concat_cols(&[img, onehot])?;
    let h = affine(tape, inp, &vars.actor_l1)?;
    let h = tape.relu(h);
    let h = affine(tape, h, &vars.actor_l2)?;
    let h = tape.relu(h);
    let h = affine(tape, h, &vars.actor_l3)?;
    let embed = tape.relu(h);
    let logits = affine(tape, embed, &vars.actor_head)?;
    Ok((logits, embed))
}

/// Received latent + clean subtask representation → action logits.
pub fn aux_head_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    z_hat: &ComplexVector,
    c: &ComplexVector,
) -> Result<Var, ModelError> {
    let z_flat = z_hat.to_interleaved(tape)?;
    let c_flat = c.to_interleaved(tape)?;
    let inp = tape.concat_cols(&[z_flat, c_flat])?;
    let h = affine(tape, inp, &vars.aux_l1)?;
    let h = tape.relu(h);
    Ok(affine(tape, h, &vars.aux_head)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ComplexVector;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
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
        }
    }

    fn const_cv(tape: &mut Tape, rows: usize, k: usize, seed: u64) -> ComplexVector {
        use rand::Rng;
        let mut rng = crate::stream::stream(seed, &[50]);
        let re: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ComplexVector {
            re: tape.constant(vec![rows, k], re),
            im: tape.constant(vec![rows, k], im),
        }
    }

    fn const_img(tape: &mut Tape, rows: usize, arch: &ArchConfig, seed: u64) -> Var {
        use rand::Rng;
        let mut rng = crate::stream::stream(seed, &[51]);
        let data: Vec<f64> = (0..rows * arch.pixels()).map(|_| rng.gen_range(0.0..1.0)).collect();
        tape.constant(vec![rows, arch.pixels()], data)
    }

    #[test]
    fn vars_align_with_named_tensors() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 7);
        let t = Trainable::cvib();
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, t);
        let names = params.trainable_tensors(t);
        let handles = vars.trainable_vars(t);
        assert_eq!(names.len(), handles.len());
        for ((name, tensor), var) in names.iter().zip(&handles) {
            assert_eq!(
                tensor.data(),
                tape.value(*var),
                "leaf order mismatch at {name}"
            );
            assert!(tape.requires_grad(*var), "{name} should be trainable");
        }
        // frozen actor leaves never participate
        assert!(!tape.requires_grad(vars.actor_l1.w));
    }

    #[test]
    fn conditional_same_subtask_identical() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 1);
        let run = || {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let g = conditional_forward(&mut tape, &vars, &[2]).unwrap();
            (tape.value(g.mean).to_vec(), tape.value(g.logvar).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conditional_fresh_params_standard_normal() {
        // zero-initialized heads emit exactly N(0, I)
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 2);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let g = conditional_forward(&mut tape, &vars, &[0, 3]).unwrap();
        assert!(tape.value(g.mean).iter().all(|&v| v == 0.0));
        assert!(tape.value(g.logvar).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditional_logvar_within_clamp() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 3);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let g = conditional_forward(&mut tape, &vars, &[0, 1, 2, 3]).unwrap();
        for &lv in tape.value(g.logvar) {
            assert!((crate::gaussian::LOGVAR_MIN..=crate::gaussian::LOGVAR_MAX).contains(&lv));
        }
    }

    #[test]
    fn conditional_rejects_out_of_range() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 1);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        assert!(matches!(
            conditional_forward(&mut tape, &vars, &[4]),
            Err(ModelError::SubtaskRange { s: 4, n: 4 })
        ));
    }

    #[test]
    fn encoder_emits_pair_tied_variances() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 4);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let x = const_img(&mut tape, 3, &arch, 1);
        let c_hat = const_cv(&mut tape, 3, arch.k_c, 2);
        let g = encoder_forward(&mut tape, &vars, x, &c_hat).unwrap();
        let lv = tape.value(g.logvar);
        for row in lv.chunks_exact(2 * arch.k) {
            for p in 0..arch.k {
                assert_eq!(row[2 * p], row[2 * p + 1]);
            }
        }
    }

    #[test]
    fn encoder_gamma_zero_ignores_condition() {
        let mut arch = tiny_arch();
        arch.gamma = 0.0;
        let params = ModelParams::init(&arch, 5);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let x = const_img(&mut tape, 2, &arch, 9);
            let c_hat = const_cv(&mut tape, 2, arch.k_c, seed);
            let g = encoder_forward(&mut tape, &vars, x, &c_hat).unwrap();
            (tape.value(g.mean).to_vec(), tape.value(g.logvar).to_vec())
        };
        assert_eq!(run(100), run(200));
    }

    #[test]
    fn encoder_zero_condition_barely_shifts() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 6);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let x = const_img(&mut tape, 1, &arch, 3);
        let zero = ComplexVector {
            re: tape.constant(vec![1, arch.k_c], vec![0.0; arch.k_c]),
            im: tape.constant(vec![1, arch.k_c], vec![0.0; arch.k_c]),
        };
        let tilted = encoder_forward(&mut tape, &vars, x, &zero).unwrap();
        // compare against the base (γ = 0 path on the same x)
        let mut arch0 = arch.clone();
        arch0.gamma = 0.0;
        let mut params0 = params.clone();
        params0.arch = arch0;
        let mut tape0 = Tape::new();
        let vars0 = ModelVars::insert(&mut tape0, &params0, Trainable::default());
        let x0 = const_img(&mut tape0, 1, &params0.arch, 3);
        let zero0 = ComplexVector {
            re: tape0.constant(vec![1, params0.arch.k_c], vec![0.0; params0.arch.k_c]),
            im: tape0.constant(vec![1, params0.arch.k_c], vec![0.0; params0.arch.k_c]),
        };
        let base = encoder_forward(&mut tape0, &vars0, x0, &zero0).unwrap();
        for (a, b) in tape.value(tilted.mean).iter().zip(tape0.value(base.mean)) {
            assert!((a - b).abs() <= 1e-7, "shift {}", (a - b).abs());
        }
    }

    #[test]
    fn encoder_tilt_follows_closed_form() {
        // two different ĉ on the same x: means differ by γ·v⊙(u1 − u2)
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 7);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let x = const_img(&mut tape, 1, &arch, 4);
        let c1 = const_cv(&mut tape, 1, arch.k_c, 5);
        let c2 = const_cv(&mut tape, 1, arch.k_c, 6);
        let g1 = encoder_forward(&mut tape, &vars, x, &c1).unwrap();
        let x2 = const_img(&mut tape, 1, &arch, 4);
        let g2 = encoder_forward(&mut tape, &vars, x2, &c2).unwrap();
        // reconstruct u1, u2 from the projection
        let u_of = |tape: &mut Tape, c: &ComplexVector| {
            let flat = c.to_interleaved(tape).unwrap();
            let cond = tape.matmul(flat, vars.enc_tilt.proj).unwrap();
            let u = gaussian::unit_direction(tape, cond).unwrap();
            tape.value(u).to_vec()
        };
        let u1 = u_of(&mut tape, &c1);
        let u2 = u_of(&mut tape, &c2);
        let v: Vec<f64> = tape.value(g1.logvar).iter().map(|l| l.exp()).collect();
        for i in 0..2 * arch.k {
            let got = tape.value(g1.mean)[i] - tape.value(g2.mean)[i];
            let want = arch.gamma * v[i] * (u1[i] - u2[i]);
            assert!((got - want).abs() < 1e-12, "component {i}: {got} vs {want}");
        }
    }

    #[test]
    fn decoder_gamma_zero_condition_independent() {
        let mut arch = tiny_arch();
        arch.gamma = 0.0;
        let params = ModelParams::init(&arch, 8);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let z = const_cv(&mut tape, 2, arch.k, 30);
            let c = const_cv(&mut tape, 2, arch.k_c, seed);
            let y = decoder_forward(&mut tape, &vars, &z, &c).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(31), run(32));
    }

    #[test]
    fn decoder_deterministic_and_in_unit_interval() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 9);
        let run = || {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let z = const_cv(&mut tape, 2, arch.k, 33);
            let c = const_cv(&mut tape, 2, arch.k_c, 34);
            let y = decoder_forward(&mut tape, &vars, &z, &c).unwrap();
            tape.value(y).to_vec()
        };
        let y = run();
        assert_eq!(y, run());
        assert_eq!(y.len(), 2 * arch.pixels());
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decoder_null_space_perturbation_leaves_output() {
        // zero one condition coordinate in all three projections, then
        // perturb c along exactly that coordinate
        let arch = tiny_arch();
        let mut params = ModelParams::init(&arch, 10);
        let dead = 1usize; // condition coordinate 1 (the im part of symbol 0)
        for block in [&mut params.theta.tb1, &mut params.theta.tb2, &mut params.theta.tb3] {
            let cols = block.proj.shape()[1];
            let data = block.proj.data_mut();
            for j in 0..cols {
                data[dead * cols + j] = 0.0;
            }
        }
        let run = |im0: f64| {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let z = const_cv(&mut tape, 1, arch.k, 40);
            let mut re = vec![0.3; arch.k_c];
            let mut im = vec![-0.2; arch.k_c];
            re[1] = 0.8;
            im[0] = im0; // interleaved coordinate 1
            let c = ComplexVector {
                re: tape.constant(vec![1, arch.k_c], re.clone()),
                im: tape.constant(vec![1, arch.k_c], im.clone()),
            };
            let y = decoder_forward(&mut tape, &vars, &z, &c).unwrap();
            tape.value(y).to_vec()
        };
        let (y1, y2) = (run(0.1), run(5.0));
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn actor_deterministic_and_chance_level_untrained() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 11);
        let mut tape = Tape::new();
        let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
        let img = const_img(&mut tape, 4, &arch, 12);
        let (l1, e1) = actor_forward(&mut tape, &vars, img, &[0, 1, 2, 3]).unwrap();
        let img2 = const_img(&mut tape, 4, &arch, 12);
        let (l2, e2) = actor_forward(&mut tape, &vars, img2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(tape.value(l1), tape.value(l2));
        assert_eq!(tape.value(e1), tape.value(e2));
        // zero head → identical logits → constant argmax → exactly 1/n on a
        // balanced action set
        assert!(tape.value(l1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aux_head_deterministic() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 13);
        let run = || {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let z = const_cv(&mut tape, 2, arch.k, 60);
            let c = const_cv(&mut tape, 2, arch.k_c, 61);
            let l = aux_head_forward(&mut tape, &vars, &z, &c).unwrap();
            tape.value(l).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn whole_pipeline_gamma_zero_bit_identical_across_conditions() {
        // fixed x and ẑ: with γ = 0 everywhere, outputs ignore c and ĉ
        let mut arch = tiny_arch();
        arch.gamma = 0.0;
        let params = ModelParams::init(&arch, 14);
        let run = |cseed: u64| {
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, Trainable::default());
            let x = const_img(&mut tape, 1, &arch, 70);
            let c_hat = const_cv(&mut tape, 1, arch.k_c, cseed);
            let g = encoder_forward(&mut tape, &vars, x, &c_hat).unwrap();
            let z = const_cv(&mut tape, 1, arch.k, 71);
            let c = const_cv(&mut tape, 1, arch.k_c, cseed + 1);
            let y = decoder_forward(&mut tape, &vars, &z, &c).unwrap();
            (
                tape.value(g.mean).to_vec(),
                tape.value(g.logvar).to_vec(),
                tape.value(y).to_vec(),
            )
        };
        assert_eq!(run(80), run(90));
    }

    #[test]
    fn checkpoint_roundtrip_and_arch_validation() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.htc");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.arch, arch);
        for ((n1, t1), (_, t2)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(t1.data(), t2.data(), "mismatch in {n1}");
        }
    }
}
