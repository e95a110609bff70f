//! Synthetic subtask world: colored shape blobs on a cluttered background.
//!
//! Each scene places 2-4 distinct object types at grid-snapped positions that
//! never straddle quadrant boundaries. The subtask `s` asks for the quadrant
//! of the type-`s` object; the answer is one of four quadrants or "absent".

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{self, tag};

pub const MAGIC: [u8; 4] = *b"HTOC";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected HTOC)")]
    BadMagic,
    #[error("unsupported dataset version {found}")]
    Version { found: u16 },
    #[error("dataset truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("dataset must hold at least one sample")]
    Empty,
    #[error("sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_d: usize,
    pub n_subtasks: usize,
    pub n_actions: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length in pixels.
    pub blob: usize,
    /// Additive clutter noise amplitude.
    pub clutter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_h: 32,
            image_w: 32,
            image_d: 3,
            n_subtasks: 4,
            n_actions: 5,
            min_objects: 2,
            max_objects: 4,
            blob: 6,
            clutter: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.image_d
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_d != 3 {
            return Err("image depth must be 3".into());
        }
        if self.n_subtasks == 0 || self.n_subtasks > 4 {
            return Err("n_subtasks must be in 1..=4".into());
        }
        if self.n_actions != 5 {
            return Err("n_actions must be 5 (four quadrants + absent)".into());
        }
        if self.min_objects < 1 || self.max_objects > self.n_subtasks || self.min_objects > self.max_objects {
            return Err("object count range must fit the type count".into());
        }
        if self.blob > self.image_h / 2 || self.blob > self.image_w / 2 {
            return Err("blob must fit inside a quadrant".into());
        }
        Ok(())
    }
}

/// One environment transition: observation, subtask id, correct action.
#[derive(Debug, Clone)]
pub struct SubtaskSample {
    /// `[h, w, d]` row-major in `[0, 1]`, quantized to f32 at creation so
    /// file round-trips are bit-exact.
    pub image: Box<[f32]>,
    pub s: u8,
    pub a: u8,
}

impl SubtaskSample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

/// Placement record: (object type, top-left row, top-left col).
#[derive(Debug, Clone)]
pub struct SceneMeta {
    pub placements: Vec<(usize, usize, usize)>,
}

impl SceneMeta {
    /// Quadrant (0..4) of the type-`s` object, or 4 if absent — the world's
    /// labeling rule.
    pub fn action_for(&self, s: usize, cfg: &WorldConfig) -> u8 {
        for &(ty, r, c) in &self.placements {
            if ty == s {
                let row_half = if r < cfg.image_h / 2 { 0 } else { 1 };
                let col_half = if c < cfg.image_w / 2 { 0 } else { 1 };
                return (row_half * 2 + col_half) as u8;
            }
        }
        4
    }

    /// Pixel bounding box `(r0, c0, r1, c1)` of the type-`s` object, if placed.
    pub fn region_for(&self, s: usize, cfg: &WorldConfig) -> Option<(usize, usize, usize, usize)> {
        self.placements
            .iter()
            .find(|&&(ty, _, _)| ty == s)
            .map(|&(_, r, c)| (r, c, r + cfg.blob, c + cfg.blob))
    }
}

const COLORS: [[f64; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.20],
];
const BACKGROUND: f64 = 0.12;

fn shape_mask(ty: usize, r: usize, c: usize, blob: usize) -> bool {
    let ctr = (blob - 1) as f64 / 2.0;
    let (dr, dc) = (r as f64 - ctr, c as f64 - ctr);
    match ty {
        0 => true,                                 // square
        1 => dr * dr + dc * dc <= ctr * ctr + 0.6, // disk
        2 => dr.abs() + dc.abs() <= ctr + 0.4,     // diamond
        _ => dc.abs() <= (r as f64 + 1.0) * 0.5,   // apex-up triangle
    }
}

/// Grid positions per axis: a blob corner may sit anywhere that keeps the
/// blob strictly inside one half (the center cross is excluded).
fn axis_positions(extent: usize, blob: usize) -> Vec<usize> {
    let half = extent / 2;
    (0..=half - blob).chain(half..=extent - blob).collect()
}

fn render_scene(cfg: &WorldConfig, rng: &mut impl Rng) -> (Box<[f32]>, SceneMeta) {
    let m = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut types: Vec<usize> = (0..cfg.n_subtasks).collect();
    types.shuffle(rng);
    types.truncate(m);

    let rows = axis_positions(cfg.image_h, cfg.blob);
    let cols = axis_positions(cfg.image_w, cfg.blob);
    let mut placements: Vec<(usize, usize, usize)> = Vec::with_capacity(m);
    for &ty in &types {
        let mut tries = 0;
        loop {
            let r = rows[rng.gen_range(0..rows.len())];
            let c = cols[rng.gen_range(0..cols.len())];
            let overlaps = placements.iter().any(|&(_, pr, pc)| {
                (r as i64 - pr as i64).abs() < cfg.blob as i64
                    && (c as i64 - pc as i64).abs() < cfg.blob as i64
            });
            tries += 1;
            if !overlaps || tries > 200 {
                placements.push((ty, r, c));
                break;
            }
        }
    }

    let mut img = vec![BACKGROUND; cfg.pixels()];
    for &(ty, r0, c0) in &placements {
        for dr in 0..cfg.blob {
            for dc in 0..cfg.blob {
                if shape_mask(ty, dr, dc, cfg.blob) {
                    let base = ((r0 + dr) * cfg.image_w + (c0 + dc)) * cfg.image_d;
                    img[base..base + 3].copy_from_slice(&COLORS[ty]);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-cfg.clutter..=cfg.clutter)).clamp(0.0, 1.0);
    }
    let quantized: Box<[f32]> = img.iter().map(|&v| v as f32).collect();
    (quantized, SceneMeta { placements })
}

/// Render a scene, draw a subtask uniformly, and label it.
pub fn generate_sample(cfg: &WorldConfig, rng: &mut impl Rng) -> SubtaskSample {
    let (sample, _) = generate_sample_with_meta(cfg, rng);
    sample
}

pub fn generate_sample_with_meta(cfg: &WorldConfig, rng: &mut impl Rng) -> (SubtaskSample, SceneMeta) {
    let (image, meta) = render_scene(cfg, rng);
    let s = rng.gen_range(0..cfg.n_subtasks);
    let a = meta.action_for(s, cfg);
    (
        SubtaskSample {
            image,
            s: s as u8,
            a,
        },
        meta,
    )
}

/// Two samples sharing one scene whose subtasks are both present object
/// types; built for subtask-discriminability tests.
pub fn generate_paired(
    cfg: &WorldConfig,
    rng: &mut impl Rng,
) -> (SubtaskSample, SubtaskSample, SceneMeta) {
    loop {
        let (image, meta) = render_scene(cfg, rng);
        if meta.placements.len() < 2 {
            continue;
        }
        let mut present: Vec<usize> = meta.placements.iter().map(|p| p.0).collect();
        present.shuffle(rng);
        let (s1, s2) = (present[0], present[1]);
        let first = SubtaskSample {
            image: image.clone(),
            s: s1 as u8,
            a: meta.action_for(s1, cfg),
        };
        let second = SubtaskSample {
            image,
            s: s2 as u8,
            a: meta.action_for(s2, cfg),
        };
        return (first, second, meta);
    }
}

/// In-memory dataset with the header fields of the file format.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_h: usize,
    pub image_w: usize,
    pub image_d: usize,
    pub n_subtasks: usize,
    pub n_actions: usize,
    pub samples: Vec<SubtaskSample>,
}

impl Dataset {
    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.image_d
    }
}

/// Generate `n` samples with per-sample streams from `(seed, index)` and
/// write the binary format. Identical arguments produce byte-identical files.
pub fn generate_dataset(path: &Path, n: usize, seed: u64, cfg: &WorldConfig) -> Result<(), WorldError> {
    if n == 0 {
        return Err(WorldError::Empty);
    }
    let samples: Vec<SubtaskSample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream::stream(seed, &[tag::WORLD, i as u64]);
            generate_sample(cfg, &mut rng)
        })
        .collect();
    write_dataset(path, cfg, &samples)
}

pub fn write_dataset(path: &Path, cfg: &WorldConfig, samples: &[SubtaskSample]) -> Result<(), WorldError> {
    if samples.is_empty() {
        return Err(WorldError::Empty);
    }
    let mut buf: Vec<u8> =
        Vec::with_capacity(20 + samples.len() * (cfg.pixels() * 4 + 2));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for dim in [cfg.image_h, cfg.image_w, cfg.image_d, cfg.n_subtasks, cfg.n_actions] {
        buf.extend_from_slice(&(dim as u16).to_le_bytes());
    }
    for s in samples {
        debug_assert_eq!(s.image.len(), cfg.pixels());
        for v in s.image.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(s.s);
        buf.push(s.a);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load and validate a dataset file; magic, version, and truncation yield
/// distinct errors.
pub fn load_dataset(path: &Path) -> Result<Dataset, WorldError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(WorldError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(WorldError::Truncated { offset: bytes.len() });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(WorldError::Version { found: version });
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = |i: usize| u16::from_le_bytes(bytes[10 + 2 * i..12 + 2 * i].try_into().unwrap()) as usize;
    let (h, w, d, n_subtasks, n_actions) = (dim(0), dim(1), dim(2), dim(3), dim(4));
    if n == 0 {
        return Err(WorldError::Empty);
    }
    let pixels = h * w * d;
    let sample_bytes = pixels * 4 + 2;
    let mut samples = Vec::with_capacity(n);
    let mut off = 20usize;
    for index in 0..n {
        if off + sample_bytes > bytes.len() {
            return Err(WorldError::Truncated { offset: bytes.len() });
        }
        let mut image = Vec::with_capacity(pixels);
        for chunk in bytes[off..off + pixels * 4].chunks_exact(4) {
            image.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let s = bytes[off + pixels * 4];
        let a = bytes[off + pixels * 4 + 1];
        if (s as usize) >= n_subtasks {
            return Err(WorldError::InvalidSample {
                index,
                reason: format!("subtask {s} out of range {n_subtasks}"),
            });
        }
        if (a as usize) >= n_actions {
            return Err(WorldError::InvalidSample {
                index,
                reason: format!("action {a} out of range {n_actions}"),
            });
        }
        samples.push(SubtaskSample {
            image: image.into_boxed_slice(),
            s,
            a,
        });
        off += sample_bytes;
    }
    Ok(Dataset {
        image_h: h,
        image_w: w,
        image_d: d,
        n_subtasks,
        n_actions,
        samples,
    })
}
