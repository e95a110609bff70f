//! Task-specific image dumps: reconstruct paired-subtask scenes through the
//! pipeline and write 8-bit PPM files. The two subtask conditions of one
//! scene share every channel and sampling draw, so differences in the
//! output come from the conditioning alone.

use std::path::Path;

use crate::channel::{self, ChannelConfig, ChannelKind, ComplexVector};
use crate::gaussian;
use crate::models::{self, ModelParams, ModelVars, Trainable};
use crate::stream::{self, tag};
use crate::tensor::tape::Tape;
use crate::world::{self, WorldConfig};

use super::{HarnessError, Scheme};

/// Binary PPM (`P6 w h 255`) from `[h, w, d]` values in `[0, 1]`,
/// quantized as `round(255·v)`.
pub fn write_ppm(path: &Path, pixels: &[f64], h: usize, w: usize) -> std::io::Result<()> {
    debug_assert_eq!(pixels.len(), h * w * 3);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(pixels.iter().map(|&v| (255.0 * v).round() as u8));
    std::fs::write(path, buf)
}

/// Run one scene image through the pipeline under subtask `s` with streams
/// keyed only by `scene_seed` (common random numbers across subtasks and
/// schemes). The upper bound returns the input unchanged.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_for(
    params: &ModelParams,
    scheme: Scheme,
    s: usize,
    image: &[f64],
    kind: ChannelKind,
    snr_db: f64,
    equalize: bool,
    scene_seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    if scheme == Scheme::UpperBound {
        return Ok(image.to_vec());
    }
    let cfg = ChannelConfig {
        kind,
        snr_db,
        equalize,
    };
    let mut tape = Tape::new();
    let vars = ModelVars::insert(&mut tape, params, Trainable::default());
    let pix = params.arch.pixels();
    let k_c = params.arch.k_c;

    let c_cv = if scheme.condition_enabled() {
        let c_dist = models::conditional_forward(&mut tape, &vars, &[s])?;
        let mut rng = stream::stream(scene_seed, &[2]);
        let c = gaussian::sample(&mut tape, &c_dist, &mut rng);
        ComplexVector::from_interleaved(&mut tape, c).map_err(models::ModelError::from)?
    } else {
        ComplexVector {
            re: tape.constant(vec![1, k_c], vec![0.0; k_c]),
            im: tape.constant(vec![1, k_c], vec![0.0; k_c]),
        }
    };
    let mut sub_rng = stream::stream(scene_seed, &[3]);
    let r_sub = channel::realize(&cfg, &mut sub_rng);
    let (mut c_hat, _) = channel::transmit_rows(&mut tape, &c_cv, &[r_sub], &mut sub_rng)?;
    if equalize {
        c_hat = channel::equalize(&mut tape, &c_hat, &r_sub)?;
    }

    let xv = tape.constant(vec![1, pix], image.to_vec());
    let z_dist = models::encoder_forward(&mut tape, &vars, xv, &c_hat)?;
    let mut z_rng = stream::stream(scene_seed, &[4]);
    let z = gaussian::sample(&mut tape, &z_dist, &mut z_rng);
    let z_cv = ComplexVector::from_interleaved(&mut tape, z).map_err(models::ModelError::from)?;
    let mut task_rng = stream::stream(scene_seed, &[5]);
    let r_task = channel::realize(&cfg, &mut task_rng);
    let (mut z_hat, _) = channel::transmit_rows(&mut tape, &z_cv, &[r_task], &mut task_rng)?;
    if equalize {
        z_hat = channel::equalize(&mut tape, &z_hat, &r_task)?;
    }
    let y = models::decoder_forward(&mut tape, &vars, &z_hat, &c_cv)?;
    Ok(tape.value(y).to_vec())
}

/// Dump `count` paired-subtask scenes: the source image once per scene and
/// one reconstruction per (subtask, scheme).
#[allow(clippy::too_many_arguments)]
pub fn dump_taskspecific_images(
    schemes: &[(Scheme, &ModelParams)],
    world_cfg: &WorldConfig,
    kind: ChannelKind,
    snr_db: f64,
    equalize: bool,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (world_cfg.image_h, world_cfg.image_w);
    let mut written = Vec::new();
    for scene in 0..count {
        let scene_seed = stream::derive(seed, &[tag::PAIRED, scene as u64]);
        let mut rng = stream::stream(scene_seed, &[1]);
        let (first, second, _) = world::generate_paired(world_cfg, &mut rng);
        let image = first.image_f64();

        let x_path = out_dir.join(format!("scene{scene:03}_x.ppm"));
        write_ppm(&x_path, &image, h, w)?;
        written.push(x_path);

        for &(scheme, params) in schemes {
            for &s in &[first.s as usize, second.s as usize] {
                let y = reconstruct_for(params, scheme, s, &image, kind, snr_db, equalize, scene_seed)?;
                let path = out_dir.join(format!("scene{scene:03}_s{s}_{}.ppm", scheme.label()));
                write_ppm(&path, &y, h, w)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelParams;

    #[test]
    fn ppm_header_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let pixels = vec![0.5; 32 * 32 * 3];
        write_ppm(&path, &pixels, 32, 32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
        assert_eq!(bytes[13], 128); // round(255·0.5)
    }

    #[test]
    fn upper_bound_dumps_the_source_image() {
        let cfg = crate::harness::tests::tiny_config();
        let params = ModelParams::init(&cfg.arch, 1);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_taskspecific_images(
            &[(Scheme::UpperBound, &params)],
            &cfg.world,
            ChannelKind::Rayleigh,
            0.0,
            false,
            2,
            9,
            dir.path(),
        )
        .unwrap();
        // x and the upper-bound y are the same quantized pixels
        let x0 = std::fs::read(&files[0]).unwrap();
        let y0 = std::fs::read(&files[1]).unwrap();
        assert_eq!(x0[13..], y0[13..]);
    }

    #[test]
    fn conditioned_reconstructions_differ_across_subtasks() {
        // untrained but tilted: two subtask conditions draw different c
        let cfg = crate::harness::tests::tiny_config();
        let mut params = ModelParams::init(&cfg.arch, 2);
        // move the conditional heads off zero so subtasks differ
        use rand::Rng;
        let mut rng = crate::stream::stream(3, &[1]);
        for v in params.delta.mean_head.w.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let mut wrng = crate::stream::stream(4, &[1]);
        let (a, b, _) = world::generate_paired(&cfg.world, &mut wrng);
        let image = a.image_f64();
        let y1 = reconstruct_for(&params, Scheme::Full, a.s as usize, &image, ChannelKind::Awgn, 20.0, false, 77).unwrap();
        let y2 = reconstruct_for(&params, Scheme::Full, b.s as usize, &image, ChannelKind::Awgn, 20.0, false, 77).unwrap();
        assert_ne!(y1, y2);
    }
}
