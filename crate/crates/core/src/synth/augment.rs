use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{gray_to_rgb, rotate, sample_bilinear};
use crate::error::Result;
use crate::msr::RawSample;

/// Per-transform probabilities and strengths for training-time jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub max_rotate_deg: f64,
    pub p_perspective: f64,
    /// Largest corner displacement as a fraction of the image extent.
    pub max_corner_shift: f64,
    pub p_blur: f64,
    pub p_noise: f64,
    pub max_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_rotate: 0.25,
            max_rotate_deg: 15.0,
            p_perspective: 0.25,
            max_corner_shift: 0.08,
            p_blur: 0.2,
            p_noise: 0.25,
            max_noise_sigma: 0.08,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            p_rotate: 0.0,
            p_perspective: 0.0,
            p_blur: 0.0,
            p_noise: 0.0,
            ..Default::default()
        }
    }
}

fn mean_channel(sample: &RawSample) -> (Vec<f32>, usize, usize) {
    let (h, w) = sample.size();
    let d = sample.image.data();
    let mut g = vec![0.0; h * w];
    for c in 0..3 {
        for (o, v) in g.iter_mut().zip(&d[c * h * w..(c + 1) * h * w]) {
            *o += v / 3.0;
        }
    }
    (g, h, w)
}

/// Random subset of small rotation, perspective jitter, horizontal motion
/// blur and Gaussian noise. Size and label are preserved.
pub fn augment(sample: &RawSample, cfg: &AugmentConfig, seed: u64) -> Result<RawSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_rotate = rng.gen_bool(cfg.p_rotate.clamp(0.0, 1.0));
    let do_persp = rng.gen_bool(cfg.p_perspective.clamp(0.0, 1.0));
    let do_blur = rng.gen_bool(cfg.p_blur.clamp(0.0, 1.0));
    let do_noise = rng.gen_bool(cfg.p_noise.clamp(0.0, 1.0));
    if !(do_rotate || do_persp || do_blur || do_noise) {
        return Ok(sample.clone());
    }
    let (mut img, h, w) = mean_channel(sample);
    if do_rotate && cfg.max_rotate_deg > 0.0 {
        let deg = rng.gen_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg);
        img = rotate(&img, h, w, deg, false).0;
    }
    if do_persp && cfg.max_corner_shift > 0.0 {
        let m = cfg.max_corner_shift;
        let mut corner = || (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        let c = [corner(), corner(), corner(), corner()];
        img = perspective(&img, h, w, c);
    }
    if do_blur {
        let k = *[3usize, 5].get(rng.gen_range(0..2)).expect("in range");
        img = motion_blur(&img, h, w, k.min(w));
    }
    if do_noise && cfg.max_noise_sigma > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.max_noise_sigma);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            img.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(RawSample {
        image: gray_to_rgb(&img, h, w)?,
        label: sample.label.clone(),
        source_id: sample.source_id.clone(),
    })
}

/// Warps by displacing the four corners (`tl, tr, bl, br`, as fractions of
/// the image size) and bilinearly interpolating the displacement inside.
fn perspective(src: &[f32], h: usize, w: usize, c: [(f64, f64); 4]) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let lerp = |k: usize| {
                let top = c[0].0 * (1.0 - u) + c[1].0 * u;
                let bot = c[2].0 * (1.0 - u) + c[3].0 * u;
                let left = c[0].1 * (1.0 - u) + c[1].1 * u;
                let right = c[2].1 * (1.0 - u) + c[3].1 * u;
                if k == 0 {
                    top * (1.0 - v) + bot * v
                } else {
                    left * (1.0 - v) + right * v
                }
            };
            let sy = y as f64 + lerp(0) * h as f64;
            let sx = x as f64 + lerp(1) * w as f64;
            out[y * w + x] = sample_bilinear(src, h, w, sy, sx);
        }
    }
    out
}

fn motion_blur(src: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for d in -r..=r {
                let xx = x as isize + d;
                if xx >= 0 && (xx as usize) < w {
                    acc += src[y * w + xx as usize];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}
