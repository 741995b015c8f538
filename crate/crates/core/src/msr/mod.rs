//! Multi-size resizing: aspect-ratio buckets, bilinear resize and
//! size-homogeneous batch construction.

mod manifest;
pub mod pnm;

pub use manifest::{load_manifest, Charset, RawSample};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest `⌊R⌋` the variable-width bucket accepts; wider crops are squeezed.
pub const MAX_R4_UNITS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BucketId {
    R1,
    R2,
    R3,
    R4,
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BucketId::R1 => "R1",
            BucketId::R2 => "R2",
            BucketId::R3 => "R3",
            BucketId::R4 => "R4",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AspectBucket {
    pub id: BucketId,
    /// `(height, width)` the image is resized to.
    pub target: (usize, usize),
}

/// Bucket for an aspect ratio `R = W / H`.
pub fn bucket_for_ratio(r: f64) -> Result<AspectBucket> {
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::Input(format!(
            "aspect ratio must be positive and finite, got {r}"
        )));
    }
    let (id, target) = if r < 1.5 {
        (BucketId::R1, (64, 64))
    } else if r < 2.5 {
        (BucketId::R2, (48, 96))
    } else if r < 3.5 {
        (BucketId::R3, (40, 112))
    } else {
        let units = (r.floor() as usize).clamp(3, MAX_R4_UNITS);
        (BucketId::R4, (32, units * 32))
    };
    Ok(AspectBucket { id, target })
}

pub fn compute_bucket(height: usize, width: usize) -> Result<AspectBucket> {
    if height == 0 || width == 0 {
        return Err(Error::Input(format!(
            "image extents must be positive, got {height}x{width}"
        )));
    }
    bucket_for_ratio(width as f64 / height as f64)
}

/// How images are mapped to network input sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    #[default]
    Msr,
    Fixed32x128,
    Fixed64x256,
}

impl ResizeMode {
    pub fn target(self, height: usize, width: usize) -> Result<(usize, usize)> {
        match self {
            ResizeMode::Msr => Ok(compute_bucket(height, width)?.target),
            ResizeMode::Fixed32x128 => Ok((32, 128)),
            ResizeMode::Fixed64x256 => Ok((64, 256)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResizeMode::Msr => "msr",
            ResizeMode::Fixed32x128 => "fixed32x128",
            ResizeMode::Fixed64x256 => "fixed64x256",
        }
    }
}

impl FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msr" => Ok(ResizeMode::Msr),
            "fixed32x128" => Ok(ResizeMode::Fixed32x128),
            "fixed64x256" => Ok(ResizeMode::Fixed64x256),
            other => Err(Error::Config(format!("unknown resize mode {other:?}"))),
        }
    }
}

impl fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel sample centers.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::Shape(format!(
            "expected [C, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Input(format!("resize target must be positive, got {th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(th, h);
    let xs = taps(tw, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push(T::from_f64((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

/// Sample ids that share one input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub target: (usize, usize),
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchManifest {
    pub batches: Vec<Batch>,
    pub seed: u64,
}

impl BatchManifest {
    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(|b| b.ids.len()).sum()
    }
}

/// Groups samples by target size, shuffles within groups and across full
/// batches, and keeps each group's trailing partial batch (placed last).
pub fn build_batches_from_sizes(
    sizes: &[(usize, usize)],
    batch_size: usize,
    seed: u64,
    mode: ResizeMode,
) -> Result<BatchManifest> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Input("cannot batch an empty dataset".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        groups.entry(mode.target(h, w)?).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = Vec::new();
    let mut partial = Vec::new();
    for (target, mut ids) in groups {
        ids.shuffle(&mut rng);
        for chunk in ids.chunks(batch_size) {
            let b = Batch {
                target,
                ids: chunk.to_vec(),
            };
            if chunk.len() == batch_size {
                full.push(b);
            } else {
                partial.push(b);
            }
        }
    }
    full.shuffle(&mut rng);
    partial.shuffle(&mut rng);
    full.extend(partial);
    Ok(BatchManifest { batches: full, seed })
}

pub fn build_batches(samples: &[RawSample], batch_size: usize, seed: u64, mode: ResizeMode) -> Result<BatchManifest> {
    let sizes: Vec<(usize, usize)> = samples.iter().map(RawSample::size).collect();
    build_batches_from_sizes(&sizes, batch_size, seed, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(
            compute_bucket(40, 120).unwrap(),
            AspectBucket {
                id: BucketId::R3,
                target: (40, 112)
            }
        );
        assert_eq!(
            compute_bucket(64, 64).unwrap(),
            AspectBucket {
                id: BucketId::R1,
                target: (64, 64)
            }
        );
        assert_eq!(
            compute_bucket(32, 252).unwrap(),
            AspectBucket {
                id: BucketId::R4,
                target: (32, 224)
            }
        );
        assert_eq!(compute_bucket(40, 60).unwrap().id, BucketId::R2);
        assert_eq!(compute_bucket(40, 100).unwrap().id, BucketId::R3);
        assert_eq!(
            compute_bucket(40, 140).unwrap(),
            AspectBucket {
                id: BucketId::R4,
                target: (32, 96)
            }
        );
    }

    #[test]
    fn non_positive_extent_rejected() {
        assert!(compute_bucket(0, 10).is_err());
        assert!(compute_bucket(10, 0).is_err());
    }

    #[test]
    fn r4_is_clamped() {
        assert_eq!(compute_bucket(10, 1000).unwrap().target, (32, 24 * 32));
    }

    #[test]
    fn identity_resize() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&img, (2, 3)).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::<f64>::full(&[3, 5, 7], 0.37);
        let r = resize_bilinear(&img, (11, 3)).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upsample() {
        // Half-pixel sampling of 2 → 4 reads source rows at
        // {0 (clamped), 0.25, 0.75, 1}; weights per axis: 1, .75/.25, .25/.75, 1.
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, (4, 4)).unwrap();
        let w = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for (y, &(ay0, ay1)) in w.iter().enumerate() {
            for (x, &(ax0, ax1)) in w.iter().enumerate() {
                let expect = ay0 * ax0 * 1.0 + ay1 * ax1 * 1.0;
                assert!((r.data()[y * 4 + x] - expect).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn batches_of_one_bucket() {
        let sizes = vec![(32, 32); 10];
        let m = build_batches_from_sizes(&sizes, 4, 7, ResizeMode::Msr).unwrap();
        let lens: Vec<usize> = m.batches.iter().map(|b| b.ids.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }

    #[test]
    fn widths_never_mix() {
        // R1, R4 with ⌊R⌋=4, R4 with ⌊R⌋=6
        let mut sizes = vec![(30, 30); 5];
        sizes.extend(vec![(10, 45); 5]);
        sizes.extend(vec![(10, 63); 5]);
        let m = build_batches_from_sizes(&sizes, 3, 1, ResizeMode::Msr).unwrap();
        let targets: std::collections::BTreeSet<_> = m.batches.iter().map(|b| b.target).collect();
        assert_eq!(targets.len(), 3);
        for b in &m.batches {
            for &i in &b.ids {
                assert_eq!(ResizeMode::Msr.target(sizes[i].0, sizes[i].1).unwrap(), b.target);
            }
        }
        assert_eq!(m.num_samples(), 15);
    }

    #[test]
    fn manifest_is_seed_deterministic() {
        let sizes: Vec<(usize, usize)> = (0..40).map(|i| (20, 10 + 7 * i)).collect();
        let a = build_batches_from_sizes(&sizes, 4, 99, ResizeMode::Msr).unwrap();
        let b = build_batches_from_sizes(&sizes, 4, 99, ResizeMode::Msr).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_zero_batch_rejected() {
        assert!(build_batches_from_sizes(&[], 4, 0, ResizeMode::Msr).is_err());
        assert!(build_batches_from_sizes(&[(8, 8)], 0, 0, ResizeMode::Msr).is_err());
    }

    #[test]
    fn fixed_modes() {
        assert_eq!(ResizeMode::Fixed32x128.target(64, 10).unwrap(), (32, 128));
        assert_eq!("fixed64x256".parse::<ResizeMode>().unwrap(), ResizeMode::Fixed64x256);
        assert!("other".parse::<ResizeMode>().is_err());
    }
}
