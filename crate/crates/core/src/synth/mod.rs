//! Deterministic synthetic text scenes built from bitmap glyphs.

mod augment;
mod font;

pub use augment::{augment, AugmentConfig};
pub use font::{GlyphFont, DEFAULT_ALPHABET, GLYPH_H, GLYPH_W, TEST_ALPHABET};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::msr::pnm;
use crate::msr::{Charset, RawSample};
use crate::tensor::Tensor;

pub const INK: f32 = 1.0;
pub const BACKGROUND: f32 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Horizontal,
    /// Upright glyphs stacked top to bottom.
    Vertical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub text: String,
    pub rotation_deg: f64,
    /// Arc height of the baseline relative to the glyph height, in `[0, 1]`.
    pub curvature: f64,
    /// Nonzero hides exactly one whole character.
    pub occlusion_frac: f64,
    pub glyph_scale: usize,
    pub noise_sigma: f64,
    pub layout: Layout,
    /// Blank border in glyph pixels before scaling.
    pub margin: usize,
}

impl SceneSpec {
    pub fn plain(text: &str) -> Self {
        SceneSpec {
            text: text.to_string(),
            rotation_deg: 0.0,
            curvature: 0.0,
            occlusion_frac: 0.0,
            glyph_scale: 1,
            noise_sigma: 0.0,
            layout: Layout::Horizontal,
            margin: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Input("scene text must be nonempty".into()));
        }
        if self.glyph_scale == 0 {
            return Err(Error::Input("glyph scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.curvature) || !(0.0..=1.0).contains(&self.occlusion_frac) {
            return Err(Error::Input("curvature and occlusion_frac must lie in [0, 1]".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 || !self.rotation_deg.is_finite() {
            return Err(Error::Input(
                "noise and rotation must be finite, noise nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Index of the character hidden by `render(spec, seed)`, if any.
pub fn occluded_index(spec: &SceneSpec, seed: u64) -> Option<usize> {
    if spec.occlusion_frac <= 0.0 {
        return None;
    }
    let n = spec.text.chars().count() as u64;
    Some((mix(seed ^ 0x0cc1_0de5) % n.max(1)) as usize)
}

/// Top-left pixel of every glyph cell on the unrotated canvas, plus the
/// canvas size.
pub fn glyph_cells(spec: &SceneSpec) -> (Vec<(usize, usize)>, usize, usize) {
    let s = spec.glyph_scale;
    let m = spec.margin * s;
    let n = spec.text.chars().count();
    let (gw, gh) = (GLYPH_W * s, GLYPH_H * s);
    match spec.layout {
        Layout::Horizontal => {
            let amp = (spec.curvature * gh as f64 * 0.6).round() as usize;
            let adv = (GLYPH_W + 1) * s;
            let w = n * adv - s + 2 * m;
            let h = gh + 2 * m + amp;
            let cells = (0..n)
                .map(|i| (m + i * adv, m + amp - arc(i, n, amp)))
                .map(|(x, y)| (y, x))
                .collect();
            (cells, h, w)
        }
        Layout::Vertical => {
            let amp = (spec.curvature * gw as f64 * 0.6).round() as usize;
            let adv = (GLYPH_H + 1) * s;
            let h = n * adv - s + 2 * m;
            let w = gw + 2 * m + amp;
            let cells = (0..n).map(|i| (m + i * adv, m + amp - arc(i, n, amp))).collect();
            (cells, h, w)
        }
    }
}

fn arc(i: usize, n: usize, amp: usize) -> usize {
    let u = (i as f64 + 0.5) / n as f64;
    (amp as f64 * 4.0 * u * (1.0 - u)).round() as usize
}

/// Renders one scene. Deterministic in `(spec, seed)`.
pub fn render(spec: &SceneSpec, font: &GlyphFont, seed: u64) -> Result<RawSample> {
    spec.validate()?;
    let label = spec
        .text
        .chars()
        .map(|c| {
            font.chars()
                .iter()
                .position(|&x| x == c)
                .ok_or_else(|| Error::Input(format!("character {c:?} has no glyph")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (cells, h, w) = glyph_cells(spec);
    let s = spec.glyph_scale;
    let mut canvas = vec![BACKGROUND; h * w];
    for (c, &(y0, x0)) in spec.text.chars().zip(&cells) {
        let bmp = font.glyph(c)?;
        for gy in 0..GLYPH_H * s {
            for gx in 0..GLYPH_W * s {
                if bmp[(gy / s) * GLYPH_W + gx / s] {
                    canvas[(y0 + gy) * w + x0 + gx] = INK;
                }
            }
        }
    }
    if let Some(k) = occluded_index(spec, seed) {
        let (y0, x0) = cells[k];
        for y in y0..y0 + GLYPH_H * s {
            canvas[y * w + x0..y * w + x0 + GLYPH_W * s].fill(BACKGROUND);
        }
    }
    let (mut img, h, w) = if spec.rotation_deg != 0.0 {
        rotate(&canvas, h, w, spec.rotation_deg, true)
    } else {
        (canvas, h, w)
    };
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x6015e));
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(RawSample {
        image: gray_to_rgb(&img, h, w)?,
        label,
        source_id: String::new(),
    })
}

pub(crate) fn gray_to_rgb(gray: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(gray);
    }
    Tensor::new(&[3, h, w], data)
}

fn snapped_trig(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if (quarter - quarter.round()).abs() < 1e-9 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates a single-channel image about its center with bilinear
/// sampling; uncovered pixels are background. With `expand` the canvas
/// grows to hold the whole rotated image.
pub fn rotate(src: &[f32], h: usize, w: usize, deg: f64, expand: bool) -> (Vec<f32>, usize, usize) {
    let (c, s) = snapped_trig(deg);
    let (nh, nw) = if expand {
        let nw = (w as f64 * c.abs() + h as f64 * s.abs() - 1e-9).ceil().max(1.0) as usize;
        let nh = (w as f64 * s.abs() + h as f64 * c.abs() - 1e-9).ceil().max(1.0) as usize;
        (nh, nw)
    } else {
        (h, w)
    };
    let mut out = vec![BACKGROUND; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            let dx = x as f64 + 0.5 - nw as f64 / 2.0;
            let dy = y as f64 + 0.5 - nh as f64 / 2.0;
            let sx = c * dx + s * dy + w as f64 / 2.0 - 0.5;
            let sy = -s * dx + c * dy + h as f64 / 2.0 - 0.5;
            out[y * nw + x] = sample_bilinear(src, h, w, sy, sx);
        }
    }
    (out, nh, nw)
}

pub(crate) fn sample_bilinear(src: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
    let at = |y: f64, x: f64| -> f32 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            BACKGROUND
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut v = 0.0;
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * at(yy, xx);
            }
        }
    }
    v
}

/// SplitMix64 finalizer; derives per-sample seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix(mix(seed) ^ index as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    Regular,
    Rotated,
    Curved,
    Occluded,
    Long,
    Mixed,
    /// Short vertical text, mostly in the squarest bucket.
    Tall,
}

impl Profile {
    pub const ALL: [Profile; 7] = [
        Profile::Regular,
        Profile::Rotated,
        Profile::Curved,
        Profile::Occluded,
        Profile::Long,
        Profile::Mixed,
        Profile::Tall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Regular => "regular",
            Profile::Rotated => "rotated",
            Profile::Curved => "curved",
            Profile::Occluded => "occluded",
            Profile::Long => "long",
            Profile::Mixed => "mixed",
            Profile::Tall => "tall",
        }
    }

    /// Label length range (inclusive).
    pub fn lengths(self) -> (usize, usize) {
        match self {
            Profile::Long => (26, 35),
            Profile::Occluded => (3, 8),
            Profile::Tall => (2, 5),
            _ => (1, 8),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile {s:?}")))
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Profile encoded in a generated sample's source id
/// (`images/<profile>_<index>.pgm`).
pub fn profile_of(source_id: &str) -> Option<Profile> {
    let stem = Path::new(source_id).file_stem()?.to_str()?;
    stem.split_once('_')?.0.parse().ok()
}

/// Probability that a character is followed by its preferred successor.
pub const BIGRAM_STRENGTH: f64 = 0.75;

/// Preferred successor of class `a` in an alphabet of `n` characters.
pub fn successor(a: usize, n: usize) -> usize {
    let mut mult = 5 % n.max(1);
    while n > 1 && gcd(mult, n) != 1 {
        mult += 1;
    }
    (a * mult + 3) % n
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Draws a string from a first-order chain in which every character has a
/// strongly preferred successor.
pub fn sample_text(rng: &mut ChaCha8Rng, alphabet: &[char], len: usize) -> String {
    let n = alphabet.len();
    let mut cur = rng.gen_range(0..n);
    let mut out = String::with_capacity(len);
    out.push(alphabet[cur]);
    for _ in 1..len {
        cur = if rng.gen_bool(BIGRAM_STRENGTH) {
            successor(cur, n)
        } else {
            rng.gen_range(0..n)
        };
        out.push(alphabet[cur]);
    }
    out
}

/// Scene parameters for one sample of `profile`, with `Mixed` resolved to
/// the concrete profile drawn.
pub fn sample_spec(profile: Profile, font: &GlyphFont, rng: &mut ChaCha8Rng) -> (Profile, SceneSpec) {
    let profile = if profile == Profile::Mixed {
        *[
            Profile::Regular,
            Profile::Rotated,
            Profile::Curved,
            Profile::Occluded,
            Profile::Long,
        ]
        .choose(rng)
        .expect("nonempty")
    } else {
        profile
    };
    let (lo, hi) = profile.lengths();
    let len = rng.gen_range(lo..=hi);
    let text = sample_text(rng, font.chars(), len);
    let glyph_scale = if profile == Profile::Long {
        2
    } else {
        rng.gen_range(2..=3)
    };
    let mut spec = SceneSpec {
        text,
        rotation_deg: rng.gen_range(-5.0..=5.0),
        curvature: 0.0,
        occlusion_frac: 0.0,
        glyph_scale,
        noise_sigma: rng.gen_range(0.0..=0.05),
        layout: Layout::Horizontal,
        margin: rng.gen_range(1..=2),
    };
    match profile {
        Profile::Rotated => {
            let base = *[90.0, 180.0, 270.0].choose(rng).expect("nonempty");
            spec.rotation_deg = base + rng.gen_range(-10.0..=10.0);
        }
        Profile::Curved => spec.curvature = rng.gen_range(0.5..=1.0),
        Profile::Long => spec.rotation_deg = rng.gen_range(-1.0..=1.0),
        Profile::Occluded => spec.occlusion_frac = rng.gen_range(0.1..=0.3),
        Profile::Tall => spec.layout = Layout::Vertical,
        _ => {}
    }
    (profile, spec)
}

#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub spec: SceneSpec,
    pub seed: u64,
    pub profile: Profile,
    pub sample: RawSample,
}

fn quantize(img: &mut Tensor<f32>) {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Generates `n` samples in memory, quantized exactly as the on-disk PGMs.
pub fn generate(profile: Profile, n: usize, seed: u64, font: &GlyphFont) -> Result<Vec<GeneratedSample>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (profile, spec) = sample_spec(profile, font, &mut rng);
            let mut sample = render(&spec, font, s)?;
            quantize(&mut sample.image);
            sample.source_id = format!("images/{}_{i:06}.pgm", profile.as_str());
            Ok(GeneratedSample {
                spec,
                seed: s,
                profile,
                sample,
            })
        })
        .collect()
}

/// Writes `images/*.pgm`, `manifest.tsv` and `charset.txt` under `out`.
/// Returns the manifest path.
pub fn make_dataset(profile: Profile, n: usize, seed: u64, font: &GlyphFont, out: &Path) -> Result<PathBuf> {
    let samples = generate(profile, n, seed, font)?;
    write_dataset(&samples, font, out)
}

pub fn write_dataset(samples: &[GeneratedSample], font: &GlyphFont, out: &Path) -> Result<PathBuf> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let charset = Charset::new(font.chars().iter().copied())?;
    let mut manifest = String::new();
    for g in samples {
        let path = out.join(&g.sample.source_id);
        pnm::write_pgm(&path, &g.sample.image)?;
        manifest.push_str(&format!("{}\t{}\n", g.sample.source_id, g.spec.text));
    }
    let mpath = out.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let cpath = out.join("charset.txt");
    fs::write(&cpath, charset.to_file_string()).map_err(|e| Error::io(&cpath, e))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msr::{compute_bucket, load_manifest, BucketId};

    fn font() -> GlyphFont {
        GlyphFont::default_font()
    }

    #[test]
    fn plain_render_tiles_glyphs() {
        let f = font();
        let spec = SceneSpec::plain("abc");
        let s = render(&spec, &f, 0).unwrap();
        assert_eq!(s.label, vec![0, 1, 2]);
        let (h, w) = s.size();
        assert_eq!((h, w), (9, 19));
        let img = s.image.data();
        for (k, c) in "abc".chars().enumerate() {
            let bmp = f.glyph(c).unwrap();
            for y in 0..GLYPH_H {
                for x in 0..GLYPH_W {
                    let want = if bmp[y * GLYPH_W + x] { INK } else { BACKGROUND };
                    assert_eq!(img[(y + 1) * w + 1 + k * 6 + x], want);
                }
            }
        }
        // gap columns and border stay blank
        for y in 0..h {
            assert_eq!(img[y * w + 6], BACKGROUND);
            assert_eq!(img[y * w], BACKGROUND);
        }
    }

    #[test]
    fn deterministic_in_spec_and_seed() {
        let mut spec = SceneSpec::plain("abcd");
        spec.noise_sigma = 0.1;
        spec.rotation_deg = 13.0;
        let a = render(&spec, &font(), 5).unwrap();
        let b = render(&spec, &font(), 5).unwrap();
        assert_eq!(a, b);
        let c = render(&spec, &font(), 6).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn half_turn_flips_both_axes() {
        let spec = SceneSpec::plain("fab");
        let mut turned = spec.clone();
        turned.rotation_deg = 180.0;
        let a = render(&spec, &font(), 0).unwrap();
        let b = render(&turned, &font(), 0).unwrap();
        assert_eq!(a.size(), b.size());
        let (h, w) = a.size();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(a.image.data()[y * w + x], b.image.data()[(h - 1 - y) * w + (w - 1 - x)]);
            }
        }
    }

    #[test]
    fn quarter_turn_transposes_canvas() {
        let mut spec = SceneSpec::plain("abcd");
        spec.rotation_deg = 90.0;
        let s = render(&spec, &font(), 0).unwrap();
        assert_eq!(s.size(), (25, 9));
    }

    #[test]
    fn occlusion_hides_one_whole_character() {
        let f = font();
        for seed in 0..20 {
            let mut spec = SceneSpec::plain("abcdef");
            spec.occlusion_frac = 0.2;
            let k = occluded_index(&spec, seed).unwrap();
            let s = render(&spec, &f, seed).unwrap();
            let (cells, _, w) = glyph_cells(&spec);
            for (i, &(y0, x0)) in cells.iter().enumerate() {
                let ink: usize = (0..GLYPH_H)
                    .flat_map(|y| (0..GLYPH_W).map(move |x| (y, x)))
                    .filter(|&(y, x)| s.image.data()[(y0 + y) * w + x0 + x] == INK)
                    .count();
                if i == k {
                    assert_eq!(ink, 0);
                } else {
                    assert!(ink > 0);
                }
            }
        }
    }

    #[test]
    fn unknown_glyph_is_input_error() {
        assert!(matches!(
            render(&SceneSpec::plain("az"), &font(), 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn long_profile_lengths() {
        let g = generate(Profile::Long, 10, 3, &font()).unwrap();
        assert!(g.iter().all(|s| (26..=35).contains(&s.sample.label.len())));
    }

    #[test]
    fn regular_profile_spans_all_buckets() {
        let g = generate(Profile::Regular, 200, 1, &font()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &g {
            let (h, w) = s.sample.size();
            seen.insert(compute_bucket(h, w).unwrap().id);
        }
        for id in [BucketId::R1, BucketId::R2, BucketId::R3, BucketId::R4] {
            assert!(seen.contains(&id), "{id}");
        }
    }

    #[test]
    fn dataset_on_disk_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let f = font();
        let m = make_dataset(Profile::Mixed, 12, 9, &f, dir.path()).unwrap();
        let bytes = fs::read(&m).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = make_dataset(Profile::Mixed, 12, 9, &f, dir2.path()).unwrap();
        assert_eq!(bytes, fs::read(m2).unwrap());
        let cs = Charset::load(&dir.path().join("charset.txt")).unwrap();
        let loaded = load_manifest(&m, &cs).unwrap();
        let mem = generate(Profile::Mixed, 12, 9, &f).unwrap();
        for (a, b) in loaded.iter().zip(&mem) {
            assert_eq!(a, &b.sample);
            assert!(profile_of(&a.source_id).is_some());
        }
    }

    #[test]
    fn successor_is_a_derangement() {
        for n in [12, 26] {
            let mut seen = vec![false; n];
            for a in 0..n {
                let s = successor(a, n);
                assert_ne!(s, a);
                seen[s] = true;
            }
            assert!(seen.iter().all(|&x| x));
        }
    }
}
