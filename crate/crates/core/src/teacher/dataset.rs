//! Synthetic image generator.
//!
//! Each image is a flat background (level plus white noise) with one
//! class pattern painted into an axis-aligned box. Patterns are smooth,
//! horizontally symmetric fields drawn from a fixed universe of mutually
//! orthogonal directions, so a crop on the box carries its class and a crop
//! off the box carries nothing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ril::{AugmentTag, CropBox};

/// Side length of the resampled crop patch every encoder consumes.
pub const PATCH: usize = 16;
pub const PATCH_DIM: usize = PATCH * PATCH;

/// Horizontal DCT frequencies (even, hence mirror-symmetric) and vertical
/// frequencies spanning the pattern space. The (0, 0) pair is the DC term
/// and is excluded from patterns.
const FREQ_X: [usize; 4] = [0, 2, 4, 6];
const FREQ_Y: [usize; 4] = [0, 1, 2, 3];
/// Number of distinct class patterns the universe can hold.
pub const MAX_CLASSES: usize = FREQ_X.len() * FREQ_Y.len() - 1;

/// Offset separating held-out evaluation image ids from training ids.
pub const EVAL_ID_BASE: u64 = 1 << 40;

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for substream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn default_grid() -> usize {
    32
}
fn default_background() -> f64 {
    1.0
}
fn default_eval_per_class() -> usize {
    10
}
fn default_box_range() -> (f64, f64) {
    (0.4, 0.6)
}

/// Plain-text (JSON) description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Training-pool images; classes are assigned round-robin.
    pub image_count: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub class_count: usize,
    /// Standard deviation of the per-pixel white noise.
    pub noise_level: f64,
    /// Seed for image content (pattern placement and noise).
    pub seed: u64,
    /// Seed of the pattern universe; datasets sharing it share prototypes.
    #[serde(default)]
    pub pattern_seed: u64,
    /// Universe id of this dataset's class 0.
    #[serde(default)]
    pub first_class: usize,
    #[serde(default = "default_background")]
    pub background_level: f64,
    /// Held-out evaluation images per class.
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    /// Range of the pattern box side as a fraction of the grid.
    #[serde(default = "default_box_range")]
    pub pattern_box: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_count: 64,
            grid: default_grid(),
            class_count: 8,
            noise_level: 0.5,
            seed: 0,
            pattern_seed: 0,
            first_class: 0,
            background_level: default_background(),
            eval_per_class: default_eval_per_class(),
            pattern_box: default_box_range(),
        }
    }
}

impl DatasetSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("dataset spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.first_class + self.class_count > MAX_CLASSES {
            return Err(Error::config(format!(
                "classes {}..{} exceed the pattern universe of {MAX_CLASSES}",
                self.first_class,
                self.first_class + self.class_count
            )));
        }
        if self.image_count == 0 {
            return Err(Error::config("dataset needs at least one image"));
        }
        if self.grid < 8 {
            return Err(Error::config("grid must be at least 8 pixels"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::config("noise level must be finite and non-negative"));
        }
        let (lo, hi) = self.pattern_box;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("pattern box range must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }

    /// Universe ids of this dataset's classes, in local order.
    pub fn class_ids(&self) -> Vec<usize> {
        (self.first_class..self.first_class + self.class_count).collect()
    }

    pub fn universe(&self) -> PatternUniverse {
        PatternUniverse::new(self.pattern_seed)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let universe = self.universe();
        let images = (0..self.image_count as u64)
            .map(|id| self.render(&universe, id, (id % self.class_count as u64) as usize))
            .collect();
        Ok(Dataset {
            spec: self.clone(),
            images,
        })
    }

    /// Held-out images, disjoint from the training pool by id.
    pub fn generate_eval(&self) -> Result<Vec<SyntheticImage>> {
        self.validate()?;
        let universe = self.universe();
        let n = self.eval_per_class * self.class_count;
        Ok((0..n as u64)
            .map(|i| self.render(&universe, EVAL_ID_BASE + i, (i % self.class_count as u64) as usize))
            .collect())
    }

    fn render(&self, universe: &PatternUniverse, image_id: u64, class: usize) -> SyntheticImage {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, image_id));
        let g = self.grid;
        let (lo, hi) = self.pattern_box;
        let bw = ((rng.gen_range(lo..=hi) * g as f64).round() as usize).clamp(2, g);
        let bh = ((rng.gen_range(lo..=hi) * g as f64).round() as usize).clamp(2, g);
        let x0 = rng.gen_range(0..=g - bw);
        let y0 = rng.gen_range(0..=g - bh);
        let coeffs = universe.coefficients(self.first_class + class);

        let mut pixels = vec![0.0; g * g];
        for r in 0..g {
            for c in 0..g {
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = self.background_level + self.noise_level * noise;
                if (x0..x0 + bw).contains(&c) && (y0..y0 + bh).contains(&r) {
                    v += pattern_at(coeffs, c - x0, bw, r - y0, bh);
                }
                pixels[r * g + c] = v;
            }
        }
        SyntheticImage {
            image_id,
            width: g,
            height: g,
            pixels,
            planted_class: class,
            global_class: self.first_class + class,
            pattern_box: CropBox {
                x: x0 as f32 / g as f32,
                y: y0 as f32 / g as f32,
                w: bw as f32 / g as f32,
                h: bh as f32 / g as f32,
            },
        }
    }
}

/// Value of a pattern at local pixel `(col, row)` of a `w × h` box. Columns
/// are folded around the box centre so the field is exactly mirror-symmetric.
fn pattern_at(coeffs: &[f64], col: usize, w: usize, row: usize, h: usize) -> f64 {
    let col = col.min(w - 1 - col);
    let u = (col as f64 + 0.5) / w as f64;
    let v = (row as f64 + 0.5) / h as f64;
    let mut out = 0.0;
    for (i, &a) in coeffs.iter().enumerate() {
        let (fx, fy) = basis_freq(i);
        out += a * dct_norm(fx) * dct_norm(fy) * (std::f64::consts::PI * fx as f64 * u).cos()
            * (std::f64::consts::PI * fy as f64 * v).cos();
    }
    out
}

fn dct_norm(k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        std::f64::consts::SQRT_2
    }
}

/// Frequencies of pattern basis function `i` (DC excluded).
fn basis_freq(i: usize) -> (usize, usize) {
    let j = i + 1;
    (FREQ_X[j / FREQ_Y.len()], FREQ_Y[j % FREQ_Y.len()])
}

/// Unit-norm patch-space vector of the DC component and of each pattern
/// basis function, sampled at patch pixel centres.
pub(crate) fn signal_basis() -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(MAX_CLASSES + 1);
    let mut dc = vec![1.0; PATCH_DIM];
    dc.iter_mut().for_each(|v| *v /= PATCH as f64);
    out.push(dc);
    for i in 0..MAX_CLASSES {
        let mut unit = vec![0.0; MAX_CLASSES];
        unit[i] = 1.0;
        let mut v = render_pattern_patch(&unit);
        let n = crate::numerics::norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

/// Pattern with coefficients `coeffs` rendered directly on the patch grid.
pub(crate) fn render_pattern_patch(coeffs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(PATCH_DIM);
    for r in 0..PATCH {
        for c in 0..PATCH {
            out.push(pattern_at(coeffs, c, PATCH, r, PATCH));
        }
    }
    out
}

/// Orthonormal class directions in pattern-coefficient space.
#[derive(Debug, Clone)]
pub struct PatternUniverse {
    coeffs: Vec<Vec<f64>>,
}

impl PatternUniverse {
    pub fn new(pattern_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pattern_seed, 0xC1A55));
        let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(MAX_CLASSES);
        while coeffs.len() < MAX_CLASSES {
            let mut v: Vec<f64> = (0..MAX_CLASSES).map(|_| rng.sample(StandardNormal)).collect();
            for q in &coeffs {
                let d = crate::numerics::dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let n = crate::numerics::norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                coeffs.push(v);
            }
        }
        Self { coeffs }
    }

    pub fn coefficients(&self, class: usize) -> &[f64] {
        &self.coeffs[class]
    }

    /// The class pattern rendered on the patch grid, unit RMS.
    pub fn pattern_patch(&self, class: usize) -> Vec<f64> {
        render_pattern_patch(&self.coeffs[class])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major scalar field.
    pub pixels: Vec<f64>,
    /// Class index within the owning dataset.
    pub planted_class: usize,
    /// Class id within the pattern universe.
    pub global_class: usize,
    pub pattern_box: CropBox,
}

impl SyntheticImage {
    fn pixel(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Bilinear resample of `crop` to a `PATCH × PATCH` field, mirrored
    /// left-right when tagged.
    pub fn extract_patch(&self, crop: &CropBox, tag: AugmentTag) -> Result<Vec<f64>> {
        if !crop.is_valid() {
            return Err(Error::InvalidCrop(format!("{crop:?} is outside the image")));
        }
        let (wf, hf) = (self.width as f64, self.height as f64);
        let cw = crop.w as f64 * wf;
        let ch = crop.h as f64 * hf;
        if cw < 1.0 || ch < 1.0 {
            return Err(Error::InvalidCrop(format!(
                "{crop:?} spans {cw:.2}×{ch:.2} pixels (sub-pixel)"
            )));
        }
        let x0 = crop.x as f64 * wf;
        let y0 = crop.y as f64 * hf;
        let mut out = vec![0.0; PATCH_DIM];
        for pr in 0..PATCH {
            let sy = (y0 + (pr as f64 + 0.5) * ch / PATCH as f64 - 0.5).clamp(0.0, hf - 1.0);
            let r0 = sy.floor() as usize;
            let r1 = (r0 + 1).min(self.height - 1);
            let fy = sy - r0 as f64;
            for pc in 0..PATCH {
                let sx = (x0 + (pc as f64 + 0.5) * cw / PATCH as f64 - 0.5).clamp(0.0, wf - 1.0);
                let c0 = sx.floor() as usize;
                let c1 = (c0 + 1).min(self.width - 1);
                let fx = sx - c0 as f64;
                let top = self.pixel(r0, c0) * (1.0 - fx) + self.pixel(r0, c1) * fx;
                let bottom = self.pixel(r1, c0) * (1.0 - fx) + self.pixel(r1, c1) * fx;
                let col = match tag {
                    AugmentTag::None => pc,
                    AugmentTag::HFlip => PATCH - 1 - pc,
                };
                out[pr * PATCH + col] = top * (1.0 - fy) + bottom * fy;
            }
        }
        Ok(out)
    }
}

/// A generated training pool.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<SyntheticImage>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, norm};

    #[test]
    fn signal_basis_is_orthonormal() {
        let b = signal_basis();
        assert_eq!(b.len(), MAX_CLASSES + 1);
        for i in 0..b.len() {
            for j in 0..b.len() {
                let d = dot(&b[i], &b[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "({i},{j}) = {d}");
            }
        }
    }

    #[test]
    fn class_patterns_are_orthogonal_unit_rms_and_symmetric() {
        let u = PatternUniverse::new(3);
        for a in 0..MAX_CLASSES {
            let pa = u.pattern_patch(a);
            assert!((norm(&pa) / PATCH as f64 - 1.0).abs() < 1e-12);
            assert!(pa.iter().sum::<f64>().abs() < 1e-9, "zero mean");
            for r in 0..PATCH {
                for c in 0..PATCH {
                    assert_eq!(pa[r * PATCH + c], pa[r * PATCH + PATCH - 1 - c]);
                }
            }
            for b in (a + 1)..MAX_CLASSES {
                assert!(dot(&pa, &u.pattern_patch(b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_labels_round_robin() {
        let spec = DatasetSpec::default();
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.images, b.images);
        for (i, img) in a.images.iter().enumerate() {
            assert_eq!(img.planted_class, i % spec.class_count);
            assert!(img.pattern_box.is_valid());
        }
        let eval = spec.generate_eval().unwrap();
        assert!(eval.iter().all(|e| e.image_id >= EVAL_ID_BASE));
        assert_eq!(eval.len(), spec.eval_per_class * spec.class_count);
    }

    #[test]
    fn pattern_box_crop_recovers_pattern_when_box_is_patch_sized() {
        let spec = DatasetSpec {
            noise_level: 0.0,
            pattern_box: (0.5, 0.5),
            ..DatasetSpec::default()
        };
        let ds = spec.generate().unwrap();
        let img = &ds.images[0];
        let patch = img.extract_patch(&img.pattern_box, AugmentTag::None).unwrap();
        let pattern = spec.universe().pattern_patch(img.global_class);
        for (p, q) in patch.iter().zip(&pattern) {
            assert!((p - spec.background_level - q).abs() < 1e-12);
        }
        let flipped = img.extract_patch(&img.pattern_box, AugmentTag::HFlip).unwrap();
        assert_eq!(patch, flipped);
    }

    #[test]
    fn sub_pixel_crop_is_rejected() {
        let img = DatasetSpec::default().generate().unwrap().images.remove(0);
        let tiny = CropBox { x: 0.1, y: 0.1, w: 0.01, h: 0.5 };
        assert!(matches!(img.extract_patch(&tiny, AugmentTag::None), Err(Error::InvalidCrop(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec { class_count: 16, ..DatasetSpec::default() };
        assert!(s.validate().is_err());
        s.class_count = 8;
        s.first_class = 8;
        assert!(s.validate().is_err());
        s.first_class = 7;
        assert!(s.validate().is_ok());
        let bad: std::result::Result<DatasetSpec, _> =
            serde_json::from_str(r#"{"image_count":1,"class_count":2,"noise_level":0,"seed":1,"bogus":3}"#);
        assert!(bad.is_err());
    }
}
