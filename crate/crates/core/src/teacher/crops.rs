use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{derive_seed, SyntheticImage};
use crate::ril::{AugmentTag, CropBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropDescriptor {
    pub crop_box: CropBox,
    pub augment_tag: AugmentTag,
}

/// Random-resized-crop law: area fraction uniform in `scale`, aspect ratio
/// log-uniform in `ratio`, sides clipped to the image, optional mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSampler {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl Default for CropSampler {
    fn default() -> Self {
        Self {
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

impl CropSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R, width: usize, height: usize) -> CropDescriptor {
        let area = rng.gen_range(self.scale.0..=self.scale.1);
        let log_r = rng.gen_range(self.ratio.0.ln()..=self.ratio.1.ln());
        let aspect = log_r.exp();
        // ratio is in pixels; convert to fractions of each side
        let img_aspect = width as f64 / height as f64;
        let w = ((area * aspect / img_aspect).sqrt()).min(1.0) as f32;
        let h = ((area * img_aspect / aspect).sqrt()).min(1.0) as f32;
        let x = fit_origin(rng.gen_range(0.0..=1.0) * (1.0 - w as f64), w);
        let y = fit_origin(rng.gen_range(0.0..=1.0) * (1.0 - h as f64), h);
        let augment_tag = if rng.gen_bool(self.flip_prob) {
            AugmentTag::HFlip
        } else {
            AugmentTag::None
        };
        CropDescriptor {
            crop_box: CropBox { x, y, w, h },
            augment_tag,
        }
    }
}

/// Rounds an origin to f32 and nudges it down until `origin + side <= 1`
/// holds exactly.
fn fit_origin(origin: f64, side: f32) -> f32 {
    let mut o = (origin as f32).max(0.0);
    while o > 0.0 && o as f64 + side as f64 > 1.0 {
        o = f32::from_bits(o.to_bits() - 1);
    }
    o
}

/// The `m` crops of one image, reproducible from `(seed, image_id)`.
pub fn sample_crops(image: &SyntheticImage, m: usize, seed: u64) -> Vec<CropDescriptor> {
    sample_crops_with(&CropSampler::default(), image, m, seed)
}

pub fn sample_crops_with(
    sampler: &CropSampler,
    image: &SyntheticImage,
    m: usize,
    seed: u64,
) -> Vec<CropDescriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image.image_id));
    (0..m)
        .map(|_| sampler.sample(&mut rng, image.width, image.height))
        .collect()
}
