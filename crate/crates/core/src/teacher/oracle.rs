use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::crops::CropDescriptor;
use super::dataset::{derive_seed, signal_basis, DatasetSpec, SyntheticImage, MAX_CLASSES, PATCH_DIM};
use crate::error::{Error, Result};
use crate::numerics::{cosine_raw, dot, l2_normalize, norm, softmax, Distribution, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Embedding width; the teacher's capacity knob.
    pub embed_dim: usize,
    pub tau: f64,
    /// Repeats the embedding computation to emulate a more expensive teacher.
    pub cost_multiplier: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            tau: 0.07,
            cost_multiplier: 1,
        }
    }
}

/// Rows orthonormalized in order; rows that collapse are redrawn.
fn orthonormal_rows(seed_rows: Vec<Vec<f64>>, total: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut pending = seed_rows.into_iter();
    while out.len() < total {
        let mut v = pending
            .next()
            .unwrap_or_else(|| (0..dim).map(|_| rng.sample(StandardNormal)).collect());
        for _ in 0..2 {
            for q in &out {
                let d = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

/// Frozen stand-in for a large pretrained dual encoder: a linear map from
/// crop patches to a unit embedding, and one prototype per class.
///
/// The projection's row space contains the background (DC) direction and
/// every pattern direction isometrically; the remaining rows are random.
#[derive(Debug, Clone)]
pub struct TeacherOracle {
    config: TeacherConfig,
    projection: Arc<Matrix>,
    prototypes: Vec<Vec<f64>>,
    class_ids: Vec<usize>,
    frozen_seed: u64,
}

impl TeacherOracle {
    pub fn new(spec: &DatasetSpec, config: TeacherConfig) -> Result<Self> {
        spec.validate()?;
        let signal = signal_basis();
        if config.embed_dim < signal.len() || config.embed_dim > PATCH_DIM {
            return Err(Error::config(format!(
                "teacher embedding width must lie in [{}, {PATCH_DIM}], got {}",
                signal.len(),
                config.embed_dim
            )));
        }
        if !(config.tau > 0.0) {
            return Err(Error::config("teacher temperature must be positive"));
        }
        if config.cost_multiplier == 0 {
            return Err(Error::config("teacher cost multiplier must be at least 1"));
        }
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.pattern_seed, 0x7EAC_4E52 + d as u64));
        let basis = orthonormal_rows(signal, d, PATCH_DIM, &mut rng);
        let mix = orthonormal_rows(Vec::new(), d, d, &mut rng);
        let basis = Matrix::from_rows(&basis)?;
        let projection = Matrix::from_rows(&mix)?.matmul(&basis)?;

        let universe = spec.universe();
        let class_ids = spec.class_ids();
        let prototypes = class_ids
            .iter()
            .map(|&g| l2_normalize(&projection.matvec(&universe.pattern_patch(g))).value)
            .collect();
        debug_assert!(class_ids.iter().all(|&g| g < MAX_CLASSES));
        Ok(Self {
            config,
            projection: Arc::new(projection),
            prototypes,
            class_ids,
            frozen_seed: spec.pattern_seed,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn with_cost_multiplier(mut self, multiplier: usize) -> Self {
        self.config.cost_multiplier = multiplier.max(1);
        self
    }

    pub fn projection(&self) -> &Arc<Matrix> {
        &self.projection
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Seed shared by every frozen component derived from this teacher.
    pub fn frozen_seed(&self) -> u64 {
        self.frozen_seed
    }

    /// Orthonormal embedding-space images of the background and pattern
    /// directions.
    pub fn signal_directions(&self) -> Vec<Vec<f64>> {
        signal_basis().iter().map(|s| self.projection.matvec(s)).collect()
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    /// Unit embedding of a patch.
    pub fn embed(&self, patch: &[f64]) -> Vec<f64> {
        let mut raw = self.projection.matvec(patch);
        for _ in 1..self.config.cost_multiplier {
            raw = std::hint::black_box(self.projection.matvec(std::hint::black_box(patch)));
        }
        l2_normalize(&raw).value
    }

    /// Teacher distribution over the dataset's classes for a patch.
    pub fn predict_patch(&self, patch: &[f64]) -> Distribution {
        let e = self.embed(patch);
        let logits: Vec<f64> = self.prototypes.iter().map(|p| cosine_raw(&e, p).value).collect();
        softmax(&logits, self.config.tau).expect("finite logits and positive temperature")
    }

    pub fn teacher_predict(&self, image: &SyntheticImage, crop: &CropDescriptor) -> Result<Distribution> {
        let patch = image.extract_patch(&crop.crop_box, crop.augment_tag)?;
        Ok(self.predict_patch(&patch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::entropy;
    use crate::ril::{info_weight, AugmentTag, CropBox};
    use crate::teacher::crops::sample_crops;

    #[test]
    fn projection_preserves_signal_geometry() {
        let spec = DatasetSpec::default();
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        for (i, a) in t.prototypes().iter().enumerate() {
            for (j, b) in t.prototypes().iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clean_pattern_crop_predicts_planted_class() {
        let spec = DatasetSpec {
            noise_level: 0.0,
            ..DatasetSpec::default()
        };
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        for img in spec.generate().unwrap().images.iter().take(16) {
            let d = CropDescriptor {
                crop_box: img.pattern_box,
                augment_tag: AugmentTag::None,
            };
            assert_eq!(t.teacher_predict(img, &d).unwrap().argmax(), img.planted_class);
        }
    }

    #[test]
    fn prediction_is_deterministic_and_flip_invariant_on_symmetric_content() {
        let spec = DatasetSpec {
            noise_level: 0.0,
            pattern_box: (0.5, 0.5),
            ..DatasetSpec::default()
        };
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        let img = &spec.generate().unwrap().images[2];
        let plain = CropDescriptor { crop_box: img.pattern_box, augment_tag: AugmentTag::None };
        let flipped = CropDescriptor { augment_tag: AugmentTag::HFlip, ..plain };
        let a = t.teacher_predict(img, &plain).unwrap();
        assert_eq!(a, t.teacher_predict(img, &plain).unwrap());
        assert_eq!(a, t.teacher_predict(img, &flipped).unwrap());
    }

    #[test]
    fn background_crops_are_near_uniform() {
        let spec = DatasetSpec::default();
        let t = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        let ds = spec.generate().unwrap();
        let mut total = 0.0;
        let mut n = 0;
        'outer: for img in &ds.images {
            for d in sample_crops(img, 200, 4) {
                if d.crop_box.intersection(&img.pattern_box) == 0.0 {
                    total += entropy(&t.teacher_predict(img, &d).unwrap());
                    n += 1;
                    if n == 100 {
                        break 'outer;
                    }
                }
            }
        }
        assert_eq!(n, 100);
        assert!(total / n as f64 >= 0.8 * 8f64.ln(), "mean entropy {}", total / n as f64);
    }

    #[test]
    fn capacity_knob_keeps_invariants() {
        let spec = DatasetSpec::default();
        let img = &spec.generate().unwrap().images[0];
        for dim in [16, 32, 64, 128, 256] {
            let t = TeacherOracle::new(&spec, TeacherConfig { embed_dim: dim, ..Default::default() }).unwrap();
            let d = CropDescriptor { crop_box: img.pattern_box, augment_tag: AugmentTag::None };
            let p = t.teacher_predict(img, &d).unwrap();
            assert!(Distribution::new(p.probs().to_vec()).is_ok());
            assert!(info_weight(&p) > 0.5, "dim {dim}");
        }
        assert!(TeacherOracle::new(&spec, TeacherConfig { embed_dim: 8, ..Default::default() }).is_err());
    }

    #[test]
    fn cost_multiplier_does_not_change_output() {
        let spec = DatasetSpec::default();
        let img = &spec.generate().unwrap().images[1];
        let d = CropDescriptor { crop_box: CropBox { x: 0.1, y: 0.2, w: 0.5, h: 0.6 }, augment_tag: AugmentTag::HFlip };
        let a = TeacherOracle::new(&spec, TeacherConfig::default()).unwrap();
        let b = a.clone().with_cost_multiplier(7);
        assert_eq!(a.teacher_predict(img, &d).unwrap(), b.teacher_predict(img, &d).unwrap());
    }
}
