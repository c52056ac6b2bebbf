//! Region Information Lookup: compressed teacher labels for cropped regions
//! and the on-disk table that stores them.

mod format;

pub use format::{record_size, write_table, RilHeader, RilTable, TableWriter, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy, Distribution};

/// How a teacher distribution is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Every class probability, sorted by descending probability.
    Full,
    /// Top-K kept verbatim; the remaining mass spread evenly over the rest.
    Ms,
    /// Top-K renormalized; everything else zero.
    Mr,
}

impl LabelMode {
    pub fn code(self) -> u8 {
        match self {
            LabelMode::Full => 0,
            LabelMode::Ms => 1,
            LabelMode::Mr => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LabelMode::Full),
            1 => Some(LabelMode::Ms),
            2 => Some(LabelMode::Mr),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Full => "full",
            LabelMode::Ms => "ms",
            LabelMode::Mr => "mr",
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(LabelMode::Full),
            "ms" => Ok(LabelMode::Ms),
            "mr" => Ok(LabelMode::Mr),
            other => Err(Error::config(format!(
                "unknown label mode {other:?} (expected full, ms or mr)"
            ))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A teacher distribution reduced to its most probable classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsifiedLabel {
    pub mode: LabelMode,
    pub class_count: usize,
    /// Descending probability, ties by ascending class id.
    pub top_indices: Vec<u32>,
    pub top_probs: Vec<f64>,
    /// Value of every non-top class (MS only; zero otherwise).
    pub tail_value: f64,
}

impl SparsifiedLabel {
    pub fn k(&self) -> usize {
        self.top_indices.len()
    }

    /// Rounds the payload to f32 precision, the resolution stored on disk.
    pub fn quantized(mut self) -> Self {
        for p in &mut self.top_probs {
            *p = *p as f32 as f64;
        }
        self.tail_value = self.tail_value as f32 as f64;
        self
    }
}

/// Class ids of the `k` largest entries: descending probability, ties by
/// ascending id.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check_k(p: &Distribution, k: usize) -> Result<()> {
    let c = p.class_count();
    if k == 0 || k >= c {
        return Err(Error::config(format!(
            "top-k must satisfy 1 <= k < C (k = {k}, C = {c}); use full mode to keep every class"
        )));
    }
    Ok(())
}

/// Marginal smoothing: keep the top-K probabilities and give each remaining
/// class an equal share of the leftover mass.
pub fn sparsify_ms(p: &Distribution, k: usize) -> Result<SparsifiedLabel> {
    check_k(p, k)?;
    let probs = p.probs();
    let top = top_k_indices(probs, k);
    let top_probs: Vec<f64> = top.iter().map(|&i| probs[i]).collect();
    let kept: f64 = top_probs.iter().sum();
    let tail_value = ((1.0 - kept) / (probs.len() - k) as f64).max(0.0);
    Ok(SparsifiedLabel {
        mode: LabelMode::Ms,
        class_count: probs.len(),
        top_indices: top.iter().map(|&i| i as u32).collect(),
        top_probs,
        tail_value,
    })
}

/// Marginal re-normalization: zero every non-top class and rescale the
/// top-K probabilities to sum to one.
pub fn sparsify_mr(p: &Distribution, k: usize) -> Result<SparsifiedLabel> {
    check_k(p, k)?;
    let probs = p.probs();
    let top = top_k_indices(probs, k);
    let kept: f64 = top.iter().map(|&i| probs[i]).sum();
    if !(kept > 0.0) {
        return Err(Error::InvalidInput(
            "top-k probability mass is zero; cannot renormalize".into(),
        ));
    }
    Ok(SparsifiedLabel {
        mode: LabelMode::Mr,
        class_count: probs.len(),
        top_indices: top.iter().map(|&i| i as u32).collect(),
        top_probs: top.iter().map(|&i| probs[i] / kept).collect(),
        tail_value: 0.0,
    })
}

/// Keeps every class, ordered as a top-C list.
pub fn sparsify_full(p: &Distribution) -> SparsifiedLabel {
    let probs = p.probs();
    let order = top_k_indices(probs, probs.len());
    SparsifiedLabel {
        mode: LabelMode::Full,
        class_count: probs.len(),
        top_indices: order.iter().map(|&i| i as u32).collect(),
        top_probs: order.iter().map(|&i| probs[i]).collect(),
        tail_value: 0.0,
    }
}

/// Dispatches on `mode`; `k` is ignored for [`LabelMode::Full`].
pub fn sparsify(p: &Distribution, mode: LabelMode, k: usize) -> Result<SparsifiedLabel> {
    match mode {
        LabelMode::Full => Ok(sparsify_full(p)),
        LabelMode::Ms => sparsify_ms(p, k),
        LabelMode::Mr => sparsify_mr(p, k),
    }
}

/// Rebuilds the full-length distribution a label encodes.
pub fn densify(label: &SparsifiedLabel) -> Distribution {
    let fill = match label.mode {
        LabelMode::Ms => label.tail_value,
        LabelMode::Full | LabelMode::Mr => 0.0,
    };
    let mut probs = vec![fill; label.class_count];
    for (&c, &v) in label.top_indices.iter().zip(&label.top_probs) {
        probs[c as usize] = v;
    }
    // f32 payloads drift from unit mass by a few ulps
    let sum: f64 = probs.iter().sum();
    if sum > 0.0 && sum != 1.0 {
        for v in &mut probs {
            *v = (*v / sum).min(1.0);
        }
    }
    Distribution::new(probs).expect("densified label is a distribution")
}

/// Information weight `1 − H(p) / log C`, clamped to `[0, 1]`.
/// A single-class distribution carries full information.
pub fn info_weight(p: &Distribution) -> f64 {
    let c = p.class_count();
    if c <= 1 {
        return 1.0;
    }
    (1.0 - entropy(p) / (c as f64).ln()).clamp(0.0, 1.0)
}

/// Crop rectangle as fractions of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn is_valid(&self) -> bool {
        let (x, y, w, h) = (self.x as f64, self.y as f64, self.w as f64, self.h as f64);
        x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0 && x + w <= 1.0 && y + h <= 1.0
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    /// Area of the intersection with `other`, as a fraction of the image.
    pub fn intersection(&self, other: &CropBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix as f64 * iy as f64
        }
    }

    pub fn iou(&self, other: &CropBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Augmentation applied to a crop. Codes 2–255 are reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentTag {
    None,
    HFlip,
}

impl AugmentTag {
    pub fn code(self) -> u8 {
        match self {
            AugmentTag::None => 0,
            AugmentTag::HFlip => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AugmentTag::None),
            1 => Some(AugmentTag::HFlip),
            _ => None,
        }
    }
}

/// One cached region: where it came from and what the teacher said about it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RilRecord {
    pub image_id: u64,
    pub crop_box: CropBox,
    pub augment_tag: AugmentTag,
    pub label: SparsifiedLabel,
    pub info_weight: f32,
    pub pseudo_label: u32,
}

impl RilRecord {
    /// Builds a record from the full teacher distribution. The weight and
    /// pseudo-label come from `teacher` before sparsification, and the label
    /// payload is rounded to storage precision.
    pub fn from_teacher(
        image_id: u64,
        crop_box: CropBox,
        augment_tag: AugmentTag,
        teacher: &Distribution,
        mode: LabelMode,
        k: usize,
    ) -> Result<Self> {
        Ok(Self {
            image_id,
            crop_box,
            augment_tag,
            label: sparsify(teacher, mode, k)?.quantized(),
            info_weight: info_weight(teacher) as f32,
            pseudo_label: teacher.argmax() as u32,
        })
    }

    pub fn soft_label(&self) -> Distribution {
        densify(&self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> Distribution {
        let w: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powi(3) + 1e-9).collect();
        Distribution::from_weights(w).unwrap()
    }

    #[test]
    fn ms_example() {
        let p = dist(&[0.5, 0.2, 0.15, 0.1, 0.05]);
        let l = sparsify_ms(&p, 2).unwrap();
        assert_eq!(l.top_indices, vec![0, 1]);
        assert_eq!(l.top_probs, vec![0.5, 0.2]);
        assert!((l.tail_value - 0.1).abs() < 1e-12);
        let d = densify(&l);
        for (a, b) in d.probs().iter().zip([0.5, 0.2, 0.1, 0.1, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ms_uniform_is_fixed_point() {
        let p = Distribution::uniform(4);
        let l = sparsify_ms(&p, 2).unwrap();
        assert_eq!(l.top_indices, vec![0, 1]);
        assert_eq!(l.tail_value, 0.25);
        assert_eq!(densify(&l).probs(), p.probs());
    }

    #[test]
    fn ms_with_one_excluded_class_keeps_its_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 2..=8 {
            for _ in 0..50 {
                let p = random_dist(&mut rng, c);
                let l = sparsify_ms(&p, c - 1).unwrap();
                let excluded = (0..c).find(|i| !l.top_indices.contains(&(*i as u32))).unwrap();
                assert!((l.tail_value - p.probs()[excluded]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mr_example() {
        let p = dist(&[0.5, 0.2, 0.15, 0.1, 0.05]);
        let d = densify(&sparsify_mr(&p, 2).unwrap());
        let expected = [5.0 / 7.0, 2.0 / 7.0, 0.0, 0.0, 0.0];
        for (a, b) in d.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mr_one_hot_unchanged() {
        let p = Distribution::one_hot(6, 4);
        for k in 1..6 {
            assert_eq!(densify(&sparsify_mr(&p, k).unwrap()).probs(), p.probs());
        }
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let p = Distribution::uniform(4);
        assert!(matches!(sparsify_ms(&p, 4), Err(Error::Config(_))));
        assert!(matches!(sparsify_mr(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn info_weight_examples() {
        assert!(info_weight(&Distribution::uniform(10)).abs() < 1e-6);
        assert!((info_weight(&Distribution::one_hot(10, 3)) - 1.0).abs() < 1e-6);
        let half = dist(&[0.5, 0.5, 0.0, 0.0]);
        assert!((info_weight(&half) - 0.5).abs() < 1e-5);
        assert_eq!(info_weight(&Distribution::one_hot(1, 0)), 1.0);
    }

    #[test]
    fn full_mode_round_trips() {
        let p = dist(&[0.1, 0.6, 0.3]);
        let l = sparsify_full(&p);
        assert_eq!(l.top_indices, vec![1, 2, 0]);
        assert_eq!(densify(&l).probs(), p.probs());
    }

    #[test]
    fn crop_box_geometry() {
        let a = CropBox { x: 0.0, y: 0.0, w: 0.5, h: 0.5 };
        let b = CropBox { x: 0.25, y: 0.25, w: 0.5, h: 0.5 };
        assert!((a.intersection(&b) - 0.0625).abs() < 1e-9);
        assert!((a.iou(&b) - 0.0625 / 0.4375).abs() < 1e-9);
        assert!(CropBox::FULL.is_valid());
        assert!(!CropBox { x: 0.6, y: 0.0, w: 0.5, h: 0.5 }.is_valid());
        assert!(!CropBox { x: 0.0, y: 0.0, w: 0.0, h: 0.5 }.is_valid());
    }

    fn dist_strategy(c: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, c)
            .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-6)
            .prop_map(|w| Distribution::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn mr_is_idempotent(p in dist_strategy(9), k in 1usize..9) {
            let once = sparsify_mr(&p, k).unwrap();
            let twice = sparsify_mr(&densify(&once), k).unwrap();
            prop_assert_eq!(&once.top_indices, &twice.top_indices);
            for (a, b) in once.top_probs.iter().zip(&twice.top_probs) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn info_weight_is_permutation_invariant(p in dist_strategy(7), rot in 0usize..7) {
            let mut q = p.probs().to_vec();
            q.rotate_left(rot);
            q.swap(0, 3);
            let q = Distribution::from_weights(q).unwrap();
            prop_assert!((info_weight(&p) - info_weight(&q)).abs() < 1e-12);
        }

        #[test]
        fn info_weight_drops_toward_uniform(p in dist_strategy(6)) {
            let u = 1.0 / 6.0;
            let base = info_weight(&p);
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let mixed: Vec<f64> = p.probs().iter().map(|x| lambda * x + (1.0 - lambda) * u).collect();
                let w = info_weight(&Distribution::from_weights(mixed).unwrap());
                prop_assert!(w <= base + 1e-12);
            }
        }

        #[test]
        fn densified_labels_keep_argmax(p in dist_strategy(12), k in 1usize..12) {
            let probs = p.probs();
            let top = p.argmax();
            let unique = probs.iter().filter(|&&x| x == probs[top]).count() == 1;
            for label in [sparsify_ms(&p, k).unwrap(), sparsify_mr(&p, k).unwrap()] {
                let d = densify(&label);
                prop_assert_eq!(d.argmax(), label.top_indices[0] as usize);
                if unique {
                    prop_assert_eq!(d.argmax(), top);
                }
            }
        }
    }
}
