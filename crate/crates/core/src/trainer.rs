//! Few-shot prompt training from cached (or recomputed) region labels, and
//! the base-to-novel and cross-dataset evaluation protocols.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{loss_total, BatchItem, LossConfig};
use crate::numerics::{argmax, cosine_raw, kl_raw, softmax_raw};
use crate::ril::{info_weight, AugmentTag, LabelMode, RilHeader, RilRecord, RilTable};
use crate::student::{PromptKind, StudentState};
use crate::teacher::{
    crop_plan, derive_seed, header_for, sample_crops, CropDescriptor, Dataset, DatasetSpec, SyntheticImage,
    TeacherOracle,
};

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
}

/// Partition of a dataset's classes into seen (base) and unseen (novel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl EvalSplit {
    /// The first `base` classes are seen, the rest unseen.
    pub fn leading(base: usize, class_count: usize) -> Self {
        Self {
            base: (0..base).collect(),
            novel: (base..class_count).collect(),
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.base.is_empty() || self.novel.is_empty() {
            return Err(Error::config("split needs at least one base and one novel class"));
        }
        let all: BTreeSet<usize> = self.base.iter().chain(&self.novel).copied().collect();
        if all.len() != self.base.len() + self.novel.len() {
            return Err(Error::config("split assigns a class to both sides"));
        }
        if all != (0..class_count).collect() {
            return Err(Error::config(format!(
                "split must assign each of the {class_count} classes exactly once"
            )));
        }
        Ok(())
    }
}

fn parse_class_list(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad class id {t:?} in split")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(Error::config(format!("empty class range {part:?}")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(out)
}

/// Parses `"0-5/6-7"` or `"0,2,4/1,3"`.
impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, novel) = s
            .split_once('/')
            .ok_or_else(|| Error::config(format!("split {s:?} must look like \"0-5/6-7\"")))?;
        Ok(Self {
            base: parse_class_list(base)?,
            novel: parse_class_list(novel)?,
        })
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(f, "{}/{}", list(&self.base), list(&self.novel))
    }
}

impl Serialize for EvalSplit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EvalSplit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub split: EvalSplit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            split: EvalSplit::leading(6, 8),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::config("train.shots must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum must lie in [0, 1)"));
        }
        self.loss.validate()?;
        self.split.validate(class_count)
    }
}

/// Exactly `shots` training-pool images of each base class, as indices
/// into `dataset.images`.
pub fn few_shot_sample(dataset: &Dataset, shots: usize, base: &[usize], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, img) in dataset.images.iter().enumerate() {
        by_class.entry(img.planted_class).or_default().push(i);
    }
    let deficient: Vec<String> = base
        .iter()
        .filter_map(|c| {
            let have = by_class.get(c).map_or(0, Vec::len);
            (have < shots).then(|| format!("class {c} has {have}"))
        })
        .collect();
    if !deficient.is_empty() {
        return Err(Error::config(format!(
            "need {shots} images per base class: {}",
            deficient.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5407));
    let mut out = Vec::with_capacity(shots * base.len());
    for c in base {
        let mut pool = by_class[c].clone();
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..shots]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Where training labels come from: a cached table, or the teacher itself.
pub trait LabelSource: Sync {
    fn header(&self) -> &RilHeader;
    fn record(&self, index: u64) -> Result<RilRecord>;
}

impl LabelSource for RilTable {
    fn header(&self) -> &RilHeader {
        RilTable::header(self)
    }

    fn record(&self, index: u64) -> Result<RilRecord> {
        self.read_record(index)
    }
}

/// Recomputes every requested record with the teacher, exactly as the
/// table builder would have.
pub struct OnlineTeacher<'a> {
    dataset: &'a Dataset,
    oracle: &'a TeacherOracle,
    plan: Vec<Vec<CropDescriptor>>,
    header: RilHeader,
    k: usize,
}

impl<'a> OnlineTeacher<'a> {
    pub fn new(
        dataset: &'a Dataset,
        oracle: &'a TeacherOracle,
        m: usize,
        k: usize,
        mode: LabelMode,
        seed: u64,
    ) -> Result<Self> {
        let header = header_for(dataset, m, k, mode)?;
        header.validate()?;
        Ok(Self {
            dataset,
            oracle,
            plan: crop_plan(dataset, m, seed),
            header,
            k,
        })
    }
}

impl LabelSource for OnlineTeacher<'_> {
    fn header(&self) -> &RilHeader {
        &self.header
    }

    fn record(&self, index: u64) -> Result<RilRecord> {
        let m = self.header.crops_per_image as u64;
        if index >= self.header.record_count {
            return Err(Error::Bounds {
                index,
                len: self.header.record_count,
            });
        }
        let img = &self.dataset.images[(index / m) as usize];
        let d = self.plan[(index / m) as usize][(index % m) as usize];
        let p = self.oracle.teacher_predict(img, &d)?;
        RilRecord::from_teacher(img.image_id, d.crop_box, d.augment_tag, &p, self.header.mode, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_diff1: f64,
    pub l_diff2: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    #[serde(rename = "L_pos")]
    pub l_pos: f64,
    #[serde(rename = "L_neg")]
    pub l_neg: f64,
    #[serde(rename = "L_diff1")]
    pub l_diff1: f64,
    #[serde(rename = "L_diff2")]
    pub l_diff2: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: StudentState,
    pub epochs: Vec<EpochTrace>,
    pub steps: Vec<StepTrace>,
    pub train_images: Vec<usize>,
}

fn check_source(dataset: &Dataset, labels: &dyn LabelSource, student: &StudentState) -> Result<()> {
    let h = labels.header();
    let c = dataset.class_count();
    if h.class_count as usize != c {
        return Err(Error::config(format!(
            "RIL table has {} classes, dataset has {c}",
            h.class_count
        )));
    }
    if h.crops_per_image == 0 || h.record_count != dataset.len() as u64 * h.crops_per_image as u64 {
        return Err(Error::config(format!(
            "RIL table holds {} records, dataset needs {} images × {} crops",
            h.record_count,
            dataset.len(),
            h.crops_per_image
        )));
    }
    if student.class_count() != c {
        return Err(Error::config(format!(
            "student knows {} classes, dataset has {c}",
            student.class_count()
        )));
    }
    Ok(())
}

fn batch_item(dataset: &Dataset, index: u64, m: u64, r: &RilRecord) -> Result<BatchItem> {
    let img = &dataset.images[(index / m) as usize];
    if img.image_id != r.image_id {
        return Err(Error::config(format!(
            "RIL record {index} belongs to image {}, dataset has image {} there",
            r.image_id, img.image_id
        )));
    }
    Ok(BatchItem {
        feature: img.extract_patch(&r.crop_box, r.augment_tag)?,
        target: r.soft_label().into_vec(),
        weight: r.info_weight as f64,
        pseudo_label: r.pseudo_label as usize,
    })
}

/// Seeded SGD with cosine annealing over the context vectors, on the crops
/// of a few-shot subset of base-class images.
pub fn train(
    mut state: StudentState,
    dataset: &Dataset,
    labels: &dyn LabelSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(dataset.class_count())?;
    check_source(dataset, labels, &state)?;
    let m = labels.header().crops_per_image as u64;
    let train_images = few_shot_sample(dataset, config.shots, &config.split.base, config.seed)?;
    let pool: Vec<u64> = train_images
        .iter()
        .flat_map(|&i| (i as u64 * m)..((i as u64 + 1) * m))
        .collect();
    let steps_per_epoch = pool.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut theta = state.params();
    let mut velocity = vec![0.0; theta.len()];
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order = pool.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xE90C_0000 + epoch as u64)));
        let mut sums = [0.0; 5];
        let epoch_lr = cosine_lr(step, total_steps, config.lr);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&idx| batch_item(dataset, idx, m, &labels.record(idx)?))
                .collect::<Result<_>>()?;
            let report = loss_total(&state, &batch, &config.loss)?;
            let lr = cosine_lr(step, total_steps, config.lr);
            for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&report.gradient) {
                *v = config.momentum * *v + g;
                *t -= lr * *v;
            }
            state.set_params(&theta)?;
            let parts = [report.l_pos, report.l_neg, report.l_diff1, report.l_diff2, report.l_total];
            sums.iter_mut().zip(parts).for_each(|(s, p)| *s += p);
            steps.push(StepTrace {
                epoch,
                step,
                lr,
                batch_size: batch.len(),
                l_pos: report.l_pos,
                l_neg: report.l_neg,
                l_diff1: report.l_diff1,
                l_diff2: report.l_diff2,
                l_total: report.l_total,
            });
            step += 1;
        }
        let n = steps_per_epoch as f64;
        epochs.push(EpochTrace {
            epoch,
            l_pos: sums[0] / n,
            l_neg: sums[1] / n,
            l_diff1: sums[2] / n,
            l_diff2: sums[3] / n,
            l_total: sums[4] / n,
            lr: epoch_lr,
            epoch_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        state,
        epochs,
        steps,
        train_images,
    })
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[EpochTrace]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in trace {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Random crops per held-out image screened for the rejection metric.
    pub crops_per_image: usize,
    /// Teacher information weight below which a crop counts as low-info.
    pub low_info_threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crops_per_image: 20,
            low_info_threshold: 0.3,
            seed: 0x00E7_A100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    /// Indexed by dataset class; base classes are scored among base
    /// classes and novel classes among novel classes.
    pub per_class_accuracy: Vec<f64>,
    pub rejection: f64,
    pub low_info_crops: usize,
    pub eval_images: usize,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// The object-box view of a held-out image.
fn object_view(img: &SyntheticImage) -> Result<Vec<f64>> {
    img.extract_patch(&img.pattern_box, AugmentTag::None)
}

/// Zero-shot argmax among `classes` of the positive text embeddings.
fn predict_among(image: &[f64], text: &[Vec<f64>], classes: &[usize]) -> usize {
    let sims: Vec<f64> = classes.iter().map(|&c| cosine_raw(image, &text[c]).value).collect();
    classes[argmax(&sims)]
}

/// Base-to-novel evaluation on held-out images, plus the rejection metric
/// over low-information random crops. Never touches a RIL table.
pub fn evaluate(
    student: &StudentState,
    teacher: &TeacherOracle,
    spec: &DatasetSpec,
    split: &EvalSplit,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let c = spec.class_count;
    split.validate(c)?;
    if student.class_count() != c || teacher.class_count() != c {
        return Err(Error::config("student, teacher and dataset disagree on the class count"));
    }
    let images = spec.generate_eval()?;
    let pos_text = student.text_embeddings(PromptKind::Positive);
    let neg_text = student.text_embeddings(PromptKind::Negative);
    let is_base: Vec<bool> = (0..c).map(|k| split.base.contains(&k)).collect();

    let results: Vec<(usize, bool, usize, usize)> = images
        .par_iter()
        .map(|img| -> Result<_> {
            let f = student.image_embedding(&object_view(img)?)?.value;
            let classes = if is_base[img.planted_class] { &split.base } else { &split.novel };
            let correct = predict_among(&f, &pos_text, classes) == img.planted_class;

            let (mut low, mut rejected) = (0, 0);
            for d in sample_crops(img, config.crops_per_image, config.seed) {
                let x = img.extract_patch(&d.crop_box, d.augment_tag)?;
                if info_weight(&teacher.predict_patch(&x)) >= config.low_info_threshold {
                    continue;
                }
                low += 1;
                let f = student.image_embedding(&x)?.value;
                let logits = |text: &[Vec<f64>]| text.iter().map(|t| cosine_raw(&f, t).value).collect::<Vec<_>>();
                let p = softmax_raw(&logits(&pos_text), student.tau);
                let p_bar = softmax_raw(&logits(&neg_text), student.tau);
                let u = vec![1.0 / c as f64; c];
                if kl_raw(&u, &p_bar) < kl_raw(&u, &p) {
                    rejected += 1;
                }
            }
            Ok((img.planted_class, correct, low, rejected))
        })
        .collect::<Result<_>>()?;

    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    let (mut low, mut rejected) = (0, 0);
    for (class, correct, l, r) in &results {
        totals[*class] += 1;
        hits[*class] += *correct as usize;
        low += l;
        rejected += r;
    }
    let per_class_accuracy: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let pooled = |classes: &[usize]| {
        let h: usize = classes.iter().map(|&k| hits[k]).sum();
        let t: usize = classes.iter().map(|&k| totals[k]).sum();
        if t == 0 { 0.0 } else { h as f64 / t as f64 }
    };
    let base_accuracy = pooled(&split.base);
    let novel_accuracy = pooled(&split.novel);
    Ok(EvalReport {
        base_accuracy,
        novel_accuracy,
        hm: harmonic_mean(base_accuracy, novel_accuracy),
        per_class_accuracy,
        rejection: if low == 0 { 0.0 } else { rejected as f64 / low as f64 },
        low_info_crops: low,
        eval_images: images.len(),
    })
}

/// Zero-shot accuracy on another generator's held-out images, restricted to
/// the classes it shares with the training base classes.
pub fn cross_eval(
    student: &StudentState,
    teacher: &TeacherOracle,
    train_spec: &DatasetSpec,
    split: &EvalSplit,
    foreign: &DatasetSpec,
) -> Result<f64> {
    split.validate(train_spec.class_count)?;
    if foreign.pattern_seed != train_spec.pattern_seed {
        return Err(Error::config("foreign dataset draws its patterns from a different universe"));
    }
    let global = teacher.class_ids();
    let shared: Vec<usize> = split
        .base
        .iter()
        .copied()
        .filter(|&k| foreign.class_ids().contains(&global[k]))
        .collect();
    if shared.is_empty() {
        return Err(Error::config("foreign dataset shares no classes with the training base classes"));
    }
    let text = student.text_embeddings(PromptKind::Positive);
    let images: Vec<SyntheticImage> = foreign
        .generate_eval()?
        .into_iter()
        .filter(|img| shared.iter().any(|&k| global[k] == img.global_class))
        .collect();
    let hits: Vec<bool> = images
        .par_iter()
        .map(|img| -> Result<bool> {
            let f = student.image_embedding(&object_view(img)?)?.value;
            let k = predict_among(&f, &text, &shared);
            Ok(global[k] == img.global_class)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
