use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::crops::{sample_crops, CropDescriptor};
use super::dataset::Dataset;
use super::oracle::TeacherOracle;
use crate::error::{Error, Result};
use crate::ril::{LabelMode, RilHeader, RilRecord, TableWriter};

#[derive(Debug, Clone, Serialize)]
pub struct BuildSummary {
    pub record_count: u64,
    pub mean_info_weight: f64,
    pub file_bytes: u64,
    pub wall_seconds: f64,
    pub header: RilHeader,
}

/// Crop descriptors of every image, in table order (image-major).
pub fn crop_plan(dataset: &Dataset, m: usize, seed: u64) -> Vec<Vec<CropDescriptor>> {
    dataset
        .images
        .iter()
        .map(|img| sample_crops(img, m, seed))
        .collect()
}

pub(crate) fn header_for(dataset: &Dataset, m: usize, k: usize, mode: LabelMode) -> Result<RilHeader> {
    let c = dataset.class_count();
    let top_k = match mode {
        LabelMode::Full => c,
        LabelMode::Ms | LabelMode::Mr => k,
    };
    Ok(RilHeader {
        mode,
        class_count: c as u32,
        top_k: u16::try_from(top_k).map_err(|_| Error::config("top-k exceeds u16"))?,
        crops_per_image: u32::try_from(m).map_err(|_| Error::config("crop count exceeds u32"))?,
        record_count: (dataset.len() * m) as u64,
    })
}

/// Teacher pass over every crop. Output order is image-major, crop-minor,
/// regardless of evaluation order.
pub fn build_records(
    dataset: &Dataset,
    oracle: &TeacherOracle,
    m: usize,
    k: usize,
    mode: LabelMode,
    seed: u64,
) -> Result<Vec<RilRecord>> {
    if oracle.class_count() != dataset.class_count() {
        return Err(Error::config(format!(
            "teacher knows {} classes, dataset has {}",
            oracle.class_count(),
            dataset.class_count()
        )));
    }
    let plan = crop_plan(dataset, m, seed);
    let jobs: Vec<(usize, CropDescriptor)> = plan
        .iter()
        .enumerate()
        .flat_map(|(i, crops)| crops.iter().map(move |d| (i, *d)))
        .collect();
    jobs.par_iter()
        .map(|(i, d)| {
            let img = &dataset.images[*i];
            let p = oracle.teacher_predict(img, d)?;
            RilRecord::from_teacher(img.image_id, d.crop_box, d.augment_tag, &p, mode, k)
        })
        .collect()
}

/// Samples `m` crops per image, labels them with the teacher, sparsifies,
/// and writes the table to `dest` atomically.
pub fn build_ril(
    dataset: &Dataset,
    oracle: &TeacherOracle,
    m: usize,
    k: usize,
    mode: LabelMode,
    seed: u64,
    dest: impl AsRef<Path>,
) -> Result<BuildSummary> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if m == 0 {
        return Err(Error::config("need at least one crop per image"));
    }
    let header = header_for(dataset, m, k, mode)?;
    let writer = TableWriter::create(dest)?;
    let start = Instant::now();
    let records = build_records(dataset, oracle, m, k, mode, seed)?;
    let file_bytes = writer.write(&header, &records)?;
    let mean_info_weight =
        records.iter().map(|r| r.info_weight as f64).sum::<f64>() / records.len() as f64;
    Ok(BuildSummary {
        record_count: records.len() as u64,
        mean_info_weight,
        file_bytes,
        wall_seconds: start.elapsed().as_secs_f64(),
        header,
    })
}
