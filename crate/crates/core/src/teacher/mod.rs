//! Offline supervision: synthetic images, random region sampling, the frozen
//! teacher, and the pipeline that writes a RIL table.

mod build;
mod crops;
mod dataset;
mod oracle;

pub use build::{build_records, build_ril, crop_plan, BuildSummary};
pub(crate) use build::header_for;
pub use crops::{sample_crops, sample_crops_with, CropDescriptor, CropSampler};
pub use dataset::{
    derive_seed, Dataset, DatasetSpec, PatternUniverse, SyntheticImage, EVAL_ID_BASE, MAX_CLASSES,
    PATCH, PATCH_DIM,
};
pub use oracle::{TeacherConfig, TeacherOracle};

/// IoU with the pattern box above which a crop counts as pattern-centred.
pub const OVERLAP_HI: f64 = 0.6;
