//! Synthetic paired vision/tactile corpus with instruction-answer rows.

mod corpus;
pub mod labels;
pub mod render;
pub mod templates;

pub use corpus::{
    content_hash, kshot_sample, latent_of, sample_specs, validate, Corpus, CorpusConfig,
    LatentObject, Manifest, SampleRecord, Split, ValidationReport, Violation, FINE_DEFECTS,
};
pub use labels::{project_label, DefectTaxonomy, Granularity, Hardness, Material, Roughness};
pub use templates::Task;
