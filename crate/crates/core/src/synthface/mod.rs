//! The synthetic ground-truth face world: a procedural renderer with exact
//! identity/age control, dataset construction for same-age training and
//! cross-age testing, and the trained evaluation oracles.

pub mod dataset;
pub mod oracle;
pub mod render;

pub use dataset::{build_dataset, DatasetSpec, ManifestRecord, RunManifest, Split};
pub use oracle::{
    age_oracle, identity_oracle, train_oracles, OracleParams, OracleReport, OracleTrainConfig,
};
pub use render::{render_face, FaceNuisance, FaceSpec, Render, IDENTITY_FACTORS};
