//! Dataset ingestion, procedural masks, contrastive views and synthetic faces.

pub mod dataset;
pub mod mask;
pub mod synthetic;
pub mod uv;

pub use dataset::{
    load_dataset, make_contrastive_pair, make_contrastive_pair_with, ContrastivePair, Dataset, FaceRecord,
    MaskPolicy, MaskedSample,
};
pub use mask::{synthesize_mask, MaskKind, MaskSpec};
pub use synthetic::{generate_synthetic_face, render_face, FaceParams};
pub use uv::UvField;
