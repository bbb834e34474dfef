//! SCM data types, ancestral sampling, the synthetic dataset generator,
//! and the residual-independence direction diagnostic.

mod residual;
mod synth;
mod types;

pub use residual::{residual_direction, Direction, ResidualError, DEFAULT_DIRECTION_THRESHOLD};
pub use synth::{
    forward_generate, generate_skeleton_dataset, generate_synthetic_dataset,
    generate_synthetic_dialogue, sample_template, SkeletonSynthSpec, StructureTemplate,
    SyntheticDataset, SyntheticSpec, TemplateSpec,
};
pub use types::{CausalStrength, Dialogue, ScmError, SkeletonTag, Utterance};
