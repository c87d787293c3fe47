pub mod clip;
pub mod io;
pub mod synth;

pub use clip::{build_training_clip, crop_region, sample_video_clip, ClipIndices, CropMapping, Jitter, SearchAnchor, TrainingClip};
pub use synth::{generate_sequence, Motion, SequenceFrame, SequenceSpec, SuiteSpec, SyntheticSequence};
