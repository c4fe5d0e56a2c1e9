pub mod autodiff;
pub mod gradcheck;
pub mod gradsuite;
pub mod jsonfmt;
pub mod seed;
pub mod synthdata;
pub mod encoders;
pub mod nn;
pub mod codebook;
pub mod pretext;
pub mod objectives;
pub mod infotheory;
pub mod train;

pub use autodiff::{AutodiffError, DiffValue, Matrix};
pub use codebook::{Codebook, CommitmentMode, Modality, UsageStats};
pub use encoders::{EncoderConfig, ImageGrid};
pub use infotheory::{InfoError, JointTable, TheoryReport};
pub use objectives::{LossTerms, LossWeights};
pub use synthdata::{Correspondence, Dataset, SceneConfig, SceneSample, SynthError};
pub use train::{Checkpoint, MetricsRow, Model, TermFlags, TrainConfig, TrainError};
