//! Multi-task multimodal retrieval at desk scale: one text encoder shared
//! by text–image retrieval, short-to-long text retrieval and intent/slot
//! understanding, trained in three stages on a synthetic corpus.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lexicon;
pub mod losses;
pub mod nlu;
pub mod nn;
pub mod tensor;
pub mod train;

pub use corpus::{generate_corpus, CorpusConfig, CorpusManifest, CorpusRecord, Dataset, Split};
pub use encoders::{ModelConfig, ImageEncoder, TextEncoder};
pub use error::{Error, Result};
pub use eval::{run_ablation, AblationReport, Variant, DEFAULT_K};
pub use lexicon::Vocab;
pub use losses::LossWeights;
pub use nlu::{Fusion, NluModel};
pub use tensor::Mat;
pub use train::{load_checkpoint, save_checkpoint, Group, ModelBundle, OptimState, StageConfig, StageOutput};
