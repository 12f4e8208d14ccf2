//! Desk-scale transformer encoder with masked-language-model training.

mod config;
mod masking;
mod model;
mod optim;
mod params;
pub mod experiment;
pub mod synthetic;
mod train;

pub use config::{TrainConfig, TransformerConfig, NUM_SEGMENTS};
pub use masking::{apply_mlm_masking, MaskAction, MaskedSequence};
pub use model::{
    evaluate_loss, forward, loss_and_gradients, with_cls_sep, EncoderInput, ForwardOutput,
    LossBreakdown, MlmBatch,
};
pub use optim::{adam_update, optimizer_step, AdamHyper, AdamState};
pub use params::{
    init_random, truncated_normal, LayerParams, NamedTensor, NamedTensorMut, NspHead, Params,
    Scalar, INIT_STDDEV,
};
pub use train::{
    config_hash, train, BatchSampler, CurveMetadata, CurvePoint, InitMode, LossCurve,
    TrainingCorpus,
};

use crate::bpe::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty MLM target")]
    EmptyTargets,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training corpus has no tokenizable documents")]
    EmptyCorpus,
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
}

/// Config, vocabulary and parameters of one encoder. The MLM output layer
/// is tied to `params.token_embeddings`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TransformerConfig,
    pub vocab: Vocabulary,
    pub params: Params<f32>,
}

impl ModelCheckpoint {
    pub fn new(config: TransformerConfig, vocab: Vocabulary, params: Params<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(ModelError::InvalidConfig(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        if config.enable_nsp && params.nsp.is_none() {
            return Err(ModelError::InvalidConfig("enable_nsp set but no NSP head".into()));
        }
        params.check_shapes(&config)?;
        params.check_finite()?;
        Ok(Self { config, vocab, params })
    }

    /// Random initialization for `vocab` with the given shape.
    pub fn random(mut config: TransformerConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        let params = init_random(&config, seed)?;
        Self::new(config, vocab, params)
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<ForwardOutput<f32>, ModelError> {
        forward(&self.params, &self.config, input)
    }
}
