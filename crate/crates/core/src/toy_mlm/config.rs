use serde::{Deserialize, Serialize};

use super::ModelError;

/// Encoder shape. `vocab_size` follows the attached vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_prob: f64,
    pub enable_nsp: bool,
}

/// Segment (token type) embedding rows: sentence A and sentence B.
pub const NUM_SEGMENTS: usize = 2;

impl TransformerConfig {
    /// BERT-base shape: 12 layers, hidden 768, feed-forward 3072, 12 heads.
    /// Kept for reference; far too large to train here.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            ff_size: 3072,
            num_heads: 12,
            max_seq_len: 512,
            vocab_size,
            dropout_prob: 0.1,
            enable_nsp: true,
        }
    }

    /// Desk-scale shape used by tests and experiments.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            ff_size: 256,
            num_heads: 4,
            max_seq_len: 64,
            vocab_size,
            dropout_prob: 0.1,
            enable_nsp: false,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "bert-base" => Some(Self::bert_base(vocab_size)),
            "desk" => Some(Self::desk(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ff_size", self.ff_size),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.ff_size < self.hidden_size {
            return Err(ModelError::InvalidConfig("ff_size must be >= hidden_size".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(ModelError::InvalidConfig("dropout_prob must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay on weight matrices.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub num_steps: usize,
    pub mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
    pub seed: u64,
    /// Loss is recorded every this many steps.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 2e-5,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-6,
            num_steps: 1000,
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overrides: batch 32, learning rate 1e-3.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_prob) && self.mask_prob != 1.0 {
            return bad("mask_prob must be in [0, 1]");
        }
        if self.mask_token_frac < 0.0
            || self.random_token_frac < 0.0
            || self.mask_token_frac + self.random_token_frac > 1.0 + 1e-12
        {
            return bad("mask_token_frac + random_token_frac must be in [0, 1]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let b = TransformerConfig::bert_base(119_547);
        assert_eq!((b.num_layers, b.hidden_size, b.ff_size, b.num_heads), (12, 768, 3072, 12));
        b.validate().unwrap();
        let d = TransformerConfig::desk(300);
        assert_eq!((d.num_layers, d.hidden_size, d.ff_size, d.num_heads, d.max_seq_len), (2, 64, 256, 4, 64));
        assert_eq!(d.head_dim(), 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = TransformerConfig::desk(10);
        c.num_heads = 5;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.ff_size = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.batch_size, 256);
        assert_eq!(t.learning_rate, 2e-5);
        assert_eq!(t.weight_decay, 1e-2);
        assert_eq!((t.adam_beta1, t.adam_beta2, t.adam_epsilon), (0.9, 0.999, 1e-6));
        let d = TrainConfig::desk();
        assert_eq!((d.batch_size, d.learning_rate), (32, 1e-3));
        let mut bad = d.clone();
        bad.mask_token_frac = 0.95;
        assert!(bad.validate().is_err());
    }
}
