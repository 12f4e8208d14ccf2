use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    apply_mlm_masking, evaluate_loss, loss_and_gradients, optimizer_step, with_cls_sep, AdamState,
    EncoderInput, LossBreakdown, MlmBatch, ModelCheckpoint, ModelError, TrainConfig,
    TransformerConfig,
};
use crate::bpe::{segment_ids, basic_tokenize, TokenizerConfig, Vocabulary, CLS_ID, SEP_ID, UNK_ID};

// RNG streams derived from the run seed.
const DATA_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

const MAX_REMASK_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Trained from scratch.
    Random,
    /// Transplanted, new tokens initialized from their decomposition mean.
    TransplantMean,
    /// Transplanted, new tokens drawn at random.
    TransplantRandomNew,
    /// Continued from an existing checkpoint.
    Checkpoint,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::TransplantMean => "transplant_mean",
            InitMode::TransplantRandomNew => "transplant_random_new",
            InitMode::Checkpoint => "checkpoint",
        }
    }
}

/// Tokenized documents, one per non-empty corpus line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingCorpus {
    docs: Vec<Vec<u32>>,
}

impl TrainingCorpus {
    pub fn from_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary, tokenizer: &TokenizerConfig) -> Self {
        let docs = lines
            .iter()
            .map(|line| {
                let mut ids = Vec::new();
                for word in basic_tokenize(line.as_ref(), tokenizer) {
                    match segment_ids(&word, vocab, tokenizer.max_word_chars, false) {
                        Some(pieces) => ids.extend(pieces),
                        None => ids.push(UNK_ID),
                    }
                }
                ids
            })
            .filter(|ids| !ids.is_empty())
            .collect();
        Self { docs }
    }

    pub fn from_token_ids(docs: Vec<Vec<u32>>) -> Self {
        Self {
            docs: docs.into_iter().filter(|d| !d.is_empty()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Vec<u32>] {
        &self.docs
    }
}

/// Seeded batch stream: shuffled epochs over the corpus, then masking.
pub struct BatchSampler<'a> {
    corpus: &'a TrainingCorpus,
    order: Vec<usize>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a TrainingCorpus, seed: u64) -> Result<Self, ModelError> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        Ok(Self {
            corpus,
            order: Vec::new(),
            cursor: 0,
            data_rng: stream(seed, DATA_STREAM),
            mask_rng: stream(seed, MASK_STREAM),
        })
    }

    fn next_doc(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.corpus.len()).collect();
            self.order.shuffle(&mut self.data_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self, model: &TransformerConfig, cfg: &TrainConfig) -> Result<MlmBatch, ModelError> {
        if model.enable_nsp {
            self.next_pair_batch(model, cfg)
        } else {
            self.next_single_batch(model, cfg)
        }
    }

    fn next_single_batch(&mut self, model: &TransformerConfig, cfg: &TrainConfig) -> Result<MlmBatch, ModelError> {
        let limit = model.max_seq_len.saturating_sub(2).max(1);
        let seqs: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let doc = &self.corpus.docs[self.next_doc()];
                with_cls_sep(&doc[..doc.len().min(limit)])
            })
            .collect();
        let segments: Vec<Vec<u8>> = seqs.iter().map(|s| vec![0; s.len()]).collect();
        self.mask(seqs, segments, None, model, cfg)
    }

    fn next_pair_batch(&mut self, model: &TransformerConfig, cfg: &TrainConfig) -> Result<MlmBatch, ModelError> {
        let budget = model.max_seq_len.saturating_sub(3).max(2);
        let n_docs = self.corpus.len();
        let mut seqs = Vec::with_capacity(cfg.batch_size);
        let mut segments = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let a_idx = self.next_doc();
            let (b_idx, label) = if self.data_rng.gen::<bool>() {
                ((a_idx + 1) % n_docs, 0u8)
            } else {
                (self.data_rng.gen_range(0..n_docs), 1u8)
            };
            let mut a: &[u32] = &self.corpus.docs[a_idx];
            let mut b: &[u32] = &self.corpus.docs[b_idx];
            while a.len() + b.len() > budget {
                if a.len() >= b.len() {
                    a = &a[..a.len() - 1];
                } else {
                    b = &b[..b.len() - 1];
                }
            }
            let mut seq = Vec::with_capacity(a.len() + b.len() + 3);
            seq.push(CLS_ID);
            seq.extend_from_slice(a);
            seq.push(SEP_ID);
            let first = seq.len();
            seq.extend_from_slice(b);
            seq.push(SEP_ID);
            let mut seg = vec![0u8; seq.len()];
            seg[first..].fill(1);
            seqs.push(seq);
            segments.push(seg);
            labels.push(label);
        }
        self.mask(seqs, segments, Some(labels), model, cfg)
    }

    fn mask(
        &mut self,
        seqs: Vec<Vec<u32>>,
        segments: Vec<Vec<u8>>,
        nsp_labels: Option<Vec<u8>>,
        model: &TransformerConfig,
        cfg: &TrainConfig,
    ) -> Result<MlmBatch, ModelError> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        for _ in 0..MAX_REMASK_ATTEMPTS {
            let mut corrupted = Vec::with_capacity(seqs.len());
            let mut target_positions = Vec::new();
            let mut target_ids = Vec::new();
            for (b, seq) in seqs.iter().enumerate() {
                let m = apply_mlm_masking(seq, model.vocab_size, cfg, &mut self.mask_rng);
                target_positions.extend(m.target_positions.iter().map(|p| b * seq_len + p));
                target_ids.extend(m.target_ids);
                corrupted.push(m.corrupted);
            }
            if target_ids.is_empty() && cfg.mask_prob > 0.0 {
                continue;
            }
            let mut input = EncoderInput::from_sequences(&corrupted);
            for (b, seg) in segments.iter().enumerate() {
                input.segment_ids[b * seq_len..b * seq_len + seg.len()].copy_from_slice(seg);
            }
            return Ok(MlmBatch {
                input,
                target_positions,
                target_ids,
                nsp_labels: nsp_labels.clone(),
            });
        }
        Err(ModelError::EmptyTargets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMetadata {
    pub init_mode: Option<InitMode>,
    pub seed: u64,
    pub config_hash: String,
    /// Dropout-free loss of the initial parameters on the first batch.
    pub initial_loss: f64,
}

/// Training losses recorded every `checkpoint_every` steps. Each point is
/// the mean of the per-step losses since the previous point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub metadata: CurveMetadata,
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,mlm_loss,nsp_loss\n");
        for p in &self.points {
            let nsp = p.nsp_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.mlm_loss, nsp));
        }
        out
    }

    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(&self.metadata).expect("serializable metadata") + "\n"
    }

    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.points.iter().find(|p| p.step == step).map(|p| p.loss)
    }
}

/// Hex SHA-256 over the JSON encoding of both configs.
pub fn config_hash(model: &TransformerConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("serializable configs");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Trains from `init` on `corpus`. Data order, masking and dropout each
/// draw from their own stream of `cfg.seed`, so two runs with the same
/// seed see identical batches whatever the initialization.
pub fn train(
    init: &ModelCheckpoint,
    corpus: &TrainingCorpus,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, LossCurve), ModelError> {
    cfg.validate()?;
    let model_cfg = &init.config;
    let mut sampler = BatchSampler::new(corpus, cfg.seed)?;
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);

    let first = sampler.next_batch(model_cfg, cfg)?;
    let initial = evaluate_loss(&init.params, model_cfg, &first)?;
    let mut curve = LossCurve {
        metadata: CurveMetadata {
            init_mode: None,
            seed: cfg.seed,
            config_hash: config_hash(model_cfg, cfg),
            initial_loss: initial.total,
        },
        points: Vec::new(),
    };
    let mut ckpt = init.clone();
    if cfg.num_steps == 0 {
        return Ok((ckpt, curve));
    }

    let mut state = AdamState::new(&ckpt.params);
    let mut pending = Some(first);
    let mut window = (0.0, 0.0, 0.0, 0usize);
    for step in 1..=cfg.num_steps {
        let batch = match pending.take() {
            Some(b) => b,
            None => sampler.next_batch(model_cfg, cfg)?,
        };
        let (loss, grads): (LossBreakdown, _) =
            loss_and_gradients(&ckpt.params, model_cfg, &batch, Some(&mut dropout_rng))?;
        if !loss.total.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        optimizer_step(&mut state, &mut ckpt.params, &grads, cfg)?;
        window.0 += loss.total;
        window.1 += loss.mlm;
        window.2 += loss.nsp.unwrap_or(0.0);
        window.3 += 1;
        if step % cfg.checkpoint_every == 0 || step == cfg.num_steps {
            let n = window.3 as f64;
            curve.points.push(CurvePoint {
                step,
                loss: window.0 / n,
                mlm_loss: window.1 / n,
                nsp_loss: loss.nsp.map(|_| window.2 / n),
            });
            window = (0.0, 0.0, 0.0, 0);
        }
    }
    ckpt.params.check_finite()?;
    Ok((ckpt, curve))
}
