use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::bpe::{Vocabulary, MASK_ID, NUM_SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub corrupted: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
    /// What happened at each target position, aligned with `target_positions`.
    pub actions: Vec<MaskAction>,
}

/// BERT-style corruption. Each non-special position is selected with
/// `mask_prob`; a selected position becomes `[MASK]` with probability
/// `mask_token_frac`, a uniformly drawn non-special token with probability
/// `random_token_frac`, and is left unchanged otherwise. Targets hold the
/// original ids.
pub fn apply_mlm_masking<R: Rng + ?Sized>(
    token_ids: &[u32],
    vocab_size: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> MaskedSequence {
    let mut out = MaskedSequence {
        corrupted: token_ids.to_vec(),
        target_positions: Vec::new(),
        target_ids: Vec::new(),
        actions: Vec::new(),
    };
    for (pos, &id) in token_ids.iter().enumerate() {
        if Vocabulary::is_special_id(id) || rng.gen::<f64>() >= cfg.mask_prob {
            continue;
        }
        let u: f64 = rng.gen();
        let action = if u < cfg.mask_token_frac {
            out.corrupted[pos] = MASK_ID;
            MaskAction::Mask
        } else if u < cfg.mask_token_frac + cfg.random_token_frac && vocab_size > NUM_SPECIALS {
            out.corrupted[pos] = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        out.target_positions.push(pos);
        out.target_ids.push(id);
        out.actions.push(action);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{CLS_ID, SEP_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mask_prob: f64, mask_token_frac: f64, random_token_frac: f64) -> TrainConfig {
        TrainConfig {
            mask_prob,
            mask_token_frac,
            random_token_frac,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = vec![CLS_ID, 7, 8, 9, SEP_ID];
        let m = apply_mlm_masking(&ids, 20, &cfg(0.0, 0.8, 0.1), &mut rng);
        assert_eq!(m.corrupted, ids);
        assert!(m.target_positions.is_empty());
    }

    #[test]
    fn full_rate_masks_every_regular_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = vec![CLS_ID, 7, 8, 9, SEP_ID];
        let m = apply_mlm_masking(&ids, 20, &cfg(1.0, 1.0, 0.0), &mut rng);
        assert_eq!(m.corrupted, vec![CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]);
        assert_eq!(m.target_positions, vec![1, 2, 3]);
        assert_eq!(m.target_ids, vec![7, 8, 9]);
    }

    #[test]
    fn specials_only_sequence_has_no_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_mlm_masking(&[CLS_ID, SEP_ID, 0, 0], 20, &cfg(1.0, 0.8, 0.1), &mut rng);
        assert!(m.target_ids.is_empty());
    }

    #[test]
    fn random_replacements_are_regular_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<u32> = (5..25).collect();
        for _ in 0..200 {
            let m = apply_mlm_masking(&ids, 25, &cfg(1.0, 0.0, 1.0), &mut rng);
            assert!(m.corrupted.iter().all(|&c| (5..25).contains(&c)));
        }
    }
}
