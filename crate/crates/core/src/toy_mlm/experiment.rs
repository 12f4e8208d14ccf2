//! Warm-start versus cold-start comparison on a pair of corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, CurvePoint, InitMode, LossCurve, ModelCheckpoint, ModelError, TrainConfig, TrainingCorpus, TransformerConfig};
use crate::bpe::{build_vocab, count_word_frequencies_in, learn_bpe, BpeError, TokenizerConfig, Vocabulary, WordFreqTable};
use crate::vocab_transfer::{intersect_vocabularies, transplant_checkpoint, IntersectionStats, NewTokenInit, TransferError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Model shape; `vocab_size` is replaced by each learned vocabulary.
    pub model: TransformerConfig,
    pub pretrain: TrainConfig,
    /// Training on the target corpus; its seed is replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub vocab_size: usize,
    pub min_pair_frequency: u64,
    pub source_weight: f64,
    pub target_weight: f64,
    /// Loss level for the steps-to-threshold table. When unset, the
    /// highest of the per-init minima of the seed-averaged curves is used,
    /// which every init reaches.
    pub loss_threshold: Option<f64>,
    /// Seed for the pretrained model's initialization.
    pub init_seed: u64,
    pub tokenizer: TokenizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut model = TransformerConfig::desk(0);
        model.max_seq_len = 64;
        Self {
            model,
            pretrain: TrainConfig {
                num_steps: 2000,
                checkpoint_every: 100,
                ..TrainConfig::desk()
            },
            train: TrainConfig {
                num_steps: 2000,
                checkpoint_every: 100,
                ..TrainConfig::desk()
            },
            seeds: vec![1, 2, 3],
            vocab_size: 400,
            min_pair_frequency: 2,
            source_weight: 0.8,
            target_weight: 0.2,
            loss_threshold: None,
            init_seed: 0,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidConfig("at least one seed required".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(ExperimentError::InvalidConfig("duplicate seeds".into()));
        }
        if !(self.source_weight > 0.0 && self.target_weight > 0.0) {
            return Err(ExperimentError::InvalidConfig("corpus weights must be positive".into()));
        }
        if let Some(t) = self.loss_threshold {
            if !t.is_finite() {
                return Err(ExperimentError::InvalidConfig("loss_threshold must be finite".into()));
            }
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        let mut probe = self.model.clone();
        probe.vocab_size = probe.vocab_size.max(1);
        probe.validate()?;
        Ok(())
    }
}

/// One init mode's seed-averaged results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub init_mode: InitMode,
    pub mean_initial_loss: f64,
    pub mean_curve: Vec<CurvePoint>,
    pub steps_to_threshold: Option<usize>,
}

/// A recorded step where a transplanted run was worse than the random run
/// with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceFailure {
    pub seed: u64,
    pub step: usize,
    pub transplant_mean_loss: f64,
    pub random_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub joint_vocab_size: usize,
    pub target_vocab_size: usize,
    pub intersection: IntersectionStats,
    pub pretrain_final_loss: Option<f64>,
    pub threshold: Option<f64>,
    pub modes: Vec<ModeSummary>,
    /// steps(random) / steps(transplant_mean) on the averaged curves.
    pub steps_ratio: Option<f64>,
    /// Averaged transplant_mean curve at or below random at every point.
    pub mean_dominates_random: bool,
    /// Averaged transplant_mean at or below transplant_random_new at the last point.
    pub mean_beats_random_new_at_end: bool,
    pub dominance_failures: Vec<DominanceFailure>,
}

impl ExperimentReport {
    pub fn mode(&self, mode: InitMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.init_mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report") + "\n"
    }

    /// Seed-averaged loss curves overlaid on one chart.
    pub fn to_svg(&self) -> String {
        let series: Vec<(&str, Vec<(f64, f64)>)> = self
            .modes
            .iter()
            .map(|m| {
                let mut pts = vec![(0.0, m.mean_initial_loss)];
                pts.extend(m.mean_curve.iter().map(|p| (p.step as f64, p.loss)));
                (m.init_mode.as_str(), pts)
            })
            .collect();
        line_chart(&series, self.threshold)
    }
}

/// Everything a run produced, for callers that persist artifacts.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub joint_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub pretrained: ModelCheckpoint,
    pub pretrain_curve: LossCurve,
    /// Per-run curves in (mode, seed) order.
    pub runs: Vec<(InitMode, u64, LossCurve)>,
}

pub const MODES: [InitMode; 3] = [InitMode::Random, InitMode::TransplantMean, InitMode::TransplantRandomNew];

fn learn_vocab(freqs: &WordFreqTable, cfg: &ExperimentConfig) -> Result<Vocabulary, BpeError> {
    let merges = learn_bpe(freqs, cfg.vocab_size, cfg.min_pair_frequency)?;
    build_vocab(&merges, freqs, cfg.vocab_size)
}

/// Builds the joint and target-only vocabularies the experiment uses.
pub fn experiment_vocabularies<S: AsRef<str> + Sync>(
    source: &[S],
    target: &[S],
    cfg: &ExperimentConfig,
) -> Result<(Vocabulary, Vocabulary), ExperimentError> {
    let src = count_word_frequencies_in(source, &cfg.tokenizer);
    let tgt = count_word_frequencies_in(target, &cfg.tokenizer);
    let joint = WordFreqTable::mix(&[(&src, cfg.source_weight), (&tgt, cfg.target_weight)])?;
    Ok((learn_vocab(&joint, cfg)?, learn_vocab(&tgt, cfg)?))
}

fn average_curves(curves: &[&LossCurve]) -> Vec<CurvePoint> {
    let n = curves.len() as f64;
    let first = curves[0];
    first
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mean = |f: &dyn Fn(&CurvePoint) -> f64| curves.iter().map(|c| f(&c.points[i])).sum::<f64>() / n;
            CurvePoint {
                step: p.step,
                loss: mean(&|q| q.loss),
                mlm_loss: mean(&|q| q.mlm_loss),
                nsp_loss: p.nsp_loss.map(|_| mean(&|q| q.nsp_loss.unwrap_or(0.0))),
            }
        })
        .collect()
}

fn steps_to(curve: &[CurvePoint], threshold: f64) -> Option<usize> {
    curve.iter().find(|p| p.loss <= threshold).map(|p| p.step)
}

/// Pretrains on source+target with a joint vocabulary, moves the model to
/// a target-only vocabulary three ways, and trains each on the target
/// corpus for every seed.
pub fn run_transfer_experiment<S: AsRef<str> + Sync>(
    source: &[S],
    target: &[S],
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let (joint_vocab, target_vocab) = experiment_vocabularies(source, target, cfg)?;

    let mixed: Vec<&str> = source.iter().chain(target).map(|s| s.as_ref()).collect();
    let pretrain_corpus = TrainingCorpus::from_lines(&mixed, &joint_vocab, &cfg.tokenizer);
    let base = ModelCheckpoint::random(cfg.model.clone(), joint_vocab.clone(), cfg.init_seed)?;
    let (pretrained, pretrain_curve) = train(&base, &pretrain_corpus, &cfg.pretrain)?;

    let target_corpus = TrainingCorpus::from_lines(target, &target_vocab, &cfg.tokenizer);
    let (transplanted, _) = transplant_checkpoint(&pretrained, &target_vocab, NewTokenInit::Mean)?;

    let jobs: Vec<(InitMode, u64)> = MODES
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(mode, seed)| -> Result<_, ExperimentError> {
            let init = match mode {
                InitMode::Random => ModelCheckpoint::random(cfg.model.clone(), target_vocab.clone(), seed)?,
                InitMode::TransplantMean => transplanted.clone(),
                _ => transplant_checkpoint(&pretrained, &target_vocab, NewTokenInit::random(seed))?.0,
            };
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let (_, mut curve) = train(&init, &target_corpus, &tc)?;
            curve.metadata.init_mode = Some(mode);
            Ok((mode, seed, curve))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let by_mode: BTreeMap<InitMode, Vec<&LossCurve>> = MODES
        .iter()
        .map(|&m| (m, runs.iter().filter(|r| r.0 == m).map(|r| &r.2).collect()))
        .collect();
    let mean_curves: BTreeMap<InitMode, Vec<CurvePoint>> =
        by_mode.iter().map(|(&m, cs)| (m, average_curves(cs))).collect();

    let threshold = cfg.loss_threshold.or_else(|| {
        mean_curves
            .values()
            .map(|c| c.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min))
            .filter(|v| v.is_finite())
            .reduce(f64::max)
    });
    let modes: Vec<ModeSummary> = MODES
        .iter()
        .map(|&m| {
            let cs = &by_mode[&m];
            ModeSummary {
                init_mode: m,
                mean_initial_loss: cs.iter().map(|c| c.metadata.initial_loss).sum::<f64>() / cs.len() as f64,
                steps_to_threshold: threshold.and_then(|t| steps_to(&mean_curves[&m], t)),
                mean_curve: mean_curves[&m].clone(),
            }
        })
        .collect();

    let steps = |m: InitMode| modes.iter().find(|s| s.init_mode == m).and_then(|s| s.steps_to_threshold);
    let steps_ratio = match (steps(InitMode::Random), steps(InitMode::TransplantMean)) {
        (Some(r), Some(t)) if t > 0 => Some(r as f64 / t as f64),
        _ => None,
    };
    let tm = &mean_curves[&InitMode::TransplantMean];
    let rnd = &mean_curves[&InitMode::Random];
    let rnew = &mean_curves[&InitMode::TransplantRandomNew];
    let mean_dominates_random = tm.iter().zip(rnd).all(|(a, b)| a.loss <= b.loss);
    let mean_beats_random_new_at_end = match (tm.last(), rnew.last()) {
        (Some(a), Some(b)) => a.loss <= b.loss,
        _ => true,
    };

    let mut dominance_failures = Vec::new();
    for &seed in &cfg.seeds {
        let find = |m: InitMode| runs.iter().find(|r| r.0 == m && r.1 == seed).map(|r| &r.2).expect("run exists");
        let (a, b) = (find(InitMode::TransplantMean), find(InitMode::Random));
        for (p, q) in a.points.iter().zip(&b.points) {
            if p.loss > q.loss {
                dominance_failures.push(DominanceFailure {
                    seed,
                    step: p.step,
                    transplant_mean_loss: p.loss,
                    random_loss: q.loss,
                });
            }
        }
    }

    let report = ExperimentReport {
        config: cfg.clone(),
        joint_vocab_size: joint_vocab.len(),
        target_vocab_size: target_vocab.len(),
        intersection: intersect_vocabularies(&joint_vocab, &target_vocab).1,
        pretrain_final_loss: pretrain_curve.points.last().map(|p| p.loss),
        threshold,
        modes,
        steps_ratio,
        mean_dominates_random,
        mean_beats_random_new_at_end,
        dominance_failures,
    };
    Ok(ExperimentOutput {
        report,
        joint_vocab,
        target_vocab,
        pretrained,
        pretrain_curve,
        runs,
    })
}

const PALETTE: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

fn line_chart(series: &[(&str, Vec<(f64, f64)>)], threshold: Option<f64>) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let all = series.iter().flat_map(|s| s.1.iter());
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = all.clone().map(|p| p.1).fold(f64::MIN, f64::max).max(1e-9);
    let y_min = all.map(|p| p.1).fold(f64::MAX, f64::min).min(y_max - 1e-9);
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_min) / (y_max - y_min) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">step</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(svg, r#"<text x="10" y="{pad}" font-size="12">loss</text>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{:.1}" font-size="10">{x_max}</text>"#, h - pad + 14.0);
    let _ = writeln!(svg, r#"<text x="5" y="{:.1}" font-size="10">{y_min:.3}</text>"#, h - pad);
    let _ = writeln!(svg, r#"<text x="5" y="{:.1}" font-size="10">{y_max:.3}</text>"#, pad + 4.0);
    if let Some(t) = threshold {
        if t >= y_min && t <= y_max {
            let _ = writeln!(
                svg,
                r##"<path d="M{pad} {:.1} H{:.1}" stroke="#888" stroke-dasharray="4 3" fill="none"/>"##,
                sy(t),
                w - pad
            );
        }
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.1} {:.1}", if j == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            w - pad - 140.0,
            pad + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_mlm::synthetic::{LanguageSpec, SyntheticLanguage};

    fn tiny_cfg(steps: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden_size = 16;
        cfg.model.ff_size = 32;
        cfg.model.num_heads = 2;
        cfg.model.num_layers = 1;
        cfg.vocab_size = 120;
        cfg.pretrain = TrainConfig { num_steps: 10, batch_size: 8, checkpoint_every: 5, ..cfg.pretrain };
        cfg.train = TrainConfig { num_steps: steps, batch_size: 8, checkpoint_every: 5, ..cfg.train };
        cfg.seeds = vec![1, 2];
        cfg
    }

    fn corpora() -> (Vec<String>, Vec<String>) {
        let s = SyntheticLanguage::new(LanguageSpec::source()).sentences(60, 1);
        let t = SyntheticLanguage::new(LanguageSpec::target()).sentences(60, 2);
        (s, t)
    }

    #[test]
    fn zero_steps_gives_empty_curves() {
        let (s, t) = corpora();
        let out = run_transfer_experiment(&s, &t, &tiny_cfg(0)).unwrap();
        assert_eq!(out.runs.len(), 6);
        assert!(out.runs.iter().all(|r| r.2.points.is_empty()));
        assert!(out.report.threshold.is_none());
        assert!(out.report.steps_ratio.is_none());
        let init = |m| out.report.mode(m).unwrap().mean_initial_loss;
        assert_ne!(init(InitMode::Random), init(InitMode::TransplantMean));
        assert!(out.report.to_svg().starts_with("<svg"));
    }

    #[test]
    fn short_run_reports_every_mode() {
        let (s, t) = corpora();
        let out = run_transfer_experiment(&s, &t, &tiny_cfg(10)).unwrap();
        for m in MODES {
            let summary = out.report.mode(m).unwrap();
            assert_eq!(summary.mean_curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![5, 10]);
            assert!(summary.steps_to_threshold.is_some());
        }
        let again = run_transfer_experiment(&s, &t, &tiny_cfg(10)).unwrap();
        assert_eq!(out.report.to_json(), again.report.to_json());
    }

    #[test]
    fn rejects_duplicate_seeds() {
        let (s, t) = corpora();
        let mut cfg = tiny_cfg(0);
        cfg.seeds = vec![3, 3];
        assert!(matches!(run_transfer_experiment(&s, &t, &cfg), Err(ExperimentError::InvalidConfig(_))));
    }
}
