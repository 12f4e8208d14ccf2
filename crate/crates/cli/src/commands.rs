use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vtp_core::bpe::{
    build_vocab, count_word_frequencies, learn_bpe, BpeError, TokenizerConfig, Vocabulary, WordFreqTable,
};
use vtp_core::corpus_stats::{compare_vocabularies, sequence_length_stats};
use vtp_core::toy_mlm::experiment::{run_transfer_experiment, ExperimentConfig};
use vtp_core::toy_mlm::synthetic::{self, LanguageSpec, SyntheticLanguage};
use vtp_core::toy_mlm::{train, InitMode, ModelCheckpoint, ModelError, TrainConfig, TrainingCorpus, TransformerConfig};
use vtp_core::vocab_transfer::{transplant_checkpoint, NewTokenInit};

use crate::error::CliError;
use crate::manifest::{sidecar_path, RunManifest, RUN_MANIFEST_FILE};
use crate::{
    Cli, Command, CompareArgs, ExperimentArgs, InitArg, InitArgs, LearnVocabArgs, NewTokenInitArg, StatsArgs,
    SynthArgs, TrainArgs, TransplantArgs,
};

const WEIGHT_TOLERANCE: f64 = 1e-9;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let flags = serde_json::to_value(cli).expect("serializable flags");
    let mut m = RunManifest::new(cli.command.name(), flags);
    match &cli.command {
        Command::LearnVocab(a) => learn_vocab(a, &mut m),
        Command::Transplant(a) => transplant(a, cli.seed, &mut m),
        Command::Stats(a) => stats(a, &mut m),
        Command::Compare(a) => compare(a, &mut m),
        Command::Train(a) => train_cmd(a, &mut m),
        Command::Experiment(a) => experiment(a, cli.seed, &mut m),
        Command::Synth(a) => synth(a, cli.seed, &mut m),
        Command::Init(a) => init(a, cli.seed, &mut m),
    }
}

fn tokenizer(lowercase: bool) -> TokenizerConfig {
    TokenizerConfig {
        lowercase,
        ..TokenizerConfig::default()
    }
}

fn utf8(path: &Path, bytes: Vec<u8>) -> Result<String, CliError> {
    String::from_utf8(bytes).map_err(|e| CliError::Domain(format!("{}: not valid UTF-8: {e}", path.display())))
}

fn read_corpus(m: &mut RunManifest, path: &Path) -> Result<Vec<String>, CliError> {
    let text = utf8(path, m.read_input(path)?)?;
    Ok(text.lines().map(String::from).collect())
}

fn read_vocab(m: &mut RunManifest, path: &Path) -> Result<Vocabulary, CliError> {
    let text = utf8(path, m.read_input(path)?)?;
    Vocabulary::parse(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

/// Object keys present in both overwrite the default recursively; keys
/// unknown to the schema survive the merge and are rejected on decode.
fn overlay(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

fn parse_config(m: &mut RunManifest, path: &Path) -> Result<Value, CliError> {
    let bytes = m.read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: invalid config: {e}", path.display())))
}

fn decode_config<T: DeserializeOwned>(path: &Path, defaults: Value, user: Value) -> Result<T, CliError> {
    let mut merged = defaults;
    overlay(&mut merged, user);
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("{}: invalid config: {e}", path.display())))
}

/// Reads a JSON config whose omitted keys keep the values in `defaults`.
fn read_config<T: Serialize + DeserializeOwned>(m: &mut RunManifest, path: Option<&Path>, defaults: T) -> Result<T, CliError> {
    match path {
        Some(p) => {
            let user = parse_config(m, p)?;
            decode_config(p, serde_json::to_value(&defaults).expect("serializable config"), user)
        }
        None => Ok(defaults),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

fn config_error(e: ModelError) -> CliError {
    match e {
        ModelError::InvalidConfig(msg) => CliError::Usage(format!("invalid config: {msg}")),
        other => other.into(),
    }
}

fn resolve_weights(given: Option<&[f64]>, n: usize) -> Result<Vec<f64>, CliError> {
    let Some(w) = given else {
        return Ok(if n == 2 { vec![0.8, 0.2] } else { vec![1.0 / n as f64; n] });
    };
    if w.len() != n {
        return Err(CliError::Usage(format!("{} weights given for {n} corpora", w.len())));
    }
    if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        return Err(CliError::Usage("weights must be positive".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(CliError::Usage(format!("weights sum to {sum}, expected 1")));
    }
    Ok(w.to_vec())
}

fn learn_vocab(a: &LearnVocabArgs, m: &mut RunManifest) -> Result<(), CliError> {
    let weights = resolve_weights(a.weights.as_deref(), a.corpus.len())?;
    let tok = tokenizer(a.lowercase);
    let mut tables = Vec::with_capacity(a.corpus.len());
    for path in &a.corpus {
        let bytes = m.read_input(path)?;
        let table = count_word_frequencies(&bytes[..], &tok).map_err(|e| match e {
            BpeError::InvalidUtf8 { .. } => CliError::Domain(format!("{}: {e}", path.display())),
            other => other.into(),
        })?;
        tables.push(table);
    }
    let sources: Vec<(&WordFreqTable, f64)> = tables.iter().zip(weights).collect();
    let freqs = WordFreqTable::mix(&sources)?;
    let merges = learn_bpe(&freqs, a.vocab_size, a.min_pair_freq)?;
    let vocab = build_vocab(&merges, &freqs, a.vocab_size)?;
    if vocab.len() < a.vocab_size {
        eprintln!("note: merges ran out; vocabulary has {} of {} tokens", vocab.len(), a.vocab_size);
    }
    create_dir(&a.out)?;
    m.write_output(&a.out.join("vocab.txt"), vocab.to_text().as_bytes())?;
    m.write_output(&a.out.join("merges.txt"), merges.to_text().as_bytes())?;
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}

fn transplant(a: &TransplantArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<(), CliError> {
    let old = m.read_checkpoint(&a.old_ckpt)?;
    let vocab = read_vocab(m, &a.new_vocab)?;
    let init = match a.new_token_init {
        NewTokenInitArg::Mean => NewTokenInit::Mean,
        NewTokenInitArg::Random => NewTokenInit::random(seed.unwrap_or(0)),
    };
    let (ckpt, report) = transplant_checkpoint(&old, &vocab, init)?;
    m.write_checkpoint(&a.out, &ckpt)?;
    m.write_output(&a.out.join("transplant_report.json"), report.to_json().as_bytes())?;
    let s = &report.summary;
    println!(
        "copied {} special {} averaged {} fallback {}",
        s.copied, s.special_copied, s.averaged, s.fallback
    );
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}

fn stats(a: &StatsArgs, m: &mut RunManifest) -> Result<(), CliError> {
    let corpus = read_corpus(m, &a.corpus)?;
    let vocab = read_vocab(m, &a.vocab)?;
    let dist = sequence_length_stats(&corpus, &vocab, &tokenizer(a.lowercase), a.bucket_width)?;
    let text = match a.format {
        crate::FormatArg::Csv => dist.to_csv(),
        crate::FormatArg::Json => dist.to_json(),
        crate::FormatArg::Svg => dist.to_svg(),
    };
    m.write_output(&a.out, text.as_bytes())?;
    m.write(&sidecar_path(&a.out))
}

fn compare(a: &CompareArgs, m: &mut RunManifest) -> Result<(), CliError> {
    let corpus = read_corpus(m, &a.corpus)?;
    let vocab_a = read_vocab(m, &a.vocab)?;
    let vocab_b = read_vocab(m, &a.vocab_b)?;
    let report = compare_vocabularies(&corpus, &vocab_a, &vocab_b, &tokenizer(a.lowercase), a.bucket_width)?;
    m.write_output(&a.out, report.render(a.format.into()).as_bytes())?;
    println!("mean_ratio {}", report.mean_ratio);
    m.write(&sidecar_path(&a.out))
}

/// Config file for `train`. `model` is only allowed with random init.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: TransformerConfig,
    train: TrainConfig,
    tokenizer: TokenizerConfig,
}

fn read_train_file(m: &mut RunManifest, path: Option<&Path>) -> Result<(TrainFile, bool), CliError> {
    let defaults = TrainFile {
        model: TransformerConfig::desk(0),
        train: TrainConfig::desk(),
        tokenizer: TokenizerConfig::default(),
    };
    let Some(p) = path else {
        return Ok((defaults, false));
    };
    let user = parse_config(m, p)?;
    let has_model = user.get("model").is_some();
    let file = decode_config(p, serde_json::to_value(&defaults).expect("serializable config"), user)?;
    Ok((file, has_model))
}

fn check_seeds(seeds: &[u64]) -> Result<(), CliError> {
    let mut uniq = seeds.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if seeds.is_empty() || uniq.len() != seeds.len() {
        return Err(CliError::Usage("seeds must be non-empty and distinct".into()));
    }
    Ok(())
}

fn curve_files(m: &mut RunManifest, dir: &Path, stem: &str, curve: &vtp_core::toy_mlm::LossCurve) -> Result<(), CliError> {
    m.write_output(&dir.join(format!("{stem}.csv")), curve.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(curve).expect("serializable curve") + "\n";
    m.write_output(&dir.join(format!("{stem}.json")), json.as_bytes())
}

enum Base {
    Checkpoint(ModelCheckpoint),
    /// Fresh parameters per seed.
    Random(TransformerConfig, Vocabulary),
}

fn train_cmd(a: &TrainArgs, m: &mut RunManifest) -> Result<(), CliError> {
    check_seeds(&a.seeds)?;
    let (file, has_model) = read_train_file(m, a.config.as_deref())?;
    let mut cfg = file.train;
    if let Some(n) = a.num_steps {
        cfg.num_steps = n;
    }
    cfg.validate().map_err(config_error)?;

    let base = match &a.init {
        InitArg::Random => {
            let path = a
                .vocab
                .as_ref()
                .ok_or_else(|| CliError::Usage("--vocab is required with --init random".into()))?;
            let vocab = read_vocab(m, path)?;
            let mut model = file.model.clone();
            model.vocab_size = vocab.len();
            model.validate().map_err(config_error)?;
            Base::Random(model, vocab)
        }
        InitArg::Ckpt(dir) => {
            if has_model {
                return Err(CliError::Usage("a `model` section cannot be combined with checkpoint init".into()));
            }
            if a.vocab.is_some() {
                return Err(CliError::Usage("--vocab cannot be combined with checkpoint init".into()));
            }
            Base::Checkpoint(m.read_checkpoint(dir)?)
        }
    };
    let vocab = match &base {
        Base::Checkpoint(ckpt) => &ckpt.vocab,
        Base::Random(_, v) => v,
    };
    let corpus_lines = read_corpus(m, &a.corpus)?;
    let corpus = TrainingCorpus::from_lines(&corpus_lines, vocab, &file.tokenizer);

    create_dir(&a.out)?;
    for &seed in &a.seeds {
        let (init, mode) = match &base {
            Base::Checkpoint(ckpt) => (ckpt.clone(), InitMode::Checkpoint),
            Base::Random(model, vocab) => (ModelCheckpoint::random(model.clone(), vocab.clone(), seed)?, InitMode::Random),
        };
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let (trained, mut curve) = train(&init, &corpus, &run_cfg)?;
        curve.metadata.init_mode = Some(mode);
        curve_files(m, &a.out, &format!("curve_seed{seed}"), &curve)?;
        m.write_checkpoint(&a.out.join(format!("checkpoint_seed{seed}")), &trained)?;
        let last = curve.points.last().map(|p| p.loss);
        println!("seed {seed}: initial {:.4} final {:?}", curve.metadata.initial_loss, last);
    }
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}

fn experiment(a: &ExperimentArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<(), CliError> {
    let mut cfg = read_config(m, a.config.as_deref(), ExperimentConfig::default())?;
    if let Some(seeds) = &a.seeds {
        check_seeds(seeds)?;
        cfg.seeds = seeds.clone();
    }
    if let Some(n) = a.num_steps {
        cfg.pretrain.num_steps = n;
        cfg.train.num_steps = n;
    }
    if let Some(s) = seed {
        cfg.init_seed = s;
    }
    cfg.validate().map_err(|e| match e {
        vtp_core::toy_mlm::experiment::ExperimentError::Model(me) => config_error(me),
        other => other.into(),
    })?;
    let (source, target) = match a.corpus.as_slice() {
        [] => synthetic::bundled_corpora(),
        [s, t] => (read_corpus(m, s)?, read_corpus(m, t)?),
        other => {
            return Err(CliError::Usage(format!(
                "expected --corpus <source> --corpus <target>, got {} corpora",
                other.len()
            )))
        }
    };

    let out = run_transfer_experiment(&source, &target, &cfg)?;
    create_dir(&a.out)?;
    let curves = a.out.join("curves");
    create_dir(&curves)?;
    m.write_output(&a.out.join("report.json"), out.report.to_json().as_bytes())?;
    m.write_output(&a.out.join("report.svg"), out.report.to_svg().as_bytes())?;
    m.write_output(&a.out.join("joint_vocab.txt"), out.joint_vocab.to_text().as_bytes())?;
    m.write_output(&a.out.join("target_vocab.txt"), out.target_vocab.to_text().as_bytes())?;
    curve_files(m, &curves, "pretrain", &out.pretrain_curve)?;
    for (mode, seed, curve) in &out.runs {
        curve_files(m, &curves, &format!("{}_seed{seed}", mode.as_str()), curve)?;
    }
    m.write_checkpoint(&a.out.join("pretrained"), &out.pretrained)?;

    let r = &out.report;
    println!("threshold {:?} steps_ratio {:?}", r.threshold, r.steps_ratio);
    for s in &r.modes {
        let last = s.mean_curve.last().map(|p| p.loss);
        println!("{}: steps_to_threshold {:?} final {:?}", s.init_mode.as_str(), s.steps_to_threshold, last);
    }
    println!(
        "mean_dominates_random {} mean_beats_random_new_at_end {}",
        r.mean_dominates_random, r.mean_beats_random_new_at_end
    );
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}

fn synth(a: &SynthArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<(), CliError> {
    let (src_seed, tgt_seed) = match seed {
        Some(s) => (s, s.wrapping_add(1)),
        None => (synthetic::BUNDLED_SOURCE_SEED, synthetic::BUNDLED_TARGET_SEED),
    };
    create_dir(&a.out)?;
    for (name, spec, n, s) in [
        ("source.txt", LanguageSpec::source(), a.source_sentences, src_seed),
        ("target.txt", LanguageSpec::target(), a.target_sentences, tgt_seed),
    ] {
        let mut text = SyntheticLanguage::new(spec).sentences(n, s).join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        m.write_output(&a.out.join(name), text.as_bytes())?;
    }
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}

fn init(a: &InitArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<(), CliError> {
    let vocab = read_vocab(m, &a.vocab)?;
    let mut model = read_config(m, a.config.as_deref(), TransformerConfig::desk(0))?;
    model.vocab_size = vocab.len();
    model.validate().map_err(config_error)?;
    let ckpt = ModelCheckpoint::random(model, vocab, seed.unwrap_or(0))?;
    m.write_checkpoint(&a.out, &ckpt)?;
    m.write(&a.out.join(RUN_MANIFEST_FILE))
}
