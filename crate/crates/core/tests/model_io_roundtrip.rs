use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtp_core::bpe::Vocabulary;
use vtp_core::model_io::{
    decode_embeddings, encode_embeddings, read_checkpoint, read_embeddings, write_checkpoint, write_embeddings,
    CheckpointManifest, IoError, MANIFEST_FILE, TENSORS_FILE, VOCAB_FILE,
};
use vtp_core::toy_mlm::{ModelCheckpoint, TransformerConfig};
use vtp_core::vocab_transfer::EmbeddingMatrix;

fn arbitrary_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.gen_range(0..6) {
        0 => -0.0,
        1 => f32::from_bits(rng.gen_range(1..0x0080_0000)), // subnormal
        2 => f32::MAX * rng.gen_range(-1.0..1.0),
        _ => rng.gen_range(-1.0..1.0),
    }
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> ModelCheckpoint {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let hidden = heads * rng.gen_range(1..5) * 2;
    let n_regular = rng.gen_range(1..40);
    let vocab = Vocabulary::from_regular_tokens((0..n_regular).map(|i| format!("t{i}"))).unwrap();
    let cfg = TransformerConfig {
        num_layers: rng.gen_range(1..3),
        hidden_size: hidden,
        ff_size: hidden * rng.gen_range(1..4),
        num_heads: heads,
        max_seq_len: rng.gen_range(4..20),
        vocab_size: vocab.len(),
        dropout_prob: 0.1,
        enable_nsp: rng.gen_bool(0.5),
    };
    let mut ckpt = ModelCheckpoint::random(cfg, vocab, rng.gen()).unwrap();
    for t in ckpt.params.tensors_mut() {
        let mut t = t.tensor;
        t.mapv_inplace(|v| if rng.gen_bool(0.1) { arbitrary_f32(rng) } else { v });
    }
    ckpt
}

fn bits_equal(a: &ModelCheckpoint, b: &ModelCheckpoint) -> bool {
    a.config == b.config
        && a.vocab == b.vocab
        && a.params.tensors().iter().zip(b.params.tensors()).all(|(x, y)| {
            x.name == y.name
                && x.tensor.shape() == y.tensor.shape()
                && x.tensor.iter().zip(y.tensor.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn embeddings_round_trip_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let dir = tempfile::tempdir().unwrap();
    for case in 0..100 {
        let (r, c) = (rng.gen_range(1..60), rng.gen_range(1..20));
        let m = EmbeddingMatrix::new(Array2::from_shape_simple_fn((r, c), || arbitrary_f32(&mut rng))).unwrap();
        let path = dir.path().join(format!("m{case}.vemb"));
        write_embeddings(&path, &m).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert!(m.as_array().iter().zip(back.as_array().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::read(&path).unwrap(), encode_embeddings(&m));
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 24 + 4 * r * c);
    }
}

#[test]
fn seeded_100_by_16() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = EmbeddingMatrix::new(Array2::from_shape_simple_fn((100, 16), || rng.gen::<f32>())).unwrap();
    assert_eq!(decode_embeddings(&encode_embeddings(&m)).unwrap(), m);
}

#[test]
fn checkpoints_round_trip_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let root = tempfile::tempdir().unwrap();
    for case in 0..100 {
        let ckpt = random_checkpoint(&mut rng);
        let dir = root.path().join(format!("c{case}"));
        write_checkpoint(&dir, &ckpt).unwrap();
        let back = read_checkpoint(&dir).unwrap();
        assert!(bits_equal(&ckpt, &back), "case {case}");
    }
}

#[test]
fn writes_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ckpt = random_checkpoint(&mut rng);
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    write_checkpoint(&a, &ckpt).unwrap();
    write_checkpoint(&b, &ckpt).unwrap();
    for f in [MANIFEST_FILE, TENSORS_FILE, VOCAB_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn desk_tensor_census() {
    // Embeddings: token, position, segment, LN gamma, LN beta = 5.
    // Per layer: Q, K, V, attention output (weight + bias each) = 8,
    // attention LN 2, FFN in/out (weight + bias) 4, FFN LN 2 = 16.
    // MLM output bias = 1. NSP pooler + classifier (weight + bias) = 4.
    let vocab = Vocabulary::from_regular_tokens(["a", "b"]).unwrap();
    let root = tempfile::tempdir().unwrap();
    for (nsp, expected) in [(false, 5 + 2 * 16 + 1), (true, 5 + 2 * 16 + 1 + 4)] {
        let cfg = TransformerConfig {
            enable_nsp: nsp,
            ..TransformerConfig::desk(vocab.len())
        };
        let ckpt = ModelCheckpoint::random(cfg, vocab.clone(), 1).unwrap();
        let manifest = write_checkpoint(&root.path().join(format!("{nsp}")), &ckpt).unwrap();
        assert_eq!(manifest.tensors.len(), expected);
        let names: std::collections::BTreeSet<_> = manifest.tensors.iter().map(|t| &t.name).collect();
        assert_eq!(names.len(), expected);
        for w in manifest.tensors.windows(2) {
            assert_eq!(w[0].offset + w[0].byte_length, w[1].offset);
        }
    }
}

fn fresh(root: &Path, name: &str) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dir = root.join(name);
    write_checkpoint(&dir, &random_checkpoint(&mut rng)).unwrap();
    dir
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut CheckpointManifest)) {
    let path = dir.join(MANIFEST_FILE);
    let mut m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut m);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let code = |dir: &Path| read_checkpoint(dir).map(|_| ()).unwrap_err().code();

    let d = fresh(root.path(), "no_manifest");
    fs::remove_file(d.join(MANIFEST_FILE)).unwrap();
    assert!(matches!(read_checkpoint(&d), Err(IoError::MissingManifest)));

    let d = fresh(root.path(), "missing_tensor");
    edit_manifest(&d, |m| {
        m.tensors.remove(3);
    });
    assert_eq!(code(&d), "missing_tensor");

    let d = fresh(root.path(), "shape");
    edit_manifest(&d, |m| m.tensors[1].shape[0] += 1);
    assert_eq!(code(&d), "shape_mismatch");

    let d = fresh(root.path(), "dangling");
    fs::remove_file(d.join(VOCAB_FILE)).unwrap();
    assert_eq!(code(&d), "dangling_vocab");

    let d = fresh(root.path(), "renamed_vocab");
    edit_manifest(&d, |m| m.vocab.file = "elsewhere.txt".into());
    assert_eq!(code(&d), "dangling_vocab");

    let d = fresh(root.path(), "extra");
    edit_manifest(&d, |m| {
        let mut extra = m.tensors.last().unwrap().clone();
        extra.name = "bogus".into();
        m.tensors.push(extra);
    });
    assert_eq!(code(&d), "unexpected_tensor");

    let d = fresh(root.path(), "blob_edit");
    let mut blob = fs::read(d.join(TENSORS_FILE)).unwrap();
    blob[5] ^= 1;
    fs::write(d.join(TENSORS_FILE), blob).unwrap();
    assert_eq!(code(&d), "digest_mismatch");

    let d = fresh(root.path(), "blob_short");
    let blob = fs::read(d.join(TENSORS_FILE)).unwrap();
    let short = &blob[..blob.len() - 4];
    fs::write(d.join(TENSORS_FILE), short).unwrap();
    edit_manifest(&d, |m| m.blob.sha256 = vtp_core::model_io::sha256_hex(short));
    assert_eq!(code(&d), "truncated_payload");

    let d = fresh(root.path(), "bad_json");
    fs::write(d.join(MANIFEST_FILE), "{not json").unwrap();
    assert_eq!(code(&d), "invalid_manifest");

    let d = fresh(root.path(), "unknown_key");
    let text = fs::read_to_string(d.join(MANIFEST_FILE)).unwrap();
    fs::write(d.join(MANIFEST_FILE), text.replacen('{', "{\"surprise\": 1,", 1)).unwrap();
    assert_eq!(code(&d), "invalid_manifest");

    let d = fresh(root.path(), "version");
    edit_manifest(&d, |m| m.format_version = 99);
    assert_eq!(code(&d), "unsupported_version");
}

#[test]
fn malformed_embeddings_are_rejected() {
    let m = EmbeddingMatrix::new(Array2::from_elem((3, 2), 1.5f32)).unwrap();
    let good = encode_embeddings(&m);
    let code = |b: &[u8]| decode_embeddings(b).unwrap_err().code();
    let mut b = good.clone();
    b[0] = b'X';
    assert_eq!(code(&b), "bad_magic");
    assert_eq!(code(b"XXXX"), "bad_magic");
    assert_eq!(code(&[]), "bad_magic");
    let mut b = good.clone();
    b[6] = 7;
    assert_eq!(code(&b), "dtype_mismatch");
    let mut b = good.clone();
    b[4] = 2;
    assert_eq!(code(&b), "unsupported_version");
    for cut in [4, 23, 24, 27, good.len() - 1] {
        assert_eq!(code(&good[..cut]), "truncated_payload", "cut {cut}");
    }
    let mut b = good.clone();
    b.extend_from_slice(&[0, 0]);
    assert_eq!(code(&b), "trailing_data");
    let mut b = good.clone();
    b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert_eq!(code(&b), "truncated_payload");
    let mut b = good.clone();
    b[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(code(&b), "invalid_matrix");
}
