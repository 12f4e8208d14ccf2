use ndarray::Array2;
use vtp_core::toy_mlm::{
    forward, init_random, loss_and_gradients, evaluate_loss, EncoderInput, MlmBatch, Params, TransformerConfig,
};

const VOCAB: usize = 23;

fn desk_config(nsp: bool) -> TransformerConfig {
    TransformerConfig {
        dropout_prob: 0.0,
        enable_nsp: nsp,
        ..TransformerConfig::desk(VOCAB)
    }
}

// ---- straight-line reference encoder -----------------------------------

fn get2(p: &Array2<f64>, i: usize, j: usize) -> f64 {
    p[[i, j]]
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-12).sqrt();
    (0..x.len()).map(|j| (x[j] - mean) / denom * gamma[j] + beta[j]).collect()
}

fn affine(x: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (o, slot) in out.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *slot += xi * get2(w, i, o);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits `[seq][vocab]` for one unpadded sequence, looping over scalars.
fn reference_logits(p: &Params<f64>, cfg: &TransformerConfig, ids: &[u32], segs: &[u8]) -> Vec<Vec<f64>> {
    let h = cfg.hidden_size;
    let heads = cfg.num_heads;
    let dh = h / heads;
    let v1 = |a: &ndarray::Array1<f64>| a.to_vec();
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let raw: Vec<f64> = (0..h)
                .map(|j| {
                    p.token_embeddings[[id as usize, j]]
                        + p.position_embeddings[[pos, j]]
                        + p.segment_embeddings[[segs[pos] as usize, j]]
                })
                .collect();
            layer_norm(&raw, &v1(&p.emb_ln_gamma), &v1(&p.emb_ln_beta))
        })
        .collect();
    for l in &p.layers {
        let q: Vec<Vec<f64>> = xs.iter().map(|x| affine(x, &l.query_w, &v1(&l.query_b))).collect();
        let k: Vec<Vec<f64>> = xs.iter().map(|x| affine(x, &l.key_w, &v1(&l.key_b))).collect();
        let v: Vec<Vec<f64>> = xs.iter().map(|x| affine(x, &l.value_w, &v1(&l.value_b))).collect();
        let mut next = Vec::new();
        for i in 0..xs.len() {
            let mut ctx = vec![0.0; h];
            for hh in 0..heads {
                let r = hh * dh..(hh + 1) * dh;
                let scores: Vec<f64> = (0..xs.len())
                    .map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..xs.len() {
                    for c in r.clone() {
                        ctx[c] += e[j] / z * v[j][c];
                    }
                }
            }
            let mut a = affine(&ctx, &l.attn_out_w, &v1(&l.attn_out_b));
            for j in 0..h {
                a[j] += xs[i][j];
            }
            let h1 = layer_norm(&a, &v1(&l.attn_ln_gamma), &v1(&l.attn_ln_beta));
            let mid: Vec<f64> = affine(&h1, &l.ff_in_w, &v1(&l.ff_in_b)).into_iter().map(gelu).collect();
            let mut o = affine(&mid, &l.ff_out_w, &v1(&l.ff_out_b));
            for j in 0..h {
                o[j] += h1[j];
            }
            next.push(layer_norm(&o, &v1(&l.ff_ln_gamma), &v1(&l.ff_ln_beta)));
        }
        xs = next;
    }
    xs.iter()
        .map(|x| {
            (0..cfg.vocab_size)
                .map(|t| (0..h).map(|j| x[j] * p.token_embeddings[[t, j]]).sum::<f64>() + p.mlm_output_bias[t])
                .collect()
        })
        .collect()
}

#[test]
fn forward_matches_reference() {
    let cfg = desk_config(false);
    let mut p = init_random(&cfg, 17).unwrap();
    // Non-trivial biases and norms so every term is exercised.
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        if t.tensor.ndim() == 1 {
            let mut t = t.tensor;
            for (j, x) in t.iter_mut().enumerate() {
                *x += 0.01 * (((i * 31 + j) % 7) as f32 - 3.0);
            }
        }
    }
    let seqs = [vec![2u32, 7, 9, 11, 14, 3], vec![2u32, 8, 20, 3]];
    let input = EncoderInput::from_sequences(&seqs);
    let out = forward(&p, &cfg, &input).unwrap();
    let p64 = p.cast::<f64>();
    let mut worst = 0f64;
    for (b, seq) in seqs.iter().enumerate() {
        let reference = reference_logits(&p64, &cfg, seq, &vec![0; seq.len()]);
        for (s, row) in reference.iter().enumerate() {
            for (t, &r) in row.iter().enumerate() {
                worst = worst.max((out.mlm_logits[[b, s, t]] as f64 - r).abs());
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

// ---- finite differences -------------------------------------------------

fn fd_batch() -> MlmBatch {
    let mut input = EncoderInput::from_sequences(&[vec![2, 7, 9, 3, 12, 3], vec![2, 8, 10, 3]]);
    // Second segment on the first row.
    input.segment_ids[4] = 1;
    input.segment_ids[5] = 1;
    MlmBatch {
        input,
        target_positions: vec![1, 2, 4, 8],
        target_ids: vec![5, 9, 12, 10],
        nsp_labels: Some(vec![0, 1]),
    }
}

#[test]
fn gradients_match_central_differences() {
    let cfg = desk_config(true);
    let mut p = init_random(&cfg, 3).unwrap().cast::<f64>();
    let batch = fd_batch();
    let (_, grads) = loss_and_gradients(&p, &cfg, &batch, None).unwrap();
    let grads: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.tensor.iter().copied().collect()))
        .collect();

    let step = 1e-5;
    let mut worst = (0f64, String::new());
    for (gi, (name, analytic)) in grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = {
                let mut ts = p.tensors_mut();
                let slot = &mut ts[gi].tensor.as_slice_mut().unwrap()[k];
                let o = *slot;
                *slot = o + step;
                o
            };
            let up = evaluate_loss(&p, &cfg, &batch).unwrap().total;
            p.tensors_mut()[gi].tensor.as_slice_mut().unwrap()[k] = orig - step;
            let down = evaluate_loss(&p, &cfg, &batch).unwrap().total;
            p.tensors_mut()[gi].tensor.as_slice_mut().unwrap()[k] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
            .max(1e-12);
        let rel = diff / scale;
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    assert!(worst.0 < 1e-4, "worst group {} rel err {}", worst.1, worst.0);
}
