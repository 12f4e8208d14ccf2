//! Post-LN BERT encoder with hand-written backpropagation.
//!
//! Layout: token + position + segment embeddings, layer norm, dropout, then
//! `num_layers` blocks of
//!
//! ```text
//! h1 = LN(h + Dropout(Attn(h) · Wo + bo))
//! h2 = LN(h1 + Dropout(GELU(h1 · W1 + b1) · W2 + b2))
//! ```
//!
//! MLM logits are `hidden · Eᵀ + bias` with `E` the token embedding table.
//! Activations are flattened to `[batch * seq, hidden]` so every dense layer
//! is one matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, RngCore};

use super::{ModelError, Params, Scalar, TransformerConfig, NUM_SEGMENTS};
use crate::bpe::CLS_ID;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// A padded batch, row-major `[batch_size, seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// `true` for real tokens, `false` for padding.
    pub attention_mask: Vec<bool>,
}

impl EncoderInput {
    /// Pads `sequences` with `[PAD]` to the longest one; all segment ids 0.
    pub fn from_sequences(sequences: &[Vec<u32>]) -> Self {
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let batch_size = sequences.len();
        let mut token_ids = vec![crate::bpe::PAD_ID; batch_size * seq_len];
        let mut attention_mask = vec![false; batch_size * seq_len];
        for (b, seq) in sequences.iter().enumerate() {
            token_ids[b * seq_len..b * seq_len + seq.len()].copy_from_slice(seq);
            attention_mask[b * seq_len..b * seq_len + seq.len()].fill(true);
        }
        Self {
            batch_size,
            seq_len,
            token_ids,
            segment_ids: vec![0; batch_size * seq_len],
            attention_mask,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.batch_size * self.seq_len
    }

    fn validate(&self, config: &TransformerConfig) -> Result<(), ModelError> {
        let n = self.num_positions();
        if self.token_ids.len() != n || self.segment_ids.len() != n || self.attention_mask.len() != n {
            return Err(ModelError::InvalidBatch(format!(
                "expected {n} entries per input array"
            )));
        }
        if self.seq_len > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.seq_len,
                max: config.max_seq_len,
            });
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
        if self.segment_ids.iter().any(|&s| s as usize >= NUM_SEGMENTS) {
            return Err(ModelError::InvalidBatch("segment id must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Corrupted input plus prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub input: EncoderInput,
    /// Flat indices `b * seq_len + s` of predicted positions.
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
    /// 0 = second segment follows the first, 1 = random second segment.
    pub nsp_labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: f64,
    pub nsp: Option<f64>,
}

pub struct ForwardOutput<T> {
    /// `[batch, seq, vocab]`
    pub mlm_logits: Array3<T>,
    /// `[batch, 2]` when the model has an NSP head.
    pub nsp_logits: Option<Array2<T>>,
    /// Per layer, `[batch, heads, query, key]`.
    pub attention_probs: Vec<Array4<T>>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    // Indexed b * heads + h, each [seq, seq].
    probs: Vec<Array2<T>>,
    probs_dropped: Option<Vec<Array2<T>>>,
    attn_drop: Option<Vec<Array2<T>>>,
    ctx: Array2<T>,
    attn_out_drop: Option<Array2<T>>,
    ln1: LnCache<T>,
    h1: Array2<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
    ff_out_drop: Option<Array2<T>>,
    ln2: LnCache<T>,
}

struct EncoderCache<T> {
    emb_ln: LnCache<T>,
    emb_drop: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
    output: Array2<T>,
}

struct Dropout<'a> {
    prob: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl Dropout<'_> {
    /// Inverted-dropout mask (`0` or `1 / (1 - p)`), or `None` when inactive.
    fn mask<T: Scalar>(&mut self, rows: usize, cols: usize) -> Option<Array2<T>> {
        let rng = self.rng.as_mut()?;
        if self.prob <= 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.prob));
        let prob = self.prob;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<f64>() < prob {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

fn apply_mask<T: Scalar>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, h) = x.dim();
    let eps = T::lit(LN_EPS);
    let inv_h = T::lit(1.0 / h as f64);
    let mut xhat = Array2::<T>::zeros((n, h));
    let mut inv_std = Array1::<T>::zeros(n);
    let mut y = Array2::<T>::zeros((n, h));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_h;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_h;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        let mut xr = xhat.row_mut(i);
        let mut yr = y.row_mut(i);
        for j in 0..h {
            let xh = (row[j] - mean) * is;
            xr[j] = xh;
            yr[j] = xh * gamma[j] + beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: &Array1<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array2<T> {
    let (n, h) = dy.dim();
    let hf = T::lit(h as f64);
    let mut dx = Array2::<T>::zeros((n, h));
    for i in 0..n {
        let dyr = dy.row(i);
        let xr = cache.xhat.row(i);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..h {
            dgamma[j] += dyr[j] * xr[j];
            dbeta[j] += dyr[j];
            let d = dyr[j] * gamma[j];
            sum_d += d;
            sum_dx += d * xr[j];
        }
        let scale = cache.inv_std[i] / hf;
        let mut out = dx.row_mut(i);
        for j in 0..h {
            let d = dyr[j] * gamma[j];
            out[j] = scale * (hf * d - sum_d - xr[j] * sum_dx);
        }
    }
    dx
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Masked softmax over each row; masked keys get probability exactly zero.
fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, key_mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if key_mask[j] && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if key_mask[j] {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

fn head_view<T>(x: &Array2<T>, b: usize, h: usize, seq: usize, dh: usize) -> ArrayView2<'_, T> {
    x.slice(s![b * seq..(b + 1) * seq, h * dh..(h + 1) * dh])
}

fn encode<T: Scalar>(
    p: &Params<T>,
    cfg: &TransformerConfig,
    input: &EncoderInput,
    dropout: &mut Dropout<'_>,
) -> EncoderCache<T> {
    let (bsz, seq) = (input.batch_size, input.seq_len);
    let n = bsz * seq;
    let hid = cfg.hidden_size;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let mut x0 = Array2::<T>::zeros((n, hid));
    for (pos, mut row) in x0.rows_mut().into_iter().enumerate() {
        let s_idx = pos % seq;
        row.assign(&p.token_embeddings.row(input.token_ids[pos] as usize));
        row += &p.position_embeddings.row(s_idx);
        row += &p.segment_embeddings.row(input.segment_ids[pos] as usize);
    }
    let (mut h, emb_ln) = layer_norm(&x0, &p.emb_ln_gamma, &p.emb_ln_beta);
    let emb_drop = dropout.mask(n, hid);
    apply_mask(&mut h, &emb_drop);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &p.layers {
        let q = linear(&h, &lp.query_w, &lp.query_b);
        let k = linear(&h, &lp.key_w, &lp.key_b);
        let v = linear(&h, &lp.value_w, &lp.value_b);
        let mut ctx = Array2::<T>::zeros((n, hid));
        let mut probs = Vec::with_capacity(bsz * heads);
        let mut attn_drop = Vec::new();
        let mut probs_dropped = Vec::new();
        for b in 0..bsz {
            let key_mask = &input.attention_mask[b * seq..(b + 1) * seq];
            for hh in 0..heads {
                let qh = head_view(&q, b, hh, seq, dh);
                let kh = head_view(&k, b, hh, seq, dh);
                let vh = head_view(&v, b, hh, seq, dh);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                masked_softmax_rows(&mut scores, key_mask);
                let out = match dropout.mask::<T>(seq, seq) {
                    Some(m) => {
                        let pd = &scores * &m;
                        let out = pd.dot(&vh);
                        attn_drop.push(m);
                        probs_dropped.push(pd);
                        out
                    }
                    None => scores.dot(&vh),
                };
                ctx.slice_mut(s![b * seq..(b + 1) * seq, hh * dh..(hh + 1) * dh])
                    .assign(&out);
                probs.push(scores);
            }
        }
        let has_attn_drop = !attn_drop.is_empty();
        let mut a = linear(&ctx, &lp.attn_out_w, &lp.attn_out_b);
        let attn_out_drop = dropout.mask(n, hid);
        apply_mask(&mut a, &attn_out_drop);
        a += &h;
        let (h1, ln1) = layer_norm(&a, &lp.attn_ln_gamma, &lp.attn_ln_beta);

        let ff_pre = linear(&h1, &lp.ff_in_w, &lp.ff_in_b);
        let ff_act = ff_pre.mapv(gelu);
        let mut o = linear(&ff_act, &lp.ff_out_w, &lp.ff_out_b);
        let ff_out_drop = dropout.mask(n, hid);
        apply_mask(&mut o, &ff_out_drop);
        o += &h1;
        let (h2, ln2) = layer_norm(&o, &lp.ff_ln_gamma, &lp.ff_ln_beta);

        layers.push(LayerCache {
            input: std::mem::replace(&mut h, h2),
            q,
            k,
            v,
            probs,
            probs_dropped: has_attn_drop.then_some(probs_dropped),
            attn_drop: has_attn_drop.then_some(attn_drop),
            ctx,
            attn_out_drop,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ff_out_drop,
            ln2,
        });
    }

    EncoderCache {
        emb_ln,
        emb_drop,
        layers,
        output: h,
    }
}

fn encode_backward<T: Scalar>(
    p: &Params<T>,
    cfg: &TransformerConfig,
    input: &EncoderInput,
    cache: &EncoderCache<T>,
    d_out: Array2<T>,
    g: &mut Params<T>,
) {
    let (bsz, seq) = (input.batch_size, input.seq_len);
    let n = bsz * seq;
    let hid = cfg.hidden_size;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let mut dh_next = d_out;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let lg = &mut g.layers[l];

        let mut d_o = layer_norm_backward(&dh_next, &lc.ln2, &lp.ff_ln_gamma, &mut lg.ff_ln_gamma, &mut lg.ff_ln_beta);
        let mut d_h1 = d_o.clone();
        apply_mask(&mut d_o, &lc.ff_out_drop);
        let mut d_act = linear_backward(&lc.ff_act, &lp.ff_out_w, &d_o, &mut lg.ff_out_w, &mut lg.ff_out_b);
        ndarray::Zip::from(&mut d_act)
            .and(&lc.ff_pre)
            .for_each(|d, &x| *d = *d * gelu_grad(x));
        d_h1 += &linear_backward(&lc.h1, &lp.ff_in_w, &d_act, &mut lg.ff_in_w, &mut lg.ff_in_b);

        let mut d_a = layer_norm_backward(&d_h1, &lc.ln1, &lp.attn_ln_gamma, &mut lg.attn_ln_gamma, &mut lg.attn_ln_beta);
        let mut d_h = d_a.clone();
        apply_mask(&mut d_a, &lc.attn_out_drop);
        let d_ctx = linear_backward(&lc.ctx, &lp.attn_out_w, &d_a, &mut lg.attn_out_w, &mut lg.attn_out_b);

        let mut d_q = Array2::<T>::zeros((n, hid));
        let mut d_k = Array2::<T>::zeros((n, hid));
        let mut d_v = Array2::<T>::zeros((n, hid));
        for b in 0..bsz {
            for hh in 0..heads {
                let idx = b * heads + hh;
                let rows = b * seq..(b + 1) * seq;
                let cols = hh * dh..(hh + 1) * dh;
                let d_ctx_h = d_ctx.slice(s![rows.clone(), cols.clone()]);
                let qh = head_view(&lc.q, b, hh, seq, dh);
                let kh = head_view(&lc.k, b, hh, seq, dh);
                let vh = head_view(&lc.v, b, hh, seq, dh);
                let probs = &lc.probs[idx];
                let used = lc.probs_dropped.as_ref().map_or(probs, |pd| &pd[idx]);

                d_v.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&used.t().dot(&d_ctx_h));
                let mut d_p = d_ctx_h.dot(&vh.t());
                if let Some(masks) = &lc.attn_drop {
                    d_p *= &masks[idx];
                }
                // Softmax backward, row by row.
                for (mut dr, pr) in d_p.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: T = dr.iter().zip(pr.iter()).map(|(&d, &pp)| d * pp).sum();
                    ndarray::Zip::from(&mut dr)
                        .and(&pr)
                        .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                }
                d_q.slice_mut(s![rows.clone(), cols.clone()]).assign(&d_p.dot(&kh));
                d_k.slice_mut(s![rows, cols]).assign(&d_p.t().dot(&qh));
            }
        }
        d_h += &linear_backward(&lc.input, &lp.query_w, &d_q, &mut lg.query_w, &mut lg.query_b);
        d_h += &linear_backward(&lc.input, &lp.key_w, &d_k, &mut lg.key_w, &mut lg.key_b);
        d_h += &linear_backward(&lc.input, &lp.value_w, &d_v, &mut lg.value_w, &mut lg.value_b);
        dh_next = d_h;
    }

    apply_mask(&mut dh_next, &cache.emb_drop);
    let dx0 = layer_norm_backward(&dh_next, &cache.emb_ln, &p.emb_ln_gamma, &mut g.emb_ln_gamma, &mut g.emb_ln_beta);
    for (pos, row) in dx0.rows().into_iter().enumerate() {
        let mut t = g.token_embeddings.row_mut(input.token_ids[pos] as usize);
        t += &row;
        let mut ps = g.position_embeddings.row_mut(pos % seq);
        ps += &row;
        let mut sg = g.segment_embeddings.row_mut(input.segment_ids[pos] as usize);
        sg += &row;
    }
}

/// Cross-entropy averaged over rows; also returns `d loss / d logits`.
fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[u32]) -> (f64, Array2<T>) {
    let rows = logits.nrows();
    let inv_rows = T::lit(1.0 / rows as f64);
    let mut grad = Array2::<T>::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, (row, mut grow)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gv, &v) in grow.iter_mut().zip(row.iter()) {
            *gv = (v - max).exp();
            sum += *gv;
        }
        let target = targets[i] as usize;
        let log_z = sum.ln() + max;
        loss += (log_z - row[target]).to_f64().expect("finite");
        let inv = T::one() / sum;
        grow.mapv_inplace(|e| e * inv * inv_rows);
        grow[target] -= inv_rows;
    }
    (loss / rows as f64, grad)
}

fn check_batch<T: Scalar>(p: &Params<T>, cfg: &TransformerConfig, batch: &MlmBatch) -> Result<bool, ModelError> {
    batch.input.validate(cfg)?;
    if batch.target_positions.len() != batch.target_ids.len() {
        return Err(ModelError::InvalidBatch("target positions and ids differ in length".into()));
    }
    if batch.target_positions.is_empty() {
        return Err(ModelError::EmptyTargets);
    }
    let n = batch.input.num_positions();
    if batch.target_positions.iter().any(|&pos| pos >= n) {
        return Err(ModelError::InvalidBatch("target position out of range".into()));
    }
    if let Some(&id) = batch.target_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if !cfg.enable_nsp {
        return Ok(false);
    }
    if p.nsp.is_none() {
        return Err(ModelError::InvalidBatch("NSP enabled but the model has no NSP head".into()));
    }
    match &batch.nsp_labels {
        Some(labels) if labels.len() == batch.input.batch_size && labels.iter().all(|&l| l < 2) => Ok(true),
        _ => Err(ModelError::InvalidBatch("NSP enabled: need one 0/1 label per sequence".into())),
    }
}

fn run<T: Scalar>(
    p: &Params<T>,
    cfg: &TransformerConfig,
    batch: &MlmBatch,
    dropout_rng: Option<&mut dyn RngCore>,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Params<T>>), ModelError> {
    let use_nsp = check_batch(p, cfg, batch)?;
    let mut dropout = Dropout {
        prob: cfg.dropout_prob,
        rng: dropout_rng,
    };
    let cache = encode(p, cfg, &batch.input, &mut dropout);
    let hidden = &cache.output;

    let gathered = hidden.select(Axis(0), &batch.target_positions);
    let mut logits = gathered.dot(&p.token_embeddings.t());
    logits += &p.mlm_output_bias;
    let (mlm_loss, d_logits) = softmax_cross_entropy(&logits, &batch.target_ids);

    let mut nsp_loss = None;
    let mut nsp_parts = None;
    if use_nsp {
        let head = p.nsp.as_ref().expect("checked");
        let cls_rows: Vec<usize> = (0..batch.input.batch_size).map(|b| b * batch.input.seq_len).collect();
        let cls = hidden.select(Axis(0), &cls_rows);
        let pooled = linear(&cls, &head.pooler_w, &head.pooler_b).mapv(T::tanh);
        let nsp_logits = linear(&pooled, &head.classifier_w, &head.classifier_b);
        let labels: Vec<u32> = batch.nsp_labels.as_ref().expect("checked").iter().map(|&l| l as u32).collect();
        let (loss, d_nsp) = softmax_cross_entropy(&nsp_logits, &labels);
        nsp_loss = Some(loss);
        nsp_parts = Some((cls_rows, cls, pooled, d_nsp));
    }

    let breakdown = LossBreakdown {
        total: mlm_loss + nsp_loss.unwrap_or(0.0),
        mlm: mlm_loss,
        nsp: nsp_loss,
    };
    if !want_grads {
        return Ok((breakdown, None));
    }

    let mut g = Params::<T>::zeros(cfg, use_nsp);
    let mut d_hidden = Array2::<T>::zeros(hidden.dim());
    // Tied projection: the embedding table receives the output-layer gradient too.
    general_mat_mul(T::one(), &d_logits.t(), &gathered, T::one(), &mut g.token_embeddings);
    g.mlm_output_bias += &d_logits.sum_axis(Axis(0));
    let d_gathered = d_logits.dot(&p.token_embeddings);
    for (row, &pos) in d_gathered.rows().into_iter().zip(&batch.target_positions) {
        let mut dst = d_hidden.row_mut(pos);
        dst += &row;
    }

    if let Some((cls_rows, cls, pooled, d_nsp)) = nsp_parts {
        let head = p.nsp.as_ref().expect("checked");
        let gh = g.nsp.as_mut().expect("allocated");
        let mut d_pooled = linear_backward(&pooled, &head.classifier_w, &d_nsp, &mut gh.classifier_w, &mut gh.classifier_b);
        ndarray::Zip::from(&mut d_pooled)
            .and(&pooled)
            .for_each(|d, &y| *d = *d * (T::one() - y * y));
        let d_cls = linear_backward(&cls, &head.pooler_w, &d_pooled, &mut gh.pooler_w, &mut gh.pooler_b);
        for (row, &pos) in d_cls.rows().into_iter().zip(&cls_rows) {
            let mut dst = d_hidden.row_mut(pos);
            dst += &row;
        }
    }

    encode_backward(p, cfg, &batch.input, &cache, d_hidden, &mut g);
    Ok((breakdown, Some(g)))
}

/// Mean cross-entropy over the batch targets (plus the NSP term when the
/// config enables it) and the gradient of every parameter that loss reaches.
/// Dropout is active only when `dropout_rng` is given. Weight decay is left
/// to the optimizer.
pub fn loss_and_gradients<T: Scalar>(
    params: &Params<T>,
    config: &TransformerConfig,
    batch: &MlmBatch,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(LossBreakdown, Params<T>), ModelError> {
    let (loss, grads) = run(params, config, batch, dropout_rng, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Loss without dropout or gradients.
pub fn evaluate_loss<T: Scalar>(
    params: &Params<T>,
    config: &TransformerConfig,
    batch: &MlmBatch,
) -> Result<LossBreakdown, ModelError> {
    Ok(run(params, config, batch, None, false)?.0)
}

/// Inference pass: logits at every position and the attention maps.
pub fn forward<T: Scalar>(
    params: &Params<T>,
    config: &TransformerConfig,
    input: &EncoderInput,
) -> Result<ForwardOutput<T>, ModelError> {
    input.validate(config)?;
    params.check_shapes(config)?;
    let mut dropout = Dropout { prob: 0.0, rng: None };
    let cache = encode(params, config, input, &mut dropout);
    let (bsz, seq, vocab) = (input.batch_size, input.seq_len, config.vocab_size);
    let mut logits = cache.output.dot(&params.token_embeddings.t());
    logits += &params.mlm_output_bias;
    let mlm_logits = logits
        .into_shape_with_order((bsz, seq, vocab))
        .expect("contiguous logits");

    let nsp_logits = params.nsp.as_ref().map(|head| {
        let rows: Vec<usize> = (0..bsz).map(|b| b * seq).collect();
        let cls = cache.output.select(Axis(0), &rows);
        let pooled = linear(&cls, &head.pooler_w, &head.pooler_b).mapv(T::tanh);
        linear(&pooled, &head.classifier_w, &head.classifier_b)
    });

    let heads = config.num_heads;
    let attention_probs = cache
        .layers
        .iter()
        .map(|lc| {
            let mut a = Array4::<T>::zeros((bsz, heads, seq, seq));
            for b in 0..bsz {
                for h in 0..heads {
                    a.slice_mut(s![b, h, .., ..]).assign(&lc.probs[b * heads + h]);
                }
            }
            a
        })
        .collect();

    Ok(ForwardOutput {
        mlm_logits,
        nsp_logits,
        attention_probs,
    })
}

/// Wraps token sequences as `[CLS] tokens [SEP]` rows.
pub fn with_cls_sep(tokens: &[u32]) -> Vec<u32> {
    let mut seq = Vec::with_capacity(tokens.len() + 2);
    seq.push(CLS_ID);
    seq.extend_from_slice(tokens);
    seq.push(crate::bpe::SEP_ID);
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_mlm::init_random;

    fn tiny_config(vocab: usize) -> TransformerConfig {
        TransformerConfig {
            dropout_prob: 0.0,
            ..TransformerConfig::desk(vocab)
        }
    }

    fn sample_input() -> EncoderInput {
        EncoderInput::from_sequences(&[vec![2, 7, 9, 11, 3], vec![2, 8, 3]])
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny_config(20);
        let p = init_random(&cfg, 5).unwrap();
        let out = forward(&p, &cfg, &sample_input()).unwrap();
        for layer in &out.attention_probs {
            for b in 0..2 {
                for h in 0..cfg.num_heads {
                    for q in 0..5 {
                        let row = layer.slice(s![b, h, q, ..]);
                        let sum: f32 = row.sum();
                        assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
                        assert!(row.iter().all(|&x| x >= 0.0));
                    }
                }
            }
            // Padded keys of the second sequence get no weight.
            assert!(layer.slice(s![1, .., .., 3..]).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let cfg = tiny_config(20);
        let p = init_random(&cfg, 6).unwrap();
        let short = EncoderInput::from_sequences(&[vec![2, 8, 10, 3]]);
        // Batching with a longer sequence pads the first one to length 7.
        let mut padded = EncoderInput::from_sequences(&[vec![2, 8, 10, 3], vec![2, 5, 6, 7, 5, 6, 3]]);
        assert!(!padded.attention_mask[4]);
        let a = forward(&p, &cfg, &short).unwrap();
        let b = forward(&p, &cfg, &padded).unwrap();
        let diff = (&a.mlm_logits.slice(s![0, .., ..]) - &b.mlm_logits.slice(s![0, 0..4, ..])).mapv(f32::abs);
        assert!(diff.iter().all(|&d| d < 1e-5));
        // Permute the ids sitting on padded positions.
        padded.token_ids[4..7].copy_from_slice(&[15, 4, 9]);
        let c = forward(&p, &cfg, &padded).unwrap();
        let diff = (&b.mlm_logits.slice(s![0, 0..4, ..]) - &c.mlm_logits.slice(s![0, 0..4, ..])).mapv(f32::abs);
        assert!(diff.iter().all(|&d| d < 1e-5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config(20);
        let p = init_random(&cfg, 1).unwrap();
        let bad_id = EncoderInput::from_sequences(&[vec![2, 25, 3]]);
        assert!(matches!(forward(&p, &cfg, &bad_id), Err(ModelError::IdOutOfRange { id: 25, .. })));
        let long = EncoderInput::from_sequences(&[vec![5; 65]]);
        assert!(matches!(forward(&p, &cfg, &long), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = tiny_config(30);
        // Zero embeddings and bias make every logit zero.
        let p = Params::<f64>::zeros(&cfg, false);
        let mut p = p;
        p.emb_ln_gamma.fill(1.0);
        for l in &mut p.layers {
            l.attn_ln_gamma.fill(1.0);
            l.ff_ln_gamma.fill(1.0);
        }
        let batch = MlmBatch {
            input: sample_input(),
            target_positions: vec![1, 2, 6],
            target_ids: vec![7, 9, 8],
            nsp_labels: None,
        };
        let loss = evaluate_loss(&p, &cfg, &batch).unwrap();
        assert!((loss.mlm - (30f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_targets_error() {
        let cfg = tiny_config(20);
        let p = init_random(&cfg, 1).unwrap();
        let batch = MlmBatch {
            input: sample_input(),
            target_positions: vec![],
            target_ids: vec![],
            nsp_labels: None,
        };
        assert!(matches!(evaluate_loss(&p, &cfg, &batch), Err(ModelError::EmptyTargets)));
    }

    #[test]
    fn nsp_head_untouched_when_disabled() {
        let mut cfg = tiny_config(20);
        cfg.enable_nsp = false;
        let p = init_random(&cfg, 1).unwrap();
        let batch = MlmBatch {
            input: sample_input(),
            target_positions: vec![1],
            target_ids: vec![7],
            nsp_labels: Some(vec![0, 1]),
        };
        let (_, g) = loss_and_gradients(&p, &cfg, &batch, None).unwrap();
        assert!(g.nsp.is_none());
        assert!(g.tensors().iter().all(|t| !t.name.starts_with("nsp.")));
    }

    #[test]
    fn tied_embeddings_drive_logits() {
        let cfg = tiny_config(20);
        let mut p = init_random(&cfg, 2).unwrap();
        let input = sample_input();
        let before = forward(&p, &cfg, &input).unwrap().mlm_logits;
        // A constant shift would be invisible: layer-normed hidden states sum to zero.
        for (j, x) in p.token_embeddings.row_mut(13).iter_mut().enumerate() {
            *x += if j % 2 == 0 { 0.5 } else { -0.3 };
        }
        let after = forward(&p, &cfg, &input).unwrap().mlm_logits;
        // Token 13 never appears in the input, so only its own logit moves.
        for b in 0..2 {
            for s_ in 0..5 {
                if !input.attention_mask[b * 5 + s_] {
                    continue;
                }
                assert!((after[[b, s_, 13]] - before[[b, s_, 13]]).abs() > 1e-4);
                assert!((after[[b, s_, 12]] - before[[b, s_, 12]]).abs() < 1e-6);
            }
        }
    }
}
