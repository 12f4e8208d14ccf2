use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, TransformerConfig, NUM_SEGMENTS};

/// Floating-point element type the encoder runs in: `f32` for training,
/// `f64` for gradient checks.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const INIT_STDDEV: f64 = 0.02;

/// Normal(0, std²) truncated to three standard deviations by rejection.
/// The truncated distribution keeps about 98.7% of the nominal stddev.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive stddev");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 3.0 * std {
            return x;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: Array2<T>,
    pub query_b: Array1<T>,
    pub key_w: Array2<T>,
    pub key_b: Array1<T>,
    pub value_w: Array2<T>,
    pub value_b: Array1<T>,
    pub attn_out_w: Array2<T>,
    pub attn_out_b: Array1<T>,
    pub attn_ln_gamma: Array1<T>,
    pub attn_ln_beta: Array1<T>,
    pub ff_in_w: Array2<T>,
    pub ff_in_b: Array1<T>,
    pub ff_out_w: Array2<T>,
    pub ff_out_b: Array1<T>,
    pub ff_ln_gamma: Array1<T>,
    pub ff_ln_beta: Array1<T>,
}

/// Pooler over the `[CLS]` position plus the two-way classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NspHead<T> {
    pub pooler_w: Array2<T>,
    pub pooler_b: Array1<T>,
    pub classifier_w: Array2<T>,
    pub classifier_b: Array1<T>,
}

/// All encoder parameters. Weight matrices are stored `[in, out]`, so a
/// dense layer computes `x · W + b`. The MLM output projection reuses
/// `token_embeddings` (tied); only its bias is stored separately.
///
/// The same type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_embeddings: Array2<T>,
    pub position_embeddings: Array2<T>,
    pub segment_embeddings: Array2<T>,
    pub emb_ln_gamma: Array1<T>,
    pub emb_ln_beta: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub mlm_output_bias: Array1<T>,
    pub nsp: Option<NspHead<T>>,
}

pub struct NamedTensor<'a, T> {
    pub name: String,
    pub tensor: ArrayViewD<'a, T>,
}

pub struct NamedTensorMut<'a, T> {
    pub name: String,
    pub tensor: ArrayViewMutD<'a, T>,
}

macro_rules! layer_fields {
    ($mac:ident) => {
        $mac!(query_w, "attention.query.weight");
        $mac!(query_b, "attention.query.bias");
        $mac!(key_w, "attention.key.weight");
        $mac!(key_b, "attention.key.bias");
        $mac!(value_w, "attention.value.weight");
        $mac!(value_b, "attention.value.bias");
        $mac!(attn_out_w, "attention.output.weight");
        $mac!(attn_out_b, "attention.output.bias");
        $mac!(attn_ln_gamma, "attention.layer_norm.gamma");
        $mac!(attn_ln_beta, "attention.layer_norm.beta");
        $mac!(ff_in_w, "ffn.intermediate.weight");
        $mac!(ff_in_b, "ffn.intermediate.bias");
        $mac!(ff_out_w, "ffn.output.weight");
        $mac!(ff_out_b, "ffn.output.bias");
        $mac!(ff_ln_gamma, "ffn.layer_norm.gamma");
        $mac!(ff_ln_beta, "ffn.layer_norm.beta");
    };
}

impl<T: Scalar> Params<T> {
    /// Shape-consistent zeros for `config`, with or without an NSP head.
    pub fn zeros(config: &TransformerConfig, with_nsp: bool) -> Self {
        let h = config.hidden_size;
        let f = config.ff_size;
        let z2 = |r, c| Array2::<T>::zeros((r, c));
        let z1 = |n| Array1::<T>::zeros(n);
        Self {
            token_embeddings: z2(config.vocab_size, h),
            position_embeddings: z2(config.max_seq_len, h),
            segment_embeddings: z2(NUM_SEGMENTS, h),
            emb_ln_gamma: z1(h),
            emb_ln_beta: z1(h),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    query_w: z2(h, h),
                    query_b: z1(h),
                    key_w: z2(h, h),
                    key_b: z1(h),
                    value_w: z2(h, h),
                    value_b: z1(h),
                    attn_out_w: z2(h, h),
                    attn_out_b: z1(h),
                    attn_ln_gamma: z1(h),
                    attn_ln_beta: z1(h),
                    ff_in_w: z2(h, f),
                    ff_in_b: z1(f),
                    ff_out_w: z2(f, h),
                    ff_out_b: z1(h),
                    ff_ln_gamma: z1(h),
                    ff_ln_beta: z1(h),
                })
                .collect(),
            mlm_output_bias: z1(config.vocab_size),
            nsp: with_nsp.then(|| NspHead {
                pooler_w: z2(h, h),
                pooler_b: z1(h),
                classifier_w: z2(h, 2),
                classifier_b: z1(2),
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|a| ArrayD::zeros(a.raw_dim()))
    }

    fn map(&self, f: impl Fn(&ArrayD<T>) -> ArrayD<T>) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            let mapped = f(&src.tensor.to_owned());
            let mut dst = dst.tensor;
            dst.assign(&mapped);
        }
        out
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {
                out.push(NamedTensor { name: $name, tensor: $t })
            };
        }
        push!("embeddings.token".into(), self.token_embeddings.view().into_dyn());
        push!("embeddings.position".into(), self.position_embeddings.view().into_dyn());
        push!("embeddings.segment".into(), self.segment_embeddings.view().into_dyn());
        push!("embeddings.layer_norm.gamma".into(), self.emb_ln_gamma.view().into_dyn());
        push!("embeddings.layer_norm.beta".into(), self.emb_ln_beta.view().into_dyn());
        for (i, layer) in self.layers.iter().enumerate() {
            macro_rules! field {
                ($f:ident, $n:expr) => {
                    push!(format!("layers.{i}.{}", $n), layer.$f.view().into_dyn());
                };
            }
            layer_fields!(field);
        }
        push!("mlm.output_bias".into(), self.mlm_output_bias.view().into_dyn());
        if let Some(nsp) = &self.nsp {
            push!("nsp.pooler.weight".into(), nsp.pooler_w.view().into_dyn());
            push!("nsp.pooler.bias".into(), nsp.pooler_b.view().into_dyn());
            push!("nsp.classifier.weight".into(), nsp.classifier_w.view().into_dyn());
            push!("nsp.classifier.bias".into(), nsp.classifier_b.view().into_dyn());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {
                out.push(NamedTensorMut { name: $name, tensor: $t })
            };
        }
        push!("embeddings.token".into(), self.token_embeddings.view_mut().into_dyn());
        push!("embeddings.position".into(), self.position_embeddings.view_mut().into_dyn());
        push!("embeddings.segment".into(), self.segment_embeddings.view_mut().into_dyn());
        push!("embeddings.layer_norm.gamma".into(), self.emb_ln_gamma.view_mut().into_dyn());
        push!("embeddings.layer_norm.beta".into(), self.emb_ln_beta.view_mut().into_dyn());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! field {
                ($f:ident, $n:expr) => {
                    push!(format!("layers.{i}.{}", $n), layer.$f.view_mut().into_dyn());
                };
            }
            layer_fields!(field);
        }
        push!("mlm.output_bias".into(), self.mlm_output_bias.view_mut().into_dyn());
        if let Some(nsp) = &mut self.nsp {
            push!("nsp.pooler.weight".into(), nsp.pooler_w.view_mut().into_dyn());
            push!("nsp.pooler.bias".into(), nsp.pooler_b.view_mut().into_dyn());
            push!("nsp.classifier.weight".into(), nsp.classifier_w.view_mut().into_dyn());
            push!("nsp.classifier.bias".into(), nsp.classifier_b.view_mut().into_dyn());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.tensor.len()).sum()
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let conv = |x: &T| U::from_f64(x.to_f64().expect("finite")).expect("representable");
        let c2 = |a: &Array2<T>| a.map(conv);
        let c1 = |a: &Array1<T>| a.map(conv);
        Params {
            token_embeddings: c2(&self.token_embeddings),
            position_embeddings: c2(&self.position_embeddings),
            segment_embeddings: c2(&self.segment_embeddings),
            emb_ln_gamma: c1(&self.emb_ln_gamma),
            emb_ln_beta: c1(&self.emb_ln_beta),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query_w: c2(&l.query_w),
                    query_b: c1(&l.query_b),
                    key_w: c2(&l.key_w),
                    key_b: c1(&l.key_b),
                    value_w: c2(&l.value_w),
                    value_b: c1(&l.value_b),
                    attn_out_w: c2(&l.attn_out_w),
                    attn_out_b: c1(&l.attn_out_b),
                    attn_ln_gamma: c1(&l.attn_ln_gamma),
                    attn_ln_beta: c1(&l.attn_ln_beta),
                    ff_in_w: c2(&l.ff_in_w),
                    ff_in_b: c1(&l.ff_in_b),
                    ff_out_w: c2(&l.ff_out_w),
                    ff_out_b: c1(&l.ff_out_b),
                    ff_ln_gamma: c1(&l.ff_ln_gamma),
                    ff_ln_beta: c1(&l.ff_ln_beta),
                })
                .collect(),
            mlm_output_bias: c1(&self.mlm_output_bias),
            nsp: self.nsp.as_ref().map(|n| NspHead {
                pooler_w: c2(&n.pooler_w),
                pooler_b: c1(&n.pooler_b),
                classifier_w: c2(&n.classifier_w),
                classifier_b: c1(&n.classifier_b),
            }),
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &TransformerConfig) -> Result<(), ModelError> {
        let expected = Self::zeros(config, self.nsp.is_some());
        let want = expected.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(ModelError::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: vec![want.len()],
                found: vec![have.len()],
            });
        }
        for (w, h) in want.iter().zip(&have) {
            if w.tensor.shape() != h.tensor.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: h.name.clone(),
                    expected: w.tensor.shape().to_vec(),
                    found: h.tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for t in self.tensors() {
            if t.tensor.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(t.name));
            }
        }
        Ok(())
    }
}

/// Random initialization: weights and embeddings from a truncated normal
/// with standard deviation 0.02, biases zero, layer-norm gain one and bias
/// zero. Deterministic per seed.
pub fn init_random(config: &TransformerConfig, seed: u64) -> Result<Params<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::<f32>::zeros(config, config.enable_nsp);
    for t in params.tensors_mut() {
        let mut tensor = t.tensor;
        if t.name.ends_with("layer_norm.gamma") {
            tensor.fill(1.0);
        } else if tensor.ndim() == 2 {
            for x in tensor.iter_mut() {
                *x = truncated_normal(&mut rng, INIT_STDDEV) as f32;
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let c = TransformerConfig::desk(50);
        assert_eq!(init_random(&c, 7).unwrap(), init_random(&c, 7).unwrap());
        assert_ne!(init_random(&c, 7).unwrap(), init_random(&c, 8).unwrap());
    }

    #[test]
    fn layer_norm_and_bias_init() {
        let p = init_random(&TransformerConfig::desk(50), 1).unwrap();
        for t in p.tensors() {
            if t.name.ends_with("gamma") {
                assert!(t.tensor.iter().all(|&x| x == 1.0), "{}", t.name);
            } else if t.tensor.ndim() == 1 {
                assert!(t.tensor.iter().all(|&x| x == 0.0), "{}", t.name);
            } else {
                assert!(t.tensor.iter().all(|&x| x.abs() <= 0.06), "{}", t.name);
            }
        }
    }

    #[test]
    fn embedding_stddev_close_to_init_scale() {
        // 2000 * 64 = 128k samples; 3-sigma truncation keeps 0.98658 of the stddev.
        let p = init_random(&TransformerConfig::desk(2000), 3).unwrap();
        let n = p.token_embeddings.len() as f64;
        let mean = p.token_embeddings.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = p.token_embeddings.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = INIT_STDDEV * 0.986_58;
        assert!((var.sqrt() - expected).abs() / expected < 0.02, "std {}", var.sqrt());
        assert!((var.sqrt() - INIT_STDDEV).abs() / INIT_STDDEV < 0.10);
    }

    #[test]
    fn census_for_two_layers() {
        let c = TransformerConfig::desk(40);
        let p = Params::<f32>::zeros(&c, false);
        // 5 embedding tensors + 16 per layer + output bias
        assert_eq!(p.tensors().len(), 5 + 16 * 2 + 1);
        let with_nsp = Params::<f32>::zeros(&c, true);
        assert_eq!(with_nsp.tensors().len(), 5 + 16 * 2 + 1 + 4);
        let names: std::collections::HashSet<_> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 38);
    }

    #[test]
    fn cast_round_trip() {
        let p = init_random(&TransformerConfig::desk(20), 2).unwrap();
        let back: Params<f32> = p.cast::<f64>().cast();
        assert_eq!(p, back);
    }
}
