//! Gated-attention multiple-instance network.
//!
//! A bag of M instance embeddings (M x d_in) is projected to M x d_proj,
//! scored by a gated attention network (tanh and sigmoid branches combined
//! elementwise, then a linear score and a softmax across instances), pooled
//! into a single bag vector by attention-weighted averaging, and mapped to
//! output logits by a final linear layer.
//!
//! Gradients are derived by hand for exactly this architecture; there is no
//! general autodiff here.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;

/// Dropout probability on the attention hidden activations (train mode only).
pub const ATTN_DROPOUT_P: f64 = 0.25;

/// Activation applied after the projection layer.
///
/// `Relu` is the production setting; `Identity` exists so numeric tests can
/// exercise the purely linear pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty bag: bags must contain at least one instance")]
    EmptyBag,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
}

/// Layer sizes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Instance feature dimension.
    pub d_in: usize,
    /// Projected embedding dimension.
    pub d_proj: usize,
    /// Attention hidden dimension.
    pub d_attn: usize,
    /// Output logits (classes, or hazard bins for survival).
    pub n_out: usize,
    #[serde(default)]
    pub proj_activation: Activation,
}

impl ModelDims {
    pub const DEFAULT_D_IN: usize = 1024;
    pub const DEFAULT_D_PROJ: usize = 512;
    pub const DEFAULT_D_ATTN: usize = 256;
    /// Number of discrete hazard bins used for survival prediction.
    pub const SURVIVAL_BINS: usize = 4;

    pub fn new(d_in: usize, d_proj: usize, d_attn: usize, n_out: usize) -> Self {
        Self {
            d_in,
            d_proj,
            d_attn,
            n_out,
            proj_activation: Activation::Relu,
        }
    }

    /// Default architecture for an `n_classes`-way classifier.
    pub fn classification(n_classes: usize) -> Self {
        Self::new(
            Self::DEFAULT_D_IN,
            Self::DEFAULT_D_PROJ,
            Self::DEFAULT_D_ATTN,
            n_classes,
        )
    }

    /// Default architecture for discrete-time survival prediction.
    pub fn survival() -> Self {
        Self::new(
            Self::DEFAULT_D_IN,
            Self::DEFAULT_D_PROJ,
            Self::DEFAULT_D_ATTN,
            Self::SURVIVAL_BINS,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_proj", self.d_proj),
            ("d_attn", self.d_attn),
            ("n_out", self.n_out),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidDims(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Canonical tensor order used by the optimizer, federation averaging, the
/// noise mechanism, and checkpoints. Do not reorder.
pub const TENSOR_NAMES: [&str; 10] = [
    "proj.weight",
    "proj.bias",
    "attn_u.weight",
    "attn_u.bias",
    "attn_v.weight",
    "attn_v.bias",
    "attn_score.weight",
    "attn_score.bias",
    "pred.weight",
    "pred.bias",
];

macro_rules! impl_tensor_access {
    ($ty:ty) => {
        impl $ty {
            /// All tensors in canonical order.
            pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
                vec![
                    ("proj.weight", self.w_proj.view().into_dyn()),
                    ("proj.bias", self.b_proj.view().into_dyn()),
                    ("attn_u.weight", self.u_a.view().into_dyn()),
                    ("attn_u.bias", self.b_u.view().into_dyn()),
                    ("attn_v.weight", self.v_a.view().into_dyn()),
                    ("attn_v.bias", self.b_v.view().into_dyn()),
                    ("attn_score.weight", self.w_a.view().into_dyn()),
                    ("attn_score.bias", self.b_w.view().into_dyn()),
                    ("pred.weight", self.w_pred.view().into_dyn()),
                    ("pred.bias", self.b_pred.view().into_dyn()),
                ]
            }

            /// Mutable views of all tensors in canonical order.
            pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
                vec![
                    ("proj.weight", self.w_proj.view_mut().into_dyn()),
                    ("proj.bias", self.b_proj.view_mut().into_dyn()),
                    ("attn_u.weight", self.u_a.view_mut().into_dyn()),
                    ("attn_u.bias", self.b_u.view_mut().into_dyn()),
                    ("attn_v.weight", self.v_a.view_mut().into_dyn()),
                    ("attn_v.bias", self.b_v.view_mut().into_dyn()),
                    ("attn_score.weight", self.w_a.view_mut().into_dyn()),
                    ("attn_score.bias", self.b_w.view_mut().into_dyn()),
                    ("pred.weight", self.w_pred.view_mut().into_dyn()),
                    ("pred.bias", self.b_pred.view_mut().into_dyn()),
                ]
            }

            pub fn is_finite(&self) -> bool {
                self.tensors()
                    .iter()
                    .all(|(_, t)| t.iter().all(|x| x.is_finite()))
            }

            /// Largest absolute elementwise difference across all tensors.
            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.tensors()
                    .iter()
                    .zip(other.tensors().iter())
                    .map(|((_, a), (_, b))| {
                        a.iter()
                            .zip(b.iter())
                            .map(|(x, y)| (x - y).abs())
                            .fold(0.0_f64, f64::max)
                    })
                    .fold(0.0_f64, f64::max)
            }
        }
    };
}

/// All trainable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub dims: ModelDims,
    /// d_proj x d_in
    pub w_proj: Array2<f64>,
    /// d_proj
    pub b_proj: Array1<f64>,
    /// d_attn x d_proj, sigmoid gate branch
    pub u_a: Array2<f64>,
    pub b_u: Array1<f64>,
    /// d_attn x d_proj, tanh branch
    pub v_a: Array2<f64>,
    pub b_v: Array1<f64>,
    /// 1 x d_attn, attention score layer
    pub w_a: Array2<f64>,
    pub b_w: Array1<f64>,
    /// n_out x d_proj
    pub w_pred: Array2<f64>,
    pub b_pred: Array1<f64>,
}

impl_tensor_access!(ModelWeights);

/// Per-tensor gradients, shape-congruent with [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dims: ModelDims,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub u_a: Array2<f64>,
    pub b_u: Array1<f64>,
    pub v_a: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_a: Array2<f64>,
    pub b_w: Array1<f64>,
    pub w_pred: Array2<f64>,
    pub b_pred: Array1<f64>,
}

impl_tensor_access!(Gradients);

impl ModelWeights {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            w_proj: Array2::zeros((dims.d_proj, dims.d_in)),
            b_proj: Array1::zeros(dims.d_proj),
            u_a: Array2::zeros((dims.d_attn, dims.d_proj)),
            b_u: Array1::zeros(dims.d_attn),
            v_a: Array2::zeros((dims.d_attn, dims.d_proj)),
            b_v: Array1::zeros(dims.d_attn),
            w_a: Array2::zeros((1, dims.d_attn)),
            b_w: Array1::zeros(1),
            w_pred: Array2::zeros((dims.n_out, dims.d_proj)),
            b_pred: Array1::zeros(dims.n_out),
        }
    }
}

impl Gradients {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            w_proj: Array2::zeros((dims.d_proj, dims.d_in)),
            b_proj: Array1::zeros(dims.d_proj),
            u_a: Array2::zeros((dims.d_attn, dims.d_proj)),
            b_u: Array1::zeros(dims.d_attn),
            v_a: Array2::zeros((dims.d_attn, dims.d_proj)),
            b_v: Array1::zeros(dims.d_attn),
            w_a: Array2::zeros((1, dims.d_attn)),
            b_w: Array1::zeros(1),
            w_pred: Array2::zeros((dims.n_out, dims.d_proj)),
            b_pred: Array1::zeros(dims.n_out),
        }
    }
}

/// Initialize weights deterministically from `seed`.
///
/// Weight matrices draw from N(0, 2/fan_in) truncated at two standard
/// deviations; biases start at zero. Each tensor gets its own named stream,
/// so initialization does not depend on enumeration order.
pub fn init_weights(dims: ModelDims, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::zeros(dims);
    for (name, mut tensor) in w.tensors_mut() {
        if name.ends_with(".bias") {
            continue;
        }
        // fan_in = number of inputs feeding each output unit = last axis.
        let fan_in = tensor.shape()[tensor.ndim() - 1];
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = derive_rng(seed, &["init", name]);
        for x in tensor.iter_mut() {
            *x = std * truncated_standard_normal(&mut rng, 2.0);
        }
    }
    w
}

/// Standard normal draw rejected until it falls within `cutoff` deviations.
fn truncated_standard_normal(rng: &mut ChaCha8Rng, cutoff: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        if z.abs() <= cutoff {
            return z;
        }
    }
}

/// Everything cached by a forward pass that the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// M x d_in input bag.
    pub input: Array2<f64>,
    /// M x d_proj pre-activation of the projection layer.
    pub proj_pre: Array2<f64>,
    /// M x d_proj projected embeddings (post activation).
    pub h: Array2<f64>,
    /// M x d_attn tanh branch activations (before dropout).
    pub tanh_act: Array2<f64>,
    /// M x d_attn sigmoid branch activations (before dropout).
    pub sigm_act: Array2<f64>,
    /// Inverted-dropout masks (entries 0 or 1/(1-p)); present in train mode.
    pub mask_tanh: Option<Array2<f64>>,
    pub mask_sigm: Option<Array2<f64>>,
    /// M pre-softmax attention scores.
    pub scores: Array1<f64>,
    /// M softmax attention weights; positive, sums to 1.
    pub attention: Array1<f64>,
    /// d_proj pooled bag representation.
    pub h_bag: Array1<f64>,
    /// n_out output logits.
    pub logits: Array1<f64>,
}

/// Forward-pass mode. Train mode draws dropout masks from the given stream.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(scores: &ArrayView1<f64>) -> Array1<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = scores.mapv(|s| (s - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn outer(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Gated attention weights for pre-projected embeddings `h` (M x d_proj),
/// evaluated without dropout.
pub fn attention_scores(
    weights: &ModelWeights,
    h: &ArrayView2<f64>,
) -> Result<Array1<f64>, ModelError> {
    if h.nrows() == 0 {
        return Err(ModelError::EmptyBag);
    }
    if h.ncols() != weights.dims.d_proj {
        return Err(ModelError::ShapeMismatch {
            what: "attention input",
            expected: vec![h.nrows(), weights.dims.d_proj],
            got: h.shape().to_vec(),
        });
    }
    let tanh_act = (h.dot(&weights.v_a.t()) + &weights.b_v).mapv(f64::tanh);
    let sigm_act = (h.dot(&weights.u_a.t()) + &weights.b_u).mapv(sigmoid);
    let gate = &tanh_act * &sigm_act;
    let scores = gate.dot(&weights.w_a.row(0)) + weights.b_w[0];
    Ok(softmax(&scores.view()))
}

/// Attention-weighted average of the rows of `h`.
pub fn attn_pool(
    attention: &ArrayView1<f64>,
    h: &ArrayView2<f64>,
) -> Result<Array1<f64>, ModelError> {
    if attention.len() != h.nrows() {
        return Err(ModelError::ShapeMismatch {
            what: "attention pooling",
            expected: vec![h.nrows()],
            got: vec![attention.len()],
        });
    }
    Ok(attention.dot(h))
}

/// Run the full network over one bag.
///
/// Train mode applies inverted dropout (p = [`ATTN_DROPOUT_P`]) to the
/// attention hidden activations; eval mode is deterministic.
pub fn forward_bag(
    weights: &ModelWeights,
    bag: &ArrayView2<f64>,
    mode: ForwardMode<'_>,
) -> Result<ForwardTrace, ModelError> {
    let m = bag.nrows();
    if m == 0 {
        return Err(ModelError::EmptyBag);
    }
    if bag.ncols() != weights.dims.d_in {
        return Err(ModelError::ShapeMismatch {
            what: "bag features",
            expected: vec![m, weights.dims.d_in],
            got: bag.shape().to_vec(),
        });
    }
    if bag.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite("bag features"));
    }

    let proj_pre = bag.dot(&weights.w_proj.t()) + &weights.b_proj;
    let h = match weights.dims.proj_activation {
        Activation::Relu => proj_pre.mapv(|z| z.max(0.0)),
        Activation::Identity => proj_pre.clone(),
    };

    let tanh_act = (h.dot(&weights.v_a.t()) + &weights.b_v).mapv(f64::tanh);
    let sigm_act = (h.dot(&weights.u_a.t()) + &weights.b_u).mapv(sigmoid);

    let (mask_tanh, mask_sigm) = match mode {
        ForwardMode::Eval => (None, None),
        ForwardMode::Train(rng) => {
            let keep = 1.0 / (1.0 - ATTN_DROPOUT_P);
            let mut draw = |shape: (usize, usize)| {
                Array2::from_shape_fn(shape, |_| {
                    if rng.random::<f64>() < ATTN_DROPOUT_P {
                        0.0
                    } else {
                        keep
                    }
                })
            };
            let mt = draw(tanh_act.dim());
            let ms = draw(sigm_act.dim());
            (Some(mt), Some(ms))
        }
    };

    let dropped_tanh = match &mask_tanh {
        Some(mask) => &tanh_act * mask,
        None => tanh_act.clone(),
    };
    let dropped_sigm = match &mask_sigm {
        Some(mask) => &sigm_act * mask,
        None => sigm_act.clone(),
    };
    let gate = &dropped_tanh * &dropped_sigm;

    let scores = gate.dot(&weights.w_a.row(0)) + weights.b_w[0];
    let attention = softmax(&scores.view());
    let h_bag = attention.dot(&h);
    let logits = weights.w_pred.dot(&h_bag) + &weights.b_pred;

    Ok(ForwardTrace {
        input: bag.to_owned(),
        proj_pre,
        h,
        tanh_act,
        sigm_act,
        mask_tanh,
        mask_sigm,
        scores,
        attention,
        h_bag,
        logits,
    })
}

/// Exact gradients of a scalar loss with respect to every tensor, given the
/// loss gradient at the logits. Reuses the dropout masks cached in the trace.
pub fn backward_bag(
    weights: &ModelWeights,
    trace: &ForwardTrace,
    dloss_dlogits: &ArrayView1<f64>,
) -> Result<Gradients, ModelError> {
    let dims = weights.dims;
    if dloss_dlogits.len() != dims.n_out {
        return Err(ModelError::ShapeMismatch {
            what: "logit gradient",
            expected: vec![dims.n_out],
            got: vec![dloss_dlogits.len()],
        });
    }
    if trace.h.ncols() != dims.d_proj || trace.input.ncols() != dims.d_in {
        return Err(ModelError::ShapeMismatch {
            what: "trace/weights",
            expected: vec![dims.d_proj, dims.d_in],
            got: vec![trace.h.ncols(), trace.input.ncols()],
        });
    }

    let mut grads = Gradients::zeros(dims);

    // Prediction layer: s = W_pred h_bag + b_pred.
    grads.w_pred = outer(dloss_dlogits, &trace.h_bag.view());
    grads.b_pred = dloss_dlogits.to_owned();
    let d_h_bag = weights.w_pred.t().dot(dloss_dlogits);

    // Pooling: h_bag = sum_m a_m h_m.
    let d_attention = trace.h.dot(&d_h_bag);
    let mut d_h = outer(&trace.attention.view(), &d_h_bag.view());

    // Softmax over instances: de_m = a_m (da_m - sum_k a_k da_k).
    let dot = trace.attention.dot(&d_attention);
    let d_scores = &trace.attention * &d_attention.mapv(|d| d - dot);

    // Score layer: e_m = W_a gate_m + b_w.
    let dropped_tanh = match &trace.mask_tanh {
        Some(mask) => &trace.tanh_act * mask,
        None => trace.tanh_act.clone(),
    };
    let dropped_sigm = match &trace.mask_sigm {
        Some(mask) => &trace.sigm_act * mask,
        None => trace.sigm_act.clone(),
    };
    let gate = &dropped_tanh * &dropped_sigm;
    grads.w_a = d_scores.dot(&gate).insert_axis(Axis(0));
    grads.b_w[0] = d_scores.sum();
    let d_gate = outer(&d_scores.view(), &weights.w_a.row(0));

    // Gate: gate = dropped_tanh * dropped_sigm; dropout is elementwise.
    let mut d_tanh = &d_gate * &dropped_sigm;
    let mut d_sigm = &d_gate * &dropped_tanh;
    if let Some(mask) = &trace.mask_tanh {
        d_tanh = &d_tanh * mask;
    }
    if let Some(mask) = &trace.mask_sigm {
        d_sigm = &d_sigm * mask;
    }
    let d_tanh_pre = &d_tanh * &trace.tanh_act.mapv(|u| 1.0 - u * u);
    let d_sigm_pre = &d_sigm * &trace.sigm_act.mapv(|g| g * (1.0 - g));

    grads.v_a = d_tanh_pre.t().dot(&trace.h);
    grads.b_v = d_tanh_pre.sum_axis(Axis(0));
    grads.u_a = d_sigm_pre.t().dot(&trace.h);
    grads.b_u = d_sigm_pre.sum_axis(Axis(0));

    // Both attention branches feed back into the projected embeddings.
    d_h = d_h + d_tanh_pre.dot(&weights.v_a) + d_sigm_pre.dot(&weights.u_a);

    // Projection layer.
    let d_proj_pre = match dims.proj_activation {
        Activation::Relu => {
            let gate = trace.proj_pre.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            &d_h * &gate
        }
        Activation::Identity => d_h,
    };
    grads.w_proj = d_proj_pre.t().dot(&trace.input);
    grads.b_proj = d_proj_pre.sum_axis(Axis(0));

    Ok(grads)
}
