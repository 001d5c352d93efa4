//! A toy recognizer with unit-norm embeddings and a hyperspherical
//! classifier.
//!
//! The extractor is either a stack of 2-3 strided 5x5 conv+ReLU stages with
//! a linear head, or a small MLP over flattened pixels. Embeddings are
//! l2-normalized; the classifier is a `classes x embed_dim` matrix whose
//! rows are kept at unit norm by [`sgd_update`], so raw logits are cosines.
//! Margin variants modify only the target-class logit.
//!
//! All parameters live in one flat vector with a fixed layout (declaration
//! order: extractor tensors, then the classifier matrix). Gradients are
//! hand-derived and exact; tests hold them to finite differences.

mod net;

use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::rng::Stream;
use crate::warp::ImageTensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub(crate) use net::stage_shapes;

/// Cosine clamp applied before `acos` in the angular variant.
const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorKind {
    /// Strided conv stages with the given output channel counts (2 or 3),
    /// then a linear map to the embedding dimension.
    Conv { stage_channels: Vec<usize> },
    /// Flatten, one hidden ReLU layer, then a linear map to the embedding.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_channels: usize,
    pub input_shape: GridShape,
    pub extractor: ExtractorKind,
    pub embed_dim: usize,
    pub classes: usize,
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Validation("model: input channels must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.classes < 2 {
            return Err(Error::Validation(format!(
                "model: need embed_dim >= 1 and classes >= 2, got d={} c={}",
                self.embed_dim, self.classes
            )));
        }
        match &self.extractor {
            ExtractorKind::Conv { stage_channels } => {
                if !(2..=3).contains(&stage_channels.len()) {
                    return Err(Error::Validation(format!(
                        "model: conv extractor takes 2 or 3 stages, got {}",
                        stage_channels.len()
                    )));
                }
                if stage_channels.iter().any(|&c| c == 0) {
                    return Err(Error::Validation("model: stage channels must be >= 1".into()));
                }
                let shapes = stage_shapes(self.input_shape, stage_channels.len());
                let last = shapes.last().unwrap();
                if last.height == 0 || last.width == 0 {
                    return Err(Error::Validation("model: input too small for the conv stack".into()));
                }
            }
            ExtractorKind::Mlp { hidden } => {
                if *hidden == 0 {
                    return Err(Error::Validation("model: mlp hidden width must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Margin applied to the target-class logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginVariant {
    Softmax,
    AdditiveAngular,
    AdditiveCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub variant: MarginVariant,
    pub logit_scale: f64,
    pub margin: f64,
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Validation(format!(
                "margin.scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Validation(format!("margin.value must be >= 0, got {}", self.margin)));
        }
        if self.variant == MarginVariant::AdditiveAngular && self.margin >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Validation(format!(
                "margin.value must be < pi/2 for the angular variant, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All trainable weights in one flat vector with a fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub flat: Vec<f64>,
    layout: Vec<ParamEntry>,
    classifier_offset: usize,
}

fn build_layout(meta: &ModelMeta) -> (Vec<ParamEntry>, usize) {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let len: usize = shape.iter().product();
        entries.push(ParamEntry {
            name,
            shape,
            offset: *offset,
            len,
        });
        *offset += len;
    };
    match &meta.extractor {
        ExtractorKind::Conv { stage_channels } => {
            let mut in_ch = meta.input_channels;
            for (s, &out_ch) in stage_channels.iter().enumerate() {
                push(format!("stage{s}.kernel"), vec![out_ch, in_ch, net::KSIZE, net::KSIZE], &mut offset);
                push(format!("stage{s}.bias"), vec![out_ch], &mut offset);
                in_ch = out_ch;
            }
            let shapes = stage_shapes(meta.input_shape, stage_channels.len());
            let flat_len = in_ch * shapes.last().unwrap().len();
            push("fc.weight".into(), vec![meta.embed_dim, flat_len], &mut offset);
            push("fc.bias".into(), vec![meta.embed_dim], &mut offset);
        }
        ExtractorKind::Mlp { hidden } => {
            let in_len = meta.input_channels * meta.input_shape.len();
            push("fc1.weight".into(), vec![*hidden, in_len], &mut offset);
            push("fc1.bias".into(), vec![*hidden], &mut offset);
            push("fc2.weight".into(), vec![meta.embed_dim, *hidden], &mut offset);
            push("fc2.bias".into(), vec![meta.embed_dim], &mut offset);
        }
    }
    let classifier_offset = offset;
    push("classifier.weight".into(), vec![meta.classes, meta.embed_dim], &mut offset);
    (entries, classifier_offset)
}

impl ModelParams {
    /// Randomly initialize: He-scaled weights, zero biases except a small
    /// random bias on the embedding layer (keeps the pre-normalization
    /// vector away from zero even if every upstream ReLU is dead), and
    /// unit-norm classifier rows.
    pub fn init(meta: ModelMeta, rng: &mut Stream) -> Result<Self> {
        meta.validate()?;
        let (layout, classifier_offset) = build_layout(&meta);
        let total: usize = layout.iter().map(|e| e.len).sum();
        let mut flat = vec![0.0; total];
        for entry in &layout {
            let embed_bias = entry.name == "fc.bias" || entry.name == "fc2.bias";
            if entry.name.ends_with(".bias") && !embed_bias {
                continue;
            }
            let std = if embed_bias {
                0.05
            } else {
                let fan_in: usize = entry.shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).expect("normal");
            for slot in &mut flat[entry.offset..entry.offset + entry.len] {
                *slot = dist.sample(rng);
            }
        }
        let mut params = ModelParams {
            meta,
            flat,
            layout,
            classifier_offset,
        };
        params.renormalize_classifier();
        Ok(params)
    }

    pub fn from_flat(meta: ModelMeta, flat: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        let (layout, classifier_offset) = build_layout(&meta);
        let total: usize = layout.iter().map(|e| e.len).sum();
        if flat.len() != total {
            return Err(Error::Validation(format!(
                "model weights: expected {total} values, got {}",
                flat.len()
            )));
        }
        Ok(ModelParams {
            meta,
            flat,
            layout,
            classifier_offset,
        })
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn param_len(&self) -> usize {
        self.flat.len()
    }

    /// First flat index of the classifier matrix; weight decay applies only
    /// below this boundary.
    pub fn classifier_offset(&self) -> usize {
        self.classifier_offset
    }

    fn entry(&self, name: &str) -> &ParamEntry {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter tensor named {name}"))
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        let e = self.entry(name);
        &self.flat[e.offset..e.offset + e.len]
    }

    fn classifier(&self) -> &[f64] {
        &self.flat[self.classifier_offset..]
    }

    /// Rescale every classifier row to unit norm (rows with zero norm are
    /// left untouched).
    pub fn renormalize_classifier(&mut self) {
        let d = self.meta.embed_dim;
        for row in self.flat[self.classifier_offset..].chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    pub fn classifier_rows_unit_norm(&self, tol: f64) -> bool {
        self.classifier()
            .chunks(self.meta.embed_dim)
            .all(|row| (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= tol)
    }

    fn check_input(&self, x: &ImageTensor) {
        assert!(
            x.channels == self.meta.input_channels && x.shape == self.meta.input_shape,
            "input {}x{}x{} does not match the configured {}x{}x{}",
            x.channels,
            x.shape.height,
            x.shape.width,
            self.meta.input_channels,
            self.meta.input_shape.height,
            self.meta.input_shape.width,
        );
    }
}

struct ForwardCache {
    /// Per conv stage: pre-activation and post-ReLU buffers (the MLP path
    /// stores its single hidden layer the same way).
    pres: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    /// Pre-normalization embedding and its norm.
    v: Vec<f64>,
    v_norm: f64,
}

fn extractor_forward(params: &ModelParams, x: &ImageTensor) -> ForwardCache {
    let meta = &params.meta;
    let d = meta.embed_dim;
    let mut pres = Vec::new();
    let mut acts = Vec::new();
    let mut v = vec![0.0; d];
    match &meta.extractor {
        ExtractorKind::Conv { stage_channels } => {
            let shapes = stage_shapes(meta.input_shape, stage_channels.len());
            let mut in_ch = meta.input_channels;
            let mut in_shape = meta.input_shape;
            let mut current = x.data.clone();
            for (s, &out_ch) in stage_channels.iter().enumerate() {
                let out_shape = shapes[s];
                let mut pre = vec![0.0; out_ch * out_shape.len()];
                net::conv_forward(
                    params.tensor(&format!("stage{s}.kernel")),
                    params.tensor(&format!("stage{s}.bias")),
                    &current,
                    in_ch,
                    in_shape,
                    out_ch,
                    out_shape,
                    &mut pre,
                );
                let mut act = pre.clone();
                net::relu(&mut act);
                pres.push(pre);
                current = act.clone();
                acts.push(act);
                in_ch = out_ch;
                in_shape = out_shape;
            }
            let flat_len = in_ch * in_shape.len();
            net::linear_forward(params.tensor("fc.weight"), params.tensor("fc.bias"), &current, d, flat_len, &mut v);
        }
        ExtractorKind::Mlp { hidden } => {
            let in_len = meta.input_channels * meta.input_shape.len();
            let mut pre = vec![0.0; *hidden];
            net::linear_forward(params.tensor("fc1.weight"), params.tensor("fc1.bias"), &x.data, *hidden, in_len, &mut pre);
            let mut act = pre.clone();
            net::relu(&mut act);
            net::linear_forward(params.tensor("fc2.weight"), params.tensor("fc2.bias"), &act, d, *hidden, &mut v);
            pres.push(pre);
            acts.push(act);
        }
    }
    let v_norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    ForwardCache { pres, acts, v, v_norm }
}

/// Smallest absolute pre-activation across all ReLU layers for this input.
/// Gradient-check trials use it to stay away from activation kinks.
pub fn relu_margin(params: &ModelParams, x: &ImageTensor) -> f64 {
    params.check_input(x);
    let cache = extractor_forward(params, x);
    cache
        .pres
        .iter()
        .flat_map(|stage| stage.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Map an image to its unit-norm embedding.
///
/// # Panics
///
/// Panics if the input shape does not match the configured one (contract
/// violation), or if the pre-normalization embedding has zero norm.
pub fn embed(params: &ModelParams, x: &ImageTensor) -> Vec<f64> {
    params.check_input(x);
    let cache = extractor_forward(params, x);
    assert!(
        cache.v_norm.is_finite() && cache.v_norm > 0.0,
        "embedding norm must be positive and finite, got {}",
        cache.v_norm
    );
    cache.v.iter().map(|a| a / cache.v_norm).collect()
}

/// Cosines between an embedding and every classifier row.
pub fn cosines(params: &ModelParams, z: &[f64]) -> Vec<f64> {
    let d = params.meta.embed_dim;
    params
        .classifier()
        .chunks(d)
        .map(|row| row.iter().zip(z).map(|(w, zz)| w * zz).sum())
        .collect()
}

fn margined_logits(cos: &[f64], y: usize, cfg: &MarginConfig) -> Vec<f64> {
    let s = cfg.logit_scale;
    let mut logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
    match cfg.variant {
        MarginVariant::Softmax => {}
        MarginVariant::AdditiveCosine => logits[y] = s * (cos[y] - cfg.margin),
        MarginVariant::AdditiveAngular => {
            let c = cos[y].clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
            logits[y] = s * (c.acos() + cfg.margin).cos();
        }
    }
    logits
}

fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let loss = -(logits[y] - max - sum.ln());
    (loss, probs)
}

/// Cross-entropy over margin-adjusted cosine logits.
pub fn margin_loss(z: &[f64], y: usize, params: &ModelParams, cfg: &MarginConfig) -> f64 {
    assert!(y < params.meta.classes, "label {y} out of range");
    let cos = cosines(params, z);
    let (loss, _) = cross_entropy(&margined_logits(&cos, y, cfg), y);
    loss
}

/// Full forward pass: embedding plus margin loss.
pub fn loss(params: &ModelParams, x: &ImageTensor, y: usize, cfg: &MarginConfig) -> Result<f64> {
    let z = embed(params, x);
    let l = margin_loss(&z, y, params, cfg);
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss is {l} for label {y}")));
    }
    Ok(l)
}

/// Which gradients [`backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Params,
    Input,
    Both,
}

pub struct Backward {
    pub loss: f64,
    pub grad_params: Option<Vec<f64>>,
    pub grad_input: Option<ImageTensor>,
}

/// Exact analytic gradients of the margin loss with respect to the flat
/// parameter vector and/or the input pixels.
pub fn backward(params: &ModelParams, x: &ImageTensor, y: usize, cfg: &MarginConfig, mode: GradMode) -> Result<Backward> {
    params.check_input(x);
    assert!(y < params.meta.classes, "label {y} out of range");
    let meta = &params.meta;
    let d = meta.embed_dim;
    let cache = extractor_forward(params, x);
    if !(cache.v_norm.is_finite() && cache.v_norm > 0.0) {
        return Err(Error::Numeric(format!(
            "pre-normalization embedding norm is {}",
            cache.v_norm
        )));
    }
    let z: Vec<f64> = cache.v.iter().map(|a| a / cache.v_norm).collect();
    let cos = cosines(params, &z);
    let logits = margined_logits(&cos, y, cfg);
    let (loss_value, probs) = cross_entropy(&logits, y);
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss_value} for label {y}")));
    }

    // d loss / d logit
    let mut d_logit = probs;
    d_logit[y] -= 1.0;

    // d logit / d cos per class (only the target differs across variants)
    let s = cfg.logit_scale;
    let target_factor = match cfg.variant {
        MarginVariant::Softmax => s,
        MarginVariant::AdditiveCosine => s,
        MarginVariant::AdditiveAngular => {
            let c = cos[y];
            if c <= -1.0 + COS_CLAMP || c >= 1.0 - COS_CLAMP {
                0.0 // clamp region: the forward is locally constant in cos
            } else {
                let a = c.acos();
                s * (a + cfg.margin).sin() / (1.0 - c * c).sqrt()
            }
        }
    };

    let wanted_params = matches!(mode, GradMode::Params | GradMode::Both);
    let wanted_input = matches!(mode, GradMode::Input | GradMode::Both);

    let mut grad_params = wanted_params.then(|| vec![0.0; params.param_len()]);

    // d loss / d z and classifier gradient
    let classifier = params.classifier();
    let mut d_z = vec![0.0; d];
    for (i, row) in classifier.chunks(d).enumerate() {
        let g = d_logit[i] * if i == y { target_factor } else { s };
        for (k, w) in row.iter().enumerate() {
            d_z[k] += g * w;
        }
        if let Some(gp) = grad_params.as_deref_mut() {
            let out = &mut gp[params.classifier_offset + i * d..params.classifier_offset + (i + 1) * d];
            for (slot, zz) in out.iter_mut().zip(&z) {
                *slot = g * zz;
            }
        }
    }

    // through the l2 normalization: dv = (dz - (dz . z) z) / |v|
    let dot: f64 = d_z.iter().zip(&z).map(|(a, b)| a * b).sum();
    let d_v: Vec<f64> = d_z
        .iter()
        .zip(&z)
        .map(|(g, zz)| (g - dot * zz) / cache.v_norm)
        .collect();

    // extractor backward
    let mut grad_input = wanted_input.then(|| ImageTensor::zeros(meta.input_channels, meta.input_shape));
    match &meta.extractor {
        ExtractorKind::Conv { stage_channels } => {
            let shapes = stage_shapes(meta.input_shape, stage_channels.len());
            let n_stages = stage_channels.len();
            let last_ch = *stage_channels.last().unwrap();
            let flat_len = last_ch * shapes.last().unwrap().len();

            let mut d_act = vec![0.0; flat_len];
            {
                let fc_w = params.tensor("fc.weight");
                let last_act = &cache.acts[n_stages - 1];
                let mut dw = wanted_params.then(|| vec![0.0; d * flat_len]);
                let mut db = wanted_params.then(|| vec![0.0; d]);
                net::linear_backward(
                    fc_w,
                    last_act,
                    d,
                    flat_len,
                    &d_v,
                    dw.get_or_insert_with(|| vec![0.0; d * flat_len]),
                    db.get_or_insert_with(|| vec![0.0; d]),
                    Some(&mut d_act),
                );
                if let Some(gp) = grad_params.as_deref_mut() {
                    let e = params.entry("fc.weight");
                    gp[e.offset..e.offset + e.len].copy_from_slice(&dw.unwrap());
                    let e = params.entry("fc.bias");
                    gp[e.offset..e.offset + e.len].copy_from_slice(&db.unwrap());
                }
            }

            for s_idx in (0..n_stages).rev() {
                let out_shape = shapes[s_idx];
                let out_ch = stage_channels[s_idx];
                let (in_ch, in_shape) = if s_idx == 0 {
                    (meta.input_channels, meta.input_shape)
                } else {
                    (stage_channels[s_idx - 1], shapes[s_idx - 1])
                };
                let mut d_pre = vec![0.0; out_ch * out_shape.len()];
                net::relu_backward(&cache.pres[s_idx], &d_act, &mut d_pre);

                let input: &[f64] = if s_idx == 0 { &x.data } else { &cache.acts[s_idx - 1] };
                let need_input_grad = s_idx > 0 || wanted_input;
                let mut d_in = need_input_grad.then(|| vec![0.0; in_ch * in_shape.len()]);
                let kernel = params.tensor(&format!("stage{s_idx}.kernel"));
                let mut dk = vec![0.0; kernel.len()];
                let mut db = vec![0.0; out_ch];
                net::conv_backward(
                    kernel,
                    input,
                    in_ch,
                    in_shape,
                    out_ch,
                    out_shape,
                    &d_pre,
                    &mut dk,
                    &mut db,
                    d_in.as_deref_mut(),
                );
                if let Some(gp) = grad_params.as_deref_mut() {
                    let e = params.entry(&format!("stage{s_idx}.kernel"));
                    gp[e.offset..e.offset + e.len].copy_from_slice(&dk);
                    let e = params.entry(&format!("stage{s_idx}.bias"));
                    gp[e.offset..e.offset + e.len].copy_from_slice(&db);
                }
                if s_idx == 0 {
                    if let (Some(gi), Some(di)) = (grad_input.as_mut(), d_in) {
                        gi.data.copy_from_slice(&di);
                    }
                } else {
                    d_act = d_in.unwrap();
                }
            }
        }
        ExtractorKind::Mlp { hidden } => {
            let in_len = meta.input_channels * meta.input_shape.len();
            let mut d_hidden_act = vec![0.0; *hidden];
            {
                let mut dw = vec![0.0; d * *hidden];
                let mut db = vec![0.0; d];
                net::linear_backward(
                    params.tensor("fc2.weight"),
                    &cache.acts[0],
                    d,
                    *hidden,
                    &d_v,
                    &mut dw,
                    &mut db,
                    Some(&mut d_hidden_act),
                );
                if let Some(gp) = grad_params.as_deref_mut() {
                    let e = params.entry("fc2.weight");
                    gp[e.offset..e.offset + e.len].copy_from_slice(&dw);
                    let e = params.entry("fc2.bias");
                    gp[e.offset..e.offset + e.len].copy_from_slice(&db);
                }
            }
            let mut d_pre = vec![0.0; *hidden];
            net::relu_backward(&cache.pres[0], &d_hidden_act, &mut d_pre);
            let mut dw = vec![0.0; *hidden * in_len];
            let mut db = vec![0.0; *hidden];
            let mut d_in = vec![0.0; in_len];
            net::linear_backward(
                params.tensor("fc1.weight"),
                &x.data,
                *hidden,
                in_len,
                &d_pre,
                &mut dw,
                &mut db,
                Some(&mut d_in),
            );
            if let Some(gp) = grad_params.as_deref_mut() {
                let e = params.entry("fc1.weight");
                gp[e.offset..e.offset + e.len].copy_from_slice(&dw);
                let e = params.entry("fc1.bias");
                gp[e.offset..e.offset + e.len].copy_from_slice(&db);
            }
            if let Some(gi) = grad_input.as_mut() {
                gi.data.copy_from_slice(&d_in);
            }
        }
    }

    if let Some(gp) = grad_params.as_deref() {
        if gp.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite parameter gradient".into()));
        }
    }
    if let Some(gi) = grad_input.as_ref() {
        if !gi.all_finite() {
            return Err(Error::Numeric("non-finite input gradient".into()));
        }
    }

    Ok(Backward {
        loss: loss_value,
        grad_params,
        grad_input,
    })
}

/// Momentum buffer for [`sgd_update`].
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: vec![0.0; params.param_len()],
        }
    }
}

/// Momentum SGD step. Weight decay applies to extractor weights only; the
/// classifier rows are rescaled to unit norm after the step.
pub fn sgd_update(
    params: &mut ModelParams,
    state: &mut SgdState,
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(grads.len(), params.param_len(), "gradient length mismatch");
    let boundary = params.classifier_offset;
    for (idx, ((w, v), g)) in params.flat.iter_mut().zip(&mut state.velocity).zip(grads).enumerate() {
        let g = if idx < boundary { g + weight_decay * *w } else { *g };
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    params.renormalize_classifier();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn small_meta(extractor: ExtractorKind) -> ModelMeta {
        ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(8, 8),
            extractor,
            embed_dim: 6,
            classes: 3,
        }
    }

    fn conv_meta() -> ModelMeta {
        small_meta(ExtractorKind::Conv {
            stage_channels: vec![4, 6],
        })
    }

    fn random_image(rng: &mut impl Rng, meta: &ModelMeta) -> ImageTensor {
        ImageTensor::from_fn(meta.input_channels, meta.input_shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn cfg(variant: MarginVariant, scale: f64, margin: f64) -> MarginConfig {
        MarginConfig {
            variant,
            logit_scale: scale,
            margin,
        }
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let mut rng = stream(41, "recognizer-test", 0);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let z1 = embed(&params, &x);
        let z2 = embed(&params, &x);
        assert_eq!(z1, z2);
        let norm: f64 = z1.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn golden_embedding_from_seeded_forward() {
        // frozen from the first run of this seeded configuration
        let mut rng = stream(2024, "recognizer-golden", 0);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = ImageTensor::from_fn(1, GridShape::new(8, 8), |_, i, j| {
            ((i as f64) - 3.5) * 0.1 + ((j as f64) - 3.5) * 0.05
        });
        let z = embed(&params, &x);
        let golden = [
            -0.05492401224788375,
            -0.3114786992433342,
            0.2262385916036378,
            -0.8972941679555568,
            -0.0739401829346704,
            -0.19538807017320597,
        ];
        for (a, b) in z.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn margin_zero_two_class_fixture() {
        // identity-like classifier: row 0 = e1, row 1 = e2
        let meta = ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(4, 4),
            extractor: ExtractorKind::Mlp { hidden: 4 },
            embed_dim: 2,
            classes: 2,
        };
        let mut rng = stream(42, "recognizer-test", 1);
        let mut params = ModelParams::init(meta, &mut rng).unwrap();
        let off = params.classifier_offset();
        params.flat[off..].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let z = [1.0, 0.0];
        let l = margin_loss(&z, 0, &params, &cfg(MarginVariant::Softmax, 1.0, 0.0));
        let expect = -((1.0f64.exp()) / (1.0f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_collapses_variants() {
        let mut rng = stream(43, "recognizer-test", 2);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let z = embed(&params, &x);
        for y in 0..3 {
            let base = margin_loss(&z, y, &params, &cfg(MarginVariant::Softmax, 16.0, 0.0));
            let ang = margin_loss(&z, y, &params, &cfg(MarginVariant::AdditiveAngular, 16.0, 0.0));
            let cos = margin_loss(&z, y, &params, &cfg(MarginVariant::AdditiveCosine, 16.0, 0.0));
            assert!((base - ang).abs() < 1e-12);
            assert!((base - cos).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_margin_larger_loss() {
        let mut rng = stream(44, "recognizer-test", 3);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let z = embed(&params, &x);
        let cos = cosines(&params, &z);
        let y = cos
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for variant in [MarginVariant::AdditiveAngular, MarginVariant::AdditiveCosine] {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..6 {
                let m = step as f64 * 0.1;
                let l = margin_loss(&z, y, &params, &cfg(variant, 8.0, m));
                assert!(l > prev, "loss must increase with margin: {l} after {prev}");
                prev = l;
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = stream(45, "recognizer-test", 4);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let y = 1;
        // small scale: near-uniform softmax, the spec's mildest regime
        let c = cfg(MarginVariant::Softmax, 0.05, 0.0);
        let bw = backward(&params, &x, y, &c, GradMode::Params).unwrap();
        let grads = bw.grad_params.unwrap();
        let h = 1e-5;
        let n = params.param_len();
        let picks: Vec<usize> = (0..60).map(|_| rng.gen_range(0..n)).collect();
        for idx in picks {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.flat[idx] += h;
            minus.flat[idx] -= h;
            let lp = loss(&plus, &x, y, &c).unwrap();
            let lm = loss(&minus, &x, y, &c).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (grads[idx] - fd).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(1e-4),
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
        }
    }

    #[test]
    fn param_gradients_match_fd_angular_margin() {
        let mut rng = stream(46, "recognizer-test", 5);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let y = 0;
        let c = cfg(MarginVariant::AdditiveAngular, 8.0, 0.3);
        let bw = backward(&params, &x, y, &c, GradMode::Params).unwrap();
        let grads = bw.grad_params.unwrap();
        let h = 1e-5;
        let n = params.param_len();
        for idx in (0..40).map(|_| rng.gen_range(0..n)) {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.flat[idx] += h;
            minus.flat[idx] -= h;
            let fd = (loss(&plus, &x, y, &c).unwrap() - loss(&minus, &x, y, &c).unwrap()) / (2.0 * h);
            assert!(
                (grads[idx] - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = stream(47, "recognizer-test", 6);
        for meta in [conv_meta(), small_meta(ExtractorKind::Mlp { hidden: 12 })] {
            let params = ModelParams::init(meta, &mut rng).unwrap();
            let x = random_image(&mut rng, &params.meta);
            let y = 2;
            let c = cfg(MarginVariant::AdditiveCosine, 8.0, 0.2);
            let bw = backward(&params, &x, y, &c, GradMode::Input).unwrap();
            let gi = bw.grad_input.unwrap();
            let h = 1e-5;
            for _ in 0..50 {
                let idx = rng.gen_range(0..x.data.len());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx] += h;
                xm.data[idx] -= h;
                let fd = (loss(&params, &xp, y, &c).unwrap() - loss(&params, &xm, y, &c).unwrap()) / (2.0 * h);
                assert!(
                    (gi.data[idx] - fd).abs() <= 1e-3 * fd.abs().max(1e-4),
                    "pixel {idx}: analytic {} vs fd {fd}",
                    gi.data[idx]
                );
            }
        }
    }

    #[test]
    fn duplicated_sample_doubles_summed_gradient() {
        let mut rng = stream(48, "recognizer-test", 7);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let x = random_image(&mut rng, &params.meta);
        let c = cfg(MarginVariant::Softmax, 16.0, 0.0);
        let g = backward(&params, &x, 1, &c, GradMode::Params).unwrap().grad_params.unwrap();
        let summed: Vec<f64> = g.iter().map(|v| v + v).collect();
        let doubled: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        assert!(summed.iter().zip(&doubled).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sgd_zero_lr_only_renormalizes() {
        let mut rng = stream(49, "recognizer-test", 8);
        let mut params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let before = params.flat.clone();
        let grads: Vec<f64> = (0..params.param_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state = SgdState::new(&params);
        sgd_update(&mut params, &mut state, &grads, 0.0, 0.9, 1e-4);
        // rows were already unit norm, so nothing moves beyond rounding
        for (a, b) in params.flat.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(params.classifier_rows_unit_norm(1e-9));
    }

    #[test]
    fn sgd_plain_step_hand_computed() {
        let meta = ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(4, 4),
            extractor: ExtractorKind::Mlp { hidden: 2 },
            embed_dim: 2,
            classes: 2,
        };
        let mut rng = stream(50, "recognizer-test", 9);
        let mut params = ModelParams::init(meta, &mut rng).unwrap();
        let w0 = params.flat[0];
        let w1 = params.flat[1];
        let mut grads = vec![0.0; params.param_len()];
        grads[0] = 0.5;
        grads[1] = -0.25;
        let mut state = SgdState::new(&params);
        sgd_update(&mut params, &mut state, &grads, 0.1, 0.0, 0.0);
        assert!((params.flat[0] - (w0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((params.flat[1] - (w1 + 0.1 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn classifier_rows_unit_after_updates() {
        let mut rng = stream(51, "recognizer-test", 10);
        let mut params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let mut state = SgdState::new(&params);
        for _ in 0..5 {
            let grads: Vec<f64> = (0..params.param_len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            sgd_update(&mut params, &mut state, &grads, 0.05, 0.9, 1e-4);
            assert!(params.classifier_rows_unit_norm(1e-9));
        }
    }

    #[test]
    fn smoke_convergence_two_classes() {
        let meta = ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(8, 8),
            extractor: ExtractorKind::Conv {
                stage_channels: vec![4, 8],
            },
            embed_dim: 8,
            classes: 2,
        };
        let mut rng = stream(52, "recognizer-test", 11);
        let mut params = ModelParams::init(meta, &mut rng).unwrap();
        // linearly separable: class 0 bright left half, class 1 bright right half
        let mk = |class: usize, jitter: f64| {
            ImageTensor::from_fn(1, GridShape::new(8, 8), |_, _, j| {
                let lit = if class == 0 { j < 4 } else { j >= 4 };
                if lit {
                    1.0 + jitter
                } else {
                    -1.0 - jitter
                }
            })
        };
        let batch: Vec<(ImageTensor, usize)> = (0..8)
            .map(|k| (mk(k % 2, (k / 2) as f64 * 0.01), k % 2))
            .collect();
        let c = cfg(MarginVariant::Softmax, 8.0, 0.0);
        let mut state = SgdState::new(&params);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let mut total = vec![0.0; params.param_len()];
            let mut loss_sum = 0.0;
            for (x, y) in &batch {
                let bw = backward(&params, x, *y, &c, GradMode::Params).unwrap();
                loss_sum += bw.loss;
                for (t, g) in total.iter_mut().zip(bw.grad_params.unwrap()) {
                    *t += g / batch.len() as f64;
                }
            }
            let avg = loss_sum / batch.len() as f64;
            first.get_or_insert(avg);
            last = avg;
            sgd_update(&mut params, &mut state, &total, 0.05, 0.0, 0.0);
        }
        let first = first.unwrap();
        assert!(last < first * 0.5, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    #[should_panic(expected = "does not match the configured")]
    fn embed_shape_mismatch_panics() {
        let mut rng = stream(53, "recognizer-test", 12);
        let params = ModelParams::init(conv_meta(), &mut rng).unwrap();
        let wrong = ImageTensor::zeros(1, GridShape::new(9, 8));
        embed(&params, &wrong);
    }
}
