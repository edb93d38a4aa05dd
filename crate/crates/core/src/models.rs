//! Model components: configurable backbones, the multi-head teacher, factor
//! networks (shared CKN + per-task TSN and heads), and the critic's
//! alignment network.
//!
//! Backbones are plain layer stacks without batch-dependent or stochastic
//! layers, so forward passes are deterministic and batch-size independent.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayD, ArrayViewD, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KfError, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, Dense,
};
use crate::nn::{join_name, ParamVisitor, Parameterized};

/// Conv kernel/stride/padding shared by the cnn backbones.
const CONV_KERNEL: usize = 4;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn6,
    Cnn3,
    Mlp,
}

/// Architecture description for one backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// (channels, height, width) of one input sample.
    pub input_shape: (usize, usize, usize),
    /// Conv channel widths (cnn kinds) or hidden widths (mlp).
    pub channels: Vec<usize>,
    /// Output feature dimension d.
    pub feature_dim: usize,
}

impl BackboneSpec {
    /// The 6-conv backbone (4x4 kernels, stride 2, widths 32-32-64-128-256-256).
    pub fn cnn6(input_shape: (usize, usize, usize), feature_dim: usize) -> Self {
        Self { kind: BackboneKind::Cnn6, input_shape, channels: vec![32, 32, 64, 128, 256, 256], feature_dim }
    }

    /// The 3-conv backbone (4x4 kernels, stride 2, widths 32-32-64, global
    /// average pooling before the feature layer).
    pub fn cnn3(input_shape: (usize, usize, usize), feature_dim: usize) -> Self {
        Self { kind: BackboneKind::Cnn3, input_shape, channels: vec![32, 32, 64], feature_dim }
    }

    pub fn mlp(input_shape: (usize, usize, usize), hidden: Vec<usize>, feature_dim: usize) -> Self {
        Self { kind: BackboneKind::Mlp, input_shape, channels: hidden, feature_dim }
    }

    /// Scale every width by `m` (the narrow-TSN variant), keeping >= 1.
    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        for c in &mut self.channels {
            *c = ((*c as f64 * m).round() as usize).max(1);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(KfError::invalid("feature_dim must be > 0"));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(KfError::invalid("input_shape must be positive"));
        }
        match self.kind {
            BackboneKind::Cnn6 if self.channels.len() != 6 => {
                return Err(KfError::invalid("cnn6 requires exactly 6 conv widths"));
            }
            BackboneKind::Cnn3 if self.channels.len() != 3 => {
                return Err(KfError::invalid("cnn3 requires exactly 3 conv widths"));
            }
            _ => {}
        }
        if matches!(self.kind, BackboneKind::Cnn6 | BackboneKind::Cnn3) {
            let (mut hh, mut ww) = (h, w);
            for i in 0..self.channels.len() {
                if hh + 2 * CONV_PAD < CONV_KERNEL || ww + 2 * CONV_PAD < CONV_KERNEL {
                    return Err(KfError::invalid(format!(
                        "input {h}x{w} collapses below the kernel at conv {i}"
                    )));
                }
                hh = (hh + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
                ww = (ww + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
                if hh == 0 || ww == 0 {
                    return Err(KfError::invalid(format!(
                        "input {h}x{w} collapses to zero size at conv {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn flat_input_dim(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }
}

/// Cached activations from one backbone forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input4: Option<Array4<f64>>,
    flat: Option<Array2<f64>>,
    conv_pre: Vec<Array4<f64>>,
    conv_post: Vec<Array4<f64>>,
    hid_pre: Vec<Array2<f64>>,
    hid_post: Vec<Array2<f64>>,
    pooled: Option<Array2<f64>>,
    feature: Array2<f64>,
}

impl Trace {
    /// Final feature vector z, (batch, d).
    pub fn feature(&self) -> &Array2<f64> {
        &self.feature
    }
}

/// A layer stack producing a (batch, d) feature from image batches.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub(crate) convs: Vec<Conv2d>,
    pub(crate) hidden: Vec<Dense>,
    pub(crate) fc: Dense,
}

impl Backbone {
    /// Deterministic fan-in-scaled initialization.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(spec, &mut rng)
    }

    pub fn init_with_rng(spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (c, _, _) = spec.input_shape;
        match spec.kind {
            BackboneKind::Cnn6 | BackboneKind::Cnn3 => {
                let mut convs = Vec::with_capacity(spec.channels.len());
                let mut in_c = c;
                for &out_c in &spec.channels {
                    convs.push(Conv2d::init(in_c, out_c, CONV_KERNEL, CONV_STRIDE, CONV_PAD, rng));
                    in_c = out_c;
                }
                let fc = Dense::init(in_c, spec.feature_dim, rng);
                Ok(Self { spec: spec.clone(), convs, hidden: Vec::new(), fc })
            }
            BackboneKind::Mlp => {
                let mut hidden = Vec::with_capacity(spec.channels.len());
                let mut in_d = spec.flat_input_dim();
                for &h in &spec.channels {
                    hidden.push(Dense::init(in_d, h, rng));
                    in_d = h;
                }
                let fc = Dense::init(in_d, spec.feature_dim, rng);
                Ok(Self { spec: spec.clone(), convs: Vec::new(), hidden, fc })
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Number of tappable feature points: one per activation block plus the
    /// final feature.
    pub fn num_taps(&self) -> usize {
        self.convs.len() + self.hidden.len() + 1
    }

    /// Index of the final pre-head feature tap.
    pub fn final_tap(&self) -> usize {
        self.num_taps() - 1
    }

    /// Channel dimensionality of tap `t`.
    pub fn tap_dim(&self, t: usize) -> Result<usize> {
        let blocks = self.convs.len() + self.hidden.len();
        if t < self.convs.len() {
            Ok(self.spec.channels[t])
        } else if t < blocks {
            Ok(self.spec.channels[t])
        } else if t == blocks {
            Ok(self.spec.feature_dim)
        } else {
            Err(KfError::invalid(format!("tap {t} out of range (have {})", blocks + 1)))
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        let dims = x.dim();
        if (dims.1, dims.2, dims.3) != (c, h, w) {
            return Err(KfError::shape(format!(
                "backbone expects ({c}, {h}, {w}) samples, got {:?}",
                (dims.1, dims.2, dims.3)
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KfError::invalid("backbone input contains non-finite values"));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate activation for backward.
    ///
    /// Inputs are affinely mapped from [0, 1] to [-1, 1] before the first
    /// layer; centered inputs condition the short training runs this crate
    /// targets.
    pub fn forward_trace(&self, raw: &Array4<f64>) -> Result<Trace> {
        self.check_input(raw)?;
        let x = &(raw * 2.0 - 1.0);
        let n = x.dim().0;
        match self.spec.kind {
            BackboneKind::Cnn6 | BackboneKind::Cnn3 => {
                let mut conv_pre = Vec::with_capacity(self.convs.len());
                let mut conv_post = Vec::with_capacity(self.convs.len());
                let mut cur = x.clone();
                for conv in &self.convs {
                    let pre = conv.forward(&cur)?;
                    let post = relu(&pre.clone().into_dyn())
                        .into_dimensionality::<Ix4>()
                        .expect("relu keeps dims");
                    conv_pre.push(pre);
                    cur = post.clone();
                    conv_post.push(post);
                }
                let pooled = global_avg_pool(&cur);
                let feature = self.fc.forward(&pooled)?;
                Ok(Trace {
                    input4: Some(x.clone()),
                    flat: None,
                    conv_pre,
                    conv_post,
                    hid_pre: Vec::new(),
                    hid_post: Vec::new(),
                    pooled: Some(pooled),
                    feature,
                })
            }
            BackboneKind::Mlp => {
                let flat = x
                    .view()
                    .into_shape_with_order((n, self.spec.flat_input_dim()))
                    .map_err(|_| KfError::shape("mlp flatten failed"))?
                    .to_owned();
                let mut hid_pre = Vec::new();
                let mut hid_post = Vec::new();
                let mut cur = flat.clone();
                for layer in &self.hidden {
                    let pre = layer.forward(&cur)?;
                    let post = relu(&pre.clone().into_dyn())
                        .into_dimensionality::<Ix2>()
                        .expect("relu keeps dims");
                    hid_pre.push(pre);
                    cur = post.clone();
                    hid_post.push(post);
                }
                let feature = self.fc.forward(&cur)?;
                Ok(Trace {
                    input4: None,
                    flat: Some(flat),
                    conv_pre: Vec::new(),
                    conv_post: Vec::new(),
                    hid_pre,
                    hid_post,
                    pooled: None,
                    feature,
                })
            }
        }
    }

    /// Feature batch z = backbone(x), (batch, d).
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.feature)
    }

    /// Channel-pooled feature at tap `t` of a traced pass.
    pub fn tap_feature(&self, trace: &Trace, t: usize) -> Result<Array2<f64>> {
        let blocks = self.convs.len() + self.hidden.len();
        if t < self.convs.len() {
            Ok(global_avg_pool(&trace.conv_post[t]))
        } else if t < blocks {
            Ok(trace.hid_post[t - self.convs.len()].clone())
        } else if t == blocks {
            Ok(trace.feature.clone())
        } else {
            Err(KfError::invalid(format!("tap {t} out of range")))
        }
    }

    /// Smallest |pre-activation| across all ReLU inputs of a traced pass.
    /// Finite-difference harnesses use this to skip instances sitting on a
    /// kink, where central differences are undefined.
    pub fn min_abs_preactivation(&self, trace: &Trace) -> f64 {
        let mut min = f64::INFINITY;
        for pre in &trace.conv_pre {
            for &v in pre.iter() {
                min = min.min(v.abs());
            }
        }
        for pre in &trace.hid_pre {
            for &v in pre.iter() {
                min = min.min(v.abs());
            }
        }
        min
    }

    /// Backward pass. Accumulates parameter gradients and returns the
    /// gradient with respect to the input batch.
    ///
    /// `d_feature` is dL/dz; `tap_grads` carries extra gradients injected at
    /// tap points (tap index, dL/d tap_feature).
    pub fn backward(
        &mut self,
        trace: &Trace,
        d_feature: &Array2<f64>,
        tap_grads: &[(usize, Array2<f64>)],
    ) -> Result<ArrayD<f64>> {
        let blocks = self.convs.len() + self.hidden.len();
        let mut d_feat = d_feature.clone();
        for (t, g) in tap_grads {
            if *t == blocks {
                d_feat += g;
            }
        }
        match self.spec.kind {
            BackboneKind::Cnn6 | BackboneKind::Cnn3 => {
                let pooled = trace.pooled.as_ref().expect("cnn trace has pooled");
                let d_pooled = self.fc.backward(pooled, &d_feat);
                let last = self.convs.len() - 1;
                let mut d_post =
                    global_avg_pool_backward(trace.conv_post[last].dim(), &d_pooled);
                for i in (0..self.convs.len()).rev() {
                    for (t, g) in tap_grads {
                        if *t == i {
                            let extra = global_avg_pool_backward(trace.conv_post[i].dim(), g);
                            d_post += &extra;
                        }
                    }
                    let d_pre = relu_backward(
                        &trace.conv_pre[i].clone().into_dyn(),
                        &d_post.into_dyn(),
                    )
                    .into_dimensionality::<Ix4>()
                    .expect("relu grad dims");
                    let input = if i == 0 {
                        trace.input4.as_ref().expect("cnn trace has input")
                    } else {
                        &trace.conv_post[i - 1]
                    };
                    let dx = self.convs[i].backward(input, &d_pre);
                    if i == 0 {
                        // chain through the [0,1] -> [-1,1] input map
                        return Ok((dx * 2.0).into_dyn());
                    }
                    d_post = dx;
                }
                unreachable!("conv loop returns at i == 0");
            }
            BackboneKind::Mlp => {
                let flat = trace.flat.as_ref().expect("mlp trace has flat input");
                let fc_in = trace.hid_post.last().unwrap_or(flat);
                let mut d_cur = self.fc.backward(fc_in, &d_feat);
                for i in (0..self.hidden.len()).rev() {
                    for (t, g) in tap_grads {
                        if *t == self.convs.len() + i {
                            d_cur += g;
                        }
                    }
                    let d_pre = relu_backward(
                        &trace.hid_pre[i].clone().into_dyn(),
                        &d_cur.into_dyn(),
                    )
                    .into_dimensionality::<Ix2>()
                    .expect("relu grad dims");
                    let input = if i == 0 { flat } else { &trace.hid_post[i - 1] };
                    d_cur = self.hidden[i].backward(input, &d_pre);
                }
                let (c, h, w) = self.spec.input_shape;
                let n = d_cur.nrows();
                // chain through the [0,1] -> [-1,1] input map
                Ok((d_cur * 2.0)
                    .into_shape_with_order((n, c, h, w))
                    .expect("input grad reshape")
                    .into_dyn())
            }
        }
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("conv{i}")), f);
        }
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_params(&join_name(prefix, &format!("hidden{i}")), f);
        }
        self.fc.visit_params(&join_name(prefix, "fc"), f);
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.for_each_param(&join_name(prefix, &format!("conv{i}")), f);
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.for_each_param(&join_name(prefix, &format!("hidden{i}")), f);
        }
        self.fc.for_each_param(&join_name(prefix, "fc"), f);
    }
}

/// Fused task head: consumes the elementwise sum z + t_j.
pub fn forward_head(head: &Dense, z: &Array2<f64>, t: &Array2<f64>) -> Result<Array2<f64>> {
    if z.dim() != t.dim() {
        return Err(KfError::shape(format!(
            "fused head needs matching shapes, got z {:?} vs t {:?}",
            z.dim(),
            t.dim()
        )));
    }
    head.forward(&(z + t))
}

/// Auxiliary head on the task-specific feature alone.
pub fn forward_aux_head(aux_head: &Dense, t: &Array2<f64>) -> Result<Array2<f64>> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(KfError::invalid("aux head input contains non-finite values"));
    }
    aux_head.forward(t)
}

/// Multi-head teacher: one backbone, one linear head per task.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub backbone: Backbone,
    pub heads: Vec<Dense>,
    pub class_counts: Vec<usize>,
}

impl TeacherModel {
    pub fn init(spec: &BackboneSpec, class_counts: &[usize], seed: u64) -> Result<Self> {
        if class_counts.is_empty() {
            return Err(KfError::invalid("teacher needs at least one task"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init_with_rng(spec, &mut rng)?;
        let heads = class_counts
            .iter()
            .map(|&k| Dense::init(spec.feature_dim, k, &mut rng))
            .collect();
        Ok(Self { backbone, heads, class_counts: class_counts.to_vec() })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Trace plus per-task logits (the multi-task output, sliced per task).
    pub fn forward_trace(&self, x: &Array4<f64>) -> Result<(Trace, Vec<Array2<f64>>)> {
        let trace = self.backbone.forward_trace(x)?;
        let logits = self
            .heads
            .iter()
            .map(|h| h.forward(&trace.feature))
            .collect::<Result<Vec<_>>>()?;
        Ok((trace, logits))
    }

    pub fn predict(&self, x: &Array4<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_trace(x)?.1)
    }
}

impl Parameterized for TeacherModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params(&join_name(prefix, "backbone"), f);
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_params(&join_name(prefix, &format!("head{i}")), f);
        }
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.backbone.for_each_param(&join_name(prefix, "backbone"), f);
        for (i, head) in self.heads.iter().enumerate() {
            head.for_each_param(&join_name(prefix, &format!("head{i}")), f);
        }
    }
}

/// Shared handle to the common-knowledge network.
pub type SharedBackbone = Rc<RefCell<Backbone>>;

/// One task's student: a shared CKN plus its own TSN, fused head and
/// auxiliary head.
#[derive(Debug, Clone)]
pub struct FactorNetwork {
    pub ckn: SharedBackbone,
    pub tsn: Backbone,
    pub head: Dense,
    pub aux_head: Dense,
    pub task_id: usize,
}

/// Outputs of one factor-network forward pass.
#[derive(Debug, Clone)]
pub struct FactorForward {
    pub z: Array2<f64>,
    pub t: Array2<f64>,
    pub fused_logits: Array2<f64>,
    pub aux_logits: Array2<f64>,
}

impl FactorNetwork {
    pub fn init(
        ckn: SharedBackbone,
        tsn_spec: &BackboneSpec,
        class_count: usize,
        task_id: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = ckn.borrow().feature_dim();
        if tsn_spec.feature_dim != d {
            return Err(KfError::invalid(format!(
                "TSN feature dim {} must equal CKN feature dim {d} (additive fusion)",
                tsn_spec.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tsn = Backbone::init_with_rng(tsn_spec, &mut rng)?;
        let head = Dense::init(d, class_count, &mut rng);
        let aux_head = Dense::init(d, class_count, &mut rng);
        Ok(Self { ckn, tsn, head, aux_head, task_id })
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<FactorForward> {
        let z = self.ckn.borrow().forward(x)?;
        let t = self.tsn.forward(x)?;
        let fused_logits = forward_head(&self.head, &z, &t)?;
        let aux_logits = forward_aux_head(&self.aux_head, &t)?;
        Ok(FactorForward { z, t, fused_logits, aux_logits })
    }

    /// Visit task-owned parameters only; the shared CKN is visited once by
    /// whoever owns the training step.
    pub fn visit_own_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.tsn.visit_params(&join_name(prefix, "tsn"), f);
        self.head.visit_params(&join_name(prefix, "head"), f);
        self.aux_head.visit_params(&join_name(prefix, "aux_head"), f);
    }

    pub fn for_each_own_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.tsn.for_each_param(&join_name(prefix, "tsn"), f);
        self.head.for_each_param(&join_name(prefix, "head"), f);
        self.aux_head.for_each_param(&join_name(prefix, "aux_head"), f);
    }
}

/// Feed-forward map aligning teacher features to CKN feature space, plus the
/// inner-product critic built on it.
#[derive(Debug, Clone)]
pub struct CriticAligner {
    /// Dense layers with ReLU between them (none after the last).
    pub layers: Vec<Dense>,
    /// Backbone tap the critic reads; `None` means the final feature.
    pub layer_index: Option<usize>,
}

impl CriticAligner {
    /// MLP aligner d_t -> hidden... -> d_c.
    pub fn init(d_t: usize, hidden: &[usize], d_c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![d_t];
        dims.extend_from_slice(hidden);
        dims.push(d_c);
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        Self { layers, layer_index: None }
    }

    /// Single linear layer set to the identity map (test fixture).
    pub fn identity(d: usize) -> Self {
        let mut layer = Dense::init(d, d, &mut ChaCha8Rng::seed_from_u64(0));
        layer.w = Array2::eye(d);
        layer.b.fill(0.0);
        Self { layers: vec![layer], layer_index: None }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("aligner has layers").out_dim()
    }

    /// FFN forward keeping pre-activations for backward.
    fn ffn_trace(&self, z_t: &Array2<f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = z_t.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur)?;
            cur = if i + 1 < self.layers.len() {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            pres.push(pre);
        }
        Ok((pres, cur))
    }

    pub fn ffn(&self, z_t: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.ffn_trace(z_t)?.1)
    }

    /// Pairwise score matrix: entry (i, k) = <z_c[i], FFN(z_t[k])>.
    ///
    /// Diagonal entries score joint pairs, off-diagonal entries marginal
    /// pairs.
    pub fn score_matrix(&self, z_t: &Array2<f64>, z_c: &Array2<f64>) -> Result<Array2<f64>> {
        if z_t.nrows() != z_c.nrows() {
            return Err(KfError::shape(format!(
                "score_matrix needs equal batch sizes, got {} vs {}",
                z_t.nrows(),
                z_c.nrows()
            )));
        }
        let aligned = self.ffn(z_t)?;
        if aligned.ncols() != z_c.ncols() {
            return Err(KfError::shape(format!(
                "aligned dim {} does not match CKN feature dim {}",
                aligned.ncols(),
                z_c.ncols()
            )));
        }
        Ok(z_c.dot(&aligned.t()))
    }

    /// Backward through the score matrix. Accumulates FFN parameter
    /// gradients and returns dL/d z_c; the teacher side gets no gradient.
    pub fn score_backward(
        &mut self,
        z_t: &Array2<f64>,
        z_c: &Array2<f64>,
        d_scores: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let (pres, aligned) = self.ffn_trace(z_t)?;
        if aligned.ncols() != z_c.ncols() {
            return Err(KfError::shape("aligned dim mismatch in score_backward"));
        }
        let d_zc = d_scores.dot(&aligned);
        let mut d_cur = d_scores.t().dot(z_c); // dL/d aligned
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d_cur.zip_mut_with(&pres[i], |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let input = if i == 0 {
                z_t.clone()
            } else {
                pres[i - 1].mapv(|v| v.max(0.0))
            };
            d_cur = self.layers[i].backward(&input, &d_cur);
        }
        Ok(d_zc)
    }
}

impl Parameterized for CriticAligner {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join_name(prefix, &format!("ffn{i}")), f);
        }
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_param(&join_name(prefix, &format!("ffn{i}")), f);
        }
    }
}

/// Convert an image batch list into the 4-D input tensor.
pub fn stack_images(images: &[ndarray::ArrayView3<'_, f64>]) -> Result<Array4<f64>> {
    if images.is_empty() {
        return Err(KfError::invalid("empty image batch"));
    }
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(KfError::shape("inconsistent image shapes in batch"));
        }
        out.slice_mut(ndarray::s![i, .., .., ..]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_cnn3() -> BackboneSpec {
        BackboneSpec { kind: BackboneKind::Cnn3, input_shape: (1, 8, 8), channels: vec![4, 4, 6], feature_dim: 5 }
    }

    #[test]
    fn zeroed_fc_gives_zero_features() {
        let mut bb = Backbone::init(&tiny_cnn3(), 9).unwrap();
        bb.fc.w.fill(0.0);
        bb.fc.b.fill(0.0);
        let x = Array4::from_elem((3, 1, 8, 8), 0.5);
        let z = bb.forward(&x).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_batch_size_independent() {
        let bb = Backbone::init(&tiny_cnn3(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let big = Array4::from_shape_simple_fn((4, 1, 8, 8), || rng.gen_range(0.0..1.0));
        let single = big.slice(ndarray::s![2..3, .., .., ..]).to_owned();
        let z_big = bb.forward(&big).unwrap();
        let z_one = bb.forward(&single).unwrap();
        for j in 0..5 {
            assert_abs_diff_eq!(z_big[[2, j]], z_one[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_outputs_finite() {
        let bb = Backbone::init(&tiny_cnn3(), 11).unwrap();
        let x = Array4::from_elem((2, 1, 8, 8), 123.0);
        assert!(bb.forward(&x).unwrap().iter().all(|v| v.is_finite()));
        let bad = Array4::from_elem((1, 1, 8, 8), f64::INFINITY);
        assert!(bb.forward(&bad).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Backbone::init(&tiny_cnn3(), 7).unwrap();
        let b = Backbone::init(&tiny_cnn3(), 7).unwrap();
        let c = Backbone::init(&tiny_cnn3(), 8).unwrap();
        let mut equal = true;
        a.for_each_param("", &mut |name, va| {
            b.for_each_param("", &mut |name2, vb| {
                if name == name2 && va != vb {
                    equal = false;
                }
            });
        });
        assert!(equal);
        let mut any_diff = false;
        a.for_each_param("", &mut |name, va| {
            c.for_each_param("", &mut |name2, vc| {
                if name == name2 && va != vc {
                    any_diff = true;
                }
            });
        });
        assert!(any_diff);
    }

    #[test]
    fn cnn3_param_count_matches_layer_table() {
        let spec = BackboneSpec::cnn3((1, 64, 64), 10);
        let bb = Backbone::init(&spec, 0).unwrap();
        // conv1 32x1x4x4 + 32, conv2 32x32x4x4 + 32, conv3 64x32x4x4 + 64,
        // fc 10x64 + 10
        let expect = (32 * 1 * 16 + 32) + (32 * 32 * 16 + 32) + (64 * 32 * 16 + 64) + (10 * 64 + 10);
        assert_eq!(bb.param_count(), expect);
    }

    #[test]
    fn fused_head_addition_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = Dense::init(4, 3, &mut rng);
        use rand::Rng;
        let z = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
        let t = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
        let zero = Array2::zeros((2, 4));
        // t = 0 -> head(z)
        let a = forward_head(&head, &z, &zero).unwrap();
        let b = head.forward(&z).unwrap();
        assert_abs_diff_eq!(a.sum(), b.sum(), epsilon = 1e-12);
        // swap arguments -> identical
        let ab = forward_head(&head, &z, &t).unwrap();
        let ba = forward_head(&head, &t, &z).unwrap();
        for (x, y) in ab.iter().zip(ba.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        // linear head verified against a manual matrix product
        let s = &z + &t;
        let manual = s.dot(&head.w.t()) + &head.b;
        for (x, y) in ab.iter().zip(manual.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn aux_head_zero_weights_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut aux = Dense::init(4, 2, &mut rng);
        aux.w.fill(0.0);
        aux.b = array![1.5, -0.5];
        let t = Array2::from_elem((3, 4), 2.0);
        let y = forward_aux_head(&aux, &t).unwrap();
        for row in y.rows() {
            assert_abs_diff_eq!(row[0], 1.5, epsilon = 1e-15);
            assert_abs_diff_eq!(row[1], -0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn critic_identity_on_orthonormal_rows() {
        let aligner = CriticAligner::identity(3);
        let z = Array2::eye(3);
        let s = aligner.score_matrix(&z, &z).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                assert_abs_diff_eq!(s[[i, k]], if i == k { 1.0 } else { 0.0 }, epsilon = 1e-15);
            }
        }
        // zero z_c row zeroes that score row
        let mut zc = Array2::eye(3);
        zc.row_mut(1).fill(0.0);
        let s = aligner.score_matrix(&z, &zc).unwrap();
        assert!(s.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_matches_hand_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let aligner = CriticAligner::init(4, &[6], 3, 42);
        use rand::Rng;
        let z_t = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let z_c = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-1.0..1.0));
        let aligned = aligner.ffn(&z_t).unwrap();
        let s = aligner.score_matrix(&z_t, &z_c).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let dot: f64 = (0..3).map(|d| z_c[[i, d]] * aligned[[k, d]]).sum();
                assert_abs_diff_eq!(s[[i, k]], dot, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shared_ckn_identity_across_factor_networks() {
        let spec = tiny_cnn3();
        let ckn: SharedBackbone = Rc::new(RefCell::new(Backbone::init(&spec, 1).unwrap()));
        let f0 = FactorNetwork::init(Rc::clone(&ckn), &spec, 3, 0, 100).unwrap();
        let f1 = FactorNetwork::init(Rc::clone(&ckn), &spec, 4, 1, 101).unwrap();
        let x = Array4::from_elem((1, 1, 8, 8), 0.3);
        let before = f1.forward(&x).unwrap().z;
        f0.ckn.borrow_mut().fc.b[0] += 10.0;
        let after = f1.forward(&x).unwrap().z;
        assert_abs_diff_eq!(after[[0, 0]] - before[[0, 0]], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn tsn_dim_mismatch_rejected() {
        let spec = tiny_cnn3();
        let ckn: SharedBackbone = Rc::new(RefCell::new(Backbone::init(&spec, 1).unwrap()));
        let mut bad = spec.clone();
        bad.feature_dim = 7;
        assert!(FactorNetwork::init(ckn, &bad, 3, 0, 0).is_err());
    }

    #[test]
    fn mlp_backbone_runs() {
        let spec = BackboneSpec::mlp((1, 4, 4), vec![8], 5);
        let bb = Backbone::init(&spec, 3).unwrap();
        let x = Array4::from_elem((2, 1, 4, 4), 0.1);
        assert_eq!(bb.forward(&x).unwrap().dim(), (2, 5));
        assert_eq!(bb.num_taps(), 2);
    }

    #[test]
    fn spec_validation_catches_collapse() {
        // 6 stride-2 convs need at least 64x64 input to stay >= 1x1.
        assert!(BackboneSpec::cnn6((1, 32, 32), 10).validate().is_err());
        assert!(BackboneSpec::cnn6((1, 64, 64), 10).validate().is_ok());
        assert!(BackboneSpec::cnn3((1, 8, 8), 10).validate().is_ok());
    }
}
