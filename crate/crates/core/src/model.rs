//! The full classifier: conv interval features, variable attention per
//! interval, temporal attention across intervals, and a one-hidden-layer
//! head. Loss is mean cross-entropy plus `reg_alpha` times the squared
//! Frobenius norm of the parameters; gradients are derived by hand.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, temporal_attention, variable_attention, AttentionCache,
    AttentionExplanation, AttentionParams,
};
use crate::conv::{
    conv_backward, conv_forward, stride_from_kernel, ConvCache, ConvKernel, ConvParams, ConvSpec,
    IntervalLayout,
};
use crate::error::{arg, Error, Result};
use crate::numerics::{
    argmax, axpy, cross_entropy, softmax_unchecked, Activation, Matrix, SeededRng,
};

pub const MODEL_FORMAT: &str = "laxcat-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which attention modules are replaced by plain averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoVarAttention,
    NoTemporalAttention,
    NoAttention,
}

impl Ablation {
    pub fn uses_variable_attention(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoTemporalAttention)
    }

    pub fn uses_temporal_attention(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoVarAttention)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVarAttention => "no_var_attention",
            Ablation::NoTemporalAttention => "no_temporal_attention",
            Ablation::NoAttention => "no_attention",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_var_attention" => Ok(Ablation::NoVarAttention),
            "no_temporal_attention" => Ok(Ablation::NoTemporalAttention),
            "no_attention" => Ok(Ablation::NoAttention),
            other => arg(format!("unknown ablation mode '{other}'")),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture, regularization and seed of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaxcatConfig {
    pub variables: usize,
    pub t_len: usize,
    pub classes: usize,
    pub kernel_len: usize,
    /// Defaults to half the kernel length (at least 1).
    #[serde(default)]
    pub stride: Option<usize>,
    pub filters: usize,
    pub hidden: usize,
    pub reg_alpha: f64,
    pub conv_activation: Activation,
    pub sigma1: Activation,
    pub sigma2: Activation,
    #[serde(default)]
    pub ablation: Ablation,
    pub seed: u64,
    #[serde(default = "yes")]
    pub conv_bias: bool,
    /// Penalize bias vectors as well as weight matrices.
    #[serde(default = "yes")]
    pub reg_biases: bool,
    /// Penalize the conv kernels.
    #[serde(default = "yes")]
    pub reg_conv: bool,
}

fn yes() -> bool {
    true
}

impl LaxcatConfig {
    /// Defaults for a dataset of the given shape.
    pub fn new(variables: usize, t_len: usize, classes: usize) -> Self {
        Self {
            variables,
            t_len,
            classes,
            kernel_len: 5,
            stride: None,
            filters: 16,
            hidden: 16,
            reg_alpha: 0.001,
            conv_activation: Activation::Relu,
            sigma1: Activation::Tanh,
            sigma2: Activation::Tanh,
            ablation: Ablation::Full,
            seed: 0,
            conv_bias: true,
            reg_biases: true,
            reg_conv: true,
        }
    }

    pub fn effective_stride(&self) -> usize {
        self.stride.unwrap_or_else(|| stride_from_kernel(self.kernel_len))
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            kernel_len: self.kernel_len,
            stride: self.effective_stride(),
            filters: self.filters,
            activation: self.conv_activation,
            use_bias: self.conv_bias,
        }
    }

    pub fn layout(&self) -> Result<IntervalLayout> {
        IntervalLayout::new(self.t_len, self.kernel_len, self.effective_stride())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables == 0 || self.t_len == 0 {
            return arg("model needs at least one variable and one time point");
        }
        if self.classes < 2 {
            return arg("model needs at least two classes");
        }
        if self.hidden == 0 {
            return arg("hidden layer needs at least one node");
        }
        if !(self.reg_alpha >= 0.0) || !self.reg_alpha.is_finite() {
            return arg("reg_alpha must be a nonnegative finite number");
        }
        self.conv_spec().validate(self.t_len)?;
        Ok(())
    }

    /// Length of the flattened parameter vector.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let (p, j, h, c) = (self.variables, self.filters, self.hidden, self.classes);
        let l = self.layout()?.count();
        let conv = p * (j * self.kernel_len + j);
        let var = p + j + j * p + p;
        let temp = l + j + j * l + l;
        let head = h * j + h + c * h + c;
        Ok(conv + var + temp + head)
    }
}

/// Classifier head: `J -> hidden (tanh) -> C` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `hidden x J`
    pub w1: Matrix,
    /// `1 x hidden`
    pub b1: Matrix,
    /// `C x hidden`
    pub w2: Matrix,
    /// `1 x C`
    pub b2: Matrix,
}

/// Names each parameter tensor for reporting, gradient checks and the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ConvKernel,
    ConvBias,
    W1V,
    B1V,
    W2V,
    B2V,
    W1T,
    B1T,
    W2T,
    B2T,
    HeadW1,
    HeadB1,
    HeadW2,
    HeadB2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 14] = [
        ParamGroup::ConvKernel,
        ParamGroup::ConvBias,
        ParamGroup::W1V,
        ParamGroup::B1V,
        ParamGroup::W2V,
        ParamGroup::B2V,
        ParamGroup::W1T,
        ParamGroup::B1T,
        ParamGroup::W2T,
        ParamGroup::B2T,
        ParamGroup::HeadW1,
        ParamGroup::HeadB1,
        ParamGroup::HeadW2,
        ParamGroup::HeadB2,
    ];

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            ParamGroup::ConvBias
                | ParamGroup::B1V
                | ParamGroup::B2V
                | ParamGroup::B1T
                | ParamGroup::B2T
                | ParamGroup::HeadB1
                | ParamGroup::HeadB2
        )
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ParamGroup::ConvKernel | ParamGroup::ConvBias)
    }
}

/// Every trainable tensor. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaxcatParams {
    pub conv: ConvParams,
    pub var_att: AttentionParams,
    pub temp_att: AttentionParams,
    pub head: HeadParams,
}

impl LaxcatParams {
    fn zeros(config: &LaxcatConfig, l: usize) -> Self {
        let (p, j, h, c) = (config.variables, config.filters, config.hidden, config.classes);
        Self {
            conv: ConvParams {
                per_variable: (0..p).map(|_| ConvKernel::zeros(j, config.kernel_len)).collect(),
            },
            var_att: AttentionParams::zeros(p, j, config.sigma1, config.sigma2),
            temp_att: AttentionParams::zeros(l, j, config.sigma1, config.sigma2),
            head: HeadParams {
                w1: Matrix::zeros(h, j),
                b1: Matrix::zeros(1, h),
                w2: Matrix::zeros(c, h),
                b2: Matrix::zeros(1, c),
            },
        }
    }

    fn init(config: &LaxcatConfig, l: usize) -> Self {
        let (p, j, h, c) = (config.variables, config.filters, config.hidden, config.classes);
        let mut conv_rng = SeededRng::derive(config.seed, 1);
        let mut att_rng = SeededRng::derive(config.seed, 2);
        let mut head_rng = SeededRng::derive(config.seed, 3);
        Self {
            conv: ConvParams {
                per_variable: (0..p)
                    .map(|_| ConvKernel::init(j, config.kernel_len, &mut conv_rng))
                    .collect(),
            },
            var_att: AttentionParams::init(p, j, config.sigma1, config.sigma2, &mut att_rng),
            temp_att: AttentionParams::init(l, j, config.sigma1, config.sigma2, &mut att_rng),
            head: HeadParams {
                w1: Matrix::uniform(h, j, 1.0 / (j as f64).sqrt(), &mut head_rng),
                b1: Matrix::zeros(1, h),
                w2: Matrix::uniform(c, h, 1.0 / (h as f64).sqrt(), &mut head_rng),
                b2: Matrix::zeros(1, c),
            },
        }
    }

    /// All tensors in a fixed order: conv (per variable, kernel then bias),
    /// variable attention, temporal attention, head.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for k in &self.conv.per_variable {
            out.push((ParamGroup::ConvKernel, &k.weights));
            out.push((ParamGroup::ConvBias, &k.bias));
        }
        let v = &self.var_att;
        let t = &self.temp_att;
        let h = &self.head;
        out.extend([
            (ParamGroup::W1V, &v.w1),
            (ParamGroup::B1V, &v.b1),
            (ParamGroup::W2V, &v.w2),
            (ParamGroup::B2V, &v.b2),
            (ParamGroup::W1T, &t.w1),
            (ParamGroup::B1T, &t.b1),
            (ParamGroup::W2T, &t.w2),
            (ParamGroup::B2T, &t.b2),
            (ParamGroup::HeadW1, &h.w1),
            (ParamGroup::HeadB1, &h.b1),
            (ParamGroup::HeadW2, &h.w2),
            (ParamGroup::HeadB2, &h.b2),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Matrix)> {
        let mut out = Vec::new();
        for k in &mut self.conv.per_variable {
            out.push((ParamGroup::ConvKernel, &mut k.weights));
            out.push((ParamGroup::ConvBias, &mut k.bias));
        }
        let v = &mut self.var_att;
        let t = &mut self.temp_att;
        let h = &mut self.head;
        out.extend([
            (ParamGroup::W1V, &mut v.w1),
            (ParamGroup::B1V, &mut v.b1),
            (ParamGroup::W2V, &mut v.w2),
            (ParamGroup::B2V, &mut v.b2),
            (ParamGroup::W1T, &mut t.w1),
            (ParamGroup::B1T, &mut t.b1),
            (ParamGroup::W2T, &mut t.w2),
            (ParamGroup::B2T, &mut t.b2),
            (ParamGroup::HeadW1, &mut h.w1),
            (ParamGroup::HeadB1, &mut h.b1),
            (ParamGroup::HeadW2, &mut h.w2),
            (ParamGroup::HeadB2, &mut h.b2),
        ]);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    /// Group of every coordinate of [`Self::flatten`].
    pub fn flat_groups(&self) -> Vec<ParamGroup> {
        self.tensors()
            .into_iter()
            .flat_map(|(g, m)| std::iter::repeat_n(g, m.as_slice().len()))
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum();
        if flat.len() != total {
            return arg(format!(
                "flat parameter vector has length {}, expected {total}",
                flat.len()
            ));
        }
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &LaxcatParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale(k);
        }
    }

    fn shapes_match(&self, other: &LaxcatParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        self.var_att.sigma1 == other.var_att.sigma1
            && self.var_att.sigma2 == other.var_att.sigma2
            && self.temp_att.sigma1 == other.temp_att.sigma1
            && self.temp_att.sigma2 == other.temp_att.sigma2
            && a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((ga, ma), (gb, mb))| ga == gb && ma.shape() == mb.shape())
    }
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Per variable, `l x J`.
    pub features: Vec<Matrix>,
    pub conv_caches: Vec<ConvCache>,
    /// `P x l`; column `t` is `a_t` (uniform under variable-attention ablation).
    pub variable_scores: Matrix,
    pub var_caches: Vec<AttentionCache>,
    /// `l x J`
    pub context: Matrix,
    /// `b` (uniform under temporal-attention ablation).
    pub temporal_scores: Vec<f64>,
    pub temp_cache: Option<AttentionCache>,
    /// `z`
    pub embedding: Vec<f64>,
    pub head_pre: Vec<f64>,
    pub head_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// How per-instance gradients in a batch are summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Collect per-instance results and add them in instance order.
    #[default]
    Ordered,
    /// Let the thread pool combine partial sums in whatever order it likes.
    Unordered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaxcatModel {
    config: LaxcatConfig,
    layout: IntervalLayout,
    pub params: LaxcatParams,
}

impl LaxcatModel {
    /// Seeded initialization.
    pub fn new(config: LaxcatConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let params = LaxcatParams::init(&config, layout.count());
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: LaxcatConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let params = LaxcatParams::zeros(&config, layout.count());
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &LaxcatConfig {
        &self.config
    }

    pub fn layout(&self) -> &IntervalLayout {
        &self.layout
    }

    pub fn zero_grads(&self) -> LaxcatParams {
        LaxcatParams::zeros(&self.config, self.layout.count())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.shape() != (self.config.variables, self.config.t_len) {
            return arg(format!(
                "input is {:?}, model expects ({}, {})",
                x.shape(),
                self.config.variables,
                self.config.t_len
            ));
        }
        if !x.is_finite() {
            return arg("input contains non-finite values");
        }
        Ok(())
    }

    /// Conv features of every variable; `parallel` spreads variables over the
    /// thread pool.
    pub fn conv_features(&self, x: &Matrix, parallel: bool) -> Result<Vec<(Matrix, ConvCache)>> {
        self.check_input(x)?;
        let spec = self.config.conv_spec();
        let run = |i: usize| {
            conv_forward(x.row(i), &self.params.conv.per_variable[i], &spec, &self.layout)
        };
        if parallel {
            (0..self.config.variables).into_par_iter().map(run).collect()
        } else {
            (0..self.config.variables).map(run).collect()
        }
    }

    /// Class probabilities and the full trace for one `P x T` input.
    pub fn forward(&self, x: &Matrix) -> Result<(Vec<f64>, ForwardTrace)> {
        let (features, conv_caches): (Vec<_>, Vec<_>) =
            self.conv_features(x, false)?.into_iter().unzip();
        let (p, j) = (self.config.variables, self.config.filters);
        let l = self.layout.count();
        let ablation = self.config.ablation;

        let mut variable_scores = Matrix::zeros(p, l);
        let mut var_caches = Vec::new();
        let mut context = Matrix::zeros(l, j);
        for t in 0..l {
            let c_t = interval_matrix(&features, t);
            if ablation.uses_variable_attention() {
                let out = variable_attention(&c_t, &self.params.var_att)?;
                for (i, &a) in out.scores.iter().enumerate() {
                    variable_scores.set(i, t, a);
                }
                context.row_mut(t).copy_from_slice(&out.pooled);
                var_caches.push(out.cache);
            } else {
                let w = 1.0 / p as f64;
                for i in 0..p {
                    variable_scores.set(i, t, w);
                }
                context.row_mut(t).copy_from_slice(&c_t.vec_mul(&vec![w; p]));
            }
        }

        let (temporal_scores, embedding, temp_cache) = if ablation.uses_temporal_attention() {
            let out = temporal_attention(&context, &self.params.temp_att)?;
            (out.scores, out.pooled, Some(out.cache))
        } else {
            let b = vec![1.0 / l as f64; l];
            let z = context.vec_mul(&b);
            (b, z, None)
        };

        let head = &self.params.head;
        let head_pre: Vec<f64> = head
            .w1
            .mul_vec(&embedding)
            .iter()
            .zip(head.b1.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        let head_hidden: Vec<f64> = head_pre.iter().map(|v| v.tanh()).collect();
        let logits: Vec<f64> = head
            .w2
            .mul_vec(&head_hidden)
            .iter()
            .zip(head.b2.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        let probs = softmax_unchecked(&logits);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("forward pass produced non-finite probabilities".into()));
        }
        Ok((
            probs.clone(),
            ForwardTrace {
                features,
                conv_caches,
                variable_scores,
                var_caches,
                context,
                temporal_scores,
                temp_cache,
                embedding,
                head_pre,
                head_hidden,
                logits,
                probs,
            },
        ))
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Joint variable/interval attention for one input.
    pub fn explain(&self, x: &Matrix) -> Result<AttentionExplanation> {
        if self.config.ablation != Ablation::Full {
            return Err(Error::Unsupported(format!(
                "explanations need both attention modules, model is '{}'",
                self.config.ablation
            )));
        }
        let (_, trace) = self.forward(x)?;
        AttentionExplanation::new(
            trace.variable_scores,
            trace.temporal_scores,
            self.layout.clone(),
        )
    }

    /// `reg_alpha * sum ||W||_F^2` over the penalized tensors.
    pub fn regularizer(&self) -> f64 {
        if self.config.reg_alpha == 0.0 {
            return 0.0;
        }
        let total: f64 = self
            .params
            .tensors()
            .into_iter()
            .filter(|(g, _)| self.penalized(*g))
            .map(|(_, m)| m.frobenius_sq())
            .sum();
        self.config.reg_alpha * total
    }

    fn penalized(&self, group: ParamGroup) -> bool {
        (self.config.reg_biases || !group.is_bias()) && (self.config.reg_conv || !group.is_conv())
    }

    fn check_batch(&self, xs: &[&Matrix], labels: &[usize]) -> Result<()> {
        if xs.is_empty() {
            return arg("empty batch");
        }
        if xs.len() != labels.len() {
            return arg("batch inputs and labels differ in length");
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.config.classes) {
            return arg(format!("label {y} out of range"));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch plus the regularizer.
    pub fn loss_batch(&self, xs: &[&Matrix], labels: &[usize]) -> Result<f64> {
        self.check_batch(xs, labels)?;
        let losses: Vec<f64> = xs
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| cross_entropy(&self.forward(x)?.0, y))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / xs.len() as f64 + self.regularizer())
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        xs: &[&Matrix],
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<(f64, LaxcatParams)> {
        self.check_batch(xs, labels)?;
        let scale = 1.0 / xs.len() as f64;
        let per_instance = |(x, &y): (&&Matrix, &usize)| -> Result<(f64, LaxcatParams)> {
            let (probs, trace) = self.forward(x)?;
            let loss = cross_entropy(&probs, y)?;
            let grads = self.backward_instance(x, y, &trace, scale)?;
            Ok((loss, grads))
        };
        let (data_loss, mut grads) = match reduction {
            Reduction::Ordered => {
                let parts: Vec<(f64, LaxcatParams)> = xs
                    .par_iter()
                    .zip(labels.par_iter())
                    .map(per_instance)
                    .collect::<Result<_>>()?;
                let mut total = 0.0;
                let mut acc = self.zero_grads();
                for (loss, g) in &parts {
                    total += loss;
                    acc.add_assign(g);
                }
                (total, acc)
            }
            Reduction::Unordered => xs
                .par_iter()
                .zip(labels.par_iter())
                .map(per_instance)
                .try_reduce(
                    || (0.0, self.zero_grads()),
                    |(la, mut ga), (lb, gb)| {
                        ga.add_assign(&gb);
                        Ok((la + lb, ga))
                    },
                )?,
        };

        let alpha = self.config.reg_alpha;
        if alpha != 0.0 {
            let penalized: Vec<bool> = self
                .params
                .tensors()
                .into_iter()
                .map(|(g, _)| self.penalized(g))
                .collect();
            for (((_, g), (_, w)), pen) in grads
                .tensors_mut()
                .into_iter()
                .zip(self.params.tensors())
                .zip(penalized)
            {
                if pen {
                    axpy(g.as_mut_slice(), 2.0 * alpha, w.as_slice());
                }
            }
        }
        Ok((data_loss * scale + self.regularizer(), grads))
    }

    /// Gradient of the batch loss (see [`Self::loss_and_grad`]).
    pub fn backward(&self, xs: &[&Matrix], labels: &[usize]) -> Result<LaxcatParams> {
        Ok(self.loss_and_grad(xs, labels, Reduction::Ordered)?.1)
    }

    /// Data-term gradient of one instance, multiplied by `scale`.
    fn backward_instance(
        &self,
        x: &Matrix,
        label: usize,
        trace: &ForwardTrace,
        scale: f64,
    ) -> Result<LaxcatParams> {
        let (p, j) = (self.config.variables, self.config.filters);
        let l = self.layout.count();
        let ablation = self.config.ablation;
        let mut grads = self.zero_grads();

        // fused softmax + cross-entropy
        let mut d_logits = trace.probs.clone();
        d_logits[label] -= 1.0;
        d_logits.iter_mut().for_each(|v| *v *= scale);

        let head = &self.params.head;
        let gh = &mut grads.head;
        gh.b2.as_mut_slice().copy_from_slice(&d_logits);
        for (c, &d) in d_logits.iter().enumerate() {
            axpy(gh.w2.row_mut(c), d, &trace.head_hidden);
        }
        let d_hidden = head.w2.transpose().mul_vec(&d_logits);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.head_hidden)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        gh.b1.as_mut_slice().copy_from_slice(&d_pre);
        for (k, &d) in d_pre.iter().enumerate() {
            axpy(gh.w1.row_mut(k), d, &trace.embedding);
        }
        let d_embedding = head.w1.transpose().mul_vec(&d_pre);

        let d_context = match &trace.temp_cache {
            Some(cache) => {
                let g = attention_backward(
                    &trace.context,
                    &self.params.temp_att,
                    cache,
                    &d_embedding,
                )?;
                grads.temp_att = g.params;
                g.input
            }
            None => {
                let mut d = Matrix::zeros(l, j);
                for t in 0..l {
                    axpy(d.row_mut(t), 1.0 / l as f64, &d_embedding);
                }
                d
            }
        };

        let mut d_features: Vec<Matrix> = (0..p).map(|_| Matrix::zeros(l, j)).collect();
        for t in 0..l {
            let d_h = d_context.row(t);
            if ablation.uses_variable_attention() {
                let c_t = interval_matrix(&trace.features, t);
                let g = attention_backward(
                    &c_t,
                    &self.params.var_att,
                    &trace.var_caches[t],
                    d_h,
                )?;
                grads.var_att.add_assign(&g.params);
                for (i, df) in d_features.iter_mut().enumerate() {
                    df.row_mut(t).copy_from_slice(g.input.row(i));
                }
            } else {
                for df in d_features.iter_mut() {
                    axpy(df.row_mut(t), 1.0 / p as f64, d_h);
                }
            }
        }

        let spec = self.config.conv_spec();
        for i in 0..p {
            grads.conv.per_variable[i] = conv_backward(
                &d_features[i],
                x.row(i),
                &trace.conv_caches[i],
                &spec,
                &self.layout,
            )?;
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            params: Some(self.params.clone()),
        };
        serde_json::to_string(&file).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Parses a checkpoint. A file without `params` yields the seeded
    /// initialization of its config.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::format(e.line(), e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::format(1, format!("not a model file: '{}'", file.format)));
        }
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                1,
                format!("unsupported model format version {}", file.version),
            ));
        }
        let mut model = LaxcatModel::new(file.config).map_err(|e| Error::format(1, e.to_string()))?;
        if let Some(params) = file.params {
            if !model.params.shapes_match(&params) {
                return Err(Error::format(1, "parameter shapes do not match the config"));
            }
            if params.tensors().iter().any(|(_, m)| !m.is_finite()) {
                return Err(Error::format(1, "parameters contain non-finite values"));
            }
            model.params = params;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk checkpoint layout.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    config: LaxcatConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<LaxcatParams>,
}

/// `C_t`: row `i` is variable `i`'s feature vector in interval `t`.
fn interval_matrix(features: &[Matrix], t: usize) -> Matrix {
    let j = features[0].cols();
    let mut c = Matrix::zeros(features.len(), j);
    for (i, f) in features.iter().enumerate() {
        c.row_mut(i).copy_from_slice(f.row(t));
    }
    c
}
