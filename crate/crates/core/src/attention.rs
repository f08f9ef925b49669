//! Variable attention, temporal attention and their joint product.
//!
//! Both attention networks share one shape. Given `n` items stacked as the
//! rows of an `n x J` matrix `M`:
//!
//! ```text
//! r      = W1 * M + B1            (1 x J)
//! g      = sigma1(r)
//! s      = sigma2(g * W2 + B2)    (1 x n)
//! scores = softmax(s)
//! pooled = sum_i scores[i] * M[i, :]
//! ```
//!
//! Variable attention runs this over the `P x J` feature matrix of each
//! interval; temporal attention runs it once over the `l x J` context matrix.

use serde::{Deserialize, Serialize};

use crate::conv::IntervalLayout;
use crate::error::{arg, Error, Result};
use crate::numerics::{axpy, dot, softmax_backward, softmax_unchecked, Activation, Matrix, SeededRng};

/// Weights of one attention network over `n` items with `J`-dim features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `1 x n`
    pub w1: Matrix,
    /// `1 x J`
    pub b1: Matrix,
    /// `J x n`
    pub w2: Matrix,
    /// `1 x n`
    pub b2: Matrix,
    pub sigma1: Activation,
    pub sigma2: Activation,
}

/// Variable attention, `n = P`, shared by all intervals.
pub type VarAttentionParams = AttentionParams;
/// Temporal attention, `n = l`.
pub type TempAttentionParams = AttentionParams;

impl AttentionParams {
    pub fn zeros(items: usize, features: usize, sigma1: Activation, sigma2: Activation) -> Self {
        Self {
            w1: Matrix::zeros(1, items),
            b1: Matrix::zeros(1, features),
            w2: Matrix::zeros(features, items),
            b2: Matrix::zeros(1, items),
            sigma1,
            sigma2,
        }
    }

    /// All four matrices uniform in `[-0.1, 0.1]`.
    pub fn init(
        items: usize,
        features: usize,
        sigma1: Activation,
        sigma2: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            w1: Matrix::uniform(1, items, 0.1, rng),
            b1: Matrix::uniform(1, features, 0.1, rng),
            w2: Matrix::uniform(features, items, 0.1, rng),
            b2: Matrix::uniform(1, items, 0.1, rng),
            sigma1,
            sigma2,
        }
    }

    pub fn items(&self) -> usize {
        self.w1.cols()
    }

    pub fn features(&self) -> usize {
        self.b1.cols()
    }

    fn check(&self, input: &Matrix) -> Result<()> {
        let (n, j) = (self.items(), self.features());
        if self.w1.shape() != (1, n)
            || self.b1.shape() != (1, j)
            || self.w2.shape() != (j, n)
            || self.b2.shape() != (1, n)
        {
            return arg("attention parameters have inconsistent shapes");
        }
        if input.shape() != (n, j) {
            return arg(format!(
                "attention input is {:?}, parameters expect ({n}, {j})",
                input.shape()
            ));
        }
        Ok(())
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.items(), self.features(), self.sigma1, self.sigma2)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        self.w1.add_assign(&other.w1);
        self.b1.add_assign(&other.b1);
        self.w2.add_assign(&other.w2);
        self.b2.add_assign(&other.b2);
    }
}

/// Intermediates of one attention forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCache {
    pub pre1: Vec<f64>,
    pub hidden: Vec<f64>,
    pub pre2: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Output of one attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Attended {
    pub scores: Vec<f64>,
    pub pooled: Vec<f64>,
    pub cache: AttentionCache,
}

fn attend(items: &Matrix, p: &AttentionParams) -> Result<Attended> {
    p.check(items)?;
    let pre1: Vec<f64> = items
        .vec_mul(p.w1.as_slice())
        .iter()
        .zip(p.b1.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    let hidden: Vec<f64> = pre1.iter().map(|&v| p.sigma1.apply(v)).collect();
    let pre2: Vec<f64> = p
        .w2
        .vec_mul(&hidden)
        .iter()
        .zip(p.b2.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    let s: Vec<f64> = pre2.iter().map(|&v| p.sigma2.apply(v)).collect();
    let scores = softmax_unchecked(&s);
    let pooled = items.vec_mul(&scores);
    Ok(Attended {
        scores: scores.clone(),
        pooled,
        cache: AttentionCache {
            pre1,
            hidden,
            pre2,
            scores,
        },
    })
}

/// Scores `a_t` over the `P` variables of one interval and the context vector `h_t`.
pub fn variable_attention(features: &Matrix, params: &VarAttentionParams) -> Result<Attended> {
    attend(features, params)
}

/// Scores `b` over the `l` intervals and the summary embedding `z`.
pub fn temporal_attention(context: &Matrix, params: &TempAttentionParams) -> Result<Attended> {
    attend(context, params)
}

/// Gradients of one attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub params: AttentionParams,
    pub input: Matrix,
}

/// Backward pass of [`variable_attention`] / [`temporal_attention`] given the
/// upstream gradient of the pooled vector.
pub fn attention_backward(
    items: &Matrix,
    params: &AttentionParams,
    cache: &AttentionCache,
    d_pooled: &[f64],
) -> Result<AttentionGrads> {
    let (n, j) = (params.items(), params.features());
    if items.shape() != (n, j)
        || d_pooled.len() != j
        || cache.scores.len() != n
        || cache.pre1.len() != j
    {
        return Err(Error::Internal(
            "attention backward called with a mismatched cache".into(),
        ));
    }
    let mut d_items = Matrix::zeros(n, j);
    let mut d_scores = vec![0.0; n];
    for i in 0..n {
        d_scores[i] = dot(items.row(i), d_pooled);
        axpy(d_items.row_mut(i), cache.scores[i], d_pooled);
    }
    let d_s = softmax_backward(&cache.scores, &d_scores);
    let d_pre2: Vec<f64> = d_s
        .iter()
        .zip(&cache.pre2)
        .map(|(d, &x)| d * params.sigma2.derivative(x))
        .collect();

    let mut grads = params.zeros_like();
    grads.b2.as_mut_slice().copy_from_slice(&d_pre2);
    for (k, &h) in cache.hidden.iter().enumerate() {
        axpy(grads.w2.row_mut(k), h, &d_pre2);
    }
    let d_hidden = params.w2.mul_vec(&d_pre2);
    let d_pre1: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.pre1)
        .map(|(d, &x)| d * params.sigma1.derivative(x))
        .collect();
    grads.b1.as_mut_slice().copy_from_slice(&d_pre1);
    for i in 0..n {
        grads.w1.set(0, i, dot(items.row(i), &d_pre1));
        axpy(d_items.row_mut(i), params.w1.get(0, i), &d_pre1);
    }
    Ok(AttentionGrads {
        params: grads,
        input: d_items,
    })
}

/// `joint[i][t] = variable_scores[i][t] * temporal_scores[t]`.
///
/// Every column of `variable_scores` and the temporal vector must each sum to
/// 1 within `1e-6`.
pub fn joint_attention(variable_scores: &Matrix, temporal_scores: &[f64]) -> Result<Matrix> {
    let (p, l) = variable_scores.shape();
    if temporal_scores.len() != l {
        return arg(format!(
            "temporal scores have length {}, expected {l}",
            temporal_scores.len()
        ));
    }
    if (temporal_scores.iter().sum::<f64>() - 1.0).abs() > 1e-6
        || temporal_scores.iter().any(|&b| b < 0.0)
    {
        return arg("temporal scores are not normalized");
    }
    for t in 0..l {
        let col: f64 = (0..p).map(|i| variable_scores.get(i, t)).sum();
        if (col - 1.0).abs() > 1e-6 {
            return arg(format!("variable scores of interval {t} are not normalized"));
        }
    }
    let mut joint = variable_scores.clone();
    for i in 0..p {
        for (v, &b) in joint.row_mut(i).iter_mut().zip(temporal_scores) {
            *v *= b;
        }
    }
    Ok(joint)
}

/// Per-instance explanation: where the model looked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExplanation {
    /// `P x l`; column `t` is `a_t`.
    pub variable_scores: Matrix,
    /// `b`, length `l`.
    pub temporal_scores: Vec<f64>,
    /// `P x l`.
    pub joint: Matrix,
    pub layout: IntervalLayout,
}

impl AttentionExplanation {
    pub fn new(
        variable_scores: Matrix,
        temporal_scores: Vec<f64>,
        layout: IntervalLayout,
    ) -> Result<Self> {
        let joint = joint_attention(&variable_scores, &temporal_scores)?;
        Ok(Self {
            variable_scores,
            temporal_scores,
            joint,
            layout,
        })
    }

    /// `(variable, interval)` of the largest joint cell, scanning variables first.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let (p, l) = self.joint.shape();
        let mut best = (0, 0);
        for i in 0..p {
            for t in 0..l {
                if self.joint.get(i, t) > self.joint.get(best.0, best.1) {
                    best = (i, t);
                }
            }
        }
        best
    }
}
