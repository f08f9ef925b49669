//! Per-variable 1-d convolution over sliding time intervals.
//!
//! Each variable owns a `J x L` kernel bank and a `J` bias. Window `t` covers
//! time points `[t * s, t * s + L)`; a trailing partial window is dropped, so
//! there are `floor((T - L) / s) + 1` intervals.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::numerics::{dot, Activation, Matrix, SeededRng};

/// Number of complete windows of length `kernel_len` taken every `stride` points.
pub fn interval_count(t_len: usize, kernel_len: usize, stride: usize) -> Result<usize> {
    if kernel_len == 0 || stride == 0 {
        return arg("kernel length and stride must be at least 1");
    }
    if t_len < kernel_len {
        return arg(format!(
            "series length {t_len} is shorter than kernel length {kernel_len}"
        ));
    }
    Ok((t_len - kernel_len) / stride + 1)
}

/// Stride at half the kernel length, rounded down, never below 1.
pub fn stride_from_kernel(kernel_len: usize) -> usize {
    (kernel_len / 2).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_len: usize,
    pub stride: usize,
    pub filters: usize,
    pub activation: Activation,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        if self.kernel_len == 0 || self.kernel_len > t_len {
            return arg(format!(
                "kernel length {} must lie in [1, {t_len}]",
                self.kernel_len
            ));
        }
        if self.stride == 0 || self.stride > self.kernel_len {
            return arg(format!(
                "stride {} must lie in [1, {}]",
                self.stride, self.kernel_len
            ));
        }
        if self.filters == 0 {
            return arg("at least one filter is required");
        }
        Ok(())
    }
}

/// Placement of the `l` intervals on the time axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalLayout {
    pub t_len: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
}

impl IntervalLayout {
    pub fn new(t_len: usize, kernel_len: usize, stride: usize) -> Result<Self> {
        let l = interval_count(t_len, kernel_len, stride)?;
        Ok(Self {
            t_len,
            kernel_len,
            stride,
            starts: (0..l).map(|t| t * stride).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Half-open time range `[start, end)` covered by interval `t`.
    pub fn window(&self, t: usize) -> (usize, usize) {
        let s = self.starts[t];
        (s, s + self.kernel_len)
    }
}

/// Kernel bank of one variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    /// `J x L`
    pub weights: Matrix,
    /// `1 x J`
    pub bias: Matrix,
}

impl ConvKernel {
    pub fn zeros(filters: usize, kernel_len: usize) -> Self {
        Self {
            weights: Matrix::zeros(filters, kernel_len),
            bias: Matrix::zeros(1, filters),
        }
    }

    /// Weights uniform in `[-1/sqrt(L), 1/sqrt(L)]`, bias zero.
    pub fn init(filters: usize, kernel_len: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (kernel_len as f64).sqrt();
        Self {
            weights: Matrix::uniform(filters, kernel_len, bound, rng),
            bias: Matrix::zeros(1, filters),
        }
    }
}

/// One independent kernel bank per variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub per_variable: Vec<ConvKernel>,
}

/// Pre-activations kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCache {
    pub pre: Matrix,
}

/// Features `l x J` for one variable; row `t` is `act(K * window_t + bias)`.
pub fn conv_forward(
    x: &[f64],
    kernel: &ConvKernel,
    spec: &ConvSpec,
    layout: &IntervalLayout,
) -> Result<(Matrix, ConvCache)> {
    if x.len() != layout.t_len {
        return arg(format!(
            "series has {} points, layout expects {}",
            x.len(),
            layout.t_len
        ));
    }
    if kernel.weights.shape() != (spec.filters, spec.kernel_len)
        || layout.kernel_len != spec.kernel_len
    {
        return arg("kernel shape does not match conv spec");
    }
    let l = layout.count();
    let mut pre = Matrix::zeros(l, spec.filters);
    for (t, &start) in layout.starts.iter().enumerate() {
        let window = &x[start..start + spec.kernel_len];
        for j in 0..spec.filters {
            let mut v = dot(kernel.weights.row(j), window);
            if spec.use_bias {
                v += kernel.bias.get(0, j);
            }
            pre.set(t, j, v);
        }
    }
    let act = spec.activation;
    let features = pre.map(|v| act.apply(v));
    Ok((features, ConvCache { pre }))
}

/// Parameter gradient of the conv + activation composition for one variable.
pub fn conv_backward(
    d_features: &Matrix,
    x: &[f64],
    cache: &ConvCache,
    spec: &ConvSpec,
    layout: &IntervalLayout,
) -> Result<ConvKernel> {
    if d_features.shape() != cache.pre.shape()
        || cache.pre.shape() != (layout.count(), spec.filters)
        || x.len() != layout.t_len
    {
        return Err(Error::Internal(
            "conv backward called with a mismatched cache".into(),
        ));
    }
    let mut grad = ConvKernel::zeros(spec.filters, spec.kernel_len);
    for (t, &start) in layout.starts.iter().enumerate() {
        let window = &x[start..start + spec.kernel_len];
        for j in 0..spec.filters {
            let d_pre = d_features.get(t, j) * spec.activation.derivative(cache.pre.get(t, j));
            if d_pre == 0.0 {
                continue;
            }
            for (g, &xv) in grad.weights.row_mut(j).iter_mut().zip(window) {
                *g += d_pre * xv;
            }
            if spec.use_bias {
                grad.bias.add_at(0, j, d_pre);
            }
        }
    }
    Ok(grad)
}
