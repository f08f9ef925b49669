//! Reference classifiers: nearest neighbour under dynamic time warping and
//! multinomial logistic regression on the flattened series.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MtsDataset;
use crate::error::{arg, Error, Result};
use crate::numerics::{argmax, cross_entropy, softmax_unchecked, Matrix, SeededRng};
use crate::trainer::{adam_step, AdamConfig, AdamState};

/// Local cost between two aligned time points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwCost {
    /// Sum over variables of |a - b|.
    #[default]
    Absolute,
    /// Sum over variables of (a - b)^2.
    Squared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtwOptions {
    pub cost: DtwCost,
    /// Z-normalize every variable of both series before aligning.
    pub znormalize: bool,
}

fn point_cost(a: &Matrix, i: usize, b: &Matrix, j: usize, cost: DtwCost) -> f64 {
    (0..a.rows())
        .map(|v| {
            let d = a.get(v, i) - b.get(v, j);
            match cost {
                DtwCost::Absolute => d.abs(),
                DtwCost::Squared => d * d,
            }
        })
        .sum()
}

fn znormalized(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in 0..x.rows() {
        let row = out.row_mut(v);
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let sd = (row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
        for x in row.iter_mut() {
            *x = if sd > 1e-12 { (*x - mu) / sd } else { 0.0 };
        }
    }
    out
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return arg(format!("variable counts differ: {} vs {}", a.rows(), b.rows()));
    }
    if a.cols() == 0 || b.cols() == 0 {
        return arg("series must have at least one time point");
    }
    Ok(())
}

/// Dependent multivariate DTW: one warping path shared by all variables.
/// Series are `P x T` matrices; lengths may differ.
pub fn dtw_distance(a: &Matrix, b: &Matrix, options: DtwOptions) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = if options.znormalize {
        (znormalized(a), znormalized(b))
    } else {
        (a.clone(), b.clone())
    };
    let (n, m) = (a.cols(), b.cols());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = point_cost(&a, i - 1, &b, j - 1, options.cost) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Minimum path cost by enumerating every monotone warping path. Exponential;
/// only for checking the dynamic program on short series.
pub fn dtw_bruteforce(a: &Matrix, b: &Matrix, options: DtwOptions) -> Result<f64> {
    check_pair(a, b)?;
    if a.cols() > 8 || b.cols() > 8 {
        return arg("brute-force DTW is limited to 8 time points");
    }
    let (a, b) = if options.znormalize {
        (znormalized(a), znormalized(b))
    } else {
        (a.clone(), b.clone())
    };
    fn walk(a: &Matrix, b: &Matrix, i: usize, j: usize, acc: f64, cost: DtwCost, best: &mut f64) {
        let acc = acc + point_cost(a, i, b, j, cost);
        if i + 1 == a.cols() && j + 1 == b.cols() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.cols() {
            walk(a, b, i + 1, j, acc, cost, best);
        }
        if j + 1 < b.cols() {
            walk(a, b, i, j + 1, acc, cost, best);
        }
        if i + 1 < a.cols() && j + 1 < b.cols() {
            walk(a, b, i + 1, j + 1, acc, cost, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(&a, &b, 0, 0, 0.0, options.cost, &mut best);
    Ok(best)
}

/// k-nearest-neighbour labels of `queries` against `train` under DTW.
/// Neighbours at equal distance are ranked by training index; the vote is a
/// majority with ties going to the smallest class.
pub fn knn_dtw_classify(
    train: &[&Matrix],
    train_labels: &[usize],
    queries: &[&Matrix],
    k: usize,
    options: DtwOptions,
) -> Result<Vec<usize>> {
    if train.is_empty() || train.len() != train_labels.len() {
        return arg("training set must be nonempty with one label per series");
    }
    if k == 0 {
        return arg("k must be at least 1");
    }
    let k = k.min(train.len());
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    queries
        .par_iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((dtw_distance(q, t, options)?, i)))
                .collect::<Result<_>>()?;
            // stable sort keeps index order among equal distances
            dist.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = vec![0usize; classes];
            for &(_, i) in &dist[..k] {
                votes[train_labels[i]] += 1;
            }
            let top = *votes.iter().max().expect("at least one class");
            Ok(votes.iter().position(|&v| v == top).expect("max exists"))
        })
        .collect()
}

/// Multinomial logistic regression over the row-major flattened `P x T` series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    /// `C x (P*T)`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            l2: 0.001,
            epochs: 100,
            batch_size: 40,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl LrModel {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, features),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.frobenius_sq().sqrt()
    }

    fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.as_slice().len() != self.weights.cols() {
            return arg(format!(
                "instance has {} values, model expects {}",
                x.as_slice().len(),
                self.weights.cols()
            ));
        }
        let mut z = self.weights.mul_vec(x.as_slice());
        for (z, b) in z.iter_mut().zip(&self.bias) {
            *z += b;
        }
        Ok(z)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logistic regression logits".into()));
        }
        Ok(softmax_unchecked(&z))
    }

    pub fn predict(&self, x: &Matrix) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    fn assign(&mut self, flat: &[f64]) {
        let n = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&flat[..n]);
        self.bias.copy_from_slice(&flat[n..]);
    }

    /// Mean cross-entropy plus `l2 * ||W||^2`.
    pub fn loss(&self, xs: &[&Matrix], labels: &[usize], l2: f64) -> Result<f64> {
        if xs.is_empty() || xs.len() != labels.len() {
            return arg("batch must be nonempty with one label per instance");
        }
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            total += cross_entropy(&self.predict_proba(x)?, y)?;
        }
        Ok(total / xs.len() as f64 + l2 * self.weights.frobenius_sq())
    }

    /// Gradient of [`LrModel::loss`], flattened as weights (row-major) then bias.
    pub fn gradient(&self, xs: &[&Matrix], labels: &[usize], l2: f64) -> Result<Vec<f64>> {
        if xs.is_empty() || xs.len() != labels.len() {
            return arg("batch must be nonempty with one label per instance");
        }
        let (c, f) = self.weights.shape();
        let mut grad = vec![0.0; c * f + c];
        let inv = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(labels) {
            if y >= c {
                return arg(format!("label {y} out of range for {c} classes"));
            }
            let mut d = self.predict_proba(x)?;
            d[y] -= 1.0;
            for (k, dk) in d.iter().enumerate() {
                let row = &mut grad[k * f..(k + 1) * f];
                for (g, xv) in row.iter_mut().zip(x.as_slice()) {
                    *g += inv * dk * xv;
                }
                grad[c * f + k] += inv * dk;
            }
        }
        for (g, w) in grad.iter_mut().zip(self.weights.as_slice()) {
            *g += 2.0 * l2 * w;
        }
        Ok(grad)
    }
}

/// Fits logistic regression with Adam on shuffled minibatches for a fixed
/// number of epochs.
pub fn lr_train(ds: &MtsDataset, indices: &[usize], config: &LrConfig) -> Result<LrModel> {
    if indices.is_empty() {
        return arg("logistic regression needs at least one training instance");
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return arg("batch size and epochs must be at least 1");
    }
    if !(config.l2 >= 0.0) {
        return arg("l2 penalty must be nonnegative");
    }
    let mut model = LrModel::zeros(ds.p * ds.t_len, ds.class_count);
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len(), config.adam);
    let mut order = indices.to_vec();
    for epoch in 0..config.epochs {
        SeededRng::derive(config.seed, epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&Matrix> = chunk.iter().map(|&i| &ds.instances[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let grad = model.gradient(&xs, &ys, config.l2)?;
            adam_step(&mut flat, &grad, &mut adam)?;
            model.assign(&flat);
        }
    }
    if !model.weights.is_finite() {
        return Err(Error::Numeric("logistic regression diverged".into()));
    }
    Ok(model)
}

pub fn lr_predict(model: &LrModel, ds: &MtsDataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| model.predict(&ds.instances[i]))
        .collect()
}
