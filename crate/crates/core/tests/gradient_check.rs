//! Analytic backprop vs. central finite differences over every parameter group.

use std::collections::BTreeMap;

use laxcat::model::{Ablation, LaxcatConfig, LaxcatModel, ParamGroup};
use laxcat::numerics::{finite_diff_gradient, relative_error, Activation, Matrix, SeededRng};

fn batch(p: usize, t: usize, n: usize, seed: u64) -> (Vec<Matrix>, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let xs = (0..n).map(|_| Matrix::uniform(p, t, 1.5, &mut rng)).collect();
    let ys = (0..n).map(|i| i % 2).collect();
    (xs, ys)
}

/// Smallest |conv pre-activation| over the batch. Central differences are
/// meaningless across a relu kink, so batches must keep clear of it.
fn kink_margin(model: &LaxcatModel, xs: &[Matrix]) -> f64 {
    xs.iter()
        .flat_map(|x| model.forward(x).unwrap().1.conv_caches)
        .flat_map(|c| c.pre.into_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Largest relative error per parameter group.
fn check(config: LaxcatConfig, data_seed: u64) -> BTreeMap<ParamGroup, f64> {
    let model = LaxcatModel::new(config.clone()).unwrap();
    let (xs, ys) = (data_seed..)
        .map(|s| batch(config.variables, config.t_len, 4, s))
        .find(|(xs, _)| kink_margin(&model, xs) > 1e-3)
        .unwrap();
    let refs: Vec<&Matrix> = xs.iter().collect();
    let analytic = model.backward(&refs, &ys).unwrap().flatten();
    let groups = model.params.flat_groups();
    let mut probe = model.clone();
    let numeric = finite_diff_gradient(
        |theta| {
            probe.params.assign_flat(theta).unwrap();
            probe.loss_batch(&refs, &ys).unwrap()
        },
        &model.params.flatten(),
        1e-5,
    )
    .unwrap();
    let mut worst = BTreeMap::new();
    for ((a, d), g) in analytic.iter().zip(&numeric).zip(groups) {
        let e = worst.entry(g).or_insert(0.0f64);
        *e = e.max(relative_error(*a, *d));
    }
    worst
}

fn base() -> LaxcatConfig {
    LaxcatConfig {
        kernel_len: 5,
        filters: 4,
        hidden: 4,
        reg_alpha: 0.01,
        seed: 21,
        ..LaxcatConfig::new(3, 50, 2)
    }
}

#[test]
fn full_model_gradients_match() {
    let worst = check(base(), 1);
    assert_eq!(worst.len(), ParamGroup::ALL.len());
    for (g, e) in &worst {
        assert!(*e < 1e-4, "{g:?}: relative error {e:e}");
    }
}

#[test]
fn ablated_and_alternative_activation_gradients_match() {
    let variants = [
        LaxcatConfig { ablation: Ablation::NoVarAttention, ..base() },
        LaxcatConfig { ablation: Ablation::NoTemporalAttention, ..base() },
        LaxcatConfig { ablation: Ablation::NoAttention, ..base() },
        LaxcatConfig {
            conv_activation: Activation::Tanh,
            sigma1: Activation::Identity,
            sigma2: Activation::Tanh,
            classes: 3,
            ..base()
        },
        LaxcatConfig { reg_biases: false, reg_conv: false, reg_alpha: 0.1, ..base() },
        LaxcatConfig { conv_bias: false, kernel_len: 3, ..base() },
    ];
    for (k, cfg) in variants.into_iter().enumerate() {
        for (g, e) in check(cfg, 10 + k as u64) {
            assert!(e < 1e-4, "variant {k} {g:?}: relative error {e:e}");
        }
    }
}

