//! Acceptance suite. Runs every headline criterion at its stated tolerance
//! and prints one PASS/FAIL line each; exits nonzero if any fails.
//!
//! The synthetic benchmark runs (classification, explanation, baseline
//! comparison, kernel sweep) use the default data and protocol with
//! checkpoint selection on validation loss; see the README for why.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use laxcat::attention::{joint_attention, AttentionExplanation};
use laxcat::baselines::{dtw_bruteforce, dtw_distance, knn_dtw_classify, lr_predict, lr_train, DtwOptions, LrConfig};
use laxcat::dataset::{generate_synthetic, stratified_split, MtsDataset, SynthParams};
use laxcat::eval::accuracy;
use laxcat::model::{Ablation, LaxcatConfig, LaxcatModel, ParamGroup};
use laxcat::numerics::{finite_diff_gradient, mean, relative_error, Activation, Matrix, SeededRng};
use laxcat::trainer::{train, Selection, TrainProtocol, TrainReport};

struct Outcome {
    passed: Vec<bool>,
}

impl Outcome {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.passed.push(ok);
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn kink_margin(model: &LaxcatModel, xs: &[Matrix]) -> f64 {
    xs.iter()
        .flat_map(|x| model.forward(x).unwrap().1.conv_caches)
        .flat_map(|c| c.pre.into_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn gradient_suite(out: &mut Outcome) {
    let t = Instant::now();
    let config = LaxcatConfig {
        kernel_len: 5,
        filters: 4,
        hidden: 4,
        reg_alpha: 0.01,
        seed: 21,
        ..LaxcatConfig::new(3, 50, 2)
    };
    let model = LaxcatModel::new(config).unwrap();
    // finite differences straddling a relu kink are meaningless; draw a
    // batch that keeps every pre-activation clear of zero
    let (xs, ys) = (1u64..)
        .map(|s| {
            let mut rng = SeededRng::new(s);
            let xs: Vec<Matrix> = (0..4).map(|_| Matrix::uniform(3, 50, 1.5, &mut rng)).collect();
            (xs, vec![0, 1, 0, 1])
        })
        .find(|(xs, _)| kink_margin(&model, xs) > 1e-3)
        .unwrap();
    let refs: Vec<&Matrix> = xs.iter().collect();
    let analytic = model.backward(&refs, &ys).unwrap().flatten();
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
    let mut worst: BTreeMap<ParamGroup, f64> = BTreeMap::new();
    for ((a, d), g) in analytic.iter().zip(&numeric).zip(model.params.flat_groups()) {
        let e = worst.entry(g).or_insert(0.0);
        *e = e.max(relative_error(*a, *d));
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let elapsed = secs(t);
    out.record(
        "gradient suite",
        worst.len() == ParamGroup::ALL.len() && max < 1e-4 && elapsed < 60.0,
        format!("{} groups, max relative error {max:.2e} (< 1e-4), {elapsed:.1}s (< 60s)", worst.len()),
    );
}

fn attention_invariants(out: &mut Outcome) {
    let mut rng = SeededRng::new(2024);
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    for k in 0..1000u64 {
        let p = rng.int_inclusive(1, 5);
        let t_len = rng.int_inclusive(8, 40);
        let cfg = LaxcatConfig {
            kernel_len: rng.int_inclusive(1, 6),
            filters: rng.int_inclusive(1, 8),
            hidden: rng.int_inclusive(1, 8),
            sigma1: acts[rng.int_inclusive(0, 2)],
            sigma2: acts[rng.int_inclusive(0, 2)],
            seed: k,
            ..LaxcatConfig::new(p, t_len, 2)
        };
        let model = LaxcatModel::new(cfg).unwrap();
        let x = Matrix::uniform(p, t_len, 3.0, &mut rng);
        let (_, trace) = model.forward(&x).unwrap();
        let vs = &trace.variable_scores;
        for t in 0..vs.cols() {
            let col = vs.column(t);
            worst_sum = worst_sum.max((col.iter().sum::<f64>() - 1.0).abs());
            min_entry = col.iter().cloned().fold(min_entry, f64::min);
        }
        let b = &trace.temporal_scores;
        worst_sum = worst_sum.max((b.iter().sum::<f64>() - 1.0).abs());
        min_entry = b.iter().cloned().fold(min_entry, f64::min);
        let joint = joint_attention(vs, b).unwrap();
        worst_sum = worst_sum.max((joint.sum() - 1.0).abs());
        let e = AttentionExplanation::new(vs.clone(), b.clone(), model.layout().clone()).unwrap();
        worst_sum = worst_sum.max((e.joint.sum() - 1.0).abs());
    }
    out.record(
        "attention invariants",
        worst_sum <= 1e-9 && min_entry >= 0.0,
        format!("1000 models, max |sum - 1| {worst_sum:.2e} (<= 1e-9), min score {min_entry:.2e} (>= 0)"),
    );
}

fn benchmark_protocol() -> TrainProtocol {
    TrainProtocol {
        selection: Selection::ValLoss,
        ..TrainProtocol::default()
    }
}

fn run_benchmark(ds: &MtsDataset, ablation: Ablation, kernel_len: usize) -> TrainReport {
    let cfg = LaxcatConfig {
        ablation,
        kernel_len,
        ..LaxcatConfig::new(ds.p, ds.t_len, ds.class_count)
    };
    train(ds, &cfg, &benchmark_protocol()).unwrap().1
}

fn dtw_oracle(out: &mut Outcome) {
    let t = Instant::now();
    let mut rng = SeededRng::new(77);
    let o = DtwOptions::default();
    let seqs: Vec<Matrix> = (0..50)
        .map(|_| {
            let len = rng.int_inclusive(1, 6);
            Matrix::uniform(1, len, 2.0, &mut rng)
        })
        .collect();
    let mut mismatches = 0;
    for a in &seqs {
        for b in &seqs {
            if dtw_distance(a, b, o).unwrap() != dtw_bruteforce(a, b, o).unwrap() {
                mismatches += 1;
            }
        }
    }
    let mut asym = 0;
    let mut nonzero_self = 0;
    for _ in 0..100 {
        let a = Matrix::uniform(1, rng.int_inclusive(1, 30), 2.0, &mut rng);
        let b = Matrix::uniform(1, rng.int_inclusive(1, 30), 2.0, &mut rng);
        if dtw_distance(&a, &b, o).unwrap() != dtw_distance(&b, &a, o).unwrap() {
            asym += 1;
        }
        if dtw_distance(&a, &a, o).unwrap() != 0.0 {
            nonzero_self += 1;
        }
    }
    let elapsed = secs(t);
    out.record(
        "DTW oracle",
        mismatches == 0 && asym == 0 && nonzero_self == 0 && elapsed < 60.0,
        format!(
            "2500 ordered pairs, {mismatches} DP/brute-force mismatches; 100 pairs, {asym} asymmetric, \
             {nonzero_self} nonzero self-distances; {elapsed:.1}s (< 60s)"
        ),
    );
}

/// Test accuracies of LR on the benchmark splits of `protocol`.
fn lr_accuracies(ds: &MtsDataset, protocol: &TrainProtocol) -> Vec<f64> {
    (0..protocol.repeats)
        .map(|r| {
            let split = stratified_split(ds, protocol.fractions, protocol.split_seed(r)).unwrap();
            let lr = LrConfig {
                seed: protocol.seed,
                ..LrConfig::default()
            };
            let model = lr_train(ds, &split.train, &lr).unwrap();
            let preds = lr_predict(&model, ds, &split.test).unwrap();
            let labels: Vec<usize> = split.test.iter().map(|&i| ds.labels[i]).collect();
            accuracy(&preds, &labels).unwrap()
        })
        .collect()
}

fn dtw_accuracies(ds: &MtsDataset, protocol: &TrainProtocol) -> Vec<f64> {
    (0..protocol.repeats)
        .map(|r| {
            let split = stratified_split(ds, protocol.fractions, protocol.split_seed(r)).unwrap();
            let train: Vec<&Matrix> = split.train.iter().map(|&i| &ds.instances[i]).collect();
            let train_y: Vec<usize> = split.train.iter().map(|&i| ds.labels[i]).collect();
            let queries: Vec<&Matrix> = split.test.iter().map(|&i| &ds.instances[i]).collect();
            let preds = knn_dtw_classify(&train, &train_y, &queries, 1, DtwOptions::default()).unwrap();
            let labels: Vec<usize> = split.test.iter().map(|&i| ds.labels[i]).collect();
            accuracy(&preds, &labels).unwrap()
        })
        .collect()
}

fn masked_report(path: &Path) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    serde_json::to_string_pretty(&v).unwrap()
}

fn determinism(out: &mut Outcome) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_laxcat");
    let run = |args: &[&str]| {
        let status = Command::new(bin).args(args).current_dir(d).output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    run(&["synth", "--out", "synthetic.mts"]);
    for report in ["a.json", "b.json"] {
        run(&[
            "train", "--data", "synthetic.mts", "--out", "model.json", "--report", report, "--deterministic",
        ]);
    }
    let a = std::fs::read(d.join("a.json")).unwrap();
    let b = std::fs::read(d.join("b.json")).unwrap();
    let same = masked_report(&d.join("a.json")) == masked_report(&d.join("b.json"));
    out.record(
        "determinism",
        same,
        format!(
            "two default `train` runs: reports {} with timing masked ({} / {} bytes), {:.1}s",
            if same { "identical" } else { "differ" },
            a.len(),
            b.len(),
            secs(t)
        ),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut out = Outcome { passed: Vec::new() };

    gradient_suite(&mut out);
    attention_invariants(&mut out);

    let bench_start = Instant::now();
    let ds = generate_synthetic(&SynthParams::default()).unwrap();
    let full = run_benchmark(&ds, Ablation::Full, 5);
    let plain = run_benchmark(&ds, Ablation::NoAttention, 5);
    out.record(
        "synthetic classification",
        full.mean_test_accuracy >= 90.0 && full.mean_test_accuracy > plain.mean_test_accuracy,
        format!(
            "full {:.2} +/- {:.2} {:.2?} (>= 90) vs no_attention {:.2} +/- {:.2} {:.2?} (strictly below)",
            full.mean_test_accuracy,
            full.std_test_accuracy,
            full.test_accuracies,
            plain.mean_test_accuracy,
            plain.std_test_accuracy,
            plain.test_accuracies
        ),
    );

    let aam = full.mean_aam.unwrap();
    let uniform = full.mean_uniform_aam.unwrap();
    let on_var1 = full.argmax_on_mask_variable.unwrap();
    out.record(
        "explanation quality",
        aam >= 2.0 * uniform && on_var1 >= 0.70,
        format!(
            "mean AAM {aam:.2}% +/- {:.2} vs uniform {uniform:.2}% (ratio {:.2}, >= 2); \
             argmax on variable 1 for {:.1}% of positive test instances (>= 70%)",
            full.std_aam.unwrap(),
            aam / uniform,
            100.0 * on_var1
        ),
    );

    dtw_oracle(&mut out);

    let protocol = benchmark_protocol();
    let clean = generate_synthetic(&SynthParams {
        noise_sigma: 0.0,
        mag_min: 3.0,
        mag_max: 5.0,
        ..SynthParams::default()
    })
    .unwrap();
    let dtw_clean = dtw_accuracies(&clean, &protocol);
    let lr_clean = lr_accuracies(&clean, &protocol);
    let lr_noisy = lr_accuracies(&ds, &protocol);
    let wins = full
        .test_accuracies
        .iter()
        .zip(&lr_noisy)
        .filter(|(a, b)| a >= b)
        .count();
    out.record(
        "baseline sanity",
        mean(&dtw_clean) >= 95.0 && mean(&lr_clean) >= 95.0 && wins >= 4,
        format!(
            "noiseless mag in [3, 5]: 1NN-DTW {:.2}, LR {:.2} (>= 95); default data: LAXCAT >= LR in {wins}/5 \
             (LR {lr_noisy:.2?})",
            mean(&dtw_clean),
            mean(&lr_clean)
        ),
    );

    let mut by_l = vec![(5, full.mean_test_accuracy)];
    for l in [1, 2, 3] {
        by_l.push((l, run_benchmark(&ds, Ablation::Full, l).mean_test_accuracy));
    }
    by_l.sort_unstable_by_key(|e| e.0);
    let l1 = by_l[0].1;
    let best = by_l[1..].iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let bench = secs(bench_start);
    out.record(
        "kernel-size sensitivity",
        l1 <= best,
        format!(
            "mean accuracy by L: {} ; L=1 {l1:.2} <= best of 2,3,5 {best:.2}",
            by_l.iter().map(|(l, a)| format!("L={l} {a:.2}")).collect::<Vec<_>>().join(", ")
        ),
    );

    determinism(&mut out);

    let total = secs(start);
    out.record(
        "runtime",
        total < 1800.0,
        format!("synthetic benchmark {bench:.0}s, whole suite {total:.0}s (< 1800s)"),
    );

    let failed = out.passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", out.passed.len() - failed, out.passed.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
