//! Classification metrics, the attention allocation measure (AAM) and
//! heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionExplanation;
use crate::conv::IntervalLayout;
use crate::dataset::{GroundTruthMask, MtsDataset};
use crate::error::{arg, Error, Result};
use crate::model::{Ablation, LaxcatModel};
use crate::numerics::{mean, Matrix};

/// Percentage of matching entries.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return arg("accuracy needs equally long, nonempty prediction and label lists");
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// When an interval counts as inside a mask's time range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// The window shares at least one time point with the range.
    #[default]
    AnyPoint,
    /// At least half of the window lies inside the range.
    HalfWindow,
}

fn overlaps(rule: OverlapRule, window: (usize, usize), range: (usize, usize)) -> bool {
    let lo = window.0.max(range.0);
    let hi = window.1.min(range.1);
    let shared = hi.saturating_sub(lo);
    match rule {
        OverlapRule::AnyPoint => shared >= 1,
        OverlapRule::HalfWindow => 2 * shared >= window.1 - window.0,
    }
}

/// `P x l` indicator of the (variable, interval) cells the mask marks relevant.
pub fn correct_cells(
    layout: &IntervalLayout,
    mask: &GroundTruthMask,
    p: usize,
    rule: OverlapRule,
) -> Result<Vec<Vec<bool>>> {
    if mask.is_empty() {
        return arg("empty ground-truth mask");
    }
    mask.validate(p, layout.t_len)?;
    let l = layout.count();
    let mut cells = vec![vec![false; l]; p];
    for r in &mask.regions {
        for t in 0..l {
            if overlaps(rule, layout.window(t), (r.start, r.end)) {
                for &v in &r.variables {
                    cells[v][t] = true;
                }
            }
        }
    }
    Ok(cells)
}

/// Percent of joint attention mass inside the mask's cells.
pub fn aam(explanation: &AttentionExplanation, mask: &GroundTruthMask, rule: OverlapRule) -> Result<f64> {
    let (p, _) = explanation.joint.shape();
    let cells = correct_cells(&explanation.layout, mask, p, rule)?;
    mass_inside(&explanation.joint, &cells)
}

fn mass_inside(joint: &Matrix, cells: &[Vec<bool>]) -> Result<f64> {
    let total = joint.sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("joint attention has no mass".into()));
    }
    let mut inside = 0.0;
    for (i, row) in cells.iter().enumerate() {
        for (t, &hit) in row.iter().enumerate() {
            if hit {
                inside += joint.get(i, t);
            }
        }
    }
    Ok(100.0 * inside / total)
}

/// AAM of perfectly uniform joint attention, each cell `(1/P) * (1/l)`.
pub fn uniform_baseline_aam(
    layout: &IntervalLayout,
    mask: &GroundTruthMask,
    p: usize,
    rule: OverlapRule,
) -> Result<f64> {
    let cells = correct_cells(layout, mask, p, rule)?;
    let l = layout.count();
    let cell = (1.0 / p as f64) * (1.0 / l as f64);
    mass_inside(&Matrix::from_vec(p, l, vec![cell; p * l])?, &cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAam {
    pub index: usize,
    pub aam: f64,
    pub uniform_aam: f64,
    /// Variable of the largest joint-attention cell.
    pub argmax_variable: usize,
    pub argmax_interval: usize,
    /// Whether `argmax_variable` is one of the mask's variables.
    pub argmax_in_mask_variables: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Per class; 0 when the class is never predicted.
    pub precision: Vec<f64>,
    /// Per class; 0 when the class is absent.
    pub recall: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_aam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_uniform_aam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_aam: Option<Vec<InstanceAam>>,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let acc = accuracy(preds, labels)?;
        let confusion = confusion_matrix(preds, labels, classes);
        let precision = (0..classes)
            .map(|c| {
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                if predicted == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / predicted as f64
                }
            })
            .collect();
        let recall = (0..classes)
            .map(|c| {
                let actual: usize = confusion[c].iter().sum();
                if actual == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / actual as f64
                }
            })
            .collect();
        Ok(Self {
            n: preds.len(),
            accuracy: acc,
            precision,
            recall,
            confusion,
            mean_aam: None,
            mean_uniform_aam: None,
            instance_aam: None,
        })
    }
}

/// AAM of every masked instance among `indices`.
pub fn explanation_scores(
    model: &LaxcatModel,
    ds: &MtsDataset,
    indices: &[usize],
    rule: OverlapRule,
) -> Result<Vec<InstanceAam>> {
    let mut out = Vec::new();
    for &i in indices {
        let Some(mask) = &ds.masks[i] else { continue };
        let e = model.explain(&ds.instances[i])?;
        let (argmax_variable, argmax_interval) = e.argmax_cell();
        out.push(InstanceAam {
            index: i,
            aam: aam(&e, mask, rule)?,
            uniform_aam: uniform_baseline_aam(&e.layout, mask, ds.p, rule)?,
            argmax_variable,
            argmax_interval,
            argmax_in_mask_variables: mask
                .regions
                .iter()
                .any(|r| r.variables.contains(&argmax_variable)),
        });
    }
    Ok(out)
}

/// Accuracy, confusion and (for full models on masked data) AAM over `indices`.
pub fn evaluate(
    model: &LaxcatModel,
    ds: &MtsDataset,
    indices: &[usize],
    rule: OverlapRule,
) -> Result<EvalReport> {
    let preds = indices
        .iter()
        .map(|&i| model.predict(&ds.instances[i]))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
    let mut report = EvalReport::from_predictions(&preds, &labels, ds.class_count)?;
    if model.config().ablation == Ablation::Full && indices.iter().any(|&i| ds.masks[i].is_some()) {
        let scores = explanation_scores(model, ds, indices, rule)?;
        report.mean_aam = Some(mean(&scores.iter().map(|s| s.aam).collect::<Vec<_>>()));
        report.mean_uniform_aam =
            Some(mean(&scores.iter().map(|s| s.uniform_aam).collect::<Vec<_>>()));
        report.instance_aam = Some(scores);
    }
    Ok(report)
}

/// Path of the JSON file written next to a heatmap CSV.
pub fn heatmap_sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct HeatmapSidecar {
    temporal_scores: Vec<f64>,
    /// One entry per interval, `P` scores each.
    variable_scores: Vec<Vec<f64>>,
    interval_starts: Vec<usize>,
    kernel_len: usize,
}

/// Writes the joint attention as CSV (one row per interval) and the two
/// factor score sets as a JSON sidecar.
pub fn export_heatmap(explanation: &AttentionExplanation, path: &Path) -> Result<()> {
    let (p, l) = explanation.joint.shape();
    let mut csv = String::from("interval_start,interval_end");
    for i in 1..=p {
        write!(csv, ",var_{i}").unwrap();
    }
    csv.push('\n');
    for t in 0..l {
        let (start, end) = explanation.layout.window(t);
        write!(csv, "{start},{end}").unwrap();
        for i in 0..p {
            write!(csv, ",{:.16e}", explanation.joint.get(i, t)).unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;

    let sidecar = HeatmapSidecar {
        temporal_scores: explanation.temporal_scores.clone(),
        variable_scores: (0..l)
            .map(|t| explanation.variable_scores.column(t))
            .collect(),
        interval_starts: explanation.layout.starts.clone(),
        kernel_len: explanation.layout.kernel_len,
    };
    let side = heatmap_sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Reads a heatmap CSV back into a `P x l` joint matrix.
pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(1, "empty heatmap"))?;
    let p = header.split(',').count().saturating_sub(2);
    if p == 0 || !header.starts_with("interval_start,interval_end") {
        return Err(Error::format(1, "bad heatmap header"));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p + 2 {
            return Err(Error::format(k + 2, "wrong number of fields"));
        }
        let row = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(k + 2, e.to_string()))?;
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows)?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_explanation(p: usize, layout: IntervalLayout) -> AttentionExplanation {
        let l = layout.count();
        AttentionExplanation::new(
            Matrix::from_vec(p, l, vec![1.0 / p as f64; p * l]).unwrap(),
            vec![1.0 / l as f64; l],
            layout,
        )
        .unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 75.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn report_confusion_rows_sum_to_class_counts() {
        let preds = [0, 1, 1, 2, 0, 2];
        let labels = [0, 1, 0, 2, 2, 2];
        let r = EvalReport::from_predictions(&preds, &labels, 3).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 2]]);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert!((r.accuracy - 100.0 * trace as f64 / 6.0).abs() < 1e-12);
        assert!((r.recall[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.precision[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aam_of_uniform_attention() {
        // l = 10 non-overlapping windows of length 1
        let layout = IntervalLayout::new(10, 1, 1).unwrap();
        let e = uniform_explanation(3, layout.clone());
        let mask = GroundTruthMask::single(vec![0], 2, 5);
        let a = aam(&e, &mask, OverlapRule::AnyPoint).unwrap();
        assert!((a - 10.0).abs() < 1e-12);
        let u = uniform_baseline_aam(&layout, &mask, 3, OverlapRule::AnyPoint).unwrap();
        assert!((u - 10.0).abs() < 1e-12);
        // same cells, same summation order
        assert_eq!(a, u);

        let everything = GroundTruthMask::single(vec![0, 1, 2], 0, 10);
        assert!((uniform_baseline_aam(&layout, &everything, 3, OverlapRule::AnyPoint).unwrap() - 100.0).abs() < 1e-12);
        let single = IntervalLayout::new(4, 4, 1).unwrap();
        let m = GroundTruthMask::single(vec![0], 1, 2);
        assert_eq!(uniform_baseline_aam(&single, &m, 1, OverlapRule::AnyPoint).unwrap(), 100.0);
        assert!(uniform_baseline_aam(&single, &GroundTruthMask::default(), 1, OverlapRule::AnyPoint).is_err());
    }

    #[test]
    fn aam_with_all_mass_inside() {
        let layout = IntervalLayout::new(10, 2, 2).unwrap();
        let mut b = vec![0.0; 5];
        b[1] = 1.0;
        let mut a = Matrix::zeros(2, 5);
        for t in 0..5 {
            a.set(0, t, 1.0);
        }
        let e = AttentionExplanation::new(a, b, layout).unwrap();
        let mask = GroundTruthMask::single(vec![0], 2, 4);
        assert!((aam(&e, &mask, OverlapRule::AnyPoint).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_rules() {
        assert!(overlaps(OverlapRule::AnyPoint, (0, 5), (4, 9)));
        assert!(!overlaps(OverlapRule::AnyPoint, (0, 5), (5, 9)));
        assert!(!overlaps(OverlapRule::HalfWindow, (0, 5), (4, 9)));
        assert!(overlaps(OverlapRule::HalfWindow, (0, 5), (2, 9)));
        assert!(overlaps(OverlapRule::HalfWindow, (0, 4), (2, 9)));
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        let layout = IntervalLayout::new(12, 3, 1).unwrap();
        let l = layout.count();
        let mut a = Matrix::zeros(2, l);
        let mut b = Vec::new();
        for t in 0..l {
            let w = 0.1 + t as f64 / 37.0;
            a.set(0, t, w);
            a.set(1, t, 1.0 - w);
            b.push((t + 1) as f64);
        }
        let total: f64 = b.iter().sum();
        b.iter_mut().for_each(|v| *v /= total);
        let e = AttentionExplanation::new(a, b, layout).unwrap();
        export_heatmap(&e, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("interval_start,interval_end,var_1,var_2\n0,3,"));
        assert_eq!(text.lines().count(), l + 1);
        let back = read_heatmap(&path).unwrap();
        assert_eq!(back, e.joint);
        assert!((back.sum() - 1.0).abs() < 1e-9);
        assert!(heatmap_sidecar_path(&path).exists());
    }

    #[test]
    fn export_reports_path_on_failure() {
        let layout = IntervalLayout::new(4, 2, 2).unwrap();
        let e = uniform_explanation(1, layout);
        let bad = Path::new("/nonexistent-dir/heat.csv");
        match export_heatmap(&e, bad) {
            Err(Error::Io { path, .. }) => assert_eq!(path, bad),
            other => panic!("unexpected {other:?}"),
        }
    }
}
