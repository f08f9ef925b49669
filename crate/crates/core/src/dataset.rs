//! Labeled multivariate series, their text format, stratified splitting and
//! the square-wave synthetic benchmark.
//!
//! # File format
//!
//! UTF-8 text with LF newlines. Line 1 is a JSON header
//! `{"n":N,"p":P,"t":T,"classes":C,"var_names":[...]}`. Each instance then
//! takes `1 + P` lines: a label line
//!
//! ```text
//! label <int>[ mask <var_csv>:<start>-<end>]*
//! ```
//!
//! followed by one line per variable holding `T` comma-separated values.
//! Variable indices in masks are 0-based and `end` is exclusive. Values are
//! written in scientific notation with 17 significant digits so a save/load
//! round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// A block of relevant cells: the listed variables over time points `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub variables: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

/// Ground-truth relevance of one instance: a union of regions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub regions: Vec<MaskRegion>,
}

impl GroundTruthMask {
    pub fn single(variables: Vec<usize>, start: usize, end: usize) -> Self {
        Self {
            regions: vec![MaskRegion {
                variables,
                start,
                end,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.regions
            .iter()
            .all(|r| r.variables.is_empty() || r.start >= r.end)
    }

    pub fn validate(&self, p: usize, t_len: usize) -> Result<()> {
        for r in &self.regions {
            if r.start >= r.end || r.end > t_len {
                return arg(format!(
                    "mask range {}-{} is not inside [0, {t_len})",
                    r.start, r.end
                ));
            }
            if r.variables.is_empty() || r.variables.iter().any(|&v| v >= p) {
                return arg(format!("mask variables {:?} are not inside [0, {p})", r.variables));
            }
        }
        Ok(())
    }

    /// Whether `(variable, time)` is inside any region.
    pub fn contains(&self, variable: usize, time: usize) -> bool {
        self.regions
            .iter()
            .any(|r| r.variables.contains(&variable) && (r.start..r.end).contains(&time))
    }
}

/// `n` labeled instances, each a `p x t_len` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    pub p: usize,
    pub t_len: usize,
    pub class_count: usize,
    pub var_names: Vec<String>,
    pub instances: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub masks: Vec<Option<GroundTruthMask>>,
}

impl MtsDataset {
    pub fn new(
        var_names: Vec<String>,
        t_len: usize,
        class_count: usize,
        instances: Vec<Matrix>,
        labels: Vec<usize>,
        masks: Vec<Option<GroundTruthMask>>,
    ) -> Result<Self> {
        let ds = Self {
            p: var_names.len(),
            t_len,
            class_count,
            var_names,
            instances,
            labels,
            masks,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.masks.iter().any(Option::is_some)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.t_len == 0 {
            return arg("dataset needs at least one variable and one time point");
        }
        if self.labels.len() != self.instances.len() || self.masks.len() != self.instances.len() {
            return arg("instances, labels and masks differ in length");
        }
        for (k, x) in self.instances.iter().enumerate() {
            if x.shape() != (self.p, self.t_len) {
                return Err(Error::Data(format!(
                    "instance {k} is {:?}, expected ({}, {})",
                    x.shape(),
                    self.p,
                    self.t_len
                )));
            }
            if !x.is_finite() {
                return Err(Error::Data(format!("instance {k} has non-finite values")));
            }
        }
        if let Some(k) = self.labels.iter().position(|&y| y >= self.class_count) {
            return Err(Error::Data(format!(
                "label {} of instance {k} is not below class count {}",
                self.labels[k], self.class_count
            )));
        }
        for mask in self.masks.iter().flatten() {
            mask.validate(self.p, self.t_len)?;
        }
        Ok(())
    }

    /// Instances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copy holding only the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> MtsDataset {
        MtsDataset {
            p: self.p,
            t_len: self.t_len,
            class_count: self.class_count,
            var_names: self.var_names.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            n: self.len(),
            p: self.p,
            t: self.t_len,
            classes: self.class_count,
            var_names: self.var_names.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for ((x, y), mask) in self.instances.iter().zip(&self.labels).zip(&self.masks) {
            write!(out, "label {y}").unwrap();
            for r in mask.iter().flat_map(|m| &m.regions) {
                let vars: Vec<String> = r.variables.iter().map(usize::to_string).collect();
                write!(out, " mask {}:{}-{}", vars.join(","), r.start, r.end).unwrap();
            }
            out.push('\n');
            for i in 0..self.p {
                for (k, v) in x.row(i).iter().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    write!(out, "{v:.16e}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or_else(|| Error::format(1, "empty file"))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::format(1, format!("bad header: {e}")))?;
        if header.var_names.len() != header.p {
            return Err(Error::format(1, "var_names length differs from p"));
        }
        if header.p == 0 || header.t == 0 {
            return Err(Error::format(1, "p and t must be positive"));
        }
        let mut instances = Vec::with_capacity(header.n);
        let mut labels = Vec::with_capacity(header.n);
        let mut masks = Vec::with_capacity(header.n);
        for _ in 0..header.n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::format(text.lines().count() + 1, "missing instance"))?;
            let (label, mask) = parse_label_line(line, ln)?;
            if label >= header.classes {
                return Err(Error::format(
                    ln,
                    format!("label {label} is not below class count {}", header.classes),
                ));
            }
            if let Some(m) = &mask {
                m.validate(header.p, header.t)
                    .map_err(|e| Error::format(ln, e.to_string()))?;
            }
            let mut data = Vec::with_capacity(header.p * header.t);
            for _ in 0..header.p {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| Error::format(text.lines().count() + 1, "missing variable row"))?;
                let before = data.len();
                for tok in row.split(',') {
                    let v: f64 = tok
                        .trim()
                        .parse()
                        .map_err(|_| Error::format(ln, format!("bad number '{tok}'")))?;
                    if !v.is_finite() {
                        return Err(Error::format(ln, "non-finite value"));
                    }
                    data.push(v);
                }
                if data.len() - before != header.t {
                    return Err(Error::format(
                        ln,
                        format!("expected {} values, found {}", header.t, data.len() - before),
                    ));
                }
            }
            instances.push(Matrix::from_vec(header.p, header.t, data)?);
            labels.push(label);
            masks.push(mask);
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::format(ln, format!("unexpected trailing content '{extra}'")));
        }
        MtsDataset::new(header.var_names, header.t, header.classes, instances, labels, masks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    p: usize,
    t: usize,
    classes: usize,
    var_names: Vec<String>,
}

fn parse_label_line(line: &str, ln: usize) -> Result<(usize, Option<GroundTruthMask>)> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some("label") {
        return Err(Error::format(ln, "expected 'label <int>'"));
    }
    let label: usize = toks
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(ln, "missing or invalid label"))?;
    let mut regions = Vec::new();
    while let Some(tok) = toks.next() {
        if tok != "mask" {
            return Err(Error::format(ln, format!("unexpected token '{tok}'")));
        }
        let spec = toks
            .next()
            .ok_or_else(|| Error::format(ln, "mask without a region"))?;
        regions.push(parse_region(spec).ok_or_else(|| {
            Error::format(ln, format!("bad mask region '{spec}', expected vars:start-end"))
        })?);
    }
    let mask = (!regions.is_empty()).then_some(GroundTruthMask { regions });
    Ok((label, mask))
}

fn parse_region(spec: &str) -> Option<MaskRegion> {
    let (vars, range) = spec.split_once(':')?;
    let (start, end) = range.split_once('-')?;
    let variables = vars
        .split(',')
        .map(|v| v.parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    Some(MaskRegion {
        variables,
        start: start.parse().ok()?,
        end: end.parse().ok()?,
    })
}

/// Settings of the square-wave benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n: usize,
    pub noise_sigma: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub mag_min: f64,
    pub mag_max: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n: 1000,
            noise_sigma: 0.1,
            len_min: 5,
            len_max: 15,
            mag_min: 1.0,
            mag_max: 3.0,
            seed: 0,
        }
    }
}

/// Points per synthetic series.
pub const SYNTH_T: usize = 50;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return arg("synthetic dataset needs at least two instances");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return arg("noise sigma must be nonnegative");
        }
        if self.len_min < 1 || self.len_min > self.len_max || self.len_max > SYNTH_T {
            return arg(format!(
                "square length range [{}, {}] must satisfy 1 <= min <= max <= {SYNTH_T}",
                self.len_min, self.len_max
            ));
        }
        if !(self.mag_min > 0.0) || !(self.mag_min <= self.mag_max) || !self.mag_max.is_finite() {
            return arg(format!(
                "magnitude range [{}, {}] must satisfy 0 < min <= max",
                self.mag_min, self.mag_max
            ));
        }
        Ok(())
    }
}

/// Three variables sampled at 50 evenly spaced points of `[0, 1]`:
/// `cos(2 pi t)`, `sin(2 pi t)` and `exp(t)`, each plus Gaussian noise. Half
/// of the instances (label 1) get a square pulse added to the first
/// variable; the pulse cells form the instance's mask.
pub fn generate_synthetic(params: &SynthParams) -> Result<MtsDataset> {
    params.validate()?;
    let mut rng = SeededRng::new(params.seed);
    let n = params.n;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut positive = vec![false; n];
    for &i in &order[..n / 2] {
        positive[i] = true;
    }

    let grid: Vec<f64> = (0..SYNTH_T)
        .map(|k| k as f64 / (SYNTH_T - 1) as f64)
        .collect();
    let mut instances = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for &is_pos in &positive {
        let mut data = Vec::with_capacity(3 * SYNTH_T);
        let bases: [fn(f64) -> f64; 3] = [
            |t| (2.0 * std::f64::consts::PI * t).cos(),
            |t| (2.0 * std::f64::consts::PI * t).sin(),
            f64::exp,
        ];
        for base in bases {
            for &t in &grid {
                data.push(base(t) + params.noise_sigma * rng.normal());
            }
        }
        let mask = if is_pos {
            let len = rng.int_inclusive(params.len_min, params.len_max);
            let start = rng.int_inclusive(0, SYNTH_T - len);
            let mag = rng.uniform_range(params.mag_min, params.mag_max);
            for v in &mut data[start..start + len] {
                *v += mag;
            }
            Some(GroundTruthMask::single(vec![0], start, start + len))
        } else {
            None
        };
        instances.push(Matrix::from_vec(3, SYNTH_T, data)?);
        labels.push(usize::from(is_pos));
        masks.push(mask);
    }
    MtsDataset::new(
        vec!["x1".into(), "x2".into(), "x3".into()],
        SYNTH_T,
        2,
        instances,
        labels,
        masks,
    )
}

/// Index lists of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rounds the `classes x 3` quota table so every cell is its floor or ceiling
/// and row/column sums are exact.
fn round_allocation(by_class: &[Vec<usize>], targets: [usize; 3], n: usize) -> Vec<[usize; 3]> {
    let classes = by_class.len();
    let mut alloc = vec![[0usize; 3]; classes];
    let mut fractional = vec![[false; 3]; classes];
    let mut remainders = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        for part in 0..3 {
            let q = members.len() as f64 * targets[part] as f64 / n as f64;
            let f = q.floor();
            alloc[c][part] = f as usize;
            if q - f > 1e-9 {
                fractional[c][part] = true;
                remainders.push((q - f, c, part));
            }
        }
    }
    let mut row_need: Vec<usize> = by_class
        .iter()
        .zip(&alloc)
        .map(|(m, a)| m.len() - a.iter().sum::<usize>())
        .collect();
    let mut col_need = targets;
    for a in &alloc {
        for part in 0..3 {
            col_need[part] -= a[part];
        }
    }
    let mut bumped = vec![[false; 3]; classes];
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, c, part) in &remainders {
        if row_need[c] > 0 && col_need[part] > 0 {
            bumped[c][part] = true;
            row_need[c] -= 1;
            col_need[part] -= 1;
        }
    }
    // Greedy can strand a class whose open cells sit in full parts; reroute
    // along alternating paths class -> part -> class holding a bump -> ...
    while let Some(c0) = row_need.iter().position(|&r| r > 0) {
        let mut prev_part: Vec<Option<usize>> = vec![None; 3];
        let mut class_from: Vec<Option<usize>> = vec![None; classes];
        let mut queue = std::collections::VecDeque::from([c0]);
        let mut seen = vec![false; classes];
        seen[c0] = true;
        let mut end = None;
        'search: while let Some(c) = queue.pop_front() {
            for part in 0..3 {
                if !fractional[c][part] || bumped[c][part] || prev_part[part].is_some() {
                    continue;
                }
                prev_part[part] = Some(c);
                if col_need[part] > 0 {
                    end = Some(part);
                    break 'search;
                }
                for c2 in 0..classes {
                    if bumped[c2][part] && !seen[c2] {
                        seen[c2] = true;
                        class_from[c2] = Some(part);
                        queue.push_back(c2);
                    }
                }
            }
        }
        let mut part = end.expect("a consistent rounding always exists");
        col_need[part] -= 1;
        row_need[c0] -= 1;
        loop {
            let c = prev_part[part].expect("path is connected");
            bumped[c][part] = true;
            match class_from[c] {
                None => break,
                Some(p2) => {
                    bumped[c][p2] = false;
                    part = p2;
                }
            }
        }
    }
    for c in 0..classes {
        for part in 0..3 {
            alloc[c][part] += bumped[c][part] as usize;
        }
    }
    alloc
}

/// Seeded, class-stratified train/validation/test partition.
///
/// Part sizes are `round(n * f)` for validation and test, with train taking
/// the rest. Class `c` gets `n_c * size / n` instances of each part, rounded
/// up or down so that class and part totals are both exact: floors first,
/// then the largest fractional remainders, then augmenting paths when the
/// greedy pass gets stuck.
pub fn stratified_split(ds: &MtsDataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return arg("split fractions must all be positive");
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg("split fractions must sum to 1");
    }
    let n = ds.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 3 {
            return Err(Error::Data(format!(
                "class {c} has {} instances, fewer than the 3 split parts",
                members.len()
            )));
        }
    }

    let val_target = (n as f64 * fractions[1]).round() as usize;
    let test_target = (n as f64 * fractions[2]).round() as usize;
    let targets = [n - val_target - test_target, val_target, test_target];

    let alloc = round_allocation(&by_class, targets, n);
    let mut rng = SeededRng::new(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (members, a) in by_class.iter().zip(&alloc) {
        let mut shuffled = members.clone();
        rng.shuffle(&mut shuffled);
        let (train, rest) = shuffled.split_at(a[0]);
        let (val, test) = rest.split_at(a[1]);
        split.train.extend_from_slice(train);
        split.val.extend_from_slice(val);
        split.test.extend_from_slice(test);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    if split.val.is_empty() || split.test.is_empty() || split.train.is_empty() {
        return Err(Error::Data("dataset too small for a three-way split".into()));
    }
    Ok(split)
}
