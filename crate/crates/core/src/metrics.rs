//! Classification metrics: confusion matrix, accuracy, macro
//! precision/recall/F1, one-vs-rest AUROC, Cohen's kappa and multiclass MCC.
//!
//! Conventions: argmax ties go to the lowest class index, AUROC counts score
//! ties as one half, and any ratio with a zero denominator is defined as 0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-sample class probabilities with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    scores: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl PredictionSet {
    /// `scores` is row-major `[labels.len() × classes]`; each row must sum to
    /// 1 within 1e-9.
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(Error::data("prediction set is empty"));
        }
        if scores.len() != labels.len() * classes {
            return Err(Error::data(format!(
                "{} scores for {} samples of {classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        for (i, row) in scores.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::data(format!(
                    "sample {i}: scores must be finite and non-negative"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::data(format!("sample {i}: scores sum to {s}, not 1")));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            scores,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    /// Column of scores for `class`.
    pub fn class_scores(&self, class: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[class]).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Counts with rows indexed by true class and columns by predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::data("confusion matrix must be square and non-empty"));
        }
        Ok(Self {
            counts: rows.concat(),
            classes,
        })
    }

    pub fn from_pairs(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        let mut cm = Self::zeros(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::data(format!("class ({t}, {p}) out of range for {classes}")));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn from_predictions(preds: &PredictionSet) -> Self {
        let mut cm = Self::zeros(preds.classes());
        for (i, &t) in preds.labels().iter().enumerate() {
            cm.counts[t * cm.classes + argmax(preds.row(i))] += 1;
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Samples whose true class is `k`.
    pub fn true_total(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    /// Samples predicted as `k`.
    pub fn predicted_total(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace() as f64, self.total() as f64)
    }

    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.get(k, k) as f64, self.predicted_total(k) as f64)
    }

    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.get(k, k) as f64, self.true_total(k) as f64)
    }

    pub fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        ratio(2.0 * p * r, p + r)
    }

    pub fn macro_precision(&self) -> f64 {
        self.macro_mean(Self::precision)
    }

    pub fn macro_recall(&self) -> f64 {
        self.macro_mean(Self::recall)
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_mean(Self::f1)
    }

    fn macro_mean(&self, f: fn(&Self, usize) -> f64) -> f64 {
        (0..self.classes).map(|k| f(self, k)).sum::<f64>() / self.classes as f64
    }

    /// Cohen's kappa, `(p_o − p_e)/(1 − p_e)`; 0 when `p_e = 1`.
    pub fn cohens_kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let po = self.trace() as f64 / n;
        let pe = (0..self.classes)
            .map(|k| self.true_total(k) as f64 * self.predicted_total(k) as f64)
            .sum::<f64>()
            / (n * n);
        ratio(po - pe, 1.0 - pe)
    }

    /// Generalized (Gorodkin) Matthews correlation coefficient.
    pub fn mcc(&self) -> f64 {
        let s = self.total() as f64;
        let c = self.trace() as f64;
        let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for k in 0..self.classes {
            let p = self.predicted_total(k) as f64;
            let t = self.true_total(k) as f64;
            pt += p * t;
            pp += p * p;
            tt += t * t;
        }
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        ratio(c * s - pt, denom)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Binary AUROC by the Mann–Whitney rank statistic with mid-ranks for ties.
/// `None` unless both classes are present.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// ROC points `(FPR, TPR)` from a sweep over distinct score thresholds,
/// starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((ratio(fp, n_neg), ratio(tp, n_pos)));
    }
    if let Some(last) = points.last_mut() {
        if n_neg == 0.0 {
            last.0 = 1.0;
        }
        if n_pos == 0.0 {
            last.1 = 1.0;
        }
    }
    points
}

/// Area under a piecewise-linear curve (trapezoid rule).
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AurocReport {
    /// `None` for classes absent from, or covering all of, the labels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; `None` if no class is defined.
    pub macro_avg: Option<f64>,
}

/// One-vs-rest AUROC per class and its macro average.
pub fn auroc(preds: &PredictionSet) -> AurocReport {
    let per_class: Vec<Option<f64>> = (0..preds.classes())
        .map(|k| {
            let positive: Vec<bool> = preds.labels().iter().map(|&l| l == k).collect();
            binary_auroc(&preds.class_scores(k), &positive)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_avg = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    AurocReport { per_class, macro_avg }
}

/// All metrics of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// NaN when undefined.
    pub roc_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub kappa: f64,
    pub mcc: f64,
    pub confusion: ConfusionMatrix,
}

pub fn summarize(preds: &PredictionSet) -> MetricsSummary {
    let cm = ConfusionMatrix::from_predictions(preds);
    let auc = auroc(preds);
    MetricsSummary {
        accuracy: cm.accuracy(),
        precision: cm.macro_precision(),
        recall: cm.macro_recall(),
        f1: cm.macro_f1(),
        roc_auc: auc.macro_avg.unwrap_or(f64::NAN),
        per_class_auc: auc.per_class,
        kappa: cm.cohens_kappa(),
        mcc: cm.mcc(),
        confusion: cm,
    }
}

impl MetricsSummary {
    /// `metric,value` CSV; AUROC values at four decimals, the rest at six.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("kappa", self.kappa),
            ("mcc", self.mcc),
        ] {
            out.push_str(&format!("{name},{v:.6}\n"));
        }
        out.push_str(&format!(
            "roc_auc,{}\n",
            fmt_auc(Some(self.roc_auc).filter(|v| !v.is_nan()))
        ));
        for (k, a) in self.per_class_auc.iter().enumerate() {
            out.push_str(&format!("roc_auc_class_{k},{}\n", fmt_auc(*a)));
        }
        out
    }
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// Reads a score file with header `label,score_0,…,score_{C−1}`.
pub fn read_score_file(path: &Path) -> Result<PredictionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::data_at(path, Some(1), e.to_string()))?
        .clone();
    let classes = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..classes).map(|k| format!("score_{k}")))
        .collect();
    if classes == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::data_at(
            path,
            Some(1),
            "header must be label,score_0,...,score_{C-1}",
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data_at(path, e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        let bad = |m: String| Error::data_at(path, line, m);
        labels.push(
            rec[0]
                .parse::<usize>()
                .map_err(|_| bad(format!("bad label {:?}", &rec[0])))?,
        );
        for f in rec.iter().skip(1) {
            scores.push(f.parse::<f64>().map_err(|_| bad(format!("bad score {f:?}")))?);
        }
    }
    PredictionSet::new(scores, labels, classes).map_err(|e| match e {
        Error::Data { message, .. } => Error::data_at(path, None, message),
        other => other,
    })
}

pub fn write_score_file(path: &Path, preds: &PredictionSet) -> Result<()> {
    let mut out = String::from("label");
    for k in 0..preds.classes() {
        out.push_str(&format!(",score_{k}"));
    }
    out.push('\n');
    for i in 0..preds.len() {
        out.push_str(&preds.labels()[i].to_string());
        for p in preds.row(i) {
            out.push_str(&format!(",{p:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
