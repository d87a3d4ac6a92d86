use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::Label;

/// Confusion counts with depression as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        Confusion { tp, fn_, fp, tn }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (truth, predicted) in pairs {
            c.record(truth, predicted);
        }
        c
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth.is_positive(), predicted.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// Rates with an empty denominator are reported as 0.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn rates(&self) -> [f64; 3] {
        [self.accuracy(), self.sensitivity(), self.specificity()]
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.tn += o.tn;
    }
}

/// One held-out fold of one method under one seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsRow {
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    pub confusion: Confusion,
}

/// Mean and sample standard deviation over seeds of fold-pooled rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub seeds: usize,
    /// Accuracy, sensitivity, specificity.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-fold results of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str = "method,fold,seed,TP,FN,FP,TN,accuracy,sensitivity,specificity";

pub const AGGREGATION_NOTE: &str =
    "Predictions of all folds are pooled per seed; values are mean ± sample std over seeds.";

impl MetricsReport {
    /// Method names in order of first appearance.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    /// Fold-pooled confusion per seed for `method`, in seed order of first
    /// appearance.
    pub fn pooled(&self, method: &str) -> Vec<(u64, Confusion)> {
        let mut out: Vec<(u64, Confusion)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.method == method) {
            match out.iter_mut().find(|(s, _)| *s == r.seed) {
                Some((_, c)) => *c += r.confusion,
                None => out.push((r.seed, r.confusion)),
            }
        }
        out
    }

    pub fn summary(&self, method: &str) -> Summary {
        let pooled = self.pooled(method);
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for k in 0..3 {
            let values: Vec<f64> = pooled.iter().map(|(_, c)| c.rates()[k]).collect();
            (mean[k], std[k]) = mean_std(&values);
        }
        Summary { method: method.to_string(), seeds: pooled.len(), mean, std }
    }

    pub fn summaries(&self) -> Vec<Summary> {
        self.methods().into_iter().map(|m| self.summary(m)).collect()
    }

    /// Per-fold rows, then a fold-pooled row per seed (`fold = all`), then
    /// `mean` and `std` rows over seeds (`seed = mean|std`, counts empty).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let line = |out: &mut String, method: &str, fold: &str, seed: &str, c: Option<Confusion>, rates: [f64; 3]| {
            let counts = c.map_or(",,,".to_string(), |c| format!("{},{},{},{}", c.tp, c.fn_, c.fp, c.tn));
            let _ = writeln!(out, "{method},{fold},{seed},{counts},{:.6},{:.6},{:.6}", rates[0], rates[1], rates[2]);
        };
        for r in &self.rows {
            line(&mut out, &r.method, &r.fold.to_string(), &r.seed.to_string(), Some(r.confusion), r.confusion.rates());
        }
        for method in self.methods() {
            for (seed, c) in self.pooled(method) {
                line(&mut out, method, "all", &seed.to_string(), Some(c), c.rates());
            }
            let s = self.summary(method);
            line(&mut out, method, "all", "mean", None, s.mean);
            line(&mut out, method, "all", "std", None, s.std);
        }
        out
    }

    /// Aligned plain-text table, one line per method.
    pub fn to_table(&self) -> String {
        let summaries = self.summaries();
        let width = summaries.iter().map(|s| s.method.len()).max().unwrap_or(0).max("Method".len());
        let mut out = String::new();
        let _ = writeln!(out, "{AGGREGATION_NOTE}");
        let _ = writeln!(out, "{:<width$}  Seeds  {:<13}  {:<13}  {:<13}", "Method", "Accuracy", "Sensitivity", "Specificity");
        for s in &summaries {
            let cell = |k: usize| format!("{:.3}±{:.3}", s.mean[k], s.std[k]);
            let _ = writeln!(out, "{:<width$}  {:>5}  {:<13}  {:<13}  {:<13}", s.method, s.seeds, cell(0), cell(1), cell(2));
        }
        out
    }
}
