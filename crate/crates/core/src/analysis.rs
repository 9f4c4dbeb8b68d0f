//! Diagnostic reports: resolution sweeps, category distributions, response
//! length statistics and run comparisons.
//!
//! Accuracies are fractions in `[0, 1]` everywhere; text tables render them
//! as percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DecodeParams, QaInstance, ResponseRecord, ViewSpec};
use crate::grade::{self, MetricSpec};
use crate::pairs::{Category, PairedRecords, PairsError};
use crate::policy::{Generator, PolicyError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("instance `{0}` has no gold answer")]
    MissingGold(String),
    #[error("alpha {0} outside (0, 1]")]
    Alpha(f64),
    #[error("sweep stopped at alpha {alpha}: {source}")]
    Backend {
        alpha: f64,
        /// Rows completed before the failure.
        partial: SweepResult,
        #[source]
        source: PolicyError,
    },
    #[error("invalid counts: {0}")]
    Counts(String),
    #[error(transparent)]
    Pairs(#[from] PairsError),
    #[error("dataset sets differ: only in baseline {only_baseline:?}, only in {run} {only_run:?}")]
    DatasetMismatch {
        run: String,
        only_baseline: Vec<String>,
        only_run: Vec<String>,
    },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl SweepRow {
    pub fn new(alpha: f64, correct: usize, total: usize) -> Result<Self, AnalysisError> {
        if correct > total || total == 0 {
            return Err(AnalysisError::Counts(format!(
                "{correct}/{total} at alpha {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            accuracy: correct as f64 / total as f64,
            correct,
            total,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Percentage rounded half-up to `places` decimals, as displayed in tables.
pub fn percent(fraction: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    // Nudge by a few ulps so values like 0.28785 display as 28.79, not 28.78.
    ((fraction * 100.0 * scale) * (1.0 + 4.0 * f64::EPSILON) + 0.5).floor() / scale
}

impl SweepResult {
    pub fn from_counts(rows: &[(f64, usize, usize)]) -> Result<Self, AnalysisError> {
        let rows = rows
            .iter()
            .map(|&(a, c, t)| SweepRow::new(a, c, t))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let csv_err = |e: csv::Error| AnalysisError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["alpha", "accuracy", "correct", "total"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.alpha.to_string(),
                r.accuracy.to_string(),
                r.correct.to_string(),
                r.total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| csv_err(e.into()))
    }

    /// Reads `alpha,accuracy,correct,total`; accuracy is recomputed from counts.
    pub fn read_csv(path: &Path) -> Result<Self, AnalysisError> {
        let csv_err = |m: String| AnalysisError::Csv {
            path: path.display().to_string(),
            message: m,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
            let alpha: f64 = field(0)
                .parse()
                .map_err(|_| csv_err(format!("bad alpha `{}`", field(0))))?;
            let correct: usize = field(2)
                .parse()
                .map_err(|_| csv_err(format!("bad correct `{}`", field(2))))?;
            let total: usize = field(3)
                .parse()
                .map_err(|_| csv_err(format!("bad total `{}`", field(3))))?;
            rows.push(SweepRow::new(alpha, correct, total)?);
        }
        Ok(Self { rows })
    }

    /// Aligned text table with accuracy changes relative to the first row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>8}  {:>9}  {:>7}  {:>6}  {:>8}\n",
            "alpha", "accuracy", "correct", "total", "change"
        );
        let base = self.rows.first().map(|r| r.accuracy);
        for (i, r) in self.rows.iter().enumerate() {
            let change = match (i, base) {
                (0, _) | (_, None) => "--".to_string(),
                (_, Some(b)) => format!("{:+.2}%", percent(r.accuracy, 2) - percent(b, 2)),
            };
            let _ = writeln!(
                out,
                "{:>8}  {:>8.2}%  {:>7}  {:>6}  {:>8}",
                crate::jsonl::format_float(r.alpha),
                percent(r.accuracy, 2),
                r.correct,
                r.total,
                change
            );
        }
        out
    }
}

/// Generates (or replays), grades and tabulates accuracy for every alpha.
///
/// Also returns the graded records, in (alpha, instance) order.
pub fn resolution_sweep(
    instances: &[QaInstance],
    generator: &Generator,
    alphas: &[f64],
    metric: &MetricSpec,
    decode: &DecodeParams,
    jobs: usize,
) -> Result<(SweepResult, Vec<ResponseRecord>), AnalysisError> {
    for a in alphas {
        if !(*a > 0.0 && *a <= 1.0) {
            return Err(AnalysisError::Alpha(*a));
        }
    }
    if let Some(i) = instances.iter().find(|i| i.gold_answer.is_none()) {
        return Err(AnalysisError::MissingGold(i.id.clone()));
    }
    let mut result = SweepResult::default();
    let mut all = Vec::new();
    for &alpha in alphas {
        let view = ViewSpec::for_alpha(alpha);
        let requests: Vec<_> = instances.iter().map(|i| (i, view, *decode)).collect();
        let mut records = Vec::with_capacity(instances.len());
        for r in generator.generate_many(&requests, jobs) {
            match r {
                Ok(rec) => records.push(rec),
                Err(source) => {
                    return Err(AnalysisError::Backend {
                        alpha,
                        partial: result,
                        source,
                    })
                }
            }
        }
        let summary = grade::grade_records(&mut records, instances, metric);
        result
            .rows
            .push(SweepRow::new(alpha, summary.correct, summary.graded)?);
        all.extend(records);
    }
    Ok((result, all))
}

/// Instance counts per [`Category`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryDistribution {
    pub always_correct: usize,
    pub quality_sensitive: usize,
    pub always_wrong: usize,
    pub paradoxically_robust: usize,
}

impl CategoryDistribution {
    pub fn count(&self, c: Category) -> usize {
        match c {
            Category::AlwaysCorrect => self.always_correct,
            Category::QualitySensitive => self.quality_sensitive,
            Category::AlwaysWrong => self.always_wrong,
            Category::ParadoxicallyRobust => self.paradoxically_robust,
        }
    }

    fn bump(&mut self, c: Category) {
        match c {
            Category::AlwaysCorrect => self.always_correct += 1,
            Category::QualitySensitive => self.quality_sensitive += 1,
            Category::AlwaysWrong => self.always_wrong += 1,
            Category::ParadoxicallyRobust => self.paradoxically_robust += 1,
        }
    }

    pub fn total(&self) -> usize {
        Category::ALL.iter().map(|&c| self.count(c)).sum()
    }

    /// Share of the total, in [0, 1].
    pub fn fraction(&self, c: Category) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.count(c) as f64 / total as f64
        }
    }

    /// Percentage rounded to one decimal, as displayed.
    pub fn display_fraction(&self, c: Category) -> f64 {
        percent(self.fraction(c), 1)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22}  {:>6}  {:>7}\n", "category", "count", "percent");
        for c in Category::ALL {
            let _ = writeln!(
                out,
                "{:<22}  {:>6}  {:>6.1}%",
                c.as_str(),
                self.count(c),
                self.display_fraction(c)
            );
        }
        let _ = writeln!(out, "{:<22}  {:>6}", "total", self.total());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,fraction\n");
        for c in Category::ALL {
            let _ = writeln!(out, "{},{},{}", c.as_str(), self.count(c), self.fraction(c));
        }
        out
    }
}

pub fn category_distribution(
    paired: &[PairedRecords],
) -> Result<CategoryDistribution, AnalysisError> {
    let mut d = CategoryDistribution::default();
    for p in paired {
        d.bump(p.category()?);
    }
    Ok(d)
}

/// Summary statistics of `token_count` within one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl LengthSummary {
    pub fn from_counts(counts: &[u64]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            p25: quantile_sorted(&v, 0.25),
            p75: quantile_sorted(&v, 0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthReport {
    /// Only non-empty groups appear.
    pub groups: BTreeMap<(String, Category), LengthSummary>,
    /// Histogram bin counts per group; bin `k` covers `[k·w, (k+1)·w)`.
    pub histograms: BTreeMap<(String, Category), Vec<usize>>,
    pub bin_width: u64,
}

impl LengthReport {
    pub fn get(&self, view: &str, category: Category) -> Option<&LengthSummary> {
        self.groups.get(&(view.to_string(), category))
    }

    /// `view,category,mean,median,p25,p75,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,category,mean,median,p25,p75,n\n");
        for ((view, cat), s) in &self.groups {
            let _ = writeln!(
                out,
                "{view},{cat},{},{},{},{},{}",
                s.mean, s.median, s.p25, s.p75, s.n
            );
        }
        out
    }

    /// `view,category,bin_start,count` rows for plotting.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("view,category,bin_start,count\n");
        for ((view, cat), bins) in &self.histograms {
            for (k, n) in bins.iter().enumerate() {
                let _ = writeln!(out, "{view},{cat},{},{n}", k as u64 * self.bin_width);
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10}  {:<22}  {:>5}  {:>8}  {:>7}  {:>7}  {:>7}\n",
            "view", "category", "n", "mean", "median", "p25", "p75"
        );
        for ((view, cat), s) in &self.groups {
            let _ = writeln!(
                out,
                "{:<10}  {:<22}  {:>5}  {:>8.2}  {:>7.1}  {:>7.1}  {:>7.1}",
                view,
                cat.as_str(),
                s.n,
                s.mean,
                s.median,
                s.p25,
                s.p75
            );
        }
        out
    }
}

/// Token-count statistics grouped by (view, category).
pub fn length_stats(
    paired: &[PairedRecords],
    bin_width: u64,
) -> Result<LengthReport, AnalysisError> {
    let bin_width = bin_width.max(1);
    let mut raw: BTreeMap<(String, Category), Vec<u64>> = BTreeMap::new();
    for p in paired {
        let cat = p.category()?;
        raw.entry((p.hq.view_label.clone(), cat))
            .or_default()
            .push(p.hq.token_count);
        raw.entry((p.lq.view_label.clone(), cat))
            .or_default()
            .push(p.lq.token_count);
    }
    let mut groups = BTreeMap::new();
    let mut histograms = BTreeMap::new();
    for (key, counts) in raw {
        let max = counts.iter().copied().max().unwrap_or(0);
        let mut bins = vec![0usize; (max / bin_width) as usize + 1];
        for c in &counts {
            bins[(c / bin_width) as usize] += 1;
        }
        if let Some(s) = LengthSummary::from_counts(&counts) {
            groups.insert(key.clone(), s);
            histograms.insert(key, bins);
        }
    }
    Ok(LengthReport {
        groups,
        histograms,
        bin_width,
    })
}

/// Per-dataset accuracies of one named run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResults {
    pub name: String,
    /// (dataset, accuracy) in file order.
    pub rows: Vec<(String, f64)>,
}

impl RunResults {
    /// Reads `dataset,accuracy,correct,total`; the count columns may be empty.
    pub fn read_csv(path: &Path, name: impl Into<String>) -> Result<Self, AnalysisError> {
        let csv_err = |m: String| AnalysisError::Csv {
            path: path.display().to_string(),
            message: m,
        };
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_err(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let dataset = rec.get(0).unwrap_or("").trim().to_string();
            let acc = rec.get(1).unwrap_or("").trim();
            let acc: f64 = acc
                .parse()
                .map_err(|_| csv_err(format!("bad accuracy `{acc}`")))?;
            if dataset.is_empty() {
                return Err(csv_err("empty dataset name".into()));
            }
            rows.push((dataset, acc));
        }
        Ok(Self {
            name: name.into(),
            rows,
        })
    }

    fn get(&self, dataset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(d, _)| d == dataset)
            .map(|(_, a)| *a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunColumn {
    pub name: String,
    pub accuracy: Vec<f64>,
    /// `accuracy − baseline`, per dataset.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub datasets: Vec<String>,
    /// Baseline first, then treatments in the order given.
    pub runs: Vec<RunColumn>,
    /// Indices into `runs` holding the best accuracy per dataset (ties kept).
    pub best: Vec<Vec<usize>>,
}

impl RunReport {
    pub fn is_zero(&self) -> bool {
        self.runs.iter().all(|r| r.delta.iter().all(|d| *d == 0.0))
    }

    pub fn to_table(&self) -> String {
        let name_w = self
            .runs
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!("{:<name_w$}", "run");
        for d in &self.datasets {
            let _ = write!(out, "  {:>17}", d);
        }
        out.push('\n');
        for (ri, run) in self.runs.iter().enumerate() {
            let _ = write!(out, "{:<name_w$}", run.name);
            for (di, acc) in run.accuracy.iter().enumerate() {
                let mark = if self.best[di].contains(&ri) {
                    "*"
                } else {
                    " "
                };
                let cell = if ri == 0 {
                    format!("{:.2}{mark}", percent(*acc, 2))
                } else {
                    format!(
                        "{:.2} ({:+.2}){mark}",
                        percent(*acc, 2),
                        round2(100.0 * run.delta[di])
                    )
                };
                let _ = write!(out, "  {:>17}", cell);
            }
            out.push('\n');
        }
        out
    }

    /// `run,dataset,accuracy,delta,best`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,dataset,accuracy,delta,best\n");
        for (ri, run) in self.runs.iter().enumerate() {
            for (di, d) in self.datasets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{d},{},{},{}",
                    run.name,
                    run.accuracy[di],
                    run.delta[di],
                    self.best[di].contains(&ri)
                );
            }
        }
        out
    }
}

fn round2(x: f64) -> f64 {
    let r = (x.abs() * 100.0 * (1.0 + 4.0 * f64::EPSILON) + 0.5).floor() / 100.0;
    r.copysign(x)
}

/// Signed deltas of every treatment against `baseline`, with best-per-dataset marks.
pub fn compare_runs(
    baseline: &RunResults,
    treatments: &[RunResults],
) -> Result<RunReport, AnalysisError> {
    let datasets: Vec<String> = baseline.rows.iter().map(|(d, _)| d.clone()).collect();
    let base_set: BTreeSet<&str> = datasets.iter().map(String::as_str).collect();
    let mut runs = vec![RunColumn {
        name: baseline.name.clone(),
        accuracy: baseline.rows.iter().map(|(_, a)| *a).collect(),
        delta: vec![0.0; datasets.len()],
    }];
    for t in treatments {
        let t_set: BTreeSet<&str> = t.rows.iter().map(|(d, _)| d.as_str()).collect();
        if t_set != base_set {
            return Err(AnalysisError::DatasetMismatch {
                run: t.name.clone(),
                only_baseline: base_set.difference(&t_set).map(|s| s.to_string()).collect(),
                only_run: t_set.difference(&base_set).map(|s| s.to_string()).collect(),
            });
        }
        let accuracy: Vec<f64> = datasets
            .iter()
            .map(|d| t.get(d).expect("same dataset set"))
            .collect();
        let delta = accuracy
            .iter()
            .zip(&runs[0].accuracy)
            .map(|(a, b)| a - b)
            .collect();
        runs.push(RunColumn {
            name: t.name.clone(),
            accuracy,
            delta,
        });
    }
    let best = (0..datasets.len())
        .map(|di| {
            let max = runs
                .iter()
                .map(|r| r.accuracy[di])
                .fold(f64::NEG_INFINITY, f64::max);
            (0..runs.len())
                .filter(|&ri| runs[ri].accuracy[di] == max)
                .collect()
        })
        .collect();
    Ok(RunReport {
        datasets,
        runs,
        best,
    })
}
