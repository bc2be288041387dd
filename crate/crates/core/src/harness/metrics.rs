//! Metrics log, Best/Last aggregation, evaluation and histogram emission.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::credibility::TransferredLabels;
use crate::data::LabeledDataset;
use crate::numnet::{predict, MlpParams};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "run_id,epoch,split,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format metrics. Epochs strictly increase per
/// `(run_id, split, metric)` series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    last_epoch: HashMap<(String, String, String), usize>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn push(
        &mut self,
        run_id: &str,
        epoch: usize,
        split: &str,
        metric: &str,
        value: f64,
    ) -> Result<()> {
        for (name, s) in [("run_id", run_id), ("split", split), ("metric", metric)] {
            if s.is_empty() || s.contains([',', '"', '\n', '\r']) {
                return Err(Error::InvalidConfig(format!(
                    "{name} {s:?} is not a plain CSV token"
                )));
            }
        }
        let key = (run_id.to_owned(), split.to_owned(), metric.to_owned());
        if let Some(&prev) = self.last_epoch.get(&key) {
            if epoch <= prev {
                return Err(Error::InvalidConfig(format!(
                    "epoch {epoch} after {prev} in series {run_id}/{split}/{metric}"
                )));
            }
        }
        self.last_epoch.insert(key, epoch);
        self.rows.push(MetricRow {
            run_id: run_id.to_owned(),
            epoch,
            split: split.to_owned(),
            metric: metric.to_owned(),
            value,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: MetricsLog) -> Result<()> {
        for r in other.rows {
            self.push(&r.run_id, r.epoch, &r.split, &r.metric, r.value)?;
        }
        Ok(())
    }

    /// Values of one series in epoch order.
    pub fn series(&self, run_id: &str, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.run_id == run_id && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Distinct run ids in first-seen order.
    pub fn run_ids(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.run_id.as_str()) {
                out.push(&r.run_id);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.run_id, r.epoch, r.split, r.metric, r.value
            );
        }
        s
    }
}

/// Best = maximum over epochs; Last = mean over the final `min(10, n)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestLast {
    pub best: f64,
    pub last: f64,
}

pub const LAST_WINDOW: usize = 10;

pub fn best_last(per_epoch: &[f64]) -> Result<BestLast> {
    if per_epoch.is_empty() {
        return Err(Error::Empty("no epochs to aggregate".into()));
    }
    let best = per_epoch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail = &per_epoch[per_epoch.len() - per_epoch.len().min(LAST_WINDOW)..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(BestLast { best, last })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    /// Accuracy within each clean class; `None` for classes absent from
    /// the test set.
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(params: &MlpParams, test: &LabeledDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation on an empty test set".into()));
    }
    let pred = predict(&params.probabilities(&test.x)?);
    Ok(evaluate_predictions(&pred, &test.y_clean, test.classes))
}

pub fn evaluate_predictions(pred: &[usize], y_clean: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(y_clean) {
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Evaluation {
        top1: hits.iter().sum::<usize>() as f64 / pred.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    }
}

pub const HISTOGRAM_BINS: usize = 50;
pub const HISTOGRAM_HEADER: &str = "series,bin_left,bin_right,count";

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSeries {
    pub name: String,
    pub counts: Vec<usize>,
}

/// Shared equal-width bins over the observed range of all series.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub series: Vec<HistogramSeries>,
}

impl Histogram {
    /// `groups` assigns each value to one named series.
    pub fn build(values: &[f64], groups: &[usize], names: &[&str], bins: usize) -> Result<Self> {
        if values.len() != groups.len() {
            return Err(Error::Shape(
                "histogram values and groups differ in length".into(),
            ));
        }
        if bins == 0 || values.is_empty() {
            return Err(Error::Empty(
                "histogram needs values and at least one bin".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("histogram input".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut series: Vec<HistogramSeries> = names
            .iter()
            .map(|n| HistogramSeries {
                name: (*n).to_owned(),
                counts: vec![0; bins],
            })
            .collect();
        for (&v, &g) in values.iter().zip(groups) {
            let bin = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            series
                .get_mut(g)
                .ok_or_else(|| Error::Shape(format!("group {g} has no series name")))?
                .counts[bin] += 1;
        }
        Ok(Self { edges, series })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTOGRAM_HEADER);
        s.push('\n');
        for ser in &self.series {
            for (i, c) in ser.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    ser.name,
                    self.edges[i],
                    self.edges[i + 1],
                    c
                );
            }
        }
        s
    }
}

/// Diagnostic CSVs for Stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Histograms {
    /// Losses split by whether the noisy label is actually correct.
    pub loss: Histogram,
    /// Confidences split by whether the prediction is correct.
    pub confidence: Histogram,
    /// Assigned-label counts of L, one per class.
    pub class_counts: Vec<usize>,
}

impl Histograms {
    pub fn class_counts_csv(&self) -> String {
        let mut s = String::from("class,count\n");
        for (c, n) in self.class_counts.iter().enumerate() {
            let _ = writeln!(s, "{c},{n}");
        }
        s
    }
}

/// `y_clean` is used only for splitting the diagnostic series.
pub fn emit_histograms(
    losses: &[f64],
    confidences: &[f64],
    y_pred: &[usize],
    y_noisy: &[usize],
    y_clean: &[usize],
    transfer: &TransferredLabels,
) -> Result<Histograms> {
    let label_wrong: Vec<usize> = y_noisy
        .iter()
        .zip(y_clean)
        .map(|(a, b)| usize::from(a != b))
        .collect();
    let pred_wrong: Vec<usize> = y_pred
        .iter()
        .zip(y_clean)
        .map(|(a, b)| usize::from(a != b))
        .collect();
    Ok(Histograms {
        loss: Histogram::build(losses, &label_wrong, &["clean", "noisy"], HISTOGRAM_BINS)?,
        confidence: Histogram::build(
            confidences,
            &pred_wrong,
            &["correct", "incorrect"],
            HISTOGRAM_BINS,
        )?,
        class_counts: transfer.class_counts(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_last_window() {
        let v: Vec<f64> = (1..=15).map(f64::from).collect();
        let bl = best_last(&v).unwrap();
        assert_eq!(bl.best, 15.0);
        assert_eq!(bl.last, 10.5);
        let short = best_last(&[0.2, 0.4, 0.3]).unwrap();
        assert!((short.last - 0.3).abs() < 1e-15 && short.best == 0.4);
        assert!(best_last(&[]).is_err());
    }

    #[test]
    fn metrics_reject_non_increasing_epochs() {
        let mut log = MetricsLog::new();
        log.push("a", 1, "test", "accuracy", 0.5).unwrap();
        log.push("a", 2, "test", "accuracy", 0.25).unwrap();
        log.push("a", 1, "test", "loss", 0.1).unwrap();
        assert!(log.push("a", 2, "test", "accuracy", 0.1).is_err());
        assert!(log.push("a,b", 3, "test", "accuracy", 0.1).is_err());
        assert_eq!(log.series("a", "test", "accuracy"), vec![0.5, 0.25]);
        assert_eq!(
            log.to_csv(),
            "run_id,epoch,split,metric,value\na,1,test,accuracy,0.5\na,2,test,accuracy,0.25\na,1,test,loss,0.1\n"
        );
    }

    #[test]
    fn evaluation_examples() {
        let y: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(evaluate_predictions(&y, &y, 10).top1, 1.0);
        let e = evaluate_predictions(&[3; 100], &y, 10);
        assert!((e.top1 - 0.1).abs() < 1e-15);
        assert_eq!(e.per_class[3], Some(1.0));
        assert_eq!(e.per_class[4], Some(0.0));
        let e = evaluate_predictions(&[0, 0], &[0, 1], 3);
        assert_eq!(e.per_class[2], None);
    }

    #[test]
    fn histogram_counts_sum_to_n() {
        let values: Vec<f64> = (0..997).map(|i| (i as f64 * 0.37).sin()).collect();
        let groups: Vec<usize> = (0..997).map(|i| i % 2).collect();
        let h = Histogram::build(&values, &groups, &["a", "b"], 50).unwrap();
        let total: usize = h.series.iter().flat_map(|s| &s.counts).sum();
        assert_eq!(total, 997);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.to_csv().lines().count(), 101);
        let flat = Histogram::build(&[2.0; 5], &[0; 5], &["x"], 50).unwrap();
        assert_eq!(flat.series[0].counts[0], 5);
    }
}
