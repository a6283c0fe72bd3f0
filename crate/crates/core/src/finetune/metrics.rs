use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Forecast errors for one horizon, over all test windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// MSE and MAE over paired `[O, C]` predictions and targets.
pub fn forecast_errors(predictions: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Usage(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let (mut se, mut ae, mut n) = (0.0f64, 0.0f64, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::shape(
                "forecast_errors",
                format!("prediction of {} values vs target of {}", p.len(), t.len()),
            ));
        }
        for (&a, &b) in p.iter().zip(t) {
            let e = a as f64 - b as f64;
            se += e * e;
            ae += e.abs();
        }
        n += p.len();
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Per-horizon rows plus their average.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastReport {
    pub rows: Vec<HorizonMetrics>,
}

impl ForecastReport {
    pub fn avg_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.mse).sum::<f64>() / self.rows.len() as f64
    }

    pub fn avg_mae(&self) -> f64 {
        self.rows.iter().map(|r| r.mae).sum::<f64>() / self.rows.len() as f64
    }
}

/// Precision, recall and F1 of one class against the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Rates are fractions in `[0, 1]`; averages are macro over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when no class has both positives and negatives.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub per_class: Vec<ClassStats>,
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        m[y][p] += 1;
    }
    m
}

/// One-vs-rest statistics per class; empty denominators give 0.
pub fn class_stats(confusion: &[Vec<usize>]) -> Vec<ClassStats> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Ranks (1-based) with ties sharing their average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney U statistic.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Average precision: mean precision at each positive, ranking by score
/// with tied scores entering together.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &o in &order[i..=j] {
            seen += 1;
            tp += positive[o] as usize;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Full metric suite from class probabilities (or any per-class scores).
pub fn classification_metrics(
    labels: &[usize],
    scores: &[Vec<f64>],
    classes: usize,
) -> Result<ClassifyMetrics> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} labels for {} score rows",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    if scores.iter().any(|s| s.len() != classes) {
        return Err(Error::shape("classification_metrics", "score rows must have K entries"));
    }
    let predicted: Vec<usize> = scores.iter().map(|s| super::argmax(s)).collect();
    let confusion = confusion_matrix(labels, &predicted, classes);
    let per_class = class_stats(&confusion);
    let correct = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();
    let macro_avg = |f: fn(&ClassStats) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;

    let ovr = |f: fn(&[f64], &[bool]) -> Option<f64>| -> Option<f64> {
        let per: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                f(&s, &p)
            })
            .collect();
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    };
    // binary: class 1 is the positive class
    let (auroc_v, auprc_v) = if classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let p: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        (auroc(&s, &p), average_precision(&s, &p))
    } else {
        (ovr(auroc), ovr(average_precision))
    };
    Ok(ClassifyMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        precision: macro_avg(|s| s.precision),
        recall: macro_avg(|s| s.recall),
        f1: macro_avg(|s| s.f1),
        auroc: auroc_v,
        auprc: auprc_v,
        per_class,
    })
}

/// Either kind of downstream report.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricsReport {
    Forecast(ForecastReport),
    Classify(ClassifyMetrics),
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        match self {
            Self::Forecast(r) => {
                s.push_str("task=forecast\n");
                for row in &r.rows {
                    let h = row.horizon;
                    let _ = writeln!(s, "mse_{h}={:.6}\nmae_{h}={:.6}", row.mse, row.mae);
                }
                let _ = writeln!(s, "mse_avg={:.6}\nmae_avg={:.6}", r.avg_mse(), r.avg_mae());
            }
            Self::Classify(m) => {
                s.push_str("task=classify\n");
                let _ = writeln!(s, "accuracy={:.6}", m.accuracy);
                let _ = writeln!(s, "precision={:.6}", m.precision);
                let _ = writeln!(s, "recall={:.6}", m.recall);
                let _ = writeln!(s, "f1={:.6}", m.f1);
                let _ = writeln!(s, "auroc={}", opt(m.auroc));
                let _ = writeln!(s, "auprc={}", opt(m.auprc));
            }
        }
        s
    }

    /// Header plus data rows; forecasts end with an `Avg` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self {
            Self::Forecast(r) => {
                s.push_str("horizon,mse,mae\n");
                for row in &r.rows {
                    let _ = writeln!(s, "{},{:.6},{:.6}", row.horizon, row.mse, row.mae);
                }
                let _ = writeln!(s, "Avg,{:.6},{:.6}", r.avg_mse(), r.avg_mae());
            }
            Self::Classify(m) => {
                s.push_str("accuracy,precision,recall,f1,auroc,auprc\n");
                let _ = writeln!(
                    s,
                    "{:.6},{:.6},{:.6},{:.6},{},{}",
                    m.accuracy,
                    m.precision,
                    m.recall,
                    m.f1,
                    opt(m.auroc),
                    opt(m.auprc)
                );
            }
        }
        s
    }
}
