//! Corpus BLEU, a table-grounded precision/recall/F1, and confidence
//! diagnostics over gold support labels.
//!
//! The table-grounded metric is a word-overlap entailment variant: a
//! predicted n-gram counts as correct when every token appears in the
//! reference or among the table values, and recall combines reference
//! n-gram recall with table-value coverage. It is deliberately not the full
//! alignment-based metric from the literature and is labeled accordingly.

use crate::data::{SourceTable, SupportLabel};
use crate::tensor::{NumericsError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

const MAX_ORDER: usize = 4;
/// Weight of table-value coverage inside recall (geometric combination).
const TABLE_RECALL_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub table_precision: f64,
    pub table_recall: f64,
    pub table_f1: f64,
    pub avg_len: f64,
    /// Number of empty predictions (scored zero precision).
    pub empty_predictions: usize,
    pub mean_confidence_supported: Option<f64>,
    pub mean_confidence_unsupported: Option<f64>,
    pub hallucination_auc: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned two-column plain-text table.
    pub fn to_text_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "absent".to_string(),
        };
        let rows = [
            ("bleu", format!("{:.4}", self.bleu)),
            ("table_precision", format!("{:.4}", self.table_precision)),
            ("table_recall", format!("{:.4}", self.table_recall)),
            ("table_f1", format!("{:.4}", self.table_f1)),
            ("avg_len", format!("{:.2}", self.avg_len)),
            ("empty_predictions", self.empty_predictions.to_string()),
            (
                "mean_confidence_supported",
                fmt_opt(self.mean_confidence_supported),
            ),
            (
                "mean_confidence_unsupported",
                fmt_opt(self.mean_confidence_unsupported),
            ),
            ("hallucination_auc", fmt_opt(self.hallucination_auc)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap();
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn check_aligned(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(NumericsError::Invalid {
            op,
            msg: format!("{a} predictions vs {b} references"),
        });
    }
    Ok(())
}

/// Corpus BLEU-4 with brevity penalty. `smoothing` adds one to the clipped
/// and total counts of every order above 1 (off by default: any empty order
/// zeroes the score).
pub fn bleu(predictions: &[Vec<String>], references: &[Vec<String>], smoothing: bool) -> Result<f64> {
    check_aligned(predictions.len(), references.len(), "bleu")?;
    if predictions.is_empty() {
        return Err(NumericsError::Invalid {
            op: "bleu",
            msg: "empty corpus".into(),
        });
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, rf) in predictions.iter().zip(references) {
        pred_len += pred.len();
        ref_len += rf.len();
        for n in 1..=MAX_ORDER {
            let pc = ngram_counts(pred, n);
            let rc = ngram_counts(rf, n);
            for (gram, &count) in &pc {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if pred_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (mut num, mut den) = (matched[n] as f64, total[n] as f64);
        if smoothing && n > 0 {
            num += 1.0;
            den += 1.0;
        }
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let bp = (1.0 - ref_len as f64 / pred_len as f64).min(0.0);
    Ok((bp + log_sum / MAX_ORDER as f64).exp())
}

fn entailed_fraction(tokens: &[String], entail: &HashSet<&str>, n: usize) -> Option<f64> {
    if tokens.len() < n {
        return None;
    }
    let windows: Vec<&[String]> = tokens.windows(n).collect();
    let good = windows
        .iter()
        .filter(|w| w.iter().all(|tok| entail.contains(tok.as_str())))
        .count();
    Some(good as f64 / windows.len() as f64)
}

/// Geometric mean over the n-gram orders that exist; 0 if any of them is 0.
fn geo_over_orders(tokens: &[String], entail: &HashSet<&str>) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=MAX_ORDER {
        if let Some(f) = entailed_fraction(tokens, entail, n) {
            if f == 0.0 {
                return 0.0;
            }
            log_sum += f.ln();
            orders += 1;
        }
    }
    if orders == 0 {
        0.0
    } else {
        (log_sum / orders as f64).exp()
    }
}

/// Table-grounded precision/recall/F1. Returns the count of empty
/// predictions as the final element (each scored zero precision).
pub fn table_grounded_prf(
    predictions: &[Vec<String>],
    references: &[Vec<String>],
    tables: &[SourceTable],
) -> Result<(f64, f64, f64, usize)> {
    check_aligned(predictions.len(), references.len(), "table_grounded_prf")?;
    check_aligned(predictions.len(), tables.len(), "table_grounded_prf")?;
    if predictions.is_empty() {
        return Err(NumericsError::Invalid {
            op: "table_grounded_prf",
            msg: "empty corpus".into(),
        });
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut empties = 0usize;
    for ((pred, rf), table) in predictions.iter().zip(references).zip(tables) {
        let values: Vec<&str> = table.value_tokens().collect();
        if pred.is_empty() {
            empties += 1;
            continue; // precision and recall both 0 for this example
        }
        // Precision: predicted n-grams whose tokens all appear in the
        // reference or among the table values.
        let mut entail: HashSet<&str> = rf.iter().map(|s| s.as_str()).collect();
        entail.extend(values.iter().copied());
        p_sum += geo_over_orders(pred, &entail);
        // Recall: reference n-grams covered by the prediction, combined
        // geometrically with table-value coverage.
        let pred_set: HashSet<&str> = pred.iter().map(|s| s.as_str()).collect();
        let r_ref = geo_over_orders(rf, &pred_set);
        let r_tab = if values.is_empty() {
            1.0
        } else {
            values.iter().filter(|v| pred_set.contains(**v)).count() as f64 / values.len() as f64
        };
        r_sum += r_ref.powf(1.0 - TABLE_RECALL_WEIGHT) * r_tab.powf(TABLE_RECALL_WEIGHT);
    }
    let n = predictions.len() as f64;
    let precision = p_sum / n;
    let recall = r_sum / n;
    Ok((precision, recall, harmonic_mean(precision, recall), empties))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ConfidenceDiagnostics {
    pub mean_supported: Option<f64>,
    pub mean_unsupported: Option<f64>,
    /// Probability that a supported token outranks an unsupported one by
    /// confidence (ties count half) — how well low C flags hallucination.
    pub auc: Option<f64>,
}

/// Aggregate per-token confidences by gold support label. The detector is
/// asked to tell source-grounded content from hallucinated content, so the
/// comparison is supported vs. unsupported value tokens; templatic glue
/// (which legitimately scores in between) is excluded from both classes.
pub fn confidence_diagnostics(items: &[(f64, SupportLabel)]) -> ConfidenceDiagnostics {
    let supported: Vec<f64> = items
        .iter()
        .filter(|(_, l)| *l == SupportLabel::Supported)
        .map(|(c, _)| *c)
        .collect();
    let unsupported: Vec<f64> = items
        .iter()
        .filter(|(_, l)| *l == SupportLabel::Unsupported)
        .map(|(c, _)| *c)
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let auc = if supported.is_empty() || unsupported.is_empty() {
        None
    } else {
        let mut wins = 0.0;
        for &s in &supported {
            for &u in &unsupported {
                if s > u {
                    wins += 1.0;
                } else if s == u {
                    wins += 0.5;
                }
            }
        }
        Some(wins / (supported.len() * unsupported.len()) as f64)
    };
    ConfidenceDiagnostics {
        mean_supported: mean(&supported),
        mean_unsupported: mean(&unsupported),
        auc,
    }
}

/// Assemble the full report.
pub fn build_report(
    predictions: &[Vec<String>],
    references: &[Vec<String>],
    tables: &[SourceTable],
    smoothing: bool,
    confidence_items: Option<&[(f64, SupportLabel)]>,
) -> Result<MetricsReport> {
    let bleu_score = bleu(predictions, references, smoothing)?;
    let (p, r, f1, empties) = table_grounded_prf(predictions, references, tables)?;
    let avg_len =
        predictions.iter().map(|p| p.len()).sum::<usize>() as f64 / predictions.len() as f64;
    let diag = confidence_items.map(confidence_diagnostics).unwrap_or_default();
    Ok(MetricsReport {
        bleu: bleu_score,
        table_precision: p,
        table_recall: r,
        table_f1: f1,
        avg_len,
        empty_predictions: empties,
        mean_confidence_supported: diag.mean_supported,
        mean_confidence_unsupported: diag.mean_unsupported,
        hallucination_auc: diag.auc,
    })
}
