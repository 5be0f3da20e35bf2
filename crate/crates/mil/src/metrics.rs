//! Confusion matrix, per-class recall, and balanced accuracy.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<Vec<u64>>, // rows = true class, columns = predicted
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn update(&mut self, true_label: usize, predicted: usize) -> Result<()> {
        if true_label >= self.classes || predicted >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "label ({true_label}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[true_label][predicted] += 1;
        Ok(())
    }

    /// Element-wise addition, for merging evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument("merge class count mismatch".into()));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
        Ok(())
    }

    /// Balanced accuracy (mean of per-class recalls) and the recalls.
    /// A class with zero true examples is an explicit error.
    pub fn balanced_accuracy(&self) -> Result<(f64, Vec<f64>)> {
        let mut recalls = Vec::with_capacity(self.classes);
        for (c, row) in self.counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has no true examples; recall undefined"
                )));
            }
            recalls.push(row[c] as f64 / total as f64);
        }
        let ba = recalls.iter().sum::<f64>() / self.classes as f64;
        Ok((ba, recalls))
    }
}

/// Metrics report serialized as flat JSON with floats at 17 significant
/// digits.
pub fn metrics_json(cm: &ConfusionMatrix) -> Result<String> {
    let (ba, recalls) = cm.balanced_accuracy()?;
    let recalls_str: Vec<String> = recalls.iter().map(|r| format_f64(*r)).collect();
    let rows: Vec<String> = cm
        .counts()
        .iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    Ok(format!(
        "{{\"ba\": {}, \"recalls\": [{}], \"confusion\": [{}]}}",
        format_f64(ba),
        recalls_str.join(", "),
        rows.join(",")
    ))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Display a fraction as a percentage with one decimal, rounding half up on
/// the decimal value. Snaps to three decimals first so a value like 0.9065,
/// whose nearest double sits just below, still reads 90.7 rather than 90.6.
pub fn percent_display(fraction: f64) -> f64 {
    let thousandths = (fraction * 100_000.0).round() / 100.0;
    thousandths.round() / 10.0
}
