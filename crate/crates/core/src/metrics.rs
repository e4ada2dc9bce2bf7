//! Confusion matrices, balanced accuracy and one-vs-rest reports.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::dataset::{PolypLabel, PolypType};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }

    /// Adds another shard's counts. Both matrices must share classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::invalid("cannot merge confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    fn check_support(&self) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if self.support(i) == 0 {
                return Err(Error::ZeroSupport(c.clone()));
            }
        }
        Ok(())
    }

    pub fn recall(&self, class: usize) -> Result<f64> {
        let support = self.support(class);
        if support == 0 {
            return Err(Error::ZeroSupport(self.classes[class].clone()));
        }
        Ok(self.counts[class][class] as f64 / support as f64)
    }
}

/// Counts `(truth, prediction)` pairs over the ordered `classes`.
pub fn confusion_matrix<L>(truth: &[L], predicted: &[L], classes: &[L]) -> Result<ConfusionMatrix>
where
    L: PartialEq + fmt::Display,
{
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let index = |l: &L| {
        classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::UnknownLabel(l.to_string()))
    };
    let mut cm = ConfusionMatrix::zeros(classes.iter().map(|c| c.to_string()).collect());
    for (t, p) in truth.iter().zip(predicted) {
        let (i, j) = (index(t)?, index(p)?);
        cm.counts[i][j] += 1;
    }
    Ok(cm)
}

pub fn six_class_matrix(truth: &[PolypLabel], predicted: &[PolypLabel]) -> Result<ConfusionMatrix> {
    confusion_matrix(truth, predicted, &PolypLabel::ALL)
}

/// Mean of per-class recalls.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check_support()?;
    if cm.k() == 0 {
        return Err(Error::invalid("confusion matrix has no classes"));
    }
    let mut sum = 0.0;
    for i in 0..cm.k() {
        sum += cm.recall(i)?;
    }
    Ok(sum / cm.k() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub support: u64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassStats>,
    /// Multi-class balanced accuracy (mean recall).
    pub balanced_accuracy: f64,
}

impl ClassReport {
    pub fn class(&self, name: &str) -> Option<&ClassStats> {
        self.per_class.iter().find(|c| c.class == name)
    }
}

/// Binarizes each class against the rest and reports sensitivity,
/// specificity and their mean.
pub fn one_vs_rest_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let overall = balanced_accuracy(cm)?;
    if cm.k() < 2 {
        return Err(Error::invalid("one-vs-rest needs at least two classes"));
    }
    let total = cm.total();
    let per_class = (0..cm.k())
        .map(|c| {
            let tp = cm.counts[c][c];
            let support = cm.support(c);
            let predicted: u64 = cm.counts.iter().map(|row| row[c]).sum();
            let fn_ = support - tp;
            let fp = predicted - tp;
            let tn = total - support - fp;
            let sensitivity = tp as f64 / (tp + fn_) as f64;
            let specificity = tn as f64 / (tn + fp) as f64;
            ClassStats {
                class: cm.classes[c].clone(),
                support,
                sensitivity,
                specificity,
                balanced_accuracy: (sensitivity + specificity) / 2.0,
            }
        })
        .collect();
    Ok(ClassReport {
        per_class,
        balanced_accuracy: overall,
    })
}

/// Merges grades: TA.HG + TA.LG → TA and TVA.HG + TVA.LG → TVA.
pub fn collapse_to_type(cm6: &ConfusionMatrix) -> Result<ConfusionMatrix> {
    let expected: Vec<String> = PolypLabel::ALL.iter().map(|l| l.to_string()).collect();
    if cm6.classes != expected {
        return Err(Error::invalid(format!(
            "collapse expects classes {expected:?}, got {:?}",
            cm6.classes
        )));
    }
    let type_index = |i: usize| {
        let t = PolypLabel::ALL[i].polyp_type();
        PolypType::ALL.iter().position(|&x| x == t).expect("every type listed")
    };
    let mut out = ConfusionMatrix::zeros(PolypType::ALL.iter().map(|t| t.to_string()).collect());
    for i in 0..6 {
        for j in 0..6 {
            out.counts[type_index(i)][type_index(j)] += cm6.counts[i][j];
        }
    }
    Ok(out)
}

/// Half-up rounding to two decimals for presentation.
pub fn round2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

/// Aligned plain-text rendering of a confusion matrix.
pub fn render_matrix(cm: &ConfusionMatrix) -> String {
    let width = cm
        .classes
        .iter()
        .map(String::len)
        .chain(cm.counts.iter().flatten().map(|c| c.to_string().len()))
        .max()
        .unwrap_or(1)
        .max(6)
        + 2;
    let mut s = String::new();
    let _ = write!(s, "{:>width$}", "true\\pred");
    for c in &cm.classes {
        let _ = write!(s, "{c:>width$}");
    }
    s.push('\n');
    for (c, row) in cm.classes.iter().zip(&cm.counts) {
        let _ = write!(s, "{c:>width$}");
        for v in row {
            let _ = write!(s, "{v:>width$}");
        }
        s.push('\n');
    }
    s
}

/// Aligned plain-text sensitivity / specificity / BA table, rounded to two
/// decimals.
pub fn render_report(report: &ClassReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "");
    for c in &report.per_class {
        let _ = write!(s, "{:>8}", c.class);
    }
    s.push('\n');
    type Row = (&'static str, fn(&ClassStats) -> f64);
    let rows: [Row; 3] = [
        ("Sensitivity", |c| c.sensitivity),
        ("Specificity", |c| c.specificity),
        ("BA", |c| c.balanced_accuracy),
    ];
    for (name, get) in rows {
        let _ = write!(s, "{name:<12}");
        for c in &report.per_class {
            let _ = write!(s, "{:>8.2}", round2(get(c)));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "Overall BA  {:>8.2}", round2(report.balanced_accuracy));
    s
}
