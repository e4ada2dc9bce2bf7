use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::label::PolypLabel;
use super::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Slide,
    Patch,
}

/// Per-class counts in canonical class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub counts: [usize; 6],
}

impl ClassCounts {
    pub fn get(&self, label: PolypLabel) -> usize {
        self.counts[label.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for label in PolypLabel::ALL {
            write!(f, "{:>8}", label.as_str())?;
        }
        writeln!(f, "{:>8}", "Total")?;
        for n in self.counts {
            write!(f, "{n:>8}")?;
        }
        write!(f, "{:>8}", self.total())
    }
}

/// Counts slides or patches per class, optionally restricted to one scale.
pub fn class_distribution(manifest: &Manifest, group_by: GroupBy, scale_filter: Option<f64>) -> ClassCounts {
    let mut counts = [0usize; 6];
    let mut seen = BTreeSet::new();
    let records = manifest
        .records
        .iter()
        .filter(|r| scale_filter.is_none_or(|s| (r.scale_um - s).abs() < 1e-9));
    for r in records {
        if group_by == GroupBy::Slide && !seen.insert(r.slide_id.as_str()) {
            continue;
        }
        counts[r.label.index()] += 1;
    }
    ClassCounts { counts }
}
