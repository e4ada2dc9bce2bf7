use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Grade, PolypLabel, PolypType};
use crate::error::Error;

/// Classification task, which fixes the label mapping and class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// HP versus every other class.
    Hp,
    /// NORM / TA / TVA; HP records are excluded.
    Adenoma,
    /// LG / HG over adenoma records only.
    Grade,
    /// All six labels.
    SixClass,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Hp, Task::Adenoma, Task::Grade, Task::SixClass];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Hp => "hp",
            Task::Adenoma => "adenoma",
            Task::Grade => "grade",
            Task::SixClass => "six_class",
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Task::Hp => vec!["OTHER", "HP"],
            Task::Adenoma => vec!["NORM", "TA", "TVA"],
            Task::Grade => vec!["LG", "HG"],
            Task::SixClass => PolypLabel::ALL.iter().map(|l| l.as_str()).collect(),
        }
    }

    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    /// Class index of `label`, or `None` if the task ignores it.
    pub fn map(self, label: PolypLabel) -> Option<usize> {
        match self {
            Task::Hp => Some((label == PolypLabel::Hp) as usize),
            Task::Adenoma => match label.polyp_type() {
                PolypType::Hp => None,
                PolypType::Norm => Some(0),
                PolypType::Ta => Some(1),
                PolypType::Tva => Some(2),
            },
            Task::Grade => match label.grade() {
                Some(Grade::Low) => Some(0),
                Some(Grade::High) => Some(1),
                None => None,
            },
            Task::SixClass => Some(label.index()),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}` (expected hp, adenoma, grade or six_class)")))
    }
}
