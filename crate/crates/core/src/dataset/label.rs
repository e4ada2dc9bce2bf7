use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Polyp type, the first level of the label hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolypType {
    Hp,
    Norm,
    Ta,
    Tva,
}

impl PolypType {
    pub const ALL: [PolypType; 4] = [PolypType::Hp, PolypType::Norm, PolypType::Ta, PolypType::Tva];

    pub fn as_str(self) -> &'static str {
        match self {
            PolypType::Hp => "HP",
            PolypType::Norm => "NORM",
            PolypType::Ta => "TA",
            PolypType::Tva => "TVA",
        }
    }

    pub fn is_adenoma(self) -> bool {
        matches!(self, PolypType::Ta | PolypType::Tva)
    }
}

impl fmt::Display for PolypType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dysplasia grade of an adenoma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "HG")]
    High,
    #[serde(rename = "LG")]
    Low,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::High => "HG",
            Grade::Low => "LG",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The six annotation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolypLabel {
    Hp,
    Norm,
    TaHg,
    TaLg,
    TvaHg,
    TvaLg,
}

impl PolypLabel {
    /// Canonical class order used by every table and confusion matrix.
    pub const ALL: [PolypLabel; 6] = [
        PolypLabel::Hp,
        PolypLabel::Norm,
        PolypLabel::TaHg,
        PolypLabel::TaLg,
        PolypLabel::TvaHg,
        PolypLabel::TvaLg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolypLabel::Hp => "HP",
            PolypLabel::Norm => "NORM",
            PolypLabel::TaHg => "TA.HG",
            PolypLabel::TaLg => "TA.LG",
            PolypLabel::TvaHg => "TVA.HG",
            PolypLabel::TvaLg => "TVA.LG",
        }
    }

    /// File-system friendly form, e.g. `ta_hg`.
    pub fn slug(self) -> String {
        self.as_str().to_ascii_lowercase().replace('.', "_")
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn polyp_type(self) -> PolypType {
        match self {
            PolypLabel::Hp => PolypType::Hp,
            PolypLabel::Norm => PolypType::Norm,
            PolypLabel::TaHg | PolypLabel::TaLg => PolypType::Ta,
            PolypLabel::TvaHg | PolypLabel::TvaLg => PolypType::Tva,
        }
    }

    pub fn grade(self) -> Option<Grade> {
        match self {
            PolypLabel::TaHg | PolypLabel::TvaHg => Some(Grade::High),
            PolypLabel::TaLg | PolypLabel::TvaLg => Some(Grade::Low),
            PolypLabel::Hp | PolypLabel::Norm => None,
        }
    }

    /// Recombines a type and a grade. Fails when the grade presence does not
    /// match the type (only adenomas carry a grade).
    pub fn from_parts(t: PolypType, grade: Option<Grade>) -> Result<Self, Error> {
        Ok(match (t, grade) {
            (PolypType::Hp, None) => PolypLabel::Hp,
            (PolypType::Norm, None) => PolypLabel::Norm,
            (PolypType::Ta, Some(Grade::High)) => PolypLabel::TaHg,
            (PolypType::Ta, Some(Grade::Low)) => PolypLabel::TaLg,
            (PolypType::Tva, Some(Grade::High)) => PolypLabel::TvaHg,
            (PolypType::Tva, Some(Grade::Low)) => PolypLabel::TvaLg,
            (t, g) => {
                return Err(Error::invalid(format!(
                    "type {t} cannot carry grade {}",
                    g.map_or("none", Grade::as_str)
                )))
            }
        })
    }
}

impl fmt::Display for PolypLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolypLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PolypLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s || l.slug() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for PolypLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PolypLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_round_trips() {
        for label in PolypLabel::ALL {
            let t = label.polyp_type();
            assert_eq!(label.grade().is_some(), t.is_adenoma());
            assert_eq!(PolypLabel::from_parts(t, label.grade()).unwrap(), label);
            assert_eq!(label.as_str().parse::<PolypLabel>().unwrap(), label);
            assert_eq!(label.slug().parse::<PolypLabel>().unwrap(), label);
        }
    }

    #[test]
    fn invalid_parts_rejected() {
        assert!(PolypLabel::from_parts(PolypType::Hp, Some(Grade::High)).is_err());
        assert!(PolypLabel::from_parts(PolypType::Ta, None).is_err());
        assert!(matches!("TA".parse::<PolypLabel>(), Err(Error::UnknownLabel(_))));
    }
}
