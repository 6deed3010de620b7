//! Vertebra identities and coarse spine regions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Coarse spine region; the discriminant doubles as the stage-1 class code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VertebraClass {
    Cervical = 1,
    Thoracic = 2,
    Lumbar = 3,
}

impl VertebraClass {
    pub const ALL: [VertebraClass; 3] = [VertebraClass::Cervical, VertebraClass::Thoracic, VertebraClass::Lumbar];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(Self::Cervical),
            2 => Some(Self::Thoracic),
            3 => Some(Self::Lumbar),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cervical => "cervical",
            Self::Thoracic => "thoracic",
            Self::Lumbar => "lumbar",
        }
    }

    fn prefix(self) -> char {
        match self {
            Self::Cervical => 'C',
            Self::Thoracic => 'T',
            Self::Lumbar => 'L',
        }
    }

    /// Ordinal of the first vertebra of this region.
    fn first_ordinal(self) -> u8 {
        match self {
            Self::Cervical => 1,
            Self::Thoracic => 8,
            Self::Lumbar => 20,
        }
    }

    pub fn count(self) -> u8 {
        match self {
            Self::Cervical => 7,
            Self::Thoracic => 12,
            Self::Lumbar => 6,
        }
    }

    pub fn first(self) -> AnatomicalLabel {
        AnatomicalLabel(self.first_ordinal())
    }

    pub fn last(self) -> AnatomicalLabel {
        AnatomicalLabel(self.first_ordinal() + self.count() - 1)
    }
}

impl fmt::Display for VertebraClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of C1..C7, T1..T12, L1..L6, stored as its ordinal 1..=25.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnatomicalLabel(u8);

impl AnatomicalLabel {
    pub const COUNT: u8 = 25;

    pub fn from_ordinal(ordinal: i32) -> Option<Self> {
        (1..=Self::COUNT as i32).contains(&ordinal).then_some(Self(ordinal as u8))
    }

    pub fn ordinal(self) -> u8 {
        self.0
    }

    pub fn class(self) -> VertebraClass {
        match self.0 {
            1..=7 => VertebraClass::Cervical,
            8..=19 => VertebraClass::Thoracic,
            _ => VertebraClass::Lumbar,
        }
    }

    /// Position within the region, starting at 1.
    pub fn index_in_class(self) -> u8 {
        self.0 - self.class().first_ordinal() + 1
    }

    /// Label `k` positions further caudal (negative: cranial), if it exists.
    pub fn offset(self, k: i32) -> Option<Self> {
        Self::from_ordinal(self.0 as i32 + k)
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (1..=Self::COUNT).map(Self)
    }
}

impl fmt::Display for AnatomicalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.class().prefix(), self.index_in_class())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError(String);

impl fmt::Display for ParseLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not a vertebra label: {:?}", self.0)
    }
}

impl std::error::Error for ParseLabelError {}

impl FromStr for AnatomicalLabel {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseLabelError(s.to_string());
        let mut chars = s.chars();
        let class = match chars.next().map(|c| c.to_ascii_uppercase()) {
            Some('C') => VertebraClass::Cervical,
            Some('T') => VertebraClass::Thoracic,
            Some('L') => VertebraClass::Lumbar,
            _ => return Err(err()),
        };
        let n: u8 = chars.as_str().parse().map_err(|_| err())?;
        if n == 0 || n > class.count() {
            return Err(err());
        }
        Ok(Self(class.first_ordinal() + n - 1))
    }
}

impl Serialize for AnatomicalLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AnatomicalLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
