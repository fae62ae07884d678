//! The ten IconClass categories. Channel indices are fixed and shared by the
//! label files, the classifier head and every report.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

pub const N_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IconClass {
    AntonyOfPadua,
    Francis,
    Jerome,
    JohnTheBaptist,
    MaryMagdalene,
    Paul,
    Peter,
    Dominic,
    Sebastian,
    VirginMary,
}

impl IconClass {
    pub const ALL: [IconClass; N_CLASSES] = [
        IconClass::AntonyOfPadua,
        IconClass::Francis,
        IconClass::Jerome,
        IconClass::JohnTheBaptist,
        IconClass::MaryMagdalene,
        IconClass::Paul,
        IconClass::Peter,
        IconClass::Dominic,
        IconClass::Sebastian,
        IconClass::VirginMary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            IconClass::AntonyOfPadua => "11H(ANTONY OF PADUA)",
            IconClass::Francis => "11H(FRANCIS)",
            IconClass::Jerome => "11H(JEROME)",
            IconClass::JohnTheBaptist => "11H(JOHN THE BAPTIST)",
            IconClass::MaryMagdalene => "11HH(MARY MAGDALENE)",
            IconClass::Paul => "11H(PAUL)",
            IconClass::Peter => "11H(PETER)",
            IconClass::Dominic => "11HH(DOMINIC)",
            IconClass::Sebastian => "11H(SEBASTIAN)",
            IconClass::VirginMary => "11F",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            IconClass::AntonyOfPadua => "Anthony of Padua",
            IconClass::Francis => "Francis of Assisi",
            IconClass::Jerome => "Jerome",
            IconClass::JohnTheBaptist => "John the Baptist",
            IconClass::MaryMagdalene => "Mary Magdalene",
            IconClass::Paul => "Paul",
            IconClass::Peter => "Peter",
            IconClass::Dominic => "Saint Dominic",
            IconClass::Sebastian => "Saint Sebastian",
            IconClass::VirginMary => "Virgin Mary",
        }
    }

    /// Accepts the IconClass code, case-insensitively, or a bare saint name
    /// such as `PETER`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|c| {
            c.code().eq_ignore_ascii_case(s)
                || c.code()
                    .split_once('(')
                    .map(|(_, rest)| rest.trim_end_matches(')').eq_ignore_ascii_case(s))
                    .unwrap_or(false)
        })
    }
}

impl fmt::Display for IconClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for IconClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

impl Serialize for IconClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for IconClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        IconClass::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown icon class {s:?}")))
    }
}
