use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const N_RACES: usize = 5;

/// A value per race category, indexed by [`Race::index`].
pub type RaceVec<T> = [T; N_RACES];

/// Self-reported race. The integer encoding `0..=4` is stable and used in
/// every file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    White = 0,
    Black = 1,
    Hispanic = 2,
    Asian = 3,
    Other = 4,
}

impl Race {
    pub const ALL: [Race; N_RACES] = [
        Race::White,
        Race::Black,
        Race::Hispanic,
        Race::Asian,
        Race::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Race> {
        Race::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Race::White => "white",
            Race::Black => "black",
            Race::Hispanic => "hispanic",
            Race::Asian => "asian",
            Race::Other => "other",
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Race {
    type Err = Error;

    /// Accepts either the integer code or the lowercase name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Race::from_index(i)
                .ok_or_else(|| Error::config("race", format!("code {i} is outside 0..=4")));
        }
        Race::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("race", format!("unknown race `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_stable() {
        for (i, r) in Race::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(Race::from_index(i), Some(*r));
            assert_eq!(r.index().to_string().parse::<Race>().unwrap(), *r);
            assert_eq!(r.name().parse::<Race>().unwrap(), *r);
        }
        assert_eq!(Race::from_index(5), None);
        assert!("5".parse::<Race>().is_err());
    }
}
