use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Image-level label used for conditioning. `Null` is the dropped condition ∅.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Healthy,
    Unhealthy,
    Null,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Healthy, Condition::Unhealthy, Condition::Null];

    /// Row index in embedding tables.
    pub fn index(self) -> usize {
        match self {
            Condition::Healthy => 0,
            Condition::Unhealthy => 1,
            Condition::Null => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Condition> {
        Self::ALL.get(i).copied()
    }

    pub fn is_null(self) -> bool {
        self == Condition::Null
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Healthy => "healthy",
            Condition::Unhealthy => "unhealthy",
            Condition::Null => "null",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Condition::Healthy),
            "unhealthy" => Ok(Condition::Unhealthy),
            "null" => Ok(Condition::Null),
            other => Err(Error::Config(format!("unknown condition {other:?}"))),
        }
    }
}
