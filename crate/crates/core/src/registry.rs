//! Name-based lookup for the interchangeable strategy families.
//!
//! Each family (guidance terms, logit baselines, OOD generators, prior
//! sources) keeps a static slice of trait objects; configs and the CLI pick
//! an entry by its registered name.

use crate::error::{Error, Result};

pub trait Named {
    fn name(&self) -> &'static str;
}

/// Finds `name` among `entries`, or reports the registered alternatives.
pub fn lookup<T: ?Sized + Named>(entries: &[&'static T], family: &str, name: &str) -> Result<&'static T> {
    entries.iter().copied().find(|e| e.name() == name).ok_or_else(|| {
        let known: Vec<_> = entries.iter().map(|e| e.name()).collect();
        Error::Invalid(format!("unknown {family} `{name}` (known: {})", known.join(", ")))
    })
}

pub fn names<T: ?Sized + Named>(entries: &[&'static T]) -> Vec<&'static str> {
    entries.iter().map(|e| e.name()).collect()
}
