//! Name-keyed strategy registries.
//!
//! Every interchangeable algorithm family in the crate (surrogates, target
//! estimators, environments) is exposed as a trait object built from a name
//! and a flat map of numeric parameters. Factories consume parameters through
//! a [`ParamReader`], which rejects keys the strategy does not understand.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// Numeric parameters attached to a strategy name, e.g. `sigma = 1.0`.
pub type Params = BTreeMap<String, f64>;

/// Tracks which parameters a factory has read so leftovers can be rejected.
pub struct ParamReader<'a> {
    owner: &'a str,
    params: &'a Params,
    seen: BTreeSet<&'a str>,
}

impl<'a> ParamReader<'a> {
    pub fn new(owner: &'a str, params: &'a Params) -> Self {
        Self {
            owner,
            params,
            seen: BTreeSet::new(),
        }
    }

    pub fn get_or(&mut self, key: &'a str, default: f64) -> f64 {
        self.seen.insert(key);
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn require(&mut self, key: &'a str) -> Result<f64> {
        self.seen.insert(key);
        self.params.get(key).copied().ok_or_else(|| {
            Error::Config(format!("`{}` requires parameter `{key}`", self.owner))
        })
    }

    /// Fails if any parameter was supplied that the factory never asked for.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .params
            .keys()
            .map(String::as_str)
            .filter(|k| !self.seen.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown parameter(s) for `{}`: {}",
                self.owner,
                unknown.join(", ")
            )))
        }
    }
}

pub type Factory<T> = fn(&mut ParamReader<'_>) -> Result<Box<T>>;

struct Entry<T: ?Sized> {
    description: &'static str,
    factory: Factory<T>,
}

/// A registry of named constructors for one strategy family.
pub struct Registry<T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Entry<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &'static str,
        description: &'static str,
        factory: Factory<T>,
    ) -> &mut Self {
        self.entries.insert(
            name,
            Entry {
                description,
                factory,
            },
        );
        self
    }

    pub fn build(&self, name: &str, params: &Params) -> Result<Box<T>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.family,
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        let mut reader = ParamReader::new(name, params);
        let built = (entry.factory)(&mut reader)?;
        reader.finish()?;
        Ok(built)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    /// `(name, description)` pairs in name order.
    pub fn list(&self) -> Vec<(&'static str, &'static str)> {
        self.entries
            .iter()
            .map(|(n, e)| (*n, e.description))
            .collect()
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("names", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Shape {
        fn area(&self) -> f64;
    }
    struct Square(f64);
    impl Shape for Square {
        fn area(&self) -> f64 {
            self.0 * self.0
        }
    }

    fn registry() -> Registry<dyn Shape> {
        let mut r: Registry<dyn Shape> = Registry::new("shape");
        r.register("square", "a square", |p| Ok(Box::new(Square(p.require("side")?))));
        r
    }

    #[test]
    fn builds_by_name() {
        let params = Params::from([("side".to_string(), 3.0)]);
        assert_eq!(registry().build("square", &params).unwrap().area(), 9.0);
    }

    #[test]
    fn rejects_unknown_name_and_params() {
        let r = registry();
        assert!(matches!(
            r.build("circle", &Params::new()),
            Err(Error::UnknownStrategy { .. })
        ));
        let params = Params::from([("side".to_string(), 1.0), ("radius".to_string(), 1.0)]);
        let err = r.build("square", &params).err().unwrap().to_string();
        assert!(err.contains("radius"), "{err}");
        assert!(r.build("square", &Params::new()).is_err());
    }
}
