//! Name-keyed strategy registries.
//!
//! Every interchangeable algorithm family in the crate (layer kinds, VAE
//! objectives, tSNE distance kernels, feature extractors) registers a
//! constructor under a stable name so configuration files and the CLI can
//! select it at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub struct Registry<C> {
    kind: &'static str,
    entries: BTreeMap<&'static str, C>,
    aliases: BTreeMap<&'static str, &'static str>,
}

impl<C: Copy> Registry<C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, constructor: C) -> &mut Self {
        self.entries.insert(name, constructor);
        self
    }

    pub fn alias(&mut self, alias: &'static str, target: &'static str) -> &mut Self {
        debug_assert!(self.entries.contains_key(target));
        self.aliases.insert(alias, target);
        self
    }

    pub fn get(&self, name: &str) -> Result<C> {
        let name = self.aliases.get(name).copied().unwrap_or(name);
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_ok()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_alias() {
        let mut r: Registry<fn() -> u32> = Registry::new("thing");
        r.register("one", || 1).register("two", || 2).alias("uno", "one");
        assert_eq!(r.get("one").unwrap()(), 1);
        assert_eq!(r.get("uno").unwrap()(), 1);
        assert_eq!(r.names(), vec!["one", "two"]);
        let err = r.get("three").err().unwrap().to_string();
        assert!(err.contains("unknown thing 'three'"), "{err}");
        assert!(err.contains("one, two"));
    }
}
