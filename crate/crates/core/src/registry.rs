//! Name-keyed registries of interchangeable strategies.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Entries keyed by name, kept in registration order.
pub struct Registry<T> {
    kind: &'static str,
    entries: IndexMap<&'static str, T>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, entry: T) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateEntry {
                kind: self.kind,
                name: name.to_owned(),
            });
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.get(name).ok_or_else(|| Error::UnknownEntry {
            kind: self.kind,
            name: name.to_owned(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_duplicates() {
        let mut r: Registry<fn() -> u8> = Registry::new("thing");
        r.register("one", || 1).unwrap();
        r.register("two", || 2).unwrap();
        assert_eq!((r.get("two").unwrap())(), 2);
        assert!(matches!(r.register("one", || 9), Err(Error::DuplicateEntry { .. })));
        assert!(matches!(r.get("three"), Err(Error::UnknownEntry { kind: "thing", .. })));
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["one", "two"]);
    }
}
