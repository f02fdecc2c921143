//! Fallback lookup of the image that defines a symbol, for rows whose ledger
//! did not record the callee.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::elf::Elf;

/// Exported by the agent; marks its image so it is never taken as the owner
/// of the functions it wraps.
pub const AGENT_MARKER_SYMBOL: &str = "xflow_probe_shadow_depth";

pub trait OwnerResolver {
    /// First image in `images` (ordered by image id) that defines `symbol`.
    fn owner(&self, symbol: &str, images: &[&str]) -> Option<String>;
}

pub struct NoOwners;

impl OwnerResolver for NoOwners {
    fn owner(&self, _symbol: &str, _images: &[&str]) -> Option<String> {
        None
    }
}

/// Reads each image's dynamic symbol table from disk once.
#[derive(Default)]
pub struct ElfOwners {
    cache: RefCell<HashMap<String, Option<HashSet<String>>>>,
}

impl ElfOwners {
    pub fn new() -> Self {
        Self::default()
    }

    fn exports(path: &str) -> Option<HashSet<String>> {
        let data = std::fs::read(path).ok()?;
        let elf = Elf::parse(&data).ok()?;
        let syms = elf.dynsyms().ok()?;
        if syms.iter().any(|s| s.is_defined() && s.name == AGENT_MARKER_SYMBOL) {
            return None;
        }
        Some(syms.into_iter().filter(|s| s.is_defined() && s.is_function()).map(|s| s.name).collect())
    }
}

impl OwnerResolver for ElfOwners {
    fn owner(&self, symbol: &str, images: &[&str]) -> Option<String> {
        let mut cache = self.cache.borrow_mut();
        images
            .iter()
            .find(|p| {
                cache
                    .entry(p.to_string())
                    .or_insert_with(|| Self::exports(p))
                    .as_ref()
                    .is_some_and(|set| set.contains(symbol))
            })
            .map(|p| p.to_string())
    }
}
