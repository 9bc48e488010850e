//! Category taxonomy with the primary/secondary split.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Structural classes of the default desk-scale taxonomy.
pub const DEFAULT_PRIMARY: [&str; 12] = [
    "bed",
    "nightstand",
    "wardrobe",
    "dresser",
    "desk",
    "chair",
    "bookshelf",
    "sofa",
    "coffee_table",
    "tv_stand",
    "dining_table",
    "armchair",
];

/// Small, support-dependent classes of the default taxonomy.
pub const DEFAULT_SECONDARY: [&str; 10] = [
    "table_lamp",
    "book",
    "pillow",
    "plant",
    "vase",
    "laptop",
    "monitor",
    "cup",
    "box",
    "floor_lamp",
];

/// Which tier a layout belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    Primary,
    Secondary,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Primary => "primary",
            Tier::Secondary => "secondary",
        }
    }

    pub fn parse(s: &str) -> Option<Tier> {
        match s {
            "primary" => Some(Tier::Primary),
            "secondary" => Some(Tier::Secondary),
            _ => None,
        }
    }
}

/// Ordered class list. Index `classes.len()` is the reserved empty token, so
/// one-hot vectors have length `num_classes() = classes.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTaxonomy {
    classes: Vec<String>,
    primary: Vec<bool>,
}

impl CategoryTaxonomy {
    pub fn new<S: AsRef<str>>(primary: &[S], secondary: &[S]) -> Result<Self> {
        let mut classes = Vec::with_capacity(primary.len() + secondary.len());
        let mut flags = Vec::with_capacity(classes.capacity());
        for (names, is_primary) in [(primary, true), (secondary, false)] {
            for name in names {
                let name = name.as_ref();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Taxonomy("class names must be non-empty words"));
                }
                if classes.iter().any(|c: &String| c == name) {
                    return Err(Error::Taxonomy("duplicate class name"));
                }
                classes.push(name.to_string());
                flags.push(is_primary);
            }
        }
        if classes.is_empty() {
            return Err(Error::Taxonomy("no classes"));
        }
        Ok(Self {
            classes,
            primary: flags,
        })
    }

    /// 12 primary + 10 secondary classes.
    pub fn desk() -> Self {
        Self::new(&DEFAULT_PRIMARY, &DEFAULT_SECONDARY).expect("default taxonomy is valid")
    }

    /// One-hot width, including the empty token.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn num_real_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn empty_index(&self) -> usize {
        self.classes.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClassName(name.to_string()))
    }

    pub fn tier_of(&self, index: usize) -> Result<Tier> {
        match self.primary.get(index) {
            Some(true) => Ok(Tier::Primary),
            Some(false) => Ok(Tier::Secondary),
            None => Err(Error::UnknownClass {
                index,
                classes: self.classes.len(),
            }),
        }
    }

    pub fn is_primary(&self, index: usize) -> bool {
        self.primary.get(index).copied().unwrap_or(false)
    }

    pub fn primary_vocab(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes.len()).filter(|&i| self.primary[i])
    }

    pub fn secondary_vocab(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes.len()).filter(|&i| !self.primary[i])
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// FNV-1a over class names and tier flags. Checkpoints store it so a model is
    /// never loaded against a different class layout.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, &p) in self.classes.iter().zip(&self.primary) {
            name.bytes().for_each(&mut eat);
            eat(0);
            eat(p as u8);
        }
        h
    }
}

impl Default for CategoryTaxonomy {
    fn default() -> Self {
        Self::desk()
    }
}
