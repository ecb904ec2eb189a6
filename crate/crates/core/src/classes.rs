//! Abdominal class taxonomy.
//!
//! Label value 0 is background, 1..=13 are the organs in reporting order and
//! 14 is tumor.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const TUMOR: u8 = 14;
pub const MAX_CLASS: u8 = 14;
/// Number of label values including background.
pub const NUM_CLASSES: usize = 15;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "Liver",
    "Right Kidney",
    "Spleen",
    "Pancreas",
    "Aorta",
    "Inferior vena cava",
    "Right adrenal gland",
    "Left adrenal gland",
    "Gallbladder",
    "Esophagus",
    "Stomach",
    "Duodenum",
    "Left kidney",
    "Tumor",
];

pub fn class_name(class: u8) -> &'static str {
    CLASS_NAMES.get(class as usize).copied().unwrap_or("Unknown")
}

pub fn check_class(class: u32) -> Result<u8> {
    if class > MAX_CLASS as u32 {
        Err(Error::InvalidClass(class))
    } else {
        Ok(class as u8)
    }
}

pub fn is_organ(class: u8) -> bool {
    (1..=13).contains(&class)
}

/// A set of foreground classes (subset of 1..=14), stored as a bitmask.
///
/// Serializes as a sorted list of integers.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ClassSet(u16);

impl ClassSet {
    pub const EMPTY: ClassSet = ClassSet(0);
    /// Classes 1..=13.
    pub const ORGANS: ClassSet = ClassSet(0b0011_1111_1111_1110);
    pub const TUMOR: ClassSet = ClassSet(1 << TUMOR);
    /// Classes 1..=14.
    pub const ALL: ClassSet = ClassSet(0b0111_1111_1111_1110);

    pub fn from_classes<I: IntoIterator<Item = u8>>(classes: I) -> Result<Self> {
        let mut set = ClassSet::EMPTY;
        for c in classes {
            if c == BACKGROUND || c > MAX_CLASS {
                return Err(Error::InvalidClass(c as u32));
            }
            set.0 |= 1 << c;
        }
        Ok(set)
    }

    pub fn contains(self, class: u8) -> bool {
        class <= MAX_CLASS && self.0 & (1 << class) != 0
    }

    pub fn insert(&mut self, class: u8) {
        if class != BACKGROUND && class <= MAX_CLASS {
            self.0 |= 1 << class;
        }
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn intersect(self, other: ClassSet) -> ClassSet {
        ClassSet(self.0 & other.0)
    }

    pub fn union(self, other: ClassSet) -> ClassSet {
        ClassSet(self.0 | other.0)
    }

    pub fn is_superset(self, other: ClassSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn iter(self) -> impl Iterator<Item = u8> {
        (1..=MAX_CLASS).filter(move |&c| self.contains(c))
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for ClassSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ClassSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let classes = Vec::<u8>::deserialize(deserializer)?;
        ClassSet::from_classes(classes).map_err(serde::de::Error::custom)
    }
}
