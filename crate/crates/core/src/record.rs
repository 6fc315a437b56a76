//! Image records and the corpus manifest.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::InvalidConfig(format!(
                "coordinates ({latitude}, {longitude}) out of range"
            )));
        }
        Ok(Self {
            latitude,
            longitude,
        })
    }
}

/// Calendar date, serialized as `YYYY-MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaptureDate {
    year: i32,
    month: u8,
    day: u8,
}

impl CaptureDate {
    pub fn new(year: i32, month: u8, day: u8) -> Result<Self> {
        let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
        let days = match month {
            1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
            4 | 6 | 9 | 11 => 30,
            2 if leap => 29,
            2 => 28,
            _ => 0,
        };
        if day == 0 || day > days {
            return Err(Error::InvalidConfig(format!(
                "invalid date {year:04}-{month:02}-{day:02}"
            )));
        }
        Ok(Self { year, month, day })
    }

    pub fn year(&self) -> i32 {
        self.year
    }
    pub fn month(&self) -> u8 {
        self.month
    }
    pub fn day(&self) -> u8 {
        self.day
    }
}

impl fmt::Display for CaptureDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for CaptureDate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("`{s}` is not a YYYY-MM-DD date"));
        let mut parts = s.trim().splitn(3, '-');
        let y = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let m = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let d = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        Self::new(y, m, d)
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for CaptureDate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for CaptureDate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One labelled ground-level photograph.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub label: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub site: Option<String>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub location: Option<GeoPoint>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub capture_date: Option<CaptureDate>,
    pub origin: Origin,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub parent_id: Option<String>,
}

impl ImageRecord {
    pub fn original(id: impl Into<String>, path: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label: label.into(),
            site: None,
            location: None,
            capture_date: None,
            origin: Origin::Original,
            parent_id: None,
        }
    }

    /// An augmented copy of `parent`, sharing its image file and metadata.
    pub fn augmented_from(parent: &ImageRecord, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            origin: Origin::Augmented,
            parent_id: Some(parent.id.clone()),
            ..parent.clone()
        }
    }

    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

/// The dataset index. Records are validated against a taxonomy on
/// construction and the per-class counts are always a recount of them.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Manifest {
    records: Vec<ImageRecord>,
    taxonomy_version: String,
    per_class_counts: BTreeMap<String, usize>,
}

fn count_labels(records: &[ImageRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.label.clone()).or_insert(0) += 1;
    }
    counts
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            taxonomy.require(&r.label)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateRecordId(r.id.clone()));
            }
        }
        let originals: BTreeSet<&str> = records
            .iter()
            .filter(|r| r.is_original())
            .map(|r| r.id.as_str())
            .collect();
        for r in &records {
            let ok = match (r.origin, &r.parent_id) {
                (Origin::Original, None) => true,
                (Origin::Augmented, Some(p)) => originals.contains(p.as_str()),
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidParent {
                    id: r.id.clone(),
                    parent: r.parent_id.clone(),
                });
            }
        }
        let per_class_counts = count_labels(&records);
        Ok(Self {
            records,
            taxonomy_version: taxonomy.version().to_string(),
            per_class_counts,
        })
    }

    /// Rebuilds a manifest from persisted parts, checking the stored counts
    /// and taxonomy version against the records.
    pub fn from_parts(
        records: Vec<ImageRecord>,
        taxonomy_version: &str,
        per_class_counts: BTreeMap<String, usize>,
        taxonomy: &ClassTaxonomy,
    ) -> Result<Self> {
        if taxonomy_version != taxonomy.version() {
            return Err(Error::TaxonomyMismatch {
                expected: taxonomy.version().to_string(),
                found: taxonomy_version.to_string(),
            });
        }
        let manifest = Self::new(records, taxonomy)?;
        let stored: BTreeMap<String, usize> =
            per_class_counts.into_iter().filter(|(_, n)| *n > 0).collect();
        if stored != manifest.per_class_counts {
            return Err(Error::CountMismatch(format!(
                "stored {stored:?}, recounted {:?}",
                manifest.per_class_counts
            )));
        }
        Ok(manifest)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn taxonomy_version(&self) -> &str {
        &self.taxonomy_version
    }

    pub fn per_class_counts(&self) -> &BTreeMap<String, usize> {
        &self.per_class_counts
    }

    pub fn originals(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.is_original())
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records sorted by id, for order-insensitive comparison.
    pub fn sorted(mut self) -> Self {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        self
    }
}
