//! The habitat label space.
//!
//! Classes are ordered by abbreviation (byte order) when a taxonomy is
//! built, and that order fixes logit positions and confusion-matrix rows.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Version tag of the built-in 18-class taxonomy.
pub const LIVING_ENGLAND_VERSION: &str = "living-england-18/v1";

/// Image counts per class in the reference ground-level corpus (43,092 images).
pub const REFERENCE_IMAGE_COUNTS: [(&str, u32); 18] = [
    ("AH", 2359),
    ("BS", 957),
    ("BSSP", 224),
    ("BOG", 1750),
    ("BRA", 2567),
    ("BMYW", 3187),
    ("BUAG", 754),
    ("CS", 1008),
    ("CSD", 1546),
    ("CW", 371),
    ("DSH", 4699),
    ("FMS", 2044),
    ("IG", 10555),
    ("IR", 794),
    ("Multiple", 1593),
    ("SCR", 2053),
    ("UG", 6172),
    ("WAT", 459),
];

const LIVING_ENGLAND: [(&str, &str, &str); 18] = [
    (
        "Arable and Horticultural",
        "AH",
        "Cultivated land under crops, horticulture or recently ploughed soil.",
    ),
    (
        "Bare Sand",
        "BS",
        "Unvegetated sand such as beaches, sand flats and blow-outs.",
    ),
    (
        "Bare Soil, Silt and Peat",
        "BSSP",
        "Exposed soil, silt or peat with little or no vegetation cover.",
    ),
    (
        "Bog",
        "BOG",
        "Waterlogged peatland dominated by sphagnum mosses, cotton-grasses and heathers.",
    ),
    (
        "Bracken",
        "BRA",
        "Ground dominated by dense stands of bracken fern.",
    ),
    (
        "Broadleaved, Mixed and Yew Woodland",
        "BMYW",
        "Woodland with a canopy of broadleaved trees, yew, or broadleaves mixed with conifers.",
    ),
    (
        "Built up areas and Gardens",
        "BUAG",
        "Urban and suburban land including buildings, roads and domestic gardens.",
    ),
    (
        "Coastal Saltmarsh",
        "CS",
        "Intertidal vegetation of salt-tolerant grasses and herbs on muddy shores.",
    ),
    (
        "Coastal Sand Dunes",
        "CSD",
        "Wind-blown coastal sand ridges stabilised by marram and other dune plants.",
    ),
    (
        "Coniferous Woodland",
        "CW",
        "Woodland dominated by coniferous trees, including plantations.",
    ),
    (
        "Dwarf Shrub Heath",
        "DSH",
        "Open ground dominated by heather, gorse and other low-growing shrubs.",
    ),
    (
        "Fen, marsh and swamp",
        "FMS",
        "Wetland on mineral or peat soils with reeds, sedges, rushes and tall herbs.",
    ),
    (
        "Improved and Semi-Improved Grassland",
        "IG",
        "Agriculturally managed grassland that is fertilised, reseeded or intensively grazed.",
    ),
    (
        "Inland rock",
        "IR",
        "Natural or artificial exposed rock such as crags, scree, quarries and pavement.",
    ),
    (
        "Multiple",
        "Multiple",
        "Scenes mixing two or more habitats, such as ecotones and habitat edges.",
    ),
    (
        "Scrub",
        "SCR",
        "Patches of shrubs and young trees such as hawthorn, blackthorn and bramble.",
    ),
    (
        "Unimproved grassland",
        "UG",
        "Species-rich grassland not subject to agricultural improvement.",
    ),
    (
        "Water",
        "WAT",
        "Open standing or running fresh water, including lakes, ponds and rivers.",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HabitatClass {
    pub name: String,
    pub abbreviation: String,
    pub definition: String,
    pub index: usize,
}

/// Unindexed class description, as read from a taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSpec {
    pub name: String,
    pub abbreviation: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub definition: String,
}

impl ClassSpec {
    pub fn new(name: &str, abbreviation: &str, definition: &str) -> Self {
        Self {
            name: name.to_string(),
            abbreviation: abbreviation.to_string(),
            definition: definition.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ClassTaxonomy {
    classes: Vec<HabitatClass>,
    version: String,
}

impl ClassTaxonomy {
    pub const MAX_CLASSES: usize = 1000;

    /// Validates the class list and assigns indices in abbreviation order.
    pub fn new(version: impl Into<String>, mut specs: Vec<ClassSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyTaxonomy);
        }
        if specs.len() > Self::MAX_CLASSES {
            return Err(Error::TooManyClasses(specs.len()));
        }
        if specs.iter().any(|s| s.abbreviation.is_empty()) {
            return Err(Error::EmptyAbbreviation);
        }
        specs.sort_by(|a, b| a.abbreviation.cmp(&b.abbreviation));
        if let Some(pair) = specs
            .windows(2)
            .find(|w| w[0].abbreviation == w[1].abbreviation)
        {
            return Err(Error::DuplicateAbbreviation(pair[0].abbreviation.clone()));
        }
        let classes = specs
            .into_iter()
            .enumerate()
            .map(|(index, s)| HabitatClass {
                name: s.name,
                abbreviation: s.abbreviation,
                definition: s.definition,
                index,
            })
            .collect();
        Ok(Self {
            classes,
            version: version.into(),
        })
    }

    /// The built-in 18-class Living England taxonomy.
    pub fn living_england() -> Self {
        let specs = LIVING_ENGLAND
            .iter()
            .map(|(n, a, d)| ClassSpec::new(n, a, d))
            .collect();
        Self::new(LIVING_ENGLAND_VERSION, specs).expect("built-in taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn classes(&self) -> &[HabitatClass] {
        &self.classes
    }

    pub fn get(&self, index: usize) -> Option<&HabitatClass> {
        self.classes.get(index)
    }

    pub fn index_of(&self, abbreviation: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.abbreviation.as_str().cmp(abbreviation))
            .ok()
    }

    pub fn class(&self, abbreviation: &str) -> Option<&HabitatClass> {
        self.index_of(abbreviation).map(|i| &self.classes[i])
    }

    pub fn require(&self, abbreviation: &str) -> Result<usize> {
        self.index_of(abbreviation)
            .ok_or_else(|| Error::UnknownLabel(abbreviation.to_string()))
    }

    pub fn abbreviations(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.abbreviation.as_str())
    }

    pub fn specs(&self) -> Vec<ClassSpec> {
        self.classes
            .iter()
            .map(|c| ClassSpec::new(&c.name, &c.abbreviation, &c.definition))
            .collect()
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::living_england()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn default_has_eighteen_sorted_classes() {
        let t = ClassTaxonomy::living_england();
        assert_eq!(t.len(), 18);
        assert!(t.index_of("IG").is_some());
        let abbrs: Vec<&str> = t.abbreviations().collect();
        assert_eq!(
            abbrs,
            vec![
                "AH", "BMYW", "BOG", "BRA", "BS", "BSSP", "BUAG", "CS", "CSD", "CW", "DSH", "FMS",
                "IG", "IR", "Multiple", "SCR", "UG", "WAT"
            ]
        );
        for (i, c) in t.classes().iter().enumerate() {
            assert_eq!(c.index, i);
            assert!(!c.definition.is_empty());
        }
    }

    #[test]
    fn reference_counts_cover_taxonomy_and_total() {
        let t = ClassTaxonomy::living_england();
        let total: u32 = REFERENCE_IMAGE_COUNTS.iter().map(|(_, n)| n).sum();
        assert_eq!(total, 43092);
        for (abbr, _) in REFERENCE_IMAGE_COUNTS {
            assert!(t.index_of(abbr).is_some(), "{abbr}");
        }
    }

    #[test]
    fn singleton_taxonomy() {
        let t = ClassTaxonomy::new("one", vec![ClassSpec::new("Alpha", "A", "")]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.index_of("A"), Some(0));
    }

    #[test]
    fn duplicate_abbreviation_is_named() {
        let err = ClassTaxonomy::new(
            "dup",
            vec![ClassSpec::new("x1", "X", ""), ClassSpec::new("x2", "X", "")],
        )
        .unwrap_err();
        assert_eq!(err, Error::DuplicateAbbreviation("X".into()));
    }

    #[test]
    fn empty_and_oversized_taxonomies_rejected() {
        assert_eq!(
            ClassTaxonomy::new("e", Vec::new()).unwrap_err(),
            Error::EmptyTaxonomy
        );
        let many = (0..1001)
            .map(|i| ClassSpec::new("c", &alloc::format!("C{i}"), ""))
            .collect();
        assert_eq!(
            ClassTaxonomy::new("big", many).unwrap_err(),
            Error::TooManyClasses(1001)
        );
    }
}
