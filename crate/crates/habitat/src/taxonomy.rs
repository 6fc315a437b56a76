//! Taxonomy files.
//!
//! A taxonomy file is TOML:
//!
//! ```toml
//! version = "my-habitats/v2"
//!
//! [[class]]
//! name = "Bog"
//! abbreviation = "BOG"
//! definition = "Waterlogged peatland."
//! ```

use std::path::Path;

use habitat_core::taxonomy::ClassSpec;
use habitat_core::ClassTaxonomy;
use serde::{Deserialize, Serialize};

use crate::error::{HabitatError, IoContext, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyFile {
    version: String,
    #[serde(rename = "class", default)]
    classes: Vec<ClassSpec>,
}

pub fn parse_taxonomy(text: &str, origin: &Path) -> Result<ClassTaxonomy> {
    let file: TaxonomyFile = toml::from_str(text).map_err(|e| HabitatError::TaxonomyFile {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(ClassTaxonomy::new(file.version, file.classes)?)
}

/// Reads a taxonomy file, or returns the built-in 18-class taxonomy when
/// `path` is `None`.
pub fn load_taxonomy(path: Option<&Path>) -> Result<ClassTaxonomy> {
    match path {
        None => Ok(ClassTaxonomy::living_england()),
        Some(p) => {
            let text = std::fs::read_to_string(p).at(p)?;
            parse_taxonomy(&text, p)
        }
    }
}

pub fn taxonomy_to_toml(taxonomy: &ClassTaxonomy) -> String {
    let file = TaxonomyFile {
        version: taxonomy.version().to_string(),
        classes: taxonomy.specs(),
    };
    toml::to_string(&file).expect("taxonomy serialises")
}

pub fn save_taxonomy(taxonomy: &ClassTaxonomy, path: &Path) -> Result<()> {
    std::fs::write(path, taxonomy_to_toml(taxonomy)).at(path)
}
