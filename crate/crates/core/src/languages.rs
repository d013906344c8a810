//! Language-to-family table and per-language specs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// Family label for languages whose family is unknown. Each such language
/// forms its own singleton family.
pub const MISSING_FAMILY: &str = "Missing";

const BUILTIN_FAMILIES: &str = include_str!("../data/language_families.csv");

#[derive(Clone, Debug, Deserialize, Serialize)]
struct FamilyRow {
    language: String,
    family: String,
}

/// Two-column `language,family` lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyTable {
    map: BTreeMap<String, String>,
}

impl FamilyTable {
    /// The 100-language table shipped with the crate.
    pub fn builtin() -> Self {
        FamilyTable::from_reader(BUILTIN_FAMILIES.as_bytes()).expect("bundled family table parses")
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut map = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: FamilyRow = row?;
            let lang = row.language.trim().to_string();
            if map.insert(lang.clone(), row.family.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("language {lang} listed twice")));
            }
        }
        Ok(FamilyTable { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        FamilyTable::from_reader(std::fs::File::open(path)?)
    }

    pub fn family(&self, language: &str) -> Result<&str> {
        self.map
            .get(language)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("unknown language id {language}")))
    }

    pub fn is_known_family(&self, family: &str) -> bool {
        family == MISSING_FAMILY || self.map.values().any(|f| f == family)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// True when two languages count as the same family. `Missing` never matches
/// another language.
pub fn same_family(lang_a: &str, fam_a: &str, lang_b: &str, fam_b: &str) -> bool {
    if lang_a == lang_b {
        return true;
    }
    fam_a == fam_b && fam_a != MISSING_FAMILY
}

/// One language of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub family: String,
    /// sentence count
    pub size: usize,
    pub seed: u64,
}

pub fn validate_specs(specs: &[LanguageSpec], table: &FamilyTable) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Input("no languages given".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in specs {
        if s.id.is_empty() || s.id.contains(|c: char| c.is_whitespace() || c == '#' || c == ',') {
            return Err(Error::Input(format!("invalid language id {:?}", s.id)));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Input(format!("language id {} appears twice", s.id)));
        }
        if s.size == 0 {
            return Err(Error::Input(format!("language {} has corpus size 0", s.id)));
        }
        if !table.is_known_family(&s.family) {
            return Err(Error::Input(format!("language {} has unknown family {}", s.id, s.family)));
        }
    }
    Ok(())
}

pub fn write_specs(path: &Path, specs: &[LanguageSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in specs {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_specs(path: &Path) -> Result<Vec<LanguageSpec>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
