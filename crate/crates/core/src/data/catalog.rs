use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum StyleClass {
    Positive,
    Neutral,
    Negative,
}

impl FromStr for StyleClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(StyleClass::Positive),
            "neutral" => Ok(StyleClass::Neutral),
            "negative" => Ok(StyleClass::Negative),
            other => Err(Error::config(format!("unknown style class {other:?}"))),
        }
    }
}

impl StyleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleClass::Positive => "positive",
            StyleClass::Neutral => "neutral",
            StyleClass::Negative => "negative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTrait {
    pub name: String,
    pub class: StyleClass,
}

/// Ordered set of style traits. A trait's index is its row in the style
/// embedding table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<StyleTrait>", into = "Vec<StyleTrait>")]
pub struct StyleCatalog {
    traits: Vec<StyleTrait>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<StyleTrait>> for StyleCatalog {
    type Error = Error;

    fn try_from(traits: Vec<StyleTrait>) -> Result<Self> {
        StyleCatalog::new(traits)
    }
}

impl From<StyleCatalog> for Vec<StyleTrait> {
    fn from(c: StyleCatalog) -> Self {
        c.traits
    }
}

impl StyleCatalog {
    pub fn new(traits: Vec<StyleTrait>) -> Result<Self> {
        if traits.is_empty() {
            return Err(Error::config("style catalog is empty"));
        }
        let mut index = HashMap::with_capacity(traits.len());
        for (i, t) in traits.iter().enumerate() {
            if t.name.trim().is_empty() {
                return Err(Error::config("empty style name"));
            }
            if index.insert(t.name.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate style {:?}", t.name)));
            }
        }
        Ok(StyleCatalog { traits, index })
    }

    /// Parses `name<TAB>class` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut traits = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::config(format!("catalog line {}: expected name<TAB>class", n + 1)))?;
            traits.push(StyleTrait { name: name.trim().to_string(), class: class.parse()? });
        }
        StyleCatalog::new(traits)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        self.traits.iter().map(|t| format!("{}\t{}\n", t.name, t.class.as_str())).collect()
    }

    /// Ten traits spread over the three classes.
    pub fn miniature() -> Self {
        let rows = [
            ("Peaceful", StyleClass::Positive),
            ("Sweet", StyleClass::Positive),
            ("Extraordinary", StyleClass::Positive),
            ("Cheerful", StyleClass::Positive),
            ("Absentminded", StyleClass::Neutral),
            ("Curious", StyleClass::Neutral),
            ("Old-fashioned", StyleClass::Neutral),
            ("Arrogant", StyleClass::Negative),
            ("Gloomy", StyleClass::Negative),
            ("Anxious", StyleClass::Negative),
        ];
        let traits = rows.iter().map(|&(n, c)| StyleTrait { name: n.to_string(), class: c }).collect();
        StyleCatalog::new(traits).expect("static catalog is valid")
    }

    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Catalog(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn traits(&self) -> &[StyleTrait] {
        &self.traits
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.traits.iter().map(|t| t.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tab_separated() {
        let c = StyleCatalog::parse("Peaceful\tpositive\n# note\n\nGloomy\tnegative\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.index_of("Gloomy").unwrap(), 1);
        assert!(matches!(c.index_of("Nope"), Err(Error::Catalog(_))));
        assert_eq!(StyleCatalog::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_duplicates_and_bad_class() {
        assert!(StyleCatalog::parse("A\tpositive\nA\tneutral\n").is_err());
        assert!(StyleCatalog::parse("A\tjolly\n").is_err());
        assert!(StyleCatalog::parse("").is_err());
    }

    #[test]
    fn miniature_has_three_classes() {
        let c = StyleCatalog::miniature();
        assert_eq!(c.len(), 10);
        for class in [StyleClass::Positive, StyleClass::Neutral, StyleClass::Negative] {
            assert!(c.traits().iter().any(|t| t.class == class));
        }
    }
}
