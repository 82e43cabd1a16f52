use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{EalmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogueEntry {
    pub text: String,
    pub popularity: f64,
}

/// Entity strings of one type with popularity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    pub entity_type: String,
    pub entries: Vec<CatalogueEntry>,
}

impl Catalogue {
    pub fn new(entity_type: impl Into<String>, entries: Vec<CatalogueEntry>) -> Result<Self> {
        let c = Catalogue {
            entity_type: entity_type.into(),
            entries,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_pairs<S: Into<String>>(
        entity_type: impl Into<String>,
        pairs: impl IntoIterator<Item = (S, f64)>,
    ) -> Result<Self> {
        Self::new(
            entity_type,
            pairs
                .into_iter()
                .map(|(t, p)| CatalogueEntry {
                    text: t.into(),
                    popularity: p,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(EalmError::config(format!(
                "catalogue {} is empty",
                self.entity_type
            )));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !e.popularity.is_finite() || e.popularity < 0.0)
        {
            return Err(EalmError::config(format!(
                "catalogue {}: popularity of {:?} must be finite and non-negative, got {}",
                self.entity_type, e.text, e.popularity
            )));
        }
        if self.entries.iter().all(|e| e.popularity == 0.0) {
            return Err(EalmError::config(format!(
                "catalogue {}: every popularity score is zero",
                self.entity_type
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.iter().any(|e| e.text == text)
    }

    pub fn total_popularity(&self) -> f64 {
        self.entries.iter().map(|e| e.popularity).sum()
    }

    /// Entries sorted by descending popularity; ties keep file order.
    pub fn ranked(&self) -> Vec<&CatalogueEntry> {
        let mut v: Vec<&CatalogueEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.popularity.total_cmp(&a.popularity));
        v
    }

    /// The most popular `fraction` of entries (at least one).
    pub fn top_fraction(&self, fraction: f64) -> Result<Catalogue> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(EalmError::config(format!(
                "catalogue fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        let entries = self.ranked().into_iter().take(n).cloned().collect();
        Catalogue::new(self.entity_type.clone(), entries)
    }

    /// Draws one entry with probability proportional to its popularity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&CatalogueEntry> {
        self.validate()?;
        let total = self.total_popularity();
        let mut x = rng.random::<f64>() * total;
        for e in &self.entries {
            if x < e.popularity {
                return Ok(e);
            }
            x -= e.popularity;
        }
        // rounding fallthrough: last entry with positive popularity
        Ok(self
            .entries
            .iter()
            .rev()
            .find(|e| e.popularity > 0.0)
            .expect("validated catalogue has a positive score"))
    }

    /// Parses `entity<TAB>popularity` lines; `#` starts a comment line.
    pub fn parse(entity_type: impl Into<String>, text: &str) -> Result<Self> {
        let entity_type = entity_type.into();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let (entity, pop) = trimmed.split_once('\t').ok_or_else(|| {
                EalmError::format(format!(
                    "catalogue {entity_type} line {}: expected entity<TAB>popularity",
                    n + 1
                ))
            })?;
            let popularity: f64 = pop.trim().parse().map_err(|_| {
                EalmError::format(format!(
                    "catalogue {entity_type} line {}: bad popularity {pop:?}",
                    n + 1
                ))
            })?;
            entries.push(CatalogueEntry {
                text: entity.to_string(),
                popularity,
            });
        }
        Catalogue::new(entity_type, entries)
    }

    pub fn load(entity_type: impl Into<String>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EalmError::io(path, e))?;
        Self::parse(entity_type, &text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# entity type: {}\n", self.entity_type);
        for e in &self.entries {
            writeln!(s, "{}\t{}", e.text, e.popularity).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| EalmError::io(path, e))
    }
}

/// Draws an entity string by popularity.
pub fn sample_entity<'a, R: Rng + ?Sized>(catalogue: &'a Catalogue, rng: &mut R) -> Result<&'a str> {
    catalogue.sample(rng).map(|e| e.text.as_str())
}
