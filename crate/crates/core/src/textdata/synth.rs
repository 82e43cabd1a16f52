//! Synthetic voice-assistant style world: pseudo-word lexicons, entity
//! catalogues with popularity, and carrier templates.
//!
//! Each entity type owns a disjoint pool of pseudo-words. Catalogue entities
//! are split into a *seen* part that appears in generated training text and a
//! *tail* part that never does. *New* entities are outside the catalogue and
//! outside all training text. Tail and new entities are composed only of
//! words that occur in seen entities.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalogue::{Catalogue, CatalogueEntry};
use super::corpus::Template;
use crate::error::{EalmError, Result};

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq)]
pub struct EntityTypeConfig {
    pub name: String,
    /// Distinct pseudo-words available to this type.
    pub pool_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub catalogue_size: usize,
    pub new_entities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub types: Vec<EntityTypeConfig>,
    /// Fraction of each catalogue kept out of all training text.
    pub tail_fraction: f64,
    /// Fraction of each catalogue that appears in fusion-training text only.
    pub fusion_only_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            types: vec![
                EntityTypeConfig {
                    name: "song".into(),
                    pool_size: 150,
                    min_words: 2,
                    max_words: 3,
                    catalogue_size: 500,
                    new_entities: 25,
                },
                EntityTypeConfig {
                    name: "celebrity".into(),
                    pool_size: 100,
                    min_words: 2,
                    max_words: 2,
                    catalogue_size: 500,
                    new_entities: 25,
                },
            ],
            tail_fraction: 0.3,
            fusion_only_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityPartition {
    pub entity_type: String,
    /// Full catalogue (seen + tail) with popularity.
    pub catalogue: Catalogue,
    /// In the pre-training and fusion-training text.
    pub seen: Vec<CatalogueEntry>,
    /// In the fusion-training text only.
    pub fusion_only: Vec<CatalogueEntry>,
    pub tail: Vec<CatalogueEntry>,
    /// Not in the catalogue; popularity is a draw from the same law.
    pub new: Vec<CatalogueEntry>,
}

impl EntityPartition {
    pub fn seen_catalogue(&self) -> Result<Catalogue> {
        Catalogue::new(self.entity_type.clone(), self.seen.clone())
    }

    /// Entities that may fill slots of fusion-training text.
    pub fn fusion_catalogue(&self) -> Result<Catalogue> {
        let mut v = self.seen.clone();
        v.extend(self.fusion_only.iter().cloned());
        Catalogue::new(self.entity_type.clone(), v)
    }

    pub fn tail_catalogue(&self) -> Result<Catalogue> {
        Catalogue::new(self.entity_type.clone(), self.tail.clone())
    }

    pub fn new_catalogue(&self) -> Result<Catalogue> {
        Catalogue::new(self.entity_type.clone(), self.new.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub partitions: Vec<EntityPartition>,
    pub slot_templates: Vec<Template>,
    pub carrier_templates: Vec<Template>,
}

/// Distinct pseudo-words of 2–3 consonant-vowel syllables not in `exclude`.
pub fn pseudo_words<R: Rng + ?Sized>(n: usize, exclude: &HashSet<String>, rng: &mut R) -> Vec<String> {
    let mut seen: HashSet<String> = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let w: String = (0..syl)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())],
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn compose<R: Rng + ?Sized>(pool: &[String], kind: &EntityTypeConfig, rng: &mut R) -> String {
    let n = rng.random_range(kind.min_words..=kind.max_words);
    (0..n)
        .map(|_| pool[rng.random_range(0..pool.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn popularity_for_rank(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64 / 100.0)
}

const CARRIERS: &[&str] = &[
    "what is the weather today",
    "set an alarm for seven",
    "turn off the lights",
    "what time is it",
    "stop the music",
    "turn up the volume",
    "remind me to buy milk",
    "how far is the station",
];

fn slot_templates(types: &[EntityTypeConfig]) -> Vec<String> {
    let has = |n: &str| types.iter().any(|t| t.name == n);
    let mut out = Vec::new();
    if has("song") {
        out.extend(
            ["play {song}", "i want to hear {song}", "put on {song} please", "add {song} to my list"]
                .map(String::from),
        );
    }
    if has("celebrity") {
        out.extend(
            ["play something by {celebrity}", "who is {celebrity}", "show me news about {celebrity}"]
                .map(String::from),
        );
    }
    if has("song") && has("celebrity") {
        out.extend(["play {song} by {celebrity}", "play the song {song} from {celebrity}"].map(String::from));
    }
    for t in types {
        if t.name != "song" && t.name != "celebrity" {
            out.push(format!("find {{{}}}", t.name));
            out.push(format!("tell me about {{{}}}", t.name));
        }
    }
    out
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<World> {
        if !(0.0..1.0).contains(&config.tail_fraction)
            || !(0.0..1.0).contains(&config.fusion_only_fraction)
            || config.tail_fraction + config.fusion_only_fraction >= 1.0
        {
            return Err(EalmError::config(
                "tail and fusion-only fractions must be in [0, 1) and sum below 1",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slot_sources = slot_templates(&config.types);
        let mut taken: HashSet<String> = CARRIERS
            .iter()
            .copied()
            .chain(slot_sources.iter().map(|s| s.as_str()))
            .flat_map(|s| s.split(' '))
            .filter(|w| !w.starts_with('{'))
            .map(String::from)
            .collect();
        let mut partitions = Vec::new();
        for kind in &config.types {
            if kind.min_words == 0 || kind.min_words > kind.max_words {
                return Err(EalmError::config(format!("bad word range for {}", kind.name)));
            }
            let pool = pseudo_words(kind.pool_size, &taken, &mut rng);
            taken.extend(pool.iter().cloned());
            let n_tail = (kind.catalogue_size as f64 * config.tail_fraction).round() as usize;
            let n_fusion = (kind.catalogue_size as f64 * config.fusion_only_fraction).round() as usize;
            let n_seen = kind.catalogue_size - n_tail - n_fusion;
            let mut names: BTreeSet<String> = BTreeSet::new();
            let draw = |source: &[String], n: usize, names: &mut BTreeSet<String>, rng: &mut ChaCha8Rng| {
                let mut out = Vec::with_capacity(n);
                let mut attempts = 0;
                while out.len() < n {
                    attempts += 1;
                    if attempts > 1000 * (n + 1) {
                        return Err(EalmError::config(format!(
                            "cannot compose {n} distinct {} entities from {} words",
                            kind.name,
                            source.len()
                        )));
                    }
                    let e = compose(source, kind, rng);
                    if names.insert(e.clone()) {
                        out.push(e);
                    }
                }
                Ok(out)
            };
            let seen_names = draw(&pool, n_seen, &mut names, &mut rng)?;
            let seen_words: Vec<String> = seen_names
                .iter()
                .flat_map(|e| e.split(' ').map(String::from))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let tail_names = draw(&seen_words, n_tail, &mut names, &mut rng)?;
            let fusion_names = draw(&seen_words, n_fusion, &mut names, &mut rng)?;
            let new_names = draw(&seen_words, kind.new_entities, &mut names, &mut rng)?;

            let mut ranks: Vec<usize> = (0..kind.catalogue_size).collect();
            ranks.shuffle(&mut rng);
            let entry = |text: &String, rank: usize| CatalogueEntry {
                text: text.clone(),
                popularity: popularity_for_rank(rank),
            };
            let seen: Vec<CatalogueEntry> = seen_names.iter().zip(&ranks).map(|(t, &r)| entry(t, r)).collect();
            let tail: Vec<CatalogueEntry> = tail_names
                .iter()
                .zip(&ranks[n_seen..])
                .map(|(t, &r)| entry(t, r))
                .collect();
            let fusion_only: Vec<CatalogueEntry> = fusion_names
                .iter()
                .zip(&ranks[n_seen + n_tail..])
                .map(|(t, &r)| entry(t, r))
                .collect();
            let new: Vec<CatalogueEntry> = new_names
                .iter()
                .map(|t| entry(t, rng.random_range(0..kind.catalogue_size)))
                .collect();
            let mut all = seen.clone();
            all.extend(fusion_only.iter().cloned());
            all.extend(tail.iter().cloned());
            partitions.push(EntityPartition {
                entity_type: kind.name.clone(),
                catalogue: Catalogue::new(kind.name.clone(), all)?,
                seen,
                fusion_only,
                tail,
                new,
            });
        }
        Ok(World {
            partitions,
            slot_templates: slot_templates(&config.types)
                .iter()
                .map(|s| Template::parse(s))
                .collect::<Result<_>>()?,
            carrier_templates: CARRIERS.iter().map(|s| Template::parse(s)).collect::<Result<_>>()?,
        })
    }

    pub fn templates(&self) -> Vec<Template> {
        self.slot_templates
            .iter()
            .chain(&self.carrier_templates)
            .cloned()
            .collect()
    }

    pub fn partition(&self, entity_type: &str) -> Option<&EntityPartition> {
        self.partitions.iter().find(|p| p.entity_type == entity_type)
    }

    pub fn catalogues(&self) -> Vec<Catalogue> {
        self.partitions.iter().map(|p| p.catalogue.clone()).collect()
    }

    pub fn seen_catalogues(&self) -> Result<Vec<Catalogue>> {
        self.partitions.iter().map(|p| p.seen_catalogue()).collect()
    }

    pub fn fusion_catalogues(&self) -> Result<Vec<Catalogue>> {
        self.partitions.iter().map(|p| p.fusion_catalogue()).collect()
    }

    pub fn tail_catalogues(&self) -> Result<Vec<Catalogue>> {
        self.partitions.iter().map(|p| p.tail_catalogue()).collect()
    }

    pub fn new_catalogues(&self) -> Result<Vec<Catalogue>> {
        self.partitions.iter().map(|p| p.new_catalogue()).collect()
    }
}
