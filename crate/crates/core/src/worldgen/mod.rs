//! Synthetic knowledge worlds.
//!
//! A world holds persons and countries with a handful of base relations.
//! Two rules derive further facts about persons from their citizenship:
//! `speaks(p) = official_language(citizen_of(p))` and
//! `uses_currency(p) = currency(citizen_of(p))`. Facts are rendered through
//! cloze templates into a token corpus, and edits to a person's citizenship
//! are expanded into ripple queries per task category.

mod cases;
mod render;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cases::{
    derive_ripples, load_rippleedits_jsonl, parse_rippleedits_jsonl, sample_edits, save_rippleedits_jsonl,
    to_rippleedits_jsonl, Category, EditCase, EditSpec, Expectation, RipplePair,
};
pub use render::{
    fact_templates, render_corpus, render_fact, CorpusRecord, FactCorpus, Lang, Relation, Template, Vocab, EOS_TOKEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub name: String,
    pub alias: String,
    pub citizen_of: usize,
    /// A country the person is not a citizen of; gold answer of the negated
    /// citizenship query.
    pub not_citizen_of: usize,
    pub occupation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Country {
    pub name: String,
    pub official_language: String,
    pub currency: String,
    pub capital: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub seed: u64,
    pub persons: Vec<Person>,
    pub countries: Vec<Country>,
    pub occupations: Vec<String>,
}

const NUM_OCCUPATIONS: usize = 4;

/// Builds a random world. Every country gets its own language, currency and
/// capital so that rule-derived answers identify the citizenship uniquely.
pub fn generate_world(num_persons: usize, num_countries: usize, seed: u64) -> Result<World> {
    if num_countries < 3 {
        return Err(Error::InvalidConfig(format!(
            "num_countries must be ≥ 3 (an edit needs a new country and a distractor), got {num_countries}"
        )));
    }
    if num_persons == 0 {
        return Err(Error::InvalidConfig("num_persons must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let countries = (0..num_countries)
        .map(|i| Country {
            name: format!("country{i}"),
            official_language: format!("language{i}"),
            currency: format!("currency{i}"),
            capital: format!("city{i}"),
        })
        .collect();
    let occupations: Vec<String> = (0..NUM_OCCUPATIONS).map(|i| format!("job{i}")).collect();
    let persons = (0..num_persons)
        .map(|i| {
            let citizen_of = rng.random_range(0..num_countries);
            let others: Vec<usize> = (0..num_countries).filter(|&c| c != citizen_of).collect();
            let not_citizen_of = *others.choose(&mut rng).expect("at least two other countries");
            Person {
                name: format!("person{i}"),
                alias: format!("alias{i}"),
                citizen_of,
                not_citizen_of,
                occupation: occupations[rng.random_range(0..occupations.len())].clone(),
            }
        })
        .collect();
    Ok(World {
        seed,
        persons,
        countries,
        occupations,
    })
}

impl World {
    pub fn person(&self, p: usize) -> Result<&Person> {
        self.persons
            .get(p)
            .ok_or_else(|| Error::InvalidInput(format!("no person with index {p}")))
    }

    fn country(&self, c: usize) -> Result<&Country> {
        self.countries
            .get(c)
            .ok_or_else(|| Error::InvalidInput(format!("no country with index {c}")))
    }

    /// Surface answer of `relation` for subject index `subject` (a person for
    /// person relations, a country otherwise), closed under the rules.
    pub fn answer(&self, relation: Relation, subject: usize) -> Result<String> {
        Ok(match relation {
            Relation::CitizenOf => self.country(self.person(subject)?.citizen_of)?.name.clone(),
            Relation::NotCitizenOf => self.country(self.person(subject)?.not_citizen_of)?.name.clone(),
            Relation::Speaks => self.country(self.person(subject)?.citizen_of)?.official_language.clone(),
            Relation::UsesCurrency => self.country(self.person(subject)?.citizen_of)?.currency.clone(),
            Relation::HomeCapital => self.country(self.person(subject)?.citizen_of)?.capital.clone(),
            Relation::Occupation => self.person(subject)?.occupation.clone(),
            Relation::OfficialLanguage => self.country(subject)?.official_language.clone(),
            Relation::Currency => self.country(subject)?.currency.clone(),
            Relation::Capital => self.country(subject)?.capital.clone(),
        })
    }

    /// The world after moving `person` to `country`. The negated-citizenship
    /// fact now points at the former country.
    pub fn with_edit(&self, person: usize, country: usize) -> Result<World> {
        let current = self.person(person)?.citizen_of;
        self.country(country)?;
        if country == current {
            return Err(Error::InvalidInput(format!(
                "{} is already a citizen of {}",
                self.persons[person].name, self.countries[country].name
            )));
        }
        let mut out = self.clone();
        out.persons[person].citizen_of = country;
        out.persons[person].not_citizen_of = current;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<World> {
        let w: World = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        if self.countries.len() < 3 || self.persons.is_empty() {
            return Err(Error::InvalidInput("world needs ≥ 1 person and ≥ 3 countries".into()));
        }
        for p in &self.persons {
            if p.citizen_of >= self.countries.len() || p.not_citizen_of >= self.countries.len() {
                return Err(Error::InvalidInput(format!("{} refers to a missing country", p.name)));
            }
            if p.citizen_of == p.not_citizen_of {
                return Err(Error::InvalidInput(format!("{} is both a citizen and not a citizen", p.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
