//! Edit cases, ripple derivation and the JSONL case format.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, template, Lang, Relation};
use super::World;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    LG,
    CI,
    CII,
    SA,
    PV,
    RS,
    NEG,
    XLING,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::LG,
        Category::CI,
        Category::CII,
        Category::SA,
        Category::PV,
        Category::RS,
        Category::NEG,
        Category::XLING,
    ];

    pub fn expectation(self) -> Expectation {
        match self {
            Category::PV | Category::RS => Expectation::ShouldPreserve,
            Category::NEG => Expectation::ShouldAvoid,
            _ => Expectation::ShouldChange,
        }
    }

    /// Negative-control categories whose answers the edit must not touch.
    pub fn is_control(self) -> bool {
        self.expectation() == Expectation::ShouldPreserve
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    ShouldChange,
    ShouldPreserve,
    ShouldAvoid,
}

/// The edited fact: `query` currently answered by `old_answer`, to be
/// answered by `new_answer`. Text fields hold whitespace-separated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub query: String,
    pub old_answer: String,
    pub new_answer: String,
    /// Index of the last subject token in `query`; the last token if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_pos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RipplePair {
    #[serde(default)]
    pub id: String,
    pub query: String,
    /// Gold answer after the edit.
    pub answer: String,
    /// Gold answer before the edit, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_answer: Option<String>,
    pub category: Category,
    /// Completion that must not be produced (negation pairs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forbidden: Option<String>,
}

impl RipplePair {
    pub fn expectation(&self) -> Expectation {
        self.category.expectation()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCase {
    #[serde(default)]
    pub case_id: String,
    pub edit: EditSpec,
    pub ripples: Vec<RipplePair>,
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Picks `n` distinct persons and, for each, a new country different from
/// both the current citizenship and the negated-query distractor.
pub fn sample_edits(world: &World, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n > world.persons.len() {
        return Err(Error::InvalidConfig(format!(
            "{n} edits requested but the world has only {} persons",
            world.persons.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut persons: Vec<usize> = (0..world.persons.len()).collect();
    persons.shuffle(&mut rng);
    persons.truncate(n);
    Ok(persons
        .into_iter()
        .map(|p| {
            let person = &world.persons[p];
            let options: Vec<usize> = (0..world.countries.len())
                .filter(|&c| c != person.citizen_of && c != person.not_citizen_of)
                .collect();
            (p, options[rng.random_range(0..options.len())])
        })
        .collect())
}

/// Expands a citizenship edit into ripple queries, with gold answers read
/// from the rule closure of the edited world. Queries use L1; cross-lingual
/// pairs repeat the edit query and every should-change pair in L2.
pub fn derive_ripples(world: &World, person: usize, new_country: usize) -> Result<EditCase> {
    let edited = world.with_edit(person, new_country)?;
    let l1 = Lang::L1;
    let x = render(world, Relation::CitizenOf, person, false, template(Relation::CitizenOf, "T0")?, l1)?;
    let x_new = render(&edited, Relation::CitizenOf, person, false, template(Relation::CitizenOf, "T0")?, l1)?;
    let case_id = format!("edit-{}-{}", world.persons[person].name, world.countries[new_country].name);

    let old_country = world.persons[person].citizen_of;
    let other = (1..world.persons.len())
        .map(|k| (person + k) % world.persons.len())
        .find(|&q| ![old_country, new_country].contains(&world.persons[q].citizen_of))
        .or_else(|| (1..world.persons.len()).map(|k| (person + k) % world.persons.len()).next())
        .ok_or_else(|| Error::InvalidInput("relation-specificity pairs need a second person".into()))?;

    // (category, relation, subject, alias, template)
    let specs: [(Category, Relation, usize, bool, &str); 8] = [
        (Category::LG, Relation::CitizenOf, person, false, "T1"),
        (Category::CI, Relation::Speaks, person, false, "T0"),
        (Category::CI, Relation::UsesCurrency, person, false, "T0"),
        (Category::CII, Relation::HomeCapital, person, false, "T0"),
        (Category::SA, Relation::CitizenOf, person, true, "T0"),
        (Category::PV, Relation::Occupation, person, false, "T0"),
        (Category::RS, Relation::CitizenOf, other, false, "T0"),
        (Category::NEG, Relation::NotCitizenOf, person, false, "NEG"),
    ];
    let mut ripples = Vec::new();
    let mut xling = vec![(Relation::CitizenOf, person, false, "T0")];
    for (cat, rel, subj, alias, tpl) in specs {
        let tpl = template(rel, tpl)?;
        let pre = render(world, rel, subj, alias, tpl, l1)?;
        let post = render(&edited, rel, subj, alias, tpl, l1)?;
        let subj_name = if rel.has_person_subject() { &world.persons[subj].name } else { &world.countries[subj].name };
        ripples.push(RipplePair {
            id: format!(
                "{case_id}/{cat}/{}{}/{}/{subj_name}",
                rel.name(),
                if alias { "@alias" } else { "" },
                tpl.id
            ),
            query: join(&post.query),
            answer: join(&post.answer),
            old_answer: Some(join(&pre.answer)),
            category: cat,
            forbidden: (cat == Category::NEG).then(|| join(&x_new.answer)),
        });
        if cat.expectation() == Expectation::ShouldChange {
            xling.push((rel, subj, alias, tpl.id));
        }
    }
    let l2 = l1.other();
    for (rel, subj, alias, tpl) in xling {
        let tpl = template(rel, tpl)?;
        let pre = render(world, rel, subj, alias, tpl, l2)?;
        let post = render(&edited, rel, subj, alias, tpl, l2)?;
        ripples.push(RipplePair {
            id: format!(
                "{case_id}/XLING/{}{}/{}/{}",
                rel.name(),
                if alias { "@alias" } else { "" },
                tpl.id,
                world.persons[subj].name
            ),
            query: join(&post.query),
            answer: join(&post.answer),
            old_answer: Some(join(&pre.answer)),
            category: Category::XLING,
            forbidden: None,
        });
    }

    Ok(EditCase {
        case_id,
        edit: EditSpec {
            query: join(&x.query),
            old_answer: join(&x.answer),
            new_answer: join(&x_new.answer),
            subject_pos: Some(x.subject_pos),
        },
        ripples,
    })
}

pub fn to_rippleedits_jsonl(cases: &[EditCase]) -> Result<String> {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_rippleedits_jsonl(cases: &[EditCase], path: &Path) -> Result<()> {
    fs::write(path, to_rippleedits_jsonl(cases)?).map_err(|e| Error::from(e).context(path.display().to_string()))
}

/// Parses one case per non-blank line. Negation pairs without an explicit
/// forbidden answer forbid the edit's new answer.
pub fn parse_rippleedits_jsonl(text: &str, path: &str) -> Result<Vec<EditCase>> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let mut case: EditCase = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if case.edit.query.trim().is_empty() || case.edit.new_answer.trim().is_empty() {
            return Err(err("edit query and new_answer must be non-empty".into()));
        }
        if case.edit.new_answer == case.edit.old_answer {
            return Err(err("new_answer equals old_answer".into()));
        }
        if case.case_id.is_empty() {
            case.case_id = format!("case{}", i + 1);
        }
        for (k, r) in case.ripples.iter_mut().enumerate() {
            if r.id.is_empty() {
                r.id = format!("{}/{}/{k}", case.case_id, r.category);
            }
            if r.category == Category::NEG && r.forbidden.is_none() {
                r.forbidden = Some(case.edit.new_answer.clone());
            }
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn load_rippleedits_jsonl(path: &Path) -> Result<Vec<EditCase>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    parse_rippleedits_jsonl(&text, &path.display().to_string())
}
