//! Cloze templates, vocabulary and corpus rendering.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};

pub const EOS_TOKEN: &str = "<eos>";

/// Surface language. The two languages share semantics but no tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lang {
    L1,
    L2,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::L1 => Lang::L2,
            Lang::L2 => Lang::L1,
        }
    }

    pub fn token(self, word: &str) -> String {
        format!("{self}:{word}")
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::L1 => "L1",
            Lang::L2 => "L2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    CitizenOf,
    NotCitizenOf,
    Speaks,
    UsesCurrency,
    HomeCapital,
    Occupation,
    OfficialLanguage,
    Currency,
    Capital,
}

impl Relation {
    pub const PERSON: [Relation; 6] = [
        Relation::CitizenOf,
        Relation::NotCitizenOf,
        Relation::Speaks,
        Relation::UsesCurrency,
        Relation::HomeCapital,
        Relation::Occupation,
    ];
    pub const COUNTRY: [Relation; 3] = [Relation::OfficialLanguage, Relation::Currency, Relation::Capital];

    pub fn name(self) -> &'static str {
        match self {
            Relation::CitizenOf => "citizen_of",
            Relation::NotCitizenOf => "not_citizen_of",
            Relation::Speaks => "speaks",
            Relation::UsesCurrency => "uses_currency",
            Relation::HomeCapital => "home_capital",
            Relation::Occupation => "occupation",
            Relation::OfficialLanguage => "official_language",
            Relation::Currency => "currency",
            Relation::Capital => "capital",
        }
    }

    pub fn has_person_subject(self) -> bool {
        Self::PERSON.contains(&self)
    }
}

/// `before ++ [subject] ++ after`; the answer follows the last token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub before: &'static [&'static str],
    pub after: &'static [&'static str],
}

const fn t(id: &'static str, before: &'static [&'static str], after: &'static [&'static str]) -> Template {
    Template { id, before, after }
}

/// Templates per relation. `T0` puts the subject last, `T1` first.
pub fn fact_templates(relation: Relation) -> &'static [Template] {
    match relation {
        Relation::CitizenOf => {
            const T: &[Template] = &[t("T0", &["citizenship", "of"], &[]), t("T1", &[], &["is", "citizen", "of"])];
            T
        }
        Relation::NotCitizenOf => {
            const T: &[Template] = &[t("NEG", &[], &["is", "not", "citizen", "of"])];
            T
        }
        Relation::Speaks => {
            const T: &[Template] = &[t("T0", &["language", "of"], &[]), t("T1", &[], &["speaks"])];
            T
        }
        Relation::UsesCurrency => {
            const T: &[Template] = &[t("T0", &["currency", "of"], &[]), t("T1", &[], &["pays", "with"])];
            T
        }
        Relation::HomeCapital => {
            const T: &[Template] = &[t("T0", &["home", "capital", "of"], &[]), t("T1", &[], &["lives", "in"])];
            T
        }
        Relation::Occupation => {
            const T: &[Template] = &[t("T0", &["job", "of"], &[]), t("T1", &[], &["works", "as"])];
            T
        }
        Relation::OfficialLanguage => {
            const T: &[Template] = &[t("T0", &["official", "language", "of"], &[]), t("T1", &[], &["language", "is"])];
            T
        }
        Relation::Currency => {
            const T: &[Template] = &[t("T0", &["money", "of"], &[]), t("T1", &[], &["money", "is"])];
            T
        }
        Relation::Capital => {
            const T: &[Template] = &[t("T0", &["capital", "of"], &[]), t("T1", &[], &["capital", "is"])];
            T
        }
    }
}

pub(crate) fn template(relation: Relation, id: &str) -> Result<Template> {
    fact_templates(relation)
        .iter()
        .copied()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::InvalidInput(format!("relation {} has no template {id}", relation.name())))
}

/// A rendered query with the index of the (last) subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Rendered {
    pub query: Vec<String>,
    pub subject_pos: usize,
    pub answer: Vec<String>,
}

pub(crate) fn render(world: &World, relation: Relation, subject: usize, alias: bool, tpl: Template, lang: Lang) -> Result<Rendered> {
    let subject_word = if relation.has_person_subject() {
        let p = world.person(subject)?;
        if alias {
            p.alias.clone()
        } else {
            p.name.clone()
        }
    } else {
        world
            .countries
            .get(subject)
            .ok_or_else(|| Error::InvalidInput(format!("no country with index {subject}")))?
            .name
            .clone()
    };
    let mut query: Vec<String> = tpl.before.iter().map(|w| lang.token(w)).collect();
    let subject_pos = query.len();
    query.push(lang.token(&subject_word));
    query.extend(tpl.after.iter().map(|w| lang.token(w)));
    let answer = vec![lang.token(&world.answer(relation, subject)?)];
    Ok(Rendered {
        query,
        subject_pos,
        answer,
    })
}

/// Fixed token inventory: EOS, then per language the template words and all
/// entity surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(Error::InvalidInput(format!("vocabulary must start with {EOS_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build(world: &World, langs: &[Lang]) -> Vocab {
        let mut tokens = vec![EOS_TOKEN.to_string()];
        let mut langs = langs.to_vec();
        langs.sort();
        langs.dedup();
        for lang in langs {
            let words: BTreeSet<&str> = Relation::PERSON
                .iter()
                .chain(&Relation::COUNTRY)
                .flat_map(|r| fact_templates(*r))
                .flat_map(|t| t.before.iter().chain(t.after))
                .copied()
                .collect();
            tokens.extend(words.into_iter().map(|w| lang.token(w)));
            for p in &world.persons {
                tokens.push(lang.token(&p.name));
                tokens.push(lang.token(&p.alias));
            }
            for c in &world.countries {
                for w in [&c.name, &c.official_language, &c.currency, &c.capital] {
                    tokens.push(lang.token(w));
                }
            }
            tokens.extend(world.occupations.iter().map(|o| lang.token(o)));
        }
        Vocab::try_from(tokens).expect("entity names are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("token `{token}` is not in the vocabulary")))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Encodes whitespace-separated tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).ok_or(Error::UnknownToken(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub fact_id: String,
    pub template: String,
    pub language: Lang,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub subject_pos: usize,
    /// Completion that must not appear (negated templates only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avoid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCorpus {
    pub vocab: Vocab,
    pub records: Vec<CorpusRecord>,
}

fn fact_id(world: &World, relation: Relation, subject: usize, alias: bool) -> String {
    let name = if relation.has_person_subject() {
        world.persons[subject].name.as_str()
    } else {
        world.countries[subject].name.as_str()
    };
    format!("{}:{name}{}", relation.name(), if alias { "@alias" } else { "" })
}

/// Every template of one fact in every requested language.
pub fn render_fact(
    world: &World,
    vocab: &Vocab,
    relation: Relation,
    subject: usize,
    alias: bool,
    langs: &[Lang],
) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for &lang in langs {
        for &tpl in fact_templates(relation) {
            let r = render(world, relation, subject, alias, tpl, lang)?;
            let avoid = if relation == Relation::NotCitizenOf {
                let affirmative = lang.token(&world.answer(Relation::CitizenOf, subject)?);
                Some(vec![vocab.id(&affirmative)?])
            } else {
                None
            };
            out.push(CorpusRecord {
                fact_id: fact_id(world, relation, subject, alias),
                template: tpl.id.to_string(),
                language: lang,
                query: vocab.encode_tokens(&r.query)?,
                answer: vocab.encode_tokens(&r.answer)?,
                subject_pos: r.subject_pos,
                avoid,
            });
        }
    }
    Ok(out)
}

/// Renders every base and derived fact, plus alias-subject citizenship
/// facts, in each language and template.
pub fn render_corpus(world: &World, langs: &[Lang], max_vocab: Option<usize>) -> Result<FactCorpus> {
    if langs.is_empty() {
        return Err(Error::InvalidConfig("at least one language is required".into()));
    }
    let vocab = Vocab::build(world, langs);
    if let Some(max) = max_vocab {
        if vocab.len() > max {
            return Err(Error::InvalidConfig(format!(
                "corpus needs {} tokens but the vocabulary is capped at {max}",
                vocab.len()
            )));
        }
    }
    let mut records = Vec::new();
    for p in 0..world.persons.len() {
        for r in Relation::PERSON {
            records.extend(render_fact(world, &vocab, r, p, false, langs)?);
        }
        records.extend(render_fact(world, &vocab, Relation::CitizenOf, p, true, langs)?);
    }
    for c in 0..world.countries.len() {
        for r in Relation::COUNTRY {
            records.extend(render_fact(world, &vocab, r, c, false, langs)?);
        }
    }
    Ok(FactCorpus { vocab, records })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    fact_id: String,
    template: String,
    language: Lang,
    query: String,
    answer: String,
    subject_pos: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    avoid: Option<String>,
}

impl FactCorpus {
    /// One JSON object per record with tokens written as text.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = CorpusLine {
                fact_id: r.fact_id.clone(),
                template: r.template.clone(),
                language: r.language,
                query: self.vocab.decode(&r.query)?,
                answer: self.vocab.decode(&r.answer)?,
                subject_pos: r.subject_pos,
                avoid: r.avoid.as_ref().map(|a| self.vocab.decode(a)).transpose()?,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(vocab: Vocab, text: &str, path: &str) -> Result<FactCorpus> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg,
            };
            let l: CorpusLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let enc = |s: &str| vocab.encode(s).map_err(|e| parse(e.to_string()));
            records.push(CorpusRecord {
                fact_id: l.fact_id,
                template: l.template,
                language: l.language,
                query: enc(&l.query)?,
                answer: enc(&l.answer)?,
                subject_pos: l.subject_pos,
                avoid: l.avoid.as_deref().map(enc).transpose()?,
            });
        }
        Ok(FactCorpus { vocab, records })
    }
}
