use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

#[test]
fn single_person_world_counts() {
    let w = generate_world(1, 3, 4).unwrap();
    assert_eq!(w.persons.len(), 1);
    let vocab = Vocab::build(&w, &[Lang::L1]);
    let corpus = render_corpus(&w, &[Lang::L1], None).unwrap();
    for rel in [Relation::CitizenOf, Relation::Speaks, Relation::UsesCurrency] {
        let facts: BTreeSet<&str> = corpus
            .records
            .iter()
            .filter(|r| r.fact_id == format!("{}:person0", rel.name()))
            .map(|r| r.fact_id.as_str())
            .collect();
        assert_eq!(facts.len(), 1, "{rel:?}");
    }
    assert!(vocab.len() > 1);
}

#[test]
fn too_few_countries_is_rejected() {
    assert!(matches!(generate_world(5, 2, 0), Err(Error::InvalidConfig(_))));
    assert!(generate_world(0, 3, 0).is_err());
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_world(20, 5, 9).unwrap(), generate_world(20, 5, 9).unwrap());
    assert_ne!(generate_world(20, 5, 9).unwrap(), generate_world(20, 5, 10).unwrap());
}

#[test]
fn speaks_follows_citizenship() {
    let w = generate_world(30, 6, 1).unwrap();
    for p in 0..30 {
        let c = w.persons[p].citizen_of;
        assert_eq!(w.answer(Relation::Speaks, p).unwrap(), w.countries[c].official_language);
        assert_eq!(w.answer(Relation::UsesCurrency, p).unwrap(), w.countries[c].currency);
        assert_ne!(w.persons[p].not_citizen_of, c);
    }
}

#[test]
fn one_fact_two_templates_two_languages_gives_four_records() {
    let w = generate_world(2, 3, 0).unwrap();
    let langs = [Lang::L1, Lang::L2];
    let vocab = Vocab::build(&w, &langs);
    let recs = render_fact(&w, &vocab, Relation::Speaks, 0, false, &langs).unwrap();
    assert_eq!(recs.len(), 4);
    let queries: BTreeSet<_> = recs.iter().map(|r| r.query.clone()).collect();
    assert_eq!(queries.len(), 4);
}

#[test]
fn languages_share_no_tokens() {
    let w = generate_world(3, 4, 0).unwrap();
    let langs = [Lang::L1, Lang::L2];
    let vocab = Vocab::build(&w, &langs);
    let recs = render_fact(&w, &vocab, Relation::CitizenOf, 1, false, &langs).unwrap();
    let tokens = |lang: Lang| -> BTreeSet<usize> {
        recs.iter()
            .filter(|r| r.language == lang)
            .flat_map(|r| r.query.iter().chain(&r.answer).copied())
            .collect()
    };
    assert!(tokens(Lang::L1).is_disjoint(&tokens(Lang::L2)));
}

#[test]
fn negated_template_avoids_the_affirmative_answer() {
    let w = generate_world(4, 4, 2).unwrap();
    let corpus = render_corpus(&w, &[Lang::L1, Lang::L2], None).unwrap();
    let mut seen = 0;
    for r in corpus.records.iter().filter(|r| r.template == "NEG") {
        let person: usize = r.fact_id.trim_start_matches("not_citizen_of:person").parse().unwrap();
        let affirmative = corpus
            .records
            .iter()
            .find(|a| a.fact_id == format!("citizen_of:person{person}") && a.language == r.language)
            .unwrap();
        assert_eq!(r.avoid.as_ref().unwrap(), &affirmative.answer);
        assert_ne!(r.answer, affirmative.answer);
        seen += 1;
    }
    assert_eq!(seen, 8);
}

#[test]
fn corpus_queries_are_unique_and_in_vocab() {
    let w = generate_world(10, 5, 3).unwrap();
    let corpus = render_corpus(&w, &[Lang::L1, Lang::L2], None).unwrap();
    let keys: BTreeSet<_> = corpus
        .records
        .iter()
        .map(|r| (r.fact_id.clone(), r.template.clone(), r.language))
        .collect();
    assert_eq!(keys.len(), corpus.records.len());
    let queries: BTreeSet<_> = corpus.records.iter().map(|r| r.query.clone()).collect();
    assert_eq!(queries.len(), corpus.records.len());
    assert!(corpus.records.iter().all(|r| r.query.iter().chain(&r.answer).all(|&t| t < corpus.vocab.len())));
}

#[test]
fn vocab_overflow_is_an_error() {
    let w = generate_world(10, 5, 3).unwrap();
    assert!(matches!(render_corpus(&w, &[Lang::L1], Some(10)), Err(Error::InvalidConfig(_))));
}

#[test]
fn corpus_jsonl_round_trips() {
    let w = generate_world(3, 3, 3).unwrap();
    let corpus = render_corpus(&w, &[Lang::L1, Lang::L2], None).unwrap();
    let text = corpus.to_jsonl().unwrap();
    let back = FactCorpus::from_jsonl(corpus.vocab.clone(), &text, "corpus.jsonl").unwrap();
    assert_eq!(back, corpus);
    let vocab_json = serde_json::to_string(&corpus.vocab).unwrap();
    let v: Vocab = serde_json::from_str(&vocab_json).unwrap();
    assert_eq!(v, corpus.vocab);
}

fn world_and_edit() -> (World, EditCase, usize, usize) {
    let w = generate_world(12, 6, 5).unwrap();
    let p = 0;
    let new = (0..6).find(|&c| c != w.persons[p].citizen_of && c != w.persons[p].not_citizen_of).unwrap();
    let case = derive_ripples(&w, p, new).unwrap();
    (w, case, p, new)
}

#[test]
fn citizenship_edit_ripples_to_language_and_currency() {
    let (w, case, _, new) = world_and_edit();
    let l1 = |s: &str| Lang::L1.token(s);
    let speaks = case.ripples.iter().find(|r| r.id.contains("/CI/speaks")).unwrap();
    assert_eq!(speaks.answer, l1(&w.countries[new].official_language));
    let currency = case.ripples.iter().find(|r| r.id.contains("/CI/uses_currency")).unwrap();
    assert_eq!(currency.answer, l1(&w.countries[new].currency));
    assert_eq!(case.edit.new_answer, l1(&w.countries[new].name));
    assert_ne!(case.edit.new_answer, case.edit.old_answer);
}

#[test]
fn controls_keep_their_answers() {
    let (_, case, _, _) = world_and_edit();
    for r in case.ripples.iter().filter(|r| r.category.is_control()) {
        assert_eq!(Some(&r.answer), r.old_answer.as_ref(), "{}", r.id);
        assert_eq!(r.expectation(), Expectation::ShouldPreserve);
    }
    let rs = case.ripples.iter().find(|r| r.category == Category::RS).unwrap();
    assert_ne!(rs.answer, case.edit.new_answer);
    assert_ne!(rs.answer, case.edit.old_answer);
}

#[test]
fn negation_pair_forbids_the_new_answer() {
    let (_, case, _, _) = world_and_edit();
    let neg = case.ripples.iter().find(|r| r.category == Category::NEG).unwrap();
    assert_eq!(neg.forbidden.as_ref(), Some(&case.edit.new_answer));
    assert_eq!(neg.answer, case.edit.old_answer);
    assert_eq!(neg.expectation(), Expectation::ShouldAvoid);
}

#[test]
fn every_category_is_present() {
    let (_, case, _, _) = world_and_edit();
    let cats: BTreeSet<Category> = case.ripples.iter().map(|r| r.category).collect();
    assert_eq!(cats, Category::ALL.into_iter().collect());
    let ids: BTreeSet<&str> = case.ripples.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids.len(), case.ripples.len());
    // cross-lingual pairs mirror the edit query plus each should-change pair
    let change = case.ripples.iter().filter(|r| r.expectation() == Expectation::ShouldChange && r.category != Category::XLING).count();
    let xling = case.ripples.iter().filter(|r| r.category == Category::XLING).count();
    assert_eq!(xling, change + 1);
    assert!(case.ripples.iter().filter(|r| r.category == Category::XLING).all(|r| r.query.starts_with("L2:")));
}

#[test]
fn editing_to_the_current_country_is_rejected() {
    let w = generate_world(4, 3, 0).unwrap();
    assert!(derive_ripples(&w, 0, w.persons[0].citizen_of).is_err());
}

#[test]
fn jsonl_parsing_examples() {
    assert!(parse_rippleedits_jsonl("", "e.jsonl").unwrap().is_empty());
    let line = r#"{"edit":{"query":"a b","old_answer":"c","new_answer":"d"},"ripples":[{"query":"e","answer":"f","category":"CI"},{"query":"g","answer":"h","category":"NEG"}]}"#;
    let cases = parse_rippleedits_jsonl(line, "e.jsonl").unwrap();
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0].ripples.len(), 2);
    assert_eq!(cases[0].ripples[1].forbidden.as_deref(), Some("d"));

    let missing = r#"{"edit":{"query":"a","old_answer":"c"},"ripples":[]}"#;
    match parse_rippleedits_jsonl(missing, "e.jsonl") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 1);
            assert!(msg.contains("new_answer"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    let unknown = r#"{"edit":{"query":"a","old_answer":"c","new_answer":"d"},"ripples":[{"query":"e","answer":"f","category":"ZZ"}]}"#;
    assert!(matches!(parse_rippleedits_jsonl(unknown, "e.jsonl"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_rippleedits_jsonl("\n{not json", "e.jsonl"), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn world_json_round_trips() {
    let w = generate_world(5, 4, 8).unwrap();
    assert_eq!(World::from_json(&w.to_json().unwrap()).unwrap(), w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn derived_cases_round_trip_through_jsonl(seed in 0u64..10_000, n in 2usize..8) {
        let w = generate_world(10, 5, seed).unwrap();
        let cases: Vec<EditCase> = sample_edits(&w, n, seed)
            .unwrap()
            .into_iter()
            .map(|(p, c)| derive_ripples(&w, p, c).unwrap())
            .collect();
        let text = to_rippleedits_jsonl(&cases).unwrap();
        prop_assert_eq!(parse_rippleedits_jsonl(&text, "x").unwrap(), cases);
    }

    #[test]
    fn golds_agree_with_the_edited_closure(seed in 0u64..10_000) {
        let w = generate_world(8, 4, seed).unwrap();
        for (p, c) in sample_edits(&w, 4, seed).unwrap() {
            let case = derive_ripples(&w, p, c).unwrap();
            let edited = w.with_edit(p, c).unwrap();
            let corpus = render_corpus(&edited, &[Lang::L1, Lang::L2], None).unwrap();
            for r in &case.ripples {
                let q = corpus.vocab.encode(&r.query).unwrap();
                let rec = corpus.records.iter().find(|rec| rec.query == q).unwrap();
                prop_assert_eq!(corpus.vocab.decode(&rec.answer).unwrap(), r.answer.clone());
            }
            let cats: BTreeSet<Category> = case.ripples.iter().map(|r| r.category).collect();
            prop_assert_eq!(cats.len(), Category::ALL.len());
        }
    }
}
