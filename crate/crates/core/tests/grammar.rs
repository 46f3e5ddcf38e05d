use tlqa_core::decompose::{decompose_rules, parse_llm_decomposition, template_library, Lexicon};
use tlqa_core::synth::{grammar_questions, synth_vocabulary};

#[test]
fn rule_decomposer_recovers_grammar_specs() {
    let lexicon = Lexicon::with_default_synonyms(&synth_vocabulary());
    let cases = grammar_questions(&lexicon, 100, 11);
    assert_eq!(cases.len(), 600);
    let mut failures = Vec::new();
    for c in &cases {
        match decompose_rules(&c.question, &lexicon) {
            Ok(d) if d.category == c.category && d.specs == c.specs => {}
            Ok(d) => failures.push(format!("{}\n  got {:?} {:?}\n  want {:?} {:?}", c.question, d.category, d.specs, c.category, c.specs)),
            Err(e) => failures.push(format!("{}: {e}", c.question)),
        }
    }
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.iter().take(15).cloned().collect::<Vec<_>>().join("\n"));
}

#[test]
fn rule_decomposer_agrees_with_every_template() {
    let lexicon = Lexicon::with_default_synonyms(&synth_vocabulary());
    for t in template_library() {
        let d = decompose_rules(&t.question, &lexicon).unwrap();
        assert_eq!(d.category, t.category, "{}", t.question);
        let marked = parse_llm_decomposition(&t.decomposition, &t.question, &lexicon).unwrap();
        assert_eq!(d.specs, marked.specs, "{}", t.question);
    }
}

