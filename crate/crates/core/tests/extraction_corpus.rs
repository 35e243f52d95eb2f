mod common;

use common::{corpus_agreement, corpus_item as item};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ta_audit::extraction::{extract, judge, RefusalLexicon};

#[test]
fn labeled_corpus_agreement() {
    let (hits, total, misses) = corpus_agreement();
    assert_eq!(total, 50);
    assert!(hits >= 48, "{hits}/{total}; misses: {misses:#?}");
}

const TOKENS: &[&str] = &[
    "Answer",
    "answer is",
    ":",
    " ",
    "\n",
    "A",
    "b",
    "Z",
    "(",
    ")",
    "**",
    "option",
    "cannot answer",
    "é",
    "🙂",
    "1,000",
    ".",
    "the",
    "rope",
    "\u{0}",
    "\r\n",
];

#[test]
fn random_inputs_never_panic() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let lexicon = RefusalLexicon::default();
    let mcq = item(vec![
        "a rope".into(),
        "the ladder".into(),
        "Paris".into(),
        "1,000".into(),
    ]);
    let open = item(vec![]);
    for case in 0..10_000 {
        let text = if case % 2 == 0 {
            let len = rng.random_range(0..256);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            (0..rng.random_range(0..40))
                .map(|_| TOKENS[rng.random_range(0..TOKENS.len())])
                .collect()
        };
        for it in [&mcq, &open] {
            let e = extract(&text, it, &lexicon);
            let _ = judge(&e, it);
        }
    }
}
