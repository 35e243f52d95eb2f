mod common;

use common::{mcq_item, open_item, wrong_at};
use proptest::prelude::*;
use ta_audit::backends::{scripted_oracle, Behavior, Client, Script};
use ta_audit::corpus::{Dataset, Modality, QAItem};
use ta_audit::protocols::{run_audit, run_protocol, Assignment, AuditOptions, EvalContext, Label, ProtocolSpec};

fn mcq_client(item: &QAItem, pattern: &[bool]) -> Client {
    let mut script = Script::new();
    for (k, ok) in pattern.iter().enumerate() {
        let b = if *ok { Behavior::AnswerGold } else { wrong_at(item, k) };
        script.insert_trial(item.id.clone(), k, b);
    }
    let (mut spec, oracle) = scripted_oracle("s", script);
    spec.rate_limit = 1e6;
    Client::new(spec, Box::new(oracle), None)
}

fn open_client(item: &QAItem, pattern: &[bool]) -> Client {
    let mut script = Script::new();
    for (k, ok) in pattern.iter().enumerate() {
        let b = Behavior::AnswerText(if *ok { "3".into() } else { "4".into() });
        script.insert_trial(item.id.clone(), k, b);
    }
    let (mut spec, oracle) = scripted_oracle("s", script);
    spec.rate_limit = 1e6;
    Client::new(spec, Box::new(oracle), None)
}

fn label(item: &QAItem, client: &Client, spec: ProtocolSpec) -> (Label, usize) {
    let d = run_protocol(item, client, &spec, &EvalContext::default()).unwrap();
    (d.label, d.n_correct)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn circular_is_monotone_in_permutations(pattern in proptest::collection::vec(any::<bool>(), 5), gold in 0usize..5) {
        let item = mcq_item("m", 5, gold, Modality::Video);
        let client = mcq_client(&item, &pattern);
        for n in 2..=5 {
            let (wide, _) = label(&item, &client, ProtocolSpec::circular(n));
            let (narrow, _) = label(&item, &client, ProtocolSpec::circular(n - 1));
            if wide == Label::TA {
                prop_assert_eq!(narrow, Label::TA);
            }
            prop_assert_eq!(wide == Label::TA, pattern[..n].iter().all(|b| *b));
        }
        let (single, _) = label(&item, &client, ProtocolSpec::single());
        let (circ1, _) = label(&item, &client, ProtocolSpec::circular(1));
        prop_assert_eq!(single, circ1);
    }

    #[test]
    fn pass_at_k_is_monotone_in_k(pattern in proptest::collection::vec(any::<bool>(), 12)) {
        let item = open_item("o", "3");
        let client = open_client(&item, &pattern);
        let mut was_ta = false;
        for k in 1..=12 {
            let (l, n_correct) = label(&item, &client, ProtocolSpec::pass_at_k(k));
            prop_assert_eq!(n_correct, pattern[..k].iter().filter(|b| **b).count());
            if was_ta {
                prop_assert_eq!(l, Label::TA);
            }
            was_ta = l == Label::TA;
        }
    }

    #[test]
    fn early_exit_matches_exhaustive(pattern in proptest::collection::vec(any::<bool>(), 4), gold in 0usize..4) {
        let item = mcq_item("e", 4, gold, Modality::Image);
        let client = mcq_client(&item, &pattern);
        let (fast, _) = label(&item, &client, ProtocolSpec::circular(4));
        let (full, full_correct) = label(&item, &client, ProtocolSpec::circular(4).with_all_trials(true));
        prop_assert_eq!(fast, full);
        prop_assert_eq!(full_correct, pattern.iter().filter(|b| **b).count());
    }
}

#[test]
fn audit_is_deterministic_across_worker_counts() {
    let items: Vec<_> = (0..60)
        .map(|i| mcq_item(&format!("d{i}"), 4, i % 4, Modality::Video))
        .collect();
    let mut script = Script::new().otherwise(Behavior::AnswerGold);
    for (i, it) in items.iter().enumerate() {
        if i % 3 == 0 {
            script.insert_trial(it.id.clone(), 1, wrong_at(it, 1));
        }
        if i % 7 == 0 {
            script.insert_item(it.id.clone(), Behavior::Garbage);
        }
    }
    let ds = Dataset::new("det", items).unwrap();
    let run = |workers: usize| {
        let (mut spec, oracle) = scripted_oracle("s", script.clone());
        spec.rate_limit = 10_000.0;
        let client = Client::new(spec, Box::new(oracle), None);
        let opts = AuditOptions {
            workers,
            ..AuditOptions::default()
        };
        let stores = run_audit(&ds, &[(&client, Assignment::uniform(ProtocolSpec::circular(3)))], &opts).unwrap();
        // serialized form drops latency and cache flags
        let lines: Vec<String> = stores[0]
            .decisions
            .iter()
            .map(|d| serde_json::to_string(d).unwrap())
            .collect();
        (stores, lines)
    };
    let (one, one_lines) = run(1);
    let (_, many_lines) = run(8);
    assert_eq!(one_lines, many_lines);
    let ids: Vec<&str> = one[0].decisions.iter().map(|d| d.item_id.as_str()).collect();
    assert_eq!(ids, ds.ids().collect::<Vec<_>>());
}
