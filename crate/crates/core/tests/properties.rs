//! Cross-module invariants checked over generated inputs.

use proptest::prelude::*;

use recon_core::backend::ScriptedBackend;
use recon_core::condenser::ExtractiveCondenser;
use recon_core::distill::{collect_queries_from, dedup_query_map};
use recon_core::io::write_jsonl;
use recon_core::retrieval::{CorpusIndex, Document};
use recon_core::rl::{compute_rewards, compute_token_mask};
use recon_core::rollout::{RolloutConfig, RolloutEngine, SegmentKind};

fn corpus_strategy() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(0u8..12, 1..10), 1..40).prop_map(|texts| {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, words)| {
                let text = words.iter().map(|w| format!("t{w}")).collect::<Vec<_>>().join(" ");
                Document::new(format!("{i:04}"), "", text)
            })
            .collect()
    })
}

fn emission() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,6}".prop_map(|q| format!("<search> t1 {q} </search>")),
        "[a-z]{1,6}".prop_map(|a| format!("<answer> {a} </answer>")),
        "[a-z ]{0,12}",
        Just("<search> unterminated".to_string()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_is_a_prefix_of_top_k_plus_one(docs in corpus_strategy(), q in prop::collection::vec(0u8..14, 1..4), k in 1usize..8) {
        let index = CorpusIndex::from_documents(docs).unwrap();
        let query = q.iter().map(|w| format!("t{w}")).collect::<Vec<_>>().join(" ");
        let small: Vec<String> = index.retrieve(&query, k).unwrap().iter().map(|h| h.document.id.clone()).collect();
        let big: Vec<String> = index.retrieve(&query, k + 1).unwrap().iter().map(|h| h.document.id.clone()).collect();
        prop_assert!(big.starts_with(&small));
        let scores: Vec<f64> = index.retrieve(&query, k).unwrap().iter().map(|h| h.score).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ingest_and_reload_rank_identically(docs in corpus_strategy(), q in 0u8..12) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        write_jsonl(&corpus, &docs).unwrap();
        let a = CorpusIndex::ingest(&corpus).unwrap();
        let saved = dir.path().join("index.json");
        a.save(&saved).unwrap();
        let b = CorpusIndex::load(&saved).unwrap();
        let c = CorpusIndex::from_documents(docs.iter().rev().cloned()).unwrap();
        let query = format!("t{q}");
        let ids = |i: &CorpusIndex| i.retrieve(&query, 5).unwrap().iter().map(|h| (h.document.id.clone(), h.score)).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
        prop_assert_eq!(ids(&a), ids(&c));
    }

    #[test]
    fn rollout_invariants(script in prop::collection::vec(emission(), 0..8), budget in 1usize..6) {
        let index = CorpusIndex::from_documents([
            Document::new("a", "", "t1 t2 alpha. beta t1."),
            Document::new("b", "", "t3 gamma."),
        ]).unwrap();
        let policy = ScriptedBackend::uniform(script);
        let condenser = ExtractiveCondenser::new(1);
        let config = RolloutConfig { budget, ..RolloutConfig::default() };
        let traj = RolloutEngine::new(&policy, &index, &condenser, config).run_rollout("q");

        prop_assert!(traj.turns_used <= budget);
        prop_assert!(traj.error.is_none());
        // injected segments always follow a policy segment
        for (i, s) in traj.segments.iter().enumerate() {
            if !s.kind.is_policy() {
                prop_assert!(i > 0 && traj.segments[i - 1].kind.is_policy());
            }
        }
        let policy_segments = traj.segments.iter().filter(|s| s.kind.is_policy()).count();
        prop_assert_eq!(policy_segments, traj.turns_used + usize::from(traj.final_answer.is_some()));
        prop_assert_eq!(traj.search_count() + traj.segments.iter().filter(|s| s.kind == SegmentKind::Rethink).count(), traj.turns_used);

        if traj.policy_tokens() > 0 {
            let mask = compute_token_mask(&traj).unwrap();
            prop_assert_eq!(mask.len(), traj.total_tokens());
            prop_assert_eq!(mask.iter().map(|&m| m as usize).sum::<usize>(), traj.policy_tokens());
            let n = mask.len();
            let r = compute_rewards(&traj, &["x"], &vec![0.0; n], &vec![0.0; n], 0.001).unwrap();
            for (m, v) in mask.iter().zip(&r) {
                if *m == 0 { prop_assert_eq!(*v, 0.0); }
            }
        }
    }

    #[test]
    fn dedup_is_idempotent(lists in prop::collection::vec(prop::collection::vec(" ?[ab]{1,2} ?", 0..6), 1..4)) {
        let map: recon_core::distill::QueryMap = lists.into_iter().enumerate().map(|(i, l)| (format!("q{i}"), l)).collect();
        let once = dedup_query_map(map);
        prop_assert_eq!(dedup_query_map(once.clone()), once.clone());
        for qs in once.values() {
            let mut sorted = qs.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), qs.len());
        }
        prop_assert!(collect_queries_from(&[]).is_empty());
    }
}
