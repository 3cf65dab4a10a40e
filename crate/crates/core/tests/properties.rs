use proptest::prelude::*;

use sidsearch::corpus::{generate_catalog, ItemId};
use sidsearch::embedder::embed_catalog;
use sidsearch::policy::{build_vocabulary, PolicyConfig, PolicyParams, TokenSequence};
use sidsearch::rewards::{r_sid_acc, total_reward, RewardConfig};
use sidsearch::rgrpo::{compute_advantages, kl_penalty, rank_aware_reward, LogBase};
use sidsearch::sidcodec::{assign_sids, build_codebook, build_trie, SemanticId, SID_LEN};

fn rewards() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..3.0, 1..=8)
}

fn base() -> impl Strategy<Value = LogBase> {
    prop_oneof![Just(LogBase::Natural), Just(LogBase::Two)]
}

proptest! {
    #[test]
    fn rank_aware_is_a_convex_combination(r in rewards(), b in base()) {
        let v = rank_aware_reward(&r, b);
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn promoting_a_better_reward_never_hurts(r in rewards(), b in base(), i in 0usize..8, j in 0usize..8) {
        let (i, j) = (i % r.len(), j % r.len());
        let (hi, lo) = (i.max(j), i.min(j));
        let mut swapped = r.clone();
        if swapped[hi] > swapped[lo] {
            swapped.swap(hi, lo);
        }
        prop_assert!(rank_aware_reward(&swapped, b) >= rank_aware_reward(&r, b) - 1e-12);
    }

    #[test]
    fn advantages_center_and_ignore_shifts(r in prop::collection::vec(-1.0f64..3.0, 2..=16), c in -5.0f64..5.0) {
        let a = compute_advantages(&r);
        if a.iter().any(|x| *x != 0.0) {
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        }
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (x, y) in a.iter().zip(compute_advantages(&shifted)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn sid_accuracy_is_symmetric_and_bounded(p in prop::array::uniform4(0u32..4), t in prop::array::uniform4(0u32..4), gated: bool) {
        let w = RewardConfig::default().w;
        let (p, t) = (SemanticId(p), SemanticId(t));
        let a = r_sid_acc(&p, &t, &w, gated);
        prop_assert_eq!(a, r_sid_acc(&t, &p, &w, gated));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((r_sid_acc(&p, &p, &w, gated) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn totals_stay_in_range(ids in prop::collection::vec(0u32..400, 0..20), sid_at in prop::option::of(0usize..20), target in prop::array::uniform4(0u32..4)) {
        let catalog = generate_catalog(1, 30, 5, 4).unwrap();
        let emb = embed_catalog(&catalog, 16, 0).unwrap();
        let (cb, _) = build_codebook(&emb, &[4, 3, 3], 50, 1e-6, 0).unwrap();
        let item_ids: Vec<ItemId> = catalog.items().iter().map(|i| i.item_id).collect();
        let assignment = assign_sids(&cb, &emb, &item_ids).unwrap();
        let vocab = build_vocabulary(&catalog, &[4, 3, 3], assignment.max_dedup());
        let tokens: Vec<u32> = ids.iter().map(|i| i % vocab.len() as u32).collect();
        let mut seq = TokenSequence::from_context(vec![vocab.unk()]);
        seq.tokens.extend(&tokens);
        if let Some(at) = sid_at {
            let start = 1 + at.min(tokens.len());
            seq.sid = Some(start..(start + SID_LEN).min(seq.tokens.len()));
        }
        let r = total_reward(&seq, &SemanticId(target), &vocab, &assignment, &RewardConfig::default());
        prop_assert!((-1.0..=3.0).contains(&r.total));
        prop_assert!((r.total - (r.structure + r.length + r.sid_acc + r.sid_val)).abs() < 1e-12);
    }

    #[test]
    fn kl_estimate_is_non_negative(seed in 0u64..1000, ids in prop::collection::vec(0u32..200, 1..12)) {
        let catalog = generate_catalog(2, 20, 4, 3).unwrap();
        let vocab = build_vocabulary(&catalog, &[3, 3, 2], 1);
        let cfg = PolicyConfig { d_model: 6, max_len: 32, recency_decay: 0.8 };
        let p = PolicyParams::with_output_scale(cfg.clone(), &vocab, seed, 1.0);
        let q = PolicyParams::with_output_scale(cfg, &vocab, seed + 1, 1.0);
        let tokens: Vec<u32> = ids.iter().map(|i| i % vocab.len() as u32).collect();
        let k = kl_penalty(&p, &q, &tokens, 1..tokens.len()).unwrap();
        prop_assert!(k.iter().all(|x| *x >= 0.0));
        prop_assert!(kl_penalty(&p, &p, &tokens, 1..tokens.len()).unwrap().iter().all(|x| *x == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sids_are_unique_and_the_trie_only_leads_to_items(seed in 0u64..10_000, n_items in 20usize..200) {
        let catalog = generate_catalog(seed, n_items, 6, 5).unwrap();
        let emb = embed_catalog(&catalog, 16, seed).unwrap();
        let (cb, chain) = build_codebook(&emb, &[6, 4, 3], 50, 1e-6, seed).unwrap();
        let energy = |rows: &Vec<Vec<f64>>| rows.iter().flatten().map(|x| x * x).sum::<f64>();
        for l in 0..3 {
            prop_assert!(energy(&chain[l + 1]) <= energy(&chain[l]) + 1e-9);
        }
        let ids: Vec<ItemId> = catalog.items().iter().map(|i| i.item_id).collect();
        let a = assign_sids(&cb, &emb, &ids).unwrap();
        let distinct: std::collections::BTreeSet<SemanticId> = ids.iter().map(|&i| a.sid_of(i).unwrap()).collect();
        prop_assert_eq!(distinct.len(), n_items);

        // Every path built from valid continuations ends at an assigned item.
        let trie = build_trie(&a).unwrap();
        let mut frontier = vec![Vec::new()];
        let mut leaves = 0;
        while let Some(prefix) = frontier.pop() {
            if prefix.len() == SID_LEN {
                let sid = SemanticId(prefix.clone().try_into().unwrap());
                prop_assert_eq!(trie.leaf(&sid), a.decode(&sid));
                prop_assert!(a.decode(&sid).is_some());
                leaves += 1;
                continue;
            }
            for c in trie.valid_continuations(&prefix) {
                let mut next = prefix.clone();
                next.push(c);
                frontier.push(next);
            }
        }
        prop_assert_eq!(leaves, n_items);
    }
}
