//! Property tests for perturbations, reward algebra, metrics and decoding.

use iat_core::corpus::{History, PosEntries, NUM_RESERVED};
use iat_core::eval::{distinct_n, overlap, stopword_rate};
use iat_core::objectives::RewardRecord;
use iat_core::perturb::{sample_kind, PerturbationKind as K};
use iat_core::{Model, ModelConfig, PosLexicon, PosTag, Perturber, StopwordList, Utterance, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;

fn history_strategy() -> impl Strategy<Value = History> {
    prop::collection::vec(prop::collection::vec(NUM_RESERVED..VOCAB, 1..7), 1..7)
}

fn lexicon() -> PosLexicon {
    let surfaces: Vec<String> = (NUM_RESERVED..VOCAB).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_surfaces(surfaces).unwrap();
    let mut entries = PosEntries::new();
    for i in NUM_RESERVED..VOCAB {
        let tag = match i % 3 {
            0 => PosTag::Noun,
            1 => PosTag::Verb,
            _ => PosTag::Other,
        };
        entries.insert(format!("w{i}"), tag);
    }
    PosLexicon::resolve(&vocab, &entries)
}

fn pool() -> Vec<Utterance> {
    vec![vec![5, 6], vec![7], vec![8, 9, 10]]
}

fn is_subsequence(small: &[Utterance], big: &[Utterance]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

fn is_token_subsequence(small: &[usize], big: &[usize]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn perturbations_keep_their_invariants(history in history_strategy(), seed in any::<u64>()) {
        let lex = lexicon();
        let pool = pool();
        let p = Perturber::new(&pool, &lex, VOCAB).unwrap();
        for kind in K::ALL.into_iter().chain([K::Identity]) {
            let before = history.clone();
            let out = p.perturb_history(&history, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = p.perturb_history(&history, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&history, &before);
            prop_assert_eq!(&out, &again);
            prop_assert!(!out.is_empty());
            prop_assert!(out.iter().all(|u| !u.is_empty()));
            match kind {
                K::Identity => prop_assert_eq!(&out, &history),
                K::Shuf => {
                    prop_assert_eq!(sorted(&out), sorted(&history));
                }
                K::Rev => {
                    let twice = p.perturb_history(&out, kind, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
                    prop_assert_eq!(&twice, &history);
                    prop_assert_eq!(out.iter().rev().cloned().collect::<History>(), history.clone());
                }
                K::WordReverse => {
                    let twice = p.perturb_history(&out, kind, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
                    prop_assert_eq!(&twice, &history);
                }
                K::WordShuffle => {
                    prop_assert_eq!(out.len(), history.len());
                    for (a, b) in out.iter().zip(&history) {
                        prop_assert_eq!(sorted(a), sorted(b));
                    }
                }
                K::Drop | K::Truncate => prop_assert!(is_subsequence(&out, &history)),
                K::WordDrop | K::NounDrop | K::VerbDrop => {
                    prop_assert_eq!(out.len(), history.len());
                    for (a, b) in out.iter().zip(&history) {
                        prop_assert!(is_token_subsequence(a, b));
                    }
                }
                K::Repl => {
                    prop_assert_eq!(out.len(), history.len());
                    for (a, b) in out.iter().zip(&history) {
                        prop_assert!(a == b || pool.contains(a));
                    }
                }
                K::WordRepl => {
                    prop_assert_eq!(out.len(), history.len());
                    for (a, b) in out.iter().zip(&history) {
                        prop_assert_eq!(a.len(), b.len());
                        prop_assert!(a.iter().all(|&t| (NUM_RESERVED..VOCAB).contains(&t)));
                    }
                }
            }
            if kind == K::Truncate && history.len() >= 2 {
                prop_assert!(out.len() < history.len());
                prop_assert_eq!(&out[..], &history[history.len() - out.len()..]);
            }
        }
    }

    #[test]
    fn noun_and_verb_drop_remove_tagged_tokens(history in history_strategy(), seed in any::<u64>()) {
        let lex = lexicon();
        let p = Perturber::new(&[], &lex, VOCAB).unwrap();
        for (kind, tag) in [(K::NounDrop, PosTag::Noun), (K::VerbDrop, PosTag::Verb)] {
            let out = p.perturb_history(&history, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (a, b) in out.iter().zip(&history) {
                let kept: Vec<usize> = b.iter().copied().filter(|&t| lex.tag(t) != tag).collect();
                if kept.is_empty() {
                    prop_assert_eq!(a.len(), 1);
                    prop_assert!(b.contains(&a[0]));
                } else {
                    prop_assert_eq!(a, &kept);
                }
            }
        }
    }

    #[test]
    fn reward_algebra(orig in 0.0f64..1e3, adv in 0.0f64..1e3, margin in 0.0f64..10.0) {
        let r = RewardRecord::from_nlls(orig, adv, margin);
        prop_assert_eq!(r.reward, adv - orig);
        prop_assert_eq!(r.penalty, (r.reward - margin).min(0.0));
        prop_assert_eq!(RewardRecord::from_nlls(adv, orig, margin).reward, -r.reward);
        prop_assert_eq!(r.penalty == 0.0, r.reward >= margin);
        prop_assert!(r.penalty <= 0.0 && r.penalty >= -margin - r.reward.abs());
    }

    #[test]
    fn distinct_n_is_permutation_invariant_and_halves_on_duplication(
        responses in prop::collection::vec(prop::collection::vec(5usize..12, 0..6), 1..8),
        n in 1usize..4,
        rot in 0usize..8,
    ) {
        let d = distinct_n(&responses, n).unwrap();
        prop_assert!(d >= 0.0);
        let mut rotated = responses.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        rotated.reverse();
        prop_assert_eq!(distinct_n(&rotated, n).unwrap(), d);
        let doubled: Vec<Utterance> = responses.iter().chain(&responses).cloned().collect();
        let dd = distinct_n(&doubled, n).unwrap();
        prop_assert!((dd - d / 2.0).abs() <= 1e-15 * d.max(1.0));
    }

    #[test]
    fn overlap_and_stopword_rate_are_percentages(
        responses in prop::collection::vec(prop::collection::vec(5usize..12, 0..6), 1..8),
        last in prop::collection::vec(5usize..12, 1..6),
    ) {
        let histories: Vec<History> = responses.iter().map(|_| vec![last.clone()]).collect();
        let o = overlap(&responses, &histories).unwrap();
        prop_assert!((0.0..=100.0).contains(&o));
        let vocab = Vocabulary::from_surfaces((5..12).map(|i| format!("w{i}"))).unwrap();
        let stop = StopwordList::from_words(["w5", "w6", "w7"]).unwrap();
        let s = stopword_rate(&responses, &stop, &vocab);
        prop_assert!((0.0..=100.0).contains(&s));
    }

    #[test]
    fn sample_kind_stays_in_the_enabled_set(seed in any::<u64>(), mask in 1u16..(1 << 11)) {
        let enabled: Vec<K> = K::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, k)| k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(enabled.contains(&sample_kind(&enabled, &mut rng).unwrap()));
        }
    }

    #[test]
    fn response_lm_ignores_history(history in history_strategy(), other in history_strategy(), seed in 0u64..50) {
        let m = Model::random(ModelConfig::new(VOCAB, 4, 5).with_role(iat_core::ModelRole::ResponseLm), seed).unwrap();
        let y = vec![6, 7];
        prop_assert_eq!(m.sequence_log_probs(&history, &y).unwrap(), m.sequence_log_probs(&other, &y).unwrap());
    }

    #[test]
    fn perplexity_is_at_least_one(seed in 0u64..50, history in history_strategy()) {
        let m = Model::random(ModelConfig::new(VOCAB, 4, 5), seed).unwrap();
        let ex = vec![iat_core::Example { history, response: vec![6, 7, 8] }];
        prop_assert!(iat_core::eval::perplexity(&m, &ex, None).unwrap() >= 1.0);
    }
}

#[test]
fn bernoulli_rates_are_near_thirty_percent() {
    let lex = lexicon();
    let pool = pool();
    let p = Perturber::new(&pool, &lex, VOCAB).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let history: History = (0..8).map(|i| vec![5 + i, 6 + i, 7 + i, 8 + i]).collect();
    for kind in [K::Drop, K::Repl, K::WordDrop, K::WordRepl] {
        let (mut events, mut hits) = (0, 0);
        while events < 20_000 {
            let (_, tally) = p.perturb_traced(&history, kind, &mut rng).unwrap();
            events += tally.events;
            hits += tally.hits;
        }
        let rate = hits as f64 / events as f64;
        assert!((0.27..=0.33).contains(&rate), "{kind}: {rate}");
    }
}

/// Widening the beam does not always improve the best score: a wider beam
/// can evict the prefix that the narrower beam completes.
#[test]
fn wider_beam_can_score_worse() {
    let m = Model::random(ModelConfig::new(8, 3, 4).with_max_decode_len(5), 0).unwrap();
    let h = vec![vec![5, 6], vec![7]];
    let w3 = m.beam_search(&h, 3, 1).unwrap()[0].score;
    let w4 = m.beam_search(&h, 4, 1).unwrap()[0].score;
    assert!(w4 < w3, "{w4} vs {w3}");
}

fn exhaustive_best(m: &Model, source: &[usize], prefix: &mut Vec<usize>, best: &mut f64) {
    let max_len = m.config().max_decode_len;
    for tok in 0..m.config().vocab_size {
        prefix.push(tok);
        if tok == iat_core::corpus::EOS || prefix.len() == max_len {
            let score: f64 = m.score_tokens(source, prefix).unwrap().iter().sum();
            *best = best.max(score);
        } else {
            exhaustive_best(m, source, prefix, best);
        }
        prefix.pop();
    }
}

#[test]
fn beam_never_beats_and_eventually_reaches_the_optimum() {
    for seed in 0..10 {
        let m = Model::random(ModelConfig::new(6, 3, 4).with_max_decode_len(3), seed).unwrap();
        let h = vec![vec![5], vec![5, 5]];
        let source = m.decode_source(&h).unwrap();
        let mut best = f64::NEG_INFINITY;
        exhaustive_best(&m, &source, &mut Vec::new(), &mut best);
        for w in 1..=8 {
            assert!(m.beam_search(&h, w, 1).unwrap()[0].score <= best + 1e-12);
        }
        let full = m.beam_search(&h, 36, 1).unwrap()[0].score;
        assert!((full - best).abs() < 1e-12, "seed {seed}: {full} vs {best}");
    }
}
