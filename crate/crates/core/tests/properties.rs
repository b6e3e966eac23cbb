//! Invariants checked on generated inputs.

mod common;

use biattn::agreement::{loss, loss_mul, loss_soa, loss_sos, LossKind};
use biattn::autodiff::Array;
use biattn::corpus::{format_pharaoh, parse_pharaoh, reverse_corpus, Link, ParallelCorpus, SentencePair, Vocabulary};
use biattn::decode::{extract_one_to_one, LinkSet};
use biattn::metrics::{aer, bleu, row_entropy, AerCounts};
use biattn::model::AlignmentMatrix;
use biattn::trainer::TrainingConfig;
use common::softmax_rows;
use proptest::prelude::*;

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Array::new([rows, cols], d).unwrap())
}

/// A random row-stochastic `N × M` and a random `M × N`.
fn stochastic_pair() -> impl Strategy<Value = (Array, Array)> {
    (1usize..6, 1usize..6).prop_flat_map(|(n, m)| {
        (logits(n, m), logits(m, n)).prop_map(|(a, b)| (softmax_rows(&a), softmax_rows(&b)))
    })
}

fn link_set(max: usize) -> impl Strategy<Value = LinkSet> {
    prop::collection::btree_set((0..max, 0..max), 0..12)
}

fn sentence(words: &'static [&'static str]) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(words), 1..12).prop_map(|v| v.into_iter().map(str::to_string).collect())
}

const WORDS: &[&str] = &["a", "b", "c", "d", "e", "A", "B"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sos_is_nonnegative_and_zero_on_transposes((f, b) in stochastic_pair()) {
        prop_assert!(loss_sos(&f, &b).unwrap() >= 0.0);
        prop_assert_eq!(loss_sos(&f, &f.transpose()).unwrap(), 0.0);
    }

    #[test]
    fn sos_is_zero_only_on_agreement((f, b) in stochastic_pair()) {
        let agree = f.data().iter().enumerate().all(|(i, &x)| x == b.get(i % f.cols(), i / f.cols()));
        prop_assert_eq!(loss_sos(&f, &b).unwrap() == 0.0, agree);
    }

    #[test]
    fn mul_is_bounded_below_by_log_min_dim((f, b) in stochastic_pair()) {
        let (n, m) = (f.rows(), f.cols());
        let bound = -(n.min(m) as f64).ln();
        prop_assert!(loss_mul(&f, &b).unwrap() >= bound - 1e-12);
    }

    #[test]
    fn soa_is_nonpositive_and_bounded((f, b) in stochastic_pair()) {
        let v = loss_soa(&f, &b).unwrap();
        // cells of A_f + A_bᵀ lie in [0, 2] and sum to N + M, so Σ cell² ≤ 2(N + M)
        prop_assert!(v <= 0.0);
        prop_assert!(v >= -2.0 * (f.rows() + f.cols()) as f64 - 1e-12);
    }

    #[test]
    fn losses_are_symmetric_under_direction_swap((f, b) in stochastic_pair()) {
        for kind in LossKind::ALL {
            let ab = loss(kind, &f, &b).unwrap();
            let ba = loss(kind, &b, &f).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        }
    }

    #[test]
    fn aer_is_in_unit_interval(a in link_set(6), s in link_set(6), extra in link_set(6)) {
        let p: LinkSet = s.union(&extra).cloned().collect();
        let v = aer(&a, &s, &p);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn predicting_the_sure_links_gives_zero_aer(s in link_set(6), extra in link_set(6)) {
        prop_assume!(!s.is_empty());
        let p: LinkSet = s.union(&extra).cloned().collect();
        prop_assert_eq!(aer(&s, &s, &p), 0.0);
    }

    #[test]
    fn corpus_aer_counts_add_up(a in link_set(5), s in link_set(5), a2 in link_set(5), s2 in link_set(5)) {
        let mut c = AerCounts::new(&a, &s, &s);
        c.add(&AerCounts::new(&a2, &s2, &s2));
        let shifted = |x: &LinkSet| x.iter().map(|&(m, n)| (m + 10, n + 10)).collect::<LinkSet>();
        let ua: LinkSet = a.union(&shifted(&a2)).cloned().collect();
        let us: LinkSet = s.union(&shifted(&s2)).cloned().collect();
        prop_assume!(!ua.is_empty() || !us.is_empty());
        prop_assert!((c.aer() - aer(&ua, &us, &us)).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_between_zero_and_log_width(l in (1usize..8).prop_flat_map(|m| logits(1, m))) {
        let row = softmax_rows(&l);
        let h = row_entropy(row.data());
        prop_assert!(h >= -1e-15);
        prop_assert!(h <= (row.cols() as f64).ln() + 1e-12);
    }

    #[test]
    fn bleu_is_a_percentage(cands in prop::collection::vec(sentence(WORDS), 1..6), refs in prop::collection::vec(sentence(WORDS), 6)) {
        let refs: Vec<Vec<Vec<String>>> = refs.into_iter().take(cands.len()).map(|r| vec![r]).collect();
        let b = bleu(&cands, &refs).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }

    #[test]
    fn bleu_of_the_reference_itself_is_100(refs in prop::collection::vec(sentence(WORDS), 1..6)) {
        prop_assume!(refs.iter().map(Vec::len).sum::<usize>() >= 4 && refs.iter().any(|r| r.len() >= 4));
        let sets: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let upper: Vec<Vec<String>> = refs.iter().map(|r| r.iter().map(|w| w.to_uppercase()).collect()).collect();
        prop_assert!((bleu(&upper, &sets).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn one_to_one_extraction_gives_one_link_per_word(l in (1usize..6, 1usize..6).prop_flat_map(|(n, m)| logits(n + 1, m + 1))) {
        let a = AlignmentMatrix::new(softmax_rows(&l)).unwrap().with_eos_row().with_eos_col();
        let links = extract_one_to_one(&a);
        prop_assert_eq!(links.len(), a.word_rows());
        for &(m, n) in &links {
            prop_assert!(m < a.word_cols());
            prop_assert!(a.row(n)[..a.word_cols()].iter().all(|&x| x <= a.row(n)[m]));
        }
    }

    #[test]
    fn reversing_a_corpus_twice_is_identity(
        pairs in prop::collection::vec((prop::collection::vec(4usize..9, 1..6), prop::collection::vec(4usize..9, 1..6)), 1..5)
    ) {
        let vocab = Vocabulary::from_tokens(["w", "x", "y", "z", "q"]);
        let other = Vocabulary::from_tokens(["k", "l", "m", "n", "o"]);
        let pairs: Vec<SentencePair> = pairs
            .into_iter()
            .map(|(s, t)| {
                let gold: Vec<Link> = (0..s.len().min(t.len())).map(|i| Link::sure(i, t.len() - 1 - i)).collect();
                SentencePair { gold: Some(gold), ..SentencePair::new(s, t) }
            })
            .collect();
        let c = ParallelCorpus { pairs, source_vocab: vocab, target_vocab: other, dropped: 0 };
        let r = reverse_corpus(&c);
        prop_assert_eq!(&r.source_vocab, &c.target_vocab);
        prop_assert_eq!(&reverse_corpus(&r), &c);
    }

    #[test]
    fn pharaoh_round_trip(links in prop::collection::btree_set((0usize..20, 0usize..20, any::<bool>()), 0..15)) {
        let links: Vec<Link> = links
            .into_iter()
            .map(|(m, n, sure)| if sure { Link::sure(m, n) } else { Link::possible(m, n) })
            .collect();
        let mut sorted = links.clone();
        sorted.sort();
        prop_assert_eq!(parse_pharaoh(&format_pharaoh(&links), 1).unwrap(), sorted);
    }

    #[test]
    fn config_text_round_trip(lambda in 0.0f64..10.0, lr in 1e-5f64..1.0, batch in 1usize..128, seed in any::<u64>(), kind in 0usize..4) {
        let c = TrainingConfig {
            lambda,
            learning_rate: lr,
            batch_size: batch,
            seed,
            agreement_loss: LossKind::ALL.get(kind).copied(),
            ..TrainingConfig::default()
        };
        prop_assert_eq!(TrainingConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
