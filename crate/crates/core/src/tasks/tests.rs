use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::model::{vocab, ModelConfig};
use crate::Error;

fn first_segment(doc: &[usize]) -> &[usize] {
    let end = doc.iter().position(|&t| t == vocab::SEP).unwrap();
    &doc[1..end]
}

#[test]
fn corpus_is_reproducible_and_in_range() {
    let p = GrammarParams::default();
    let a = gen_corpus(3, 500, &p).unwrap();
    let b = gen_corpus(3, 500, &p).unwrap();
    let c = gen_corpus(4, 500, &p).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let cfg = ModelConfig::default();
    p.check_model(&cfg).unwrap();
    for doc in a.train.iter().chain(&a.held_out) {
        assert!(doc.len() <= cfg.max_len);
        assert!(doc.iter().all(|&t| t < cfg.vocab));
        assert_eq!(doc[0], vocab::CLS);
        assert_eq!(doc.iter().filter(|&&t| t == vocab::SEP).count(), 2);
    }
    assert_eq!(a.train.len(), 450);
    assert!(a.held_out.iter().all(|d| !a.train.contains(d)));
}

#[test]
fn corpus_rejects_empty_and_bad_params() {
    assert!(matches!(gen_corpus(0, 0, &GrammarParams::default()), Err(Error::Config { field: "size", .. })));
    let p = GrammarParams { noise: 1.5, ..Default::default() };
    assert!(matches!(gen_corpus(0, 10, &p), Err(Error::Config { field: "noise", .. })));
    let p = GrammarParams { concepts: 40, ..Default::default() };
    assert!(matches!(p.check_model(&ModelConfig::default()), Err(Error::Config { field: "vocab", .. })));
}

#[test]
fn transition_rows_are_distributions() {
    let g = Grammar::new(GrammarParams::default()).unwrap();
    for row in g.transitions() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn bigram_counts_match_transition_matrix() {
    let p = GrammarParams::default();
    let g = Grammar::new(p).unwrap();
    let corpus = gen_corpus(11, 10_000, &p).unwrap();
    let c = p.concepts;
    let mut counts = vec![vec![0usize; c]; c];
    let mut synonym = vec![0usize; p.synonyms];
    for doc in corpus.train.iter().chain(&corpus.held_out) {
        let s = first_segment(doc);
        for w in s.windows(2) {
            counts[g.concept_of(w[0]).unwrap()][g.concept_of(w[1]).unwrap()] += 1;
        }
        for &t in s {
            synonym[(t - vocab::FIRST_CONTENT) % p.synonyms] += 1;
        }
    }
    let mut stat = 0.0;
    let mut df = 0.0;
    for (row, probs) in counts.iter().zip(g.transitions()) {
        let n: usize = row.iter().sum();
        for (&o, &pr) in row.iter().zip(probs) {
            let e = n as f64 * pr;
            stat += (o as f64 - e).powi(2) / e;
        }
        df += (c - 1) as f64;
    }
    let p_value = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "chi-square {stat} on {df} df, p = {p_value}");

    let total: usize = synonym.iter().sum();
    let e = total as f64 / p.synonyms as f64;
    let stat: f64 = synonym.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    let p_value = 1.0 - ChiSquared::new((p.synonyms - 1) as f64).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "synonym chi-square {stat}, p = {p_value}");
}

#[test]
fn shuffled_transitions_fail_the_bigram_oracle() {
    let p = GrammarParams::default();
    let g = Grammar::new(p).unwrap();
    let other = Grammar::new(GrammarParams { seed: 99, ..p }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = p.concepts;
    let mut counts = vec![vec![0usize; c]; c];
    for _ in 0..2000 {
        let s = other.sample_sentence(&mut rng);
        for w in s.windows(2) {
            counts[other.concept_of(w[0]).unwrap()][other.concept_of(w[1]).unwrap()] += 1;
        }
    }
    let mut stat = 0.0;
    for (row, probs) in counts.iter().zip(g.transitions()) {
        let n: usize = row.iter().sum();
        for (&o, &pr) in row.iter().zip(probs) {
            let e = n as f64 * pr;
            stat += (o as f64 - e).powi(2) / e;
        }
    }
    let p_value = 1.0 - ChiSquared::new((c * (c - 1)) as f64).unwrap().cdf(stat);
    assert!(p_value < 1e-6);
}

#[test]
fn pair_task_positive_count_is_exact() {
    let p = GrammarParams::default();
    let pairs = gen_pair_task(5, 1000, 0.684, &p, Transform::Paraphrase).unwrap();
    assert_eq!(pairs.len(), 1000);
    assert_eq!(pairs.iter().filter(|x| x.positive).count(), 684);
    assert_eq!(positive_count(400, 0.684), 274);
    assert_eq!(positive_count(2000, 0.684), 1368);
    assert!(matches!(gen_pair_task(5, 0, 0.5, &p, Transform::Paraphrase), Err(Error::Config { .. })));
    assert!(matches!(
        gen_pair_task(5, 10, 1.0, &p, Transform::Paraphrase),
        Err(Error::Config { field: "positive_fraction", .. })
    ));
}

#[test]
fn positives_preserve_concepts_and_negatives_are_independent() {
    let p = GrammarParams::default();
    let g = Grammar::new(p).unwrap();
    let pairs = gen_pair_task(6, 2000, 0.684, &p, Transform::Paraphrase).unwrap();
    let mut neg_same = 0;
    let mut token_overlap = 0.0;
    let mut positives = 0;
    for x in &pairs {
        let same = g.concept_counts(&x.a) == g.concept_counts(&x.b);
        if x.positive {
            assert!(same);
            assert_eq!(x.a.len(), x.b.len());
            let shared = x.a.iter().filter(|t| x.b.contains(t)).count();
            token_overlap += shared as f64 / x.a.len() as f64;
            positives += 1;
        } else if same {
            neg_same += 1;
        }
    }
    assert!(token_overlap / positives as f64 > 0.3);
    assert!(neg_same < 10, "{neg_same} negatives share the concept multiset");
}

#[test]
fn identity_task_is_solved_by_token_overlap() {
    let cfg = TaskConfig {
        transform: Transform::Identity,
        ..Default::default()
    };
    let task = PairTask::generate(&cfg).unwrap();
    let predictions: Vec<bool> = task
        .dev
        .iter()
        .map(|x| {
            let shared = x.a.iter().zip(&x.b).filter(|(a, b)| a == b).count();
            x.a.len() == x.b.len() && shared == x.a.len()
        })
        .collect();
    let labels: Vec<bool> = task.dev.iter().map(|x| x.positive).collect();
    assert!(accuracy(&predictions, &labels).unwrap() > 0.99);
}

#[test]
fn task_splits_are_disjoint_and_reproducible() {
    let cfg = TaskConfig::default();
    let a = PairTask::generate(&cfg).unwrap();
    assert_eq!(a, PairTask::generate(&cfg).unwrap());
    assert_eq!(a.train.len(), 2000);
    assert_eq!(a.dev.len(), 400);
    assert_eq!(a.dev.iter().filter(|x| x.positive).count(), 274);
    assert!(a.dev.iter().all(|d| !a.train.contains(d)));
    a.check_model(&ModelConfig::default()).unwrap();
}

#[test]
fn pairs_serialize_round_trip() {
    let pairs = gen_pair_task(2, 50, 0.5, &GrammarParams::default(), Transform::Paraphrase).unwrap();
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let first = text.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 3);
    assert_eq!(read_pairs(&buf[..]).unwrap(), pairs);
    assert!(matches!(read_pairs(&b"4 5\t6\t2\n"[..]), Err(Error::Format(_))));
    assert!(matches!(read_pairs(&b"4 5\t6\n"[..]), Err(Error::Format(_))));
}

#[test]
fn f1_examples() {
    // TP=2, FP=1, FN=1, TN=1
    let pred = [true, true, true, false, false];
    let gold = [true, true, false, true, false];
    assert!((f1_score(&pred, &gold).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(f1_score(&gold, &gold).unwrap(), 1.0);
    assert_eq!(f1_score(&[false; 3], &[false; 3]).unwrap(), 0.0);
    assert!(matches!(f1_score(&[true], &[true, false]), Err(Error::Contract(_))));
}

#[test]
fn majority_baseline_closed_form() {
    assert!((majority_f1(0.5) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(majority_f1(1.0), 1.0);
    assert!((majority_f1(0.684) - 0.8124).abs() < 5e-5);
    let pairs = gen_pair_task(1, 1000, 0.684, &GrammarParams::default(), Transform::Paraphrase).unwrap();
    let r = majority_baseline(&pairs);
    assert!((r.f1 - majority_f1(0.684)).abs() < 1e-15);
    assert_eq!(r.accuracy, 0.684);
    assert_eq!(r.n, 1000);

    let all_pos: Vec<Pair> = pairs.iter().map(|p| Pair { positive: true, ..p.clone() }).collect();
    assert_eq!(majority_baseline(&all_pos).f1, 1.0);
}

proptest! {
    #[test]
    fn f1_is_permutation_invariant(labels in prop::collection::vec(any::<(bool, bool)>(), 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(bool, bool)]| -> (Vec<bool>, Vec<bool>) { v.iter().copied().unzip() };
        let (p1, l1) = split(&labels);
        let (p2, l2) = split(&shuffled);
        prop_assert_eq!(f1_score(&p1, &l1).unwrap(), f1_score(&p2, &l2).unwrap());
    }

    #[test]
    fn all_positive_f1_matches_closed_form(n in 1usize..300, q in 0.01f64..0.99, seed in any::<u64>()) {
        let pairs = gen_pair_task(seed, n, q, &GrammarParams::default(), Transform::Identity).unwrap();
        let pos = pairs.iter().filter(|p| p.positive).count();
        prop_assume!(pos > 0);
        let qn = pos as f64 / n as f64;
        let f1 = majority_baseline(&pairs).f1;
        prop_assert!((f1 - majority_f1(qn)).abs() < 1e-12);
    }
}
