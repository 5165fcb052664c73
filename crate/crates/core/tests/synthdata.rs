use std::collections::HashMap;

use slimformer::synthdata::{generate_clone_dataset, generate_lm_dataset, is_valid_expression, split, GrammarVocab, MAX_DEPTH, P_ATOM};

/// Distribution of the number of compound nodes of an expression rooted
/// at `depth`, by direct recursion over the grammar.
fn compound_distribution(depth: usize) -> Vec<f64> {
    if depth == MAX_DEPTH {
        return vec![1.0];
    }
    let child = compound_distribution(depth + 1);
    let mut out = vec![0.0; 2 * (child.len() - 1) + 2];
    out[0] = P_ATOM;
    for (i, a) in child.iter().enumerate() {
        for (j, b) in child.iter().enumerate() {
            out[i + j + 1] += (1.0 - P_ATOM) * a * b;
        }
    }
    out
}

/// Expected unigram frequencies of sentences whose length is in `len_range`.
fn unigram_oracle(len_range: (usize, usize)) -> HashMap<usize, f64> {
    let dist = compound_distribution(0);
    let (mut tokens, mut atoms, mut compounds, mut mass) = (0.0, 0.0, 0.0, 0.0);
    for (k, p) in dist.iter().enumerate() {
        let len = 3 + 4 * k;
        if !(len_range.0..=len_range.1).contains(&len) {
            continue;
        }
        mass += p;
        tokens += p * len as f64;
        atoms += p * (k + 1) as f64;
        compounds += p * k as f64;
    }
    let mut freq = HashMap::new();
    freq.insert(GrammarVocab::BOS, mass / tokens);
    freq.insert(GrammarVocab::EOS, mass / tokens);
    freq.insert(GrammarVocab::OPEN, compounds / tokens);
    freq.insert(GrammarVocab::CLOSE, compounds / tokens);
    for op in GrammarVocab::OPS {
        freq.insert(op, compounds / tokens / GrammarVocab::OPS.len() as f64);
    }
    for a in GrammarVocab::ATOMS {
        freq.insert(a, atoms / tokens / GrammarVocab::ATOMS.len() as f64);
    }
    freq
}

#[test]
fn grammar_oracle_moments() {
    let dist = compound_distribution(0);
    let k: f64 = dist.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((k - 1.5).abs() < 1e-12);
    assert!((3.0 + 4.0 * k - 9.0).abs() < 1e-12);
}

#[test]
fn unigram_frequencies_match_grammar() {
    for len_range in [(3, 64), (3, 15), (7, 11)] {
        let ds = generate_lm_dataset(11, 10_000, len_range).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut total = 0usize;
        for e in &ds.examples {
            assert!(is_valid_expression(&e.tokens));
            for &t in &e.tokens {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        let oracle = unigram_oracle(len_range);
        let observed = |t: usize| counts.get(&t).copied().unwrap_or(0) as f64 / total as f64;
        let tv: f64 = oracle.iter().map(|(&t, &e)| (observed(t) - e).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.02, "total variation {tv:.4} in {len_range:?}");
        // per token class, where counts are large enough for a 2% relative bound
        let classes: [Vec<usize>; 4] = [
            vec![GrammarVocab::BOS, GrammarVocab::EOS],
            vec![GrammarVocab::OPEN, GrammarVocab::CLOSE],
            GrammarVocab::OPS.to_vec(),
            GrammarVocab::ATOMS.collect(),
        ];
        for class in classes {
            let expected: f64 = class.iter().map(|t| oracle[t]).sum();
            let got: f64 = class.iter().map(|&t| observed(t)).sum();
            if expected == 0.0 {
                assert_eq!(got, 0.0, "{class:?} in {len_range:?}");
                continue;
            }
            let rel = (got - expected).abs() / expected;
            assert!(rel <= 0.02, "{class:?} in {len_range:?}: observed {got:.5} expected {expected:.5}");
        }
    }
}

#[test]
fn clone_labels_exactly_balanced() {
    for n in [1000, 999, 8000] {
        let ds = generate_clone_dataset(5, n, 32, (4, 8)).unwrap();
        let c = ds.label_counts();
        assert_eq!(c[0] + c[1], n);
        assert!(c[0].abs_diff(c[1]) <= 1, "{c:?}");
    }
    assert_eq!(generate_clone_dataset(2, 1000, 32, (4, 8)).unwrap().label_counts(), vec![500, 500]);
}

#[test]
fn split_is_disjoint_exhaustive_and_seeded() {
    let ds = generate_clone_dataset(3, 1000, 32, (4, 8)).unwrap();
    let (a, b, c) = split(&ds, (0.8, 0.1, 0.1), 9).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
    let (a2, _, _) = split(&ds, (0.8, 0.1, 0.1), 9).unwrap();
    assert_eq!(a.examples, a2.examples);
    let mut all: Vec<_> = a.examples.iter().chain(&b.examples).chain(&c.examples).map(|e| format!("{e:?}")).collect();
    let mut orig: Vec<_> = ds.examples.iter().map(|e| format!("{e:?}")).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
}
