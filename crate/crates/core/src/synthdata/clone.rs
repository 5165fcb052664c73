use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::PAD_TOKEN;

use super::{Dataset, Example, TaskKind};

pub const CLS_TOKEN: usize = 1;
pub const SEP_TOKEN: usize = 2;
const NOOP_FIRST: usize = 3;
const NOOP_COUNT: usize = 2;
/// Closes a statement; statements are the commutative segments.
const STMT_END: usize = 5;
const OP_FIRST: usize = 6;
const OP_COUNT: usize = 6;
const IDENT_FIRST: usize = OP_FIRST + OP_COUNT;

/// Probability of each optional transform on a positive pair.
const P_RENAME: f64 = 0.85;
const P_NOOP: f64 = 0.5;
const P_SWAP: f64 = 0.5;
const MAX_NOOPS: usize = 2;
/// Roughly the rate at which positives end up carrying no-ops.
const P_NOOP_NEGATIVE: f64 = 0.54;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Pad,
    Special,
    NoOp,
    StatementEnd,
    Operator,
    Identifier,
}

/// Fixed id ranges of the clone-task vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloneVocab {
    pub vocab_size: usize,
}

impl CloneVocab {
    pub fn identifiers(&self) -> std::ops::Range<usize> {
        IDENT_FIRST..self.vocab_size
    }

    pub fn operators(&self) -> std::ops::Range<usize> {
        OP_FIRST..OP_FIRST + OP_COUNT
    }

    pub fn noops(&self) -> std::ops::Range<usize> {
        NOOP_FIRST..NOOP_FIRST + NOOP_COUNT
    }
}

pub fn token_class(token: usize) -> TokenClass {
    match token {
        PAD_TOKEN => TokenClass::Pad,
        CLS_TOKEN | SEP_TOKEN => TokenClass::Special,
        t if (NOOP_FIRST..NOOP_FIRST + NOOP_COUNT).contains(&t) => TokenClass::NoOp,
        STMT_END => TokenClass::StatementEnd,
        t if (OP_FIRST..IDENT_FIRST).contains(&t) => TokenClass::Operator,
        _ => TokenClass::Identifier,
    }
}

pub fn encode_pair(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len() + 2);
    out.push(CLS_TOKEN);
    out.extend_from_slice(a);
    out.push(SEP_TOKEN);
    out.extend_from_slice(b);
    out
}

/// Statement shapes by length: `x;`, `op x;`, `x op y;`.
fn sample_statement(rng: &mut ChaCha8Rng, len: usize, vocab: &CloneVocab) -> Vec<usize> {
    let ident = |rng: &mut ChaCha8Rng| rng.random_range(vocab.identifiers());
    let op = |rng: &mut ChaCha8Rng| rng.random_range(vocab.operators());
    match len {
        2 => vec![ident(rng), STMT_END],
        3 => vec![op(rng), ident(rng), STMT_END],
        _ => vec![ident(rng), op(rng), ident(rng), STMT_END],
    }
}

fn sample_base(rng: &mut ChaCha8Rng, len_range: (usize, usize), vocab: &CloneVocab) -> Vec<Vec<usize>> {
    let target = rng.random_range(len_range.0..=len_range.1);
    let mut statements = Vec::new();
    let mut remaining = target;
    while remaining > 0 {
        let len = match remaining {
            2..=4 => remaining,
            5 => rng.random_range(2..=3),
            _ => rng.random_range(2..=4),
        };
        statements.push(sample_statement(rng, len, vocab));
        remaining -= len;
    }
    statements
}

fn flatten(statements: &[Vec<usize>]) -> Vec<usize> {
    statements.concat()
}

fn insert_noops(rng: &mut ChaCha8Rng, seq: &mut Vec<usize>, vocab: &CloneVocab) {
    let k = rng.random_range(1..=MAX_NOOPS);
    for _ in 0..k {
        let pos = rng.random_range(0..=seq.len());
        seq.insert(pos, rng.random_range(vocab.noops()));
    }
}

fn transform(rng: &mut ChaCha8Rng, base: &[Vec<usize>], vocab: &CloneVocab) -> Vec<usize> {
    let original = flatten(base);
    loop {
        let mut statements = base.to_vec();
        let mut applied = false;
        if rng.random_bool(P_RENAME) {
            let idents: Vec<usize> = vocab.identifiers().collect();
            let mut image = idents.clone();
            image.shuffle(rng);
            let map: HashMap<usize, usize> = idents.into_iter().zip(image).collect();
            for t in statements.iter_mut().flatten() {
                if let Some(&r) = map.get(t) {
                    *t = r;
                }
            }
            applied = true;
        }
        if statements.len() >= 2 && rng.random_bool(P_SWAP) {
            let i = rng.random_range(0..statements.len() - 1);
            statements.swap(i, i + 1);
            applied = true;
        }
        let mut out = flatten(&statements);
        if !applied || rng.random_bool(P_NOOP) {
            insert_noops(rng, &mut out, vocab);
        }
        if out != original {
            return out;
        }
    }
}

/// Balanced clone-detection pairs: positives are transformed copies of a
/// base sequence, negatives are independent draws.
pub fn generate_clone_dataset(seed: u64, n_pairs: usize, vocab_size: usize, len_range: (usize, usize)) -> Result<Dataset> {
    if vocab_size < 16 {
        return Err(Error::Validation(format!("clone vocab_size {vocab_size} < 16")));
    }
    let (lo, hi) = len_range;
    if lo < 4 || hi < lo {
        return Err(Error::Validation(format!("clone len_range {len_range:?} must satisfy 4 <= lo <= hi")));
    }
    if n_pairs == 0 {
        return Err(Error::Validation("n_pairs must be positive".into()));
    }
    let vocab = CloneVocab { vocab_size };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc10e_5eed);
    let n_pos = n_pairs / 2;
    let mut labels: Vec<usize> = (0..n_pairs).map(|i| usize::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .map(|label| {
            let base = sample_base(&mut rng, len_range, &vocab);
            let flat = flatten(&base);
            let other = if label == 1 {
                transform(&mut rng, &base, &vocab)
            } else {
                // An independent draw can by chance be a transform of the
                // base; such pairs would be mislabelled, so redraw them.
                loop {
                    let mut seq = flatten(&sample_base(&mut rng, len_range, &vocab));
                    // No-ops also appear in negatives so their presence carries no label signal.
                    if rng.random_bool(P_NOOP_NEGATIVE) {
                        insert_noops(&mut rng, &mut seq, &vocab);
                    }
                    if !is_clone_pair(&flat, &seq) {
                        break seq;
                    }
                }
            };
            let base = flat;
            let (a, b) = if rng.random_bool(0.5) { (base, other) } else { (other, base) };
            Example { tokens: a, tokens_b: Some(b), label }
        })
        .collect();
    Ok(Dataset { examples, task_kind: TaskKind::ClonePairs, vocab_size, seed })
}

fn statements_of(seq: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in seq.iter().filter(|&&t| token_class(t) != TokenClass::NoOp) {
        cur.push(t);
        if t == STMT_END {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Equal up to a bijective identifier renaming; everything else must match.
fn renaming_of(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let (mut fwd, mut back) = (HashMap::new(), HashMap::new());
    a.iter().zip(b).all(|(&x, &y)| match (token_class(x), token_class(y)) {
        (TokenClass::Identifier, TokenClass::Identifier) => {
            *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
        }
        _ => x == y,
    })
}

/// Whether one side is reachable from the other by the positive transforms:
/// identifier renaming, at most one adjacent statement swap, no-op insertion.
pub fn is_clone_pair(a: &[usize], b: &[usize]) -> bool {
    let sa = statements_of(a);
    let fb = statements_of(b).concat();
    if renaming_of(&sa.concat(), &fb) {
        return true;
    }
    (0..sa.len().saturating_sub(1)).any(|i| {
        let mut s = sa.clone();
        s.swap(i, i + 1);
        renaming_of(&s.concat(), &fb)
    })
}

/// Multiset Jaccard overlap of the two sides.
fn overlap(a: &[usize], b: &[usize]) -> f64 {
    let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
    for &t in a {
        counts.entry(t).or_default().0 += 1;
    }
    for &t in b {
        counts.entry(t).or_default().1 += 1;
    }
    let (inter, union) = counts.values().fold((0, 0), |(i, u), &(x, y)| (i + x.min(y), u + x.max(y)));
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Leave-one-out 1-nearest-neighbour accuracy on the token-overlap score.
/// Equal scores keep dataset order; ties in distance go to the lower-scored
/// neighbour.
pub fn overlap_baseline_accuracy(dataset: &Dataset) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut scored: Vec<(f64, usize)> = dataset
        .examples
        .iter()
        .map(|e| (overlap(&e.tokens, e.tokens_b.as_deref().unwrap_or(&[])), e.label))
        .collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = scored.len();
    let correct = (0..n)
        .filter(|&i| {
            let left = i.checked_sub(1).map(|j| (scored[i].0 - scored[j].0, j));
            let right = (i + 1 < n).then(|| (scored[i + 1].0 - scored[i].0, i + 1));
            let nn = match (left, right) {
                (Some(l), Some(r)) => if r.0 < l.0 { r.1 } else { l.1 },
                (Some(l), None) => l.1,
                (None, Some(r)) => r.1,
                (None, None) => unreachable!(),
            };
            scored[nn].1 == scored[i].1
        })
        .count();
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_clone_dataset(11, 1000, 32, (4, 12)).unwrap();
        let b = generate_clone_dataset(11, 1000, 32, (4, 12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_counts(), vec![500, 500]);
        let odd = generate_clone_dataset(11, 7, 32, (4, 12)).unwrap();
        assert_eq!(odd.label_counts(), vec![4, 3]);
    }

    #[test]
    fn positives_never_identical() {
        let ds = generate_clone_dataset(2, 2000, 16, (4, 6)).unwrap();
        for e in ds.examples.iter().filter(|e| e.label == 1) {
            assert_ne!(&e.tokens, e.tokens_b.as_ref().unwrap());
        }
    }

    #[test]
    fn renaming_preserves_non_identifier_multiset() {
        let vocab = CloneVocab { vocab_size: 40 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let base = sample_base(&mut rng, (4, 14), &vocab);
            let flat = flatten(&base);
            let idents: Vec<usize> = vocab.identifiers().collect();
            let mut image = idents.clone();
            image.shuffle(&mut rng);
            let map: HashMap<usize, usize> = idents.into_iter().zip(image).collect();
            let renamed: Vec<usize> = flat.iter().map(|t| *map.get(t).unwrap_or(t)).collect();
            let skeleton = |s: &[usize]| {
                let mut v: Vec<usize> = s.iter().copied().filter(|&t| token_class(t) != TokenClass::Identifier).collect();
                v.sort();
                v
            };
            assert_eq!(skeleton(&flat), skeleton(&renamed));
        }
    }

    #[test]
    fn labels_agree_with_transform_reachability() {
        for (seed, range) in [(5, (4, 6)), (6, (4, 8)), (7, (6, 12))] {
            let ds = generate_clone_dataset(seed, 3000, 32, range).unwrap();
            for e in &ds.examples {
                let b = e.tokens_b.as_ref().unwrap();
                assert_eq!(is_clone_pair(&e.tokens, b), e.label == 1, "{e:?}");
                assert_eq!(is_clone_pair(b, &e.tokens), e.label == 1, "{e:?}");
            }
        }
    }

    #[test]
    fn clone_pair_predicate_cases() {
        let (x, y, z) = (IDENT_FIRST, IDENT_FIRST + 1, IDENT_FIRST + 2);
        let (p, q) = (OP_FIRST, OP_FIRST + 1);
        let a = [x, p, y, STMT_END, z, STMT_END];
        // renamed, swapped, with a no-op
        assert!(is_clone_pair(&a, &[y, STMT_END, NOOP_FIRST, z, p, x, STMT_END]));
        // a different operator
        assert!(!is_clone_pair(&a, &[x, q, y, STMT_END, z, STMT_END]));
        // two identifiers merged into one breaks the bijection
        assert!(!is_clone_pair(&a, &[x, p, x, STMT_END, z, STMT_END]));
        // a swap of non-adjacent statements is out of reach
        let three = [x, STMT_END, p, y, STMT_END, z, q, x, STMT_END];
        assert!(!is_clone_pair(&three, &[z, q, x, STMT_END, p, y, STMT_END, x, STMT_END]));
    }

    #[test]
    fn lengths_respect_range() {
        let ds = generate_clone_dataset(4, 500, 32, (5, 9)).unwrap();
        for e in &ds.examples {
            let b = e.tokens_b.as_ref().unwrap();
            let core = |s: &[usize]| s.iter().filter(|&&t| token_class(t) != TokenClass::NoOp).count();
            assert!((5..=9).contains(&core(&e.tokens)) && (5..=9).contains(&core(b)));
            assert!(e.tokens.len() <= 9 + MAX_NOOPS && b.len() <= 9 + MAX_NOOPS);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_clone_dataset(0, 10, 15, (4, 8)).is_err());
        assert!(generate_clone_dataset(0, 10, 32, (3, 8)).is_err());
        assert!(generate_clone_dataset(0, 0, 32, (4, 8)).is_err());
    }

    #[test]
    fn overlap_baseline_is_informative_but_imperfect() {
        let ds = generate_clone_dataset(0, 4000, 32, (4, 8)).unwrap();
        let acc = overlap_baseline_accuracy(&ds).unwrap();
        assert!(acc > 0.6 && acc < 0.95, "baseline accuracy {acc}");
    }
}
