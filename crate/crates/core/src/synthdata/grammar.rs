//! Fully parenthesised arithmetic: `E -> atom | ( E op E )`, wrapped in
//! begin/end tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Dataset, Example, TaskKind};

/// Fixed token ids of the expression language.
pub struct GrammarVocab;

impl GrammarVocab {
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const OPEN: usize = 3;
    pub const CLOSE: usize = 4;
    pub const OPS: [usize; 2] = [5, 6];
    pub const ATOMS: std::ops::Range<usize> = 7..12;
}

pub const LM_VOCAB_SIZE: usize = 12;
/// Probability that a non-maximal-depth expression is a bare atom.
pub const P_ATOM: f64 = 0.5;
/// Nesting depth at which an atom is forced.
pub const MAX_DEPTH: usize = 3;

fn sample_expr(rng: &mut ChaCha8Rng, depth: usize, out: &mut Vec<usize>) {
    if depth == MAX_DEPTH || rng.random_bool(P_ATOM) {
        out.push(rng.random_range(GrammarVocab::ATOMS));
        return;
    }
    out.push(GrammarVocab::OPEN);
    sample_expr(rng, depth + 1, out);
    out.push(GrammarVocab::OPS[rng.random_range(0..GrammarVocab::OPS.len())]);
    sample_expr(rng, depth + 1, out);
    out.push(GrammarVocab::CLOSE);
}

/// Sentences whose full length (with begin/end) lies in `len_range`,
/// drawn by rejection from the grammar.
pub fn generate_lm_dataset(seed: u64, n_seqs: usize, len_range: (usize, usize)) -> Result<Dataset> {
    let (lo, hi) = len_range;
    let longest = 2 + (1 << MAX_DEPTH) + 3 * ((1 << MAX_DEPTH) - 1);
    if hi < lo || hi < 3 || lo > longest {
        return Err(Error::Validation(format!("no grammar sentence has length in {len_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a2a_77a2);
    let mut examples = Vec::with_capacity(n_seqs);
    while examples.len() < n_seqs {
        let mut tokens = vec![GrammarVocab::BOS];
        sample_expr(&mut rng, 0, &mut tokens);
        tokens.push(GrammarVocab::EOS);
        if (lo..=hi).contains(&tokens.len()) {
            examples.push(Example { tokens, tokens_b: None, label: 0 });
        }
    }
    Ok(Dataset { examples, task_kind: TaskKind::GrammarLm, vocab_size: LM_VOCAB_SIZE, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Need {
    Expr,
    Op,
    SecondExpr,
    Close,
}

/// Incremental recogniser; tracks what each open compound still needs.
#[derive(Debug, Clone, Default)]
struct Recogniser {
    started: bool,
    finished: bool,
    root_done: bool,
    stack: Vec<Need>,
}

impl Recogniser {
    fn expecting_expr(&self) -> bool {
        match self.stack.last() {
            None => self.started && !self.root_done,
            Some(n) => matches!(n, Need::Expr | Need::SecondExpr),
        }
    }

    fn complete_expr(&mut self) {
        match self.stack.last_mut() {
            None => self.root_done = true,
            Some(n) => {
                *n = match n {
                    Need::Expr => Need::Op,
                    _ => Need::Close,
                }
            }
        }
    }

    fn legal(&self) -> Vec<usize> {
        if self.finished {
            return Vec::new();
        }
        if !self.started {
            return vec![GrammarVocab::BOS];
        }
        if self.expecting_expr() {
            let mut v: Vec<usize> = GrammarVocab::ATOMS.collect();
            if self.stack.len() < MAX_DEPTH {
                v.push(GrammarVocab::OPEN);
            }
            return v;
        }
        match self.stack.last() {
            None => vec![GrammarVocab::EOS],
            Some(Need::Op) => GrammarVocab::OPS.to_vec(),
            Some(_) => vec![GrammarVocab::CLOSE],
        }
    }

    fn feed(&mut self, t: usize) -> bool {
        if !self.legal().contains(&t) {
            return false;
        }
        match t {
            GrammarVocab::BOS => self.started = true,
            GrammarVocab::EOS => self.finished = true,
            GrammarVocab::OPEN => self.stack.push(Need::Expr),
            GrammarVocab::CLOSE => {
                self.stack.pop();
                self.complete_expr();
            }
            t if GrammarVocab::OPS.contains(&t) => *self.stack.last_mut().unwrap() = Need::SecondExpr,
            _ => self.complete_expr(),
        }
        true
    }
}

/// Tokens that may legally follow `prefix`, or `None` if the prefix itself
/// is not a grammar prefix.
pub fn legal_continuations(prefix: &[usize]) -> Option<Vec<usize>> {
    let mut r = Recogniser::default();
    prefix.iter().all(|&t| r.feed(t)).then(|| r.legal())
}

pub fn is_valid_expression(tokens: &[usize]) -> bool {
    let mut r = Recogniser::default();
    tokens.iter().all(|&t| r.feed(t)) && r.finished
}
