//! Synthetic long-range classification tasks.
//!
//! Token layout shared by every task:
//!
//! | ids                         | use                          |
//! |-----------------------------|------------------------------|
//! | 0                           | padding                      |
//! | 1                           | query marker                 |
//! | 2 .. 2+C                    | class symbols                |
//! | 2+C .. 2+C+A                | keys / operators             |
//! | 2+C+A .. 2+C+2A             | filler                       |
//!
//! with `C = n_classes` and `A = alphabet_size`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUERY: usize = 1;
const CLASS_BASE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// The class symbol at position 0 must be reported at the end.
    Copy,
    /// Key-value pairs open the sequence; the final token names a key whose
    /// value is the label.
    KvRetrieval,
    /// Nested prefix expressions over digits.
    ListopsMini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alphabet_size: usize,
    pub total_len: usize,
    pub n_classes: usize,
    /// Pairs shown in a key-value sequence.
    pub n_pairs: usize,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        CLASS_BASE + self.n_classes + 2 * self.alphabet_size
    }

    fn key_base(&self) -> usize {
        CLASS_BASE + self.n_classes
    }

    fn filler_base(&self) -> usize {
        self.key_base() + self.alphabet_size
    }

    pub fn class_token(&self, class: usize) -> usize {
        CLASS_BASE + class
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 || self.alphabet_size < 1 {
            return Err(Error::InvalidArgument("n_classes and alphabet_size must be positive".into()));
        }
        match self.kind {
            TaskKind::Copy if self.total_len < 2 => {
                Err(Error::InvalidArgument("copy needs at least 2 tokens".into()))
            }
            TaskKind::KvRetrieval if self.n_pairs == 0 || self.n_pairs > self.alphabet_size => Err(Error::InvalidArgument(
                format!("kv_retrieval needs 1..={} pairs, got {}", self.alphabet_size, self.n_pairs),
            )),
            TaskKind::KvRetrieval if self.total_len < 2 * self.n_pairs + 2 => Err(Error::InvalidArgument(format!(
                "{} pairs plus the query need {} tokens, total_len is {}",
                self.n_pairs,
                2 * self.n_pairs + 2,
                self.total_len
            ))),
            TaskKind::ListopsMini if self.n_classes != 10 => {
                Err(Error::InvalidArgument("listops_mini has exactly 10 classes (digits)".into()))
            }
            TaskKind::ListopsMini if self.alphabet_size < LISTOPS_SYMBOLS => {
                Err(Error::InvalidArgument(format!("listops_mini needs alphabet_size >= {LISTOPS_SYMBOLS}")))
            }
            TaskKind::ListopsMini if self.total_len < 5 => {
                Err(Error::InvalidArgument("listops_mini needs total_len >= 5".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic dataset for `spec`.
pub fn gen_task(spec: &TaskSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_samples)
        .map(|_| match spec.kind {
            TaskKind::Copy => Ok(gen_copy(spec, &mut rng)),
            TaskKind::KvRetrieval => Ok(gen_kv(spec, &mut rng)),
            TaskKind::ListopsMini => gen_listops(spec, &mut rng),
        })
        .collect()
}

fn filler<R: Rng>(spec: &TaskSpec, rng: &mut R) -> usize {
    spec.filler_base() + rng.random_range(0..spec.alphabet_size)
}

fn gen_copy<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Example {
    let label = rng.random_range(0..spec.n_classes);
    let mut tokens = Vec::with_capacity(spec.total_len);
    tokens.push(spec.class_token(label));
    while tokens.len() < spec.total_len - 1 {
        tokens.push(filler(spec, rng));
    }
    tokens.push(QUERY);
    Example { tokens, label }
}

fn gen_kv<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Example {
    let mut keys: Vec<usize> = (0..spec.alphabet_size).collect();
    keys.shuffle(rng);
    keys.truncate(spec.n_pairs);
    let values: Vec<usize> = (0..spec.n_pairs).map(|_| rng.random_range(0..spec.n_classes)).collect();
    let pick = rng.random_range(0..spec.n_pairs);
    let mut tokens = Vec::with_capacity(spec.total_len);
    for (k, v) in keys.iter().zip(&values) {
        tokens.push(spec.key_base() + k);
        tokens.push(spec.class_token(*v));
    }
    while tokens.len() < spec.total_len - 2 {
        tokens.push(filler(spec, rng));
    }
    tokens.push(QUERY);
    tokens.push(spec.key_base() + keys[pick]);
    Example { tokens, label: values[pick] }
}

// ---- listops ---------------------------------------------------------------

const LISTOPS_SYMBOLS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListOp {
    Min,
    Max,
    Med,
    SumMod,
}

impl ListOp {
    const ALL: [ListOp; 4] = [ListOp::Min, ListOp::Max, ListOp::Med, ListOp::SumMod];

    fn name(self) -> &'static str {
        match self {
            ListOp::Min => "MIN",
            ListOp::Max => "MAX",
            ListOp::Med => "MED",
            ListOp::SumMod => "SM",
        }
    }

    fn apply(self, args: &[u8]) -> u8 {
        let mut sorted = args.to_vec();
        sorted.sort_unstable();
        match self {
            ListOp::Min => sorted[0],
            ListOp::Max => sorted[sorted.len() - 1],
            ListOp::Med => sorted[(sorted.len() - 1) / 2],
            ListOp::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ListExpr {
    Digit(u8),
    Op(ListOp, Vec<ListExpr>),
}

impl ListExpr {
    pub fn eval(&self) -> u8 {
        match self {
            ListExpr::Digit(d) => *d,
            ListExpr::Op(op, args) => op.apply(&args.iter().map(ListExpr::eval).collect::<Vec<_>>()),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            ListExpr::Digit(d) => d.to_string(),
            ListExpr::Op(op, args) => {
                let inner: Vec<String> = args.iter().map(ListExpr::to_text).collect();
                format!("[{} {}]", op.name(), inner.join(" "))
            }
        }
    }

    fn token_len(&self) -> usize {
        match self {
            ListExpr::Digit(_) => 1,
            ListExpr::Op(_, args) => 3 + args.iter().map(ListExpr::token_len).sum::<usize>(),
        }
    }

    /// Tokens: digits map to class symbols; `[`, `]` and the operators use
    /// the first six key symbols.
    fn tokens(&self, spec: &TaskSpec, out: &mut Vec<usize>) {
        match self {
            ListExpr::Digit(d) => out.push(spec.class_token(*d as usize)),
            ListExpr::Op(op, args) => {
                let kb = spec.key_base();
                out.push(kb);
                out.push(kb + 2 + ListOp::ALL.iter().position(|o| o == op).expect("known op"));
                for a in args {
                    a.tokens(spec, out);
                }
                out.push(kb + 1);
            }
        }
    }
}

/// Parse text such as `[MAX 2 [MIN 4 7] 1]`.
pub fn parse_listops(text: &str) -> Result<ListExpr> {
    let spaced = text.replace('[', " [ ").replace(']', " ] ");
    let tokens: Vec<&str> = spaced.split_whitespace().collect();
    let mut pos = 0;
    let expr = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::InvalidArgument(format!("trailing input after expression: {:?}", &tokens[pos..])));
    }
    Ok(expr)
}

fn parse_expr(tokens: &[&str], pos: &mut usize) -> Result<ListExpr> {
    let bad = |msg: &str| Error::InvalidArgument(format!("listops parse error: {msg}"));
    let tok = *tokens.get(*pos).ok_or_else(|| bad("unexpected end"))?;
    *pos += 1;
    if tok != "[" {
        let d: u8 = tok.parse().map_err(|_| bad(&format!("expected digit, got `{tok}`")))?;
        if d > 9 {
            return Err(bad("digits must be 0-9"));
        }
        return Ok(ListExpr::Digit(d));
    }
    let name = *tokens.get(*pos).ok_or_else(|| bad("missing operator"))?;
    *pos += 1;
    let op = ListOp::ALL.into_iter().find(|o| o.name() == name).ok_or_else(|| bad(&format!("unknown operator `{name}`")))?;
    let mut args = Vec::new();
    while tokens.get(*pos) != Some(&"]") {
        if *pos >= tokens.len() {
            return Err(bad("unclosed bracket"));
        }
        args.push(parse_expr(tokens, pos)?);
    }
    *pos += 1;
    if args.is_empty() {
        return Err(bad("operator without arguments"));
    }
    Ok(ListExpr::Op(op, args))
}

fn random_expr<R: Rng>(rng: &mut R, depth: usize, budget: usize) -> ListExpr {
    if depth == 0 || budget < 5 || rng.random_bool(0.3) {
        return ListExpr::Digit(rng.random_range(0..10));
    }
    let op = ListOp::ALL[rng.random_range(0..4)];
    let n_args = rng.random_range(2..=4usize);
    let mut remaining = budget - 3;
    let mut args = Vec::with_capacity(n_args);
    for i in 0..n_args {
        if remaining == 0 {
            break;
        }
        let share = (remaining / (n_args - i)).max(1);
        let a = random_expr(rng, depth - 1, share);
        remaining -= a.token_len().min(remaining);
        args.push(a);
    }
    ListExpr::Op(op, args)
}

fn gen_listops<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Result<Example> {
    // Draw the label first and reject expressions until one evaluates to it,
    // which keeps the classes balanced.
    let label = rng.random_range(0..10u8);
    for _ in 0..10_000 {
        let expr = random_expr(rng, 3, spec.total_len - 1);
        if expr.token_len() + 1 > spec.total_len || expr.eval() != label || matches!(expr, ListExpr::Digit(_)) {
            continue;
        }
        let mut tokens = Vec::with_capacity(spec.total_len);
        expr.tokens(spec, &mut tokens);
        while tokens.len() < spec.total_len - 1 {
            tokens.push(filler(spec, rng));
        }
        tokens.push(QUERY);
        return Ok(Example { tokens, label: label as usize });
    }
    Err(Error::InvalidArgument(format!("could not generate a listops expression for label {label}")))
}

/// Fraction of examples per class.
pub fn class_frequencies(data: &[Example], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for ex in data {
        counts[ex.label] += 1;
    }
    counts.iter().map(|&c| c as f64 / data.len().max(1) as f64).collect()
}
