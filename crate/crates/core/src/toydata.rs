//! Synthetic chained-arithmetic tasks rendered in a character-level vocabulary.
//!
//! A problem such as `3+4*2` becomes the sequence `^3+4*2=3+8=11$`: the
//! question, then one reduction step per operator (multiplications first,
//! then additions/subtractions, each left to right), then the end-of-answer
//! symbol. The final answer is the text after the last `=`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tuner::{Corpus, RlTask, RlTaskSet};

/// Symbol table, in token-id order.
pub const SYMBOLS: [char; 16] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '-', '*', '=', '$', '^',
];
pub const PLUS: u32 = 10;
pub const MINUS: u32 = 11;
pub const TIMES: u32 = 12;
pub const EQUALS: u32 = 13;
/// Terminates the answer.
pub const END: u32 = 14;
pub const BOS: u32 = 15;
pub const VOCAB_SIZE: usize = SYMBOLS.len();

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| {
            SYMBOLS
                .iter()
                .position(|&s| s == c)
                .map(|p| p as u32)
                .ok_or_else(|| Error::Unexpressible(c.to_string()))
        })
        .collect()
}

pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| SYMBOLS.get(t as usize).copied().unwrap_or('?'))
        .collect()
}

/// Extracts the answer from a completion: everything before the first
/// [`END`], after the last [`EQUALS`]. Returns `None` unless that span is a
/// non-empty, optionally negative, integer.
pub fn extract_answer(completion: &[u32]) -> Option<&[u32]> {
    let end = completion.iter().position(|&t| t == END)?;
    let body = &completion[..end];
    let start = body.iter().rposition(|&t| t == EQUALS).map_or(0, |p| p + 1);
    let ans = &body[start..];
    let digits = match ans.first() {
        Some(&MINUS) => &ans[1..],
        _ => ans,
    };
    (!digits.is_empty() && digits.iter().all(|&t| t <= 9)).then_some(ans)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Operator {
    Add,
    Sub,
    Mul,
}

impl Operator {
    pub fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
        }
    }

    pub fn parse(c: char) -> Result<Self> {
        match c {
            '+' => Ok(Operator::Add),
            '-' => Ok(Operator::Sub),
            '*' => Ok(Operator::Mul),
            other => Err(Error::Unexpressible(format!("operator `{other}`"))),
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Operator::Add => a + b,
            Operator::Sub => a - b,
            Operator::Mul => a * b,
        }
    }
}

/// One arithmetic problem: `operands[0] op[0] operands[1] ...`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Problem {
    pub operands: Vec<i64>,
    pub operators: Vec<Operator>,
}

impl Problem {
    fn render(operands: &[i64], operators: &[Operator]) -> String {
        let mut s = operands[0].to_string();
        for (op, v) in operators.iter().zip(&operands[1..]) {
            s.push(op.symbol());
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn question(&self) -> String {
        Self::render(&self.operands, &self.operators)
    }

    /// Every intermediate expression after one reduction, ending with the value.
    pub fn steps(&self) -> Vec<String> {
        let mut vals = self.operands.clone();
        let mut ops = self.operators.clone();
        let mut out = Vec::with_capacity(ops.len());
        while !ops.is_empty() {
            let i = ops
                .iter()
                .position(|&o| o == Operator::Mul)
                .unwrap_or(0);
            let v = ops[i].apply(vals[i], vals[i + 1]);
            vals.splice(i..=i + 1, [v]);
            ops.remove(i);
            out.push(Self::render(&vals, &ops));
        }
        out
    }

    pub fn answer(&self) -> i64 {
        self.steps()
            .last()
            .map(|s| s.parse().expect("final step is an integer"))
            .unwrap_or(self.operands[0])
    }

    /// `^question=`
    pub fn prompt_text(&self) -> String {
        format!("^{}=", self.question())
    }

    /// Chain of thought after the prompt, through the end symbol.
    pub fn completion_text(&self) -> String {
        let steps = self.steps();
        if steps.is_empty() {
            return format!("{}$", self.question());
        }
        format!("{}$", steps.join("="))
    }

    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt_text(), self.completion_text())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub operators: Vec<char>,
    pub operand_min: i64,
    pub operand_max: i64,
    pub num_ops: usize,
    pub seed: u64,
    pub train_size: usize,
    pub rl_size: usize,
    pub bench_size: usize,
    pub max_seq_len: usize,
    pub shards: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            operators: vec!['+', '*'],
            operand_min: 0,
            operand_max: 9,
            num_ops: 2,
            seed: 0,
            train_size: 1600,
            rl_size: 200,
            bench_size: 200,
            max_seq_len: 32,
            shards: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub corpus: Corpus,
    pub rl_tasks: RlTaskSet,
    pub benchmark: RlTaskSet,
    /// Problems behind each split, for auditing.
    pub train_problems: Vec<Problem>,
    pub rl_problems: Vec<Problem>,
    pub bench_problems: Vec<Problem>,
}

fn to_task(p: &Problem) -> Result<RlTask> {
    Ok(RlTask {
        prompt: encode(&p.prompt_text())?,
        answer: encode(&p.answer().to_string())?,
    })
}

/// Generates disjoint training, RL, and benchmark splits.
pub fn generate_toy_corpus(spec: &ToyTaskSpec) -> Result<ToyData> {
    if spec.operand_min < 0 {
        return Err(Error::Unexpressible(format!(
            "negative operand {} (no unary minus in questions)",
            spec.operand_min
        )));
    }
    if spec.operand_max < spec.operand_min || spec.operators.is_empty() {
        return Err(Error::InvalidConfig(format!("empty problem space in {spec:?}")));
    }
    let ops: Vec<Operator> = spec
        .operators
        .iter()
        .map(|&c| Operator::parse(c))
        .collect::<Result<_>>()?;
    let total = spec.train_size + spec.rl_size + spec.bench_size;
    let range = (spec.operand_max - spec.operand_min + 1) as u128;
    let space = range
        .checked_pow(spec.num_ops as u32 + 1)
        .and_then(|v| v.checked_mul((ops.len() as u128).pow(spec.num_ops as u32)));
    if let Some(space) = space {
        if (total as u128) > space {
            return Err(Error::InvalidConfig(format!(
                "requested {total} distinct problems but only {space} exist"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut problems: Vec<Problem> = match space {
        Some(space) if space <= 200_000 => {
            let mut all = enumerate(spec, &ops);
            all.shuffle(&mut rng);
            all.truncate(total);
            all
        }
        _ => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(total);
            while out.len() < total {
                let p = Problem {
                    operands: (0..=spec.num_ops)
                        .map(|_| rng.random_range(spec.operand_min..=spec.operand_max))
                        .collect(),
                    operators: (0..spec.num_ops)
                        .map(|_| ops[rng.random_range(0..ops.len())])
                        .collect(),
                };
                if seen.insert(p.clone()) {
                    out.push(p);
                }
            }
            out
        }
    };

    for p in &problems {
        let text = p.full_text();
        if text.chars().count() > spec.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: text.chars().count(),
                max: spec.max_seq_len,
            });
        }
    }

    let bench_problems = problems.split_off(spec.train_size + spec.rl_size);
    let rl_problems = problems.split_off(spec.train_size);
    let train_problems = problems;

    let sequences = train_problems
        .iter()
        .map(|p| encode(&p.full_text()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyData {
        corpus: Corpus::new(sequences, spec.shards.max(1))?,
        rl_tasks: RlTaskSet::new(rl_problems.iter().map(to_task).collect::<Result<_>>()?),
        benchmark: RlTaskSet::new(bench_problems.iter().map(to_task).collect::<Result<_>>()?),
        train_problems,
        rl_problems,
        bench_problems,
    })
}

fn enumerate(spec: &ToyTaskSpec, ops: &[Operator]) -> Vec<Problem> {
    let mut out = vec![Problem {
        operands: vec![],
        operators: vec![],
    }];
    for slot in 0..=spec.num_ops {
        let mut next = Vec::new();
        for p in &out {
            for v in spec.operand_min..=spec.operand_max {
                if slot == 0 {
                    next.push(Problem {
                        operands: vec![v],
                        operators: vec![],
                    });
                } else {
                    for &o in ops {
                        let mut q = p.clone();
                        q.operands.push(v);
                        q.operators.push(o);
                        next.push(q);
                    }
                }
            }
        }
        out = next;
    }
    out
}
