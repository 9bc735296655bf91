use std::collections::BTreeSet;

use prunetune::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint};
use prunetune::io::content_hash;
use prunetune::toydata::{self, generate_toy_corpus, ToyTaskSpec};
use prunetune::{Error, ModelConfig, TransformerModel};

/// Recursive-descent evaluator over `+ - *` with a leading unary minus.
struct Eval<'a> {
    s: &'a [u8],
    i: usize,
}

impl Eval<'_> {
    fn number(&mut self) -> i64 {
        let neg = self.s.get(self.i) == Some(&b'-');
        if neg {
            self.i += 1;
        }
        let start = self.i;
        while self.i < self.s.len() && self.s[self.i].is_ascii_digit() {
            self.i += 1;
        }
        assert!(self.i > start, "expected a number at {}", self.i);
        let v: i64 = std::str::from_utf8(&self.s[start..self.i]).unwrap().parse().unwrap();
        if neg {
            -v
        } else {
            v
        }
    }

    fn term(&mut self) -> i64 {
        let mut v = self.number();
        while self.s.get(self.i) == Some(&b'*') {
            self.i += 1;
            v *= self.number();
        }
        v
    }

    fn expr(&mut self) -> i64 {
        let mut v = self.term();
        while let Some(&c) = self.s.get(self.i) {
            self.i += 1;
            match c {
                b'+' => v += self.term(),
                b'-' => v -= self.term(),
                _ => panic!("unexpected `{}`", c as char),
            }
        }
        v
    }
}

fn evaluate(text: &str) -> i64 {
    Eval { s: text.as_bytes(), i: 0 }.expr()
}

fn spec() -> ToyTaskSpec {
    ToyTaskSpec {
        operators: vec!['+', '-', '*'],
        num_ops: 3,
        train_size: 1500,
        rl_size: 300,
        bench_size: 300,
        shards: 3,
        ..ToyTaskSpec::default()
    }
}

#[test]
fn every_chain_of_thought_step_matches_an_independent_evaluator() {
    let data = generate_toy_corpus(&spec()).unwrap();
    assert_eq!(data.corpus.sequences().len(), 1500);
    for seq in data.corpus.sequences() {
        let text = toydata::decode(seq);
        assert!(seq.len() <= 32, "{text}");
        let body = text.strip_prefix('^').unwrap().strip_suffix('$').unwrap();
        let parts: Vec<&str> = body.split('=').collect();
        let value = evaluate(parts[0]);
        for step in &parts[1..] {
            assert_eq!(evaluate(step), value, "{text}");
        }
        let last = parts.last().unwrap();
        assert_eq!(last.parse::<i64>().unwrap(), value, "{text}");
    }
    for (p, t) in data.bench_problems.iter().zip(&data.benchmark.tasks) {
        let q = toydata::decode(&t.prompt);
        assert_eq!(q, format!("^{}=", p.question()));
        assert_eq!(toydata::decode(&t.answer), evaluate(&p.question()).to_string());
    }
}

#[test]
fn splits_are_disjoint_and_generation_is_pure() {
    let data = generate_toy_corpus(&spec()).unwrap();
    let train: BTreeSet<_> = data.train_problems.iter().collect();
    let rl: BTreeSet<_> = data.rl_problems.iter().collect();
    let bench: BTreeSet<_> = data.bench_problems.iter().collect();
    assert_eq!(train.len() + rl.len() + bench.len(), 2100);
    assert!(train.is_disjoint(&rl) && train.is_disjoint(&bench) && rl.is_disjoint(&bench));
    let again = generate_toy_corpus(&spec()).unwrap();
    assert_eq!(data.corpus.sequences(), again.corpus.sequences());
    assert_eq!(data.benchmark, again.benchmark);
}

fn model() -> TransformerModel {
    TransformerModel::init(8, ModelConfig::new(16, 12, 3, 20, vec![20, 7, 33])).unwrap()
}

#[test]
fn manifest_offsets_match_shape_arithmetic() {
    let m = model();
    let bytes = encode_checkpoint(&m);
    let (_, entries, start) = read_header(&bytes).unwrap();
    let mut expected = 0usize;
    for (e, (name, t)) in entries.iter().zip(m.named_tensors()) {
        assert_eq!(e.name, name);
        assert_eq!(e.offset, expected);
        expected += 4 * e.shape.iter().product::<usize>();
        let raw: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(&bytes[start + e.offset..start + e.offset + raw.len()], &raw[..]);
    }
    assert_eq!(bytes.len(), start + expected);
}

#[test]
fn save_load_preserves_every_tensor_hash() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(m.tensor_hashes(), back.tensor_hashes());
    assert_eq!(content_hash(&encode_checkpoint(&back)), content_hash(&std::fs::read(&path).unwrap()));
}

#[test]
fn truncated_payload_is_a_structured_error() {
    let bytes = encode_checkpoint(&model());
    match decode_checkpoint(&bytes[..bytes.len() - 1]) {
        Err(Error::TruncatedPayload { expected, found }) => assert_eq!(expected, found + 1),
        other => panic!("expected a truncated-payload error, got {other:?}"),
    }
}
