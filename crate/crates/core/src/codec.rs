//! Compact token codec for the toy policy.
//!
//! Prompts are the history as value-bin tokens; completions follow
//! `<think> … </think> <answer> v_1 … v_h </answer> <end>` where the answer
//! body is one value token per forecast step and timestamps are implied by
//! the task. Decoding produces the same [`ParsedCompletion`] as the text
//! codec, so reward computation does not care which codec produced it.

use chrono::Duration;

use crate::policy::{Token, Vocab};
use crate::series::mean;
use crate::textio::{ForecastTask, ParsedCompletion, StructureFlags};

/// Fraction of the history range added on each side when placing bins.
pub const RANGE_MARGIN: f64 = 0.1;

/// Maps the vocabulary's unit-interval bins onto a task's value range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinScale {
    pub lo: f64,
    pub hi: f64,
}

impl BinScale {
    /// Observed history min/max, widened by [`RANGE_MARGIN`] of the range on
    /// each side. A flat history gets a unit-wide range around its level.
    pub fn from_history(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        if !(range > 1e-12) {
            let c = if values.is_empty() { 0.0 } else { mean(values) };
            return Self {
                lo: c - 0.5,
                hi: c + 0.5,
            };
        }
        Self {
            lo: min - RANGE_MARGIN * range,
            hi: max + RANGE_MARGIN * range,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn bin(&self, vocab: &Vocab, value: f64) -> u16 {
        vocab.bin_of_unit((value - self.lo) / self.width())
    }

    pub fn center(&self, vocab: &Vocab, bin: u16) -> f64 {
        self.lo + vocab.unit_center(bin) * self.width()
    }

    pub fn token(&self, vocab: &Vocab, value: f64) -> Token {
        Token::Value(self.bin(vocab, value))
    }

    /// Width of bin `b` in data units.
    pub fn bin_width(&self, vocab: &Vocab, bin: u16) -> f64 {
        let e = vocab.bin_edges();
        (e[bin as usize + 1] - e[bin as usize]) * self.width()
    }
}

/// Number of think tokens the synthetic teacher emits.
pub const THINK_LEN: usize = 3;

/// Prompt tokens plus the scale used to encode them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactPrompt {
    pub tokens: Vec<Token>,
    pub scale: BinScale,
}

pub fn encode_prompt(task: &ForecastTask, vocab: &Vocab) -> CompactPrompt {
    let values = task.history.values();
    let scale = BinScale::from_history(values);
    CompactPrompt {
        tokens: values.iter().map(|&v| scale.token(vocab, v)).collect(),
        scale,
    }
}

/// Teacher reasoning in token form: last observed level, then the maximum
/// and minimum of the target horizon.
pub fn compact_think(task: &ForecastTask, scale: &BinScale, vocab: &Vocab) -> Vec<Token> {
    let last = *task.history.values().last().expect("non-empty history");
    let truth = task.ground_truth();
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        scale.token(vocab, last),
        scale.token(vocab, max),
        scale.token(vocab, min),
    ]
}

pub fn encode_completion(think: &[Token], answer: &[f64], scale: &BinScale, vocab: &Vocab) -> Vec<Token> {
    let mut out = Vec::with_capacity(think.len() + answer.len() + 5);
    out.push(Token::ThinkOpen);
    out.extend_from_slice(think);
    out.push(Token::ThinkClose);
    out.push(Token::AnswerOpen);
    out.extend(answer.iter().map(|&v| scale.token(vocab, v)));
    out.push(Token::AnswerClose);
    out.push(Token::End);
    out
}

fn unique_pair(tokens: &[Token], open: Token, close: Token) -> Option<(usize, usize)> {
    let opens: Vec<usize> = positions(tokens, open);
    let closes: Vec<usize> = positions(tokens, close);
    match (opens.as_slice(), closes.as_slice()) {
        ([o], [c]) if o < c => Some((*o, *c)),
        _ => None,
    }
}

fn positions(tokens: &[Token], t: Token) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == t)
        .map(|(i, _)| i)
        .collect()
}

/// Decodes compact completion tokens against a task. Tokens after the first
/// `<end>` are ignored; validity mirrors the text codec.
pub fn decode_completion(tokens: &[Token], task: &ForecastTask, scale: &BinScale, vocab: &Vocab) -> ParsedCompletion {
    let end = tokens.iter().position(|&t| t == Token::End).unwrap_or(tokens.len());
    let tokens = &tokens[..end];
    let think = unique_pair(tokens, Token::ThinkOpen, Token::ThinkClose);
    let answer = unique_pair(tokens, Token::AnswerOpen, Token::AnswerClose);
    let answer_after_think = matches!((think, answer), (Some((_, tc)), Some((ao, _))) if ao > tc);

    let body: &[Token] = match answer {
        Some((o, c)) => &tokens[o + 1..c],
        None => match tokens.iter().position(|&t| t == Token::AnswerOpen) {
            Some(o) => {
                let rest = &tokens[o + 1..];
                let stop = rest.iter().position(|&t| t == Token::AnswerClose).unwrap_or(rest.len());
                &rest[..stop]
            }
            None => &[],
        },
    };
    let start = task.target.start();
    let step = task.target.step();
    let mut rows = Vec::new();
    let mut skipped = 0;
    for tok in body {
        match tok {
            Token::Value(b) => {
                let ts = start + Duration::seconds(step.num_seconds() * rows.len() as i64);
                rows.push((ts, scale.center(vocab, *b)));
            }
            Token::Newline => {}
            _ => skipped += 1,
        }
    }
    let think_text = think
        .map(|(o, c)| {
            tokens[o + 1..c]
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_default();
    ParsedCompletion {
        think_text,
        flags: StructureFlags {
            think_tags: think.is_some(),
            answer_tags: answer.is_some() && answer_after_think,
            answer_parseable: !rows.is_empty(),
        },
        answer_rows: rows,
        skipped_rows: skipped,
    }
}

/// Answer value tokens in order (best effort, same span rule as decoding).
pub fn answer_bins(tokens: &[Token]) -> Vec<u16> {
    let Some(o) = tokens.iter().position(|&t| t == Token::AnswerOpen) else {
        return vec![];
    };
    tokens[o + 1..]
        .iter()
        .take_while(|&&t| t != Token::AnswerClose && t != Token::End)
        .filter_map(|t| match t {
            Token::Value(b) => Some(*b),
            _ => None,
        })
        .collect()
}
