//! Synthetic multiple-choice task with a plantable shortcut.
//!
//! Each sequence is `[rule tokens][answer letters, marker inserted][CUE]`.
//! The gold answer is the majority class among the rule (content) tokens.
//! A MARKER token sits immediately before one answer letter; in the train
//! and in-distribution splits it points at the gold letter with probability
//! `rho`, so a model can learn either the real majority rule or the marker
//! shortcut. The out-of-distribution split places the marker uniformly,
//! which breaks the shortcut.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const CUE_TOKEN: u32 = 6;
pub const MARKER_TOKEN: u32 = 7;
pub const CONTENT_BASE: u32 = 8;

/// Token id of answer letter for class `c` (classes are 0-based).
pub fn letter_token(class: usize) -> u32 {
    1 + class as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub rule_arity: usize,
    /// Probability the marker points at the gold letter in train/id splits.
    pub rho: f64,
    pub vocab_size: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_id_test: usize,
    pub n_ood_test: usize,
    pub n_adaptation: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_classes: 4,
            rule_arity: 5,
            rho: 0.95,
            vocab_size: 64,
            seed: 0,
            // small enough that the marker shortcut wins over the rule
            n_train: 512,
            n_id_test: 512,
            n_ood_test: 512,
            n_adaptation: 10,
        }
    }
}

impl TaskSpec {
    pub fn tokens_per_class(&self) -> usize {
        (self.vocab_size - CONTENT_BASE as usize) / self.n_classes
    }

    pub fn seq_len(&self) -> usize {
        self.rule_arity + self.n_classes + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Input("need at least 2 answer classes".into()));
        }
        if self.n_classes as u32 + 1 > CUE_TOKEN {
            return Err(Error::Input(format!(
                "answer letters for {} classes collide with reserved tokens",
                self.n_classes
            )));
        }
        if self.rule_arity % 2 == 0 || self.rule_arity < 3 {
            return Err(Error::Input(format!(
                "rule_arity must be odd and >= 3, got {}",
                self.rule_arity
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Input(format!("rho {} outside [0,1]", self.rho)));
        }
        if self.vocab_size <= CONTENT_BASE as usize
            || self.tokens_per_class() < 2
        {
            return Err(Error::Input(format!(
                "vocab {} too small for {} content classes",
                self.vocab_size, self.n_classes
            )));
        }
        if self.n_adaptation == 0 {
            return Err(Error::Input("adaptation split must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
    Adaptation,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "id_test" => Ok(Split::IdTest),
            "ood_test" => Ok(Split::OodTest),
            "adaptation" => Ok(Split::Adaptation),
            other => Err(Error::Input(format!(
                "unknown split `{other}` (expected train|id_test|ood_test|adaptation)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
            Split::Adaptation => "adaptation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqSample {
    pub tokens: Vec<u32>,
    /// Token ids of the answer letters, in class order.
    pub answer_tokens: Vec<u32>,
    /// Gold class (majority class of the rule tokens), 0-based.
    pub label: usize,
    pub split: Split,
    /// Whether the marker sits next to the gold answer letter.
    pub marker: bool,
}

/// Majority class of the rule tokens, recomputed from the sequence alone.
/// Returns None for malformed sequences or non-strict majorities.
pub fn majority_oracle(tokens: &[u32], spec: &TaskSpec) -> Option<usize> {
    let tpc = spec.tokens_per_class();
    let mut counts = vec![0usize; spec.n_classes];
    for &t in tokens.get(..spec.rule_arity)? {
        if t < CONTENT_BASE {
            return None;
        }
        let class = (t - CONTENT_BASE) as usize / tpc;
        if class >= spec.n_classes {
            return None;
        }
        counts[class] += 1;
    }
    let best = *counts.iter().max().unwrap();
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (class, _) = winners.next()?;
    if winners.next().is_some() {
        return None; // tie: not a valid sample
    }
    Some(class)
}

/// Class the marker points at, recomputed from the sequence alone.
pub fn marker_oracle(tokens: &[u32], spec: &TaskSpec) -> Option<usize> {
    let pos = tokens.iter().position(|&t| t == MARKER_TOKEN)?;
    let next = *tokens.get(pos + 1)?;
    if next >= 1 && next <= spec.n_classes as u32 {
        Some((next - 1) as usize)
    } else {
        None
    }
}

fn gen_sample(spec: &TaskSpec, split: Split, marker_matches: bool, rng: &mut ChaCha8Rng) -> McqSample {
    let k = spec.n_classes;
    let tpc = spec.tokens_per_class();
    let gold = rng.gen_range(0..k);

    // strict majority: gold gets arity/2+1 slots, the rest go to other
    // classes (never enough of any one to reach the gold count)
    let maj = spec.rule_arity / 2 + 1;
    let mut classes = vec![gold; maj];
    for _ in maj..spec.rule_arity {
        let mut c = rng.gen_range(0..k - 1);
        if c >= gold {
            c += 1;
        }
        classes.push(c);
    }
    // Fisher-Yates shuffle of the rule slots
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.gen_range(0..=i));
    }
    let mut tokens: Vec<u32> = classes
        .iter()
        .map(|&c| CONTENT_BASE + (c * tpc + rng.gen_range(0..tpc)) as u32)
        .collect();

    let marker = if marker_matches {
        gold
    } else {
        let mut m = rng.gen_range(0..k - 1);
        if m >= gold {
            m += 1;
        }
        m
    };
    for c in 0..k {
        if c == marker {
            tokens.push(MARKER_TOKEN);
        }
        tokens.push(letter_token(c));
    }
    tokens.push(CUE_TOKEN);

    McqSample {
        tokens,
        answer_tokens: (0..k).map(letter_token).collect(),
        label: gold,
        split,
        marker: marker == gold,
    }
}

/// Generate all four splits. Train and id_test draw marker agreement i.i.d.
/// with probability `rho`; ood_test places the marker uniformly over classes;
/// the adaptation split gets an exact, stratified `round((1-rho)*n)` (at
/// least 1) marker mismatches so a small validation set is informative.
pub fn generate(spec: &TaskSpec) -> Result<Vec<McqSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_train + spec.n_id_test + spec.n_ood_test + spec.n_adaptation);
    for _ in 0..spec.n_train {
        let matches = rng.gen_bool(spec.rho);
        out.push(gen_sample(spec, Split::Train, matches, &mut rng));
    }
    for _ in 0..spec.n_id_test {
        let matches = rng.gen_bool(spec.rho);
        out.push(gen_sample(spec, Split::IdTest, matches, &mut rng));
    }
    for _ in 0..spec.n_ood_test {
        // uniform marker: it agrees with gold exactly when the uniform draw
        // hits the gold class
        let matches = rng.gen_range(0..spec.n_classes) == 0;
        out.push(gen_sample(spec, Split::OodTest, matches, &mut rng));
    }
    let n = spec.n_adaptation;
    let n_mismatch = (((1.0 - spec.rho) * n as f64).round() as usize).clamp(1, n);
    let mut mismatch = vec![false; n];
    for slot in mismatch.iter_mut().take(n_mismatch) {
        *slot = true;
    }
    for i in (1..n).rev() {
        mismatch.swap(i, rng.gen_range(0..=i));
    }
    for m in mismatch {
        out.push(gen_sample(spec, Split::Adaptation, !m, &mut rng));
    }
    Ok(out)
}

pub fn filter_split<'a>(samples: &'a [McqSample], split: Split) -> Vec<&'a McqSample> {
    samples.iter().filter(|s| s.split == split).collect()
}

pub fn save_jsonl(path: &std::path::Path, samples: &[McqSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(std::io::Error::from)?;
        buf.write_all(b"\n")?;
    }
    crate::util::atomic_write(path, &buf)
}

pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<McqSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Jsonl {
                line: i + 1,
                field: "record".into(),
                msg: e.to_string(),
            })?;
        let sample: McqSample =
            serde_json::from_value(value.clone()).map_err(|e| Error::Jsonl {
                line: i + 1,
                field: jsonl_field(&e.to_string()),
                msg: e.to_string(),
            })?;
        if sample.label >= sample.answer_tokens.len() {
            return Err(Error::Jsonl {
                line: i + 1,
                field: "label".into(),
                msg: format!(
                    "label {} out of range for {} answers",
                    sample.label,
                    sample.answer_tokens.len()
                ),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

fn jsonl_field(msg: &str) -> String {
    // serde_json reports "missing field `x`" / "invalid type ... `x`"; pull
    // the backticked name when present.
    if let Some(start) = msg.find('`') {
        if let Some(end) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + end].to_string();
        }
    }
    "record".into()
}
