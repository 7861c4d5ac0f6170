//! Context-gated synthetic matching task, its two reference classifiers and
//! JSONL dataset files.
//!
//! Token layout (ids below 3 are `[PAD]`, `[CLS]`, `[SEP]`):
//!
//! | id | role |
//! |----|------|
//! | 3, 4 | gate `G+`, `G-` |
//! | 5, 6 | cue `M+`, `M-` |
//! | 7.. | filler |
//!
//! Each sequence holds exactly one cue. One gate token sits in `a` or in
//! `b`, chosen at random. The two cues agree or disagree, and the gate says
//! which of the two counts as a match: the label is 1 iff
//! `(cue_a == cue_b) == (gate == G+)`. Neither sequence alone, nor the cue
//! pair without the gate, says anything about the label.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::init::seeded;
use crate::model::{Example, FIRST_ORDINARY_TOKEN};

pub const GATE_PLUS: usize = FIRST_ORDINARY_TOKEN;
pub const GATE_MINUS: usize = FIRST_ORDINARY_TOKEN + 1;
pub const CUE_PLUS: usize = FIRST_ORDINARY_TOKEN + 2;
pub const CUE_MINUS: usize = FIRST_ORDINARY_TOKEN + 3;
pub const FIRST_FILLER: usize = FIRST_ORDINARY_TOKEN + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that an example's label follows the gate rule.
    pub gate_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            seq_len: 8,
            n_train: 2000,
            n_test: 500,
            gate_strength: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 3 {
            return Err(invalid(format!("seq_len {} < 3", self.seq_len)));
        }
        if self.vocab_size <= FIRST_FILLER {
            return Err(invalid(format!(
                "vocab_size {} leaves no filler tokens (need > {FIRST_FILLER})",
                self.vocab_size
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(invalid("n_train and n_test must be at least 1"));
        }
        if !(self.gate_strength > 0.5 && self.gate_strength <= 1.0) {
            return Err(invalid(format!(
                "gate strength {} outside (0.5, 1]",
                self.gate_strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn make_split(spec: &SyntheticSpec, n: usize, rng: &mut crate::init::Rng64) -> Vec<Example> {
    let l = spec.seq_len;
    let mut out: Vec<Example> = (0..n)
        .map(|k| {
            let label = k % 2;
            let cue_a_plus = rng.random::<bool>();
            let cue_b_plus = rng.random::<bool>();
            let follows_rule = rng.random::<f64>() < spec.gate_strength;
            // Under the rule, label 1 <=> (cues agree) == (gate is G+).
            let agree = cue_a_plus == cue_b_plus;
            let rule_label = usize::from(follows_rule) == label;
            let gate_plus = if rule_label { agree } else { !agree };
            let gate = if gate_plus { GATE_PLUS } else { GATE_MINUS };
            let mut filler = |len| -> Vec<usize> {
                (0..len)
                    .map(|_| rng.random_range(FIRST_FILLER..spec.vocab_size))
                    .collect()
            };
            let mut a = filler(l);
            let mut b = filler(l);
            let pa = rng.random_range(0..l);
            let pb = rng.random_range(0..l);
            a[pa] = if cue_a_plus { CUE_PLUS } else { CUE_MINUS };
            b[pb] = if cue_b_plus { CUE_PLUS } else { CUE_MINUS };
            let (seq, taken) = if rng.random::<bool>() { (&mut a, pa) } else { (&mut b, pb) };
            let mut slot = rng.random_range(0..l - 1);
            if slot >= taken {
                slot += 1;
            }
            seq[slot] = gate;
            Example {
                seq_a: a,
                seq_b: b,
                label,
            }
        })
        .collect();
    out.shuffle(rng);
    out
}

/// Balanced train and test splits; identical specs give identical data.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let train = make_split(spec, spec.n_train, &mut rng);
    let test = make_split(spec, spec.n_test, &mut rng);
    Ok(Dataset { train, test })
}

/// Reads the gate and both cues and applies the rule; `None` when the
/// example does not carry them.
pub fn rule_oracle(ex: &Example) -> Option<usize> {
    let cue = |s: &[usize]| s.iter().find(|&&t| t == CUE_PLUS || t == CUE_MINUS).copied();
    let gate = ex
        .seq_a
        .iter()
        .chain(&ex.seq_b)
        .find(|&&t| t == GATE_PLUS || t == GATE_MINUS)?;
    let agree = cue(&ex.seq_a)? == cue(&ex.seq_b)?;
    Some(usize::from(agree == (*gate == GATE_PLUS)))
}

pub fn rule_oracle_accuracy(data: &[Example]) -> f64 {
    let hits = data
        .iter()
        .filter(|e| rule_oracle(e) == Some(e.label))
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Number of distinct tokens the two sequences share.
pub fn token_overlap(ex: &Example) -> usize {
    let a: std::collections::BTreeSet<usize> = ex.seq_a.iter().copied().collect();
    let b: std::collections::BTreeSet<usize> = ex.seq_b.iter().copied().collect();
    a.intersection(&b).count()
}

/// Bag-of-tokens overlap classifier: `label = [overlap >= t]` or its
/// complement, with threshold and direction fitted on `train`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapBaseline {
    pub threshold: usize,
    pub positive_above: bool,
}

impl OverlapBaseline {
    pub fn fit(train: &[Example]) -> Self {
        let max = train.iter().map(token_overlap).max().unwrap_or(0);
        let mut best = (0usize, Self { threshold: 0, positive_above: true });
        for threshold in 0..=max + 1 {
            for positive_above in [true, false] {
                let cand = Self { threshold, positive_above };
                let hits = train.iter().filter(|e| cand.predict(e) == e.label).count();
                if hits > best.0 {
                    best = (hits, cand);
                }
            }
        }
        best.1
    }

    pub fn predict(&self, ex: &Example) -> usize {
        usize::from((token_overlap(ex) >= self.threshold) == self.positive_above)
    }

    pub fn accuracy(&self, data: &[Example]) -> f64 {
        let hits = data.iter().filter(|e| self.predict(e) == e.label).count();
        hits as f64 / data.len().max(1) as f64
    }
}

pub fn write_jsonl(path: &Path, data: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in data {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
