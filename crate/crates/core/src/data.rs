//! Synthetic token-classification data.
//!
//! Token 0 is padding. Label `c` owns the signal tokens
//! `1 + c*m .. 1 + (c+1)*m` (with `m = signal_tokens_per_label`); every other
//! token id is noise. An example of length `len` carries an odd number of
//! signal tokens (roughly half its length), each of which is swapped for a
//! signal token of another label with probability `noise_rate`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, PAD};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub n_labels: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub signal_tokens_per_label: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_examples: 10_000,
            n_labels: 3,
            vocab_size: 64,
            seq_len: 8,
            signal_tokens_per_label: 4,
            noise_rate: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels < 2 {
            return Err(Error::Config("at least two labels are required".into()));
        }
        if self.signal_tokens_per_label == 0 {
            return Err(Error::Config("signal_tokens_per_label must be at least 1".into()));
        }
        let first_noise = 1 + self.n_labels * self.signal_tokens_per_label;
        if self.vocab_size <= first_noise {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no noise tokens (needs > {first_noise})",
                self.vocab_size
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.n_examples < 10 {
            return Err(Error::Config("need at least 10 examples to split".into()));
        }
        Ok(())
    }

    /// The label owning `token`, if it is a signal token.
    pub fn signal_label(&self, token: usize) -> Option<usize> {
        let m = self.signal_tokens_per_label;
        (token >= 1 && token < 1 + self.n_labels * m).then(|| (token - 1) / m)
    }

    /// Majority vote over signal tokens; ties and signal-free inputs go to the lowest label.
    pub fn counting_oracle(&self, tokens: &[usize]) -> usize {
        let mut counts = vec![0usize; self.n_labels];
        for &t in tokens {
            if let Some(c) = self.signal_label(t) {
                counts[c] += 1;
            }
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Unpadded tokens, never empty.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub seq_len: usize,
    pub n_labels: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Padded batch of the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut seqs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = self
                .examples
                .get(i)
                .ok_or_else(|| Error::Input(format!("example {i} out of range")))?;
            seqs.push(e.tokens.as_slice());
            labels.push(e.label);
        }
        Batch::from_sequences(&seqs, &labels, self.seq_len)
    }

    /// Same inputs with every label mapped through `perm`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Dataset> {
        if perm.len() != self.n_labels {
            return Err(Error::Input("label permutation has the wrong length".into()));
        }
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                tokens: e.tokens.clone(),
                label: perm[e.label],
            })
            .collect();
        Ok(Dataset {
            seq_len: self.seq_len,
            n_labels: self.n_labels,
            examples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn signal_count(len: usize) -> usize {
    (len.div_ceil(2) | 1).min(len)
}

/// Generates the dataset and splits it 80/10/10.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[rng::DATA]);
    let m = spec.signal_tokens_per_label;
    let first_noise = 1 + spec.n_labels * m;
    let min_len = spec.seq_len.div_ceil(2);

    let mut labels: Vec<usize> = (0..spec.n_examples).map(|i| i % spec.n_labels).collect();
    labels.shuffle(&mut r);

    let mut examples = Vec::with_capacity(spec.n_examples);
    for label in labels {
        let len = r.random_range(min_len..=spec.seq_len);
        let mut tokens: Vec<usize> = (0..len)
            .map(|_| r.random_range(first_noise..spec.vocab_size))
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut r);
        for &s in &slots[..signal_count(len)] {
            let owner = if r.random::<f64>() < spec.noise_rate {
                let other = r.random_range(0..spec.n_labels - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            };
            tokens[s] = 1 + owner * m + r.random_range(0..m);
        }
        debug_assert!(tokens.iter().all(|&t| t != PAD));
        examples.push(Example { tokens, label });
    }

    let mut order: Vec<usize> = (0..spec.n_examples).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[rng::SPLIT]));
    let n_train = spec.n_examples * 8 / 10;
    let n_val = spec.n_examples / 10;
    let take = |range: &[usize]| Dataset {
        seq_len: spec.seq_len,
        n_labels: spec.n_labels,
        examples: range.iter().map(|&i| examples[i].clone()).collect(),
    };
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SyntheticSpec {
            n_examples: 1000,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (800, 100, 100));
        assert_eq!(a, generate(&spec).unwrap());
        let b = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn lengths_and_tokens_in_range() {
        let spec = SyntheticSpec {
            n_examples: 500,
            ..SyntheticSpec::default()
        };
        let s = generate(&spec).unwrap();
        for e in &s.train.examples {
            assert!(e.tokens.len() >= 4 && e.tokens.len() <= 8);
            assert!(e.tokens.iter().all(|&t| (1..64).contains(&t)));
            let signal = e.tokens.iter().filter(|&&t| spec.signal_label(t).is_some()).count();
            assert_eq!(signal % 2, 1);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            vocab_size: 13,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            n_labels: 1,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_pads_with_zero() {
        let spec = SyntheticSpec {
            n_examples: 100,
            ..SyntheticSpec::default()
        };
        let s = generate(&spec).unwrap();
        let b = s.train.batch(&[0, 1]).unwrap();
        for row in 0..2 {
            let n = s.train.examples[row].tokens.len();
            assert_eq!(&b.row(row)[..n], s.train.examples[row].tokens.as_slice());
            assert!(b.row(row)[n..].iter().all(|&t| t == PAD));
        }
    }
}
