//! Text ingestion, the word vocabulary, and construction of training
//! instances and padded batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::RngState;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MASK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<M>"];

/// Upper bound on masked positions in one training instance.
pub const MAX_MASKS: usize = 4;

/// Lowercases and splits on whitespace runs.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a corpus file with one sentence per line. Blank lines yield empty
/// token lists so line numbers stay aligned.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Token ↔ id map. Ids `0..5` are the special tokens; the rest are corpus
/// words by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Keeps the `k` most frequent words of `lines`.
    pub fn build<I, S>(lines: I, k: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if k == 0 {
            return Err(Error::Param("vocabulary size must be at least 1".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in tokenize(line.as_ref()) {
                if !SPECIALS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus has no tokens".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w)))
    }

    /// Specials followed by `words` in the given order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> TokenId {
        self.lookup(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    /// Non-special words, most frequent first.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// Maps words to ids and counts how many fell back to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> (Vec<TokenId>, usize) {
        let mut oov = 0;
        let ids = words
            .iter()
            .map(|w| {
                self.lookup(w.as_ref()).unwrap_or_else(|| {
                    oov += 1;
                    UNK
                })
            })
            .collect();
        (ids, oov)
    }

    /// File form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format {
                line: 1,
                msg: "vocabulary must start with the special tokens".into(),
            });
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format {
                    line: i + 1,
                    msg: format!("invalid token {t:?}"),
                });
            }
            if seen.insert(*t, i).is_some() {
                return Err(Error::Format {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self::from_words(
            tokens[SPECIALS.len()..].iter().map(|t| t.to_string()),
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_file_string()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// Masked-word prediction: predict the original words at `<M>` positions.
    Masked,
    /// Next-word prediction over `<s> w₁ … wₙ` with targets `w₁ … wₙ </s>`.
    NextWord,
}

/// One training (or scoring) example: the model input and the `(position,
/// label)` pairs it is supervised on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub input: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub labels: Vec<TokenId>,
    pub kind: InstanceKind,
}

impl TrainingInstance {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        self.positions.iter().copied().zip(self.labels.iter().copied())
    }
}

/// `min(4, max(1, round(0.15·n)))`, rounding half away from zero.
pub fn mask_count(n: usize) -> usize {
    ((15 * n + 50) / 100).clamp(1, MAX_MASKS)
}

fn check_length(n: usize, max_len: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("sentence has no words".into()));
    }
    if n > max_len {
        return Err(Error::SequenceTooLong { len: n, max: max_len });
    }
    Ok(())
}

/// Replaces `mask_count(n)` distinct, uniformly drawn positions with `<M>`.
pub fn make_mlm_instance(ids: &[TokenId], max_len: usize, rng: &mut RngState) -> Result<TrainingInstance> {
    let n = ids.len();
    check_length(n, max_len)?;
    let mut positions = sample(rng, n, mask_count(n)).into_vec();
    positions.sort_unstable();
    let mut input = ids.to_vec();
    let labels = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        input[p] = MASK;
    }
    Ok(TrainingInstance {
        input,
        positions,
        labels,
        kind: InstanceKind::Masked,
    })
}

/// `<s> w₁ … wₙ` with targets `w₁ … wₙ </s>` at positions `0..=n`.
pub fn make_unilm_instance(ids: &[TokenId], max_len: usize) -> Result<TrainingInstance> {
    let n = ids.len();
    check_length(n, max_len)?;
    let mut input = Vec::with_capacity(n + 1);
    input.push(BOS);
    input.extend_from_slice(ids);
    let mut labels = ids.to_vec();
    labels.push(EOS);
    Ok(TrainingInstance {
        input,
        positions: (0..=n).collect(),
        labels,
        kind: InstanceKind::NextWord,
    })
}

/// Instances padded to a common width. Row `b` occupies flattened positions
/// `b·width .. (b+1)·width`; positions at or beyond `lengths[b]` hold
/// `<pad>` and are never attended to or supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub inputs: Vec<TokenId>,
    pub valid: Vec<bool>,
    pub lengths: Vec<usize>,
    pub targets: Vec<Vec<(usize, TokenId)>>,
}

impl Batch {
    pub fn from_instances(instances: &[TrainingInstance]) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("batch has no instances".into()));
        }
        let width = instances.iter().map(TrainingInstance::len).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(instances.len() * width);
        let mut valid = Vec::with_capacity(instances.len() * width);
        for inst in instances {
            inputs.extend_from_slice(&inst.input);
            inputs.extend(std::iter::repeat_n(PAD, width - inst.len()));
            valid.extend(std::iter::repeat_n(true, inst.len()));
            valid.extend(std::iter::repeat_n(false, width - inst.len()));
        }
        Ok(Self {
            width,
            inputs,
            valid,
            lengths: instances.iter().map(TrainingInstance::len).collect(),
            targets: instances.iter().map(|i| i.targets().collect()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    pub fn num_padding(&self) -> usize {
        self.valid.iter().filter(|&&v| !v).count()
    }
}

/// Consecutive batches of at most `batch_size` instances.
pub fn batches(instances: &[TrainingInstance], batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    instances
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_instances(c).expect("chunks are non-empty"))
}
