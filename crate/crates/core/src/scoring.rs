//! Sentence scores from a trained model.
//!
//! The bidirectional model scores an `n`-word sentence with `n` masked
//! copies of it: copy `i` has `<M>` at position `i`, and the log-probability
//! of the original word at that row is the `i`-th term. The unidirectional
//! model reads `<s> w₁ … wₙ` once and takes the next-word log-probability of
//! each word. Both give `n` terms whose sum is the sentence score, in nats.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Batch, InstanceKind, TokenId, TrainingInstance, Vocabulary, BOS, MASK};
use crate::error::{Error, Result};
use crate::model::{target_rows, Direction, LanguageModel};
use crate::tensor::Graph;

/// Log-likelihood of one word of a scored sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub position: usize,
    pub token: String,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub total: f64,
    pub per_word: Vec<WordScore>,
    /// Words scored; smaller than the sentence if it was truncated.
    pub n: usize,
    pub oov_count: usize,
}

/// One inference instance per word, each with `<M>` at its own position and
/// the original word as label.
pub fn expand_masked_instances(ids: &[TokenId]) -> Result<Vec<TrainingInstance>> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot score an empty sentence".into()));
    }
    Ok((0..ids.len())
        .map(|i| {
            let mut input = ids.to_vec();
            input[i] = MASK;
            TrainingInstance {
                input,
                positions: vec![i],
                labels: vec![ids[i]],
                kind: InstanceKind::Masked,
            }
        })
        .collect())
}

/// Per-word log-probabilities from the bidirectional model. Instances are
/// evaluated `batch_size` at a time; the grouping does not change the
/// result beyond rounding.
pub fn score_bidirectional(model: &LanguageModel, ids: &[TokenId], batch_size: usize) -> Result<Vec<f64>> {
    if model.config().mode != Direction::Bidirectional {
        return Err(Error::Param("masked-word scoring needs a bidirectional model".into()));
    }
    let instances = expand_masked_instances(ids)?;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch = Batch::from_instances(chunk)?;
        let mut g = Graph::new(model.store());
        let h = model.hidden(&mut g, &batch, None)?;
        let (rows, labels) = target_rows(&batch);
        let lp = model.output_log_probs(&mut g, h, &rows)?;
        let lp = g.value(lp);
        out.extend(labels.iter().enumerate().map(|(r, &label)| lp.get(r, label)));
    }
    Ok(out)
}

/// Per-word next-word log-probabilities `log p(wᵢ | <s>, w₁ … wᵢ₋₁)` from a
/// single pass of the unidirectional model.
pub fn score_unidirectional(model: &LanguageModel, ids: &[TokenId]) -> Result<Vec<f64>> {
    if model.config().mode != Direction::Unidirectional {
        return Err(Error::Param("next-word scoring needs a unidirectional model".into()));
    }
    if ids.is_empty() {
        return Err(Error::Empty("cannot score an empty sentence".into()));
    }
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(ids);
    let n = ids.len();
    let batch = Batch {
        width: n + 1,
        inputs: input,
        valid: vec![true; n + 1],
        lengths: vec![n + 1],
        targets: vec![vec![]],
    };
    let mut g = Graph::new(model.store());
    let h = model.hidden(&mut g, &batch, None)?;
    let rows: Vec<usize> = (0..n).collect();
    let lp = model.output_log_probs(&mut g, h, &rows)?;
    let lp = g.value(lp);
    Ok(ids.iter().enumerate().map(|(i, &w)| lp.get(i, w)).collect())
}

/// Scores word sequences with one model and its vocabulary.
#[derive(Clone, Debug)]
pub struct Scorer {
    model: LanguageModel,
    vocab: Vocabulary,
    batch_size: usize,
}

impl Scorer {
    pub fn new(model: LanguageModel, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Param(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            batch_size: 64,
        })
    }

    /// Masked instances evaluated per forward pass (bidirectional only).
    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn mode(&self) -> Direction {
        self.model.config().mode
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Scores a tokenized sentence. Out-of-vocabulary words score as
    /// `<unk>`; sentences longer than the model's limit are cut to it.
    pub fn score_words<S: AsRef<str>>(&self, words: &[S]) -> Result<SentenceScore> {
        let max_len = self.model.config().max_len;
        let words = if words.len() > max_len {
            warn!(
                "sentence of {} words exceeds the model limit; scoring the first {max_len}",
                words.len()
            );
            &words[..max_len]
        } else {
            words
        };
        let (ids, oov_count) = self.vocab.encode(words);
        let terms = match self.mode() {
            Direction::Bidirectional => score_bidirectional(&self.model, &ids, self.batch_size)?,
            Direction::Unidirectional => score_unidirectional(&self.model, &ids)?,
        };
        let per_word: Vec<WordScore> = words
            .iter()
            .zip(&terms)
            .enumerate()
            .map(|(position, (w, &log_prob))| WordScore {
                position,
                token: w.as_ref().to_string(),
                log_prob,
            })
            .collect();
        Ok(SentenceScore {
            total: terms.iter().sum(),
            n: per_word.len(),
            per_word,
            oov_count,
        })
    }

    pub fn score_text(&self, text: &str) -> Result<SentenceScore> {
        self.score_words(&tokenize(text))
    }

    /// Scores many sentences on up to `threads` workers. Results come back
    /// in input order and do not depend on the thread count.
    pub fn score_many(&self, texts: &[String], threads: usize) -> Result<Vec<SentenceScore>> {
        if threads <= 1 {
            return texts.iter().map(|t| self.score_text(t)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Param(format!("cannot start {threads} threads: {e}")))?;
        pool.install(|| texts.par_iter().map(|t| self.score_text(t)).collect())
    }
}
