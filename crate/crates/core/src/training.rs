//! Training loop: shuffled epochs of masked-word or next-word instances,
//! Adam updates at a flat learning rate, held-out monitoring and periodic
//! checkpoints.

use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, VocabRef};
use crate::corpus::{make_mlm_instance, make_unilm_instance, Batch, TokenId, TrainingInstance};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Direction, LanguageModel, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, Graph, RngState, Tensor};

/// Stream for the fixed masks of the held-out set.
pub const HELDOUT_STREAM: u64 = 2;
/// Base of the per-epoch shuffling and masking streams.
pub const EPOCH_STREAM_BASE: u64 = 1 << 40;
/// Base of the per-step dropout streams.
pub const DROPOUT_STREAM_BASE: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Held-out evaluation every this many steps (and after the last one).
    pub eval_interval: u64,
    /// Checkpoint every this many steps; 0 writes none mid-run.
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Where periodic checkpoints go. Not stored in checkpoints, so a run's
    /// files do not depend on where it was written.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        let adam = AdamConfig::default();
        Self {
            model,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 32,
            max_steps: 1000,
            eval_interval: 100,
            checkpoint_interval: 0,
            seed,
            checkpoint_dir: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.max_steps == 0 {
            return Err(Error::Param("max_steps must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Param("eval_interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Param(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Param(format!("dropout {} must lie in [0, 1)", self.model.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and top-1 accuracy over every supervised position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub targets: usize,
}

/// Number of rows of `log_probs` whose argmax equals the label. Ties go to
/// the lowest token id.
pub fn top1_hits(log_probs: &Tensor, labels: &[TokenId]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let row = log_probs.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Inference-mode loss and top-1 accuracy over `instances`.
pub fn evaluate_heldout(model: &LanguageModel, instances: &[TrainingInstance], batch_size: usize) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::Empty("held-out set has no instances".into()));
    }
    let mut total = 0.0;
    let mut hits = 0;
    let mut targets = 0;
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch = Batch::from_instances(chunk)?;
        let mut g = Graph::new(model.store());
        let out = model.batch_forward(&mut g, &batch, None)?;
        let n = out.labels.len();
        total += g.value(out.loss).item() * n as f64;
        hits += top1_hits(g.value(out.log_probs), &out.labels);
        targets += n;
    }
    Ok(Evaluation {
        loss: total / targets as f64,
        accuracy: hits as f64 / targets as f64,
        targets,
    })
}

/// Builds one instance per sentence in the model's training format.
/// Sentences that are empty or longer than `max_len` are dropped and
/// counted.
pub fn make_instances(
    mode: Direction,
    sentences: &[Vec<TokenId>],
    max_len: usize,
    rng: &mut RngState,
) -> (Vec<TrainingInstance>, usize) {
    let mut skipped = 0;
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let inst = match mode {
            Direction::Bidirectional => make_mlm_instance(s, max_len, rng),
            Direction::Unidirectional => make_unilm_instance(s, max_len),
        };
        match inst {
            Ok(i) => out.push(i),
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

/// Owns one training run. The parameter trajectory is a function of the
/// config, the corpus and the seed only.
pub struct Trainer {
    config: TrainConfig,
    model: LanguageModel,
    adam: AdamState,
    step: u64,
    vocab: VocabRef,
    sentences: Vec<Vec<TokenId>>,
    heldout: Vec<TrainingInstance>,
    skipped: usize,
    epoch: Option<(u64, Vec<TrainingInstance>)>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        train: &[Vec<TokenId>],
        heldout: &[Vec<TokenId>],
        vocab: VocabRef,
    ) -> Result<Self> {
        config.validate()?;
        let model = LanguageModel::new(config.model, config.seed)?;
        let adam = AdamState::new(model.store());
        Self::assemble(config, model, adam, 0, vocab, train, heldout)
    }

    /// Continues the run saved in `ckpt`, which must carry its training
    /// config and optimizer state.
    pub fn resume(ckpt: Checkpoint, train: &[Vec<TokenId>], heldout: &[Vec<TokenId>]) -> Result<Self> {
        let config = ckpt
            .training
            .ok_or_else(|| CheckpointError::ConfigMismatch("checkpoint has no training config".into()))?;
        let adam = ckpt
            .optimizer
            .ok_or_else(|| CheckpointError::ConfigMismatch("checkpoint has no optimizer state".into()))?;
        if config.model != *ckpt.model.config() {
            return Err(CheckpointError::ConfigMismatch("training config disagrees with model config".into()).into());
        }
        if config.seed != ckpt.seed {
            return Err(CheckpointError::ConfigMismatch("training seed disagrees with rng state".into()).into());
        }
        config.validate()?;
        Self::assemble(config, ckpt.model, adam, ckpt.step, ckpt.vocab, train, heldout)
    }

    fn assemble(
        config: TrainConfig,
        model: LanguageModel,
        adam: AdamState,
        step: u64,
        vocab: VocabRef,
        train: &[Vec<TokenId>],
        heldout: &[Vec<TokenId>],
    ) -> Result<Self> {
        let max_len = config.model.max_len;
        let usable = |s: &&Vec<TokenId>| !s.is_empty() && s.len() <= max_len;
        let sentences: Vec<Vec<TokenId>> = train.iter().filter(usable).cloned().collect();
        let skipped = train.len() - sentences.len();
        if skipped > 0 {
            warn!("skipping {skipped} training sentences that are empty or longer than {max_len} words");
        }
        if sentences.is_empty() {
            return Err(Error::Empty("training corpus has no usable sentences".into()));
        }
        let mut rng = RngState::with_stream(config.seed, HELDOUT_STREAM);
        let (heldout, dropped) = make_instances(config.model.mode, heldout, max_len, &mut rng);
        if dropped > 0 {
            warn!("skipping {dropped} held-out sentences that are empty or longer than {max_len} words");
        }
        Ok(Self {
            config,
            model,
            adam,
            step,
            vocab,
            sentences,
            heldout,
            skipped,
            epoch: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_checkpoint_dir(&mut self, dir: Option<PathBuf>) {
        self.config.checkpoint_dir = dir;
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Training sentences dropped for being empty or too long.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn heldout_instances(&self) -> &[TrainingInstance] {
        &self.heldout
    }

    fn batches_per_epoch(&self) -> u64 {
        self.sentences.len().div_ceil(self.config.batch_size) as u64
    }

    /// Shuffled, freshly masked instances for `epoch`.
    fn epoch_instances(&self, epoch: u64) -> Vec<TrainingInstance> {
        let mut rng = RngState::with_stream(self.config.seed, EPOCH_STREAM_BASE + epoch);
        let mut order: Vec<usize> = (0..self.sentences.len()).collect();
        order.shuffle(&mut rng);
        let ordered: Vec<Vec<TokenId>> = order.iter().map(|&i| self.sentences[i].clone()).collect();
        make_instances(self.config.model.mode, &ordered, self.config.model.max_len, &mut rng).0
    }

    /// One Adam update on the next batch.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let per_epoch = self.batches_per_epoch();
        let epoch = self.step / per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch = Some((epoch, self.epoch_instances(epoch)));
        }
        let instances = &self.epoch.as_ref().expect("epoch cached above").1;
        let b = self.config.batch_size;
        let start = (self.step % per_epoch) as usize * b;
        let batch = Batch::from_instances(&instances[start..(start + b).min(instances.len())])?;

        let mut rng = RngState::with_stream(self.config.seed, DROPOUT_STREAM_BASE + self.step);
        let (loss, accuracy, grads) = {
            let mut g = Graph::new(self.model.store());
            let out = self.model.batch_forward(&mut g, &batch, Some(&mut rng))?;
            let loss = g.value(out.loss).item();
            let accuracy = top1_hits(g.value(out.log_probs), &out.labels) as f64 / out.labels.len() as f64;
            (loss, accuracy, g.backward(out.loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::Param(format!("training diverged at step {}: loss {loss}", self.step + 1)));
        }
        let adam = self.config.adam();
        let store = self.model.store_mut();
        store.accumulate(&grads);
        self.adam.step(store, &adam);
        self.step += 1;
        Ok(MetricRecord {
            step: self.step,
            split: Split::Train,
            loss,
            accuracy,
        })
    }

    /// Held-out loss and accuracy of the current parameters.
    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_heldout(&self.model, &self.heldout, self.config.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            seed: self.config.seed,
            training: Some(self.config.clone()),
            optimizer: Some(self.adam.clone()),
        }
    }

    /// Trains until `max_steps`, passing every metric record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.max_steps {
            let record = self.train_step()?;
            sink(&record)?;
            let last = self.step == self.config.max_steps;
            if !self.heldout.is_empty() && (self.step.is_multiple_of(self.config.eval_interval) || last) {
                let eval = self.evaluate()?;
                info!(
                    "step {}: train loss {:.4}, held-out loss {:.4}, accuracy {:.4}",
                    self.step, record.loss, eval.loss, eval.accuracy
                );
                sink(&MetricRecord {
                    step: self.step,
                    split: Split::Heldout,
                    loss: eval.loss,
                    accuracy: eval.accuracy,
                })?;
            }
            let interval = self.config.checkpoint_interval;
            if let Some(dir) = &self.config.checkpoint_dir {
                if interval > 0 && self.step.is_multiple_of(interval) {
                    self.checkpoint().save(dir.join(format!("checkpoint-{:08}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub skipped: usize,
}

/// Runs a complete training job and collects its metric log.
pub fn train(
    config: TrainConfig,
    train: &[Vec<TokenId>],
    heldout: &[Vec<TokenId>],
    vocab: VocabRef,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, train, heldout, vocab)?;
    let mut metrics = Vec::new();
    trainer.run(|r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
        skipped: trainer.skipped(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SPECIALS;

    fn config(mode: Direction, steps: u64) -> TrainConfig {
        let model = ModelConfig {
            mode,
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_len: 8,
            vocab_size: 12,
            dropout: 0.1,
        };
        let mut c = TrainConfig::new(model, 5);
        c.batch_size = 4;
        c.max_steps = steps;
        c.eval_interval = 5;
        c.learning_rate = 1e-2;
        c
    }

    /// Two alternating "grammars": 5 6 7 … and 8 9 10 ….
    fn corpus(n: usize) -> Vec<Vec<TokenId>> {
        let first = SPECIALS.len();
        (0..n)
            .map(|i| {
                let len = 3 + i % 4;
                let base = if i % 2 == 0 { first } else { first + 3 };
                (0..len).map(|j| base + j % 3).collect()
            })
            .collect()
    }

    fn vocab_ref() -> VocabRef {
        VocabRef {
            hash: "h".into(),
            path: "v".into(),
        }
    }

    fn bits(m: &LanguageModel) -> Vec<u64> {
        m.store().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = config(Direction::Bidirectional, 0);
        assert!(c.validate().is_err());
        c.max_steps = 1;
        c.eval_interval = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unstarted_trainer_holds_the_initialization() {
        let c = config(Direction::Bidirectional, 3);
        let trainer = Trainer::new(c.clone(), &corpus(10), &[], vocab_ref()).unwrap();
        let init = LanguageModel::new(c.model, c.seed).unwrap();
        assert_eq!(bits(&trainer.checkpoint().model), bits(&init));
        assert_eq!(trainer.checkpoint().step, 0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let c = config(Direction::Bidirectional, 3);
        assert!(Trainer::new(c.clone(), &[], &[], vocab_ref()).is_err());
        let too_long = vec![vec![5; 20]];
        assert!(Trainer::new(c, &too_long, &[], vocab_ref()).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        for mode in [Direction::Bidirectional, Direction::Unidirectional] {
            let c = config(mode, 12);
            let a = train(c.clone(), &corpus(30), &corpus(6), vocab_ref()).unwrap();
            let b = train(c, &corpus(30), &corpus(6), vocab_ref()).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(bits(&a.checkpoint.model), bits(&b.checkpoint.model));
        }
    }

    #[test]
    fn metric_log_has_train_and_heldout_lines() {
        let out = train(config(Direction::Bidirectional, 12), &corpus(30), &corpus(6), vocab_ref()).unwrap();
        let train_steps: Vec<u64> = out.metrics.iter().filter(|m| m.split == Split::Train).map(|m| m.step).collect();
        let eval_steps: Vec<u64> = out.metrics.iter().filter(|m| m.split == Split::Heldout).map(|m| m.step).collect();
        assert_eq!(train_steps, (1..=12).collect::<Vec<_>>());
        assert_eq!(eval_steps, vec![5, 10, 12]);
        for m in &out.metrics {
            assert!((0.0..=1.0).contains(&m.accuracy));
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        for mode in [Direction::Bidirectional, Direction::Unidirectional] {
            let c = config(mode, 20);
            let full = train(c.clone(), &corpus(30), &corpus(6), vocab_ref()).unwrap();

            let mut first = Trainer::new(c, &corpus(30), &corpus(6), vocab_ref()).unwrap();
            for _ in 0..9 {
                first.train_step().unwrap();
            }
            let bytes = first.checkpoint().to_bytes().unwrap();
            let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
            let mut second = Trainer::resume(ckpt, &corpus(30), &corpus(6)).unwrap();
            let mut tail = Vec::new();
            second
                .run(|r| {
                    tail.push(r.clone());
                    Ok(())
                })
                .unwrap();
            assert_eq!(bits(second.model()), bits(&full.checkpoint.model));
            let full_tail: Vec<_> = full.metrics.iter().filter(|m| m.step > 9).cloned().collect();
            assert_eq!(tail, full_tail);
        }
    }

    #[test]
    fn learnable_corpus_lowers_heldout_loss() {
        for mode in [Direction::Bidirectional, Direction::Unidirectional] {
            let c = config(mode, 150);
            let mut trainer = Trainer::new(c, &corpus(60), &corpus(12), vocab_ref()).unwrap();
            let before = trainer.evaluate().unwrap();
            trainer.run(|_| Ok(())).unwrap();
            let after = trainer.evaluate().unwrap();
            assert!(after.loss < before.loss - 0.3, "{mode}: {} -> {}", before.loss, after.loss);
        }
    }

    #[test]
    fn zero_model_evaluates_to_uniform() {
        let c = config(Direction::Bidirectional, 1);
        let model = LanguageModel::zeros(c.model).unwrap();
        let mut rng = RngState::new(0);
        let (inst, _) = make_instances(c.model.mode, &corpus(10), c.model.max_len, &mut rng);
        let eval = evaluate_heldout(&model, &inst, 3).unwrap();
        assert!((eval.loss - 12f64.ln()).abs() < 1e-12);
        // Uniform rows put the argmax on `<pad>`, which is never a label.
        assert_eq!(eval.accuracy, 0.0);
        assert_eq!(evaluate_heldout(&model, &inst, 3).unwrap(), eval);
        assert!(evaluate_heldout(&model, &[], 3).is_err());
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(Direction::Unidirectional, 6);
        c.checkpoint_interval = 3;
        c.checkpoint_dir = Some(dir.path().to_path_buf());
        train(c, &corpus(10), &[], vocab_ref()).unwrap();
        for step in [3, 6] {
            let ckpt = Checkpoint::load(dir.path().join(format!("checkpoint-{step:08}.ckpt"))).unwrap();
            assert_eq!(ckpt.step, step);
        }
    }
}
