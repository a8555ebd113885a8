//! The self-attention language model: word and position embeddings, a stack
//! of SAN layers, and a softmax head whose weight matrix is the word
//! embedding table itself.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{block_mask, san_layer, AttentionConfig, SanLayerParams};
use crate::corpus::{Batch, TokenId, TrainingInstance};
use crate::error::{Error, Result};
use crate::tensor::{AttnBlock, Graph, ParamId, ParamStore, RngState, Tensor, Var};

/// Random stream used for parameter initialization.
pub const INIT_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Masked-word model; every position attends to every other position.
    #[serde(rename = "bi")]
    Bidirectional,
    /// Next-word model; a causal mask hides future positions in every layer.
    #[serde(rename = "uni")]
    Unidirectional,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Bidirectional => "bi",
            Direction::Unidirectional => "uni",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(Direction::Bidirectional),
            "uni" => Ok(Direction::Unidirectional),
            other => Err(Error::Param(format!("unknown mode `{other}` (expected bi or uni)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Direction,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Longest sentence, in words, the model accepts.
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size setting: 3 layers, d = 512, 8 heads, FFN 2048, 128 words.
    pub fn full_size(mode: Direction, vocab_size: usize) -> Self {
        Self {
            mode,
            num_layers: 3,
            model_dim: 512,
            num_heads: 8,
            ffn_dim: 2048,
            max_len: 128,
            vocab_size,
            dropout: 0.1,
        }
    }

    /// Small setting that trains in minutes on one CPU core.
    pub fn desk(mode: Direction, vocab_size: usize) -> Self {
        Self {
            mode,
            num_layers: 2,
            model_dim: 64,
            num_heads: 2,
            ffn_dim: 256,
            max_len: 128,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    /// Rows of the position table. The next-word model reads `<s>` before
    /// the first word, so it needs one more than `max_len`.
    pub fn positions(&self) -> usize {
        match self.mode {
            Direction::Bidirectional => self.max_len,
            Direction::Unidirectional => self.max_len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.num_layers == 0 || self.max_len == 0 {
            return Err(Error::Param("num_layers and max_len must be at least 1".into()));
        }
        if self.vocab_size <= crate::corpus::SPECIALS.len() {
            return Err(Error::Param(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Graph nodes produced by [`LanguageModel::batch_forward`].
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Mean negative log-likelihood over all targets.
    pub loss: Var,
    /// `[targets × V]`, one row per target in batch order.
    pub log_probs: Var,
    pub labels: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    config: ModelConfig,
    store: ParamStore,
    embedding: ParamId,
    positions: ParamId,
    layers: Vec<SanLayerParams>,
    output_bias: ParamId,
}

impl LanguageModel {
    /// Fresh model with weights drawn from the seeded initialization stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::with_stream(seed, INIT_STREAM);
        let d = config.model_dim;
        let mut store = ParamStore::new();
        let mut table = |store: &mut ParamStore, name: &str, rows: usize| {
            let data = (0..rows * d).map(|_| rng.truncated_normal(0.02)).collect();
            store.add(name, Tensor::new(vec![rows, d], data).expect("shape"))
        };
        let embedding = table(&mut store, "embedding", config.vocab_size);
        let positions = table(&mut store, "positions", config.positions());
        let attn = config.attention();
        let layers = (0..config.num_layers)
            .map(|l| SanLayerParams::init(&mut store, &format!("layer{l}"), &attn, &mut rng))
            .collect();
        let output_bias = store.add("output_bias", Tensor::zeros(&[config.vocab_size]));
        Ok(Self {
            config,
            store,
            embedding,
            positions,
            layers,
            output_bias,
        })
    }

    /// Same architecture with every parameter (including layer-norm gains)
    /// set to zero. Such a model predicts the uniform distribution.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for p in m.store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The word embedding table `E`, which is also the output projection.
    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn positions_id(&self) -> ParamId {
        self.positions
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.output_bias
    }

    pub fn layers(&self) -> &[SanLayerParams] {
        &self.layers
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.config.positions() {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.positions(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// `X = X_S + X_P` for one sequence.
    pub fn embed(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var> {
        self.check_ids(ids)?;
        let pos: Vec<usize> = (0..ids.len()).collect();
        self.embed_rows(g, ids, &pos)
    }

    fn embed_rows(&self, g: &mut Graph, ids: &[TokenId], pos: &[usize]) -> Result<Var> {
        let e = g.param(self.embedding);
        let p = g.param(self.positions);
        let words = g.embedding(e, ids)?;
        let positions = g.embedding(p, pos)?;
        g.add(words, positions)
    }

    /// Top-layer hidden states `[B·width × d]` of a padded batch. `rng`
    /// enables dropout (training); `None` is inference.
    pub fn hidden(&self, g: &mut Graph, batch: &Batch, mut rng: Option<&mut RngState>) -> Result<Var> {
        let width = batch.width;
        for b in 0..batch.size() {
            self.check_ids(&batch.inputs[b * width..b * width + batch.lengths[b]])?;
        }
        if width > self.config.positions() {
            return Err(Error::SequenceTooLong {
                len: width,
                max: self.config.positions(),
            });
        }
        let pos: Vec<usize> = (0..batch.size()).flat_map(|_| 0..width).collect();
        let mut x = self.embed_rows(g, &batch.inputs, &pos)?;

        let causal = self.config.mode == Direction::Unidirectional;
        let mut masks = HashMap::new();
        let blocks: Arc<[AttnBlock]> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| AttnBlock {
                offset: b * width,
                len: width,
                mask: masks
                    .entry(len)
                    .or_insert_with(|| block_mask(width, len, causal).map(Arc::new))
                    .clone(),
            })
            .collect();

        for layer in &self.layers {
            x = san_layer(g, x, layer, self.config.dropout, &blocks, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Log-distribution over the vocabulary at the given rows of `hidden`:
    /// `log_softmax(H·Eᵀ + bias)`.
    pub fn output_log_probs(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.select_rows(hidden, rows)?;
        let e = g.param(self.embedding);
        let bias = g.param(self.output_bias);
        let logits = g.matmul_t(h, e)?;
        let logits = g.add_row(logits, bias)?;
        Ok(g.log_softmax_rows(logits))
    }

    /// Log-probabilities `[n × V]` for every position of one sequence.
    pub fn forward(&self, ids: &[TokenId], rng: Option<&mut RngState>) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Empty("empty token sequence".into()));
        }
        let batch = Batch {
            width: ids.len(),
            inputs: ids.to_vec(),
            valid: vec![true; ids.len()],
            lengths: vec![ids.len()],
            targets: vec![vec![]],
        };
        let mut g = Graph::new(&self.store);
        let h = self.hidden(&mut g, &batch, rng)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let lp = self.output_log_probs(&mut g, h, &rows)?;
        Ok(g.value(lp).clone())
    }

    /// Mean negative log-likelihood over every supervised position of the
    /// batch, built on `g` so the caller can differentiate it.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut RngState>) -> Result<Var> {
        Ok(self.batch_forward(g, batch, rng)?.loss)
    }

    /// Loss plus the target-row log-probabilities it was computed from.
    pub fn batch_forward(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut RngState>) -> Result<BatchOutput> {
        if batch.targets.iter().any(Vec::is_empty) {
            return Err(Error::NoTargets);
        }
        let h = self.hidden(g, batch, rng)?;
        let (rows, labels) = target_rows(batch);
        let log_probs = self.output_log_probs(g, h, &rows)?;
        let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        let loss = g.nll(log_probs, &picks)?;
        Ok(BatchOutput {
            loss,
            log_probs,
            labels,
        })
    }

    /// Masked-word loss over the masked positions of `instances`.
    pub fn mlm_loss(&self, instances: &[TrainingInstance]) -> Result<f64> {
        self.instances_loss(instances)
    }

    /// Next-word loss over all target positions of `instances`.
    pub fn next_word_loss(&self, instances: &[TrainingInstance]) -> Result<f64> {
        self.instances_loss(instances)
    }

    fn instances_loss(&self, instances: &[TrainingInstance]) -> Result<f64> {
        let batch = Batch::from_instances(instances)?;
        let mut g = Graph::new(&self.store);
        let loss = self.batch_loss(&mut g, &batch, None)?;
        Ok(g.value(loss).item())
    }
}

/// Flattened row index and label of every supervised position.
pub(crate) fn target_rows(batch: &Batch) -> (Vec<usize>, Vec<TokenId>) {
    let mut rows = Vec::with_capacity(batch.num_targets());
    let mut labels = Vec::with_capacity(batch.num_targets());
    for (b, targets) in batch.targets.iter().enumerate() {
        for &(pos, label) in targets {
            rows.push(b * batch.width + pos);
            labels.push(label);
        }
    }
    (rows, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_mlm_instance, make_unilm_instance, MASK};

    fn tiny(mode: Direction) -> ModelConfig {
        ModelConfig {
            mode,
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 12,
            vocab_size: 20,
            dropout: 0.1,
        }
    }

    /// Model with weights large enough that every output depends visibly on
    /// every input it is allowed to see.
    fn scrambled(mode: Direction, seed: u64) -> LanguageModel {
        let mut m = LanguageModel::new(tiny(mode), seed).unwrap();
        let mut rng = RngState::new(seed + 100);
        for p in m.store_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.normal() * 0.3;
            }
        }
        m
    }

    #[test]
    fn full_size_config_is_representable() {
        let cfg = ModelConfig::full_size(Direction::Bidirectional, 10_005);
        cfg.validate().unwrap();
        assert_eq!(cfg.attention().head_dim(), 64);
        assert_eq!(ModelConfig::full_size(Direction::Unidirectional, 100).positions(), 129);
    }

    #[test]
    fn embed_cases() {
        let zero = LanguageModel::zeros(tiny(Direction::Bidirectional)).unwrap();
        let mut g = Graph::new(zero.store());
        let x = zero.embed(&mut g, &[5, 6, 7]).unwrap();
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));

        let m = scrambled(Direction::Bidirectional, 1);
        let e = m.store().value(m.embedding_id());
        let p = m.store().value(m.positions_id());
        let mut g = Graph::new(m.store());
        let x = m.embed(&mut g, &[9]).unwrap();
        let expected: Vec<f64> = e.row(9).iter().zip(p.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(x).row(0), expected.as_slice());

        let x = m.embed(&mut g, &[9, 9]).unwrap();
        let xv = g.value(x);
        for c in 0..8 {
            let diff = xv.get(1, c) - xv.get(0, c);
            assert!((diff - (p.get(1, c) - p.get(0, c))).abs() < 1e-15);
        }

        assert!(matches!(m.embed(&mut g, &[1; 13]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.embed(&mut g, &[20]), Err(Error::Vocab { id: 20, .. })));
    }

    #[test]
    fn forward_rows_are_normalized() {
        for mode in [Direction::Bidirectional, Direction::Unidirectional] {
            let m = scrambled(mode, 2);
            let lp = m.forward(&[5, 6, MASK, 8, 9], None).unwrap();
            for i in 0..5 {
                let lse = lp.row(i).iter().map(|v| v.exp()).sum::<f64>().ln();
                assert!(lse.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = LanguageModel::zeros(tiny(Direction::Bidirectional)).unwrap();
        let lp = m.forward(&[5, 6, 7], None).unwrap();
        let expected = -(20f64).ln();
        assert!(lp.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn unidirectional_forward_is_causal() {
        let m = scrambled(Direction::Unidirectional, 3);
        let ids = [2, 7, 8, 9, 10, 11];
        let base = m.forward(&ids, None).unwrap();
        let mut changed = ids;
        changed[5] = 15;
        let out = m.forward(&changed, None).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_ne!(out.row(5), base.row(5));
    }

    #[test]
    fn bidirectional_masked_row_sees_every_position() {
        let m = scrambled(Direction::Bidirectional, 4);
        let ids = [5, 6, MASK, 8, 9, 10];
        let base = m.forward(&ids, None).unwrap();
        for t in [0, 1, 3, 4, 5] {
            let mut changed = ids;
            changed[t] = 17;
            let out = m.forward(&changed, None).unwrap();
            assert!(out.row(2).iter().zip(base.row(2)).any(|(a, b)| (a - b).abs() > 1e-9));
        }
    }

    #[test]
    fn tied_output_follows_embedding_storage() {
        let mut m = scrambled(Direction::Bidirectional, 5);
        let before = m.forward(&[5, 6, 7], None).unwrap();
        let e = m.embedding_id();
        m.store_mut().get_mut(e).value.data_mut()[19 * 8] += 1.0;
        let after = m.forward(&[5, 6, 7], None).unwrap();
        // Token 19 is not in the input, so only the output projection moved.
        assert!((after.get(0, 19) - before.get(0, 19)).abs() > 1e-6);
        let vocab_tables = m.store().iter().filter(|p| p.value.shape() == [20, 8]).count();
        assert_eq!(vocab_tables, 1);
    }

    #[test]
    fn zero_model_losses_equal_log_vocab() {
        let ln_v = 20f64.ln();
        let mut rng = RngState::new(6);
        let bi = LanguageModel::zeros(tiny(Direction::Bidirectional)).unwrap();
        let insts: Vec<_> = [vec![5, 6, 7], vec![8, 9]]
            .iter()
            .map(|s| make_mlm_instance(s, 12, &mut rng).unwrap())
            .collect();
        assert!((bi.mlm_loss(&insts).unwrap() - ln_v).abs() < 1e-12);

        let uni = LanguageModel::zeros(tiny(Direction::Unidirectional)).unwrap();
        let inst = make_unilm_instance(&[5, 6, 7], 12).unwrap();
        assert!((uni.next_word_loss(&[inst]).unwrap() - ln_v).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_aggregates_over_all_masked_positions() {
        let m = scrambled(Direction::Bidirectional, 7);
        let a = TrainingInstance {
            input: vec![5, MASK, 7],
            positions: vec![1],
            labels: vec![6],
            kind: crate::corpus::InstanceKind::Masked,
        };
        let b = TrainingInstance {
            input: vec![MASK, MASK, 10, MASK, 12],
            positions: vec![0, 1, 3],
            labels: vec![8, 9, 11],
            kind: crate::corpus::InstanceKind::Masked,
        };
        let la = m.forward(&a.input, None).unwrap();
        let lb = m.forward(&b.input, None).unwrap();
        let hand = -(la.get(1, 6) + lb.get(0, 8) + lb.get(1, 9) + lb.get(3, 11)) / 4.0;
        let loss = m.mlm_loss(&[a.clone(), b.clone()]).unwrap();
        assert!((loss - hand).abs() < 1e-12);
        let swapped = m.mlm_loss(&[b, a]).unwrap();
        assert!((loss - swapped).abs() < 1e-12);

        let empty = TrainingInstance {
            input: vec![5, 6],
            positions: vec![],
            labels: vec![],
            kind: crate::corpus::InstanceKind::Masked,
        };
        assert!(matches!(m.mlm_loss(&[empty]), Err(Error::NoTargets)));
    }

    #[test]
    fn single_word_next_word_loss() {
        let m = scrambled(Direction::Unidirectional, 8);
        let inst = make_unilm_instance(&[9], 12).unwrap();
        let only_word = TrainingInstance {
            positions: vec![0],
            labels: vec![9],
            ..inst
        };
        let lp = m.forward(&only_word.input, None).unwrap();
        let loss = m.next_word_loss(&[only_word]).unwrap();
        assert!((loss + lp.get(0, 9)).abs() < 1e-12);
    }

    #[test]
    fn padded_batch_matches_unpadded_runs() {
        for mode in [Direction::Bidirectional, Direction::Unidirectional] {
            let m = scrambled(mode, 9);
            let seqs: [&[TokenId]; 3] = [&[5, 6], &[7, 8, 9, 10, 11], &[12]];
            let insts: Vec<TrainingInstance> = seqs
                .iter()
                .map(|s| TrainingInstance {
                    input: s.to_vec(),
                    positions: vec![0],
                    labels: vec![13],
                    kind: crate::corpus::InstanceKind::Masked,
                })
                .collect();
            let batch = Batch::from_instances(&insts).unwrap();
            let mut g = Graph::new(m.store());
            let h = m.hidden(&mut g, &batch, None).unwrap();
            let all: Vec<usize> = (0..batch.inputs.len()).collect();
            let lp = m.output_log_probs(&mut g, h, &all).unwrap();
            let padded = g.value(lp).clone();
            let mut per_instance = 0.0;
            for (b, s) in seqs.iter().enumerate() {
                let alone = m.forward(s, None).unwrap();
                for t in 0..s.len() {
                    for (x, y) in alone.row(t).iter().zip(padded.row(b * batch.width + t)) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
                per_instance += m.mlm_loss(&insts[b..b + 1]).unwrap();
            }
            let batch_loss = m.mlm_loss(&insts).unwrap();
            assert!((batch_loss - per_instance / 3.0).abs() < 1e-9);
        }
    }
}
