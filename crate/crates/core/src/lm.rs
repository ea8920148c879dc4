//! Instruction language model: a small bidirectional transformer encoder
//! pretrained with masked-token and next-instruction objectives, used to
//! embed basic blocks.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::{CLS_ID, SEP_ID};
use crate::sampling::{PretrainExample, IGNORE_LABEL};
use crate::tensor::{init_attention, linear, multi_head_attention, Adam, LinearParams, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state of `[CLS]`.
    #[default]
    Cls,
    /// Mean of final hidden states over the whole sequence.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LMConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_position: usize,
    pub vocab_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
    pub pooling: Pooling,
    /// Token budget of one block embedding, `[CLS]` and `[SEP]` included.
    pub block_max_len: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            layers: 4,
            hidden: 128,
            heads: 8,
            max_position: 128,
            vocab_size: 0,
            lr: 3e-5,
            batch_size: 256,
            epochs: 3,
            init_std: 0.02,
            pooling: Pooling::Cls,
            block_max_len: 128,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_position == 0 {
            return Err(Error::Config("layers, vocab_size and max_position must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn intermediate(&self) -> usize {
        4 * self.hidden
    }
}

/// A basic-block embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEmbedding {
    pub func_key: String,
    pub block_label: String,
    pub vector: Vec<f64>,
}

/// One encoder input: token ids and their segment ids.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub ids: &'a [u32],
    pub segments: &'a [u32],
}

/// Output of [`LanguageModel::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final hidden states of every sequence, stacked row-wise.
    pub hidden: Var,
    /// `(start, len)` of each sequence within `hidden`.
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LMConfig,
    pub params: ParamStore,
}

fn layer_prefix(i: usize) -> String {
    format!("layer{i}")
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b)
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert_full(&format!("{prefix}.g"), &[d], 1.0)?;
    store.insert_full(&format!("{prefix}.b"), &[d], 0.0)
}

impl LanguageModel {
    /// Fresh model: projections ~ N(0, init_std), zero biases, unit norms.
    pub fn new(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::rng_for(seed, "lm/init");
        let (h, std) = (config.hidden, config.init_std);
        let mut p = ParamStore::new();
        p.insert_normal("emb.token", &[config.vocab_size, h], std, &mut rng)?;
        p.insert_normal("emb.position", &[config.max_position, h], std, &mut rng)?;
        p.insert_normal("emb.segment", &[2, h], std, &mut rng)?;
        init_layer_norm(&mut p, "emb.ln", h)?;
        for i in 0..config.layers {
            let pre = layer_prefix(i);
            init_attention(&mut p, &format!("{pre}.attn"), h, std, &mut rng)?;
            init_layer_norm(&mut p, &format!("{pre}.ln1"), h)?;
            LinearParams::new(&format!("{pre}.ffn1")).init(&mut p, h, config.intermediate(), std, &mut rng)?;
            LinearParams::new(&format!("{pre}.ffn2")).init(&mut p, config.intermediate(), h, std, &mut rng)?;
            init_layer_norm(&mut p, &format!("{pre}.ln2"), h)?;
        }
        LinearParams::new("mlm.dense").init(&mut p, h, h, std, &mut rng)?;
        init_layer_norm(&mut p, "mlm.ln", h)?;
        LinearParams::new("mlm.out").init(&mut p, h, config.vocab_size, std, &mut rng)?;
        LinearParams::new("nsp.pool").init(&mut p, h, h, std, &mut rng)?;
        LinearParams::new("nsp.out").init(&mut p, h, 2, std, &mut rng)?;
        Ok(LanguageModel { config, params: p })
    }

    pub fn from_params(config: LMConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let model = LanguageModel::new(config.clone(), 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Checkpoint("parameters do not match the model configuration".into()));
        }
        Ok(LanguageModel { config, params })
    }

    /// Run the encoder over `seqs` (no padding; each sequence attends only
    /// to itself).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, seqs: &[Sequence<'_>]) -> Result<Encoded> {
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.ids.len() > cfg.max_position {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_position {}",
                    s.ids.len(),
                    cfg.max_position
                )));
            }
            if s.ids.is_empty() || s.segments.len() != s.ids.len() {
                return Err(Error::Input("empty sequence or segment length mismatch".into()));
            }
            spans.push((ids.len(), s.ids.len()));
            for (i, (&id, &seg)) in s.ids.iter().zip(s.segments).enumerate() {
                if id as usize >= cfg.vocab_size {
                    return Err(Error::Input(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
                }
                ids.push(id as usize);
                positions.push(i);
                segments.push(seg.min(1) as usize);
            }
        }
        let tok_table = tape.param(store, "emb.token")?;
        let pos_table = tape.param(store, "emb.position")?;
        let seg_table = tape.param(store, "emb.segment")?;
        let tok = tape.embedding(tok_table, &ids)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let seg = tape.embedding(seg_table, &segments)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, seg)?;
        let mut x = layer_norm(tape, store, sum, "emb.ln")?;

        for i in 0..cfg.layers {
            let pre = layer_prefix(i);
            let attn = multi_head_attention(tape, store, x, &format!("{pre}.attn"), cfg.heads, &spans, None)?;
            let res = tape.add(x, attn)?;
            x = layer_norm(tape, store, res, &format!("{pre}.ln1"))?;
            let f1 = linear(tape, store, x, &LinearParams::new(&format!("{pre}.ffn1")))?;
            let f1 = tape.gelu(f1)?;
            let f2 = linear(tape, store, f1, &LinearParams::new(&format!("{pre}.ffn2")))?;
            let res = tape.add(x, f2)?;
            x = layer_norm(tape, store, res, &format!("{pre}.ln2"))?;
        }
        Ok(Encoded { hidden: x, spans })
    }

    /// Vocabulary logits for the given rows of `hidden`.
    pub fn mlm_head(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let picked = tape.gather_rows(hidden, rows)?;
        let d = linear(tape, store, picked, &LinearParams::new("mlm.dense"))?;
        let d = tape.gelu(d)?;
        let d = layer_norm(tape, store, d, "mlm.ln")?;
        linear(tape, store, d, &LinearParams::new("mlm.out"))
    }

    /// Two-way logits from the `[CLS]` rows of `hidden`.
    pub fn nsp_head(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let cls_rows: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let cls = tape.gather_rows(hidden, &cls_rows)?;
        let pooled = linear(tape, store, cls, &LinearParams::new("nsp.pool"))?;
        let pooled = tape.tanh(pooled)?;
        linear(tape, store, pooled, &LinearParams::new("nsp.out"))
    }

    /// Logits for a batch: masked-token logits at every position, padded to
    /// `[B, L_max, V]` (zeros past each example's end), and next-instruction
    /// logits `[B, 2]`.
    pub fn lm_forward(&self, batch: &[PretrainExample]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let seqs: Vec<Sequence> = batch
            .iter()
            .map(|e| Sequence {
                ids: &e.input_ids,
                segments: &e.segment_ids,
            })
            .collect();
        let enc = self.encode(&mut tape, &self.params, &seqs)?;
        let n_rows = tape.value(enc.hidden).rows();
        let all: Vec<usize> = (0..n_rows).collect();
        let mlm = self.mlm_head(&mut tape, &self.params, enc.hidden, &all)?;
        let nsp = self.nsp_head(&mut tape, &self.params, enc.hidden, &enc.spans)?;

        let v = self.config.vocab_size;
        let l_max = enc.spans.iter().map(|s| s.1).max().unwrap_or(0);
        let mut padded = Tensor::zeros(&[batch.len(), l_max, v]);
        let logits = tape.value(mlm);
        for (b, &(start, len)) in enc.spans.iter().enumerate() {
            for i in 0..len {
                let dst = (b * l_max + i) * v;
                padded.data_mut()[dst..dst + v].copy_from_slice(logits.row_slice(start + i));
            }
        }
        Ok((padded, tape.value(nsp).clone()))
    }

    /// Record the combined pretraining loss of `batch` on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &[PretrainExample]) -> Result<Var> {
        let seqs: Vec<Sequence> = batch
            .iter()
            .map(|e| Sequence {
                ids: &e.input_ids,
                segments: &e.segment_ids,
            })
            .collect();
        let enc = self.encode(tape, store, &seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (e, &(start, _)) in batch.iter().zip(&enc.spans) {
            for (i, &label) in e.mlm_labels.iter().enumerate() {
                if label != IGNORE_LABEL {
                    rows.push(start + i);
                    targets.push(label);
                }
            }
        }
        let nsp = self.nsp_head(tape, store, enc.hidden, &enc.spans)?;
        let nsp_targets: Vec<i64> = batch.iter().map(|e| i64::from(e.nsp_label)).collect();
        if rows.is_empty() {
            return tape.cross_entropy(nsp, &nsp_targets, IGNORE_LABEL);
        }
        let mlm = self.mlm_head(tape, store, enc.hidden, &rows)?;
        total_loss(tape, mlm, &targets, nsp, &nsp_targets)
    }

    /// Embed one basic block: `[CLS] t1 .. tn [SEP]` over the concatenated
    /// instruction tokens, tail-truncated to `block_max_len`, segment 0.
    /// An empty block embeds to the zero vector.
    pub fn embed_block(&self, instructions: &[Vec<u32>]) -> Result<Vec<f64>> {
        let budget = self.config.block_max_len.min(self.config.max_position).max(2) - 2;
        let body: Vec<u32> = instructions.iter().flatten().copied().take(budget).collect();
        if body.is_empty() {
            log::warn!("empty basic block embedded as zero vector");
            return Ok(vec![0.0; self.config.hidden]);
        }
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(CLS_ID);
        ids.extend(body);
        ids.push(SEP_ID);
        let segments = vec![0; ids.len()];
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &self.params, &[Sequence { ids: &ids, segments: &segments }])?;
        let hidden = tape.value(enc.hidden);
        Ok(match self.config.pooling {
            Pooling::Cls => hidden.row_slice(0).to_vec(),
            Pooling::Mean => {
                let mut acc = vec![0.0; hidden.cols()];
                for r in 0..hidden.rows() {
                    for (a, v) in acc.iter_mut().zip(hidden.row_slice(r)) {
                        *a += v;
                    }
                }
                acc.iter().map(|v| v / hidden.rows() as f64).collect()
            }
        })
    }

    /// Embed many blocks in parallel over shared frozen parameters.
    pub fn embed_blocks(&self, blocks: &[Vec<Vec<u32>>]) -> Result<Vec<Vec<f64>>> {
        blocks.par_iter().map(|b| self.embed_block(b)).collect()
    }
}

/// Masked-token cross-entropy plus next-instruction cross-entropy, each a
/// mean over its own targets.
pub fn total_loss(tape: &mut Tape, mlm_logits: Var, mlm_targets: &[i64], nsp_logits: Var, nsp_targets: &[i64]) -> Result<Var> {
    let mlm = tape.cross_entropy(mlm_logits, mlm_targets, IGNORE_LABEL)?;
    let nsp = tape.cross_entropy(nsp_logits, nsp_targets, IGNORE_LABEL)?;
    tape.add(mlm, nsp)
}

/// Bag-of-tokens stand-in for the language model: the mean of fixed
/// pseudo-random vectors keyed by token id.
pub fn hashed_block_embedding(instructions: &[Vec<u32>], dim: usize, max_tokens: usize) -> Vec<f64> {
    let tokens: Vec<u32> = instructions.iter().flatten().copied().take(max_tokens).collect();
    let mut acc = vec![0.0; dim];
    if tokens.is_empty() {
        return acc;
    }
    for &t in &tokens {
        for (j, a) in acc.iter_mut().enumerate() {
            let h = crate::rng::derive_seed(u64::from(t), &j.to_string());
            *a += (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        }
    }
    acc.iter().map(|v| v / tokens.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Adam over seeded shuffles of `corpus` for `config.epochs` epochs.
pub fn pretrain(corpus: &[PretrainExample], config: &LMConfig, seed: u64) -> Result<(LanguageModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty pretraining corpus".into()));
    }
    let mut model = LanguageModel::new(config.clone(), seed)?;
    let mut adam = Adam::with_lr(config.lr);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut crate::rng::rng_for(seed, &format!("lm/epoch/{epoch}")));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PretrainExample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape = Tape::new();
            let loss = model.loss_on_tape(&mut tape, &model.params, &batch)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.zero_grad();
            grads.accumulate_into(&tape, &mut model.params)?;
            adam.step(&mut model.params);
            steps += 1;
        }
        let mean = total / corpus.len() as f64;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((model, PretrainReport { epoch_losses, steps }))
}
