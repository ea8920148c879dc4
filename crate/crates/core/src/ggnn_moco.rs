//! Function encoder: a gated graph network over the basic-block CFG with a
//! gated sum readout, trained by momentum contrast against a queue of past
//! key embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir_corpus::{FunctionMeta, FunctionRecord};
use crate::rng::rng_for;
use crate::tensor::{gru_cell, linear, Adam, GruParams, LinearParams, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NodeInit {
    /// Zero-pad block embeddings to `node_dim`.
    #[default]
    Pad,
    /// Learned linear map from the block embedding size to `node_dim`.
    Project,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Graph,
    /// Mean of block embeddings, projected; no message passing.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GGNNConfig {
    pub steps: usize,
    pub node_dim: usize,
    pub out_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub temperature: f64,
    pub init_std: f64,
    pub node_init: NodeInit,
}

impl Default for GGNNConfig {
    fn default() -> Self {
        GGNNConfig {
            steps: 10,
            node_dim: 256,
            out_dim: 256,
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 256,
            epochs: 10,
            momentum: 0.999,
            queue_capacity: 8192,
            temperature: 0.07,
            init_std: 0.05,
            node_init: NodeInit::Pad,
        }
    }
}

impl GGNNConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.node_dim == 0 || self.out_dim == 0 || self.batch_size == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("node_dim, out_dim, batch_size and queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionEmbedding {
    pub meta: FunctionMeta,
    pub vector: Vec<f64>,
}

/// A CFG with one feature vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
}

impl GraphInput {
    pub fn new(features: Vec<Vec<f64>>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = features.len();
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {n} nodes")));
        }
        Ok(GraphInput { features, edges })
    }

    /// Nodes in block order, edges from the record's CFG.
    pub fn from_record(record: &FunctionRecord, block_embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if block_embeddings.len() != record.blocks.len() {
            return Err(Error::Input(format!(
                "{}: {} block embeddings for {} blocks",
                record.name,
                block_embeddings.len(),
                record.blocks.len()
            )));
        }
        let cfg = record.cfg();
        GraphInput::new(block_embeddings, cfg.index_edges())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// The same graph with node `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("not a permutation".into()));
        }
        let mut features = vec![Vec::new(); n];
        for (i, f) in self.features.iter().enumerate() {
            features[perm[i]] = f.clone();
        }
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        GraphInput::new(features, edges)
    }
}

/// Zero-pad each block embedding to `node_dim`.
pub fn node_init(block_embeddings: &[Vec<f64>], node_dim: usize) -> Result<Vec<Vec<f64>>> {
    block_embeddings
        .iter()
        .map(|e| {
            if e.len() > node_dim {
                return Err(Error::Config(format!(
                    "block embedding of {} dims exceeds node_dim {node_dim}",
                    e.len()
                )));
            }
            let mut v = e.clone();
            v.resize(node_dim, 0.0);
            Ok(v)
        })
        .collect()
}

const MSG_IN: &str = "ggnn.msg_in.w";
const MSG_OUT: &str = "ggnn.msg_out.w";
const MSG_BIAS: &str = "ggnn.msg.b";

/// One propagation step over `states[n, d]`: each node receives
/// `Σ_{u→v} h_u W_in + Σ_{v→w} h_w W_out + b` and updates through the GRU.
pub fn ggnn_step(tape: &mut Tape, store: &ParamStore, states: Var, edges: &[(usize, usize)]) -> Result<Var> {
    let (n, d) = {
        let t = tape.value(states);
        (t.rows(), t.cols())
    };
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {n} nodes")));
    }
    let bias = tape.param(store, MSG_BIAS)?;
    let zeros = tape.constant(Tensor::zeros(&[n, d]))?;
    let mut message = tape.add_bias(zeros, bias)?;
    if !edges.is_empty() {
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let w_in = tape.param(store, MSG_IN)?;
        let w_out = tape.param(store, MSG_OUT)?;
        let h_in = tape.matmul(states, w_in)?;
        let from_src = tape.gather_rows(h_in, &src)?;
        let incoming = tape.scatter_add_rows(from_src, &dst, n)?;
        let h_out = tape.matmul(states, w_out)?;
        let from_dst = tape.gather_rows(h_out, &dst)?;
        let outgoing = tape.scatter_add_rows(from_dst, &src, n)?;
        message = tape.add(message, incoming)?;
        message = tape.add(message, outgoing)?;
    }
    gru_cell(tape, store, states, message, &GruParams::new("ggnn.gru"))
}

fn mlp(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, store, x, &LinearParams::new(&format!("{prefix}.hidden")))?;
    let h = tape.tanh(h)?;
    linear(tape, store, h, &LinearParams::new(&format!("{prefix}.out")))
}

/// Gated sum readout `tanh(Σ_v σ(i(h_v)) ⊙ tanh(j(h_v)))` per graph;
/// `graph_of[v]` names the graph of node `v`. Not normalized.
pub fn readout(tape: &mut Tape, store: &ParamStore, states: Var, graph_of: &[usize], n_graphs: usize) -> Result<Var> {
    if tape.value(states).rows() == 0 {
        return Err(Error::Graph("readout of an empty graph".into()));
    }
    let i = mlp(tape, store, states, "readout.i")?;
    let gate = tape.sigmoid(i)?;
    let j = mlp(tape, store, states, "readout.j")?;
    let value = tape.tanh(j)?;
    let gated = tape.mul(gate, value)?;
    let summed = tape.scatter_add_rows(gated, graph_of, n_graphs)?;
    tape.tanh(summed)
}

/// Function encoder parameters plus the settings that shape them.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionEncoder {
    pub config: GGNNConfig,
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub params: ParamStore,
}

impl FunctionEncoder {
    pub fn new(config: GGNNConfig, kind: EncoderKind, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("block embedding dimension must be positive".into()));
        }
        let mut rng = rng_for(seed, "ggnn/init");
        let (d, o, std) = (config.node_dim, config.out_dim, config.init_std);
        let mut p = ParamStore::new();
        match kind {
            EncoderKind::Graph => {
                match config.node_init {
                    NodeInit::Pad => {
                        if input_dim > d {
                            return Err(Error::Config(format!(
                                "block embedding of {input_dim} dims exceeds node_dim {d}"
                            )));
                        }
                    }
                    NodeInit::Project => LinearParams::new("init.proj").init(&mut p, input_dim, d, std, &mut rng)?,
                }
                p.insert_normal(MSG_IN, &[d, d], std, &mut rng)?;
                p.insert_normal(MSG_OUT, &[d, d], std, &mut rng)?;
                p.insert_full(MSG_BIAS, &[d], 0.0)?;
                GruParams::new("ggnn.gru").init(&mut p, d, std, &mut rng)?;
                for head in ["readout.i", "readout.j"] {
                    LinearParams::new(&format!("{head}.hidden")).init(&mut p, d, o, std, &mut rng)?;
                    LinearParams::new(&format!("{head}.out")).init(&mut p, o, o, std, &mut rng)?;
                }
            }
            EncoderKind::Pooled => LinearParams::new("pool.proj").init(&mut p, input_dim, o, std, &mut rng)?,
        }
        Ok(FunctionEncoder {
            config,
            kind,
            input_dim,
            params: p,
        })
    }

    pub fn from_params(config: GGNNConfig, kind: EncoderKind, input_dim: usize, params: ParamStore) -> Result<Self> {
        let fresh = FunctionEncoder::new(config, kind, input_dim, 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Checkpoint("parameters do not match the encoder configuration".into()));
        }
        Ok(FunctionEncoder { params, ..fresh })
    }

    /// Record unit-norm embeddings `[B, out_dim]` of `graphs` under `store`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graphs: &[&GraphInput]) -> Result<Var> {
        if graphs.is_empty() {
            return Err(Error::Input("no graphs to encode".into()));
        }
        let mut rows = Vec::new();
        let mut graph_of = Vec::new();
        let mut edges = Vec::new();
        for (g, graph) in graphs.iter().enumerate() {
            if graph.is_empty() {
                return Err(Error::Graph("cannot encode a graph without nodes".into()));
            }
            let offset = rows.len();
            for f in &graph.features {
                if f.len() != self.input_dim {
                    return Err(Error::shape("encode", &[f.len()], &[self.input_dim]));
                }
                rows.push(f.clone());
                graph_of.push(g);
            }
            edges.extend(graph.edges.iter().map(|&(a, b)| (a + offset, b + offset)));
        }
        let pooled = match self.kind {
            EncoderKind::Graph => {
                let mut h = match self.config.node_init {
                    NodeInit::Pad => tape.constant(Tensor::from_rows(&node_init(&rows, self.config.node_dim)?)?)?,
                    NodeInit::Project => {
                        let x = tape.constant(Tensor::from_rows(&rows)?)?;
                        linear(tape, store, x, &LinearParams::new("init.proj"))?
                    }
                };
                for _ in 0..self.config.steps {
                    h = ggnn_step(tape, store, h, &edges)?;
                }
                readout(tape, store, h, &graph_of, graphs.len())?
            }
            EncoderKind::Pooled => {
                let means: Vec<Vec<f64>> = graphs
                    .iter()
                    .map(|g| {
                        let mut m = vec![0.0; self.input_dim];
                        for f in &g.features {
                            for (a, v) in m.iter_mut().zip(f) {
                                *a += v / g.len() as f64;
                            }
                        }
                        m
                    })
                    .collect();
                let x = tape.constant(Tensor::from_rows(&means)?)?;
                linear(tape, store, x, &LinearParams::new("pool.proj"))?
            }
        };
        tape.l2_normalize_rows(pooled)
    }

    /// Embeddings of `graphs` under this encoder's own parameters.
    pub fn encode(&self, graphs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
        self.encode_with(&self.params, graphs)
    }

    fn encode_with(&self, store: &ParamStore, graphs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, graphs)?;
        let t = tape.value(out);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    pub fn encode_function(&self, graph: &GraphInput, meta: &FunctionMeta) -> Result<FunctionEmbedding> {
        let vector = self.encode(&[graph])?.pop().expect("one graph in, one embedding out");
        Ok(FunctionEmbedding {
            meta: meta.clone(),
            vector,
        })
    }
}

/// Momentum update on two stores of identical layout:
/// `key ← m·key + (1 − m)·query`.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if !key.same_layout(query) {
        return Err(Error::Checkpoint("key and query parameters differ in layout".into()));
    }
    for p in key.iter_mut() {
        let q = query.tensor(&p.name)?;
        for (k, &qv) in p.tensor.data_mut().iter_mut().zip(q.data()) {
            *k = m * *k + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Fixed-capacity ring of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    entries: Vec<Vec<f64>>,
    cursor: usize,
    writes: usize,
}

impl EmbeddingQueue {
    pub fn from_entries(entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(EmbeddingQueue {
            entries,
            cursor: 0,
            writes: 0,
        })
    }

    /// `capacity` random unit vectors.
    pub fn random<R: Rng>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let entries = (0..capacity)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        EmbeddingQueue::from_entries(entries)
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Overwrite the oldest entries with `keys`, in order.
    pub fn enqueue(&mut self, keys: &[Vec<f64>]) {
        for k in keys {
            self.entries[self.cursor] = k.clone();
            self.cursor = (self.cursor + 1) % self.entries.len();
            self.writes += 1;
        }
    }

    /// Fraction of slots holding real keys rather than initial noise.
    pub fn fill(&self) -> f64 {
        self.writes.min(self.capacity()) as f64 / self.capacity() as f64
    }

    /// True once every initial entry has been overwritten.
    pub fn warmed_up(&self) -> bool {
        self.writes >= self.capacity()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.entries)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE of one query: cross-entropy of target 0 over
/// `[q·k_pos, q·n_1, …] / τ`.
pub fn info_nce_loss(q: &[f64], k_pos: &[f64], queue: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if queue.is_empty() {
        return Err(Error::Input("empty negative queue".into()));
    }
    let logits: Vec<f64> = std::iter::once(dot(q, k_pos))
        .chain(queue.iter().map(|n| dot(q, n)))
        .map(|s| s / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Mean InfoNCE of a batch on `tape`; `q[B, d]` carries gradient, keys and
/// queue are constants.
pub fn info_nce_on_tape(tape: &mut Tape, q: Var, k_pos: &Tensor, queue: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let k = tape.constant(k_pos.clone())?;
    let neg = tape.constant(queue.transpose2())?;
    let qk = tape.mul(q, k)?;
    let pos = tape.sum_cols(qk)?;
    let negs = tape.matmul(q, neg)?;
    let logits = tape.concat_cols(&[pos, negs])?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let targets = vec![0; tape.value(q).rows()];
    tape.cross_entropy(logits, &targets, -1)
}

/// Loss of one contrastive step: queries encoded under `store`, against
/// precomputed keys and queue.
pub fn contrastive_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &FunctionEncoder,
    queries: &[&GraphInput],
    keys: &Tensor,
    queue: &Tensor,
) -> Result<Var> {
    let q = encoder.forward(tape, store, queries)?;
    info_nce_on_tape(tape, q, keys, queue, encoder.config.temperature)
}

/// Query and key encoders plus the negative queue.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: FunctionEncoder,
    pub key: ParamStore,
    pub queue: EmbeddingQueue,
}

impl MoCoState {
    pub fn new(query: FunctionEncoder, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "moco/queue");
        let queue = EmbeddingQueue::random(query.config.queue_capacity, query.config.out_dim, &mut rng)?;
        let key = query.params.clone();
        Ok(MoCoState { query, key, queue })
    }

    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        momentum_update(&mut self.key, &self.query.params, m)
    }
}

/// Functions grouped by source identity; every group with two or more
/// members yields positive pairs.
#[derive(Debug, Clone)]
pub struct ContrastiveDataset {
    pub graphs: Vec<GraphInput>,
    pub groups: Vec<usize>,
}

impl ContrastiveDataset {
    pub fn new(graphs: Vec<GraphInput>, groups: Vec<usize>) -> Result<Self> {
        if graphs.len() != groups.len() {
            return Err(Error::Input("one group id per graph required".into()));
        }
        Ok(ContrastiveDataset { graphs, groups })
    }

    fn members(&self) -> Vec<Vec<usize>> {
        let n_groups = self.groups.iter().max().map_or(0, |g| g + 1);
        let mut members = vec![Vec::new(); n_groups];
        for (i, &g) in self.groups.iter().enumerate() {
            members[g].push(i);
        }
        members
    }

    /// One epoch of (query, positive) index pairs: every function with a
    /// partner appears once as query, paired with a uniformly drawn other
    /// member of its group.
    pub fn epoch_pairs<R: Rng>(&self, rng: &mut R) -> Vec<(usize, usize)> {
        let members = self.members();
        let mut pairs: Vec<(usize, usize)> = (0..self.graphs.len())
            .filter_map(|i| {
                let group = &members[self.groups[i]];
                if group.len() < 2 {
                    return None;
                }
                let mut j = group[rng.gen_range(0..group.len() - 1)];
                if j == i {
                    j = group[group.len() - 1];
                }
                Some((i, j))
            })
            .collect();
        pairs.shuffle(rng);
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub queue_fill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Losses after the queue warm-up, one per step.
    pub curve: Vec<StepLog>,
    /// Mean post-warm-up loss of each epoch; `None` while warming up.
    pub epoch_losses: Vec<Option<f64>>,
    pub steps: usize,
}

impl TrainReport {
    /// First and last epoch means past warm-up.
    pub fn first_last(&self) -> Option<(f64, f64)> {
        let mut done = self.epoch_losses.iter().flatten();
        let first = *done.next()?;
        Some((first, *self.epoch_losses.iter().flatten().last()?))
    }
}

/// Momentum-contrast training of a fresh encoder.
pub fn train_contrastive(
    dataset: &ContrastiveDataset,
    config: &GGNNConfig,
    kind: EncoderKind,
    seed: u64,
) -> Result<(FunctionEncoder, TrainReport)> {
    config.validate()?;
    let input_dim = dataset
        .graphs
        .iter()
        .flat_map(|g| g.features.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Config("empty contrastive dataset".into()))?;
    let encoder = FunctionEncoder::new(config.clone(), kind, input_dim, seed)?;
    let mut state = MoCoState::new(encoder, seed)?;
    let mut adam = Adam::new(config.lr, (0.9, 0.999), 1e-8, config.weight_decay);
    let mut rng = rng_for(seed, "moco/pairs");
    let mut report = TrainReport {
        curve: Vec::new(),
        epoch_losses: Vec::new(),
        steps: 0,
    };
    for epoch in 0..config.epochs {
        let pairs = dataset.epoch_pairs(&mut rng);
        if pairs.is_empty() {
            return Err(Error::Config("no group has two or more functions".into()));
        }
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in pairs.chunks(config.batch_size) {
            let queries: Vec<&GraphInput> = batch.iter().map(|&(q, _)| &dataset.graphs[q]).collect();
            let positives: Vec<&GraphInput> = batch.iter().map(|&(_, k)| &dataset.graphs[k]).collect();
            let keys = state.query.encode_with(&state.key, &positives)?;
            let key_tensor = Tensor::from_rows(&keys)?;
            let queue_tensor = state.queue.to_tensor()?;

            let mut tape = Tape::new();
            let loss = contrastive_loss(&mut tape, &state.query.params, &state.query, &queries, &key_tensor, &queue_tensor)?;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            state.query.params.zero_grad();
            grads.accumulate_into(&tape, &mut state.query.params)?;
            adam.step(&mut state.query.params);
            state.momentum_update(config.momentum)?;

            let warm = state.queue.warmed_up();
            state.queue.enqueue(&keys);
            report.steps += 1;
            if warm {
                report.curve.push(StepLog {
                    step: report.steps,
                    loss: value,
                    queue_fill: state.queue.fill(),
                });
                epoch_sum += value;
                epoch_n += 1;
            }
        }
        let mean = (epoch_n > 0).then(|| epoch_sum / epoch_n as f64);
        log::info!("contrastive epoch {epoch}: mean loss {mean:?}");
        report.epoch_losses.push(mean);
    }
    Ok((state.query, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GGNNConfig {
        GGNNConfig {
            steps: 2,
            node_dim: 6,
            out_dim: 5,
            queue_capacity: 8,
            batch_size: 4,
            epochs: 2,
            ..GGNNConfig::default()
        }
    }

    fn feats(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, "feats");
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn padding_contract() {
        let out = node_init(&[vec![3.0, 4.0]], 4).unwrap();
        assert_eq!(out, vec![vec![3.0, 4.0, 0.0, 0.0]]);
        assert_eq!(node_init(&[vec![1.0, 2.0]], 2).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(matches!(node_init(&[vec![1.0; 3]], 2), Err(Error::Config(_))));
    }

    #[test]
    fn edge_out_of_range_is_graph_error() {
        assert!(matches!(GraphInput::new(feats(2, 3, 0), vec![(0, 2)]), Err(Error::Graph(_))));
    }

    #[test]
    fn no_edges_means_bias_only_message() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "t");
        store.insert_normal(MSG_IN, &[2, 2], 1.0, &mut rng).unwrap();
        store.insert_normal(MSG_OUT, &[2, 2], 1.0, &mut rng).unwrap();
        store.insert(MSG_BIAS, Tensor::row(&[0.3, -0.2]).reshape(&[2]).unwrap()).unwrap();
        GruParams::new("ggnn.gru").init(&mut store, 2, 0.5, &mut rng).unwrap();
        let h = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.5, -0.4]]).unwrap();

        let mut tape = Tape::new();
        let s = tape.constant(h.clone()).unwrap();
        let with_graph = ggnn_step(&mut tape, &store, s, &[]).unwrap();

        let mut tape2 = Tape::new();
        let s2 = tape2.constant(h).unwrap();
        let msg = tape2.constant(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap()).unwrap();
        let direct = gru_cell(&mut tape2, &store, s2, msg, &GruParams::new("ggnn.gru")).unwrap();
        assert_eq!(tape.value(with_graph), tape2.value(direct));
    }

    #[test]
    fn encoder_output_is_unit_norm_and_deterministic() {
        let enc = FunctionEncoder::new(small_config(), EncoderKind::Graph, 4, 7).unwrap();
        let g = GraphInput::new(feats(3, 4, 1), vec![(0, 1), (1, 2), (2, 0)]).unwrap();
        let a = enc.encode(&[&g]).unwrap();
        let b = enc.encode(&[&g]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 5);
        assert!((dot(&a[0], &a[0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batching_matches_single_encoding() {
        let enc = FunctionEncoder::new(small_config(), EncoderKind::Graph, 4, 7).unwrap();
        let g1 = GraphInput::new(feats(3, 4, 1), vec![(0, 1), (1, 2)]).unwrap();
        let g2 = GraphInput::new(feats(2, 4, 2), vec![(1, 0)]).unwrap();
        let both = enc.encode(&[&g1, &g2]).unwrap();
        let one = enc.encode(&[&g2]).unwrap();
        for (x, y) in both[1].iter().zip(&one[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_limits() {
        let mut key = ParamStore::new();
        key.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut query = ParamStore::new();
        query.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut k = key.clone();
        momentum_update(&mut k, &query, 0.999).unwrap();
        assert_eq!(k.tensor("w").unwrap().data()[0], 0.999);
        let mut k = key.clone();
        momentum_update(&mut k, &query, 1.0).unwrap();
        assert_eq!(k.tensor("w").unwrap().data()[0], 1.0);
        let mut k = key.clone();
        momentum_update(&mut k, &query, 0.0).unwrap();
        assert_eq!(k.tensor("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut q = EmbeddingQueue::from_entries(vec![vec![0.0]; 4]).unwrap();
        q.enqueue(&[vec![1.0], vec![2.0]]);
        q.enqueue(&[vec![3.0], vec![4.0]]);
        assert!(q.warmed_up());
        q.enqueue(&[vec![5.0], vec![6.0]]);
        assert_eq!(q.entries(), &[vec![5.0], vec![6.0], vec![3.0], vec![4.0]]);
        assert_eq!(q.cursor(), 2);
    }

    #[test]
    fn info_nce_limits() {
        let q = vec![1.0, 0.0];
        let uniform = vec![vec![1.0, 0.0]; 7];
        let l = info_nce_loss(&q, &q, &uniform, 0.07).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-9);
        let far = vec![vec![-1.0, 0.0]; 7];
        assert!(info_nce_loss(&q, &q, &far, 0.07).unwrap() < 1e-9);
        assert!(matches!(info_nce_loss(&q, &q, &far, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn tape_info_nce_matches_direct() {
        let mut rng = rng_for(3, "nce");
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let n = dot(&v, &v).sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let qs: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
        let ks: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
        let queue: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng)).collect();
        let direct: f64 = (0..3)
            .map(|i| info_nce_loss(&qs[i], &ks[i], &queue, 0.1).unwrap())
            .sum::<f64>()
            / 3.0;
        let mut tape = Tape::new();
        let q = tape.input(Tensor::from_rows(&qs).unwrap()).unwrap();
        let l = info_nce_on_tape(
            &mut tape,
            q,
            &Tensor::from_rows(&ks).unwrap(),
            &Tensor::from_rows(&queue).unwrap(),
            0.1,
        )
        .unwrap();
        assert!((tape.value(l).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn pooled_encoder_ignores_edges() {
        let enc = FunctionEncoder::new(small_config(), EncoderKind::Pooled, 4, 1).unwrap();
        let f = feats(3, 4, 9);
        let a = GraphInput::new(f.clone(), vec![(0, 1)]).unwrap();
        let b = GraphInput::new(f, vec![(2, 1), (1, 0)]).unwrap();
        assert_eq!(enc.encode(&[&a]).unwrap(), enc.encode(&[&b]).unwrap());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let ds = ContrastiveDataset::new(vec![], vec![]).unwrap();
        assert!(matches!(
            train_contrastive(&ds, &small_config(), EncoderKind::Graph, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_key_grads_stay_zero() {
        let mut graphs = Vec::new();
        let mut groups = Vec::new();
        for g in 0..4 {
            for v in 0..3 {
                let mut f = feats(3, 4, g);
                f[0][0] += 0.01 * v as f64;
                graphs.push(GraphInput::new(f, vec![(0, 1), (1, 2)]).unwrap());
                groups.push(g as usize);
            }
        }
        let ds = ContrastiveDataset::new(graphs, groups).unwrap();
        let (a, ra) = train_contrastive(&ds, &small_config(), EncoderKind::Graph, 5).unwrap();
        let (b, rb) = train_contrastive(&ds, &small_config(), EncoderKind::Graph, 5).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert_eq!(ra.steps, 6);
        assert_eq!(ra.curve.len(), 4);
    }
}
