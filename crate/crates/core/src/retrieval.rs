//! Pair labeling, cosine scoring, task and pool construction, and the
//! AUC / Recall@k / MRR evaluation suites.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ggnn_moco::FunctionEmbedding;
use crate::ir_corpus::FunctionMeta;
use crate::rng::rng_for;

pub const DEFAULT_POOL_SIZE: usize = 101;
pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 10, 50];
const UNIT_NORM_TOL: f64 = 1e-9;

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1 when both functions were compiled from the same source function.
pub fn label_pair(a: &FunctionMeta, b: &FunctionMeta) -> u8 {
    u8::from(a.source_identity() == b.source_identity())
}

/// Compile-setting dimensions along which an evaluation pair differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalTask {
    #[serde(rename = "XC")]
    Xc,
    #[serde(rename = "XO")]
    Xo,
    #[serde(rename = "XA")]
    Xa,
    #[serde(rename = "XC+XO")]
    XcXo,
    #[serde(rename = "XO+XA")]
    XoXa,
    #[serde(rename = "XC+XA")]
    XcXa,
    #[serde(rename = "XC+XO+XA")]
    XcXoXa,
}

impl EvalTask {
    pub const ALL: [EvalTask; 7] = [
        EvalTask::Xc,
        EvalTask::Xo,
        EvalTask::Xa,
        EvalTask::XcXo,
        EvalTask::XoXa,
        EvalTask::XcXa,
        EvalTask::XcXoXa,
    ];

    /// `(compiler, optimization, architecture)` differ flags.
    pub fn dimensions(self) -> (bool, bool, bool) {
        match self {
            EvalTask::Xc => (true, false, false),
            EvalTask::Xo => (false, true, false),
            EvalTask::Xa => (false, false, true),
            EvalTask::XcXo => (true, true, false),
            EvalTask::XoXa => (false, true, true),
            EvalTask::XcXa => (true, false, true),
            EvalTask::XcXoXa => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Xc => "XC",
            EvalTask::Xo => "XO",
            EvalTask::Xa => "XA",
            EvalTask::XcXo => "XC+XO",
            EvalTask::XoXa => "XO+XA",
            EvalTask::XcXa => "XC+XA",
            EvalTask::XcXoXa => "XC+XO+XA",
        }
    }

    /// True iff `a` and `b` differ in exactly this task's dimensions. The
    /// compiler dimension covers family and version together.
    pub fn admits(self, a: &FunctionMeta, b: &FunctionMeta) -> bool {
        let (c, o, r) = self.dimensions();
        let dc = a.compiler != b.compiler || a.compiler_version != b.compiler_version;
        let dopt = a.optimization != b.optimization;
        let darch = a.architecture != b.architecture;
        dc == c && dopt == o && darch == r
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalTask::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown evaluation task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub label: u8,
}

/// Labeled index pairs over `functions` for `task`: `n_pos` positives
/// (same source) and `n_neg` negatives (different source), all differing in
/// exactly the task's dimensions. Positives first, then negatives.
pub fn build_task_pairs(
    functions: &[FunctionMeta],
    task: EvalTask,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    allow_short: bool,
) -> Result<Vec<LabeledPair>> {
    let mut rng = rng_for(seed, &format!("pairs/{task}"));
    let mut positives = Vec::new();
    if n_pos > 0 {
        for i in 0..functions.len() {
            for j in i + 1..functions.len() {
                if label_pair(&functions[i], &functions[j]) == 1 && task.admits(&functions[i], &functions[j]) {
                    positives.push((i, j));
                }
            }
        }
        positives.shuffle(&mut rng);
        positives.truncate(n_pos);
    }

    let mut negatives = Vec::new();
    if n_neg > 0 && functions.len() >= 2 {
        let mut seen = HashSet::new();
        let attempts = 50 * n_neg + 1000;
        for _ in 0..attempts {
            if negatives.len() == n_neg {
                break;
            }
            let i = rng.gen_range(0..functions.len());
            let j = rng.gen_range(0..functions.len());
            let key = (i.min(j), i.max(j));
            if label_pair(&functions[i], &functions[j]) == 0 && task.admits(&functions[i], &functions[j]) && seen.insert(key) {
                negatives.push((i, j));
            }
        }
    }

    if positives.len() < n_pos || negatives.len() < n_neg {
        let message = format!(
            "task {task}: achieved {} of {n_pos} positive and {} of {n_neg} negative pairs",
            positives.len(),
            negatives.len()
        );
        if !allow_short {
            return Err(Error::Insufficient(message));
        }
        log::warn!("{message}");
    }
    Ok(positives
        .into_iter()
        .map(|(a, b)| LabeledPair { a, b, label: 1 })
        .chain(negatives.into_iter().map(|(a, b)| LabeledPair { a, b, label: 0 }))
        .collect())
}

/// Exact AUC: probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// Ordered, immutable-after-build collection of unit embeddings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    entries: Vec<FunctionEmbedding>,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<FunctionEmbedding>) -> Result<Self> {
        let mut index = EmbeddingIndex::default();
        for e in entries {
            index.push(e)?;
        }
        Ok(index)
    }

    pub fn push(&mut self, entry: FunctionEmbedding) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.vector.len() != entry.vector.len() {
                return Err(Error::shape("index", &[first.vector.len()], &[entry.vector.len()]));
            }
        }
        let norm = entry.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Input(format!("embedding of {} has norm {norm}", entry.meta.key())));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[FunctionEmbedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Top-k entries as `(meta, score)`, best first.
    pub ranked: Vec<(FunctionMeta, f64)>,
    /// 1-based rank of the ground truth within the full pool.
    pub rank_of_gt: usize,
}

/// Score the whole pool against `query`, sort descending with insertion
/// order breaking ties, and locate the single ground truth.
pub fn search(query: &FunctionEmbedding, pool: &EmbeddingIndex, k: usize) -> Result<QueryResult> {
    if pool.is_empty() {
        return Err(Error::Input("empty pool".into()));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (i, e) in pool.entries().iter().enumerate() {
        scored.push((i, cosine_similarity(&query.vector, &e.vector)?));
    }
    let gts: Vec<usize> = scored
        .iter()
        .filter(|(i, _)| label_pair(&query.meta, &pool.entries()[*i].meta) == 1)
        .map(|(i, _)| *i)
        .collect();
    if gts.len() != 1 {
        return Err(Error::Input(format!("pool holds {} ground-truth matches, expected 1", gts.len())));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let rank_of_gt = scored.iter().position(|(i, _)| *i == gts[0]).expect("gt is in the pool") + 1;
    let ranked = scored
        .iter()
        .take(k)
        .map(|&(i, s)| (pool.entries()[i].meta.clone(), s))
        .collect();
    Ok(QueryResult { ranked, rank_of_gt })
}

/// Fraction of queries whose ground truth ranks within the top `k`.
pub fn recall_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::UndefinedMetric("Recall@k of no queries".into()));
    }
    Ok(results.iter().filter(|r| r.rank_of_gt <= k).count() as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the ground truth.
pub fn mrr(results: &[QueryResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("MRR of no queries".into()));
    }
    Ok(results.iter().map(|r| 1.0 / r.rank_of_gt as f64).sum::<f64>() / results.len() as f64)
}

/// One query with its candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub query: FunctionEmbedding,
    pub pool: EmbeddingIndex,
}

/// For each `(query, ground truth)` pair, a pool of the ground truth plus
/// `pool_size - 1` distractors drawn without replacement from those not
/// sharing the query's source; the ground truth lands at a random slot.
pub fn build_pools(
    positives: &[(FunctionEmbedding, FunctionEmbedding)],
    distractors: &[FunctionEmbedding],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<Pool>> {
    if pool_size < 2 {
        return Err(Error::Argument(format!("pool size must be at least 2, got {pool_size}")));
    }
    let mut rng = rng_for(seed, "pools");
    let mut out = Vec::with_capacity(positives.len());
    for (query, gt) in positives {
        let candidates: Vec<&FunctionEmbedding> = distractors
            .iter()
            .filter(|d| label_pair(&query.meta, &d.meta) == 0)
            .collect();
        if candidates.len() < pool_size - 1 {
            return Err(Error::Insufficient(format!(
                "{} distractors available for {}, pool needs {}",
                candidates.len(),
                query.meta.key(),
                pool_size - 1
            )));
        }
        let mut entries: Vec<FunctionEmbedding> = candidates
            .choose_multiple(&mut rng, pool_size - 1)
            .map(|d| (*d).clone())
            .collect();
        let slot = rng.gen_range(0..pool_size);
        entries.insert(slot, gt.clone());
        out.push(Pool {
            query: query.clone(),
            pool: EmbeddingIndex::new(entries)?,
        });
    }
    Ok(out)
}

/// Evaluation settings of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub recall_ks: Vec<usize>,
    pub allow_short: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_size: DEFAULT_POOL_SIZE,
            n_pos: 10_000,
            n_neg: 10_000,
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            allow_short: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: EvalTask,
    pub auc: Option<f64>,
    /// `recall@k` entries.
    #[serde(flatten)]
    pub recall: BTreeMap<String, f64>,
    pub mrr: f64,
    pub n_queries: usize,
    pub n_pairs: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl TaskReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("recall@{k}")).copied()
    }
}

/// One-to-one AUC over labeled task pairs and one-to-many ranking over
/// pools built from the task's positive pairs.
pub fn evaluate_task(embeddings: &[FunctionEmbedding], task: EvalTask, config: &EvalConfig, seed: u64) -> Result<TaskReport> {
    let metas: Vec<FunctionMeta> = embeddings.iter().map(|e| e.meta.clone()).collect();
    let pairs = build_task_pairs(&metas, task, config.n_pos, config.n_neg, seed, config.allow_short)?;
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in &pairs {
        scores.push(cosine_similarity(&embeddings[p.a].vector, &embeddings[p.b].vector)?);
        labels.push(p.label);
    }
    let auc_value = match auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(m)) => {
            log::warn!("task {task}: {m}");
            None
        }
        Err(e) => return Err(e),
    };

    let positives: Vec<(FunctionEmbedding, FunctionEmbedding)> = pairs
        .iter()
        .filter(|p| p.label == 1)
        .map(|p| (embeddings[p.a].clone(), embeddings[p.b].clone()))
        .collect();
    if positives.is_empty() {
        return Err(Error::Insufficient(format!("task {task}: no positive pairs to query")));
    }
    let pools = build_pools(&positives, embeddings, config.pool_size, seed)?;
    let results = pools
        .iter()
        .map(|p| search(&p.query, &p.pool, config.pool_size))
        .collect::<Result<Vec<_>>>()?;
    let recall = config
        .recall_ks
        .iter()
        .map(|&k| Ok((format!("recall@{k}"), recall_at_k(&results, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(TaskReport {
        task,
        auc: auc_value,
        recall,
        mrr: mrr(&results)?,
        n_queries: results.len(),
        n_pairs: pairs.len(),
        pool_size: config.pool_size,
        seed,
    })
}
