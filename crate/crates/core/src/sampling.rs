//! Pretraining corpus construction: instruction-level CFGs, one-step random
//! walk pairs, next-instruction examples and masked-token corruption.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ir_corpus::FunctionRecord;
use crate::normalize::{CLS_ID, MASK_ID, N_SPECIAL, SEP_ID};

/// Label value at positions that carry no masked-token target.
pub const IGNORE_LABEL: i64 = -1;

pub const MASK_SELECT_RATE: f64 = 0.15;
pub const MASK_TOKEN_SHARE: f64 = 0.70;
pub const RANDOM_TOKEN_SHARE: f64 = 0.15;

pub const DEFAULT_WALKS_PER_NODE: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionNode {
    pub func_key: String,
    pub block_label: String,
    pub instr_index: usize,
}

/// Instruction-level CFG: sequential edges inside blocks, jump edges from a
/// block's last instruction to the first instruction of each successor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstructionGraph {
    pub nodes: Vec<InstructionNode>,
    pub tokens: Vec<Vec<u32>>,
    pub successors: Vec<Vec<usize>>,
}

impl InstructionGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }

    pub fn is_successor(&self, from: usize, to: usize) -> bool {
        self.successors[from].contains(&to)
    }
}

/// Expand `func` to instruction granularity. `blocks_tokens[b][i]` holds the
/// token ids of instruction `i` of block `b`. Blocks without instructions
/// contribute no nodes and absorb no jump edges.
pub fn expand_to_instruction_graph(func: &FunctionRecord, blocks_tokens: &[Vec<Vec<u32>>]) -> InstructionGraph {
    let key = func.key();
    let mut graph = InstructionGraph::default();
    let mut first_of = Vec::with_capacity(func.blocks.len());
    let mut last_of = Vec::with_capacity(func.blocks.len());

    for (block, toks) in func.blocks.iter().zip(blocks_tokens) {
        if toks.is_empty() {
            first_of.push(None);
            last_of.push(None);
            continue;
        }
        let start = graph.nodes.len();
        for (i, t) in toks.iter().enumerate() {
            graph.nodes.push(InstructionNode {
                func_key: key.clone(),
                block_label: block.label.clone(),
                instr_index: i,
            });
            graph.tokens.push(t.clone());
            graph.successors.push(Vec::new());
            if i > 0 {
                graph.successors[start + i - 1].push(start + i);
            }
        }
        first_of.push(Some(start));
        last_of.push(Some(start + toks.len() - 1));
    }

    for (pred, succ) in func.cfg().index_edges() {
        if let (Some(Some(from)), Some(Some(to))) = (last_of.get(pred), first_of.get(succ)) {
            if !graph.successors[*from].contains(to) {
                graph.successors[*from].push(*to);
            }
        }
    }
    graph
}

/// For every node with successors, draw `walks_per_node` successors
/// uniformly (probability `1/d(v)` each). Terminal nodes emit nothing.
pub fn sample_walk_pairs<R: Rng>(graph: &InstructionGraph, walks_per_node: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(graph.len() * walks_per_node);
    for (v, succ) in graph.successors.iter().enumerate() {
        if succ.is_empty() {
            continue;
        }
        for _ in 0..walks_per_node {
            pairs.push((v, succ[rng.gen_range(0..succ.len())]));
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NspPair {
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    /// 1 when `b` follows `a` in control flow, else 0.
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NspDiagnostics {
    /// Positives dropped because no non-successor partner existed.
    pub skipped: usize,
    /// Negatives drawn from another function's pool.
    pub cross_function: usize,
}

const REJECTION_TRIES: usize = 32;

fn sample_non_successor<R: Rng>(graph: &InstructionGraph, a: usize, rng: &mut R) -> Option<usize> {
    if graph.is_empty() {
        return None;
    }
    for _ in 0..REJECTION_TRIES {
        let c = rng.gen_range(0..graph.len());
        if !graph.is_successor(a, c) {
            return Some(c);
        }
    }
    let candidates: Vec<usize> = (0..graph.len()).filter(|&c| !graph.is_successor(a, c)).collect();
    candidates.choose(rng).copied()
}

/// Turn walk pairs of `pool[graph_idx]` into balanced next-instruction
/// examples: each pair is a positive, and `a` is also paired with a uniform
/// non-successor drawn from the same function when possible, else from
/// another function of `pool`.
pub fn make_nsp_examples<R: Rng>(
    pool: &[InstructionGraph],
    graph_idx: usize,
    pairs: &[(usize, usize)],
    rng: &mut R,
) -> (Vec<NspPair>, NspDiagnostics) {
    let graph = &pool[graph_idx];
    let mut out = Vec::with_capacity(pairs.len() * 2);
    let mut diag = NspDiagnostics::default();
    let others: Vec<usize> = (0..pool.len())
        .filter(|&g| g != graph_idx && !pool[g].is_empty())
        .collect();

    for &(a, b) in pairs {
        let negative = match sample_non_successor(graph, a, rng) {
            Some(c) => Some(graph.tokens[c].clone()),
            None => others.choose(rng).map(|&g| {
                diag.cross_function += 1;
                let other = &pool[g];
                other.tokens[rng.gen_range(0..other.len())].clone()
            }),
        };
        let Some(negative) = negative else {
            log::debug!("no non-successor partner for node {a}; pair skipped");
            diag.skipped += 1;
            continue;
        };
        out.push(NspPair {
            a: graph.tokens[a].clone(),
            b: graph.tokens[b].clone(),
            label: 1,
        });
        out.push(NspPair {
            a: graph.tokens[a].clone(),
            b: negative,
            label: 0,
        });
    }
    (out, diag)
}

/// Corrupt the eligible positions of `ids` for masked-token prediction.
///
/// `floor(0.15 * eligible)` positions (at least one) are selected without
/// replacement; each becomes `[MASK]` with probability 0.70, a random
/// non-special id with probability 0.15, or stays unchanged. Returns the
/// corrupted ids and per-position labels ([`IGNORE_LABEL`] when unselected).
pub fn apply_mlm_masking<R: Rng>(
    ids: &[u32],
    eligible: &[bool],
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<u32>, Vec<i64>) {
    let mut masked = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    let mut positions: Vec<usize> = (0..ids.len()).filter(|&i| eligible[i]).collect();
    if positions.is_empty() {
        return (masked, labels);
    }
    let n_select = ((positions.len() as f64 * MASK_SELECT_RATE).floor() as usize).max(1);
    let (selected, _) = positions.partial_shuffle(rng, n_select);
    let can_randomize = vocab_size > N_SPECIAL as usize;
    for &pos in selected.iter() {
        labels[pos] = i64::from(ids[pos]);
        let u: f64 = rng.gen();
        if u < MASK_TOKEN_SHARE {
            masked[pos] = MASK_ID;
        } else if u < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE
            && can_randomize {
                masked[pos] = rng.gen_range(N_SPECIAL..vocab_size as u32);
            }
    }
    (masked, labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub mlm_labels: Vec<i64>,
    pub nsp_label: u8,
}

impl PretrainExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Lay out `[CLS] A [SEP] B [SEP]`, truncating the longer side first (each
/// side keeps at least one token) until the total fits `max_len`. Labels are
/// all [`IGNORE_LABEL`]; call [`mask_example`] to corrupt.
pub fn assemble_example(a: &[u32], b: &[u32], label: u8, max_len: usize) -> PretrainExample {
    let max_len = max_len.max(5);
    let mut a_len = a.len().max(1);
    let mut b_len = b.len().max(1);
    while a_len + b_len + 3 > max_len && (a_len > 1 || b_len > 1) {
        if a_len > b_len {
            a_len -= 1;
        } else {
            b_len -= 1;
        }
    }
    let a_part = if a.is_empty() { &[crate::normalize::UNK_ID][..] } else { &a[..a_len] };
    let b_part = if b.is_empty() { &[crate::normalize::UNK_ID][..] } else { &b[..b_len] };

    let mut input_ids = Vec::with_capacity(a_len + b_len + 3);
    input_ids.push(CLS_ID);
    input_ids.extend_from_slice(a_part);
    input_ids.push(SEP_ID);
    let first_segment = input_ids.len();
    input_ids.extend_from_slice(b_part);
    input_ids.push(SEP_ID);

    let n = input_ids.len();
    PretrainExample {
        segment_ids: (0..n).map(|i| u32::from(i >= first_segment)).collect(),
        position_ids: (0..n as u32).collect(),
        mlm_labels: vec![IGNORE_LABEL; n],
        input_ids,
        nsp_label: label,
    }
}

/// Apply [`apply_mlm_masking`] to the instruction tokens of `ex`.
pub fn mask_example<R: Rng>(ex: &mut PretrainExample, vocab_size: usize, rng: &mut R) {
    let n = ex.len();
    let second_sep = n - 1;
    let first_sep = ex.segment_ids.iter().position(|&s| s == 1).map_or(n - 1, |p| p - 1);
    let eligible: Vec<bool> = (0..n).map(|i| i != 0 && i != first_sep && i != second_sep).collect();
    let (ids, labels) = apply_mlm_masking(&ex.input_ids, &eligible, vocab_size, rng);
    ex.input_ids = ids;
    ex.mlm_labels = labels;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub global_seed: u64,
    pub walks_per_node: usize,
    pub max_len: usize,
    pub max_pairs: usize,
    pub n_examples: usize,
    pub n_positive: usize,
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub walks_per_node: usize,
    pub max_len: usize,
    /// Cap on walk pairs kept across the corpus (0 = no cap).
    pub max_pairs: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            walks_per_node: DEFAULT_WALKS_PER_NODE,
            max_len: DEFAULT_MAX_LEN,
            max_pairs: 0,
        }
    }
}

/// Materialize the full pretraining corpus. Each function samples from its
/// own seed stream derived from `(seed, func_key)`.
pub fn build_pretrain_corpus(
    graphs: &[InstructionGraph],
    keys: &[String],
    vocab_size: usize,
    config: &SamplingConfig,
    seed: u64,
) -> crate::Result<(Vec<PretrainExample>, CorpusManifest)> {
    if config.walks_per_node < 1 {
        return Err(crate::Error::Config("walks_per_node must be at least 1".into()));
    }
    if config.max_len < 8 {
        return Err(crate::Error::Config("max_len must be at least 8".into()));
    }
    let mut pair_sets = Vec::with_capacity(graphs.len());
    for (g, key) in keys.iter().enumerate() {
        let mut rng = crate::rng::rng_for(seed, &format!("walk/{key}"));
        let pairs = sample_walk_pairs(&graphs[g], config.walks_per_node, &mut rng);
        pair_sets.extend(pairs.into_iter().map(|p| (g, p)));
    }
    if config.max_pairs > 0 && pair_sets.len() > config.max_pairs {
        let mut rng = crate::rng::rng_for(seed, "walk/cap");
        pair_sets.shuffle(&mut rng);
        pair_sets.truncate(config.max_pairs);
        pair_sets.sort_unstable();
    }

    let mut examples = Vec::with_capacity(pair_sets.len() * 2);
    let mut skipped = 0;
    let mut start = 0;
    while start < pair_sets.len() {
        let g = pair_sets[start].0;
        let end = start + pair_sets[start..].iter().take_while(|(h, _)| *h == g).count();
        let pairs: Vec<(usize, usize)> = pair_sets[start..end].iter().map(|(_, p)| *p).collect();
        let mut rng = crate::rng::rng_for(seed, &format!("nsp/{}", keys[g]));
        let (nsp, diag) = make_nsp_examples(graphs, g, &pairs, &mut rng);
        skipped += diag.skipped;
        for pair in nsp {
            let mut ex = assemble_example(&pair.a, &pair.b, pair.label, config.max_len);
            mask_example(&mut ex, vocab_size, &mut rng);
            examples.push(ex);
        }
        start = end;
    }
    let n_positive = examples.iter().filter(|e| e.nsp_label == 1).count();
    let manifest = CorpusManifest {
        global_seed: seed,
        walks_per_node: config.walks_per_node,
        max_len: config.max_len,
        max_pairs: config.max_pairs,
        n_examples: examples.len(),
        n_positive,
        skipped_pairs: skipped,
    };
    Ok((examples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir_corpus::{BlockRecord, FunctionMeta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(blocks: &[(&str, usize)], edges: &[(&str, &str)]) -> (FunctionRecord, Vec<Vec<Vec<u32>>>) {
        let rec = FunctionRecord {
            name: "f".into(),
            meta: FunctionMeta::default(),
            blocks: blocks
                .iter()
                .map(|(l, n)| BlockRecord {
                    label: l.to_string(),
                    instructions: vec!["ret void".into(); *n],
                })
                .collect(),
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        };
        let mut next = 10;
        let toks = blocks
            .iter()
            .map(|(_, n)| {
                (0..*n)
                    .map(|_| {
                        next += 1;
                        vec![next]
                    })
                    .collect()
            })
            .collect();
        (rec, toks)
    }

    fn edge_list(g: &InstructionGraph) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = g
            .successors
            .iter()
            .enumerate()
            .flat_map(|(v, s)| s.iter().map(move |&w| (v, w)))
            .collect();
        e.sort_unstable();
        e
    }

    #[test]
    fn single_block_is_a_chain() {
        let (rec, toks) = record(&[("entry", 3)], &[]);
        let g = expand_to_instruction_graph(&rec, &toks);
        assert_eq!(g.len(), 3);
        assert_eq!(edge_list(&g), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn two_blocks_with_jump() {
        let (rec, toks) = record(&[("entry", 2), ("b", 2)], &[("entry", "b")]);
        let g = expand_to_instruction_graph(&rec, &toks);
        assert_eq!(g.len(), 4);
        assert_eq!(edge_list(&g), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn diamond_entry_has_two_jump_successors() {
        let (rec, toks) = record(
            &[("entry", 2), ("b1", 1), ("b2", 1), ("b3", 1)],
            &[("entry", "b1"), ("entry", "b2"), ("b1", "b3"), ("b2", "b3")],
        );
        let g = expand_to_instruction_graph(&rec, &toks);
        assert_eq!(g.successors[1], vec![2, 3]);
        assert_eq!(g.successors[4], Vec::<usize>::new());
    }

    #[test]
    fn empty_function_gives_empty_graph() {
        let (rec, toks) = record(&[], &[]);
        assert!(expand_to_instruction_graph(&rec, &toks).is_empty());
    }

    #[test]
    fn walk_pairs_follow_successors() {
        let (rec, toks) = record(&[("entry", 2), ("b1", 1), ("b2", 1)], &[("entry", "b1"), ("entry", "b2")]);
        let g = expand_to_instruction_graph(&rec, &toks);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_walk_pairs(&g, 3, &mut rng);
        // node 0 -> {1}, node 1 -> {2,3}; nodes 2 and 3 are terminal
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|&(v, w)| g.is_successor(v, w)));
        assert!(pairs.iter().filter(|p| p.0 == 0).all(|p| p.1 == 1));
    }

    #[test]
    fn nsp_output_is_balanced() {
        let (rec, toks) = record(&[("entry", 6), ("b", 6)], &[("entry", "b")]);
        let g = expand_to_instruction_graph(&rec, &toks);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = sample_walk_pairs(&g, 10, &mut rng);
        let pool = vec![g];
        let (ex, diag) = make_nsp_examples(&pool, 0, &pairs, &mut rng);
        assert_eq!(diag.skipped, 0);
        assert_eq!(ex.len(), 2 * pairs.len());
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), pairs.len());
        assert!(make_nsp_examples(&pool, 0, &[], &mut rng).0.is_empty());
    }

    #[test]
    fn nsp_skips_when_everything_is_a_successor() {
        // two nodes, each the other's successor; no other function to borrow from
        let g = InstructionGraph {
            nodes: vec![
                InstructionNode { func_key: "f".into(), block_label: "a".into(), instr_index: 0 },
                InstructionNode { func_key: "f".into(), block_label: "a".into(), instr_index: 1 },
            ],
            tokens: vec![vec![7], vec![8]],
            successors: vec![vec![0, 1], vec![0, 1]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ex, diag) = make_nsp_examples(&[g], 0, &[(0, 1)], &mut rng);
        assert!(ex.is_empty());
        assert_eq!(diag.skipped, 1);
    }

    #[test]
    fn masking_single_eligible_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, labels) = apply_mlm_masking(&[CLS_ID, 9, SEP_ID], &[false, true, false], 20, &mut rng);
        assert_eq!(labels, vec![IGNORE_LABEL, 9, IGNORE_LABEL]);
    }

    #[test]
    fn unselected_positions_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<u32> = (5..105).collect();
        let (masked, labels) = apply_mlm_masking(&ids, &[true; 100], 200, &mut rng);
        assert_eq!(labels.iter().filter(|&&l| l != IGNORE_LABEL).count(), 15);
        for i in 0..100 {
            if labels[i] == IGNORE_LABEL {
                assert_eq!(masked[i], ids[i]);
            } else {
                assert_eq!(labels[i], i64::from(ids[i]));
            }
        }
    }

    #[test]
    fn assemble_layout() {
        let ex = assemble_example(&[10], &[11], 1, 64);
        assert_eq!(ex.input_ids, vec![CLS_ID, 10, SEP_ID, 11, SEP_ID]);
        assert_eq!(ex.segment_ids, vec![0, 0, 0, 1, 1]);
        assert_eq!(ex.position_ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn assemble_truncates_longest_first() {
        let a: Vec<u32> = (0..100).map(|i| 10 + i).collect();
        let b: Vec<u32> = (0..10).map(|i| 200 + i).collect();
        let ex = assemble_example(&a, &b, 0, 64);
        assert_eq!(ex.len(), 64);
        assert_eq!(ex.segment_ids.iter().filter(|&&s| s == 0).count(), 51 + 2);
        let ex = assemble_example(&a, &a, 0, 8);
        assert!(ex.segment_ids.iter().filter(|&&s| s == 1).count() >= 2);
        assert!(ex.len() <= 8);
    }

    #[test]
    fn mask_example_never_touches_specials() {
        let a: Vec<u32> = (10..30).collect();
        let mut ex = assemble_example(&a, &a, 1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        mask_example(&mut ex, 50, &mut rng);
        let n = ex.len();
        assert_eq!(ex.input_ids[0], CLS_ID);
        assert_eq!(ex.input_ids[n - 1], SEP_ID);
        assert_eq!(ex.input_ids[21], SEP_ID);
        assert_eq!(ex.mlm_labels.iter().filter(|&&l| l != IGNORE_LABEL).count(), 6);
    }
}
