//! Stage orchestration over a work directory.
//!
//! Each stage reads its predecessors' artifacts and writes its own into a
//! directory named after the stage and the ablations that change its
//! output, next to the resolved configuration that produced it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, PipelineConfig};
use crate::error::{Error, Result};
use crate::ggnn_moco::{
    train_contrastive, ContrastiveDataset, EncoderKind, FunctionEmbedding, FunctionEncoder, GGNNConfig, GraphInput,
    TrainReport,
};
use crate::ir_corpus::{
    filter_small_functions, parse_module_with_diagnostics, resolve_meta, simplify_function, FunctionRecord,
    MetaManifest,
};
use crate::lm::{hashed_block_embedding, pretrain, BlockEmbedding, LMConfig, LanguageModel, PretrainReport};
use crate::normalize::{build_vocabulary, encode, process_instruction, NormalizeConfig, TokenSequence, Vocabulary};
use crate::retrieval::{evaluate_task, TaskReport};
use crate::rng::{derive_seed, rng_for};
use crate::sampling::{build_pretrain_corpus, expand_to_instruction_graph, CorpusManifest};
use crate::tensor::{load_checkpoint, save_checkpoint};

pub const CONFIG_FILE: &str = "config.toml";
pub const FUNCTIONS_FILE: &str = "functions.jsonl";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_MANIFEST_FILE: &str = "corpus_manifest.json";
pub const LM_DIR: &str = "lm";
pub const LM_CONFIG_FILE: &str = "lm_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const BLOCK_EMBEDDINGS_FILE: &str = "block_embeddings.jsonl";
pub const ENCODER_DIR: &str = "encoder";
pub const ENCODER_FILE: &str = "encoder.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Prepare,
    Pretrain,
    EmbedBlocks,
    Train,
    Embed,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Pretrain => "pretrain",
            Stage::EmbedBlocks => "embed-blocks",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Eval => "eval",
        }
    }

    /// Whether `ablation` changes this stage's output.
    pub fn affected_by(self, ablation: Ablation) -> bool {
        match (self, ablation) {
            (_, Ablation::NoNorm) => true,
            (Stage::Prepare | Stage::Pretrain, _) => false,
            (Stage::EmbedBlocks, Ablation::NoPlm) => true,
            (Stage::EmbedBlocks, Ablation::NoGraph) => false,
            _ => true,
        }
    }
}

/// One normalized basic block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTokens {
    pub func_key: String,
    pub block_label: String,
    pub token_ids: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub files: usize,
    pub files_failed: usize,
    pub functions: usize,
    pub functions_filtered: usize,
    pub functions_kept: usize,
    pub duplicates: usize,
    pub blocks: usize,
    pub instructions: usize,
    pub unknown_predecessors: usize,
    pub train_functions: usize,
    pub test_functions: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderSpec {
    kind: EncoderKind,
    input_dim: usize,
    config: GGNNConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub ablations: Vec<Ablation>,
    pub n_functions: usize,
    pub tasks: Vec<TaskReport>,
    /// Tasks that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task.name() == name)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Hold out `fraction` of the source identities, chosen by seeded shuffle.
pub fn split_identities(records: &[FunctionRecord], fraction: f64, seed: u64) -> Split {
    let identities: BTreeSet<String> = records.iter().map(identity_key).collect();
    let mut ids: Vec<String> = identities.into_iter().collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let mut n_test = (fraction * ids.len() as f64).round() as usize;
    if fraction > 0.0 && n_test == 0 && ids.len() >= 2 {
        n_test = 1;
    }
    let mut test = ids.split_off(ids.len() - n_test.min(ids.len()));
    let mut train = ids;
    train.sort();
    test.sort();
    Split { train, test }
}

fn identity_key(r: &FunctionRecord) -> String {
    let (p, b, f) = r.meta.source_identity();
    format!("{p}/{b}/{f}")
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config })
    }

    /// `<work_dir>/<stage>[+ablation...]`.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let mut name = stage.name().to_string();
        for a in self.config.ablations.active() {
            if stage.affected_by(a) {
                name.push('+');
                name.push_str(a.name());
            }
        }
        self.config.work_dir.join(name)
    }

    fn open_stage(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        log::info!("stage {} -> {}", stage.name(), dir.display());
        Ok(dir)
    }

    fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.config.seed, stage.name())
    }

    /// Parse, simplify and filter the corpus; normalize and encode every
    /// instruction against a vocabulary built from the training split.
    pub fn prepare(&self) -> Result<PrepareStats> {
        let cfg = &self.config;
        let pattern = cfg.corpus_dir.join(&cfg.input_glob);
        let pattern = pattern.to_string_lossy();
        let mut paths: Vec<PathBuf> = glob::glob(&pattern)
            .map_err(|e| Error::Config(format!("bad input glob {pattern}: {e}")))?
            .filter_map(|p| p.ok())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Input(format!("no inputs match {pattern}")));
        }
        let manifest: Option<MetaManifest> = match cfg.manifest_path() {
            Some(p) => Some(read_json(&p)?),
            None => None,
        };

        let mut stats = PrepareStats {
            files: paths.len(),
            ..PrepareStats::default()
        };
        let mut functions = Vec::new();
        for path in &paths {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    stats.files_failed += 1;
                    continue;
                }
            };
            let meta = resolve_meta(path, manifest.as_ref(), Some(&cfg.corpus_dir));
            match parse_module_with_diagnostics(&text, &meta) {
                Ok(parsed) => {
                    for (func, diag) in parsed {
                        for (pred, block) in &diag.unknown_predecessors {
                            log::warn!("{}: {} names unknown predecessor {pred}", path.display(), block);
                        }
                        stats.unknown_predecessors += diag.dropped_edges();
                        functions.push(simplify_function(&func));
                    }
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    stats.files_failed += 1;
                }
            }
        }
        if stats.files_failed == stats.files {
            return Err(Error::Input(format!("all {} inputs failed to parse", stats.files)));
        }
        stats.functions = functions.len();
        let kept = filter_small_functions(functions, cfg.min_blocks)?;
        stats.functions_filtered = stats.functions - kept.len();

        let mut seen = BTreeSet::new();
        let mut records = Vec::with_capacity(kept.len());
        for f in &kept {
            let record = FunctionRecord::from(f);
            if seen.insert(record.key()) {
                records.push(record);
            } else {
                stats.duplicates += 1;
                log::warn!("duplicate function instance {}", record.key());
            }
        }
        records.sort_by_key(FunctionRecord::key);
        stats.functions_kept = records.len();
        stats.blocks = records.iter().map(|r| r.blocks.len()).sum();
        stats.instructions = records.iter().map(FunctionRecord::instruction_count).sum();

        let split = split_identities(&records, cfg.test_fraction, self.seed(Stage::Prepare));
        let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
        let norm = NormalizeConfig::default();
        let enabled = !cfg.ablations.no_norm;
        let token_seqs: Vec<Vec<Vec<TokenSequence>>> = records
            .par_iter()
            .map(|r| {
                r.blocks
                    .iter()
                    .map(|b| b.instructions.iter().map(|i| process_instruction(i, &norm, enabled)).collect())
                    .collect()
            })
            .collect();
        let vocab = build_vocabulary(
            records
                .iter()
                .zip(&token_seqs)
                .filter(|(r, _)| train_ids.contains(identity_key(r).as_str()))
                .flat_map(|(_, blocks)| blocks.iter().flatten()),
            cfg.vocab_min_count,
        );
        let mut tokens = Vec::with_capacity(stats.blocks);
        for (r, blocks) in records.iter().zip(&token_seqs) {
            for (b, seqs) in r.blocks.iter().zip(blocks) {
                tokens.push(BlockTokens {
                    func_key: r.key(),
                    block_label: b.label.clone(),
                    token_ids: seqs.iter().map(|s| encode(s, &vocab)).collect(),
                });
            }
        }
        stats.train_functions = records.iter().filter(|r| train_ids.contains(identity_key(r).as_str())).count();
        stats.test_functions = stats.functions_kept - stats.train_functions;
        stats.vocab_size = vocab.len();

        let dir = self.open_stage(Stage::Prepare)?;
        write_jsonl(&dir.join(FUNCTIONS_FILE), &records)?;
        write_jsonl(&dir.join(TOKENS_FILE), &tokens)?;
        write_json(&dir.join(VOCAB_FILE), &vocab.to_map())?;
        write_json(&dir.join(SPLIT_FILE), &split)?;
        write_json(&dir.join(STATS_FILE), &stats)?;
        log::info!(
            "prepared {} functions ({} filtered), {} blocks, {} instructions, vocabulary {}",
            stats.functions_kept,
            stats.functions_filtered,
            stats.blocks,
            stats.instructions,
            stats.vocab_size
        );
        Ok(stats)
    }

    fn load_prepared(&self) -> Result<Prepared> {
        let dir = self.stage_dir(Stage::Prepare);
        let records: Vec<FunctionRecord> = read_jsonl(&require(dir.join(FUNCTIONS_FILE))?)?;
        let tokens: Vec<BlockTokens> = read_jsonl(&require(dir.join(TOKENS_FILE))?)?;
        let vocab = Vocabulary::from_map(&read_json(&dir.join(VOCAB_FILE))?)?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let mut by_func: HashMap<String, Vec<Vec<Vec<u32>>>> = HashMap::new();
        for t in tokens {
            by_func.entry(t.func_key).or_default().push(t.token_ids);
        }
        let block_tokens = records
            .iter()
            .map(|r| {
                let blocks = by_func.remove(&r.key()).unwrap_or_default();
                if blocks.len() != r.blocks.len() {
                    return Err(Error::Input(format!("token records do not match blocks of {}", r.key())));
                }
                Ok(blocks)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            records,
            block_tokens,
            vocab,
            split,
        })
    }

    fn lm_config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            vocab_size,
            ..self.config.lm.clone()
        }
    }

    /// Pretrain the language model on the training split. A no-op under
    /// `no_plm`.
    pub fn pretrain(&self) -> Result<Option<PretrainReport>> {
        if self.config.ablations.no_plm {
            log::info!("pretrain skipped: language model ablated");
            return Ok(None);
        }
        let prepared = self.load_prepared()?;
        let train_ids: BTreeSet<&str> = prepared.split.train.iter().map(String::as_str).collect();
        let mut graphs = Vec::new();
        let mut keys = Vec::new();
        for (r, blocks) in prepared.records.iter().zip(&prepared.block_tokens) {
            if train_ids.contains(identity_key(r).as_str()) {
                graphs.push(expand_to_instruction_graph(r, blocks));
                keys.push(r.key());
            }
        }
        let seed = self.seed(Stage::Pretrain);
        let (corpus, manifest): (_, CorpusManifest) =
            build_pretrain_corpus(&graphs, &keys, prepared.vocab.len(), &self.config.sampling, seed)?;
        log::info!("pretraining on {} examples", corpus.len());
        let lm_config = self.lm_config(prepared.vocab.len());
        let (model, report) = pretrain(&corpus, &lm_config, seed)?;

        let dir = self.open_stage(Stage::Pretrain)?;
        write_jsonl(&dir.join(CORPUS_FILE), &corpus)?;
        write_json(&dir.join(CORPUS_MANIFEST_FILE), &manifest)?;
        write_json(&dir.join(LM_CONFIG_FILE), &lm_config)?;
        save_checkpoint(&model.params, &dir.join(LM_DIR))?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        Ok(Some(report))
    }

    /// Embed every basic block of the corpus.
    pub fn embed_blocks(&self) -> Result<usize> {
        let prepared = self.load_prepared()?;
        let all_blocks: Vec<&Vec<Vec<u32>>> = prepared.block_tokens.iter().flatten().collect();
        let vectors: Vec<Vec<f64>> = if self.config.ablations.no_plm {
            let lm = &self.config.lm;
            let max_tokens = lm.block_max_len.saturating_sub(2);
            all_blocks
                .par_iter()
                .map(|b| hashed_block_embedding(b, lm.hidden, max_tokens))
                .collect()
        } else {
            let dir = self.stage_dir(Stage::Pretrain);
            let lm_config: LMConfig = read_json(&require(dir.join(LM_CONFIG_FILE))?)?;
            let params = load_checkpoint(&require(dir.join(LM_DIR))?)?;
            let model = LanguageModel::from_params(lm_config, params)?;
            all_blocks
                .par_iter()
                .map(|b| model.embed_block(b))
                .collect::<Result<Vec<_>>>()?
        };
        let mut out = Vec::with_capacity(vectors.len());
        let mut it = vectors.into_iter();
        for r in &prepared.records {
            for b in &r.blocks {
                out.push(BlockEmbedding {
                    func_key: r.key(),
                    block_label: b.label.clone(),
                    vector: it.next().expect("one vector per block"),
                });
            }
        }
        let dir = self.open_stage(Stage::EmbedBlocks)?;
        write_jsonl(&dir.join(BLOCK_EMBEDDINGS_FILE), &out)?;
        Ok(out.len())
    }

    fn load_graphs(&self) -> Result<(Vec<FunctionRecord>, Vec<GraphInput>, Split)> {
        let dir = self.stage_dir(Stage::Prepare);
        let records: Vec<FunctionRecord> = read_jsonl(&require(dir.join(FUNCTIONS_FILE))?)?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let embeddings: Vec<BlockEmbedding> =
            read_jsonl(&require(self.stage_dir(Stage::EmbedBlocks).join(BLOCK_EMBEDDINGS_FILE))?)?;
        let mut by_func: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
        for e in embeddings {
            by_func.entry(e.func_key).or_default().push(e.vector);
        }
        let graphs = records
            .iter()
            .map(|r| GraphInput::from_record(r, by_func.remove(&r.key()).unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        Ok((records, graphs, split))
    }

    fn encoder_kind(&self) -> EncoderKind {
        if self.config.ablations.no_graph {
            EncoderKind::Pooled
        } else {
            EncoderKind::Graph
        }
    }

    /// Contrastive training of the function encoder on the training split.
    pub fn train(&self) -> Result<TrainReport> {
        let (records, graphs, split) = self.load_graphs()?;
        let train_ids: BTreeMap<&str, usize> = split.train.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut train_graphs = Vec::new();
        let mut groups = Vec::new();
        for (r, g) in records.iter().zip(graphs) {
            if let Some(&group) = train_ids.get(identity_key(r).as_str()) {
                train_graphs.push(g);
                groups.push(group);
            }
        }
        let dataset = ContrastiveDataset::new(train_graphs, groups)?;
        let kind = self.encoder_kind();
        let (encoder, report) = train_contrastive(&dataset, &self.config.ggnn, kind, self.seed(Stage::Train))?;

        let dir = self.open_stage(Stage::Train)?;
        save_checkpoint(&encoder.params, &dir.join(ENCODER_DIR))?;
        write_json(
            &dir.join(ENCODER_FILE),
            &EncoderSpec {
                kind,
                input_dim: encoder.input_dim,
                config: encoder.config.clone(),
            },
        )?;
        write_jsonl(&dir.join(TRAIN_LOG_FILE), &report.curve)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        Ok(report)
    }

    pub fn load_encoder(&self) -> Result<FunctionEncoder> {
        let dir = self.stage_dir(Stage::Train);
        let spec: EncoderSpec = read_json(&require(dir.join(ENCODER_FILE))?)?;
        let params = load_checkpoint(&require(dir.join(ENCODER_DIR))?)?;
        FunctionEncoder::from_params(spec.config, spec.kind, spec.input_dim, params)
    }

    /// Embed the evaluation functions: the held-out split, or everything
    /// when nothing is held out.
    pub fn embed(&self) -> Result<usize> {
        let encoder = self.load_encoder()?;
        let (records, graphs, split) = self.load_graphs()?;
        let test_ids: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
        let chosen: Vec<(&FunctionRecord, &GraphInput)> = records
            .iter()
            .zip(&graphs)
            .filter(|(r, _)| test_ids.is_empty() || test_ids.contains(identity_key(r).as_str()))
            .collect();
        let chunks: Vec<&[(&FunctionRecord, &GraphInput)]> = chosen.chunks(64).collect();
        let embedded: Vec<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| encoder.encode(&chunk.iter().map(|(_, g)| *g).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let out: Vec<FunctionEmbedding> = chosen
            .iter()
            .zip(embedded.into_iter().flatten())
            .map(|((r, _), vector)| FunctionEmbedding {
                meta: r.meta.clone(),
                vector,
            })
            .collect();
        let dir = self.open_stage(Stage::Embed)?;
        write_jsonl(&dir.join(EMBEDDINGS_FILE), &out)?;
        Ok(out.len())
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let path = self.stage_dir(Stage::Embed).join(EMBEDDINGS_FILE);
        let embeddings: Vec<FunctionEmbedding> = read_jsonl(&require(path)?)?;
        if embeddings.is_empty() {
            return Err(Error::Input("no function embeddings to evaluate".into()));
        }
        let eval_config = self.config.eval.eval_config();
        let seed = self.seed(Stage::Eval);
        let mut tasks = Vec::new();
        let mut skipped = Vec::new();
        for &task in &self.config.eval.tasks {
            match evaluate_task(&embeddings, task, &eval_config, seed) {
                Ok(r) => {
                    log::info!(
                        "{task}: auc {:?} recall@1 {:?} mrr {:.4} over {} queries",
                        r.auc,
                        r.recall_at(1),
                        r.mrr,
                        r.n_queries
                    );
                    tasks.push(r);
                }
                Err(Error::Insufficient(m)) if eval_config.allow_short => {
                    log::warn!("{task} skipped: {m}");
                    skipped.push((task.name().to_string(), m));
                }
                Err(e) => return Err(e),
            }
        }
        let report = EvalReport {
            seed,
            ablations: self.config.ablations.active(),
            n_functions: embeddings.len(),
            tasks,
            skipped,
        };
        let dir = self.open_stage(Stage::Eval)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.prepare()?;
        self.pretrain()?;
        self.embed_blocks()?;
        self.train()?;
        self.embed()?;
        self.eval()
    }
}

struct Prepared {
    records: Vec<FunctionRecord>,
    block_tokens: Vec<Vec<Vec<Vec<u32>>>>,
    vocab: Vocabulary,
    split: Split,
}
