//! Line-oriented parsing of decompiled LLVM-IR into functions, basic blocks
//! and control-flow graphs.
//!
//! The parser does not attempt to understand the IR grammar. It recognises
//! four kinds of lines by pattern:
//!
//! * `define ... @name(...)` opens a function,
//! * a line consisting of `}` closes it,
//! * `dec_label_pc_<hex>:` (optionally followed by `; preds = %a, %b`) opens
//!   a basic block,
//! * everything else is a statement of the current block.
//!
//! Statements that precede the first label of a function form a synthesized
//! block named [`ENTRY_LABEL`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label given to the statements that precede the first block label.
pub const ENTRY_LABEL: &str = "entry";

/// Minimum number of basic blocks a function needs to survive filtering.
pub const DEFAULT_MIN_BLOCKS: usize = 5;

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(dec_label_pc_[0-9A-Fa-f]+):").unwrap())
}

fn preds_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r";\s*preds\s*=\s*(.*)$").unwrap())
}

fn pred_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"%([A-Za-z0-9_.$-]+)").unwrap())
}

fn insn_addr_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r",\s*!insn\.addr\s+!\d+\s*$").unwrap())
}

/// One IR statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub raw_text: String,
    /// 1-based line in the source file; 0 when the statement was not read
    /// from a file.
    pub line_no: usize,
}

impl Instruction {
    pub fn new(raw_text: impl Into<String>, line_no: usize) -> Self {
        Instruction {
            raw_text: raw_text.into().trim().to_string(),
            line_no,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    /// The block's label line, if it carries one.
    fn header(&self) -> Option<&Instruction> {
        self.instructions
            .first()
            .filter(|insn| label_re().is_match(&insn.raw_text))
    }
}

/// Block-level control-flow graph. Edges run predecessor to successor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl ControlFlowGraph {
    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }

    /// Edges as `(pred, succ)` node indices.
    pub fn index_edges(&self) -> Vec<(usize, usize)> {
        let index = self.node_index();
        self.edges
            .iter()
            .filter_map(|(p, s)| Some((*index.get(p.as_str())?, *index.get(s.as_str())?)))
            .collect()
    }

    pub fn successors<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(p, _)| p == label)
            .map(|(_, s)| s.as_str())
    }
}

/// Compilation provenance of one function instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionMeta {
    pub project: String,
    pub binary: String,
    pub source_function: String,
    pub compiler: String,
    pub compiler_version: String,
    pub optimization: String,
    pub architecture: String,
}

impl FunctionMeta {
    /// `(project, binary, source_function)`: two functions with the same
    /// source identity were compiled from the same source.
    pub fn source_identity(&self) -> (&str, &str, &str) {
        (&self.project, &self.binary, &self.source_function)
    }

    /// Stable textual key of this function instance.
    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}/{}-{}/{}/{}",
            self.project,
            self.binary,
            self.source_function,
            self.compiler,
            self.compiler_version,
            self.architecture,
            self.optimization
        )
    }

    pub fn is_complete(&self) -> bool {
        [
            &self.project,
            &self.binary,
            &self.source_function,
            &self.compiler,
            &self.compiler_version,
            &self.optimization,
            &self.architecture,
        ]
        .iter()
        .all(|f| !f.is_empty())
    }

    /// Fill empty fields of `self` from `other`.
    pub fn fill_from(&mut self, other: &FunctionMeta) {
        let pairs = [
            (&mut self.project, &other.project),
            (&mut self.binary, &other.binary),
            (&mut self.source_function, &other.source_function),
            (&mut self.compiler, &other.compiler),
            (&mut self.compiler_version, &other.compiler_version),
            (&mut self.optimization, &other.optimization),
            (&mut self.architecture, &other.architecture),
        ];
        for (mine, theirs) in pairs {
            if mine.is_empty() {
                mine.clone_from(theirs);
            }
        }
    }

    /// Metadata implied by `<project>/<compiler>-<version>/<arch>/<opt>/<binary>.ll`.
    /// Only the trailing five components of `path` are consulted.
    pub fn from_path_convention(path: &Path) -> Option<FunctionMeta> {
        let parts: Vec<&str> = path.iter().filter_map(|c| c.to_str()).collect();
        if parts.len() < 5 {
            return None;
        }
        let tail = &parts[parts.len() - 5..];
        let binary = Path::new(tail[4]).file_stem()?.to_str()?;
        let (compiler, version) = tail[1].split_once('-')?;
        Some(FunctionMeta {
            project: tail[0].to_string(),
            binary: binary.to_string(),
            source_function: String::new(),
            compiler: compiler.to_string(),
            compiler_version: version.to_string(),
            optimization: tail[3].to_string(),
            architecture: tail[2].to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IRFunction {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
    pub cfg: ControlFlowGraph,
    pub meta: FunctionMeta,
}

/// Predecessor references that named no block of the function.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfgDiagnostics {
    pub unknown_predecessors: Vec<(String, String)>,
}

impl CfgDiagnostics {
    pub fn dropped_edges(&self) -> usize {
        self.unknown_predecessors.len()
    }
}

fn function_name(line: &str, line_no: usize) -> Result<String> {
    let at = line.find('@').ok_or_else(|| Error::Parse {
        line: line_no,
        message: "define line without '@'".into(),
    })?;
    let rest = &line[at + 1..];
    let paren = rest.find('(').ok_or_else(|| Error::Parse {
        line: line_no,
        message: "define line without '('".into(),
    })?;
    let name = rest[..paren].trim().trim_matches('"');
    if name.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty function name".into(),
        });
    }
    Ok(name.to_string())
}

fn is_define(line: &str) -> bool {
    let t = line.trim_start();
    t == "define" || t.starts_with("define ")
}

/// Split LLVM-IR text into functions. Each function's blocks are raw (label
/// lines and annotations intact) and its CFG is extracted from the `preds`
/// annotations. `meta_defaults` is copied into every function; an empty
/// `source_function` is replaced by the function name.
pub fn parse_module(text: &str, meta_defaults: &FunctionMeta) -> Result<Vec<IRFunction>> {
    parse_module_with_diagnostics(text, meta_defaults).map(|v| v.into_iter().map(|(f, _)| f).collect())
}

/// As [`parse_module`], also returning the CFG diagnostics of each function.
pub fn parse_module_with_diagnostics(
    text: &str,
    meta_defaults: &FunctionMeta,
) -> Result<Vec<(IRFunction, CfgDiagnostics)>> {
    struct Open {
        name: String,
        body: Vec<Instruction>,
    }

    let mut out = Vec::new();
    let mut current: Option<Open> = None;

    let mut finish = |open: Open| -> Result<()> {
        let blocks = split_basic_blocks(&open.body)?;
        let (cfg, diagnostics) = extract_cfg_with_diagnostics(&blocks);
        let mut meta = meta_defaults.clone();
        if meta.source_function.is_empty() {
            meta.source_function.clone_from(&open.name);
        }
        out.push((
            IRFunction {
                name: open.name,
                blocks,
                cfg,
                meta,
            },
            diagnostics,
        ));
        Ok(())
    };

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if is_define(line) {
            if let Some(open) = current.take() {
                finish(open)?;
            }
            current = Some(Open {
                name: function_name(line, line_no)?,
                body: Vec::new(),
            });
            continue;
        }
        let Some(open) = current.as_mut() else {
            continue;
        };
        let trimmed = line.trim();
        if trimmed == "}" {
            let open = current.take().expect("open function");
            finish(open)?;
            continue;
        }
        if !trimmed.is_empty() {
            open.body.push(Instruction::new(trimmed, line_no));
        }
    }
    if let Some(open) = current.take() {
        finish(open)?;
    }
    Ok(out)
}

/// Partition a function body into basic blocks at `dec_label_pc_<hex>:`
/// lines. The label line is kept as the first statement of its block.
pub fn split_basic_blocks(body: &[Instruction]) -> Result<Vec<BasicBlock>> {
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut seen = HashSet::new();
    for insn in body {
        if let Some(caps) = label_re().captures(&insn.raw_text) {
            let label = caps[1].to_string();
            if !seen.insert(label.clone()) {
                return Err(Error::Parse {
                    line: insn.line_no,
                    message: format!("duplicate block label {label}"),
                });
            }
            blocks.push(BasicBlock {
                label,
                instructions: vec![insn.clone()],
            });
        } else {
            match blocks.last_mut() {
                Some(block) => block.instructions.push(insn.clone()),
                None => {
                    seen.insert(ENTRY_LABEL.to_string());
                    blocks.push(BasicBlock {
                        label: ENTRY_LABEL.to_string(),
                        instructions: vec![insn.clone()],
                    });
                }
            }
        }
    }
    Ok(blocks)
}

/// Build the CFG from `; preds = ...` annotations on block label lines.
pub fn extract_cfg(blocks: &[BasicBlock]) -> ControlFlowGraph {
    extract_cfg_with_diagnostics(blocks).0
}

pub fn extract_cfg_with_diagnostics(blocks: &[BasicBlock]) -> (ControlFlowGraph, CfgDiagnostics) {
    let nodes: Vec<String> = blocks.iter().map(|b| b.label.clone()).collect();
    let known: HashSet<&str> = nodes.iter().map(String::as_str).collect();
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut diagnostics = CfgDiagnostics::default();

    for block in blocks {
        let Some(header) = block.header() else {
            continue;
        };
        let Some(caps) = preds_re().captures(&header.raw_text) else {
            continue;
        };
        for pred in pred_name_re().captures_iter(&caps[1]) {
            let pred = pred[1].to_string();
            if !known.contains(pred.as_str()) {
                diagnostics
                    .unknown_predecessors
                    .push((pred, block.label.clone()));
                continue;
            }
            let edge = (pred, block.label.clone());
            if seen.insert(edge.clone()) {
                edges.push(edge);
            }
        }
    }
    (ControlFlowGraph { nodes, edges }, diagnostics)
}

/// Strip a statement of its `!insn.addr` suffix; `None` for lines that are
/// removed entirely (labels, comments, `uselistorder` directives).
pub fn simplify_statement(text: &str) -> Option<String> {
    let t = text.trim();
    if t.is_empty()
        || label_re().is_match(t)
        || t.starts_with(';')
        || t.starts_with("uselistorder")
    {
        return None;
    }
    let stripped = insn_addr_re().replace(t, "");
    let stripped = stripped.trim_end();
    (!stripped.is_empty()).then(|| stripped.to_string())
}

/// Remove block identifiers, address annotations and use-list directives.
pub fn simplify_instructions(block: &BasicBlock) -> BasicBlock {
    BasicBlock {
        label: block.label.clone(),
        instructions: block
            .instructions
            .iter()
            .filter_map(|insn| {
                simplify_statement(&insn.raw_text).map(|raw_text| Instruction {
                    raw_text,
                    line_no: insn.line_no,
                })
            })
            .collect(),
    }
}

/// Simplify every block of `func`. The CFG is unaffected.
pub fn simplify_function(func: &IRFunction) -> IRFunction {
    IRFunction {
        name: func.name.clone(),
        blocks: func.blocks.iter().map(simplify_instructions).collect(),
        cfg: func.cfg.clone(),
        meta: func.meta.clone(),
    }
}

pub fn filter_small_functions(funcs: Vec<IRFunction>, min_blocks: usize) -> Result<Vec<IRFunction>> {
    if min_blocks < 1 {
        return Err(Error::Argument("min_blocks must be at least 1".into()));
    }
    Ok(funcs
        .into_iter()
        .filter(|f| f.blocks.len() >= min_blocks)
        .collect())
}

/// Serialized form of a function: one JSON line per function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub name: String,
    pub meta: FunctionMeta,
    pub blocks: Vec<BlockRecord>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub label: String,
    pub instructions: Vec<String>,
}

impl From<&IRFunction> for FunctionRecord {
    fn from(func: &IRFunction) -> Self {
        FunctionRecord {
            name: func.name.clone(),
            meta: func.meta.clone(),
            blocks: func
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    label: b.label.clone(),
                    instructions: b.instructions.iter().map(|i| i.raw_text.clone()).collect(),
                })
                .collect(),
            edges: func.cfg.edges.clone(),
        }
    }
}

impl FunctionRecord {
    pub fn key(&self) -> String {
        self.meta.key()
    }

    pub fn cfg(&self) -> ControlFlowGraph {
        ControlFlowGraph {
            nodes: self.blocks.iter().map(|b| b.label.clone()).collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }
}

/// Sidecar manifest: file path (as written in the manifest) to metadata.
/// Missing fields fall back to the path convention.
pub type MetaManifest = BTreeMap<String, FunctionMeta>;

/// Resolve metadata for `path`: manifest entries win over the path
/// convention field by field.
pub fn resolve_meta(path: &Path, manifest: Option<&MetaManifest>, manifest_root: Option<&Path>) -> FunctionMeta {
    let mut meta = FunctionMeta::default();
    if let Some(manifest) = manifest {
        let candidates = [
            Some(path.to_string_lossy().into_owned()),
            manifest_root
                .and_then(|root| path.strip_prefix(root).ok())
                .map(|p| p.to_string_lossy().into_owned()),
        ];
        if let Some(entry) = candidates
            .iter()
            .flatten()
            .find_map(|k| manifest.get(k.as_str()))
        {
            meta = entry.clone();
        }
    }
    if let Some(conv) = FunctionMeta::from_path_convention(path) {
        meta.fill_from(&conv);
    }
    meta
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(lines: &[&str]) -> Vec<Instruction> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| Instruction::new(*l, i + 1))
            .collect()
    }

    const BIND_ENGINE: &str = r#"
; Function Attrs: nounwind
define i32 @bind_engine(i32 %arg1, i32 %arg2) local_unnamed_addr {
dec_label_pc_2140:
  %0 = call i32 @ENGINE_get_id(i32 %arg1), !insn.addr !0
  %1 = icmp eq i32 %0, 0, !insn.addr !1
  br i1 %1, label %dec_label_pc_215c, label %dec_label_pc_218c, !insn.addr !2

dec_label_pc_215c:                                ; preds = %dec_label_pc_2140
  %2 = call i32 @ENGINE_set_id(i32 %arg1), !insn.addr !3
  br label %dec_label_pc_21ac, !insn.addr !4

dec_label_pc_218c:                                ; preds = %dec_label_pc_2140
  store i32 0, i32* @global_var_3010, align 4, !insn.addr !5
  br label %dec_label_pc_21ac, !insn.addr !6

dec_label_pc_21ac:                                ; preds = %dec_label_pc_215c, %dec_label_pc_218c
  %3 = phi i32 [ 1, %dec_label_pc_215c ], [ 0, %dec_label_pc_218c ]
  ret i32 %3, !insn.addr !7

; uselistorder directives
  uselistorder i32 %arg1, { 1, 0 }
}

declare i32 @ENGINE_get_id(i32) local_unnamed_addr
"#;

    #[test]
    fn parses_single_function_with_name() {
        let funcs = parse_module(BIND_ENGINE, &FunctionMeta::default()).unwrap();
        assert_eq!(funcs.len(), 1);
        assert_eq!(funcs[0].name, "bind_engine");
        assert_eq!(funcs[0].meta.source_function, "bind_engine");
        assert_eq!(funcs[0].blocks.len(), 4);
    }

    #[test]
    fn preds_annotation_produces_edges() {
        let funcs = parse_module(BIND_ENGINE, &FunctionMeta::default()).unwrap();
        let edges = &funcs[0].cfg.edges;
        assert!(edges.contains(&("dec_label_pc_215c".into(), "dec_label_pc_21ac".into())));
        assert!(edges.contains(&("dec_label_pc_218c".into(), "dec_label_pc_21ac".into())));
        assert_eq!(edges.len(), 4);
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(parse_module("", &FunctionMeta::default()).unwrap().is_empty());
    }

    #[test]
    fn malformed_define_reports_line() {
        let err = parse_module("\n\ndefine i32 foo\n", &FunctionMeta::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_module("define i32 @foo\n", &FunctionMeta::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn two_define_regions_are_separated() {
        let text = "define void @a() {\n  %1 = add i32 1, 2\n  %2 = add i32 %1, 3\n  ret void\n}\n\
                    define void @b() {\n  %1 = add i32 1, 2\n  %2 = add i32 %1, 3\n  %3 = add i32 %2, 3\n  %4 = add i32 %3, 3\n  ret void\n}\n";
        let funcs = parse_module(text, &FunctionMeta::default()).unwrap();
        let counts: Vec<usize> = funcs
            .iter()
            .map(|f| f.blocks.iter().map(|b| b.instructions.len()).sum())
            .collect();
        assert_eq!(counts, vec![3, 5]);
        assert_eq!(funcs[1].name, "b");
    }

    #[test]
    fn statements_before_first_label_form_entry() {
        let blocks = split_basic_blocks(&body(&[
            "%1 = alloca i32",
            "br label %dec_label_pc_215c",
            "dec_label_pc_215c: ; preds = %entry",
            "br label %dec_label_pc_218c",
            "dec_label_pc_218c:",
            "br label %dec_label_pc_21ac",
            "dec_label_pc_21ac:",
            "ret void",
        ]))
        .unwrap();
        let labels: Vec<&str> = blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(
            labels,
            vec!["entry", "dec_label_pc_215c", "dec_label_pc_218c", "dec_label_pc_21ac"]
        );
    }

    #[test]
    fn unlabeled_body_is_one_block() {
        let blocks = split_basic_blocks(&body(&["%1 = add i32 1, 2", "ret void"])).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].label, ENTRY_LABEL);
        assert_eq!(blocks[0].instructions.len(), 2);
    }

    #[test]
    fn ten_statement_fixture_block_sizes() {
        let lines = [
            "%1 = add i32 1, 2",
            "%2 = add i32 1, 2",
            "br label %dec_label_pc_10",
            "dec_label_pc_10: ; preds = %entry",
            "%3 = add i32 1, 2",
            "br label %dec_label_pc_20",
            "dec_label_pc_20: ; preds = %dec_label_pc_10",
            "%4 = add i32 1, 2",
            "%5 = add i32 1, 2",
            "ret void",
        ];
        let sizes: Vec<usize> = split_basic_blocks(&body(&lines))
            .unwrap()
            .iter()
            .map(|b| b.instructions.len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn duplicate_label_is_an_error() {
        let err = split_basic_blocks(&body(&["dec_label_pc_1:", "ret void", "dec_label_pc_1:", "ret void"]))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn diamond_cfg_from_preds() {
        let blocks = split_basic_blocks(&body(&[
            "br i1 %c, label %dec_label_pc_b1, label %dec_label_pc_b2",
            "dec_label_pc_b1: ; preds = %entry",
            "br label %dec_label_pc_b3",
            "dec_label_pc_b2: ; preds = %entry",
            "br label %dec_label_pc_b3",
            "dec_label_pc_b3: ; preds = %dec_label_pc_b1, %dec_label_pc_b2",
            "ret void",
        ]))
        .unwrap();
        let cfg = extract_cfg(&blocks);
        let expected: HashSet<(String, String)> = [
            ("entry", "dec_label_pc_b1"),
            ("entry", "dec_label_pc_b2"),
            ("dec_label_pc_b1", "dec_label_pc_b3"),
            ("dec_label_pc_b2", "dec_label_pc_b3"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        assert_eq!(cfg.edges.iter().cloned().collect::<HashSet<_>>(), expected);
    }

    #[test]
    fn single_block_has_no_edges() {
        let blocks = split_basic_blocks(&body(&["ret void"])).unwrap();
        let cfg = extract_cfg(&blocks);
        assert_eq!(cfg.nodes.len(), 1);
        assert!(cfg.edges.is_empty());
    }

    #[test]
    fn unknown_predecessors_become_diagnostics() {
        let blocks = split_basic_blocks(&body(&[
            "ret void",
            "dec_label_pc_1: ; preds = %dec_label_pc_999, %entry",
            "ret void",
        ]))
        .unwrap();
        let (cfg, diag) = extract_cfg_with_diagnostics(&blocks);
        assert_eq!(cfg.edges, vec![("entry".to_string(), "dec_label_pc_1".to_string())]);
        assert_eq!(diag.dropped_edges(), 1);
    }

    #[test]
    fn strips_address_annotation() {
        assert_eq!(
            simplify_statement("%54 = load i32, i32* @g, align 4, !insn.addr !12").as_deref(),
            Some("%54 = load i32, i32* @g, align 4")
        );
        assert_eq!(simplify_statement("ret void").as_deref(), Some("ret void"));
    }

    #[test]
    fn eight_line_block_keeps_six_instructions() {
        let block = BasicBlock {
            label: "dec_label_pc_1".into(),
            instructions: body(&[
                "dec_label_pc_1: ; preds = %entry",
                "%1 = add i32 1, 2, !insn.addr !1",
                "%2 = add i32 %1, 2, !insn.addr !2",
                "%3 = add i32 %2, 2",
                "store i32 %3, i32* %p, align 4",
                "%4 = load i32, i32* %p, align 4",
                "uselistorder i32 %1, { 1, 0 }",
                "ret i32 %4",
            ]),
        };
        let simplified = simplify_instructions(&block);
        assert_eq!(simplified.instructions.len(), 6);
        assert_eq!(simplified.instructions[0].raw_text, "%1 = add i32 1, 2");
        assert_eq!(simplify_instructions(&simplified), simplified);
    }

    #[test]
    fn filter_keeps_functions_at_threshold() {
        let make = |n: usize| IRFunction {
            name: format!("f{n}"),
            blocks: (0..n)
                .map(|i| BasicBlock {
                    label: format!("b{i}"),
                    instructions: vec![Instruction::new("ret void", 1)],
                })
                .collect(),
            cfg: ControlFlowGraph::default(),
            meta: FunctionMeta::default(),
        };
        let kept = filter_small_functions(vec![make(3), make(4), make(5), make(9)], 5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(filter_small_functions(vec![make(1)], 1).unwrap().len(), 1);
        assert!(filter_small_functions(vec![], 0).is_err());
    }

    #[test]
    fn path_convention_and_manifest_precedence() {
        let path = Path::new("/data/openssl/gcc-9/x86/O2/afalg.ll");
        let conv = FunctionMeta::from_path_convention(path).unwrap();
        assert_eq!(conv.project, "openssl");
        assert_eq!(conv.compiler, "gcc");
        assert_eq!(conv.compiler_version, "9");
        assert_eq!(conv.architecture, "x86");
        assert_eq!(conv.optimization, "O2");
        assert_eq!(conv.binary, "afalg");

        let mut manifest = MetaManifest::new();
        manifest.insert(
            "openssl/gcc-9/x86/O2/afalg.ll".into(),
            FunctionMeta {
                compiler: "clang".into(),
                ..Default::default()
            },
        );
        let meta = resolve_meta(path, Some(&manifest), Some(Path::new("/data")));
        assert_eq!(meta.compiler, "clang");
        assert_eq!(meta.architecture, "x86");
    }
}
