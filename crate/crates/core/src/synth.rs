//! Synthetic decompiled-IR corpus: function groups compiled "from the same
//! source" under different compilers, optimization levels and
//! architectures.
//!
//! Groups come in families that share their basic-block contents and differ
//! in control-flow topology, so a model that ignores graph structure cannot
//! tell family members apart. Variants of one group rename labels, shift
//! register numbering, perturb constants (some across the address
//! threshold), and add compiler-, level- and architecture-specific noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir_corpus::{FunctionMeta, MetaManifest};
use crate::rng::rng_for;

pub const SYNTH_PROJECT: &str = "synth";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAMILY_SIZE: usize = 5;
const N_BINARIES: usize = 5;
const COMPILERS: [(&str, &str); 2] = [("gcc", "9"), ("clang", "12")];
const OPTIMIZATIONS: [&str; 3] = ["O0", "O2", "O3"];
const ARCHITECTURES: [&str; 2] = ["x86", "arm"];
const CALLEES: [&str; 12] = [
    "malloc", "free", "memcpy", "strlen", "printf", "fopen", "fclose", "read_buf", "write_buf", "lock_acquire",
    "lock_release", "hash_update",
];
const ARITH: [&str; 6] = ["add", "sub", "mul", "xor", "and", "shl"];
const PREDICATES: [&str; 4] = ["eq", "ne", "slt", "ugt"];

/// One compile setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Setting {
    pub compiler: (&'static str, &'static str),
    pub optimization: &'static str,
    pub architecture: &'static str,
}

impl Setting {
    fn dir(&self) -> String {
        format!(
            "{}-{}/{}/{}",
            self.compiler.0, self.compiler.1, self.architecture, self.optimization
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum Template {
    Arith { op: &'static str, c: i64 },
    Float { hex: u64 },
    LoadGlobal(u32),
    StoreGlobal(u32),
    Call(&'static str),
    Deref,
}

#[derive(Debug, Clone)]
struct Group {
    name: String,
    binary: String,
    /// Block contents, indexed by node.
    blocks: Vec<Vec<Template>>,
    succ: Vec<Vec<usize>>,
    /// Branch predicate and constant per node.
    branch: Vec<(&'static str, i64)>,
    settings: Vec<Setting>,
}

fn random_template(rng: &mut ChaCha8Rng) -> Template {
    match rng.gen_range(0..10) {
        0..=3 => {
            let c = match rng.gen_range(0..4) {
                0 => rng.gen_range(1020..1028),
                1 => rng.gen_range(4096..65536),
                _ => rng.gen_range(1..64),
            };
            Template::Arith {
                op: ARITH[rng.gen_range(0..ARITH.len())],
                c,
            }
        }
        4 => Template::Float {
            hex: [0x4010_0000_0000_0000, 0x3FF0_0000_0000_0000, 0xBFE0_0000_0000_0000][rng.gen_range(0..3)],
        },
        5 => Template::LoadGlobal(rng.gen_range(0x3000..0x3100) * 4),
        6 => Template::StoreGlobal(rng.gen_range(0x3000..0x3100) * 4),
        7 | 8 => Template::Call(CALLEES[rng.gen_range(0..CALLEES.len())]),
        _ => Template::Deref,
    }
}

/// Random rooted digraph: a forward spanning tree plus extra forward and
/// back edges.
fn random_topology(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut succ = vec![Vec::new(); n];
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&p| succ[p].len() < 2).collect();
        let p = *open.choose(rng).unwrap_or(&(i - 1));
        succ[p].push(i);
    }
    for _ in 0..rng.gen_range(1..=2) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(1..n);
        if a != b && !succ[a].contains(&b) && succ[a].len() < 2 {
            succ[a].push(b);
        }
    }
    succ
}

fn pick_settings(variants: usize, rng: &mut ChaCha8Rng) -> Vec<Setting> {
    let mut combos: Vec<((&str, &str), &str)> = COMPILERS
        .iter()
        .flat_map(|&c| OPTIMIZATIONS.iter().map(move |&o| (c, o)))
        .collect();
    combos.shuffle(rng);
    combos
        .iter()
        .flat_map(|&(compiler, optimization)| {
            ARCHITECTURES.iter().map(move |&architecture| Setting {
                compiler,
                optimization,
                architecture,
            })
        })
        .take(variants)
        .collect()
}

/// Degree-preserving rewiring: swap the targets of two edges `a→b`,
/// `c→d` into `a→d`, `c→b`. Succeeds `swaps` times or gives up.
fn rewire(succ: &[Vec<usize>], swaps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut succ = succ.to_vec();
    let edges = |s: &[Vec<usize>]| -> Vec<(usize, usize)> {
        s.iter()
            .enumerate()
            .flat_map(|(a, ss)| (0..ss.len()).map(move |k| (a, k)))
            .collect()
    };
    let mut done = 0;
    for _ in 0..50 * swaps {
        if done == swaps {
            break;
        }
        let slots = edges(&succ);
        let (a, i) = slots[rng.gen_range(0..slots.len())];
        let (c, j) = slots[rng.gen_range(0..slots.len())];
        let (b, d) = (succ[a][i], succ[c][j]);
        if a == c || b == d || a == d || c == b || succ[a].contains(&d) || succ[c].contains(&b) {
            continue;
        }
        succ[a][i] = d;
        succ[c][j] = b;
        done += 1;
    }
    succ
}

fn build_groups(n_groups: usize, variants: usize, seed: u64) -> Vec<Group> {
    let mut groups = Vec::with_capacity(n_groups);
    let mut family_blocks: Vec<Vec<Template>> = Vec::new();
    let mut family_branch: Vec<(&'static str, i64)> = Vec::new();
    let mut family_base: Vec<Vec<usize>> = Vec::new();
    let mut family_topologies: Vec<Vec<Vec<usize>>> = Vec::new();
    for g in 0..n_groups {
        let family = g / FAMILY_SIZE;
        if g % FAMILY_SIZE == 0 {
            let mut rng = rng_for(seed, &format!("synth/family/{family}"));
            let n = rng.gen_range(7..=11);
            family_blocks = (0..n)
                .map(|_| (0..rng.gen_range(2..=5)).map(|_| random_template(&mut rng)).collect())
                .collect();
            family_branch = (0..n)
                .map(|_| (PREDICATES[rng.gen_range(0..PREDICATES.len())], rng.gen_range(0..16)))
                .collect();
            family_base = random_topology(n, &mut rng);
            family_topologies.clear();
        }
        let mut rng = rng_for(seed, &format!("synth/group/{g}"));
        let mut succ = rewire(&family_base, 3, &mut rng);
        for _ in 0..20 {
            if !family_topologies.contains(&succ) {
                break;
            }
            succ = rewire(&family_base, 3, &mut rng);
        }
        family_topologies.push(succ.clone());
        groups.push(Group {
            name: format!("fn_{g:03}"),
            binary: format!("bin{}", g % N_BINARIES),
            blocks: family_blocks.clone(),
            succ,
            branch: family_branch.clone(),
            settings: pick_settings(variants, &mut rng),
        });
    }
    groups
}

struct Emitter<'a> {
    out: String,
    next_reg: usize,
    insn: usize,
    setting: &'a Setting,
    rng: ChaCha8Rng,
}

impl Emitter<'_> {
    fn reg(&mut self) -> String {
        let r = format!("%{}", self.next_reg);
        self.next_reg += 1;
        r
    }

    fn line(&mut self, text: &str) {
        let _ = writeln!(self.out, "  {text}, !insn.addr !{}", self.insn);
        self.insn += 1;
    }

    fn constant(&mut self, c: i64) -> i64 {
        if self.rng.gen_bool(0.3) {
            c + [-3, -2, -1, 1, 2, 3][self.rng.gen_range(0..6)]
        } else {
            c
        }
    }

    fn body(&mut self, templates: &[Template]) -> String {
        let mut last = "%arg1".to_string();
        let mut templates = templates.to_vec();
        if self.setting.compiler.0 == "clang" && templates.len() >= 2 {
            templates.swap(0, 1);
        }
        for t in templates {
            match t {
                Template::Arith { op, c } => {
                    let c = self.constant(c);
                    let r = self.reg();
                    if op == "add" && self.setting.compiler.0 == "clang" {
                        self.line(&format!("{r} = sub i32 {last}, {}", -c));
                    } else {
                        self.line(&format!("{r} = {op} i32 {last}, {c}"));
                    }
                    last = r;
                    if self.setting.optimization == "O0" {
                        let slot = 4 * self.rng.gen_range(1..8);
                        self.line(&format!("store i32 {last}, i32* %stack_var_-{slot}, align 4"));
                        let reload = format!("%{}reload{}", self.next_reg, self.insn);
                        self.next_reg += 1;
                        self.line(&format!("{reload} = load i32, i32* %stack_var_-{slot}, align 4"));
                        last = reload;
                    }
                }
                Template::Float { hex } => {
                    let a = self.reg();
                    self.line(&format!("{a} = sitofp i32 {last} to double"));
                    let b = self.reg();
                    self.line(&format!("{b} = fmul double {a}, 0x{hex:016X}"));
                    let c = self.reg();
                    self.line(&format!("{c} = fptosi double {b} to i32"));
                    last = c;
                }
                Template::LoadGlobal(addr) => {
                    let r = self.reg();
                    self.line(&format!("{r} = load i32, i32* @global_var_{addr:x}, align 4"));
                    last = r;
                }
                Template::StoreGlobal(addr) => {
                    self.line(&format!("store i32 {last}, i32* @global_var_{addr:x}, align 4"));
                }
                Template::Call(callee) => {
                    let r = self.reg();
                    self.line(&format!("{r} = call i32 @{callee}(i32 {last})"));
                    let ret_reg = if self.setting.architecture == "x86" { "@eax" } else { "@r0" };
                    self.line(&format!("store i32 {r}, i32* {ret_reg}, align 4"));
                    last = r;
                }
                Template::Deref => {
                    let p = self.reg();
                    self.line(&format!("{p} = inttoptr i32 {last} to i32*"));
                    let r = self.reg();
                    self.line(&format!("{r} = load i32, i32* {p}, align 4"));
                    last = r;
                }
            }
        }
        if self.setting.optimization == "O3" && self.rng.gen_bool(0.3) {
            let r = self.reg();
            self.line(&format!("{r} = select i1 true, i32 {last}, i32 0"));
            last = r;
        }
        last
    }
}

/// Tail-duplicate one join block with a single successor: a copy takes
/// over one of its predecessors.
fn duplicate_block(blocks: &mut Vec<Vec<Template>>, succ: &mut Vec<Vec<usize>>, branch: &mut Vec<(&'static str, i64)>, rng: &mut ChaCha8Rng) {
    let n = succ.len();
    let mut preds = vec![Vec::new(); n];
    for (a, ss) in succ.iter().enumerate() {
        for &b in ss {
            preds[b].push(a);
        }
    }
    let candidates: Vec<usize> = (1..n).filter(|&v| preds[v].len() >= 2 && succ[v].len() <= 1).collect();
    let Some(&v) = candidates.choose(rng) else {
        return;
    };
    let p = *preds[v].choose(rng).expect("join has predecessors");
    let copy = n;
    blocks.push(blocks[v].clone());
    succ.push(succ[v].clone());
    branch.push(branch[v]);
    for s in succ[p].iter_mut() {
        if *s == v {
            *s = copy;
        }
    }
}

fn render_function(group: &Group, setting: &Setting, variant: usize, seed: u64) -> String {
    let mut rng = rng_for(seed, &format!("synth/variant/{}/{variant}", group.name));
    let mut blocks = group.blocks.clone();
    let mut succ = group.succ.clone();
    let mut branch = group.branch.clone();
    if setting.optimization == "O3" {
        duplicate_block(&mut blocks, &mut succ, &mut branch, &mut rng);
    }
    let n = blocks.len();
    let mut preds = vec![Vec::new(); n];
    for (a, ss) in succ.iter().enumerate() {
        for &b in ss {
            preds[b].push(a);
        }
    }
    let base: u64 = 0x1000 + 0x40 * rng.gen_range(0..0x400);
    let labels: Vec<String> = (0..n)
        .map(|i| format!("dec_label_pc_{:x}", base + 0x30 * i as u64 + 4 * rng.gen_range(0..4)))
        .collect();

    let reg_start = rng.gen_range(0..4);
    let mut em = Emitter {
        out: String::new(),
        next_reg: reg_start,
        insn: 0,
        setting,
        rng,
    };
    let _ = writeln!(em.out, "define i32 @{}(i32 %arg1, i32 %arg2) local_unnamed_addr {{", group.name);
    for i in 0..n {
        if i > 0 {
            em.out.push('\n');
        }
        let label_line = format!("{}:", labels[i]);
        if preds[i].is_empty() {
            let _ = writeln!(em.out, "{label_line}");
        } else {
            let list: Vec<String> = preds[i].iter().map(|&p| format!("%{}", labels[p])).collect();
            let _ = writeln!(em.out, "{label_line:<50}; preds = {}", list.join(", "));
        }
        let last = em.body(&blocks[i]);
        match succ[i].as_slice() {
            [] => em.line(&format!("ret i32 {last}")),
            [s] => em.line(&format!("br label %{}", labels[*s])),
            [a, b] => {
                let (pred, c) = branch[i];
                let c = em.constant(c);
                let r = em.reg();
                em.line(&format!("{r} = icmp {pred} i32 {last}, {c}"));
                em.line(&format!("br i1 {r}, label %{}, label %{}", labels[*a], labels[*b]));
            }
            many => {
                let cases: Vec<String> = many[1..]
                    .iter()
                    .enumerate()
                    .map(|(k, s)| format!("i32 {}, label %{}", k + 1, labels[*s]))
                    .collect();
                em.line(&format!("switch i32 {last}, label %{} [ {} ]", labels[many[0]], cases.join(" ")));
            }
        }
    }
    em.out.push_str("}\n");
    em.out
}

/// One generated `.ll` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFile {
    /// Path relative to the corpus root, following
    /// `<project>/<compiler>-<version>/<arch>/<opt>/<binary>.ll`.
    pub rel_path: String,
    pub meta: FunctionMeta,
    pub text: String,
}

/// Generate the corpus in memory: `n_groups × variants` functions spread
/// over one file per (binary, setting).
pub fn synth_files(n_groups: usize, variants: usize, seed: u64) -> Result<Vec<SynthFile>> {
    let max = COMPILERS.len() * OPTIMIZATIONS.len() * ARCHITECTURES.len();
    if n_groups == 0 {
        return Err(Error::Argument("n_groups must be at least 1".into()));
    }
    if variants == 0 || variants > max {
        return Err(Error::Argument(format!("variants must lie in 1..={max}, got {variants}")));
    }
    let groups = build_groups(n_groups, variants, seed);
    let mut files: BTreeMap<String, SynthFile> = BTreeMap::new();
    for group in &groups {
        for (v, setting) in group.settings.iter().enumerate() {
            let rel_path = format!("{SYNTH_PROJECT}/{}/{}.ll", setting.dir(), group.binary);
            let file = files.entry(rel_path.clone()).or_insert_with(|| SynthFile {
                rel_path,
                meta: FunctionMeta {
                    project: SYNTH_PROJECT.into(),
                    binary: group.binary.clone(),
                    source_function: String::new(),
                    compiler: setting.compiler.0.into(),
                    compiler_version: setting.compiler.1.into(),
                    optimization: setting.optimization.into(),
                    architecture: setting.architecture.into(),
                },
                text: String::new(),
            });
            if !file.text.is_empty() {
                file.text.push('\n');
            }
            file.text.push_str(&render_function(group, setting, v, seed));
        }
    }
    let mut out: Vec<SynthFile> = files.into_values().collect();
    for f in &mut out {
        f.text.push('\n');
        for callee in CALLEES {
            let _ = writeln!(f.text, "declare i32 @{callee}(i32) local_unnamed_addr");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_groups: usize,
    pub n_functions: usize,
    pub files: Vec<String>,
    pub manifest: PathBuf,
}

/// Write the corpus under `root` together with a metadata manifest keyed
/// by relative path.
pub fn synth_corpus(root: &Path, n_groups: usize, variants: usize, seed: u64) -> Result<SynthSummary> {
    let files = synth_files(n_groups, variants, seed)?;
    let mut manifest = MetaManifest::new();
    for f in &files {
        let path = root.join(&f.rel_path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, &f.text).map_err(|e| Error::io(&path, e))?;
        manifest.insert(f.rel_path.clone(), f.meta.clone());
    }
    let manifest_path = root.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(SynthSummary {
        n_groups,
        n_functions: n_groups * variants,
        files: files.into_iter().map(|f| f.rel_path).collect(),
        manifest: manifest_path,
    })
}
